//! Two-stage observational cohorts.

use thiserror::Error;

use crate::bart::{BartError, CovariateMatrix};

/// Treatment code at one stage.
pub type Action = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CohortError {
    #[error("record {row}: {reason}")]
    InvalidRecord { row: usize, reason: String },
    #[error("cohort has no records")]
    Empty,
    #[error(transparent)]
    Matrix(#[from] BartError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageTwo {
    pub o2: Vec<f64>,
    pub a2: Action,
    /// Observed time from Stage-2 entry.
    pub time2: f64,
    pub delta2: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoStageRecord {
    pub id: String,
    pub o1: Vec<f64>,
    pub a1: Action,
    /// Stage-1 time: time to Stage-2 entry for entrants, otherwise the
    /// observed (possibly censored) event time.
    pub time1: f64,
    pub delta1: bool,
    pub stage2: Option<StageTwo>,
}

impl TwoStageRecord {
    pub fn is_entrant(&self) -> bool {
        self.stage2.is_some()
    }
}

/// Covariates needed to predict for a subject at both stages.
#[derive(Clone, Debug, PartialEq)]
pub struct NewSubject {
    pub id: String,
    pub o1: Vec<f64>,
    pub a1: Action,
    pub time1: f64,
    pub o2: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    o1_names: Vec<String>,
    o2_names: Vec<String>,
    records: Vec<TwoStageRecord>,
}

fn positive(t: f64) -> bool {
    t.is_finite() && t > 0.0
}

impl Cohort {
    pub fn new(
        o1_names: Vec<String>,
        o2_names: Vec<String>,
        records: Vec<TwoStageRecord>,
    ) -> Result<Self, CohortError> {
        if records.is_empty() {
            return Err(CohortError::Empty);
        }
        for (row, r) in records.iter().enumerate() {
            let bad = |reason: String| Err(CohortError::InvalidRecord { row, reason });
            if r.o1.len() != o1_names.len() {
                return bad(format!("{} Stage-1 covariates, expected {}", r.o1.len(), o1_names.len()));
            }
            if r.o1.iter().any(|v| !v.is_finite()) {
                return bad("non-finite Stage-1 covariate".into());
            }
            if !positive(r.time1) {
                return bad(format!("Stage-1 time {} is not positive", r.time1));
            }
            if let Some(s2) = &r.stage2 {
                if !r.delta1 {
                    return bad("entrant must have an observed Stage-1 entry event".into());
                }
                if s2.o2.len() != o2_names.len() {
                    return bad(format!("{} Stage-2 covariates, expected {}", s2.o2.len(), o2_names.len()));
                }
                if s2.o2.iter().any(|v| !v.is_finite()) {
                    return bad("non-finite Stage-2 covariate".into());
                }
                if !positive(s2.time2) {
                    return bad(format!("Stage-2 time {} is not positive", s2.time2));
                }
            }
        }
        Ok(Self {
            o1_names,
            o2_names,
            records,
        })
    }

    pub fn records(&self) -> &[TwoStageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn o1_names(&self) -> &[String] {
        &self.o1_names
    }

    pub fn o2_names(&self) -> &[String] {
        &self.o2_names
    }

    /// Cohort indices of Stage-2 entrants, in record order.
    pub fn entrant_rows(&self) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].is_entrant()).collect()
    }

    /// Predictor names for the Stage-2 model: history, then the action.
    pub fn stage2_names(&self) -> Vec<String> {
        let mut v = self.o1_names.clone();
        v.extend(["a1".to_string(), "time1".to_string()]);
        v.extend(self.o2_names.iter().cloned());
        v.push("a2".into());
        v
    }

    pub fn stage1_names(&self) -> Vec<String> {
        let mut v = self.o1_names.clone();
        v.push("a1".into());
        v
    }

    /// Re-check that new subjects carry both covariate blocks.
    pub fn check_new_subjects(&self, subjects: &[NewSubject]) -> Result<(), CohortError> {
        for (row, s) in subjects.iter().enumerate() {
            let bad = |reason: String| Err(CohortError::InvalidRecord { row, reason });
            if s.o1.len() != self.o1_names.len() || s.o2.len() != self.o2_names.len() {
                return bad("new subject does not match the covariate schema".into());
            }
            if s.o1.iter().chain(&s.o2).any(|v| !v.is_finite()) || !positive(s.time1) {
                return bad("new subject has missing or invalid values".into());
            }
        }
        Ok(())
    }

    /// Subset (with repetition) by record index.
    pub fn resample(&self, rows: &[usize]) -> Result<Self, CohortError> {
        Self::new(
            self.o1_names.clone(),
            self.o2_names.clone(),
            rows.iter().map(|&i| self.records[i].clone()).collect(),
        )
    }
}

pub(crate) fn stage2_row(o1: &[f64], a1: Action, time1: f64, o2: &[f64], a2: Action) -> Vec<f64> {
    let mut v = Vec::with_capacity(o1.len() + o2.len() + 3);
    v.extend_from_slice(o1);
    v.push(f64::from(a1));
    v.push(time1);
    v.extend_from_slice(o2);
    v.push(f64::from(a2));
    v
}

pub(crate) fn stage1_row(o1: &[f64], a1: Action) -> Vec<f64> {
    let mut v = o1.to_vec();
    v.push(f64::from(a1));
    v
}

/// Stage-2 design over entrants with their observed actions.
pub(crate) fn stage2_matrix(cohort: &Cohort, entrants: &[usize]) -> Result<CovariateMatrix, BartError> {
    let rows: Vec<Vec<f64>> = entrants
        .iter()
        .map(|&i| {
            let r = &cohort.records[i];
            let s2 = r.stage2.as_ref().expect("entrant");
            stage2_row(&r.o1, r.a1, r.time1, &s2.o2, s2.a2)
        })
        .collect();
    CovariateMatrix::from_rows(&rows)
}

pub(crate) fn stage1_matrix(cohort: &Cohort) -> Result<CovariateMatrix, BartError> {
    let rows: Vec<Vec<f64>> = cohort.records.iter().map(|r| stage1_row(&r.o1, r.a1)).collect();
    CovariateMatrix::from_rows(&rows)
}

/// Sorted distinct codes.
pub(crate) fn distinct_actions(codes: impl Iterator<Item = Action>) -> Vec<Action> {
    let mut v: Vec<Action> = codes.collect();
    v.sort_unstable();
    v.dedup();
    v
}
