//! Backward-induction estimation of a two-stage optimal treatment regime
//! with AFT-BART at each stage.
//!
//! Stage 2 is fitted once. Every kept Stage-2 draw yields an optimal action
//! per entrant and an event time under that action, which turns the cohort
//! into one augmented Stage-1 dataset. Each of those datasets gets its own
//! short Stage-1 chain, and the chains run in parallel on independent
//! random streams.

use log::info;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aft::{fit_with_model, predictive_time, AftBartFit, AftError, ChainLength};
use crate::bart::{BartError, BartHyper, BartModel, CovariateMatrix, ForestDraw};
use crate::cohort::{
    distinct_actions, stage1_matrix, stage1_row, stage2_matrix, stage2_row, Action, Cohort, CohortError,
    NewSubject,
};
use crate::sampling::RngStream;

const STREAM_STAGE2: u64 = 1 << 48;
const STREAM_STEP2: u64 = 2 << 48;
const STREAM_STAGE1: u64 = 3 << 48;

#[derive(Debug, Error)]
pub enum DtrError {
    #[error("no subjects entered Stage 2")]
    NoEntrants,
    #[error("Stage-2 fit failed: {0}")]
    Stage2(AftError),
    #[error("Stage-1 chain {index} failed: {source}")]
    Stage1 { index: usize, source: AftError },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Bart(#[from] BartError),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

/// How entrants censored at their optimal action enter Stage 1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImputeMode {
    /// Draw the Stage-2 event time and pass the total time as an event.
    #[default]
    Event,
    /// Pass the observed total time as censored.
    Censored,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DtrConfig {
    pub hyper: BartHyper,
    pub burn2: usize,
    pub keep: usize,
    pub burn1: usize,
    pub impute: ImputeMode,
    pub seed: u64,
    /// Worker threads for the Stage-1 ensemble. Results do not depend on it.
    #[serde(skip)]
    pub threads: usize,
}

impl Default for DtrConfig {
    fn default() -> Self {
        Self {
            hyper: BartHyper::default(),
            burn2: 1000,
            keep: 1000,
            burn1: 250,
            impute: ImputeMode::Event,
            seed: 0,
            threads: 1,
        }
    }
}

impl DtrConfig {
    pub fn validate(&self) -> Result<(), DtrError> {
        self.hyper.validate()?;
        if self.keep == 0 {
            return Err(DtrError::Config("keep must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(DtrError::Config("threads must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-stage posterior over a set of subjects: rows are subjects, columns
/// are draws.
#[derive(Clone, Debug, PartialEq)]
pub struct StagePosterior {
    pub actions: Vec<Action>,
    pub a_opt: DMatrix<Action>,
    pub yhat_opt: DMatrix<f64>,
    /// One matrix per entry of `actions`.
    pub yhat_by_action: Vec<DMatrix<f64>>,
}

impl StagePosterior {
    fn from_action_means(actions: Vec<Action>, yhat_by_action: Vec<DMatrix<f64>>) -> Self {
        let (n, k) = yhat_by_action[0].shape();
        let mut a_opt = DMatrix::from_element(n, k, actions[0]);
        let mut yhat_opt = yhat_by_action[0].clone();
        for (a, m) in actions.iter().zip(&yhat_by_action).skip(1) {
            for d in 0..k {
                for i in 0..n {
                    if m[(i, d)] > yhat_opt[(i, d)] {
                        yhat_opt[(i, d)] = m[(i, d)];
                        a_opt[(i, d)] = *a;
                    }
                }
            }
        }
        Self {
            actions,
            a_opt,
            yhat_opt,
            yhat_by_action,
        }
    }

    pub fn n_subjects(&self) -> usize {
        self.a_opt.nrows()
    }

    pub fn n_draws(&self) -> usize {
        self.a_opt.ncols()
    }

    pub fn yhat_for(&self, action: Action) -> Option<&DMatrix<f64>> {
        self.actions.iter().position(|&a| a == action).map(|k| &self.yhat_by_action[k])
    }
}

#[derive(Clone, Debug)]
pub struct DtrPosterior {
    /// Cohort indices of the Stage-2 entrants, matching `stage2` rows.
    pub entrant_rows: Vec<usize>,
    pub stage2: StagePosterior,
    pub sigma2: Vec<f64>,
    pub stage1: StagePosterior,
    pub sigma1: Vec<f64>,
    pub new_stage2: Option<StagePosterior>,
    pub new_stage1: Option<StagePosterior>,
    pub stage2_geweke_z: Option<f64>,
}

/// Which branch produced an entrant's optimal Stage-2 time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimalTimeSource {
    /// Observed at the optimal action with an event: time passed through.
    ObservedEvent,
    /// Observed at the optimal action but censored: drawn above the censoring time.
    ObservedCensored,
    /// Observed at another action: drawn from the counterfactual predictive.
    Counterfactual,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Sample {
    pub a2_opt: Vec<Action>,
    pub t2_opt: Vec<f64>,
    pub source: Vec<OptimalTimeSource>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentedRow {
    pub time: f64,
    pub event: bool,
}

pub fn fit_stage2(
    cohort: &Cohort,
    hyper: &BartHyper,
    len: ChainLength,
    rng: &mut RngStream,
) -> Result<(AftBartFit, Vec<usize>), DtrError> {
    let entrants = cohort.entrant_rows();
    if entrants.is_empty() {
        return Err(DtrError::NoEntrants);
    }
    let x = stage2_matrix(cohort, &entrants)?;
    let (time, event): (Vec<f64>, Vec<bool>) = entrants
        .iter()
        .map(|&i| {
            let s2 = cohort.records()[i].stage2.as_ref().expect("entrant");
            (s2.time2, s2.delta2)
        })
        .unzip();
    let fit = crate::aft::fit_aft_bart(&x, &time, &event, hyper.clone(), len, cohort.stage2_names(), rng)
        .map_err(DtrError::Stage2)?;
    Ok((fit, entrants))
}

/// Mean log-time predictions for every draw with the action column set to
/// each candidate action in turn.
fn action_means(
    draws: &[ForestDraw],
    rows: &[Vec<f64>],
    action_col: usize,
    actions: &[Action],
) -> Result<Vec<DMatrix<f64>>, BartError> {
    actions
        .iter()
        .map(|&a| {
            let x = CovariateMatrix::from_rows(rows)?.with_column_set(action_col, f64::from(a));
            let mut m = DMatrix::zeros(rows.len(), draws.len());
            for (d, draw) in draws.iter().enumerate() {
                for (i, v) in draw.predict(&x)?.into_iter().enumerate() {
                    m[(i, d)] = v;
                }
            }
            Ok(m)
        })
        .collect()
}

/// Optimal action and event time under it for every entrant, for one
/// Stage-2 draw.
pub fn sample_stage2_optimal(
    cohort: &Cohort,
    entrants: &[usize],
    post: &StagePosterior,
    sigmas: &[f64],
    draw: usize,
    rng: &mut RngStream,
) -> Result<Stage2Sample, AftError> {
    let sigma = sigmas[draw];
    let mut out = Stage2Sample {
        a2_opt: Vec::with_capacity(entrants.len()),
        t2_opt: Vec::with_capacity(entrants.len()),
        source: Vec::with_capacity(entrants.len()),
    };
    for (k, &i) in entrants.iter().enumerate() {
        let s2 = cohort.records()[i].stage2.as_ref().expect("entrant");
        let a_opt = post.a_opt[(k, draw)];
        let mean = post.yhat_opt[(k, draw)];
        let (t, source) = if s2.a2 == a_opt && s2.delta2 {
            (s2.time2, OptimalTimeSource::ObservedEvent)
        } else if s2.a2 == a_opt {
            (
                predictive_time(mean, sigma, Some(s2.time2), rng)?,
                OptimalTimeSource::ObservedCensored,
            )
        } else {
            (predictive_time(mean, sigma, None, rng)?, OptimalTimeSource::Counterfactual)
        };
        out.a2_opt.push(a_opt);
        out.t2_opt.push(t);
        out.source.push(source);
    }
    Ok(out)
}

/// Stage-1 response for every subject given one Stage-2 sample.
pub fn build_stage1_dataset(
    cohort: &Cohort,
    entrants: &[usize],
    sample: &Stage2Sample,
    mode: ImputeMode,
) -> Vec<AugmentedRow> {
    let mut rows: Vec<AugmentedRow> = cohort
        .records()
        .iter()
        .map(|r| AugmentedRow {
            time: r.time1,
            event: r.delta1,
        })
        .collect();
    for (k, &i) in entrants.iter().enumerate() {
        let r = &cohort.records()[i];
        let s2 = r.stage2.as_ref().expect("entrant");
        rows[i] = match (mode, sample.source[k]) {
            (ImputeMode::Censored, OptimalTimeSource::ObservedCensored) => AugmentedRow {
                time: r.time1 + s2.time2,
                event: false,
            },
            _ => AugmentedRow {
                time: r.time1 + sample.t2_opt[k],
                event: true,
            },
        };
    }
    rows
}

struct Stage1Draw {
    by_action: Vec<Vec<f64>>,
    new_by_action: Vec<Vec<f64>>,
    sigma: f64,
}

pub fn optimize_dtr(
    cohort: &Cohort,
    newdata: Option<&[NewSubject]>,
    config: &DtrConfig,
) -> Result<DtrPosterior, DtrError> {
    config.validate()?;
    if let Some(new) = newdata {
        cohort.check_new_subjects(new)?;
    }
    let records = cohort.records();
    let len2 = ChainLength {
        burn: config.burn2,
        keep: config.keep,
    };
    info!("fitting Stage 2 ({} burn, {} kept)", config.burn2, config.keep);
    let mut rng2 = RngStream::new(config.seed, STREAM_STAGE2);
    let (fit2, entrants) = fit_stage2(cohort, &config.hyper, len2, &mut rng2)?;
    let sigma2 = fit2.sigmas();

    let actions2 = distinct_actions(entrants.iter().map(|&i| records[i].stage2.as_ref().expect("entrant").a2));
    let rows2: Vec<Vec<f64>> = entrants
        .iter()
        .map(|&i| {
            let r = &records[i];
            let s2 = r.stage2.as_ref().expect("entrant");
            stage2_row(&r.o1, r.a1, r.time1, &s2.o2, s2.a2)
        })
        .collect();
    let a2_col = cohort.stage2_names().len() - 1;
    let stage2 = StagePosterior::from_action_means(
        actions2.clone(),
        action_means(&fit2.draws, &rows2, a2_col, &actions2)?,
    );
    let new_stage2 = match newdata {
        Some(new) if !new.is_empty() => {
            let rows: Vec<Vec<f64>> =
                new.iter().map(|s| stage2_row(&s.o1, s.a1, s.time1, &s.o2, actions2[0])).collect();
            Some(StagePosterior::from_action_means(
                actions2.clone(),
                action_means(&fit2.draws, &rows, a2_col, &actions2)?,
            ))
        }
        _ => None,
    };

    let actions1 = distinct_actions(records.iter().map(|r| r.a1));
    let x1 = stage1_matrix(cohort)?;
    let model1 = BartModel::new(&x1, config.hyper.clone())?;
    let a1_col = cohort.stage1_names().len() - 1;
    let x1_by_action: Vec<CovariateMatrix> =
        actions1.iter().map(|&a| x1.with_column_set(a1_col, f64::from(a))).collect();
    let new_x1_by_action: Vec<CovariateMatrix> = match newdata {
        Some(new) if !new.is_empty() => {
            let rows: Vec<Vec<f64>> = new.iter().map(|s| stage1_row(&s.o1, actions1[0])).collect();
            let base = CovariateMatrix::from_rows(&rows)?;
            actions1.iter().map(|&a| base.with_column_set(a1_col, f64::from(a))).collect()
        }
        _ => Vec::new(),
    };

    let len1 = ChainLength {
        burn: config.burn1,
        keep: 1,
    };
    let schema1 = cohort.stage1_names();
    let run_chain = |d: usize| -> Result<Stage1Draw, DtrError> {
        let wrap = |source| DtrError::Stage1 { index: d, source };
        let mut rng = RngStream::new(config.seed, STREAM_STEP2 | d as u64);
        let sample = sample_stage2_optimal(cohort, &entrants, &stage2, &sigma2, d, &mut rng).map_err(wrap)?;
        let data = build_stage1_dataset(cohort, &entrants, &sample, config.impute);
        let (time, event): (Vec<f64>, Vec<bool>) = data.iter().map(|r| (r.time, r.event)).unzip();
        let mut rng = RngStream::new(config.seed, STREAM_STAGE1 | d as u64);
        let fit = fit_with_model(&model1, &time, &event, len1, schema1.clone(), &mut rng).map_err(wrap)?;
        let draw = &fit.draws[0];
        let predict_all = |xs: &[CovariateMatrix]| -> Result<Vec<Vec<f64>>, DtrError> {
            xs.iter()
                .map(|x| draw.predict(x).map_err(|e| wrap(AftError::Bart(e))))
                .collect()
        };
        Ok(Stage1Draw {
            by_action: predict_all(&x1_by_action)?,
            new_by_action: predict_all(&new_x1_by_action)?,
            sigma: draw.sigma,
        })
    };

    info!(
        "fitting {} Stage-1 chains ({} burn each) on {} threads",
        config.keep, config.burn1, config.threads
    );
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| DtrError::ThreadPool(e.to_string()))?;
    let results: Vec<Result<Stage1Draw, DtrError>> =
        pool.install(|| (0..config.keep).into_par_iter().map(run_chain).collect());
    let mut draws1 = Vec::with_capacity(config.keep);
    for r in results {
        draws1.push(r?);
    }

    let n = records.len();
    let assemble = |pick: &dyn Fn(&Stage1Draw) -> &Vec<Vec<f64>>, rows: usize| -> Vec<DMatrix<f64>> {
        (0..actions1.len())
            .map(|k| DMatrix::from_fn(rows, config.keep, |i, d| pick(&draws1[d])[k][i]))
            .collect()
    };
    let stage1 = StagePosterior::from_action_means(actions1.clone(), assemble(&|s| &s.by_action, n));
    let new_stage1 = match newdata {
        Some(new) if !new.is_empty() => Some(StagePosterior::from_action_means(
            actions1.clone(),
            assemble(&|s| &s.new_by_action, new.len()),
        )),
        _ => None,
    };

    Ok(DtrPosterior {
        entrant_rows: entrants,
        stage2,
        sigma2,
        stage1,
        sigma1: draws1.iter().map(|s| s.sigma).collect(),
        new_stage2,
        new_stage1,
        stage2_geweke_z: fit2.sigma_geweke_z,
    })
}
