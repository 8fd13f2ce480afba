//! Two-stage Q-learning with censored log-normal AFT regressions, and a
//! subject-level bootstrap around it.

mod formula;
mod mle;

pub use formula::{ModelFormula, Term};
pub use mle::{fit_lognormal_aft, log_likelihood, score_and_hessian, LognormalAftFit};

use log::{debug, info};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::bart::{BartError, CovariateMatrix};
use crate::cohort::{distinct_actions, stage1_row, stage2_row, Action, Cohort, CohortError, NewSubject};
use crate::sampling::{quantile, RngStream, SamplingError};

const STREAM_BOOTSTRAP: u64 = 4 << 48;
const ATTEMPTS_PER_REPLICATE: usize = 10;

#[derive(Debug, Error)]
pub enum QlearnError {
    #[error("formula: {0}")]
    Formula(String),
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("time at row {row} is {value}; times must be positive")]
    InvalidTime { row: usize, value: f64 },
    #[error("{events} events, need at least {needed}")]
    TooFewEvents { events: usize, needed: usize },
    #[error("design is rank deficient (singular values {smallest:.3e} / {largest:.3e})")]
    RankDeficient { smallest: f64, largest: f64 },
    #[error("Stage-{stage} fit did not converge")]
    NotConverged { stage: u8 },
    #[error("Stage-{stage} fit: {source}")]
    Stage { stage: u8, source: Box<QlearnError> },
    #[error("no subjects entered Stage 2")]
    NoEntrants,
    #[error("bootstrap replicate {replicate} failed {attempts} resamples in a row")]
    BootstrapExhausted { replicate: usize, attempts: usize },
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Bart(#[from] BartError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct QFormulas {
    pub stage1: ModelFormula,
    pub stage2: ModelFormula,
}

/// Predicted mean log time under each candidate action.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionPredictions {
    pub actions: Vec<Action>,
    pub a_opt: Vec<Action>,
    /// `by_action[k][i]`: subject `i` under `actions[k]`.
    pub by_action: Vec<Vec<f64>>,
}

impl ActionPredictions {
    pub fn optimal_value(&self, i: usize) -> f64 {
        let k = self.actions.iter().position(|&a| a == self.a_opt[i]).expect("known action");
        self.by_action[k][i]
    }

    /// Last action minus first action, per subject.
    pub fn contrast(&self) -> Vec<f64> {
        let first = &self.by_action[0];
        let last = &self.by_action[self.by_action.len() - 1];
        last.iter().zip(first).map(|(l, f)| l - f).collect()
    }
}

#[derive(Clone, Debug)]
pub struct QStage {
    pub fit: LognormalAftFit,
    pub column_names: Vec<String>,
    pub train: ActionPredictions,
}

#[derive(Clone, Debug)]
pub struct QlearnResult {
    pub entrant_rows: Vec<usize>,
    pub stage2: QStage,
    pub stage1: QStage,
    /// Plug-in Stage-1 responses used for the Stage-1 fit.
    pub stage1_time: Vec<f64>,
    pub stage1_event: Vec<bool>,
    pub new_stage2: Option<ActionPredictions>,
    pub new_stage1: Option<ActionPredictions>,
}

fn predict_actions(
    fit: &LognormalAftFit,
    formula: &ModelFormula,
    names: &[String],
    x: &CovariateMatrix,
    action_col: usize,
    actions: &[Action],
) -> Result<ActionPredictions, QlearnError> {
    let by_action: Vec<Vec<f64>> = actions
        .iter()
        .map(|&a| {
            let d = formula.build_design(names, &x.with_column_set(action_col, f64::from(a)))?;
            Ok(fit.predict(&d).iter().copied().collect())
        })
        .collect::<Result<_, QlearnError>>()?;
    let a_opt = (0..x.n_rows())
        .map(|i| {
            let mut best = 0;
            for k in 1..actions.len() {
                if by_action[k][i] > by_action[best][i] {
                    best = k;
                }
            }
            actions[best]
        })
        .collect();
    Ok(ActionPredictions {
        actions: actions.to_vec(),
        a_opt,
        by_action,
    })
}

fn fit_stage(
    stage: u8,
    formula: &ModelFormula,
    names: &[String],
    x: &CovariateMatrix,
    time: &[f64],
    event: &[bool],
) -> Result<LognormalAftFit, QlearnError> {
    let wrap = |e| QlearnError::Stage {
        stage,
        source: Box::new(e),
    };
    let design = formula.build_design(names, x).map_err(wrap)?;
    let fit = fit_lognormal_aft(&design, time, event).map_err(wrap)?;
    if !fit.converged {
        return Err(QlearnError::NotConverged { stage });
    }
    Ok(fit)
}

/// Backward induction: Stage 2 on entrants, plug-in optimal totals, then
/// Stage 1 on everyone.
pub fn qlearn_two_stage(
    cohort: &Cohort,
    formulas: &QFormulas,
    newdata: Option<&[NewSubject]>,
) -> Result<QlearnResult, QlearnError> {
    if let Some(new) = newdata {
        cohort.check_new_subjects(new)?;
    }
    let records = cohort.records();
    let entrants = cohort.entrant_rows();
    if entrants.is_empty() {
        return Err(QlearnError::NoEntrants);
    }
    let names2 = cohort.stage2_names();
    let a2_col = names2.len() - 1;
    let rows2: Vec<Vec<f64>> = entrants
        .iter()
        .map(|&i| {
            let r = &records[i];
            let s2 = r.stage2.as_ref().expect("entrant");
            stage2_row(&r.o1, r.a1, r.time1, &s2.o2, s2.a2)
        })
        .collect();
    let x2 = CovariateMatrix::from_rows(&rows2)?;
    let (t2, d2): (Vec<f64>, Vec<bool>) = entrants
        .iter()
        .map(|&i| {
            let s2 = records[i].stage2.as_ref().expect("entrant");
            (s2.time2, s2.delta2)
        })
        .unzip();
    let fit2 = fit_stage(2, &formulas.stage2, &names2, &x2, &t2, &d2)?;
    let actions2 = distinct_actions(entrants.iter().map(|&i| records[i].stage2.as_ref().expect("entrant").a2));
    let train2 = predict_actions(&fit2, &formulas.stage2, &names2, &x2, a2_col, &actions2)?;

    let mut stage1_time: Vec<f64> = records.iter().map(|r| r.time1).collect();
    let mut stage1_event: Vec<bool> = records.iter().map(|r| r.delta1).collect();
    for (k, &i) in entrants.iter().enumerate() {
        let r = &records[i];
        let s2 = r.stage2.as_ref().expect("entrant");
        stage1_time[i] = if s2.a2 == train2.a_opt[k] && s2.delta2 {
            r.time1 + s2.time2
        } else {
            r.time1 + train2.optimal_value(k).exp()
        };
        stage1_event[i] = true;
    }

    let names1 = cohort.stage1_names();
    let a1_col = names1.len() - 1;
    let rows1: Vec<Vec<f64>> = records.iter().map(|r| stage1_row(&r.o1, r.a1)).collect();
    let x1 = CovariateMatrix::from_rows(&rows1)?;
    let fit1 = fit_stage(1, &formulas.stage1, &names1, &x1, &stage1_time, &stage1_event)?;
    let actions1 = distinct_actions(records.iter().map(|r| r.a1));
    let train1 = predict_actions(&fit1, &formulas.stage1, &names1, &x1, a1_col, &actions1)?;

    let (new_stage2, new_stage1) = match newdata {
        Some(new) if !new.is_empty() => {
            let r2: Vec<Vec<f64>> = new.iter().map(|s| stage2_row(&s.o1, s.a1, s.time1, &s.o2, actions2[0])).collect();
            let r1: Vec<Vec<f64>> = new.iter().map(|s| stage1_row(&s.o1, actions1[0])).collect();
            (
                Some(predict_actions(
                    &fit2,
                    &formulas.stage2,
                    &names2,
                    &CovariateMatrix::from_rows(&r2)?,
                    a2_col,
                    &actions2,
                )?),
                Some(predict_actions(
                    &fit1,
                    &formulas.stage1,
                    &names1,
                    &CovariateMatrix::from_rows(&r1)?,
                    a1_col,
                    &actions1,
                )?),
            )
        }
        _ => (None, None),
    };

    Ok(QlearnResult {
        entrant_rows: entrants,
        stage2: QStage {
            fit: fit2,
            column_names: formulas.stage2.column_names(),
            train: train2,
        },
        stage1: QStage {
            fit: fit1,
            column_names: formulas.stage1.column_names(),
            train: train1,
        },
        stage1_time,
        stage1_event,
        new_stage2,
        new_stage1,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IntervalSummary {
    pub estimate: f64,
    pub boot_mean: f64,
    pub se: f64,
    pub percentile_lower: f64,
    pub percentile_upper: f64,
    pub normal_lower: f64,
    pub normal_upper: f64,
}

impl IntervalSummary {
    fn new(estimate: f64, boot: &[f64]) -> Result<Self, QlearnError> {
        let b = boot.len() as f64;
        let mean = boot.iter().sum::<f64>() / b;
        let se = (boot.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (b - 1.0)).sqrt();
        Ok(Self {
            estimate,
            boot_mean: mean,
            se,
            percentile_lower: quantile(boot, 0.025)?,
            percentile_upper: quantile(boot, 0.975)?,
            normal_lower: estimate - 1.959_963_984_540_054 * se,
            normal_upper: estimate + 1.959_963_984_540_054 * se,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoefficientSummary {
    pub stage: u8,
    pub term: String,
    #[serde(flatten)]
    pub interval: IntervalSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubjectSummary {
    pub id: String,
    pub stage: u8,
    /// `"pred_a<code>"` or `"contrast"`.
    pub quantity: String,
    #[serde(flatten)]
    pub interval: IntervalSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BootstrapSummary {
    pub replicates: usize,
    pub redraws: usize,
    pub coefficients: Vec<CoefficientSummary>,
    pub subjects: Vec<SubjectSummary>,
}

/// Coefficients (with `Log(scale)` last at each stage) and per-subject
/// quantities, flattened in a fixed order.
fn flatten(res: &QlearnResult, targets: &Targets) -> Vec<f64> {
    let mut v = Vec::new();
    for st in [&res.stage1, &res.stage2] {
        v.extend(st.fit.beta.iter());
        v.push(st.fit.log_scale);
    }
    for (stage, preds) in [(1, &res.new_stage1), (2, &res.new_stage2)] {
        let preds = match preds {
            Some(p) => p,
            None if stage == 1 => &res.stage1.train,
            None => &res.stage2.train,
        };
        if stage == 2 && !targets.has_stage2 {
            continue;
        }
        for i in 0..preds.a_opt.len() {
            for k in 0..preds.by_action.len() {
                v.push(preds.by_action[k][i]);
            }
            v.push(preds.by_action[preds.by_action.len() - 1][i] - preds.by_action[0][i]);
        }
    }
    v
}

struct Targets {
    new: Option<Vec<NewSubject>>,
    has_stage2: bool,
}

/// Subject-level bootstrap of the full two-stage pipeline.
///
/// Per-subject summaries are for `targets` when given (both stages), and
/// otherwise for the original cohort at Stage 1 only.
pub fn bootstrap_qlearn(
    cohort: &Cohort,
    formulas: &QFormulas,
    replicates: usize,
    targets: Option<&[NewSubject]>,
    seed: u64,
) -> Result<BootstrapSummary, QlearnError> {
    if replicates < 2 {
        return Err(QlearnError::InvalidInput("need at least 2 bootstrap replicates".into()));
    }
    let n = cohort.len();
    let tg = match targets {
        Some(t) => Targets {
            new: Some(t.to_vec()),
            has_stage2: true,
        },
        None => Targets {
            new: Some(
                cohort
                    .records()
                    .iter()
                    .map(|r| NewSubject {
                        id: r.id.clone(),
                        o1: r.o1.clone(),
                        a1: r.a1,
                        time1: r.time1,
                        o2: vec![0.0; cohort.o2_names().len()],
                    })
                    .collect(),
            ),
            has_stage2: false,
        },
    };
    let new = tg.new.as_deref();

    info!("bootstrapping Q-learning with {replicates} resamples");
    let results: Vec<Result<(Vec<f64>, usize), QlearnError>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = RngStream::new(seed, STREAM_BOOTSTRAP | r as u64);
            for attempt in 0..ATTEMPTS_PER_REPLICATE {
                let rows: Vec<usize> = (0..n).map(|_| rng.index(n)).collect();
                let res = cohort.resample(&rows).map_err(QlearnError::from).and_then(|c| qlearn_two_stage(&c, formulas, new));
                match res {
                    Ok(res) => return Ok((flatten(&res, &tg), attempt)),
                    Err(e) => debug!("bootstrap replicate {r} attempt {attempt}: {e}"),
                }
            }
            Err(QlearnError::BootstrapExhausted {
                replicate: r,
                attempts: ATTEMPTS_PER_REPLICATE,
            })
        })
        .collect();
    let mut boot = Vec::with_capacity(replicates);
    let mut redraws = 0;
    for r in results {
        let (v, extra) = r?;
        boot.push(v);
        redraws += extra;
    }
    if redraws > 0 {
        info!("{redraws} bootstrap resamples were redrawn after failed fits");
    }

    let point = qlearn_two_stage(cohort, formulas, new)?;
    let est = flatten(&point, &tg);
    let column = |j: usize| -> Vec<f64> { boot.iter().map(|b| b[j]).collect() };
    let mut j = 0;
    let mut coefficients = Vec::new();
    for (stage, st) in [(1u8, &point.stage1), (2u8, &point.stage2)] {
        let terms = st.column_names.iter().cloned().chain(std::iter::once("Log(scale)".to_string()));
        for term in terms {
            coefficients.push(CoefficientSummary {
                stage,
                term,
                interval: IntervalSummary::new(est[j], &column(j))?,
            });
            j += 1;
        }
    }
    let subjects_list = tg.new.as_deref().unwrap_or(&[]);
    let mut subjects = Vec::new();
    for (stage, preds) in [(1u8, &point.new_stage1), (2u8, &point.new_stage2)] {
        if stage == 2 && !tg.has_stage2 {
            continue;
        }
        let preds = preds.as_ref().expect("targets are always predicted");
        for s in subjects_list {
            let labels = preds
                .actions
                .iter()
                .map(|a| format!("pred_a{a}"))
                .chain(std::iter::once("contrast".to_string()));
            for quantity in labels {
                subjects.push(SubjectSummary {
                    id: s.id.clone(),
                    stage,
                    quantity,
                    interval: IntervalSummary::new(est[j], &column(j))?,
                });
                j += 1;
            }
        }
    }
    Ok(BootstrapSummary {
        replicates,
        redraws,
        coefficients,
        subjects,
    })
}

/// Q-model formulas from the simulation study.
pub mod presets {
    pub const Q1T: &str = "x1 + b1 + x1*b1 + a1 + a1*x1 + a1*b1";
    pub const Q1F: &str = "x1 + b1 + z1 + a1 + a1*x1 + a1*z1";
    pub const Q2T: &str = "x2 + b2 + x2*b2 + x1 + b1 + x1*b1 + a2 + a2*x2 + a2*b2";
    pub const Q2F: &str = "x2 + b2 + z2 + x1 + b1 + a2 + a2*x2 + a2*z2";
    pub const QLIN1: &str = "x1 + b1 + z1 + a1";
    pub const QLIN2: &str = "x2 + b2 + z2 + x1 + b1 + z1 + a2";
    pub const QINT1: &str = "x1 + b1 + z1 + x1*b1 + x1*z1 + b1*z1 + a1 + a1*x1 + a1*b1 + a1*z1";
    pub const QINT2: &str = "x2 + b2 + z2 + x2*b2 + x2*z2 + b2*z2 + x1 + b1 + z1 + x1*b1 + x1*z1 + b1*z1 \
                              + a2 + a2*x2 + a2*b2 + a2*z2";
}

#[cfg(test)]
mod tests;
