//! Replicated simulation studies comparing AFT-BART backward induction
//! with Q-learning models on a fixed test set.

use log::info;
use nalgebra::DMatrix;
use serde::Serialize;

use super::CliError;
use crate::cohort::Action;
use crate::dtr::{optimize_dtr, DtrConfig, DtrPosterior, StagePosterior};
use crate::metrics::{coverage_rate, mse_decomposition, posterior_mode_action, pot, PotSummary};
use crate::qlearn::{presets, qlearn_two_stage, QFormulas, QlearnResult};
use crate::sampling::{mix_seed, quantile};
use crate::simulation::{generate, CensoringScheme, Scenario, ScenarioConfig, SubjectTruth};

#[derive(Clone, Debug, PartialEq)]
pub enum MethodKind {
    AftBml,
    Qlearn(QFormulas),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Method {
    pub name: String,
    pub kind: MethodKind,
}

impl Method {
    /// `aft-bml`; `q1t2t`, `q1t2f`, `q1f2t`, `q1f2f` (Scenario 1); `qlin`,
    /// `qint` (Scenario 2).
    pub fn parse(name: &str, scenario: Scenario) -> Result<Self, CliError> {
        let q = |f1: &str, f2: &str| {
            Ok::<_, CliError>(MethodKind::Qlearn(QFormulas {
                stage1: f1.parse()?,
                stage2: f2.parse()?,
            }))
        };
        let lower = name.trim().to_ascii_lowercase();
        let kind = match (lower.as_str(), scenario) {
            ("aft-bml", _) => MethodKind::AftBml,
            ("q1t2t", Scenario::One) => q(presets::Q1T, presets::Q2T)?,
            ("q1t2f", Scenario::One) => q(presets::Q1T, presets::Q2F)?,
            ("q1f2t", Scenario::One) => q(presets::Q1F, presets::Q2T)?,
            ("q1f2f", Scenario::One) => q(presets::Q1F, presets::Q2F)?,
            ("qlin", Scenario::Two) => q(presets::QLIN1, presets::QLIN2)?,
            ("qint", Scenario::Two) => q(presets::QINT1, presets::QINT2)?,
            _ => {
                return Err(CliError::Usage(format!(
                    "method {name:?} is not available for scenario {}",
                    scenario.number()
                )))
            }
        };
        Ok(Self { name: lower, kind })
    }

    pub fn defaults(scenario: Scenario) -> Vec<Self> {
        let names: &[&str] = match scenario {
            Scenario::One => &["aft-bml", "q1t2t", "q1t2f", "q1f2t", "q1f2f"],
            Scenario::Two => &["aft-bml", "qlin", "qint"],
        };
        names.iter().map(|n| Self::parse(n, scenario).expect("known method")).collect()
    }
}

/// Point estimates for one stage on the test subjects.
#[derive(Clone, Debug, PartialEq)]
pub struct StageEstimate {
    pub a_opt: Vec<Action>,
    pub value: Vec<f64>,
    /// Central 95% posterior interval of the optimal value, when available.
    pub interval: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Estimates {
    pub stage1: StageEstimate,
    pub stage2: StageEstimate,
}

fn posterior_stage(sp: &StagePosterior) -> Result<StageEstimate, CliError> {
    let n = sp.n_subjects();
    let mut lo = Vec::with_capacity(n);
    let mut hi = Vec::with_capacity(n);
    let mut value = Vec::with_capacity(n);
    for i in 0..n {
        let row: Vec<f64> = sp.yhat_opt.row(i).iter().copied().collect();
        value.push(row.iter().sum::<f64>() / row.len() as f64);
        lo.push(quantile(&row, 0.025)?);
        hi.push(quantile(&row, 0.975)?);
    }
    Ok(StageEstimate {
        a_opt: posterior_mode_action(&sp.a_opt),
        value,
        interval: Some((lo, hi)),
    })
}

/// Posterior-mode actions and posterior-mean optimal values for the new
/// subjects of a fit.
pub fn estimates_from_posterior(post: &DtrPosterior) -> Result<Estimates, CliError> {
    let (Some(s1), Some(s2)) = (&post.new_stage1, &post.new_stage2) else {
        return Err(CliError::Data("posterior has no new-subject predictions".into()));
    };
    Ok(Estimates {
        stage1: posterior_stage(s1)?,
        stage2: posterior_stage(s2)?,
    })
}

pub fn estimates_from_qlearn(res: &QlearnResult) -> Result<Estimates, CliError> {
    let (Some(s1), Some(s2)) = (&res.new_stage1, &res.new_stage2) else {
        return Err(CliError::Data("Q-learning result has no new-subject predictions".into()));
    };
    let stage = |p: &crate::qlearn::ActionPredictions| StageEstimate {
        a_opt: p.a_opt.clone(),
        value: (0..p.a_opt.len()).map(|i| p.optimal_value(i)).collect(),
        interval: None,
    };
    Ok(Estimates {
        stage1: stage(s1),
        stage2: stage(s2),
    })
}

pub fn pot_against(est: &Estimates, truth: &[SubjectTruth]) -> Result<PotSummary, CliError> {
    let t1: Vec<Action> = truth.iter().map(|t| t.a1_opt).collect();
    let t2: Vec<Action> = truth.iter().map(|t| t.a2_opt).collect();
    Ok(pot(&est.stage1.a_opt, &t1, &est.stage2.a_opt, &t2)?)
}

#[derive(Clone, Debug)]
pub struct StudyConfig {
    pub scenario: Scenario,
    pub replications: usize,
    pub train_n: usize,
    pub test_n: usize,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub censoring: CensoringScheme,
    /// Chain settings for AFT-BML; the seed is replaced per replication.
    pub dtr: DtrConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudyRow {
    pub method: String,
    pub stage: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default)]
struct Accumulator {
    pots: Vec<PotSummary>,
    values: [Vec<Vec<f64>>; 2],
    coverage: [Vec<f64>; 2],
}

#[derive(Clone, Debug)]
pub struct StudyResult {
    pub rows: Vec<StudyRow>,
}

impl StudyResult {
    pub fn get(&self, method: &str, stage: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.stage == stage && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,stage,metric,value\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.method, r.stage, r.metric, r.value));
        }
        s
    }
}

const TEST_SALT: u64 = u64::MAX;

pub fn run_study(cfg: &StudyConfig) -> Result<StudyResult, CliError> {
    if cfg.replications < 2 {
        return Err(CliError::Usage("a study needs at least 2 replications".into()));
    }
    if cfg.methods.is_empty() {
        return Err(CliError::Usage("no methods selected".into()));
    }
    let test = generate(&ScenarioConfig {
        scenario: cfg.scenario,
        n: cfg.test_n,
        seed: mix_seed(cfg.seed, TEST_SALT),
        censoring: cfg.censoring,
    })?;
    let newdata = test.new_subjects();
    let mut acc = vec![Accumulator::default(); cfg.methods.len()];
    for r in 0..cfg.replications {
        let train = generate(&ScenarioConfig {
            scenario: cfg.scenario,
            n: cfg.train_n,
            seed: mix_seed(cfg.seed, 2 * r as u64 + 1),
            censoring: cfg.censoring,
        })?;
        info!(
            "replication {}/{}: {} entrants, censoring {:.1}%",
            r + 1,
            cfg.replications,
            train.cohort.entrant_rows().len(),
            100.0 * train.censoring_rate()
        );
        for (m, a) in cfg.methods.iter().zip(acc.iter_mut()) {
            let est = match &m.kind {
                MethodKind::AftBml => {
                    let dtr = DtrConfig {
                        seed: mix_seed(cfg.seed, 2 * r as u64 + 2),
                        ..cfg.dtr.clone()
                    };
                    estimates_from_posterior(&optimize_dtr(&train.cohort, Some(&newdata), &dtr)?)?
                }
                MethodKind::Qlearn(f) => estimates_from_qlearn(&qlearn_two_stage(&train.cohort, f, Some(&newdata))?)?,
            };
            let p = pot_against(&est, &test.truth)?;
            info!(
                "  {}: POT {:.3} / {:.3} / {:.3}",
                m.name, p.stage1, p.stage2, p.overall
            );
            a.pots.push(p);
            for (k, (st, truth)) in [
                (&est.stage1, test.truth.iter().map(|t| t.mean_logtotal_opt).collect::<Vec<_>>()),
                (&est.stage2, test.truth.iter().map(|t| t.mean_logt2_opt).collect::<Vec<_>>()),
            ]
            .into_iter()
            .enumerate()
            {
                a.values[k].push(st.value.clone());
                if let Some((lo, hi)) = &st.interval {
                    a.coverage[k].push(coverage_rate(lo, hi, &truth)?);
                }
            }
        }
    }

    let truth = [
        test.truth.iter().map(|t| t.mean_logtotal_opt).collect::<Vec<_>>(),
        test.truth.iter().map(|t| t.mean_logt2_opt).collect::<Vec<_>>(),
    ];
    let reps = cfg.replications as f64;
    let mut rows = Vec::new();
    for (m, a) in cfg.methods.iter().zip(&acc) {
        let mut push = |stage: &str, metric: &str, value: f64| {
            rows.push(StudyRow {
                method: m.name.clone(),
                stage: stage.into(),
                metric: metric.into(),
                value,
            })
        };
        push("1", "pot", a.pots.iter().map(|p| p.stage1).sum::<f64>() / reps);
        push("2", "pot", a.pots.iter().map(|p| p.stage2).sum::<f64>() / reps);
        push("overall", "pot", a.pots.iter().map(|p| p.overall).sum::<f64>() / reps);
        for k in 0..2 {
            let stage = if k == 0 { "1" } else { "2" };
            let est = DMatrix::from_fn(a.values[k].len(), cfg.test_n, |r, i| a.values[k][r][i]);
            let d = mse_decomposition(&est, &truth[k])?;
            push(stage, "mse", d.mse);
            push(stage, "bias2", d.bias2);
            push(stage, "variance", d.variance);
            if !a.coverage[k].is_empty() {
                push(stage, "coverage", a.coverage[k].iter().sum::<f64>() / a.coverage[k].len() as f64);
            }
        }
    }
    Ok(StudyResult { rows })
}
