//! Evaluation of estimated regimes: agreement with the true rule, error
//! decomposition, interval coverage, time-dependent AUC and treatment
//! contrasts.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Action, Cohort};
use crate::sampling::{normal_cdf, quantile_sorted, SamplingError};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("need at least {needed} {what}, got {got}")]
    TooFew { what: &'static str, needed: usize, got: usize },
    #[error("interval {index} is inverted ({lower} > {upper})")]
    InvertedInterval { index: usize, lower: f64, upper: f64 },
    #[error("AUC undefined at t={t_star}: {cases} cases, {controls} controls")]
    UndefinedAuc { t_star: f64, cases: usize, controls: usize },
    #[error("invalid argument {name} = {value}")]
    InvalidArgument { name: &'static str, value: f64 },
    #[error(transparent)]
    Sampling(#[from] SamplingError),
}

fn same_len(what: &str, a: usize, b: usize) -> Result<(), MetricsError> {
    if a != b {
        return Err(MetricsError::LengthMismatch(format!("{what}: {a} vs {b}")));
    }
    Ok(())
}

/// Most frequent action per row of a subjects-by-draws matrix; ties go to
/// the lowest code.
pub fn posterior_mode_action(draws: &DMatrix<Action>) -> Vec<Action> {
    draws
        .row_iter()
        .map(|row| {
            let mut codes: Vec<Action> = row.iter().copied().collect();
            codes.sort_unstable();
            let mut best = (0usize, Action::MAX);
            let mut k = 0;
            while k < codes.len() {
                let run = codes[k..].iter().take_while(|&&c| c == codes[k]).count();
                if run > best.0 {
                    best = (run, codes[k]);
                }
                k += run;
            }
            best.1
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotSummary {
    pub stage1: f64,
    pub stage2: f64,
    pub overall: f64,
}

/// Proportion of subjects whose estimated optimal action matches the truth
/// at each stage, and at both stages jointly.
pub fn pot(pred1: &[Action], true1: &[Action], pred2: &[Action], true2: &[Action]) -> Result<PotSummary, MetricsError> {
    let n = pred1.len();
    same_len("stage-1 actions", n, true1.len())?;
    same_len("stage-2 actions", pred2.len(), true2.len())?;
    same_len("stages", n, pred2.len())?;
    if n == 0 {
        return Err(MetricsError::TooFew {
            what: "subjects",
            needed: 1,
            got: 0,
        });
    }
    let (mut s1, mut s2, mut both) = (0usize, 0usize, 0usize);
    for i in 0..n {
        let m1 = pred1[i] == true1[i];
        let m2 = pred2[i] == true2[i];
        s1 += usize::from(m1);
        s2 += usize::from(m2);
        both += usize::from(m1 && m2);
    }
    let n = n as f64;
    Ok(PotSummary {
        stage1: s1 as f64 / n,
        stage2: s2 as f64 / n,
        overall: both as f64 / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseDecomposition {
    pub mse: f64,
    pub bias2: f64,
    pub variance: f64,
}

/// Per-subject squared bias and across-replication (population) variance,
/// averaged over subjects. `estimates` is replications by subjects.
pub fn mse_decomposition(estimates: &DMatrix<f64>, truth: &[f64]) -> Result<MseDecomposition, MetricsError> {
    let (reps, n) = estimates.shape();
    if reps < 2 {
        return Err(MetricsError::TooFew {
            what: "replications",
            needed: 2,
            got: reps,
        });
    }
    same_len("subjects", n, truth.len())?;
    let mut out = MseDecomposition {
        mse: 0.0,
        bias2: 0.0,
        variance: 0.0,
    };
    for (j, col) in estimates.column_iter().enumerate() {
        let mean = col.mean();
        let var = col.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / reps as f64;
        let bias2 = (mean - truth[j]).powi(2);
        out.bias2 += bias2;
        out.variance += var;
        out.mse += bias2 + var;
    }
    let n = n as f64;
    out.mse /= n;
    out.bias2 /= n;
    out.variance /= n;
    Ok(out)
}

pub fn coverage_rate(lower: &[f64], upper: &[f64], truth: &[f64]) -> Result<f64, MetricsError> {
    same_len("interval bounds", lower.len(), upper.len())?;
    same_len("intervals and truth", lower.len(), truth.len())?;
    if truth.is_empty() {
        return Err(MetricsError::TooFew {
            what: "subjects",
            needed: 1,
            got: 0,
        });
    }
    let mut hit = 0;
    for i in 0..truth.len() {
        if lower[i] > upper[i] {
            return Err(MetricsError::InvertedInterval {
                index: i,
                lower: lower[i],
                upper: upper[i],
            });
        }
        hit += usize::from(lower[i] <= truth[i] && truth[i] <= upper[i]);
    }
    Ok(hit as f64 / truth.len() as f64)
}

/// Kaplan-Meier estimate of the censoring survivor function just before
/// each subject's own time.
fn censoring_survival_before(time: &[f64], delta: &[bool]) -> Vec<f64> {
    let n = time.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| time[a].total_cmp(&time[b]));
    let mut out = vec![1.0; n];
    let mut g = 1.0;
    let mut k = 0;
    while k < n {
        let t = time[order[k]];
        let group: Vec<usize> = order[k..].iter().copied().take_while(|&i| time[i] == t).collect();
        let at_risk = (n - k) as f64;
        for &i in &group {
            out[i] = g;
        }
        let censored = group.iter().filter(|&&i| !delta[i]).count() as f64;
        g *= 1.0 - censored / at_risk;
        k += group.len();
    }
    out
}

/// Cumulative-case / dynamic-control AUC at `t_star` with inverse
/// probability of censoring weights.
///
/// Larger markers mean longer predicted survival, so a case is ranked
/// correctly when its marker is below the control's. Marker ties count
/// one half. Control weights are constant at `t_star` and cancel.
pub fn time_dependent_auc(marker: &[f64], time: &[f64], delta: &[bool], t_star: f64) -> Result<f64, MetricsError> {
    same_len("marker and time", marker.len(), time.len())?;
    same_len("time and delta", time.len(), delta.len())?;
    if !t_star.is_finite() {
        return Err(MetricsError::InvalidArgument {
            name: "t_star",
            value: t_star,
        });
    }
    let g = censoring_survival_before(time, delta);
    let mut controls: Vec<f64> = (0..time.len()).filter(|&j| time[j] > t_star).map(|j| marker[j]).collect();
    controls.sort_by(f64::total_cmp);
    let cases: Vec<usize> = (0..time.len()).filter(|&i| time[i] <= t_star && delta[i]).collect();
    if cases.is_empty() || controls.is_empty() {
        return Err(MetricsError::UndefinedAuc {
            t_star,
            cases: cases.len(),
            controls: controls.len(),
        });
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for &i in &cases {
        let w = 1.0 / g[i];
        let m = marker[i];
        let below = controls.partition_point(|&c| c < m);
        let not_above = controls.partition_point(|&c| c <= m);
        let greater = (controls.len() - not_above) as f64;
        let ties = (not_above - below) as f64;
        num += w * (greater + 0.5 * ties);
        den += w * controls.len() as f64;
    }
    Ok(num / den)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastScale {
    LogTime,
    MedianTime,
    Survival,
}

impl ContrastScale {
    pub const ALL: [ContrastScale; 3] = [Self::LogTime, Self::MedianTime, Self::Survival];

    pub fn label(self) -> &'static str {
        match self {
            Self::LogTime => "log_time",
            Self::MedianTime => "median_time",
            Self::Survival => "survival",
        }
    }
}

/// Action-1 minus action-0 contrasts for one draw on the three scales.
pub fn contrast_draw(mean0: f64, mean1: f64, sigma: f64, horizon: f64) -> [f64; 3] {
    let lh = horizon.ln();
    [
        mean1 - mean0,
        mean1.exp() - mean0.exp(),
        normal_cdf((mean1 - lh) / sigma) - normal_cdf((mean0 - lh) / sigma),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastSummary {
    /// Row index of the subject in the inputs.
    pub subject: usize,
    pub scale: ContrastScale,
    pub mean: f64,
    pub q025: f64,
    pub q25: f64,
    pub q75: f64,
    pub q975: f64,
}

/// Per-subject contrast summaries on each scale, each scale sorted by
/// descending posterior mean. Inputs are subjects by draws; `sigma` has one
/// entry per draw.
pub fn posterior_contrasts(
    mean0: &DMatrix<f64>,
    mean1: &DMatrix<f64>,
    sigma: &[f64],
    horizon: f64,
) -> Result<Vec<Vec<ContrastSummary>>, MetricsError> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(MetricsError::InvalidArgument {
            name: "horizon",
            value: horizon,
        });
    }
    if mean0.shape() != mean1.shape() {
        return Err(MetricsError::LengthMismatch(format!(
            "action matrices {:?} vs {:?}",
            mean0.shape(),
            mean1.shape()
        )));
    }
    same_len("draws and sigma", mean0.ncols(), sigma.len())?;
    if sigma.is_empty() {
        return Err(MetricsError::TooFew {
            what: "draws",
            needed: 1,
            got: 0,
        });
    }
    let mut by_scale: Vec<Vec<ContrastSummary>> = vec![Vec::new(); 3];
    for i in 0..mean0.nrows() {
        let mut draws: [Vec<f64>; 3] = Default::default();
        for (d, &s) in sigma.iter().enumerate() {
            for (k, v) in contrast_draw(mean0[(i, d)], mean1[(i, d)], s, horizon).into_iter().enumerate() {
                draws[k].push(v);
            }
        }
        for (k, mut v) in draws.into_iter().enumerate() {
            v.sort_by(f64::total_cmp);
            by_scale[k].push(ContrastSummary {
                subject: i,
                scale: ContrastScale::ALL[k],
                mean: v.iter().sum::<f64>() / v.len() as f64,
                q025: quantile_sorted(&v, 0.025)?,
                q25: quantile_sorted(&v, 0.25)?,
                q75: quantile_sorted(&v, 0.75)?,
                q975: quantile_sorted(&v, 0.975)?,
            });
        }
    }
    for rows in &mut by_scale {
        rows.sort_by(|a, b| b.mean.total_cmp(&a.mean).then(a.subject.cmp(&b.subject)));
    }
    Ok(by_scale)
}

/// Total-time survival data in which entrants who did not receive the
/// rule's Stage-2 action are censored at Stage-2 entry. `rule` has one
/// action per entrant, in entrant order.
pub fn suboptimal_censor_stage1(cohort: &Cohort, rule: &[Action]) -> Result<Vec<(f64, bool)>, MetricsError> {
    let entrants = cohort.entrant_rows();
    same_len("rule and entrants", rule.len(), entrants.len())?;
    let mut k = 0;
    Ok(cohort
        .records()
        .iter()
        .map(|r| match &r.stage2 {
            None => (r.time1, r.delta1),
            Some(s2) => {
                let follows = s2.a2 == rule[k];
                k += 1;
                if follows {
                    (r.time1 + s2.time2, s2.delta2)
                } else {
                    (r.time1, false)
                }
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub mse: Option<MseDecomposition>,
    pub coverage: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub pot: PotSummary,
    pub stage1: StageReport,
    pub stage2: StageReport,
}
