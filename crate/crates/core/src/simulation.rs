//! Two-stage simulation scenarios with known optimal regimes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Action, Cohort, CohortError, NewSubject, StageTwo, TwoStageRecord};
use crate::sampling::{expit, RngStream};

const T1_ATTEMPTS: usize = 100;
const T1_FLOOR: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("unknown scenario {0}; expected 1 or 2")]
    UnknownScenario(u8),
    #[error("cohort size must be at least 1")]
    EmptyCohort,
    #[error(transparent)]
    Cohort(#[from] CohortError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// Linear predictors with interactions.
    One,
    /// Nonlinear predictors.
    Two,
}

impl TryFrom<u8> for Scenario {
    type Error = SimulationError;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            1 => Ok(Self::One),
            2 => Ok(Self::Two),
            _ => Err(SimulationError::UnknownScenario(v)),
        }
    }
}

impl Scenario {
    pub fn number(self) -> u8 {
        match self {
            Self::One => 1,
            Self::Two => 2,
        }
    }

    fn noise_sd(self) -> f64 {
        match self {
            Self::One => 0.3,
            Self::Two => 0.1,
        }
    }

    fn censoring_bounds(self) -> (f64, f64) {
        match self {
            Self::One => (100.0, 2000.0),
            Self::Two => (400.0, 5000.0),
        }
    }
}

/// How the censoring time is applied to the two stages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CensoringScheme {
    /// Entry to Stage 2 is always observed; the censoring time then applies
    /// to the Stage-2 clock. Non-entrants are censored on the total time.
    #[default]
    StageWise,
    /// One censoring time on the total follow-up clock. Entrants censored
    /// before entry are recorded as censored non-entrants.
    TotalFollowUp,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub n: usize,
    pub seed: u64,
    pub censoring: CensoringScheme,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectTruth {
    pub a1_opt: Action,
    pub a2_opt: Action,
    pub mean_logt2_opt: f64,
    pub mean_logtotal_opt: f64,
}

/// Everything generated for one subject, observed or not.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPath {
    pub o2: Vec<f64>,
    pub entrant: bool,
    pub a2: Action,
    /// Total time under the assigned Stage-1 action and optimal Stage 2.
    pub total_time: f64,
    /// Stage-2 time under the optimal action, from its own noise draw.
    pub t2_opt: f64,
    /// Time to Stage-2 entry, `total_time - t2_opt`.
    pub time1: f64,
    /// Stage-2 time under the assigned action.
    pub time2: f64,
    pub censor_time: f64,
    /// Whether `time1` hit the floor after exhausting redraws.
    pub clamped: bool,
}

#[derive(Clone, Debug)]
pub struct SimulatedCohort {
    pub scenario: Scenario,
    pub cohort: Cohort,
    pub truth: Vec<SubjectTruth>,
    pub latent: Vec<LatentPath>,
    /// Subjects whose entry time needed at least one noise redraw.
    pub degenerate_time1: usize,
}

impl SimulatedCohort {
    /// Both covariate blocks for every subject, with the latent entry time,
    /// for out-of-sample evaluation.
    pub fn new_subjects(&self) -> Vec<NewSubject> {
        self.cohort
            .records()
            .iter()
            .zip(&self.latent)
            .map(|(r, l)| NewSubject {
                id: r.id.clone(),
                o1: r.o1.clone(),
                a1: r.a1,
                time1: l.time1,
                o2: l.o2.clone(),
            })
            .collect()
    }

    pub fn censoring_rate(&self) -> f64 {
        let censored = self
            .cohort
            .records()
            .iter()
            .filter(|r| match &r.stage2 {
                Some(s2) => !s2.delta2,
                None => !r.delta1,
            })
            .count();
        censored as f64 / self.cohort.len() as f64
    }
}

fn pi_x(x: f64) -> f64 {
    std::f64::consts::PI * x
}

/// Mean log Stage-2 time.
pub fn stage2_mean(scenario: Scenario, x1: f64, b1: f64, x2: f64, b2: f64, a2: Action) -> f64 {
    let a = f64::from(a2);
    match scenario {
        Scenario::One => {
            4.0 + 0.3 * x2 + b2 - 0.6 * x2 * b2 + 0.3 * x1 + 0.4 * b1 - 0.5 * x1 * b1
                + a * (-0.7 + 0.5 * x2 - 0.9 * b2)
        }
        Scenario::Two => {
            4.0 + (x2.powi(3)).cos() - 0.4 * (x2 * b2 + 0.5).powi(2) - 0.1 * x1 - pi_x(x1 * b1).sin()
                + a * (0.7 * x2 * x2 - 1.0)
        }
    }
}

/// Mean log total time given optimal Stage-2 treatment.
pub fn stage1_mean(scenario: Scenario, x1: f64, b1: f64, a1: Action) -> f64 {
    let a = f64::from(a1);
    match scenario {
        Scenario::One => 6.3 + 0.7 * x1 + 0.6 * b1 - 0.8 * x1 * b1 + a * (0.1 - 0.2 * x1 + 0.6 * b1),
        Scenario::Two => 7.4 + (x1 * x1).sin() + x1.powi(4) + x1 * b1 + a * (0.1 - 0.2 * x1.powi(3)),
    }
}

/// Noise-free optimal actions and means. `o1 = [x1, b1, ...]`,
/// `o2 = [x2, b2, ...]`; trailing entries are ignored. Ties go to 0.
pub fn true_optimal_means(scenario: Scenario, o1: &[f64], o2: &[f64]) -> SubjectTruth {
    let (x1, b1, x2, b2) = (o1[0], o1[1], o2[0], o2[1]);
    let a2_opt = Action::from(stage2_mean(scenario, x1, b1, x2, b2, 1) > stage2_mean(scenario, x1, b1, x2, b2, 0));
    let a1_opt = Action::from(stage1_mean(scenario, x1, b1, 1) > stage1_mean(scenario, x1, b1, 0));
    SubjectTruth {
        a1_opt,
        a2_opt,
        mean_logt2_opt: stage2_mean(scenario, x1, b1, x2, b2, a2_opt),
        mean_logtotal_opt: stage1_mean(scenario, x1, b1, a1_opt),
    }
}

pub fn covariate_names() -> (Vec<String>, Vec<String>) {
    (
        ["x1", "b1", "z1"].map(String::from).to_vec(),
        ["x2", "b2", "z2"].map(String::from).to_vec(),
    )
}

pub fn generate(config: &ScenarioConfig) -> Result<SimulatedCohort, SimulationError> {
    if config.n == 0 {
        return Err(SimulationError::EmptyCohort);
    }
    let sc = config.scenario;
    let sd = sc.noise_sd();
    let (c_lo, c_hi) = sc.censoring_bounds();
    let mut rng = RngStream::new(config.seed, 0);
    let mut records = Vec::with_capacity(config.n);
    let mut truth = Vec::with_capacity(config.n);
    let mut latent = Vec::with_capacity(config.n);
    let mut degenerate = 0;
    for i in 0..config.n {
        let x1 = 0.1 + 1.19 * rng.uniform();
        let b1 = f64::from(u8::from(rng.bernoulli(0.5)));
        let z1 = 10.0 + 3.0 * rng.standard_normal();
        let x2 = 0.9 + 1.1 * rng.uniform();
        let b2 = f64::from(u8::from(rng.bernoulli(0.5)));
        let z2 = 20.0 + 4.0 * rng.standard_normal();
        let a1 = Action::from(rng.bernoulli(expit(2.0 * x1 - 1.0)));
        let entrant = rng.bernoulli(0.6);
        let a2 = Action::from(rng.bernoulli(expit(-2.0 * x2 + 2.8)));
        let c = c_lo + (c_hi - c_lo) * rng.uniform();

        let o1 = vec![x1, b1, z1];
        let o2 = vec![x2, b2, z2];
        let t = true_optimal_means(sc, &o1, &o2);
        let time2 = (stage2_mean(sc, x1, b1, x2, b2, a2) + sd * rng.standard_normal()).exp();
        let mut attempt = 0;
        let (total_time, t2_opt, time1, clamped) = loop {
            let t2_opt = (t.mean_logt2_opt + sd * rng.standard_normal()).exp();
            let total = (stage1_mean(sc, x1, b1, a1) + sd * rng.standard_normal()).exp();
            let t1 = total - t2_opt;
            attempt += 1;
            if t1 > 0.0 {
                break (total, t2_opt, t1, false);
            }
            if attempt == T1_ATTEMPTS {
                break (total, t2_opt, T1_FLOOR, true);
            }
        };
        if attempt > 1 {
            degenerate += 1;
        }

        let id = (i + 1).to_string();
        let non_entrant = |time1: f64, delta1: bool| TwoStageRecord {
            id: id.clone(),
            o1: o1.clone(),
            a1,
            time1,
            delta1,
            stage2: None,
        };
        let record = match (entrant, config.censoring) {
            (false, _) => non_entrant(total_time.min(c), total_time < c),
            (true, CensoringScheme::TotalFollowUp) if c <= time1 => non_entrant(c, false),
            (true, scheme) => {
                let budget = match scheme {
                    CensoringScheme::StageWise => c,
                    CensoringScheme::TotalFollowUp => c - time1,
                };
                TwoStageRecord {
                    id: id.clone(),
                    o1: o1.clone(),
                    a1,
                    time1,
                    delta1: true,
                    stage2: Some(StageTwo {
                        o2: o2.clone(),
                        a2,
                        time2: time2.min(budget),
                        delta2: time2 < budget,
                    }),
                }
            }
        };
        records.push(record);
        truth.push(t);
        latent.push(LatentPath {
            o2,
            entrant,
            a2,
            total_time,
            t2_opt,
            time1,
            time2,
            censor_time: c,
            clamped,
        });
    }
    let (n1, n2) = covariate_names();
    Ok(SimulatedCohort {
        scenario: sc,
        cohort: Cohort::new(n1, n2, records)?,
        truth,
        latent,
        degenerate_time1: degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn config(scenario: Scenario, n: usize, seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            scenario,
            n,
            seed,
            censoring: CensoringScheme::StageWise,
        }
    }

    #[test]
    fn stage2_rules() {
        let t = true_optimal_means(Scenario::One, &[0.5, 0.0, 10.0], &[2.0, 0.0, 20.0]);
        assert_eq!(t.a2_opt, 1);
        let t = true_optimal_means(Scenario::Two, &[0.5, 0.0, 10.0], &[1.0, 0.0, 20.0]);
        assert_eq!(t.a2_opt, 0);
        let t = true_optimal_means(Scenario::Two, &[0.5, 0.0, 10.0], &[1.3, 0.0, 20.0]);
        assert_eq!(t.a2_opt, 1);
    }

    #[test]
    fn stage1_rules() {
        let t = true_optimal_means(Scenario::One, &[1.0, 0.0, 10.0], &[1.0, 0.0, 20.0]);
        assert_eq!(t.a1_opt, 0);
        assert!((t.mean_logtotal_opt - 7.0).abs() < 1e-12);
        let t = true_optimal_means(Scenario::One, &[0.5, 1.0, 10.0], &[1.0, 0.0, 20.0]);
        assert_eq!(t.a1_opt, 1);
    }

    #[test]
    fn unknown_scenario() {
        assert!(Scenario::try_from(3).is_err());
        assert!(generate(&config(Scenario::One, 0, 1)).is_err());
    }

    #[test]
    fn entry_rate() {
        let sim = generate(&config(Scenario::One, 100_000, 3)).unwrap();
        let p = sim.latent.iter().filter(|l| l.entrant).count() as f64 / 1e5;
        let se = (0.6f64 * 0.4 / 1e5).sqrt();
        assert!((p - 0.6).abs() < 3.0 * se, "{p}");
    }

    #[test]
    fn censoring_rates() {
        let r1 = generate(&config(Scenario::One, 100_000, 4)).unwrap().censoring_rate();
        let r2 = generate(&config(Scenario::Two, 100_000, 4)).unwrap().censoring_rate();
        assert!((0.15..=0.25).contains(&r1), "{r1}");
        assert!((0.25..=0.35).contains(&r2), "{r2}");
    }

    #[test]
    fn total_follow_up_scheme() {
        let mut cfg = config(Scenario::One, 2000, 5);
        cfg.censoring = CensoringScheme::TotalFollowUp;
        let sim = generate(&cfg).unwrap();
        for (r, l) in sim.cohort.records().iter().zip(&sim.latent) {
            match &r.stage2 {
                Some(s2) => {
                    assert!(l.entrant && l.censor_time > l.time1);
                    assert_eq!(s2.time2, l.time2.min(l.censor_time - l.time1));
                }
                None if l.entrant => assert_eq!((r.time1, r.delta1), (l.censor_time, false)),
                None => assert_eq!(r.time1, l.total_time.min(l.censor_time)),
            }
        }
    }

    #[test]
    fn reproducible() {
        let a = generate(&config(Scenario::Two, 50, 9)).unwrap();
        let b = generate(&config(Scenario::Two, 50, 9)).unwrap();
        assert_eq!(a.cohort, b.cohort);
        assert_eq!(a.truth, b.truth);
    }

    proptest! {
        #[test]
        fn bookkeeping_identity(seed in 0u64..10_000, two in any::<bool>()) {
            let sc = if two { Scenario::Two } else { Scenario::One };
            let sim = generate(&config(sc, 30, seed)).unwrap();
            for (r, l) in sim.cohort.records().iter().zip(&sim.latent) {
                if !l.clamped {
                    prop_assert!(((l.time1 + l.t2_opt) - l.total_time).abs() <= 1e-12 * l.total_time);
                }
                if r.is_entrant() {
                    prop_assert_eq!(r.time1, l.time1);
                }
            }
        }

        #[test]
        fn truth_ignores_noise_covariates(
            x1 in 0.1f64..1.29, b1 in 0u8..2, x2 in 0.9f64..2.0, b2 in 0u8..2,
            z1 in -10.0f64..30.0, z2 in 0.0f64..40.0, two in any::<bool>(),
        ) {
            let sc = if two { Scenario::Two } else { Scenario::One };
            let a = true_optimal_means(sc, &[x1, f64::from(b1), 10.0], &[x2, f64::from(b2), 20.0]);
            let b = true_optimal_means(sc, &[x1, f64::from(b1), z1], &[x2, f64::from(b2), z2]);
            prop_assert_eq!(a, b);
        }
    }
}
