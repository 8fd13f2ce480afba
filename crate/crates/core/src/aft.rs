//! Log-normal accelerated failure time regression with a BART mean function.
//!
//! Censored log times are imputed every sweep from their truncated normal
//! full conditional before the sum-of-trees update.

use log::{debug, info};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bart::{BartError, BartHyper, BartModel, CovariateMatrix, ForestDraw, SumOfTreesState};
use crate::sampling::{draw_left_truncated_normal, draw_normal, RngStream, SamplingError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AftError {
    #[error("no events among {0} records; the error variance is not identifiable")]
    NoEvents(usize),
    #[error("invalid input: time {value} at row {row} must be positive and finite")]
    InvalidTime { row: usize, value: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("draw index {index} out of range for {keep} kept draws")]
    DrawIndex { index: usize, keep: usize },
    #[error(transparent)]
    Bart(#[from] BartError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainLength {
    pub burn: usize,
    pub keep: usize,
}

impl Default for ChainLength {
    fn default() -> Self {
        Self {
            burn: 1000,
            keep: 1000,
        }
    }
}

/// Posterior draws from one AFT-BART chain.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AftBartFit {
    pub draws: Vec<ForestDraw>,
    pub offset_mu: f64,
    pub n_burn: usize,
    pub n_keep: usize,
    pub schema: Vec<String>,
    /// Geweke convergence z-score of the kept sigma chain; informational.
    pub sigma_geweke_z: Option<f64>,
}

impl AftBartFit {
    pub fn sigmas(&self) -> Vec<f64> {
        self.draws.iter().map(|d| d.sigma).collect()
    }
}

/// Censored log-time response paired with a fixed design.
pub struct AftChain<'a> {
    model: &'a BartModel,
    state: SumOfTreesState,
    log_obs: Vec<f64>,
    log_time: Vec<f64>,
    censored: Vec<usize>,
}

impl<'a> AftChain<'a> {
    pub fn new(model: &'a BartModel, time: &[f64], event: &[bool]) -> Result<Self, AftError> {
        if time.len() != model.n_rows() || event.len() != model.n_rows() {
            return Err(AftError::InvalidInput(format!(
                "{} times and {} indicators for {} rows",
                time.len(),
                event.len(),
                model.n_rows()
            )));
        }
        if let Some((row, &value)) = time.iter().enumerate().find(|(_, t)| !(t.is_finite() && **t > 0.0)) {
            return Err(AftError::InvalidTime { row, value });
        }
        if !event.iter().any(|&e| e) {
            return Err(AftError::NoEvents(time.len()));
        }
        let log_obs: Vec<f64> = time.iter().map(|t| t.ln()).collect();
        // Calibration treats censored times as events.
        let state = model.init_state(&log_obs)?;
        let censored = (0..time.len()).filter(|&i| !event[i]).collect();
        Ok(Self {
            model,
            state,
            log_time: log_obs.clone(),
            log_obs,
            censored,
        })
    }

    /// Impute censored rows, then one backfitting sweep.
    pub fn sweep(&mut self, rng: &mut RngStream) -> Result<(), AftError> {
        let sigma = self.state.sigma2().sqrt();
        for &i in &self.censored {
            let mean = self.state.fitted_at(i);
            self.log_time[i] = draw_left_truncated_normal(mean, sigma, self.log_obs[i], rng)?;
        }
        self.model.gibbs_step(&mut self.state, &self.log_time, rng)?;
        Ok(())
    }

    pub fn state(&self) -> &SumOfTreesState {
        &self.state
    }

    /// Current completed log-time vector (observed for events, imputed otherwise).
    pub fn completed_log_time(&self) -> &[f64] {
        &self.log_time
    }

    pub fn log_observed(&self) -> &[f64] {
        &self.log_obs
    }

    pub fn censored_rows(&self) -> &[usize] {
        &self.censored
    }

    pub fn snapshot(&self) -> ForestDraw {
        self.model.snapshot(&self.state)
    }
}

/// Run a chain on an existing model, keeping `len.keep` draws after `len.burn`.
pub fn fit_with_model(
    model: &BartModel,
    time: &[f64],
    event: &[bool],
    len: ChainLength,
    schema: Vec<String>,
    rng: &mut RngStream,
) -> Result<AftBartFit, AftError> {
    if len.keep == 0 {
        return Err(AftError::InvalidInput("keep must be at least 1".into()));
    }
    let mut chain = AftChain::new(model, time, event)?;
    for _ in 0..len.burn {
        chain.sweep(rng)?;
    }
    let mut draws = Vec::with_capacity(len.keep);
    for _ in 0..len.keep {
        chain.sweep(rng)?;
        draws.push(chain.snapshot());
    }
    let sigmas: Vec<f64> = draws.iter().map(|d| d.sigma).collect();
    let z = geweke_z(&sigmas);
    if let Some(z) = z {
        if z.abs() > 3.0 {
            info!("sigma chain Geweke z = {z:.2}; consider a longer burn-in");
        } else {
            debug!("sigma chain Geweke z = {z:.2}");
        }
    }
    Ok(AftBartFit {
        offset_mu: chain.state().offset_mu(),
        draws,
        n_burn: len.burn,
        n_keep: len.keep,
        schema,
        sigma_geweke_z: z,
    })
}

pub fn fit_aft_bart(
    x: &CovariateMatrix,
    time: &[f64],
    event: &[bool],
    hyper: BartHyper,
    len: ChainLength,
    schema: Vec<String>,
    rng: &mut RngStream,
) -> Result<AftBartFit, AftError> {
    let model = BartModel::new(x, hyper)?;
    fit_with_model(&model, time, event, len, schema, rng)
}

/// `offset_mu + f(x)` for each kept draw (rows) and each subject (columns).
pub fn posterior_mean_logt(fit: &AftBartFit, x: &CovariateMatrix) -> Result<DMatrix<f64>, AftError> {
    let mut out = DMatrix::zeros(fit.draws.len(), x.n_rows());
    for (d, draw) in fit.draws.iter().enumerate() {
        for (i, v) in draw.predict(x)?.into_iter().enumerate() {
            out[(d, i)] = v;
        }
    }
    Ok(out)
}

/// One event time from draw `index`'s predictive distribution at `x`,
/// optionally conditioned to exceed `lower_bound`.
pub fn posterior_predictive_time(
    fit: &AftBartFit,
    index: usize,
    x: &[f64],
    lower_bound: Option<f64>,
    rng: &mut RngStream,
) -> Result<f64, AftError> {
    let draw = fit.draws.get(index).ok_or(AftError::DrawIndex {
        index,
        keep: fit.draws.len(),
    })?;
    let mean = draw.predict_row(x)?;
    predictive_time(mean, draw.sigma, lower_bound, rng)
}

pub(crate) fn predictive_time(
    mean: f64,
    sigma: f64,
    lower_bound: Option<f64>,
    rng: &mut RngStream,
) -> Result<f64, AftError> {
    let log_t = match lower_bound {
        Some(b) if !(b > 0.0 && b.is_finite()) => {
            return Err(AftError::InvalidInput(format!("lower bound {b} must be positive")))
        }
        Some(b) => draw_left_truncated_normal(mean, sigma, b.ln(), rng)?,
        None => draw_normal(mean, sigma, rng)?,
    };
    Ok(log_t.exp())
}

/// Geweke diagnostic comparing the first 10% and last 50% of a chain, with
/// batch-means variance estimates. `None` for chains too short to split.
pub fn geweke_z(chain: &[f64]) -> Option<f64> {
    let n = chain.len();
    if n < 40 {
        return None;
    }
    let a = &chain[..n / 10];
    let b = &chain[n - n / 2..];
    let (ma, va) = mean_and_batch_var(a);
    let (mb, vb) = mean_and_batch_var(b);
    let denom = (va + vb).sqrt();
    (denom > 0.0).then(|| (ma - mb) / denom)
}

/// Mean and batch-means estimate of the variance of that mean.
fn mean_and_batch_var(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let n_batches = (n as f64).sqrt().floor().max(2.0) as usize;
    let size = n / n_batches;
    let batch_means: Vec<f64> = (0..n_batches)
        .map(|b| x[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let bm = batch_means.iter().sum::<f64>() / n_batches as f64;
    let var_b = batch_means.iter().map(|m| (m - bm).powi(2)).sum::<f64>() / (n_batches - 1) as f64;
    (mean, var_b / n_batches as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::normal_quantile;

    fn toy(n: usize, censor_frac: f64, seed: u64) -> (CovariateMatrix, Vec<f64>, Vec<bool>) {
        let mut rng = RngStream::new(seed, 0);
        let rows: Vec<[f64; 2]> = (0..n).map(|_| [rng.uniform(), f64::from(u8::from(rng.bernoulli(0.5)))]).collect();
        let mut time = Vec::new();
        let mut event = Vec::new();
        for r in &rows {
            let t = (1.0 + r[0] + 0.5 * r[1] + 0.3 * rng.standard_normal()).exp();
            if rng.uniform() < censor_frac {
                time.push(t * rng.uniform().max(0.05));
                event.push(false);
            } else {
                time.push(t);
                event.push(true);
            }
        }
        (CovariateMatrix::from_rows(&rows).unwrap(), time, event)
    }

    fn quick_hyper() -> BartHyper {
        BartHyper {
            n_trees: 20,
            ..BartHyper::default()
        }
    }

    #[test]
    fn all_events_match_plain_bart() {
        let (x, time, _) = toy(60, 0.0, 1);
        let event = vec![true; 60];
        let len = ChainLength { burn: 20, keep: 5 };
        let fit = fit_aft_bart(&x, &time, &event, quick_hyper(), len, vec![], &mut RngStream::new(9, 3)).unwrap();

        let model = BartModel::new(&x, quick_hyper()).unwrap();
        let y: Vec<f64> = time.iter().map(|t| t.ln()).collect();
        let mut state = model.init_state(&y).unwrap();
        let mut rng = RngStream::new(9, 3);
        for _ in 0..20 {
            model.gibbs_step(&mut state, &y, &mut rng).unwrap();
        }
        for d in 0..5 {
            model.gibbs_step(&mut state, &y, &mut rng).unwrap();
            let a = fit.draws[d].predict(&x).unwrap();
            assert_eq!(a, state.fitted());
            assert_eq!(fit.draws[d].sigma.to_bits(), state.sigma2().sqrt().to_bits());
        }
    }

    #[test]
    fn imputed_times_respect_censoring_and_events_untouched() {
        let (x, time, event) = toy(80, 0.4, 2);
        let model = BartModel::new(&x, quick_hyper()).unwrap();
        let mut chain = AftChain::new(&model, &time, &event).unwrap();
        let mut rng = RngStream::new(4, 4);
        assert!(!chain.censored_rows().is_empty());
        for _ in 0..50 {
            chain.sweep(&mut rng).unwrap();
            for i in 0..80 {
                let (obs, cur) = (chain.log_observed()[i], chain.completed_log_time()[i]);
                if event[i] {
                    assert_eq!(obs.to_bits(), cur.to_bits());
                } else {
                    assert!(cur >= obs);
                }
            }
        }
    }

    #[test]
    fn input_errors() {
        let (x, mut time, _) = toy(10, 0.0, 3);
        let none = vec![false; 10];
        let len = ChainLength { burn: 1, keep: 1 };
        let err = fit_aft_bart(&x, &time, &none, quick_hyper(), len, vec![], &mut RngStream::new(1, 1));
        assert!(matches!(err, Err(AftError::NoEvents(10))));
        time[3] = -1.0;
        let all = vec![true; 10];
        let err = fit_aft_bart(&x, &time, &all, quick_hyper(), len, vec![], &mut RngStream::new(1, 1));
        assert!(matches!(err, Err(AftError::InvalidTime { row: 3, .. })));
    }

    #[test]
    fn seeded_fits_are_bitwise_equal() {
        let (x, time, event) = toy(50, 0.3, 5);
        let len = ChainLength { burn: 10, keep: 10 };
        let run = || {
            let fit = fit_aft_bart(&x, &time, &event, quick_hyper(), len, vec![], &mut RngStream::new(77, 0)).unwrap();
            posterior_mean_logt(&fit, &x).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn posterior_mean_shape_and_identical_rows() {
        let (x, time, event) = toy(30, 0.2, 6);
        let rows: Vec<Vec<f64>> = (0..3).map(|_| x.row(4).to_vec()).collect();
        let newx = CovariateMatrix::from_rows(&rows).unwrap();
        let len = ChainLength { burn: 5, keep: 4 };
        let fit = fit_aft_bart(&x, &time, &event, quick_hyper(), len, vec![], &mut RngStream::new(1, 0)).unwrap();
        let m = posterior_mean_logt(&fit, &newx).unwrap();
        assert_eq!(m.shape(), (4, 3));
        assert_eq!(m.column(0), m.column(1));
        let train = posterior_mean_logt(&fit, &x).unwrap();
        assert_eq!(train[(3, 4)], m[(3, 2)]);
    }

    #[test]
    fn constant_uncensored_response() {
        let x = CovariateMatrix::from_rows(&(0..30).map(|i| [i as f64]).collect::<Vec<_>>()).unwrap();
        let time = vec![12.0; 30];
        let event = vec![true; 30];
        let len = ChainLength { burn: 20, keep: 20 };
        let fit = fit_aft_bart(&x, &time, &event, quick_hyper(), len, vec![], &mut RngStream::new(2, 0)).unwrap();
        let m = posterior_mean_logt(&fit, &x).unwrap();
        let avg = m.row_mean();
        for v in avg.iter() {
            assert!((v - 12f64.ln()).abs() < 1e-3);
        }
    }

    #[test]
    fn predictive_draws() {
        let (x, time, event) = toy(40, 0.2, 7);
        let len = ChainLength { burn: 5, keep: 2 };
        let mut fit = fit_aft_bart(&x, &time, &event, quick_hyper(), len, vec![], &mut RngStream::new(3, 0)).unwrap();
        let mut rng = RngStream::new(5, 5);
        let row = x.row(0);
        for _ in 0..1000 {
            let t = posterior_predictive_time(&fit, 1, row, Some(50.0), &mut rng).unwrap();
            assert!(t >= 50.0);
        }
        assert!(posterior_predictive_time(&fit, 2, row, None, &mut rng).is_err());
        assert!(posterior_predictive_time(&fit, 0, row, Some(0.0), &mut rng).is_err());

        let mean = fit.draws[0].predict_row(row).unwrap();
        fit.draws[0].sigma = 1e-6;
        let t = posterior_predictive_time(&fit, 0, row, None, &mut rng).unwrap();
        assert!((t / mean.exp() - 1.0).abs() < 0.01);

        // Median of the log-normal predictive is exp(mean).
        fit.draws[0].sigma = 0.5;
        let n = 100_000;
        let below = (0..n)
            .filter(|_| posterior_predictive_time(&fit, 0, row, None, &mut rng).unwrap() < mean.exp())
            .count();
        let p = below as f64 / n as f64;
        assert!((p - 0.5).abs() < 3.0 * (0.25 / n as f64).sqrt(), "{p}");
    }

    #[test]
    fn geweke_flags_drift() {
        let mut rng = RngStream::new(8, 8);
        let stationary: Vec<f64> = (0..2000).map(|_| rng.standard_normal()).collect();
        let z = geweke_z(&stationary).unwrap();
        assert!(z.abs() < normal_quantile(0.9995).unwrap());
        let drifting: Vec<f64> = (0..2000).map(|i| i as f64 / 100.0 + rng.standard_normal()).collect();
        assert!(geweke_z(&drifting).unwrap().abs() > 10.0);
        assert_eq!(geweke_z(&[1.0; 10]), None);
    }
}
