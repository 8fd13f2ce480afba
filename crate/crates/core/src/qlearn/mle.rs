//! Censored log-normal AFT regression by maximum likelihood.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};

use super::QlearnError;
use crate::sampling::{inverse_mills, log_normal_sf};

const MAX_ITER: usize = 100;
const GRAD_TOL: f64 = 1e-6;
const RANK_TOL: f64 = 1e-10;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq)]
pub struct LognormalAftFit {
    pub beta: DVector<f64>,
    /// Log of the error scale.
    pub log_scale: f64,
    /// Inverse observed information over `(beta, log_scale)`.
    pub hessian_inverse: DMatrix<f64>,
    pub converged: bool,
    pub n_iter: usize,
    pub log_likelihood: f64,
    /// Log-likelihood after each accepted step, starting point first.
    pub loglik_path: Vec<f64>,
}

impl LognormalAftFit {
    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> DVector<f64> {
        x * &self.beta
    }

    pub fn standard_errors(&self) -> Vec<f64> {
        self.hessian_inverse.diagonal().iter().map(|v| v.sqrt()).collect()
    }
}

/// Log-likelihood over `(beta, log_scale)` on log times.
pub fn log_likelihood(x: &DMatrix<f64>, log_t: &[f64], event: &[bool], beta: &DVector<f64>, log_scale: f64) -> f64 {
    let sigma = log_scale.exp();
    let eta = x * beta;
    log_t
        .iter()
        .zip(event)
        .zip(eta.iter())
        .map(|((&y, &e), &m)| {
            let z = (y - m) / sigma;
            if e {
                -0.5 * z * z - log_scale - HALF_LN_2PI
            } else {
                log_normal_sf(z)
            }
        })
        .sum()
}

/// Analytic gradient and Hessian of [`log_likelihood`], parameter order
/// `(beta, log_scale)`.
pub fn score_and_hessian(
    x: &DMatrix<f64>,
    log_t: &[f64],
    event: &[bool],
    beta: &DVector<f64>,
    log_scale: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let p = x.ncols();
    let sigma = log_scale.exp();
    let eta = x * beta;
    let mut g = DVector::zeros(p + 1);
    let mut h = DMatrix::zeros(p + 1, p + 1);
    for i in 0..x.nrows() {
        let z = (log_t[i] - eta[i]) / sigma;
        // Per-row derivatives w.r.t. the linear predictor (through z) and log_scale.
        let (gb, gs, hbb, hbs, hss) = if event[i] {
            (z, z * z - 1.0, -1.0, -2.0 * z, -2.0 * z * z)
        } else {
            let m = inverse_mills(z);
            let dm = m * (m - z);
            (m, m * z, -dm, -(dm * z + m), -z * (dm * z + m))
        };
        let row = x.row(i);
        for a in 0..p {
            let xa = row[a];
            g[a] += gb * xa / sigma;
            h[(a, p)] += hbs * xa / sigma;
            for b in 0..=a {
                h[(a, b)] += hbb * xa * row[b] / (sigma * sigma);
            }
        }
        g[p] += gs;
        h[(p, p)] += hss;
    }
    for a in 0..p {
        for b in 0..a {
            h[(b, a)] = h[(a, b)];
        }
        h[(p, a)] = h[(a, p)];
    }
    (g, h)
}

fn rounding_floor(ll: f64) -> f64 {
    8.0 * f64::EPSILON * ll.abs().max(1.0)
}

fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn check_rank(x: &DMatrix<f64>) -> Result<(), QlearnError> {
    let sv = x.clone().svd(false, false).singular_values;
    let largest = sv.max();
    let smallest = sv.min();
    if !(smallest > RANK_TOL * largest) {
        return Err(QlearnError::RankDeficient { smallest, largest });
    }
    Ok(())
}

fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>, QlearnError> {
    x.clone()
        .svd(true, true)
        .solve(y, RANK_TOL)
        .map_err(|e| QlearnError::InvalidInput(e.to_string()))
}

pub fn fit_lognormal_aft(x: &DMatrix<f64>, time: &[f64], event: &[bool]) -> Result<LognormalAftFit, QlearnError> {
    let (n, p) = x.shape();
    if time.len() != n || event.len() != n {
        return Err(QlearnError::InvalidInput(format!(
            "{n} design rows but {} times and {} indicators",
            time.len(),
            event.len()
        )));
    }
    if let Some(row) = time.iter().position(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(QlearnError::InvalidTime { row, value: time[row] });
    }
    let events: Vec<usize> = (0..n).filter(|&i| event[i]).collect();
    if events.len() < p + 1 {
        return Err(QlearnError::TooFewEvents {
            events: events.len(),
            needed: p + 1,
        });
    }
    check_rank(x)?;
    let log_t: Vec<f64> = time.iter().map(|t| t.ln()).collect();

    let xe = x.select_rows(&events);
    let ye = DVector::from_iterator(events.len(), events.iter().map(|&i| log_t[i]));
    let mut beta = match check_rank(&xe) {
        Ok(()) => least_squares(&xe, &ye)?,
        Err(_) => least_squares(x, &DVector::from_column_slice(&log_t))?,
    };
    let mean = ye.mean();
    let sd = (ye.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / ye.len() as f64).sqrt();
    let mut log_scale = if sd > 0.0 && sd.is_finite() { sd.ln() } else { 0.0 };

    let mut ll = log_likelihood(x, &log_t, event, &beta, log_scale);
    let mut path = vec![ll];
    let (mut g, mut h) = score_and_hessian(x, &log_t, event, &beta, log_scale);
    let mut converged = max_abs(&g) < GRAD_TOL;
    let mut n_iter = 0;
    while !converged && n_iter < MAX_ITER {
        n_iter += 1;
        let info = -&h;
        let scale = info.diagonal().iter().map(|d| d.abs()).sum::<f64>() / (p + 1) as f64;
        let mut damping = 0.0;
        let step = loop {
            let mut m = info.clone();
            for k in 0..=p {
                m[(k, k)] += damping;
            }
            if let Some(ch) = m.cholesky() {
                break ch.solve(&g);
            }
            damping = if damping == 0.0 { 1e-8 * scale.max(1e-300) } else { damping * 10.0 };
            if !damping.is_finite() {
                return Err(QlearnError::InvalidInput("information matrix is not usable".into()));
            }
        };

        // Predicted gain below the rounding level of the log-likelihood:
        // no further progress is measurable.
        if damping == 0.0 && g.dot(&step) <= rounding_floor(ll) {
            debug!("iteration {n_iter}: Newton decrement at rounding level, gradient {:.3e}", max_abs(&g));
            converged = true;
            break;
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let nb = &beta + t * step.rows(0, p);
            let ns = log_scale + t * step[p];
            let nll = log_likelihood(x, &log_t, event, &nb, ns);
            if nll.is_finite() {
                if nll > ll {
                    accepted = Some((nb, ns, nll));
                    break;
                }
                // At the numerical optimum the likelihood stops changing;
                // accept equal-valued steps that shrink the gradient.
                if nll >= ll - rounding_floor(ll) {
                    let (ng, _) = score_and_hessian(x, &log_t, event, &nb, ns);
                    if max_abs(&ng) < max_abs(&g) {
                        accepted = Some((nb, ns, nll));
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        let Some((nb, ns, nll)) = accepted else {
            debug!("iteration {n_iter}: no ascent step found, gradient {:.3e}", max_abs(&g));
            break;
        };
        debug!("iteration {n_iter}: loglik {nll:.12e}, step {t:.3e}");
        beta = nb;
        log_scale = ns;
        ll = nll;
        path.push(ll);
        (g, h) = score_and_hessian(x, &log_t, event, &beta, log_scale);
        converged = max_abs(&g) < GRAD_TOL;
    }
    if !converged {
        warn!(
            "log-normal AFT fit stopped after {n_iter} iterations with gradient {:.3e}",
            max_abs(&g)
        );
    }
    let hessian_inverse = (-&h)
        .try_inverse()
        .unwrap_or_else(|| DMatrix::from_element(p + 1, p + 1, f64::NAN));
    Ok(LognormalAftFit {
        beta,
        log_scale,
        hessian_inverse,
        converged,
        n_iter,
        log_likelihood: ll,
        loglik_path: path,
    })
}
