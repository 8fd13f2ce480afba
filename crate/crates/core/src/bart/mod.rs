//! Sum-of-trees Bayesian regression with a backfitting Gibbs sampler.

mod data;
mod forest;
mod moves;
mod tree;

use log::debug;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::sampling::{draw_scaled_inv_chisq, RngStream};
use data::BinnedData;
use moves::MoveParams;

pub use data::{build_cutpoints, CovariateMatrix, Cutpoints};
pub use forest::{FlatTree, ForestDraw};
pub use moves::{node_marginal_loglik, MoveKind, MoveOutcome};
pub use tree::{SplitRule, Tree, ROOT};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BartError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("schema mismatch in {context}: expected {expected} columns, got {got}")]
    SchemaMismatch {
        expected: usize,
        got: usize,
        context: String,
    },
    #[error("invalid hyperparameter {name} = {value}")]
    InvalidHyper { name: &'static str, value: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BartHyper {
    pub n_trees: usize,
    pub k: f64,
    pub alpha_base: f64,
    pub beta_power: f64,
    pub nu: f64,
    pub q: f64,
    pub numcut: usize,
    pub min_node_size: usize,
}

impl Default for BartHyper {
    fn default() -> Self {
        Self {
            n_trees: 200,
            k: 2.0,
            alpha_base: 0.95,
            beta_power: 2.0,
            nu: 3.0,
            q: 0.9,
            numcut: 100,
            min_node_size: 5,
        }
    }
}

impl BartHyper {
    pub fn validate(&self) -> Result<(), BartError> {
        let bad = |name, value| Err(BartError::InvalidHyper { name, value });
        if self.n_trees < 1 {
            return bad("n_trees", self.n_trees as f64);
        }
        if !(self.k > 0.0 && self.k.is_finite()) {
            return bad("k", self.k);
        }
        if !(self.alpha_base > 0.0 && self.alpha_base < 1.0) {
            return bad("alpha_base", self.alpha_base);
        }
        if !(self.beta_power >= 0.0 && self.beta_power.is_finite()) {
            return bad("beta_power", self.beta_power);
        }
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return bad("nu", self.nu);
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return bad("q", self.q);
        }
        if self.numcut < 1 {
            return bad("numcut", self.numcut as f64);
        }
        if self.min_node_size < 1 {
            return bad("min_node_size", self.min_node_size as f64);
        }
        Ok(())
    }
}

/// One tree plus its row-to-leaf map and cached per-row fit.
#[derive(Clone, Debug)]
pub struct TreeState {
    tree: Tree,
    leaf_of_row: Vec<u32>,
    fits: Vec<f64>,
}

impl TreeState {
    fn stump(n_rows: usize) -> Self {
        Self {
            tree: Tree::stump(0.0),
            leaf_of_row: vec![ROOT as u32; n_rows],
            fits: vec![0.0; n_rows],
        }
    }

    pub fn tree(&self) -> &Tree {
        &self.tree
    }

    pub fn fits(&self) -> &[f64] {
        &self.fits
    }
}

#[derive(Clone, Debug)]
pub struct SumOfTreesState {
    trees: Vec<TreeState>,
    fit_sum: Vec<f64>,
    sigma2: f64,
    offset_mu: f64,
    lambda: f64,
    sigma_mu: f64,
}

impl SumOfTreesState {
    pub fn trees(&self) -> &[TreeState] {
        &self.trees
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// Override the error variance, e.g. to hold it fixed in experiments.
    pub fn set_sigma2(&mut self, sigma2: f64) {
        self.sigma2 = sigma2;
    }

    pub fn offset_mu(&self) -> f64 {
        self.offset_mu
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn sigma_mu(&self) -> f64 {
        self.sigma_mu
    }

    #[inline]
    pub fn fitted_at(&self, row: usize) -> f64 {
        self.offset_mu + self.fit_sum[row]
    }

    /// Cached `offset_mu + sum_j g_j` at the training rows.
    pub fn fitted(&self) -> Vec<f64> {
        self.fit_sum.iter().map(|f| self.offset_mu + f).collect()
    }
}

/// Immutable training design shared by any number of chains.
#[derive(Clone, Debug)]
pub struct BartModel {
    hyper: BartHyper,
    cutpoints: Cutpoints,
    binned: BinnedData,
    n_cols: usize,
    // Orthonormal basis of the column space of [1, X], when an OLS fit is
    // used for sigma calibration.
    ols_basis: Option<DMatrix<f64>>,
}

impl BartModel {
    pub fn new(x: &CovariateMatrix, hyper: BartHyper) -> Result<Self, BartError> {
        hyper.validate()?;
        if x.n_rows() == 0 {
            return Err(BartError::InvalidInput("empty covariate matrix".into()));
        }
        let cutpoints = build_cutpoints(x, hyper.numcut);
        let binned = BinnedData::new(x, &cutpoints);
        let ols_basis = (x.n_cols() + 2 <= x.n_rows()).then(|| ols_basis(x));
        Ok(Self {
            hyper,
            cutpoints,
            binned,
            n_cols: x.n_cols(),
            ols_basis,
        })
    }

    pub fn hyper(&self) -> &BartHyper {
        &self.hyper
    }

    pub fn cutpoints(&self) -> &Cutpoints {
        &self.cutpoints
    }

    pub fn n_rows(&self) -> usize {
        self.binned.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    fn check_y(&self, y: &[f64]) -> Result<(), BartError> {
        if y.len() != self.n_rows() {
            return Err(BartError::InvalidInput(format!(
                "response has {} values for {} rows",
                y.len(),
                self.n_rows()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(BartError::InvalidInput("non-finite response".into()));
        }
        Ok(())
    }

    /// Residual variance of an OLS fit of `y` on `[1, X]` when the design
    /// allows it, otherwise the sample variance of `y`.
    pub fn calibration_variance(&self, y: &[f64]) -> Result<f64, BartError> {
        self.check_y(y)?;
        let n = y.len();
        let est = match &self.ols_basis {
            Some(u) => {
                let yv = DMatrix::from_column_slice(n, 1, y);
                let resid = &yv - u * (u.transpose() * &yv);
                resid.norm_squared() / (n - u.ncols()) as f64
            }
            None if n > 1 => {
                let mean = y.iter().sum::<f64>() / n as f64;
                y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
            }
            None => 0.0,
        };
        let scale = y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let floor = f64::EPSILON * (1.0 + scale * scale);
        if est < floor {
            debug!("calibration variance {est:e} floored at {floor:e}");
        }
        Ok(est.max(floor))
    }

    pub fn init_state(&self, y: &[f64]) -> Result<SumOfTreesState, BartError> {
        self.check_y(y)?;
        let n = y.len();
        if n < self.hyper.min_node_size {
            return Err(BartError::InvalidInput(format!(
                "{n} rows is below min_node_size {}",
                self.hyper.min_node_size
            )));
        }
        let offset_mu = y.iter().sum::<f64>() / n as f64;
        let est = self.calibration_variance(y)?;
        let chi = ChiSquared::new(self.hyper.nu).map_err(|_| BartError::InvalidHyper {
            name: "nu",
            value: self.hyper.nu,
        })?;
        let lambda = est * chi.inverse_cdf(1.0 - self.hyper.q) / self.hyper.nu;
        let (lo, hi) = y
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let sigma_mu = (hi - lo) / (2.0 * self.hyper.k * (self.hyper.n_trees as f64).sqrt());
        Ok(SumOfTreesState {
            trees: (0..self.hyper.n_trees).map(|_| TreeState::stump(n)).collect(),
            fit_sum: vec![0.0; n],
            sigma2: est,
            offset_mu,
            lambda,
            sigma_mu,
        })
    }

    /// One backfitting sweep over all trees followed by a draw of sigma^2.
    pub fn gibbs_step(
        &self,
        state: &mut SumOfTreesState,
        y: &[f64],
        rng: &mut RngStream,
    ) -> Result<(), BartError> {
        self.check_y(y)?;
        let n = y.len();
        let sigma_mu2 = state.sigma_mu * state.sigma_mu;
        let SumOfTreesState {
            trees,
            fit_sum,
            sigma2,
            offset_mu,
            lambda,
            ..
        } = state;
        // `partial` holds y - offset - (sum of all fits except tree j) and is
        // carried from tree to tree by swapping one fit in and one out.
        let mut partial: Vec<f64> = (0..n)
            .map(|i| y[i] - *offset_mu - fit_sum[i] + trees[0].fits[i])
            .collect();
        let m = trees.len();
        for j in 0..m {
            let (head, tail) = trees.split_at_mut(j + 1);
            let ts = &mut head[j];
            let params = MoveParams {
                data: &self.binned,
                residuals: &partial,
                sigma2: *sigma2,
                sigma_mu2,
                hyper: &self.hyper,
            };
            let (_, stats) = moves::propose_with_stats(ts, &params, rng);
            let mu = moves::draw_from_stats(ts, &stats, *sigma2, sigma_mu2, rng);
            match tail.first() {
                Some(next) => {
                    let rows = ts.fits.iter_mut().zip(&ts.leaf_of_row);
                    for ((fit, &leaf), (p, &nf)) in rows.zip(partial.iter_mut().zip(&next.fits)) {
                        let f = mu[leaf as usize];
                        *fit = f;
                        *p += nf - f;
                    }
                }
                None => {
                    for (fit, &leaf) in ts.fits.iter_mut().zip(&ts.leaf_of_row) {
                        *fit = mu[leaf as usize];
                    }
                }
            }
        }
        // Rebuild the sum in tree order so it matches prediction bit for bit.
        fit_sum.fill(0.0);
        for ts in trees.iter() {
            for (s, f) in fit_sum.iter_mut().zip(&ts.fits) {
                *s += f;
            }
        }
        let ssr: f64 = y
            .iter()
            .zip(fit_sum.iter())
            .map(|(yi, f)| (yi - *offset_mu - f).powi(2))
            .sum();
        let nu = self.hyper.nu;
        let df = nu + n as f64;
        *sigma2 = draw_scaled_inv_chisq(df, (nu * *lambda + ssr) / df, rng)
            .expect("positive scaled-inverse-chi-square parameters");
        Ok(())
    }

    /// Single MH step on one tree against the given residuals.
    pub fn propose_tree_move(
        &self,
        ts: &mut TreeState,
        residuals: &[f64],
        sigma2: f64,
        sigma_mu2: f64,
        rng: &mut RngStream,
    ) -> MoveOutcome {
        let params = MoveParams {
            data: &self.binned,
            residuals,
            sigma2,
            sigma_mu2,
            hyper: &self.hyper,
        };
        moves::propose_tree_move(ts, &params, rng)
    }

    /// Like `propose_tree_move` but with the move type forced.
    pub fn propose_move_of_kind(
        &self,
        ts: &mut TreeState,
        kind: MoveKind,
        residuals: &[f64],
        sigma2: f64,
        sigma_mu2: f64,
        rng: &mut RngStream,
    ) -> MoveOutcome {
        let params = MoveParams {
            data: &self.binned,
            residuals,
            sigma2,
            sigma_mu2,
            hyper: &self.hyper,
        };
        moves::propose_move_of_kind(ts, kind, &params, rng)
    }

    pub fn draw_leaf_means(
        &self,
        ts: &mut TreeState,
        residuals: &[f64],
        sigma2: f64,
        sigma_mu2: f64,
        rng: &mut RngStream,
    ) {
        moves::draw_leaf_means(ts, residuals, sigma2, sigma_mu2, rng)
    }

    pub fn stump_state(&self) -> TreeState {
        TreeState::stump(self.n_rows())
    }

    /// Training fit recomputed by routing every row through every tree.
    pub fn recompute_fitted(&self, state: &SumOfTreesState) -> Vec<f64> {
        let mut sum = vec![0.0; self.n_rows()];
        for ts in &state.trees {
            for (i, s) in sum.iter_mut().enumerate() {
                let leaf = ts.tree.leaf_for_binned(&self.binned, i);
                *s += ts.tree.leaf_mean(leaf).expect("routing ends at a leaf");
            }
        }
        sum.iter().map(|s| state.offset_mu + s).collect()
    }

    pub fn snapshot(&self, state: &SumOfTreesState) -> ForestDraw {
        ForestDraw {
            trees: state
                .trees
                .iter()
                .map(|ts| FlatTree::from_tree(&ts.tree, &self.cutpoints))
                .collect(),
            offset_mu: state.offset_mu,
            sigma: state.sigma2.sqrt(),
            n_cols: self.n_cols,
        }
    }
}

fn ols_basis(x: &CovariateMatrix) -> DMatrix<f64> {
    let (n, p) = (x.n_rows(), x.n_cols());
    let design = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { x.get(i, j - 1) });
    let svd = design.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&j| svd.singular_values[j] > 1e-10 * smax)
        .collect();
    DMatrix::from_fn(n, keep.len(), |i, j| u[(i, keep[j])])
}
