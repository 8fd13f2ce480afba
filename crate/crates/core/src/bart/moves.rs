//! GROW/PRUNE Metropolis-Hastings moves and conjugate leaf updates.

use std::f64::consts::PI;

use super::data::BinnedData;
use super::tree::{SplitRule, Tree};
use super::{BartHyper, TreeState};
use crate::sampling::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MoveKind {
    Grow,
    Prune,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MoveOutcome {
    /// `None` when neither move is legal.
    pub kind: Option<MoveKind>,
    pub accepted: bool,
}

/// Log of the integral of `prod_i N(r_i; mu, sigma2) N(mu; 0, sigma_mu2)` over `mu`.
pub fn node_marginal_loglik(residuals: &[f64], sigma2: f64, sigma_mu2: f64) -> f64 {
    if residuals.is_empty() {
        return 0.0;
    }
    let n = residuals.len() as f64;
    let s: f64 = residuals.iter().sum();
    let ss: f64 = residuals.iter().map(|r| r * r).sum();
    -0.5 * n * (2.0 * PI * sigma2).ln() - ss / (2.0 * sigma2) + collapsed_term(n, s, sigma2, sigma_mu2)
}

/// The part of the node marginal likelihood that depends on the partition.
#[inline]
fn collapsed_term(n: f64, s: f64, sigma2: f64, tau2: f64) -> f64 {
    let v = sigma2 + n * tau2;
    0.5 * (sigma2 / v).ln() + tau2 * s * s / (2.0 * sigma2 * v)
}

/// Per-node row counts and residual sums.
pub(crate) struct LeafStats {
    count: Vec<usize>,
    sum: Vec<f64>,
}

impl LeafStats {
    fn scatter(ts: &TreeState, residuals: &[f64]) -> Self {
        let cap = ts.tree.capacity();
        let mut count = vec![0usize; cap];
        let mut sum = vec![0.0; cap];
        if cap == 1 {
            count[0] = residuals.len();
            sum[0] = residuals.iter().sum();
        } else {
            for (&owner, &r) in ts.leaf_of_row.iter().zip(residuals) {
                count[owner as usize] += 1;
                sum[owner as usize] += r;
            }
        }
        Self { count, sum }
    }

    fn set(&mut self, node: usize, count: usize, sum: f64) {
        if node >= self.count.len() {
            self.count.resize(node + 1, 0);
            self.sum.resize(node + 1, 0.0);
        }
        self.count[node] = count;
        self.sum[node] = sum;
    }
}

fn split_prob(hyper: &BartHyper, depth: usize) -> f64 {
    hyper.alpha_base * (1.0 + depth as f64).powf(-hyper.beta_power)
}

fn is_growable(tree: &Tree, node: usize, data: &BinnedData) -> bool {
    (0..data.n_vars()).any(|v| tree.available_cuts(node, v, data.n_cuts[v]).is_some())
}

struct Context {
    goodbots: Vec<usize>,
    nogs: Vec<usize>,
    p_grow: f64,
}

impl Context {
    fn new(tree: &Tree, data: &BinnedData) -> Self {
        let goodbots: Vec<usize> = tree
            .leaves()
            .into_iter()
            .filter(|&l| is_growable(tree, l, data))
            .collect();
        let nogs = tree.nog_nodes();
        let p_grow = if goodbots.is_empty() {
            0.0
        } else if nogs.is_empty() {
            1.0
        } else {
            0.5
        };
        Self {
            goodbots,
            nogs,
            p_grow,
        }
    }
}

pub(crate) struct MoveParams<'a> {
    pub(crate) data: &'a BinnedData,
    pub(crate) residuals: &'a [f64],
    pub(crate) sigma2: f64,
    pub(crate) sigma_mu2: f64,
    pub(crate) hyper: &'a BartHyper,
}

/// One MH step: GROW or PRUNE with probability 1/2 each when both are legal.
pub(crate) fn propose_tree_move(ts: &mut TreeState, p: &MoveParams, rng: &mut RngStream) -> MoveOutcome {
    propose_with_stats(ts, p, rng).0
}

/// As `propose_tree_move`, also returning leaf statistics of the resulting
/// tree against `p.residuals`.
pub(crate) fn propose_with_stats(
    ts: &mut TreeState,
    p: &MoveParams,
    rng: &mut RngStream,
) -> (MoveOutcome, LeafStats) {
    let ctx = Context::new(&ts.tree, p.data);
    if ctx.goodbots.is_empty() && ctx.nogs.is_empty() {
        let out = MoveOutcome {
            kind: None,
            accepted: false,
        };
        return (out, LeafStats::scatter(ts, p.residuals));
    }
    if rng.uniform() < ctx.p_grow {
        grow(ts, p, &ctx, rng)
    } else {
        prune(ts, p, &ctx, rng)
    }
}

pub(crate) fn propose_move_of_kind(
    ts: &mut TreeState,
    kind: MoveKind,
    p: &MoveParams,
    rng: &mut RngStream,
) -> MoveOutcome {
    let ctx = Context::new(&ts.tree, p.data);
    match kind {
        MoveKind::Grow => grow(ts, p, &ctx, rng).0,
        MoveKind::Prune => prune(ts, p, &ctx, rng).0,
    }
}

fn accept(log_ratio: f64, rng: &mut RngStream) -> bool {
    log_ratio >= 0.0 || rng.uniform().ln() < log_ratio
}

fn grow(
    ts: &mut TreeState,
    p: &MoveParams,
    ctx: &Context,
    rng: &mut RngStream,
) -> (MoveOutcome, LeafStats) {
    let rejected = MoveOutcome {
        kind: Some(MoveKind::Grow),
        accepted: false,
    };
    if ctx.goodbots.is_empty() {
        return (rejected, LeafStats::scatter(ts, p.residuals));
    }
    let tree = &ts.tree;
    let data = p.data;
    let leaf = ctx.goodbots[rng.index(ctx.goodbots.len())];
    let vars: Vec<(usize, usize, usize)> = (0..data.n_vars())
        .filter_map(|v| tree.available_cuts(leaf, v, data.n_cuts[v]).map(|(lo, hi)| (v, lo, hi)))
        .collect();
    let (var, lo, hi) = vars[rng.index(vars.len())];
    let cut = lo + rng.index(hi - lo + 1);

    let bins = &data.bins[var];
    let (leaf32, cut32) = (leaf as u32, cut as u32);
    let (mut nl, mut sl) = (0usize, 0.0);
    let mut stats = if tree.capacity() == 1 {
        for (&b, &r) in bins.iter().zip(p.residuals) {
            let left = b <= cut32;
            nl += usize::from(left);
            sl += if left { r } else { 0.0 };
        }
        LeafStats {
            count: vec![p.residuals.len()],
            sum: vec![p.residuals.iter().sum()],
        }
    } else {
        let cap = tree.capacity();
        let (mut count, mut sum) = (vec![0usize; cap], vec![0.0; cap]);
        for ((&owner, &b), &r) in ts.leaf_of_row.iter().zip(bins).zip(p.residuals) {
            count[owner as usize] += 1;
            sum[owner as usize] += r;
            let left = (owner == leaf32) & (b <= cut32);
            nl += usize::from(left);
            sl += if left { r } else { 0.0 };
        }
        LeafStats { count, sum }
    };
    let (nr, sr) = (stats.count[leaf] - nl, stats.sum[leaf] - sl);
    if nl < p.hyper.min_node_size || nr < p.hyper.min_node_size {
        return (rejected, stats);
    }

    let d = tree.depth(leaf);
    let pd = split_prob(p.hyper, d);
    let left_growable = cut > lo || vars.len() > 1;
    let right_growable = cut < hi || vars.len() > 1;
    let pl = if left_growable { split_prob(p.hyper, d + 1) } else { 0.0 };
    let pr = if right_growable { split_prob(p.hyper, d + 1) } else { 0.0 };
    let parent_was_nog = tree.node(leaf).parent.is_some_and(|q| tree.is_nog(q));
    let nog_after = ctx.nogs.len() - usize::from(parent_was_nog) + 1;
    let good_after =
        ctx.goodbots.len() - 1 + usize::from(left_growable) + usize::from(right_growable);
    let p_prune_after = if good_after == 0 { 1.0 } else { 0.5 };

    let log_prior = pd.ln() + (1.0 - pl).ln() + (1.0 - pr).ln() - (1.0 - pd).ln();
    let log_proposal = (p_prune_after / nog_after as f64).ln()
        - (ctx.p_grow / ctx.goodbots.len() as f64).ln();
    let (s2, t2) = (p.sigma2, p.sigma_mu2);
    let log_lik = collapsed_term(nl as f64, sl, s2, t2) + collapsed_term(nr as f64, sr, s2, t2)
        - collapsed_term((nl + nr) as f64, sl + sr, s2, t2);

    if !accept(log_prior + log_proposal + log_lik, rng) {
        return (rejected, stats);
    }
    let (l, r) = ts.tree.grow(leaf, SplitRule { var, cut_index: cut });
    for (owner, &b) in ts.leaf_of_row.iter_mut().zip(bins) {
        if *owner == leaf32 {
            *owner = if b <= cut32 { l } else { r } as u32;
        }
    }
    stats.set(l, nl, sl);
    stats.set(r, nr, sr);
    let out = MoveOutcome {
        kind: Some(MoveKind::Grow),
        accepted: true,
    };
    (out, stats)
}

fn prune(
    ts: &mut TreeState,
    p: &MoveParams,
    ctx: &Context,
    rng: &mut RngStream,
) -> (MoveOutcome, LeafStats) {
    let rejected = MoveOutcome {
        kind: Some(MoveKind::Prune),
        accepted: false,
    };
    let mut stats = LeafStats::scatter(ts, p.residuals);
    if ctx.nogs.is_empty() {
        return (rejected, stats);
    }
    let tree = &ts.tree;
    let node = ctx.nogs[rng.index(ctx.nogs.len())];
    let (l, r) = tree.children(node).expect("nog node has children");

    let (nl, sl, nr, sr) = (stats.count[l], stats.sum[l], stats.count[r], stats.sum[r]);

    let d = tree.depth(node);
    let pd = split_prob(p.hyper, d);
    let left_growable = is_growable(tree, l, p.data);
    let right_growable = is_growable(tree, r, p.data);
    let pl = if left_growable { split_prob(p.hyper, d + 1) } else { 0.0 };
    let pr = if right_growable { split_prob(p.hyper, d + 1) } else { 0.0 };
    let sibling_is_leaf = tree.node(node).parent.is_some_and(|q| {
        let (a, b) = tree.children(q).expect("parent is internal");
        tree.is_leaf(if a == node { b } else { a })
    });
    let nog_after = ctx.nogs.len() - 1 + usize::from(sibling_is_leaf);
    let good_after =
        ctx.goodbots.len() + 1 - usize::from(left_growable) - usize::from(right_growable);
    let p_grow_after = if nog_after == 0 { 1.0 } else { 0.5 };

    let log_prior = (1.0 - pd).ln() - pd.ln() - (1.0 - pl).ln() - (1.0 - pr).ln();
    let log_proposal = (p_grow_after / good_after as f64).ln()
        - ((1.0 - ctx.p_grow) / ctx.nogs.len() as f64).ln();
    let (s2, t2) = (p.sigma2, p.sigma_mu2);
    let log_lik = collapsed_term((nl + nr) as f64, sl + sr, s2, t2)
        - collapsed_term(nl as f64, sl, s2, t2)
        - collapsed_term(nr as f64, sr, s2, t2);

    if !accept(log_prior + log_proposal + log_lik, rng) {
        return (rejected, stats);
    }
    ts.tree.prune(node);
    let (l32, r32) = (l as u32, r as u32);
    for owner in ts.leaf_of_row.iter_mut() {
        if *owner == l32 || *owner == r32 {
            *owner = node as u32;
        }
    }
    stats.set(node, nl + nr, sl + sr);
    let out = MoveOutcome {
        kind: Some(MoveKind::Prune),
        accepted: true,
    };
    (out, stats)
}

/// Conjugate normal draw for every leaf mean; refreshes the per-row fits.
pub(crate) fn draw_leaf_means(
    ts: &mut TreeState,
    residuals: &[f64],
    sigma2: f64,
    sigma_mu2: f64,
    rng: &mut RngStream,
) {
    let mu = draw_leaf_table(ts, residuals, sigma2, sigma_mu2, rng);
    for (fit, &owner) in ts.fits.iter_mut().zip(&ts.leaf_of_row) {
        *fit = mu[owner as usize];
    }
}

/// Draws every leaf mean and returns them indexed by node; the cached
/// per-row fits are left for the caller to refresh.
pub(crate) fn draw_leaf_table(
    ts: &mut TreeState,
    residuals: &[f64],
    sigma2: f64,
    sigma_mu2: f64,
    rng: &mut RngStream,
) -> Vec<f64> {
    let stats = LeafStats::scatter(ts, residuals);
    draw_from_stats(ts, &stats, sigma2, sigma_mu2, rng)
}

pub(crate) fn draw_from_stats(
    ts: &mut TreeState,
    stats: &LeafStats,
    sigma2: f64,
    sigma_mu2: f64,
    rng: &mut RngStream,
) -> Vec<f64> {
    let mut mu = vec![0.0; ts.tree.capacity()];
    for leaf in ts.tree.leaves() {
        let value = if sigma_mu2 > 0.0 {
            let var = 1.0 / (stats.count[leaf] as f64 / sigma2 + 1.0 / sigma_mu2);
            var * stats.sum[leaf] / sigma2 + var.sqrt() * rng.standard_normal()
        } else {
            0.0
        };
        ts.tree.set_leaf_mean(leaf, value);
        mu[leaf] = value;
    }
    mu
}
