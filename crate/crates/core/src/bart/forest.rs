use serde::{Deserialize, Serialize};

use super::data::{CovariateMatrix, Cutpoints};
use super::tree::{Tree, ROOT};
use super::BartError;

const LEAF: u32 = u32::MAX;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct FlatNode {
    var: u32,
    cut: f64,
    left: u32,
    right: u32,
    value: f64,
}

/// Compact, immutable copy of one tree with cut values resolved.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlatTree {
    nodes: Vec<FlatNode>,
}

impl FlatTree {
    pub(crate) fn from_tree(tree: &Tree, cuts: &Cutpoints) -> Self {
        let mut nodes = Vec::new();
        Self::push(tree, ROOT, cuts, &mut nodes);
        Self { nodes }
    }

    fn push(tree: &Tree, i: usize, cuts: &Cutpoints, out: &mut Vec<FlatNode>) -> u32 {
        let idx = out.len();
        match (tree.rule(i), tree.children(i)) {
            (Some(rule), Some((l, r))) => {
                out.push(FlatNode {
                    var: rule.var as u32,
                    cut: cuts.grid(rule.var)[rule.cut_index],
                    left: 0,
                    right: 0,
                    value: 0.0,
                });
                let left = Self::push(tree, l, cuts, out);
                let right = Self::push(tree, r, cuts, out);
                out[idx].left = left;
                out[idx].right = right;
            }
            _ => out.push(FlatNode {
                var: LEAF,
                cut: 0.0,
                left: 0,
                right: 0,
                value: tree.leaf_mean(i).unwrap_or(0.0),
            }),
        }
        idx as u32
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut i = 0usize;
        loop {
            let node = &self.nodes[i];
            if node.var == LEAF {
                return node.value;
            }
            i = if x[node.var as usize] < node.cut {
                node.left as usize
            } else {
                node.right as usize
            };
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.var == LEAF).count()
    }
}

/// One posterior draw of the sum-of-trees model: `offset_mu + sum_j g_j(x)`
/// with error standard deviation `sigma`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ForestDraw {
    pub trees: Vec<FlatTree>,
    pub offset_mu: f64,
    pub sigma: f64,
    pub n_cols: usize,
}

impl ForestDraw {
    /// Mean on the response scale for one covariate row.
    pub fn predict_row(&self, x: &[f64]) -> Result<f64, BartError> {
        if x.len() != self.n_cols {
            return Err(BartError::SchemaMismatch {
                expected: self.n_cols,
                got: x.len(),
                context: "prediction row".into(),
            });
        }
        Ok(self.eval_unchecked(x))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for t in &self.trees {
            acc += t.eval(x);
        }
        self.offset_mu + acc
    }

    pub fn predict(&self, x: &CovariateMatrix) -> Result<Vec<f64>, BartError> {
        if x.n_cols() != self.n_cols {
            return Err(BartError::SchemaMismatch {
                expected: self.n_cols,
                got: x.n_cols(),
                context: "prediction matrix".into(),
            });
        }
        Ok((0..x.n_rows()).map(|i| self.eval_unchecked(x.row(i))).collect())
    }
}
