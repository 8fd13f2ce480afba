//! Binary regression tree stored as an index arena.

use super::data::{BinnedData, Cutpoints};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitRule {
    pub var: usize,
    pub cut_index: usize,
}

#[derive(Clone, Debug)]
pub(crate) enum NodeKind {
    Leaf { mu: f64 },
    Internal { rule: SplitRule, left: usize, right: usize },
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub(crate) parent: Option<usize>,
    pub(crate) depth: usize,
    pub(crate) kind: NodeKind,
}

/// Rows with bin `<= cut_index` on `var` go left.
#[derive(Clone, Debug)]
pub struct Tree {
    nodes: Vec<Node>,
    free: Vec<usize>,
}

pub const ROOT: usize = 0;

impl Default for Tree {
    fn default() -> Self {
        Self::stump(0.0)
    }
}

impl Tree {
    pub fn stump(mu: f64) -> Self {
        Self {
            nodes: vec![Node {
                parent: None,
                depth: 0,
                kind: NodeKind::Leaf { mu },
            }],
            free: Vec::new(),
        }
    }

    pub(crate) fn node(&self, i: usize) -> &Node {
        &self.nodes[i]
    }

    /// Upper bound on node indices, for sizing per-node scratch space.
    pub(crate) fn capacity(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_leaf(&self, i: usize) -> bool {
        matches!(self.nodes[i].kind, NodeKind::Leaf { .. })
    }

    pub fn depth(&self, i: usize) -> usize {
        self.nodes[i].depth
    }

    pub fn leaf_mean(&self, i: usize) -> Option<f64> {
        match self.nodes[i].kind {
            NodeKind::Leaf { mu } => Some(mu),
            NodeKind::Internal { .. } => None,
        }
    }

    pub(crate) fn set_leaf_mean(&mut self, i: usize, value: f64) {
        if let NodeKind::Leaf { mu } = &mut self.nodes[i].kind {
            *mu = value;
        }
    }

    pub fn children(&self, i: usize) -> Option<(usize, usize)> {
        match self.nodes[i].kind {
            NodeKind::Internal { left, right, .. } => Some((left, right)),
            NodeKind::Leaf { .. } => None,
        }
    }

    pub fn rule(&self, i: usize) -> Option<SplitRule> {
        match self.nodes[i].kind {
            NodeKind::Internal { rule, .. } => Some(rule),
            NodeKind::Leaf { .. } => None,
        }
    }

    fn visit(&self, mut f: impl FnMut(usize)) {
        let mut stack = vec![ROOT];
        while let Some(i) = stack.pop() {
            f(i);
            if let Some((l, r)) = self.children(i) {
                stack.push(r);
                stack.push(l);
            }
        }
    }

    /// Leaves in depth-first, left-to-right order.
    pub fn leaves(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.visit(|i| {
            if self.is_leaf(i) {
                out.push(i)
            }
        });
        out
    }

    /// Internal nodes whose two children are both leaves.
    pub fn nog_nodes(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.visit(|i| {
            if self.is_nog(i) {
                out.push(i)
            }
        });
        out
    }

    pub(crate) fn is_nog(&self, i: usize) -> bool {
        match self.children(i) {
            Some((l, r)) => self.is_leaf(l) && self.is_leaf(r),
            None => false,
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves().len()
    }

    pub fn max_depth(&self) -> usize {
        let mut d = 0;
        self.visit(|i| d = d.max(self.nodes[i].depth));
        d
    }

    /// Inclusive range of cut indices on `var` still able to split the
    /// region of node `i`, or `None` when the ancestors exhaust the grid.
    pub fn available_cuts(&self, i: usize, var: usize, n_cuts: usize) -> Option<(usize, usize)> {
        if n_cuts == 0 {
            return None;
        }
        let (mut lo, mut hi) = (0i64, n_cuts as i64 - 1);
        let mut child = i;
        while let Some(p) = self.nodes[child].parent {
            if let NodeKind::Internal { rule, left, .. } = self.nodes[p].kind {
                if rule.var == var {
                    if child == left {
                        hi = hi.min(rule.cut_index as i64 - 1);
                    } else {
                        lo = lo.max(rule.cut_index as i64 + 1);
                    }
                }
            }
            child = p;
        }
        (lo <= hi).then_some((lo as usize, hi as usize))
    }

    pub(crate) fn grow(&mut self, leaf: usize, rule: SplitRule) -> (usize, usize) {
        debug_assert!(self.is_leaf(leaf));
        let depth = self.nodes[leaf].depth + 1;
        let alloc = |tree: &mut Tree| {
            let node = Node {
                parent: Some(leaf),
                depth,
                kind: NodeKind::Leaf { mu: 0.0 },
            };
            match tree.free.pop() {
                Some(slot) => {
                    tree.nodes[slot] = node;
                    slot
                }
                None => {
                    tree.nodes.push(node);
                    tree.nodes.len() - 1
                }
            }
        };
        let left = alloc(self);
        let right = alloc(self);
        self.nodes[leaf].kind = NodeKind::Internal { rule, left, right };
        (left, right)
    }

    /// Collapse an internal node whose children are leaves. The node becomes
    /// a leaf with mean 0.
    pub(crate) fn prune(&mut self, node: usize) {
        let (l, r) = self.children(node).expect("prune on a leaf");
        debug_assert!(self.is_leaf(l) && self.is_leaf(r));
        self.nodes[node].kind = NodeKind::Leaf { mu: 0.0 };
        for slot in [r, l] {
            if slot + 1 == self.nodes.len() {
                self.nodes.pop();
            } else {
                self.free.push(slot);
            }
        }
        // Trailing free slots can be dropped once the tail is released.
        while let Some(pos) = self.free.iter().position(|&s| s + 1 == self.nodes.len()) {
            self.free.swap_remove(pos);
            self.nodes.pop();
        }
    }

    #[inline]
    pub(crate) fn leaf_for_binned(&self, data: &BinnedData, row: usize) -> usize {
        let mut i = ROOT;
        while let NodeKind::Internal { rule, left, right } = self.nodes[i].kind {
            i = if data.bins[rule.var][row] as usize <= rule.cut_index {
                left
            } else {
                right
            };
        }
        i
    }

    pub fn leaf_for(&self, x: &[f64], cuts: &Cutpoints) -> usize {
        let mut i = ROOT;
        while let NodeKind::Internal { rule, left, right } = self.nodes[i].kind {
            i = if x[rule.var] < cuts.grid(rule.var)[rule.cut_index] {
                left
            } else {
                right
            };
        }
        i
    }

    fn same_subtree(&self, i: usize, other: &Tree, j: usize) -> bool {
        match (&self.nodes[i].kind, &other.nodes[j].kind) {
            (NodeKind::Leaf { mu: a }, NodeKind::Leaf { mu: b }) => a.to_bits() == b.to_bits(),
            (
                NodeKind::Internal {
                    rule: ra,
                    left: la,
                    right: rra,
                },
                NodeKind::Internal {
                    rule: rb,
                    left: lb,
                    right: rrb,
                },
            ) => ra == rb && self.same_subtree(*la, other, *lb) && self.same_subtree(*rra, other, *rrb),
            _ => false,
        }
    }
}

/// Structural equality: same shape, rules and leaf values (bitwise),
/// regardless of arena layout.
impl PartialEq for Tree {
    fn eq(&self, other: &Self) -> bool {
        self.same_subtree(ROOT, other, ROOT)
    }
}
