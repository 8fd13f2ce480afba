use log::debug;

use super::BartError;

/// Dense row-major covariate matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CovariateMatrix {
    n_rows: usize,
    n_cols: usize,
    values: Vec<f64>,
}

impl CovariateMatrix {
    pub fn new(n_rows: usize, n_cols: usize, values: Vec<f64>) -> Result<Self, BartError> {
        if values.len() != n_rows * n_cols {
            return Err(BartError::InvalidInput(format!(
                "matrix buffer has {} values, expected {n_rows} x {n_cols}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(BartError::InvalidInput(format!(
                "non-finite covariate at row {}, column {}",
                pos / n_cols.max(1),
                pos % n_cols.max(1)
            )));
        }
        Ok(Self {
            n_rows,
            n_cols,
            values,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, BartError> {
        let n_cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(rows.len() * n_cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != n_cols {
                return Err(BartError::SchemaMismatch {
                    expected: n_cols,
                    got: row.len(),
                    context: format!("row {i}"),
                });
            }
            values.extend_from_slice(row);
        }
        Self::new(rows.len(), n_cols, values)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_cols..(i + 1) * self.n_cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_cols + j]
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_rows).map(move |i| self.get(i, j))
    }

    /// Copy with column `j` overwritten by `value` on every row.
    pub fn with_column_set(&self, j: usize, value: f64) -> Self {
        let mut out = self.clone();
        for i in 0..self.n_rows {
            out.values[i * self.n_cols + j] = value;
        }
        out
    }
}

/// Per-covariate split grids. An empty grid means the covariate is never
/// proposed as a split variable.
#[derive(Clone, Debug, PartialEq)]
pub struct Cutpoints {
    grids: Vec<Vec<f64>>,
}

impl Cutpoints {
    pub fn from_grids(grids: Vec<Vec<f64>>) -> Self {
        Self { grids }
    }

    pub fn n_vars(&self) -> usize {
        self.grids.len()
    }

    pub fn grid(&self, var: usize) -> &[f64] {
        &self.grids[var]
    }

    pub fn n_cuts(&self, var: usize) -> usize {
        self.grids[var].len()
    }

    /// Number of grid values `<= x`; a value goes left at cut `c` iff its
    /// bin is `<= c`.
    #[inline]
    pub fn bin(&self, var: usize, x: f64) -> usize {
        self.grids[var].partition_point(|&c| c <= x)
    }
}

/// Grids of `numcut` evenly spaced interior points between each column's
/// observed min and max. 0/1 columns get the single cut 0.5 and constant
/// columns get no cuts.
pub fn build_cutpoints(x: &CovariateMatrix, numcut: usize) -> Cutpoints {
    let grids = (0..x.n_cols())
        .map(|j| {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            let mut binary = true;
            for v in x.column(j) {
                lo = lo.min(v);
                hi = hi.max(v);
                binary &= v == 0.0 || v == 1.0;
            }
            if x.n_rows() == 0 || lo == hi {
                debug!("covariate {j} is constant; excluded from splitting");
                Vec::new()
            } else if binary {
                vec![0.5]
            } else {
                let step = (hi - lo) / (numcut as f64 + 1.0);
                (1..=numcut).map(|k| lo + k as f64 * step).collect()
            }
        })
        .collect();
    Cutpoints { grids }
}

/// Training covariates discretized against the cutpoint grids, stored
/// column-major for cheap per-variable scans.
#[derive(Clone, Debug)]
pub(crate) struct BinnedData {
    pub(crate) n_rows: usize,
    pub(crate) bins: Vec<Vec<u32>>,
    pub(crate) n_cuts: Vec<usize>,
}

impl BinnedData {
    pub(crate) fn new(x: &CovariateMatrix, cuts: &Cutpoints) -> Self {
        let bins = (0..x.n_cols())
            .map(|j| x.column(j).map(|v| cuts.bin(j, v) as u32).collect())
            .collect();
        let n_cuts = (0..cuts.n_vars()).map(|j| cuts.n_cuts(j)).collect();
        Self {
            n_rows: x.n_rows(),
            bins,
            n_cuts,
        }
    }

    pub(crate) fn n_vars(&self) -> usize {
        self.n_cuts.len()
    }
}
