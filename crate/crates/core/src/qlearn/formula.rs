//! Model formulas: `+`-separated terms, `*` or `:` for products.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use super::QlearnError;
use crate::bart::CovariateMatrix;

/// One design term: a single column or a product of columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Term(Vec<String>);

impl Term {
    pub fn factors(&self) -> &[String] {
        &self.0
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join("*"))
    }
}

/// Ordered list of terms with an implicit intercept. `1` alone is the
/// intercept-only model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelFormula {
    terms: Vec<Term>,
}

impl ModelFormula {
    pub fn parse(text: &str) -> Result<Self, QlearnError> {
        let text = text.trim();
        if text == "1" {
            return Ok(Self { terms: Vec::new() });
        }
        let mut terms = Vec::new();
        let mut seen = HashSet::new();
        for raw in text.split('+') {
            let factors: Vec<String> = raw.split(['*', ':']).map(|f| f.trim().to_string()).collect();
            if let Some(bad) = factors.iter().find(|f| !is_name(f)) {
                return Err(QlearnError::Formula(format!("bad column name {bad:?} in {text:?}")));
            }
            let mut key = factors.clone();
            key.sort();
            if !seen.insert(key) {
                return Err(QlearnError::Formula(format!("duplicate term {:?}", raw.trim())));
            }
            terms.push(Term(factors));
        }
        Ok(Self { terms })
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    /// Design column labels, intercept first.
    pub fn column_names(&self) -> Vec<String> {
        std::iter::once("(Intercept)".to_string())
            .chain(self.terms.iter().map(Term::to_string))
            .collect()
    }

    pub fn n_columns(&self) -> usize {
        self.terms.len() + 1
    }

    /// Intercept plus one column per term over the named columns of `x`.
    pub fn build_design(&self, names: &[String], x: &CovariateMatrix) -> Result<DMatrix<f64>, QlearnError> {
        if names.len() != x.n_cols() {
            return Err(QlearnError::InvalidInput(format!(
                "{} names for {} columns",
                names.len(),
                x.n_cols()
            )));
        }
        let index: Vec<Vec<usize>> = self
            .terms
            .iter()
            .map(|t| {
                t.0.iter()
                    .map(|f| {
                        names
                            .iter()
                            .position(|n| n == f)
                            .ok_or_else(|| QlearnError::UnknownColumn(f.clone()))
                    })
                    .collect()
            })
            .collect::<Result<_, _>>()?;
        Ok(DMatrix::from_fn(x.n_rows(), self.n_columns(), |i, j| {
            if j == 0 {
                1.0
            } else {
                index[j - 1].iter().map(|&c| x.get(i, c)).product()
            }
        }))
    }
}

fn is_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

impl FromStr for ModelFormula {
    type Err = QlearnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl fmt::Display for ModelFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return f.write_str("1");
        }
        let parts: Vec<String> = self.terms.iter().map(Term::to_string).collect();
        f.write_str(&parts.join(" + "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn single_term_design() {
        let f = ModelFormula::parse("x1").unwrap();
        let x = CovariateMatrix::from_rows(&[vec![2.0], vec![3.0]]).unwrap();
        let d = f.build_design(&names(&["x1"]), &x).unwrap();
        assert_eq!(d, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1.0, 3.0]));
    }

    #[test]
    fn products_and_labels() {
        let f = ModelFormula::parse("x1 + b1 + x1*b1 + a1 + a1*x1 + a1*b1").unwrap();
        assert_eq!(
            f.column_names(),
            names(&["(Intercept)", "x1", "b1", "x1*b1", "a1", "a1*x1", "a1*b1"])
        );
        let x = CovariateMatrix::from_rows(&[vec![0.5, 1.0, 1.0]]).unwrap();
        let d = f.build_design(&names(&["x1", "b1", "a1"]), &x).unwrap();
        assert_eq!(d.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.5, 1.0, 0.5, 1.0, 0.5, 1.0]);
        assert_eq!(f.to_string().parse::<ModelFormula>().unwrap(), f);
        assert_eq!(ModelFormula::parse("x1 + b1 + x1:b1 + a1 + a1:x1 + a1:b1").unwrap(), f);
    }

    #[test]
    fn rejects_bad_formulas() {
        assert!(ModelFormula::parse("x1 + x1").is_err());
        assert!(ModelFormula::parse("a1*x1 + x1*a1").is_err());
        assert!(ModelFormula::parse("x1 + ").is_err());
        assert!(ModelFormula::parse("x1 ** b1").is_err());
        let f = ModelFormula::parse("x1 + q").unwrap();
        let x = CovariateMatrix::from_rows(&[vec![1.0]]).unwrap();
        assert!(matches!(
            f.build_design(&names(&["x1"]), &x),
            Err(QlearnError::UnknownColumn(c)) if c == "q"
        ));
        assert_eq!(ModelFormula::parse("1").unwrap().n_columns(), 1);
    }
}
