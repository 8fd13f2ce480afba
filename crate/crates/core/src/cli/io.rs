//! Cohort, truth and matrix files.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::warn;
use nalgebra::DMatrix;

use super::CliError;
use crate::cohort::{Action, Cohort, NewSubject, StageTwo, TwoStageRecord};
use crate::simulation::{SimulatedCohort, SubjectTruth};

pub const TRUTH_HEADER: [&str; 5] = ["id", "a1_opt", "a2_opt", "mean_logt2_opt", "mean_logtotal_opt"];

/// Which CSV columns hold each field.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnBindings {
    pub id: Option<String>,
    pub x1: Vec<String>,
    pub a1: String,
    pub time1: String,
    pub delta1: String,
    pub eta: String,
    pub x2: Vec<String>,
    pub a2: String,
    pub time2: String,
    pub delta2: String,
    /// Single overall event indicator; replaces `delta1`/`delta2` when set.
    pub delta: Option<String>,
}

impl Default for ColumnBindings {
    fn default() -> Self {
        let s = |v: &str| v.to_string();
        Self {
            id: Some(s("id")),
            x1: vec![s("x1"), s("b1"), s("z1")],
            a1: s("a1"),
            time1: s("time1"),
            delta1: s("delta1"),
            eta: s("eta"),
            x2: vec![s("x2"), s("b2"), s("z2")],
            a2: s("a2"),
            time2: s("time2"),
            delta2: s("delta2"),
            delta: None,
        }
    }
}

struct Table {
    header: HashMap<String, usize>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read(path: &Path) -> Result<Self, CliError> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e))?;
        let header = rdr
            .headers()
            .map_err(|e| CliError::io(path, e))?
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim().to_string(), i))
            .collect();
        let rows = rdr
            .records()
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::io(path, e))?;
        Ok(Self { header, rows })
    }

    fn col(&self, name: &str) -> Result<usize, CliError> {
        self.header
            .get(name)
            .copied()
            .ok_or_else(|| CliError::Binding(format!("column {name:?} not found in header")))
    }

    fn raw(&self, row: usize, col: usize) -> &str {
        self.rows[row].get(col).unwrap_or("").trim()
    }

    fn real(&self, row: usize, col: usize, name: &str) -> Result<Option<f64>, CliError> {
        let s = self.raw(row, col);
        if s.is_empty() || s == "NA" {
            return Ok(None);
        }
        s.parse()
            .map(Some)
            .map_err(|_| CliError::Data(format!("row {}: {name} = {s:?} is not a number", row + 1)))
    }

    fn required(&self, row: usize, col: usize, name: &str) -> Result<f64, CliError> {
        self.real(row, col, name)?
            .ok_or_else(|| CliError::Data(format!("row {}: {name} is missing", row + 1)))
    }

    fn flag(&self, row: usize, col: usize, name: &str) -> Result<bool, CliError> {
        match self.required(row, col, name)? {
            0.0 => Ok(false),
            1.0 => Ok(true),
            v => Err(CliError::Data(format!("row {}: {name} = {v} is not 0/1", row + 1))),
        }
    }

    fn action(&self, row: usize, col: usize, name: &str) -> Result<Action, CliError> {
        let v = self.required(row, col, name)?;
        if v < 0.0 || v.fract() != 0.0 || v > f64::from(Action::MAX) {
            return Err(CliError::Data(format!(
                "row {}: {name} = {v} is not a non-negative integer code",
                row + 1
            )));
        }
        Ok(v as Action)
    }

    fn id(&self, row: usize, col: Option<usize>) -> String {
        col.map_or_else(|| (row + 1).to_string(), |c| self.raw(row, c).to_string())
    }
}

fn stage2_only(b: &ColumnBindings) -> Vec<String> {
    let out: Vec<String> = b.x2.iter().filter(|n| !b.x1.contains(n)).cloned().collect();
    if out.len() != b.x2.len() {
        warn!("Stage-2 covariates repeated from Stage 1 are already part of the Stage-2 history");
    }
    out
}

enum DeltaColumns<'a> {
    Split(usize, usize),
    Overall(usize, &'a str),
}

/// A cohort file, plus Stage-2 covariates where present for non-entrants.
pub struct LoadedCohort {
    pub cohort: Cohort,
    pub o2_all: Vec<Option<Vec<f64>>>,
}

pub fn read_cohort(path: &Path, b: &ColumnBindings) -> Result<LoadedCohort, CliError> {
    let t = Table::read(path)?;
    let id = b.id.as_deref().map(|n| t.col(n)).transpose()?;
    let x1: Vec<usize> = b.x1.iter().map(|n| t.col(n)).collect::<Result<_, _>>()?;
    let x2_names = stage2_only(b);
    let x2: Vec<usize> = x2_names.iter().map(|n| t.col(n)).collect::<Result<_, _>>()?;
    let (a1, time1, eta, a2, time2) = (t.col(&b.a1)?, t.col(&b.time1)?, t.col(&b.eta)?, t.col(&b.a2)?, t.col(&b.time2)?);
    let deltas = match &b.delta {
        Some(d) => DeltaColumns::Overall(t.col(d)?, d),
        None => DeltaColumns::Split(t.col(&b.delta1)?, t.col(&b.delta2)?),
    };
    let mut records = Vec::with_capacity(t.rows.len());
    let mut o2_all = Vec::with_capacity(t.rows.len());
    for r in 0..t.rows.len() {
        let o1 = x1
            .iter()
            .zip(&b.x1)
            .map(|(&c, n)| t.required(r, c, n))
            .collect::<Result<Vec<_>, _>>()?;
        let o2: Option<Vec<f64>> = x2
            .iter()
            .zip(&x2_names)
            .map(|(&c, n)| t.real(r, c, n))
            .collect::<Result<Option<Vec<_>>, _>>()?;
        let entrant = t.flag(r, eta, &b.eta)?;
        let (delta1, delta2) = match deltas {
            DeltaColumns::Split(d1, d2) => {
                (t.flag(r, d1, &b.delta1)?, entrant && t.flag(r, d2, &b.delta2)?)
            }
            // Entry is an observed event; the overall flag belongs to the last stage reached.
            DeltaColumns::Overall(d, name) => {
                let d = t.flag(r, d, name)?;
                if entrant {
                    (true, d)
                } else {
                    (d, false)
                }
            }
        };
        let stage2 = if entrant {
            Some(StageTwo {
                o2: o2
                    .clone()
                    .ok_or_else(|| CliError::Data(format!("row {}: entrant has missing Stage-2 covariates", r + 1)))?,
                a2: t.action(r, a2, &b.a2)?,
                time2: t.required(r, time2, &b.time2)?,
                delta2,
            })
        } else {
            None
        };
        records.push(TwoStageRecord {
            id: t.id(r, id),
            o1,
            a1: t.action(r, a1, &b.a1)?,
            time1: t.required(r, time1, &b.time1)?,
            delta1,
            stage2,
        });
        o2_all.push(o2);
    }
    let cohort = Cohort::new(b.x1.clone(), x2_names, records).map_err(|e| CliError::Data(e.to_string()))?;
    Ok(LoadedCohort { cohort, o2_all })
}

/// New subjects need Stage-1 covariates, `a1`, `time1` and Stage-2
/// covariates on every row.
pub fn read_new_subjects(path: &Path, b: &ColumnBindings) -> Result<Vec<NewSubject>, CliError> {
    let t = Table::read(path)?;
    let id = b.id.as_deref().map(|n| t.col(n)).transpose()?;
    let x1: Vec<usize> = b.x1.iter().map(|n| t.col(n)).collect::<Result<_, _>>()?;
    let x2_names = stage2_only(b);
    let x2: Vec<usize> = x2_names.iter().map(|n| t.col(n)).collect::<Result<_, _>>()?;
    let (a1, time1) = (t.col(&b.a1)?, t.col(&b.time1)?);
    (0..t.rows.len())
        .map(|r| {
            Ok(NewSubject {
                id: t.id(r, id),
                o1: x1.iter().zip(&b.x1).map(|(&c, n)| t.required(r, c, n)).collect::<Result<_, _>>()?,
                a1: t.action(r, a1, &b.a1)?,
                time1: t.required(r, time1, &b.time1)?,
                o2: x2.iter().zip(&x2_names).map(|(&c, n)| t.required(r, c, n)).collect::<Result<_, _>>()?,
            })
        })
        .collect()
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<(), CliError> {
    w.flush().map_err(|e| CliError::io(path, e))
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

/// Generic cohort layout: `id`, Stage-1 covariates, `a1,time1,delta1,eta`,
/// Stage-2 covariates, `a2,time2,delta2`. Stage-2 covariates are written for
/// everyone; Stage-2 outcome fields are empty for non-entrants.
pub fn write_simulated_cohort(sim: &SimulatedCohort, path: &Path) -> Result<(), CliError> {
    let c = &sim.cohort;
    let mut w = create(path)?;
    let mut header = vec!["id".to_string()];
    header.extend(c.o1_names().iter().cloned());
    header.extend(["a1", "time1", "delta1", "eta"].map(String::from));
    header.extend(c.o2_names().iter().cloned());
    header.extend(["a2", "time2", "delta2"].map(String::from));
    let io = |e| CliError::io(path, e);
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for (r, l) in c.records().iter().zip(&sim.latent) {
        let mut f: Vec<String> = vec![r.id.clone()];
        f.extend(r.o1.iter().map(f64::to_string));
        f.extend([r.a1.to_string(), r.time1.to_string(), flag(r.delta1).into(), flag(r.is_entrant()).into()]);
        f.extend(l.o2.iter().map(f64::to_string));
        match &r.stage2 {
            Some(s2) => f.extend([s2.a2.to_string(), s2.time2.to_string(), flag(s2.delta2).into()]),
            None => f.extend([String::new(), String::new(), String::new()]),
        }
        writeln!(w, "{}", f.join(",")).map_err(io)?;
    }
    finish(w, path)
}

pub fn write_truth(ids: &[String], truth: &[SubjectTruth], path: &Path) -> Result<(), CliError> {
    let mut w = create(path)?;
    let io = |e| CliError::io(path, e);
    writeln!(w, "{}", TRUTH_HEADER.join(",")).map_err(io)?;
    for (id, t) in ids.iter().zip(truth) {
        writeln!(w, "{id},{},{},{},{}", t.a1_opt, t.a2_opt, t.mean_logt2_opt, t.mean_logtotal_opt).map_err(io)?;
    }
    finish(w, path)
}

pub fn read_truth(path: &Path) -> Result<(Vec<String>, Vec<SubjectTruth>), CliError> {
    let t = Table::read(path)?;
    let cols: Vec<usize> = TRUTH_HEADER.iter().map(|n| t.col(n)).collect::<Result<_, _>>()?;
    let mut ids = Vec::new();
    let mut truth = Vec::new();
    for r in 0..t.rows.len() {
        ids.push(t.raw(r, cols[0]).to_string());
        truth.push(SubjectTruth {
            a1_opt: t.action(r, cols[1], TRUTH_HEADER[1])?,
            a2_opt: t.action(r, cols[2], TRUTH_HEADER[2])?,
            mean_logt2_opt: t.required(r, cols[3], TRUTH_HEADER[3])?,
            mean_logtotal_opt: t.required(r, cols[4], TRUTH_HEADER[4])?,
        });
    }
    Ok((ids, truth))
}

/// Headerless CSV, one line per matrix row.
pub fn write_matrix<T: std::fmt::Display + nalgebra::Scalar>(m: &DMatrix<T>, path: &Path) -> Result<(), CliError> {
    let mut w = create(path)?;
    let io = |e| CliError::io(path, e);
    let mut line = String::new();
    for row in m.row_iter() {
        line.clear();
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                line.push(',');
            }
            line.push_str(&v.to_string());
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    finish(w, path)
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut values = Vec::new();
    let mut ncols = None;
    let mut nrows = 0;
    for (k, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::Data(format!("{}: line {} is not numeric", path.display(), k + 1)))?;
        if *ncols.get_or_insert(row.len()) != row.len() {
            return Err(CliError::Data(format!("{}: ragged line {}", path.display(), k + 1)));
        }
        values.extend(row);
        nrows += 1;
    }
    Ok(DMatrix::from_row_slice(nrows, ncols.unwrap_or(0), &values))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))?;
    finish(w, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{generate, CensoringScheme, Scenario, ScenarioConfig};

    fn sim(n: usize) -> SimulatedCohort {
        generate(&ScenarioConfig {
            scenario: Scenario::One,
            n,
            seed: 5,
            censoring: CensoringScheme::StageWise,
        })
        .unwrap()
    }

    #[test]
    fn cohort_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let s = sim(40);
        write_simulated_cohort(&s, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "id,x1,b1,z1,a1,time1,delta1,eta,x2,b2,z2,a2,time2,delta2"
        );
        let back = read_cohort(&path, &ColumnBindings::default()).unwrap();
        assert_eq!(back.cohort, s.cohort);
        assert!(back.o2_all.iter().all(Option::is_some));
        let new = read_new_subjects(&path, &ColumnBindings::default()).unwrap();
        assert_eq!(new.len(), 40);
    }

    #[test]
    fn overall_delta_binding() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        std::fs::write(&path, "id,x1,a1,t1,eta,x2,a2,t2,delta\n1,0.5,1,3,1,2,0,4,0\n2,0.1,0,9,0,,,,1\n").unwrap();
        let b = ColumnBindings {
            x1: vec!["x1".into()],
            x2: vec!["x1".into(), "x2".into()],
            time1: "t1".into(),
            time2: "t2".into(),
            delta: Some("delta".into()),
            ..ColumnBindings::default()
        };
        let c = read_cohort(&path, &b).unwrap().cohort;
        assert_eq!(c.o2_names(), &["x2".to_string()]);
        let r = c.records();
        assert!(r[0].delta1 && !r[0].stage2.as_ref().unwrap().delta2);
        assert!(r[1].delta1 && r[1].stage2.is_none());
    }

    #[test]
    fn missing_column_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        std::fs::write(&path, "id,x1,b1,z1,a1,time1,eta,x2,b2,z2,a2,time2,delta2\n").unwrap();
        let err = read_cohort(&path, &ColumnBindings::default()).err().unwrap();
        assert!(err.to_string().contains("\"delta1\""), "{err}");
    }

    #[test]
    fn matrix_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = DMatrix::from_row_slice(2, 3, &[0.1, -2.5, 1e-300, 3.0, 4.25, f64::MAX]);
        write_matrix(&m, &path).unwrap();
        assert_eq!(read_matrix(&path).unwrap(), m);
    }
}
