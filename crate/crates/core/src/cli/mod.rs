//! Batch command-line interface.

pub mod io;
pub mod study;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bart::BartHyper;
use crate::cohort::{Action, NewSubject};
use crate::dtr::{optimize_dtr, DtrConfig, DtrError, ImputeMode, StagePosterior};
use crate::metrics::{
    coverage_rate, mse_decomposition, posterior_contrasts, posterior_mode_action, pot, EvaluationReport,
    MetricsError, PotSummary, StageReport,
};
use crate::qlearn::{bootstrap_qlearn, qlearn_two_stage, ActionPredictions, QFormulas, QlearnError};
use crate::sampling::{quantile, SamplingError};
use crate::simulation::{generate, CensoringScheme, Scenario, ScenarioConfig, SimulationError};
use io::ColumnBindings;
use study::{run_study, Method, StudyConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Binding(String),
    #[error("{0}")]
    Data(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Dtr(#[from] DtrError),
    #[error(transparent)]
    Qlearn(#[from] QlearnError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
}

impl CliError {
    pub(crate) fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }

    /// Short machine-readable category used as the message prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Usage(_) => "usage",
            Self::Binding(_) => "binding",
            Self::Data(_) => "data",
            Self::Io { .. } => "io",
            Self::Dtr(_) => "fit",
            Self::Qlearn(_) => "qlearn",
            Self::Simulation(_) => "simulation",
            Self::Metrics(_) => "metrics",
            Self::Sampling(_) => "sampling",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "dtrbart", version, about = "Optimal two-stage treatment regimes for censored survival data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a simulated two-stage cohort and its true optimal regime.
    Simulate(SimulateArgs),
    /// Fit AFT-BART backward induction and write posterior matrices.
    Fit(FitArgs),
    /// Fit two-stage Q-learning with log-normal AFT models.
    Qlearn(QlearnArgs),
    /// Score fitted regimes against a truth file.
    Evaluate(EvaluateArgs),
    /// Run a replicated simulation study.
    Replicate(ReplicateArgs),
    /// Treatment contrasts on the log-time, median and survival scales.
    Contrasts(ContrastsArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum CensoringArg {
    StageWise,
    TotalFollowUp,
}

impl From<CensoringArg> for CensoringScheme {
    fn from(c: CensoringArg) -> Self {
        match c {
            CensoringArg::StageWise => Self::StageWise,
            CensoringArg::TotalFollowUp => Self::TotalFollowUp,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ImputeArg {
    Event,
    Censored,
}

impl From<ImputeArg> for ImputeMode {
    fn from(m: ImputeArg) -> Self {
        match m {
            ImputeArg::Event => Self::Event,
            ImputeArg::Censored => Self::Censored,
        }
    }
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub scenario: u8,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    /// Cohort CSV path.
    #[arg(long)]
    pub out: PathBuf,
    /// Truth CSV path; defaults to `<out>_truth.csv`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "stage-wise")]
    pub censoring: CensoringArg,
}

#[derive(Args, Debug, Clone)]
pub struct BindingArgs {
    #[arg(long, default_value = "id")]
    pub id: String,
    /// Stage-1 covariate columns, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "x1,b1,z1")]
    pub x1: Vec<String>,
    #[arg(long, default_value = "a1")]
    pub a1: String,
    #[arg(long, default_value = "time1")]
    pub time1: String,
    #[arg(long, default_value = "delta1")]
    pub delta1: String,
    #[arg(long, default_value = "eta")]
    pub eta: String,
    /// Stage-2 covariate columns, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "x2,b2,z2")]
    pub x2: Vec<String>,
    #[arg(long, default_value = "a2")]
    pub a2: String,
    #[arg(long, default_value = "time2")]
    pub time2: String,
    #[arg(long, default_value = "delta2")]
    pub delta2: String,
    /// Single overall event indicator used instead of delta1/delta2.
    #[arg(long)]
    pub delta: Option<String>,
}

impl From<&BindingArgs> for ColumnBindings {
    fn from(b: &BindingArgs) -> Self {
        Self {
            id: Some(b.id.clone()),
            x1: b.x1.clone(),
            a1: b.a1.clone(),
            time1: b.time1.clone(),
            delta1: b.delta1.clone(),
            eta: b.eta.clone(),
            x2: b.x2.clone(),
            a2: b.a2.clone(),
            time2: b.time2.clone(),
            delta2: b.delta2.clone(),
            delta: b.delta.clone(),
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct ChainArgs {
    #[arg(long, default_value_t = 1)]
    pub cores: usize,
    #[arg(long, default_value_t = 1000)]
    pub burn: usize,
    #[arg(long, default_value_t = 1000)]
    pub keep: usize,
    #[arg(long, default_value_t = 250)]
    pub burn1: usize,
    #[arg(long, default_value_t = 200)]
    pub trees: usize,
    #[arg(long, value_enum, default_value = "event")]
    pub impute_mode: ImputeArg,
}

impl ChainArgs {
    fn config(&self, seed: u64) -> DtrConfig {
        DtrConfig {
            hyper: BartHyper {
                n_trees: self.trees,
                ..BartHyper::default()
            },
            burn2: self.burn,
            keep: self.keep,
            burn1: self.burn1,
            impute: self.impute_mode.into(),
            seed,
            threads: self.cores,
        }
    }
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub newdata: Option<PathBuf>,
    /// Write only the optimal-action matrices; `false` adds per-action means.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub opt: bool,
    #[command(flatten)]
    pub chain: ChainArgs,
    #[command(flatten)]
    pub columns: BindingArgs,
}

#[derive(Args, Debug)]
pub struct QlearnArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub formula1: String,
    #[arg(long)]
    pub formula2: String,
    /// Bootstrap resamples; 0 skips the bootstrap.
    #[arg(long, default_value_t = 0)]
    pub bootstrap: usize,
    /// Required with --bootstrap.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub cores: usize,
    #[arg(long)]
    pub newdata: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub columns: BindingArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
pub enum SubjectSet {
    New,
    Train,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Fit output directories; two or more enable the MSE decomposition.
    #[arg(long, required = true, num_args = 1..)]
    pub fit: Vec<PathBuf>,
    #[arg(long)]
    pub truth: PathBuf,
    /// Report JSON path.
    #[arg(long)]
    pub out: PathBuf,
    /// Tidy `stage,metric,value` CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Which predictions to score; defaults to new subjects when present.
    #[arg(long, value_enum)]
    pub set: Option<SubjectSet>,
}

#[derive(Args, Debug)]
pub struct ReplicateArgs {
    #[arg(long)]
    pub scenario: u8,
    #[arg(long, default_value_t = 20)]
    pub replications: usize,
    #[arg(long, default_value_t = 800)]
    pub train_n: usize,
    #[arg(long, default_value_t = 400)]
    pub test_n: usize,
    /// Comma-separated methods; defaults to every method for the scenario.
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<String>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "stage-wise")]
    pub censoring: CensoringArg,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub chain: ChainArgs,
}

#[derive(Args, Debug)]
pub struct ContrastsArgs {
    /// Output directory of a `fit --opt false` run.
    #[arg(long)]
    pub fit: PathBuf,
    /// Horizon for the survival-probability scale, in time units.
    #[arg(long)]
    pub horizon: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub set: Option<SubjectSet>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitManifest {
    pub command: String,
    pub method: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub actions1: Vec<Action>,
    pub actions2: Vec<Action>,
    pub stage1_ids: Vec<String>,
    pub stage2_ids: Vec<String>,
    pub new_ids: Option<Vec<String>>,
    /// File name to `[rows, columns]`.
    pub files: BTreeMap<String, [usize; 2]>,
    pub stage2_geweke_z: Option<f64>,
}

impl FitManifest {
    fn read(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::io(&path, e))
    }
}

struct Writer<'a> {
    dir: &'a Path,
    files: BTreeMap<String, [usize; 2]>,
}

impl<'a> Writer<'a> {
    fn new(dir: &'a Path) -> Self {
        Self {
            dir,
            files: BTreeMap::new(),
        }
    }

    fn matrix<T: std::fmt::Display + nalgebra::Scalar>(&mut self, name: &str, m: &DMatrix<T>) -> Result<(), CliError> {
        let file = format!("{name}.csv");
        io::write_matrix(m, &self.dir.join(&file))?;
        self.files.insert(file, [m.nrows(), m.ncols()]);
        Ok(())
    }

    fn column(&mut self, name: &str, v: &[f64]) -> Result<(), CliError> {
        self.matrix(name, &DMatrix::from_column_slice(v.len(), 1, v))
    }

    fn manifest(self, mut m: FitManifest) -> Result<(), CliError> {
        m.files = self.files;
        let text = serde_json::to_string_pretty(&m).map_err(|e| CliError::io(self.dir, e))? + "\n";
        io::write_text(&self.dir.join("manifest.json"), &text)
    }
}

fn write_stage_posterior(w: &mut Writer, prefix: &str, stage: u8, sp: &StagePosterior, opt: bool) -> Result<(), CliError> {
    w.matrix(&format!("{prefix}a{stage}_opt"), &sp.a_opt)?;
    w.matrix(&format!("{prefix}yhat{stage}_opt_mean"), &sp.yhat_opt)?;
    if !opt {
        for (a, m) in sp.actions.iter().zip(&sp.yhat_by_action) {
            w.matrix(&format!("{prefix}a{stage}_{a}"), m)?;
        }
    }
    Ok(())
}

fn load_newdata(path: Option<&Path>, b: &ColumnBindings) -> Result<Option<Vec<NewSubject>>, CliError> {
    path.map(|p| io::read_new_subjects(p, b)).transpose()
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let scenario = Scenario::try_from(args.scenario).map_err(|e| CliError::Usage(e.to_string()))?;
    let sim = generate(&ScenarioConfig {
        scenario,
        n: args.n,
        seed: args.seed,
        censoring: args.censoring.into(),
    })
    .map_err(|e| match e {
        SimulationError::EmptyCohort => CliError::Usage(e.to_string()),
        e => e.into(),
    })?;
    if sim.degenerate_time1 > 0 {
        info!("{} subjects needed a redraw for a positive entry time", sim.degenerate_time1);
    }
    io::write_simulated_cohort(&sim, &args.out)?;
    let truth_path = args.truth.clone().unwrap_or_else(|| {
        let stem = args.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        args.out.with_file_name(format!("{stem}_truth.csv"))
    });
    let ids: Vec<String> = sim.cohort.records().iter().map(|r| r.id.clone()).collect();
    io::write_truth(&ids, &sim.truth, &truth_path)?;
    info!("wrote {} and {}", args.out.display(), truth_path.display());
    Ok(())
}

pub fn cmd_fit(args: &FitArgs) -> Result<(), CliError> {
    let b = ColumnBindings::from(&args.columns);
    let loaded = io::read_cohort(&args.data, &b)?;
    let newdata = load_newdata(args.newdata.as_deref(), &b)?;
    let cohort = &loaded.cohort;
    let config = args.chain.config(args.seed);
    let post = optimize_dtr(cohort, newdata.as_deref(), &config)?;

    let mut w = Writer::new(&args.out);
    write_stage_posterior(&mut w, "", 2, &post.stage2, args.opt)?;
    w.column("sigma2", &post.sigma2)?;
    write_stage_posterior(&mut w, "", 1, &post.stage1, args.opt)?;
    w.column("sigma1", &post.sigma1)?;
    if let (Some(n2), Some(n1)) = (&post.new_stage2, &post.new_stage1) {
        write_stage_posterior(&mut w, "new_", 2, n2, args.opt)?;
        write_stage_posterior(&mut w, "new_", 1, n1, args.opt)?;
    }
    let ids = |rows: &[usize]| rows.iter().map(|&i| cohort.records()[i].id.clone()).collect::<Vec<_>>();
    w.manifest(FitManifest {
        command: "fit".into(),
        method: "aft-bml".into(),
        seed: Some(args.seed),
        config: serde_json::json!({
            "trees": config.hyper.n_trees,
            "burn": config.burn2,
            "keep": config.keep,
            "burn1": config.burn1,
            "impute_mode": config.impute,
            "opt": args.opt,
        }),
        actions1: post.stage1.actions.clone(),
        actions2: post.stage2.actions.clone(),
        stage1_ids: cohort.records().iter().map(|r| r.id.clone()).collect(),
        stage2_ids: ids(&post.entrant_rows),
        new_ids: newdata.map(|n| n.iter().map(|s| s.id.clone()).collect()),
        files: BTreeMap::new(),
        stage2_geweke_z: post.stage2_geweke_z,
    })
}

fn write_q_predictions(w: &mut Writer, prefix: &str, stage: u8, p: &ActionPredictions) -> Result<(), CliError> {
    let n = p.a_opt.len();
    w.matrix(&format!("{prefix}a{stage}_opt"), &DMatrix::from_column_slice(n, 1, &p.a_opt))?;
    let best: Vec<f64> = (0..n).map(|i| p.optimal_value(i)).collect();
    w.column(&format!("{prefix}yhat{stage}_opt_mean"), &best)?;
    for (a, v) in p.actions.iter().zip(&p.by_action) {
        w.column(&format!("{prefix}a{stage}_{a}"), v)?;
    }
    Ok(())
}

pub fn cmd_qlearn(args: &QlearnArgs) -> Result<(), CliError> {
    let b = ColumnBindings::from(&args.columns);
    let loaded = io::read_cohort(&args.data, &b)?;
    let newdata = load_newdata(args.newdata.as_deref(), &b)?;
    let cohort = &loaded.cohort;
    let formulas = QFormulas {
        stage1: args.formula1.parse()?,
        stage2: args.formula2.parse()?,
    };
    let res = qlearn_two_stage(cohort, &formulas, newdata.as_deref())?;
    let boot = if args.bootstrap > 0 {
        let seed = args
            .seed
            .ok_or_else(|| CliError::Usage("--seed is required with --bootstrap".into()))?;
        if args.cores == 0 {
            return Err(CliError::Usage("--cores must be at least 1".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(args.cores)
            .build()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        Some(pool.install(|| bootstrap_qlearn(cohort, &formulas, args.bootstrap, newdata.as_deref(), seed))?)
    } else {
        None
    };

    let mut w = Writer::new(&args.out);
    write_q_predictions(&mut w, "", 2, &res.stage2.train)?;
    w.column("sigma2", &[res.stage2.fit.scale()])?;
    write_q_predictions(&mut w, "", 1, &res.stage1.train)?;
    w.column("sigma1", &[res.stage1.fit.scale()])?;
    if let (Some(n2), Some(n1)) = (&res.new_stage2, &res.new_stage1) {
        write_q_predictions(&mut w, "new_", 2, n2)?;
        write_q_predictions(&mut w, "new_", 1, n1)?;
    }

    let mut table = String::from(
        "stage,term,estimate,se,boot_mean,boot_se,percentile_lower,percentile_upper,normal_lower,normal_upper\n",
    );
    let mut k = 0;
    for (stage, st) in [(1u8, &res.stage1), (2u8, &res.stage2)] {
        let se = st.fit.standard_errors();
        let terms = st.column_names.iter().map(String::as_str).chain(std::iter::once("Log(scale)"));
        for (j, term) in terms.enumerate() {
            let est = if j < st.fit.beta.len() { st.fit.beta[j] } else { st.fit.log_scale };
            let extra = match &boot {
                Some(bs) => {
                    let c = &bs.coefficients[k].interval;
                    format!(
                        "{},{},{},{},{},{}",
                        c.boot_mean, c.se, c.percentile_lower, c.percentile_upper, c.normal_lower, c.normal_upper
                    )
                }
                None => ",,,,,".into(),
            };
            table.push_str(&format!("{stage},{term},{est},{},{extra}\n", se[j]));
            k += 1;
        }
    }
    io::write_text(&args.out.join("coefficients.csv"), &table)?;
    if let Some(bs) = &boot {
        let mut s = String::from("id,stage,quantity,estimate,boot_mean,se,percentile_lower,percentile_upper\n");
        for r in &bs.subjects {
            let i = &r.interval;
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.id, r.stage, r.quantity, i.estimate, i.boot_mean, i.se, i.percentile_lower, i.percentile_upper
            ));
        }
        io::write_text(&args.out.join("bootstrap_subjects.csv"), &s)?;
    }
    let ids = |rows: &[usize]| rows.iter().map(|&i| cohort.records()[i].id.clone()).collect::<Vec<_>>();
    w.manifest(FitManifest {
        command: "qlearn".into(),
        method: "qlearn".into(),
        seed: args.seed,
        config: serde_json::json!({
            "formula1": formulas.stage1.to_string(),
            "formula2": formulas.stage2.to_string(),
            "bootstrap": args.bootstrap,
            "bootstrap_redraws": boot.as_ref().map(|b| b.redraws),
        }),
        actions1: res.stage1.train.actions.clone(),
        actions2: res.stage2.train.actions.clone(),
        stage1_ids: cohort.records().iter().map(|r| r.id.clone()).collect(),
        stage2_ids: ids(&res.entrant_rows),
        new_ids: newdata.map(|n| n.iter().map(|s| s.id.clone()).collect()),
        files: BTreeMap::new(),
        stage2_geweke_z: None,
    })
}

fn choose_set(m: &FitManifest, set: Option<SubjectSet>) -> Result<SubjectSet, CliError> {
    match (set, &m.new_ids) {
        (Some(SubjectSet::New), None) => Err(CliError::Data("fit has no new-subject predictions".into())),
        (Some(s), _) => Ok(s),
        (None, Some(_)) => Ok(SubjectSet::New),
        (None, None) => Ok(SubjectSet::Train),
    }
}

struct FitStage {
    ids: Vec<String>,
    a_opt: Vec<Action>,
    mean: Vec<f64>,
    interval: Option<(Vec<f64>, Vec<f64>)>,
}

fn read_fit_stage(dir: &Path, m: &FitManifest, set: SubjectSet, stage: u8) -> Result<FitStage, CliError> {
    let prefix = if set == SubjectSet::New { "new_" } else { "" };
    let ids = match (set, stage) {
        (SubjectSet::New, _) => m.new_ids.clone().unwrap_or_default(),
        (SubjectSet::Train, 1) => m.stage1_ids.clone(),
        (SubjectSet::Train, _) => m.stage2_ids.clone(),
    };
    let a = io::read_matrix(&dir.join(format!("{prefix}a{stage}_opt.csv")))?;
    let y = io::read_matrix(&dir.join(format!("{prefix}yhat{stage}_opt_mean.csv")))?;
    if a.nrows() != ids.len() || y.shape() != a.shape() {
        return Err(CliError::Data(format!("{}: stage-{stage} matrices do not match the manifest", dir.display())));
    }
    let actions = a.map(|v| v as Action);
    let mean = (0..y.nrows()).map(|i| y.row(i).mean()).collect();
    let interval = if y.ncols() > 1 {
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        for i in 0..y.nrows() {
            let row: Vec<f64> = y.row(i).iter().copied().collect();
            lo.push(quantile(&row, 0.025)?);
            hi.push(quantile(&row, 0.975)?);
        }
        Some((lo, hi))
    } else {
        None
    };
    Ok(FitStage {
        ids,
        a_opt: posterior_mode_action(&actions),
        mean,
        interval,
    })
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let (truth_ids, truth) = io::read_truth(&args.truth)?;
    let index: BTreeMap<&str, usize> = truth_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let lookup = |ids: &[String]| -> Result<Vec<usize>, CliError> {
        ids.iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| CliError::Data(format!("subject {id:?} is not in the truth file")))
            })
            .collect()
    };
    let mut pots = Vec::new();
    let mut means: [Vec<Vec<f64>>; 2] = Default::default();
    let mut coverage: [Vec<f64>; 2] = Default::default();
    let mut rows_for_stage: [Vec<usize>; 2] = Default::default();
    for dir in &args.fit {
        let m = FitManifest::read(dir)?;
        let set = choose_set(&m, args.set)?;
        let s1 = read_fit_stage(dir, &m, set, 1)?;
        let s2 = read_fit_stage(dir, &m, set, 2)?;
        let r1 = lookup(&s1.ids)?;
        let r2 = lookup(&s2.ids)?;
        let t1: Vec<Action> = r1.iter().map(|&i| truth[i].a1_opt).collect();
        let stage1 = pot(&s1.a_opt, &t1, &s1.a_opt, &t1)?.stage1;
        // Stage 2 and the joint rate are over subjects predicted at both stages.
        let pos1: BTreeMap<usize, usize> = r1.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        let both: Vec<(usize, usize)> =
            r2.iter().enumerate().filter_map(|(k, i)| pos1.get(i).map(|&k1| (k1, k))).collect();
        let p = pot(
            &both.iter().map(|&(k1, _)| s1.a_opt[k1]).collect::<Vec<_>>(),
            &both.iter().map(|&(k1, _)| t1[k1]).collect::<Vec<_>>(),
            &both.iter().map(|&(_, k)| s2.a_opt[k]).collect::<Vec<_>>(),
            &both.iter().map(|&(_, k)| truth[r2[k]].a2_opt).collect::<Vec<_>>(),
        )?;
        pots.push(PotSummary {
            stage1,
            stage2: p.stage2,
            overall: p.overall,
        });
        for (k, (st, rows)) in [(&s1, &r1), (&s2, &r2)].into_iter().enumerate() {
            if !rows_for_stage[k].is_empty() && rows_for_stage[k] != *rows {
                return Err(CliError::Data("fits cover different subjects".into()));
            }
            rows_for_stage[k] = rows.clone();
            means[k].push(st.mean.clone());
            if let Some((lo, hi)) = &st.interval {
                let t: Vec<f64> = rows
                    .iter()
                    .map(|&i| if k == 0 { truth[i].mean_logtotal_opt } else { truth[i].mean_logt2_opt })
                    .collect();
                coverage[k].push(coverage_rate(lo, hi, &t)?);
            }
        }
    }
    let nf = pots.len() as f64;
    let avg = |f: fn(&PotSummary) -> f64| pots.iter().map(f).sum::<f64>() / nf;
    let stage_report = |k: usize| -> Result<StageReport, CliError> {
        let mse = if means[k].len() >= 2 {
            let rows = &rows_for_stage[k];
            let est = DMatrix::from_fn(means[k].len(), rows.len(), |r, i| means[k][r][i]);
            let t: Vec<f64> = rows
                .iter()
                .map(|&i| if k == 0 { truth[i].mean_logtotal_opt } else { truth[i].mean_logt2_opt })
                .collect();
            Some(mse_decomposition(&est, &t)?)
        } else {
            None
        };
        let cov = (!coverage[k].is_empty()).then(|| coverage[k].iter().sum::<f64>() / coverage[k].len() as f64);
        Ok(StageReport { mse, coverage: cov })
    };
    let report = EvaluationReport {
        pot: PotSummary {
            stage1: avg(|p| p.stage1),
            stage2: avg(|p| p.stage2),
            overall: avg(|p| p.overall),
        },
        stage1: stage_report(0)?,
        stage2: stage_report(1)?,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::io(&args.out, e))? + "\n";
    io::write_text(&args.out, &json)?;
    if let Some(path) = &args.csv {
        let mut s = String::from("stage,metric,value\n");
        s.push_str(&format!("1,pot,{}\n2,pot,{}\noverall,pot,{}\n", report.pot.stage1, report.pot.stage2, report.pot.overall));
        for (stage, r) in [("1", &report.stage1), ("2", &report.stage2)] {
            if let Some(d) = r.mse {
                s.push_str(&format!("{stage},mse,{}\n{stage},bias2,{}\n{stage},variance,{}\n", d.mse, d.bias2, d.variance));
            }
            if let Some(c) = r.coverage {
                s.push_str(&format!("{stage},coverage,{c}\n"));
            }
        }
        io::write_text(path, &s)?;
    }
    Ok(())
}

pub fn cmd_replicate(args: &ReplicateArgs) -> Result<(), CliError> {
    let scenario = Scenario::try_from(args.scenario).map_err(|e| CliError::Usage(e.to_string()))?;
    let methods = if args.methods.is_empty() {
        Method::defaults(scenario)
    } else {
        args.methods.iter().map(|m| Method::parse(m, scenario)).collect::<Result<_, _>>()?
    };
    let cfg = StudyConfig {
        scenario,
        replications: args.replications,
        train_n: args.train_n,
        test_n: args.test_n,
        methods,
        seed: args.seed,
        censoring: args.censoring.into(),
        dtr: args.chain.config(args.seed),
    };
    let res = run_study(&cfg)?;
    io::write_text(&args.out, &res.to_csv())
}

pub fn cmd_contrasts(args: &ContrastsArgs) -> Result<(), CliError> {
    if !(args.horizon > 0.0 && args.horizon.is_finite()) {
        return Err(CliError::Usage(format!("--horizon must be positive, got {}", args.horizon)));
    }
    let m = FitManifest::read(&args.fit)?;
    let set = choose_set(&m, args.set)?;
    let prefix = if set == SubjectSet::New { "new_" } else { "" };
    for (stage, actions) in [(1u8, &m.actions1), (2u8, &m.actions2)] {
        if actions.len() < 2 {
            info!("stage {stage} has a single observed action; no contrast written");
            continue;
        }
        let (lo, hi) = (actions[0], actions[actions.len() - 1]);
        let read = |a: Action| io::read_matrix(&args.fit.join(format!("{prefix}a{stage}_{a}.csv")));
        let (m0, m1) = match (read(lo), read(hi)) {
            (Ok(m0), Ok(m1)) => (m0, m1),
            _ => {
                return Err(CliError::Data(format!(
                    "per-action matrices for stage {stage} are missing; fit with --opt false"
                )))
            }
        };
        let sigma: Vec<f64> = io::read_matrix(&args.fit.join(format!("sigma{stage}.csv")))?.iter().copied().collect();
        let ids = match set {
            SubjectSet::New => m.new_ids.clone().unwrap_or_default(),
            SubjectSet::Train if stage == 1 => m.stage1_ids.clone(),
            SubjectSet::Train => m.stage2_ids.clone(),
        };
        let by_scale = posterior_contrasts(&m0, &m1, &sigma, args.horizon)?;
        for rows in by_scale {
            let scale = rows.first().map_or("log_time", |r| r.scale.label());
            let mut s = String::from("id,stage,scale,mean,q025,q25,q75,q975\n");
            for r in &rows {
                s.push_str(&format!(
                    "{},{stage},{},{},{},{},{},{}\n",
                    ids.get(r.subject).map_or("", String::as_str),
                    r.scale.label(),
                    r.mean,
                    r.q025,
                    r.q25,
                    r.q75,
                    r.q975
                ));
            }
            io::write_text(&args.out.join(format!("contrast_stage{stage}_{scale}.csv")), &s)?;
        }
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Qlearn(a) => cmd_qlearn(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Replicate(a) => cmd_replicate(a),
        Command::Contrasts(a) => cmd_contrasts(a),
    }
}

/// Parse arguments, run, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return 2;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.kind());
            e.exit_code()
        }
    }
}
