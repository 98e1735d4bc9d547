//! Command-line front end.
//!
//! Settings come from an optional flat `key = value` file, overridden by
//! flags. The resolved settings are echoed next to each output as
//! `<out>.config`. Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::eval::{score_context, tabulate, EvalError, MetricsTable};
use crate::model::{predict, ModelConfig, ModelError, ModelParams};
use crate::placement::{greedy_place, random_place, CandidateSet, GreedyOptions, PlacementError, PlacementMode, PlacementResult};
use crate::selftest::{self, Fault};
use crate::tasks::{generate, read_tasks, write_tasks, GenSpec, Scenario, Task, TaskError, TaskSet};
use crate::train::{fit, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, TrainConfig, TrainError, TrainHistory};
use crate::uncertainty::decompose;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Tasks(#[from] TaskError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Placement(#[from] PlacementError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("self-test failed: {0}")]
    SelfTest(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Every recognised config key with its default.
const DEFAULTS: &[(&str, &str)] = &[
    ("scenario", "noisy"),
    ("tasks.n_tasks", "32"),
    ("tasks.n_targets", "100"),
    ("tasks.nc_min", "0"),
    ("tasks.nc_max", "5"),
    ("tasks.n_bumps", "3"),
    ("tasks.seed", "0"),
    ("model.dim", "auto"),
    ("model.components", "2"),
    ("model.grid_nodes", "auto"),
    ("model.backbone_depth", "6"),
    ("model.backbone_width", "32"),
    ("model.kernel_size", "5"),
    ("model.head_hidden", "32,32"),
    ("model.init_seed", "0"),
    ("train.tasks", ""),
    ("train.val_tasks", ""),
    ("train.lr", "0.001"),
    ("train.epochs", "500"),
    ("train.patience", "20"),
    ("train.batch_size", "1"),
    ("train.seed", "0"),
    ("placement.mode", "ep"),
    ("placement.n_sensors", "3"),
    ("placement.refresh", "false"),
    ("placement.seed", "0"),
];

const PATH_KEYS: &[&str] = &["train.tasks", "train.val_tasks"];

/// Resolved settings plus the keys that were set explicitly.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            explicit: BTreeSet::new(),
        }
    }
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. Path values are
    /// resolved against `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("config line {}: expected key = value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(usage(format!("config line {}: duplicate key {k}", i + 1)));
            }
            let v = match base {
                Some(dir) if PATH_KEYS.contains(&k) && !v.is_empty() => dir.join(v).display().to_string(),
                _ => v.to_string(),
            };
            cfg.set(k, &v).map_err(|e| usage(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        RunConfig::parse(&text, path.parent())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.values.contains_key(key) {
            return Err(usage(format!("unknown config key {key:?}")));
        }
        self.values.insert(key.to_string(), value.to_string());
        self.explicit.insert(key.to_string());
        Ok(())
    }

    fn set_opt<T: ToString>(&mut self, key: &str, value: &Option<T>) -> Result<()> {
        match value {
            Some(v) => self.set(key, &v.to_string()),
            None => Ok(()),
        }
    }

    pub fn raw(&self, key: &str) -> &str {
        &self.values[key]
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key);
        v.parse().map_err(|_| usage(format!("bad value {v:?} for {key}")))
    }

    fn list(&self, key: &str) -> Result<Vec<usize>> {
        let v = self.raw(key);
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| s.trim().parse().map_err(|_| usage(format!("bad value {v:?} for {key}"))))
            .collect()
    }

    pub fn render(&self) -> String {
        self.values.iter().fold(String::new(), |mut s, (k, v)| {
            writeln!(s, "{k} = {v}").unwrap();
            s
        })
    }

    /// Model settings for a task set of the given scenario.
    pub fn model_config(&self, scenario: Scenario) -> Result<ModelConfig> {
        let base = if scenario.dim() == 1 {
            ModelConfig::default_1d()
        } else {
            ModelConfig::default_2d()
        };
        if self.raw("model.dim") != "auto" && self.get::<usize>("model.dim")? != scenario.dim() {
            return Err(usage(format!(
                "model.dim = {} but the {} scenario is {}-dimensional",
                self.raw("model.dim"),
                scenario.tag(),
                scenario.dim()
            )));
        }
        let grid_nodes = if self.raw("model.grid_nodes") == "auto" {
            base.grid_nodes
        } else {
            let g = self.list("model.grid_nodes")?;
            match g.len() {
                1 => vec![g[0]; scenario.dim()],
                n if n == scenario.dim() => g,
                _ => return Err(usage("model.grid_nodes must list one count or one per axis")),
            }
        };
        let config = ModelConfig {
            dim: scenario.dim(),
            components: self.get("model.components")?,
            domain: scenario.domain(),
            grid_nodes,
            backbone_depth: self.get("model.backbone_depth")?,
            backbone_width: self.get("model.backbone_width")?,
            kernel_size: self.get("model.kernel_size")?,
            head_hidden: self.list("model.head_hidden")?,
        };
        config.validate().map_err(|e| usage(e.to_string()))?;
        Ok(config)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let c = TrainConfig {
            max_epochs: self.get("train.epochs")?,
            learning_rate: self.get("train.lr")?,
            batch_size: self.get("train.batch_size")?,
            patience: self.get("train.patience")?,
            seed: self.get("train.seed")?,
            ..TrainConfig::default()
        };
        c.validate().map_err(|e| usage(e.to_string()))?;
        Ok(c)
    }

    /// Checks explicitly configured model keys against a checkpoint.
    fn check_checkpoint(&self, ck: &Checkpoint) -> Result<()> {
        let have = &ck.params.config;
        let mut want = have.clone();
        let set = |k: &str| self.explicit.contains(k);
        if set("model.components") {
            want.components = self.get("model.components")?;
        }
        if set("model.backbone_depth") {
            want.backbone_depth = self.get("model.backbone_depth")?;
        }
        if set("model.backbone_width") {
            want.backbone_width = self.get("model.backbone_width")?;
        }
        if set("model.kernel_size") {
            want.kernel_size = self.get("model.kernel_size")?;
        }
        if set("model.head_hidden") {
            want.head_hidden = self.list("model.head_hidden")?;
        }
        if set("model.dim") && self.raw("model.dim") != "auto" {
            want.dim = self.get("model.dim")?;
        }
        if set("model.grid_nodes") && self.raw("model.grid_nodes") != "auto" {
            let g = self.list("model.grid_nodes")?;
            want.grid_nodes = if g.len() == 1 { vec![g[0]; want.dim] } else { g };
        }
        Ok(ck.ensure_compatible(&want)?)
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn echo_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".config");
    PathBuf::from(s)
}

fn echo_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    let p = echo_path(out);
    std::fs::write(&p, cfg.render()).map_err(|e| io_err(&p, e))
}

#[derive(Parser, Debug)]
#[command(name = "epiplace", version, about = "Uncertainty-driven sensor placement with a convolutional neural process")]
struct Cli {
    /// Worker threads for parallel scoring; 1 gives bit-reproducible output.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic task file.
    GenTasks(GenTasksArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Predict mean and variance components at every target of one task.
    Predict(PredictArgs),
    /// Choose sensor locations among a task's targets.
    Place(PlaceArgs),
    /// Score placements against a task's true values.
    Evaluate(EvaluateArgs),
    /// Plot a metrics file.
    Plot(PlotArgs),
    /// Run the embedded property checks.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
struct GenTasksArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    n_tasks: Option<usize>,
    #[arg(long)]
    n_targets: Option<usize>,
    #[arg(long)]
    nc_min: Option<usize>,
    #[arg(long)]
    nc_max: Option<usize>,
    #[arg(long)]
    n_bumps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    tasks: Option<PathBuf>,
    #[arg(long)]
    val_tasks: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_ckpt: PathBuf,
    #[arg(long)]
    out_history: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long, default_value_t = 0)]
    task_index: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PlaceArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long, default_value_t = 0)]
    task_index: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    /// var, ep or random.
    #[arg(long)]
    acquisition: Option<String>,
    #[arg(long)]
    n_sensors: Option<usize>,
    /// Seed for random placement.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    refresh_predictions: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long, default_value_t = 0)]
    task_index: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    /// One or more placement files.
    #[arg(long, num_args = 1.., required = true)]
    placement: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long)]
    metrics: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    /// Inject a fault into one property (test hook).
    #[arg(long = "break", value_name = "PROPERTY")]
    fault: Option<String>,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code. Errors go to stderr.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads.max(1)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return 2;
        }
    };
    match pool.install(|| run(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenTasks(a) => gen_tasks(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Place(a) => place(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Plot(a) => plot(a),
        Command::Selftest(a) => run_selftest(a),
    }
}

fn base_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn gen_tasks(a: GenTasksArgs) -> Result<()> {
    let mut cfg = base_config(&a.config)?;
    cfg.set_opt("scenario", &a.scenario)?;
    cfg.set_opt("tasks.n_tasks", &a.n_tasks)?;
    cfg.set_opt("tasks.n_targets", &a.n_targets)?;
    cfg.set_opt("tasks.nc_min", &a.nc_min)?;
    cfg.set_opt("tasks.nc_max", &a.nc_max)?;
    cfg.set_opt("tasks.n_bumps", &a.n_bumps)?;
    cfg.set_opt("tasks.seed", &a.seed)?;
    let scenario: Scenario = cfg.raw("scenario").parse().map_err(usage)?;
    let spec = GenSpec {
        seed: cfg.get("tasks.seed")?,
        n_tasks: cfg.get("tasks.n_tasks")?,
        nc_min: cfg.get("tasks.nc_min")?,
        nc_max: cfg.get("tasks.nc_max")?,
        n_targets: cfg.get("tasks.n_targets")?,
    };
    let ts = generate(scenario, spec, cfg.get("tasks.n_bumps")?).map_err(|e| match e {
        TaskError::InvalidArgs(m) => usage(m),
        other => other.into(),
    })?;
    write_tasks(&ts, &a.out)?;
    echo_config(&cfg, &a.out)?;
    println!("wrote {} {} tasks to {}", ts.tasks.len(), scenario.tag(), a.out.display());
    Ok(())
}

fn history_csv(h: &TrainHistory) -> String {
    let mut s = String::from("epoch,train_nll,val_nll,wall_seconds\n");
    for i in 0..h.epochs() {
        let wall = h.wall_seconds.get(i).copied().unwrap_or(f64::NAN);
        writeln!(s, "{},{},{},{:.3}", i + 1, h.train_nll[i], h.val_nll[i], wall).unwrap();
    }
    s
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = base_config(&a.config)?;
    cfg.set_opt("train.tasks", &a.tasks.as_ref().map(|p| p.display()))?;
    cfg.set_opt("train.val_tasks", &a.val_tasks.as_ref().map(|p| p.display()))?;
    cfg.set_opt("train.epochs", &a.epochs)?;
    cfg.set_opt("train.patience", &a.patience)?;
    cfg.set_opt("train.lr", &a.lr)?;
    cfg.set_opt("train.seed", &a.seed)?;
    let tasks_path = cfg.raw("train.tasks");
    if tasks_path.is_empty() {
        return Err(usage("no training tasks given (--tasks or train.tasks)"));
    }
    let train_set = read_tasks(Path::new(tasks_path))?;
    let val_set = match cfg.raw("train.val_tasks") {
        "" => train_set.clone(),
        p => read_tasks(Path::new(p))?,
    };
    if val_set.scenario.dim() != train_set.scenario.dim() {
        return Err(usage("training and validation tasks differ in dimension"));
    }
    let model_config = cfg.model_config(train_set.scenario)?;
    let train_config = cfg.train_config()?;
    let init = ModelParams::init(model_config, cfg.get("model.init_seed")?)?;
    let (params, history) = fit(&train_config, init, &train_set, &val_set)?;
    save_checkpoint(&params, &history, &train_config, &a.out_ckpt)?;
    echo_config(&cfg, &a.out_ckpt)?;
    if let Some(h) = &a.out_history {
        std::fs::write(h, history_csv(&history)).map_err(|e| io_err(h, e))?;
    }
    println!(
        "trained {} epochs; best epoch {} with validation NLL {:.6}",
        history.epochs(),
        history.best_epoch + 1,
        history.val_nll[history.best_epoch]
    );
    Ok(())
}

fn load_task(path: &Path, index: usize, ck: &Checkpoint) -> Result<(TaskSet, Task)> {
    let ts = read_tasks(path)?;
    if ts.dim != ck.params.config.dim {
        return Err(CliError::Model(ModelError::Dimension {
            expected: ck.params.config.dim,
            found: ts.dim,
        }));
    }
    let task = ts
        .tasks
        .get(index)
        .cloned()
        .ok_or_else(|| usage(format!("task index {index} out of range ({} tasks)", ts.tasks.len())))?;
    Ok((ts, task))
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let (_, task) = load_task(&a.tasks, a.task_index, &ck)?;
    let preds = predict(&ck.params, &task.context, &task.target_points())?;
    let coords = if ck.params.config.dim == 1 { "x" } else { "x,y" };
    let mut s = format!("index,{coords},mean,var_total,var_epistemic,var_aleatoric\n");
    for (i, (o, m)) in task.targets.iter().zip(&preds).enumerate() {
        let d = decompose(m);
        let xs: Vec<String> = o.point.coords.iter().map(f64::to_string).collect();
        writeln!(s, "{i},{},{},{},{},{}", xs.join(","), d.mean, d.var_total, d.var_epistemic, d.var_aleatoric).unwrap();
    }
    std::fs::write(&a.out, s).map_err(|e| io_err(&a.out, e))?;
    Ok(())
}

fn place(a: PlaceArgs) -> Result<()> {
    let mut cfg = base_config(&a.config)?;
    cfg.set_opt("placement.mode", &a.acquisition)?;
    cfg.set_opt("placement.n_sensors", &a.n_sensors)?;
    cfg.set_opt("placement.seed", &a.seed)?;
    if a.refresh_predictions {
        cfg.set("placement.refresh", "true")?;
    }
    let mode: PlacementMode = cfg.raw("placement.mode").parse().map_err(usage)?;
    let n_sensors: usize = cfg.get("placement.n_sensors")?;
    let refresh: bool = cfg.get("placement.refresh")?;
    let ck = load_checkpoint(&a.ckpt)?;
    cfg.check_checkpoint(&ck)?;
    let (_, task) = load_task(&a.tasks, a.task_index, &ck)?;
    let candidates = CandidateSet::new(task.target_points())?;
    if mode == PlacementMode::Ep && ck.params.components() == 1 {
        eprintln!(
            "warning: the checkpoint has a single mixture component, so epistemic scores are identically zero \
             and the lowest candidate indices win by tie-breaking"
        );
    }
    let result = match mode.acquisition() {
        Some(acq) => greedy_place(
            &ck.params,
            &candidates,
            &task.target_points(),
            n_sensors,
            acq,
            &GreedyOptions {
                refresh_predictions: refresh,
                initial_context: Vec::new(),
            },
        )?,
        None => random_place(&candidates, n_sensors, cfg.get("placement.seed")?)?,
    };
    result.write(&a.out)?;
    echo_config(&cfg, &a.out)?;
    println!("{mode} placement: {:?}", result.selected);
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let cfg = base_config(&a.config)?;
    let ck = load_checkpoint(&a.ckpt)?;
    cfg.check_checkpoint(&ck)?;
    let (_, task) = load_task(&a.tasks, a.task_index, &ck)?;
    let placements = a
        .placement
        .iter()
        .map(|p| PlacementResult::read(p))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let candidates: Vec<usize> = (0..task.targets.len()).collect();
    let (table, _) = tabulate(&ck.params, &task, &candidates, &placements)?;
    table.write_csv(&a.out)?;
    echo_config(&cfg, &a.out)?;
    let prior = score_context(&ck.params, &task, &[])?;
    println!("no sensors: rmse {} mean NLL {}", prior.rmse, prior.mean_nll);
    Ok(())
}

fn plot(a: PlotArgs) -> Result<()> {
    let table = MetricsTable::read_csv(&a.metrics)?;
    table.write_plot(&a.out)?;
    Ok(())
}

fn run_selftest(a: SelftestArgs) -> Result<()> {
    let fault = a.fault.as_deref().map(str::parse::<Fault>).transpose().map_err(usage)?;
    let start = std::time::Instant::now();
    let report = selftest::run(fault);
    println!("{report} in {:.1} s", start.elapsed().as_secs_f64());
    if report.ok() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failed.iter().map(|(n, _)| *n).collect();
        Err(CliError::SelfTest(names.join(", ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing() {
        let cfg = RunConfig::parse("# comment\nmodel.components = 1\ntrain.lr=0.01 # trailing\n\n", None).unwrap();
        assert_eq!(cfg.get::<usize>("model.components").unwrap(), 1);
        assert_eq!(cfg.get::<f64>("train.lr").unwrap(), 0.01);
        assert_eq!(cfg.raw("train.epochs"), "500");
        assert!(matches!(RunConfig::parse("model.colour = 1", None), Err(CliError::Usage(_))));
        assert!(matches!(RunConfig::parse("train.lr", None), Err(CliError::Usage(_))));
        assert!(matches!(RunConfig::parse("train.lr = 1\ntrain.lr = 2", None), Err(CliError::Usage(_))));
        let c = RunConfig::parse("train.tasks = a.tasks", Some(Path::new("/cfg"))).unwrap();
        assert_eq!(c.raw("train.tasks"), "/cfg/a.tasks");
    }

    #[test]
    fn flags_override_file_values() {
        let mut cfg = RunConfig::parse("train.epochs = 7", None).unwrap();
        cfg.set_opt("train.epochs", &Some(9)).unwrap();
        assert_eq!(cfg.get::<usize>("train.epochs").unwrap(), 9);
        cfg.set_opt::<usize>("train.patience", &None).unwrap();
        assert_eq!(cfg.raw("train.patience"), "20");
    }

    #[test]
    fn model_config_follows_scenario() {
        let cfg = RunConfig::parse("model.grid_nodes = 24\nmodel.head_hidden = 8", None).unwrap();
        let m = cfg.model_config(Scenario::Field2d).unwrap();
        assert_eq!((m.dim, m.grid_nodes.clone(), m.head_hidden.clone()), (2, vec![24, 24], vec![8]));
        let bad = RunConfig::parse("model.dim = 2", None).unwrap();
        assert!(bad.model_config(Scenario::Noisy).is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(dispatch(["epiplace", "frobnicate"]), 1);
        assert_eq!(dispatch(["epiplace", "gen-tasks", "--bogus"]), 1);
        assert_eq!(dispatch(["epiplace", "selftest", "--break", "nothing"]), 1);
        assert_eq!(dispatch(["epiplace", "--help"]), 0);
    }
}
