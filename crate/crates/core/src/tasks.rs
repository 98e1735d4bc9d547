//! Synthetic task generators and the line-oriented task file format.
//!
//! Three scenarios are provided:
//!
//! * `noisy`: `y = sin(x) + η`, with a noise standard deviation that peaks
//!   around `x = 0.5`;
//! * `multifn`: left of zero each task follows either `sin` or `cos`, right of
//!   zero every task follows `sin`; no noise;
//! * `field2d`: a sum of random Gaussian bumps on the unit square plus small
//!   observation noise.
//!
//! Each task draws its targets first; the context is a random subset of them.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Observation, Point};

pub const FORMAT_MAGIC: &str = "EPIPLACE-TASKS";
pub const FORMAT_VERSION: &str = "v1";

/// Noise std at the far tails of the noisy scenario.
pub const NOISE_BASE: f64 = 0.05;
pub const NOISE_PEAK: f64 = 0.5;
pub const NOISE_CENTER: f64 = 0.5;
pub const NOISE_WIDTH: f64 = 0.25;
pub const FIELD_NOISE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid generator arguments: {0}")]
    InvalidArgs(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported task file version {found:?} (supported: {supported})")]
    Version { found: String, supported: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: file is truncated ({message})")]
    Truncated { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, TaskError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    Noisy,
    MultiFn,
    Field2d,
}

impl Scenario {
    pub fn tag(self) -> &'static str {
        match self {
            Scenario::Noisy => "noisy",
            Scenario::MultiFn => "multifn",
            Scenario::Field2d => "field2d",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            Scenario::Field2d => 2,
            _ => 1,
        }
    }

    pub fn domain(self) -> Vec<(f64, f64)> {
        match self {
            Scenario::Field2d => vec![(0.0, 1.0), (0.0, 1.0)],
            _ => vec![(-2.0, 2.0)],
        }
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "noisy" => Ok(Scenario::Noisy),
            "multifn" => Ok(Scenario::MultiFn),
            "field2d" => Ok(Scenario::Field2d),
            other => Err(format!("unknown scenario {other:?} (expected noisy, multifn or field2d)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FunctionTag {
    Sin,
    Cos,
    NotApplicable,
}

impl FunctionTag {
    pub fn as_str(self) -> &'static str {
        match self {
            FunctionTag::Sin => "sin",
            FunctionTag::Cos => "cos",
            FunctionTag::NotApplicable => "na",
        }
    }
}

impl FromStr for FunctionTag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sin" => Ok(FunctionTag::Sin),
            "cos" => Ok(FunctionTag::Cos),
            "na" => Ok(FunctionTag::NotApplicable),
            other => Err(format!("unknown function tag {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub context: Vec<Observation>,
    pub targets: Vec<Observation>,
    pub tag: FunctionTag,
}

impl Task {
    pub fn target_points(&self) -> Vec<Point> {
        self.targets.iter().map(|o| o.point.clone()).collect()
    }

    pub fn target_values(&self) -> Vec<f64> {
        self.targets.iter().map(|o| o.value).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSet {
    pub scenario: Scenario,
    pub dim: usize,
    pub seed: u64,
    pub tasks: Vec<Task>,
}

/// Generator arguments shared by every scenario.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenSpec {
    pub seed: u64,
    pub n_tasks: usize,
    pub nc_min: usize,
    pub nc_max: usize,
    pub n_targets: usize,
}

impl GenSpec {
    /// 32 tasks of 100 targets with 0 to 5 context points.
    pub fn standard_1d(seed: u64) -> Self {
        GenSpec {
            seed,
            n_tasks: 32,
            nc_min: 0,
            nc_max: 5,
            n_targets: 100,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_targets == 0 {
            return Err(TaskError::InvalidArgs("n_targets must be at least 1".into()));
        }
        if self.nc_min > self.nc_max || self.nc_max > self.n_targets {
            return Err(TaskError::InvalidArgs(format!(
                "context range [{}, {}] must lie within [0, {}]",
                self.nc_min, self.nc_max, self.n_targets
            )));
        }
        Ok(())
    }
}

/// Noise standard deviation of the noisy scenario at `x`.
pub fn noise_std(x: f64) -> f64 {
    NOISE_BASE + NOISE_PEAK * (-(x - NOISE_CENTER).powi(2) / (2.0 * NOISE_WIDTH * NOISE_WIDTH)).exp()
}

/// Noise-free value of a multi-function task.
pub fn multifn_value(tag: FunctionTag, x: f64) -> f64 {
    if x < 0.0 && tag == FunctionTag::Cos {
        x.cos()
    } else {
        x.sin()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bump {
    pub amplitude: f64,
    pub center: [f64; 2],
    pub width: f64,
}

/// Noise-free value of a bump field.
pub fn field_value(bumps: &[Bump], p: &Point) -> f64 {
    bumps
        .iter()
        .map(|b| {
            let d2 = (p.coords[0] - b.center[0]).powi(2) + (p.coords[1] - b.center[1]).powi(2);
            b.amplitude * (-d2 / (2.0 * b.width * b.width)).exp()
        })
        .sum()
}

fn split_context(rng: &mut ChaCha8Rng, spec: &GenSpec, targets: &[Observation]) -> Vec<Observation> {
    let nc = rng.random_range(spec.nc_min..=spec.nc_max);
    let mut idx = sample(rng, targets.len(), nc).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| targets[i].clone()).collect()
}

pub fn gen_noisy_1d(spec: GenSpec) -> Result<TaskSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let tasks = (0..spec.n_tasks)
        .map(|_| {
            let targets: Vec<Observation> = (0..spec.n_targets)
                .map(|_| {
                    let x = rng.random_range(-2.0..=2.0);
                    let eta: f64 = std_normal.sample(&mut rng);
                    Observation::new(Point::x(x), x.sin() + noise_std(x) * eta)
                })
                .collect();
            Task {
                context: split_context(&mut rng, &spec, &targets),
                targets,
                tag: FunctionTag::NotApplicable,
            }
        })
        .collect();
    Ok(TaskSet {
        scenario: Scenario::Noisy,
        dim: 1,
        seed: spec.seed,
        tasks,
    })
}

pub fn gen_multifn_1d(spec: GenSpec) -> Result<TaskSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tasks = (0..spec.n_tasks)
        .map(|_| {
            let tag = if rng.random_bool(0.5) { FunctionTag::Sin } else { FunctionTag::Cos };
            let targets: Vec<Observation> = (0..spec.n_targets)
                .map(|_| {
                    let x = rng.random_range(-2.0..=2.0);
                    Observation::new(Point::x(x), multifn_value(tag, x))
                })
                .collect();
            Task {
                context: split_context(&mut rng, &spec, &targets),
                targets,
                tag,
            }
        })
        .collect();
    Ok(TaskSet {
        scenario: Scenario::MultiFn,
        dim: 1,
        seed: spec.seed,
        tasks,
    })
}

/// Like [`gen_field_2d`], also returning each task's bumps.
pub fn gen_field_2d_with_bumps(spec: GenSpec, n_bumps: usize) -> Result<(TaskSet, Vec<Vec<Bump>>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, FIELD_NOISE).expect("positive std");
    let mut all_bumps = Vec::with_capacity(spec.n_tasks);
    let tasks = (0..spec.n_tasks)
        .map(|_| {
            let bumps: Vec<Bump> = (0..n_bumps)
                .map(|_| Bump {
                    amplitude: rng.random_range(-1.0..=1.0),
                    center: [rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0)],
                    width: rng.random_range(0.1..=0.3),
                })
                .collect();
            let targets: Vec<Observation> = (0..spec.n_targets)
                .map(|_| {
                    let p = Point::xy(rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0));
                    let y = field_value(&bumps, &p) + noise.sample(&mut rng);
                    Observation::new(p, y)
                })
                .collect();
            all_bumps.push(bumps);
            Task {
                context: split_context(&mut rng, &spec, &targets),
                targets,
                tag: FunctionTag::NotApplicable,
            }
        })
        .collect();
    Ok((
        TaskSet {
            scenario: Scenario::Field2d,
            dim: 2,
            seed: spec.seed,
            tasks,
        },
        all_bumps,
    ))
}

pub fn gen_field_2d(spec: GenSpec, n_bumps: usize) -> Result<TaskSet> {
    gen_field_2d_with_bumps(spec, n_bumps).map(|(ts, _)| ts)
}

pub fn generate(scenario: Scenario, spec: GenSpec, n_bumps: usize) -> Result<TaskSet> {
    match scenario {
        Scenario::Noisy => gen_noisy_1d(spec),
        Scenario::MultiFn => gen_multifn_1d(spec),
        Scenario::Field2d => gen_field_2d(spec, n_bumps),
    }
}

fn fmt_num(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").expect("writing to a String");
}

fn fmt_obs(out: &mut String, o: &Observation) {
    for (i, c) in o.point.coords.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        fmt_num(out, *c);
    }
    out.push(':');
    fmt_num(out, o.value);
}

/// Serialises a task set; numbers carry 17 significant digits.
pub fn format_tasks(ts: &TaskSet) -> String {
    let mut out = format!(
        "{FORMAT_MAGIC} {FORMAT_VERSION} scenario={} d={} seed={}\n",
        ts.scenario.tag(),
        ts.dim,
        ts.seed
    );
    for t in &ts.tasks {
        write!(out, "NC={} NT={} TAG={}", t.context.len(), t.targets.len(), t.tag.as_str()).unwrap();
        for o in &t.context {
            out.push(' ');
            fmt_obs(&mut out, o);
        }
        out.push_str(" |");
        for o in &t.targets {
            out.push(' ');
            fmt_obs(&mut out, o);
        }
        out.push('\n');
    }
    out
}

pub fn write_tasks(ts: &TaskSet, path: &Path) -> Result<()> {
    std::fs::write(path, format_tasks(ts))?;
    Ok(())
}

pub fn read_tasks(path: &Path) -> Result<TaskSet> {
    parse_tasks(&std::fs::read_to_string(path)?)
}

fn header_field<'a>(tok: Option<&'a str>, key: &str) -> Result<&'a str> {
    tok.and_then(|t| t.strip_prefix(key)).and_then(|t| t.strip_prefix('=')).ok_or_else(|| TaskError::Parse {
        line: 1,
        message: format!("header is missing {key}=..."),
    })
}

fn parse_obs(tok: &str, dim: usize, line: usize) -> Result<Observation> {
    let err = |message: String| TaskError::Parse { line, message };
    let (coords, value) = tok.split_once(':').ok_or_else(|| err(format!("expected x:y tuple, got {tok:?}")))?;
    let coords = coords
        .split(',')
        .map(|c| c.parse::<f64>().map_err(|_| err(format!("non-numeric coordinate {c:?}"))))
        .collect::<Result<Vec<f64>>>()?;
    if coords.len() != dim {
        return Err(err(format!("expected {dim} coordinates, got {}", coords.len())));
    }
    let value = value.parse::<f64>().map_err(|_| err(format!("non-numeric value {value:?}")))?;
    Ok(Observation::new(Point::new(coords), value))
}

fn count_field(tok: Option<&str>, key: &str, line: usize) -> Result<usize> {
    tok.and_then(|t| t.strip_prefix(key))
        .and_then(|t| t.strip_prefix('='))
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| TaskError::Parse {
            line,
            message: format!("expected {key}=<count>"),
        })
}

pub fn parse_tasks(text: &str) -> Result<TaskSet> {
    let mut lines = text.split_inclusive('\n').enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or(TaskError::Truncated {
        line: 1,
        message: "missing header".into(),
    })?;
    let mut toks = header.split_whitespace();
    if toks.next() != Some(FORMAT_MAGIC) {
        return Err(TaskError::Parse {
            line: 1,
            message: format!("header must start with {FORMAT_MAGIC}"),
        });
    }
    match toks.next() {
        Some(FORMAT_VERSION) => {}
        found => {
            return Err(TaskError::Version {
                found: found.unwrap_or("").trim_start_matches('v').to_string(),
                supported: FORMAT_VERSION.to_string(),
            })
        }
    }
    let scenario: Scenario = header_field(toks.next(), "scenario")?
        .parse()
        .map_err(|message| TaskError::Parse { line: 1, message })?;
    let dim: usize = header_field(toks.next(), "d")?.parse().map_err(|_| TaskError::Parse {
        line: 1,
        message: "d must be 1 or 2".into(),
    })?;
    if dim != scenario.dim() {
        return Err(TaskError::Parse {
            line: 1,
            message: format!("scenario {} is {}-dimensional, header says d={dim}", scenario.tag(), scenario.dim()),
        });
    }
    let seed: u64 = header_field(toks.next(), "seed")?.parse().map_err(|_| TaskError::Parse {
        line: 1,
        message: "seed must be an unsigned integer".into(),
    })?;
    if !header.ends_with('\n') {
        return Err(TaskError::Truncated {
            line: 1,
            message: "header line is not terminated".into(),
        });
    }

    let mut tasks = Vec::new();
    for (line, raw) in lines {
        if !raw.ends_with('\n') {
            return Err(TaskError::Truncated {
                line,
                message: "last line is not terminated".into(),
            });
        }
        if raw.trim().is_empty() {
            continue;
        }
        let mut toks = raw.split_whitespace();
        let nc = count_field(toks.next(), "NC", line)?;
        let nt = count_field(toks.next(), "NT", line)?;
        let tag: FunctionTag = toks
            .next()
            .and_then(|t| t.strip_prefix("TAG="))
            .ok_or_else(|| TaskError::Parse {
                line,
                message: "expected TAG=<sin|cos|na>".into(),
            })?
            .parse()
            .map_err(|message| TaskError::Parse { line, message })?;
        let mut context = Vec::with_capacity(nc);
        let mut targets = Vec::with_capacity(nt);
        let mut seen_bar = false;
        for tok in toks {
            if tok == "|" {
                if seen_bar {
                    return Err(TaskError::Parse {
                        line,
                        message: "more than one '|' separator".into(),
                    });
                }
                seen_bar = true;
                continue;
            }
            let o = parse_obs(tok, dim, line)?;
            if seen_bar {
                targets.push(o);
            } else {
                context.push(o);
            }
        }
        if !seen_bar || context.len() != nc || targets.len() != nt {
            return Err(TaskError::Truncated {
                line,
                message: format!(
                    "declared NC={nc} NT={nt}, found {} context and {} target tuples",
                    context.len(),
                    targets.len()
                ),
            });
        }
        tasks.push(Task { context, targets, tag });
    }
    Ok(TaskSet {
        scenario,
        dim,
        seed,
        tasks,
    })
}
