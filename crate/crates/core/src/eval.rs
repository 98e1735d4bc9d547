//! Error metrics, the sensors-versus-error experiment, and its CSV and SVG
//! outputs.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::model::{ModelError, Observation, Point, Predictor};
use crate::placement::{
    greedy_place, random_place, CandidateSet, GreedyOptions, PlacementError, PlacementMode, PlacementResult,
};
use crate::tasks::Task;
use crate::uncertainty::{decompose, mixture_nll, MixtureParams};

pub const METRICS_HEADER: &str = "mode,model_k,n_sensors,seed,rmse,mean_nll";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {predictions} predictions for {truths} truths")]
    LengthMismatch { predictions: usize, truths: usize },
    #[error("cannot score an empty set")]
    Empty,
    #[error("n_sensors_max must be at least 1")]
    NoSensors,
    #[error("no placement modes requested")]
    NoModes,
    #[error("random placement needs at least one seed")]
    NoSeeds,
    #[error("placement index {index} is out of range for {available} candidates")]
    IndexOutOfRange { index: usize, available: usize },
    #[error("metrics table is empty")]
    EmptyTable,
    #[error("metrics line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Placement(#[from] PlacementError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn check_lengths(predictions: usize, truths: usize) -> Result<()> {
    if predictions != truths {
        return Err(EvalError::LengthMismatch { predictions, truths });
    }
    if truths == 0 {
        return Err(EvalError::Empty);
    }
    Ok(())
}

pub fn rmse(predicted: &[f64], truths: &[f64]) -> Result<f64> {
    check_lengths(predicted.len(), truths.len())?;
    let sq: f64 = predicted.iter().zip(truths).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sq / truths.len() as f64).sqrt())
}

pub fn mean_nll(mixtures: &[MixtureParams], truths: &[f64]) -> Result<f64> {
    check_lengths(mixtures.len(), truths.len())?;
    let total: f64 = mixtures.iter().zip(truths).map(|(m, y)| mixture_nll(m, *y)).sum();
    Ok(total / truths.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub mode: PlacementMode,
    pub model_k: usize,
    pub n_sensors: usize,
    /// Set on per-seed random rows; `None` on deterministic and seed-averaged rows.
    pub seed: Option<u64>,
    pub rmse: f64,
    pub mean_nll: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows plotted for `mode`: the seed-free ones, ordered by sensor count.
    pub fn curve(&self, mode: PlacementMode) -> Vec<&MetricsRow> {
        let mut rows: Vec<&MetricsRow> = self.rows.iter().filter(|r| r.mode == mode && r.seed.is_none()).collect();
        rows.sort_by_key(|r| r.n_sensors);
        rows
    }

    /// Modes in order of first appearance.
    pub fn modes(&self) -> Vec<PlacementMode> {
        let mut out = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.mode) {
                out.push(r.mode);
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.rows {
            let seed = r.seed.map(|v| v.to_string()).unwrap_or_default();
            writeln!(s, "{},{},{},{},{},{}", r.mode, r.model_k, r.n_sensors, seed, r.rmse, r.mean_nll).unwrap();
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == METRICS_HEADER => {}
            _ => {
                return Err(EvalError::Parse {
                    line: 1,
                    message: format!("expected header {METRICS_HEADER:?}"),
                })
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| EvalError::Parse { line: i + 1, message };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(err(format!("expected 6 fields, found {}", f.len())));
            }
            let num = |s: &str, what: &str| s.parse::<f64>().map_err(|_| err(format!("bad {what} {s:?}")));
            let int = |s: &str, what: &str| s.parse::<usize>().map_err(|_| err(format!("bad {what} {s:?}")));
            rows.push(MetricsRow {
                mode: f[0].parse().map_err(err)?,
                model_k: int(f[1], "model_k")?,
                n_sensors: int(f[2], "n_sensors")?,
                seed: if f[3].is_empty() {
                    None
                } else {
                    Some(f[3].parse().map_err(|_| err(format!("bad seed {:?}", f[3])))?)
                },
                rmse: num(f[4], "rmse")?,
                mean_nll: num(f[5], "mean_nll")?,
            });
        }
        Ok(MetricsTable { rows })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if self.is_empty() {
            return Err(EvalError::EmptyTable);
        }
        write_file(path, &self.to_csv())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse_csv(&text)
    }

    pub fn write_plot(&self, path: &Path) -> Result<()> {
        let svg = render_plot(self)?;
        write_file(path, &svg)
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Metrics of one context at every target of a task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ContextMetrics {
    pub rmse: f64,
    pub mean_nll: f64,
}

pub fn score_context<P: Predictor + ?Sized>(model: &P, task: &Task, context: &[Observation]) -> Result<ContextMetrics> {
    let mixtures = model.predict(context, &task.target_points())?;
    let truths = task.target_values();
    let means: Vec<f64> = mixtures.iter().map(|m| decompose(m).mean).collect();
    Ok(ContextMetrics {
        rmse: rmse(&means, &truths)?,
        mean_nll: mean_nll(&mixtures, &truths)?,
    })
}

/// Context actually used to score one prefix of a placement.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalContext {
    pub mode: PlacementMode,
    pub seed: Option<u64>,
    pub n_sensors: usize,
    pub context: Vec<Observation>,
}

/// Observations at the placement's first `n` sensors, carrying the task's
/// true values. `candidates[i]` indexes the task target behind candidate `i`.
pub fn true_context(task: &Task, candidates: &[usize], placement: &PlacementResult, n: usize) -> Result<Vec<Observation>> {
    placement.selected[..n]
        .iter()
        .map(|&i| {
            let t = *candidates.get(i).ok_or(EvalError::IndexOutOfRange {
                index: i,
                available: candidates.len(),
            })?;
            task.targets.get(t).cloned().ok_or(EvalError::IndexOutOfRange {
                index: t,
                available: task.targets.len(),
            })
        })
        .collect()
}

/// Scores every prefix `1..=selected.len()` of a placement.
pub fn evaluate_placement<P: Predictor + ?Sized>(
    model: &P,
    task: &Task,
    candidates: &[usize],
    placement: &PlacementResult,
) -> Result<Vec<(EvalContext, ContextMetrics)>> {
    let mode = placement.options.mode;
    let seed = placement.options.seed.filter(|_| mode == PlacementMode::Random);
    (1..=placement.selected.len())
        .into_par_iter()
        .map(|n| {
            let context = true_context(task, candidates, placement, n)?;
            let metrics = score_context(model, task, &context)?;
            Ok((
                EvalContext {
                    mode,
                    seed,
                    n_sensors: n,
                    context,
                },
                metrics,
            ))
        })
        .collect()
}

/// Scores every prefix of every placement. Random placements also get
/// seed-averaged rows for each sensor count, appended after all others.
pub fn tabulate<P: Predictor + ?Sized>(
    model: &P,
    task: &Task,
    candidates: &[usize],
    placements: &[PlacementResult],
) -> Result<(MetricsTable, Vec<EvalContext>)> {
    let k = model.components();
    let mut table = MetricsTable::default();
    let mut contexts = Vec::new();
    // (rmse sum, nll sum, count) per sensor count
    let mut random: Vec<(f64, f64, usize)> = Vec::new();
    for placement in placements {
        for (ctx, m) in evaluate_placement(model, task, candidates, placement)? {
            table.rows.push(MetricsRow {
                mode: ctx.mode,
                model_k: k,
                n_sensors: ctx.n_sensors,
                seed: ctx.seed,
                rmse: m.rmse,
                mean_nll: m.mean_nll,
            });
            if ctx.mode == PlacementMode::Random {
                if random.len() < ctx.n_sensors {
                    random.resize(ctx.n_sensors, (0.0, 0.0, 0));
                }
                let acc = &mut random[ctx.n_sensors - 1];
                acc.0 += m.rmse;
                acc.1 += m.mean_nll;
                acc.2 += 1;
            }
            contexts.push(ctx);
        }
    }
    for (i, (r, l, n)) in random.into_iter().enumerate() {
        table.rows.push(MetricsRow {
            mode: PlacementMode::Random,
            model_k: k,
            n_sensors: i + 1,
            seed: None,
            rmse: r / n as f64,
            mean_nll: l / n as f64,
        });
    }
    Ok((table, contexts))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    /// Indices into the task's targets that may host a sensor.
    pub candidates: Vec<usize>,
    pub n_sensors_max: usize,
    pub modes: Vec<PlacementMode>,
    pub random_seeds: Vec<u64>,
    pub greedy: GreedyOptions,
}

impl ExperimentSpec {
    /// Every target is a candidate; all three modes; seeds 0, 1, 2.
    pub fn over_targets(task: &Task, n_sensors_max: usize) -> Self {
        ExperimentSpec {
            candidates: (0..task.targets.len()).collect(),
            n_sensors_max,
            modes: vec![PlacementMode::Var, PlacementMode::Ep, PlacementMode::Random],
            random_seeds: vec![0, 1, 2],
            greedy: GreedyOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutcome {
    pub table: MetricsTable,
    /// Metrics with no sensors placed; reported apart from the curves.
    pub prior: ContextMetrics,
    pub placements: Vec<PlacementResult>,
    pub eval_contexts: Vec<EvalContext>,
}

/// Places sensors with each mode and scores every prefix against the
/// task's true values.
pub fn run_placement_experiment<P: Predictor + ?Sized>(model: &P, task: &Task, spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    if spec.n_sensors_max == 0 {
        return Err(EvalError::NoSensors);
    }
    if spec.modes.is_empty() {
        return Err(EvalError::NoModes);
    }
    if spec.modes.contains(&PlacementMode::Random) && spec.random_seeds.is_empty() {
        return Err(EvalError::NoSeeds);
    }
    let points = spec
        .candidates
        .iter()
        .map(|&t| {
            task.targets.get(t).map(|o| o.point.clone()).ok_or(EvalError::IndexOutOfRange {
                index: t,
                available: task.targets.len(),
            })
        })
        .collect::<Result<Vec<Point>>>()?;
    let candidates = CandidateSet::new(points)?;
    let targets = task.target_points();
    let mut placements = Vec::new();
    for &mode in &spec.modes {
        match mode.acquisition() {
            Some(acq) => placements.push(greedy_place(model, &candidates, &targets, spec.n_sensors_max, acq, &spec.greedy)?),
            None => {
                for &seed in &spec.random_seeds {
                    placements.push(random_place(&candidates, spec.n_sensors_max, seed)?);
                }
            }
        }
    }
    let (table, eval_contexts) = tabulate(model, task, &spec.candidates, &placements)?;
    let prior = score_context(model, task, &[])?;
    Ok(ExperimentOutcome {
        table,
        prior,
        placements,
        eval_contexts,
    })
}

fn color(mode: PlacementMode) -> &'static str {
    match mode {
        PlacementMode::Var => "#1f77b4",
        PlacementMode::Ep => "#d62728",
        PlacementMode::Random => "#7f7f7f",
    }
}

const WIDTH: f64 = 960.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 60.0;
const GAP: f64 = 80.0;

/// Two side-by-side panels (RMSE, mean NLL) against sensor count, one
/// polyline per mode. Output depends only on the table.
pub fn render_plot(table: &MetricsTable) -> Result<String> {
    if table.is_empty() {
        return Err(EvalError::EmptyTable);
    }
    let modes = table.modes();
    let n_max = table.rows.iter().map(|r| r.n_sensors).max().unwrap_or(1).max(1);
    let panel_w = (WIDTH - 2.0 * MARGIN - GAP) / 2.0;
    let panel_h = HEIGHT - 2.0 * MARGIN;

    let mut svg = String::new();
    writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8" standalone="no"?>"#).unwrap();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();

    let panels: [(&str, fn(&MetricsRow) -> f64); 2] = [("RMSE", |r| r.rmse), ("mean NLL", |r| r.mean_nll)];
    for (p, (label, value)) in panels.iter().enumerate() {
        let x0 = MARGIN + p as f64 * (panel_w + GAP);
        let y0 = MARGIN;
        let vals: Vec<f64> = modes.iter().flat_map(|&m| table.curve(m)).map(value).filter(|v| v.is_finite()).collect();
        let (mut lo, mut hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        let pad = 0.05 * (hi - lo);
        let (lo, hi) = (lo - pad, hi + pad);
        let sx = |n: usize| {
            if n_max == 1 {
                x0 + panel_w / 2.0
            } else {
                x0 + (n - 1) as f64 / (n_max - 1) as f64 * panel_w
            }
        };
        let sy = |v: f64| y0 + panel_h - (v - lo) / (hi - lo) * panel_h;

        writeln!(svg, r#"<g class="panel">"#).unwrap();
        writeln!(
            svg,
            r#"<rect x="{x0:.2}" y="{y0:.2}" width="{panel_w:.2}" height="{panel_h:.2}" fill="none" stroke="black"/>"#
        )
        .unwrap();
        for n in 1..=n_max {
            let x = sx(n);
            writeln!(
                svg,
                r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{n}</text>"#,
                y0 + panel_h,
                y0 + panel_h + 5.0,
                y0 + panel_h + 18.0
            )
            .unwrap();
        }
        for i in 0..=4 {
            let v = lo + (hi - lo) * i as f64 / 4.0;
            let y = sy(v);
            writeln!(
                svg,
                r#"<line x1="{:.2}" y1="{y:.2}" x2="{x0:.2}" y2="{y:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{v:.3}</text>"#,
                x0 - 5.0,
                x0 - 8.0,
                y + 4.0
            )
            .unwrap();
        }
        writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">number of sensors</text>"#,
            x0 + panel_w / 2.0,
            HEIGHT - 15.0
        )
        .unwrap();
        writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" transform="rotate(-90 {:.2} {:.2})">{label}</text>"#,
            x0 - 45.0,
            y0 + panel_h / 2.0,
            x0 - 45.0,
            y0 + panel_h / 2.0
        )
        .unwrap();
        for &mode in &modes {
            let pts: Vec<String> = table
                .curve(mode)
                .into_iter()
                .filter(|r| value(r).is_finite())
                .map(|r| format!("{:.2},{:.2}", sx(r.n_sensors), sy(value(r))))
                .collect();
            writeln!(
                svg,
                r#"<polyline class="{mode}" fill="none" stroke="{}" stroke-width="2" points="{}"/>"#,
                color(mode),
                pts.join(" ")
            )
            .unwrap();
        }
        writeln!(svg, "</g>").unwrap();
    }

    writeln!(svg, r#"<g class="legend">"#).unwrap();
    for (i, &mode) in modes.iter().enumerate() {
        let x = MARGIN + i as f64 * 110.0;
        let y = MARGIN / 2.0;
        writeln!(
            svg,
            r#"<line x1="{x:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{mode}</text>"#,
            x + 24.0,
            color(mode),
            x + 30.0,
            y + 4.0
        )
        .unwrap();
    }
    writeln!(svg, "</g>").unwrap();
    writeln!(svg, "</svg>").unwrap();
    Ok(svg)
}
