//! Acquisition scoring and greedy sensor placement.
//!
//! A candidate's score is the mean, over targets, of the predicted variance
//! (total or epistemic) after adding the candidate to the context with the
//! model's own mean prediction as its value. Lower is better. The random
//! baseline samples candidates uniformly without replacement.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, Observation, Point, Predictor};
use crate::uncertainty::decompose;

#[derive(Debug, Error)]
pub enum PlacementError {
    #[error("candidate set is empty")]
    NoCandidates,
    #[error("target set is empty")]
    NoTargets,
    #[error("cannot place {requested} sensors among {available} candidates")]
    TooManySensors { requested: usize, available: usize },
    #[error("at least one sensor must be placed")]
    NoSensors,
    #[error("candidate {index}: {source}")]
    Candidate { index: usize, source: ModelError },
    #[error("candidate {index} produced a non-finite score")]
    NonFinite { index: usize },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, PlacementError>;

/// Which variance an acquisition score averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcquisitionMode {
    Var,
    Ep,
}

/// Any placement strategy, including the random baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlacementMode {
    Var,
    Ep,
    Random,
}

impl PlacementMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PlacementMode::Var => "var",
            PlacementMode::Ep => "ep",
            PlacementMode::Random => "random",
        }
    }

    pub fn acquisition(self) -> Option<AcquisitionMode> {
        match self {
            PlacementMode::Var => Some(AcquisitionMode::Var),
            PlacementMode::Ep => Some(AcquisitionMode::Ep),
            PlacementMode::Random => None,
        }
    }
}

impl From<AcquisitionMode> for PlacementMode {
    fn from(m: AcquisitionMode) -> Self {
        match m {
            AcquisitionMode::Var => PlacementMode::Var,
            AcquisitionMode::Ep => PlacementMode::Ep,
        }
    }
}

impl fmt::Display for PlacementMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for AcquisitionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        PlacementMode::from(*self).fmt(f)
    }
}

impl FromStr for PlacementMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "var" => Ok(PlacementMode::Var),
            "ep" => Ok(PlacementMode::Ep),
            "random" => Ok(PlacementMode::Random),
            other => Err(format!("unknown placement mode {other:?} (expected var, ep or random)")),
        }
    }
}

/// Ordered, nonempty list of candidate locations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    points: Vec<Point>,
}

impl CandidateSet {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(PlacementError::NoCandidates);
        }
        Ok(CandidateSet { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionScores {
    pub mode: AcquisitionMode,
    pub scores: Vec<f64>,
}

impl AcquisitionScores {
    /// Index of the lowest score; ties go to the lowest index.
    pub fn best(&self) -> usize {
        argmin(self.scores.iter().copied().map(Some)).expect("scores are nonempty")
    }
}

fn argmin(scores: impl Iterator<Item = Option<f64>>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.enumerate() {
        if let Some(s) = s {
            if best.is_none_or(|(_, b)| s < b) {
                best = Some((i, s));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Mixture mean at each candidate given `context`; one predict call each.
pub fn pseudo_values<P: Predictor + ?Sized>(
    model: &P,
    context: &[Observation],
    candidates: &CandidateSet,
    eligible: &[bool],
) -> Result<Vec<Option<f64>>> {
    candidates
        .points
        .par_iter()
        .enumerate()
        .map(|(index, x)| {
            if !eligible[index] {
                return Ok(None);
            }
            let m = model
                .predict(context, std::slice::from_ref(x))
                .map_err(|source| PlacementError::Candidate { index, source })?;
            let mean = decompose(&m[0]).mean;
            if mean.is_finite() {
                Ok(Some(mean))
            } else {
                Err(PlacementError::NonFinite { index })
            }
        })
        .collect()
}

/// Mean hypothetical variance over `targets` for each eligible candidate,
/// given its pseudo-value. Ineligible candidates score `None`.
pub fn hypothetical_scores<P: Predictor + ?Sized>(
    model: &P,
    context: &[Observation],
    candidates: &CandidateSet,
    pseudo: &[Option<f64>],
    targets: &[Point],
    mode: AcquisitionMode,
) -> Result<Vec<Option<f64>>> {
    if targets.is_empty() {
        return Err(PlacementError::NoTargets);
    }
    candidates
        .points
        .par_iter()
        .zip(pseudo)
        .enumerate()
        .map(|(index, (x, y))| {
            let Some(y) = *y else { return Ok(None) };
            let mut ctx = context.to_vec();
            ctx.push(Observation::new(x.clone(), y));
            let mixtures = model
                .predict(&ctx, targets)
                .map_err(|source| PlacementError::Candidate { index, source })?;
            let total: f64 = mixtures
                .iter()
                .map(|m| {
                    let d = decompose(m);
                    match mode {
                        AcquisitionMode::Var => d.var_total,
                        AcquisitionMode::Ep => d.var_epistemic,
                    }
                })
                .sum();
            let score = total / targets.len() as f64;
            if score.is_finite() && score >= 0.0 {
                Ok(Some(score))
            } else {
                Err(PlacementError::NonFinite { index })
            }
        })
        .collect()
}

/// Scores every candidate against `context`.
pub fn acquisition_scores<P: Predictor + ?Sized>(
    model: &P,
    context: &[Observation],
    candidates: &CandidateSet,
    targets: &[Point],
    mode: AcquisitionMode,
) -> Result<AcquisitionScores> {
    if targets.is_empty() {
        return Err(PlacementError::NoTargets);
    }
    let all = vec![true; candidates.len()];
    let pseudo = pseudo_values(model, context, candidates, &all)?;
    let scores = hypothetical_scores(model, context, candidates, &pseudo, targets, mode)?;
    Ok(AcquisitionScores {
        mode,
        scores: scores.into_iter().map(|s| s.expect("every candidate scored")).collect(),
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GreedyOptions {
    /// Recompute pseudo-values from the growing context at every step.
    pub refresh_predictions: bool,
    pub initial_context: Vec<Observation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementOptions {
    pub mode: PlacementMode,
    pub refresh_predictions: bool,
    pub seed: Option<u64>,
    pub n_candidates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementStep {
    pub step: usize,
    pub index: usize,
    pub point: Vec<f64>,
    /// Value appended to the pseudo-context; absent for random placement.
    pub pseudo_value: Option<f64>,
    pub score: Option<f64>,
    /// Score of every candidate at this step; `None` for ones already chosen.
    pub scores: Option<Vec<Option<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementResult {
    pub options: PlacementOptions,
    pub steps: Vec<PlacementStep>,
    pub selected: Vec<usize>,
    pub pseudo_context: Vec<Observation>,
}

impl PlacementResult {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("placement results serialise");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| PlacementError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let io = |message: String| PlacementError::Io {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
        Self::from_json(&text).map_err(|e| io(e.to_string()))
    }
}

fn check_count(n_sensors: usize, available: usize) -> Result<()> {
    if n_sensors == 0 {
        return Err(PlacementError::NoSensors);
    }
    if n_sensors > available {
        return Err(PlacementError::TooManySensors {
            requested: n_sensors,
            available,
        });
    }
    Ok(())
}

/// Greedy placement: at each step pick the unselected candidate with the
/// lowest score and append it, with its pseudo-value, to the context.
///
/// Without refresh, pseudo-values are predicted once from the initial
/// context and reused at every step.
pub fn greedy_place<P: Predictor + ?Sized>(
    model: &P,
    candidates: &CandidateSet,
    targets: &[Point],
    n_sensors: usize,
    mode: AcquisitionMode,
    options: &GreedyOptions,
) -> Result<PlacementResult> {
    check_count(n_sensors, candidates.len())?;
    if targets.is_empty() {
        return Err(PlacementError::NoTargets);
    }
    let mut eligible = vec![true; candidates.len()];
    let mut context = options.initial_context.clone();
    let mut pseudo_context = Vec::with_capacity(n_sensors);
    let mut steps = Vec::with_capacity(n_sensors);
    let mut pseudo = pseudo_values(model, &context, candidates, &eligible)?;

    for step in 0..n_sensors {
        if options.refresh_predictions && step > 0 {
            pseudo = pseudo_values(model, &context, candidates, &eligible)?;
        }
        let masked: Vec<Option<f64>> = pseudo.iter().zip(&eligible).map(|(y, &e)| y.filter(|_| e)).collect();
        let scores = hypothetical_scores(model, &context, candidates, &masked, targets, mode)?;
        let index = argmin(scores.iter().copied()).expect("an eligible candidate remains");
        let y = masked[index].expect("chosen candidate is eligible");
        let obs = Observation::new(candidates.points[index].clone(), y);
        context.push(obs.clone());
        pseudo_context.push(obs);
        eligible[index] = false;
        steps.push(PlacementStep {
            step: step + 1,
            index,
            point: candidates.points[index].coords.clone(),
            pseudo_value: Some(y),
            score: scores[index],
            scores: Some(scores),
        });
    }
    Ok(PlacementResult {
        options: PlacementOptions {
            mode: mode.into(),
            refresh_predictions: options.refresh_predictions,
            seed: None,
            n_candidates: candidates.len(),
        },
        selected: steps.iter().map(|s| s.index).collect(),
        steps,
        pseudo_context,
    })
}

/// Uniform sample of `n_sensors` distinct candidates, determined by `seed`.
pub fn random_place(candidates: &CandidateSet, n_sensors: usize, seed: u64) -> Result<PlacementResult> {
    check_count(n_sensors, candidates.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let selected = rand::seq::index::sample(&mut rng, candidates.len(), n_sensors).into_vec();
    let steps = selected
        .iter()
        .enumerate()
        .map(|(i, &index)| PlacementStep {
            step: i + 1,
            index,
            point: candidates.points[index].coords.clone(),
            pseudo_value: None,
            score: None,
            scores: None,
        })
        .collect();
    Ok(PlacementResult {
        options: PlacementOptions {
            mode: PlacementMode::Random,
            refresh_predictions: false,
            seed: Some(seed),
            n_candidates: candidates.len(),
        },
        steps,
        selected,
        pseudo_context: Vec::new(),
    })
}
