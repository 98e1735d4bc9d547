//! Fast embedded property checks, run by `epiplace selftest`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{predict, ModelConfig, ModelParams, Observation, Point};
use crate::placement::{greedy_place, AcquisitionMode, CandidateSet, GreedyOptions};
use crate::tasks::{gen_noisy_1d, GenSpec};
use crate::tensor::{grad_check, softmax, Graph, Tensor};
use crate::train::grad_check_params;
use crate::uncertainty::{decompose, mixture_nll, MixtureParams, VARIANCE_FLOOR};

/// Deliberate fault for checking that the suite can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    Decomposition,
    Gradient,
    Greedy,
}

impl FromStr for Fault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "decomposition" => Ok(Fault::Decomposition),
            "gradient" => Ok(Fault::Gradient),
            "greedy" => Ok(Fault::Greedy),
            other => Err(format!("unknown fault {other:?} (expected decomposition, gradient or greedy)")),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub passed: Vec<&'static str>,
    pub failed: Vec<(&'static str, String)>,
}

impl Report {
    pub fn ok(&self) -> bool {
        self.failed.is_empty()
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for name in &self.passed {
            writeln!(f, "pass  {name}")?;
        }
        for (name, why) in &self.failed {
            writeln!(f, "FAIL  {name}: {why}")?;
        }
        write!(f, "{}/{} properties passed", self.passed.len(), self.passed.len() + self.failed.len())
    }
}

fn random_mixture(rng: &mut ChaCha8Rng) -> MixtureParams {
    let k = rng.random_range(1..=5);
    let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-4.0..4.0)).collect();
    MixtureParams::new(
        softmax(&logits),
        (0..k).map(|_| rng.random_range(-5.0..5.0)).collect(),
        (0..k).map(|_| VARIANCE_FLOOR + rng.random_range(0.0..4.0)).collect(),
    )
}

fn decomposition_identity(fault: Option<Fault>) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..2000 {
        let m = random_mixture(&mut rng);
        let mut d = decompose(&m);
        if fault == Some(Fault::Decomposition) {
            d.var_total += 1e-3;
        }
        let gap = (d.var_total - (d.var_epistemic + d.var_aleatoric)).abs();
        if gap >= 1e-10 {
            return Err(format!("mixture {i}: total differs from epistemic + aleatoric by {gap:e}"));
        }
        if m.components() == 1 && d.var_epistemic != 0.0 {
            return Err(format!("mixture {i}: single component with nonzero epistemic variance"));
        }
    }
    Ok(())
}

fn nll_matches_density(_: Option<Fault>) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..2000 {
        let m = random_mixture(&mut rng);
        let y = rng.random_range(-6.0..6.0);
        let density: f64 = m
            .weights
            .iter()
            .zip(&m.means)
            .zip(&m.variances)
            .map(|((p, mu), v)| p * (-(y - mu) * (y - mu) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt())
            .sum();
        if density < 1e-200 {
            continue;
        }
        let (a, b) = (mixture_nll(&m, y), -density.ln());
        if (a - b).abs() > 1e-10 * b.abs().max(1.0) {
            return Err(format!("pair {i}: {a} vs {b}"));
        }
    }
    Ok(())
}

fn tensor_gradients(fault: Option<Fault>) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut vals = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let x = Tensor::new(vec![2, 9], vals(18)).unwrap();
    let k = Tensor::new(vec![3, 2, 3], vals(18)).unwrap();
    let b = Tensor::new(vec![3], vals(3)).unwrap();
    let w = Tensor::new(vec![4, 9], vals(36)).unwrap();
    let c = Tensor::new(vec![4], vals(4)).unwrap();
    let err = grad_check(
        |g: &mut Graph, x| {
            let kk = g.leaf(&k);
            let bb = g.leaf(&b);
            let ww = g.leaf(&w);
            let cc = g.leaf(&c);
            let conv = g.conv_same(x, kk, bb)?;
            let act = g.softplus(conv);
            let flat = g.reshape(act, vec![3, 9])?;
            let z = g.dense(flat, ww, cc)?;
            let lse = g.logsumexp_rows(z);
            Ok(g.mean_all(lse))
        },
        &x,
        1e-5,
    )
    .map_err(|e| e.to_string())?;
    let err = if fault == Some(Fault::Gradient) { err + 1.0 } else { err };
    if err >= 1e-6 {
        return Err(format!("tensor ops: relative gradient error {err:e}"));
    }
    Ok(())
}

fn tiny_model(k: usize, seed: u64) -> ModelParams {
    let config = ModelConfig {
        dim: 1,
        components: k,
        domain: vec![(-2.0, 2.0)],
        grid_nodes: vec![16],
        backbone_depth: 2,
        backbone_width: 4,
        kernel_size: 3,
        head_hidden: vec![6],
    };
    let mut p = ModelParams::init(config, seed).expect("valid config");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in &mut p.backbone {
        l.bias.values_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
    }
    for l in &mut p.head {
        l.bias.values_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
    }
    p
}

fn model_gradients(_: Option<Fault>) -> Result<(), String> {
    let tasks = gen_noisy_1d(GenSpec {
        n_tasks: 2,
        nc_min: 1,
        nc_max: 3,
        n_targets: 6,
        seed: 4,
    })
    .map_err(|e| e.to_string())?;
    let p = tiny_model(2, 4);
    for (name, err) in grad_check_params(&p, &tasks.tasks, 1e-5).map_err(|e| e.to_string())? {
        if err >= 1e-4 {
            return Err(format!("{name}: relative gradient error {err:e}"));
        }
    }
    Ok(())
}

fn greedy_vs_exhaustive(fault: Option<Fault>) -> Result<(), String> {
    let p = tiny_model(2, 5);
    let xs = [-1.6, -0.9, -0.2, 0.4, 1.1, 1.8];
    let cands = CandidateSet::new(xs.iter().map(|&x| Point::x(x)).collect()).map_err(|e| e.to_string())?;
    let targets: Vec<Point> = [-1.4, -0.5, 0.3, 1.5].iter().map(|&x| Point::x(x)).collect();
    let pred = |ctx: &[Observation], t: &[Point]| predict(&p, ctx, t).map_err(|e| e.to_string());
    for mode in [AcquisitionMode::Var, AcquisitionMode::Ep] {
        for refresh in [false, true] {
            let opts = GreedyOptions {
                refresh_predictions: refresh,
                initial_context: vec![],
            };
            let mut got = greedy_place(&p, &cands, &targets, 3, mode, &opts).map_err(|e| e.to_string())?.selected;
            if fault == Some(Fault::Greedy) {
                got.reverse();
            }
            let mut ctx: Vec<Observation> = Vec::new();
            let mut chosen = Vec::new();
            let mut fixed = Vec::new();
            for x in cands.points() {
                fixed.push(decompose(&pred(&[], std::slice::from_ref(x))?[0]).mean);
            }
            for _ in 0..3 {
                let mut best: Option<(usize, f64, f64)> = None;
                for (i, x) in cands.points().iter().enumerate() {
                    if chosen.contains(&i) {
                        continue;
                    }
                    let y = if refresh { decompose(&pred(&ctx, std::slice::from_ref(x))?[0]).mean } else { fixed[i] };
                    let mut trial = ctx.clone();
                    trial.push(Observation::new(x.clone(), y));
                    let s: f64 = pred(&trial, &targets)?
                        .iter()
                        .map(|m| {
                            let d = decompose(m);
                            if mode == AcquisitionMode::Var { d.var_total } else { d.var_epistemic }
                        })
                        .sum::<f64>()
                        / targets.len() as f64;
                    if best.is_none_or(|(_, b, _)| s < b) {
                        best = Some((i, s, y));
                    }
                }
                let (i, _, y) = best.expect("candidates remain");
                chosen.push(i);
                ctx.push(Observation::new(cands.points()[i].clone(), y));
            }
            if got != chosen {
                return Err(format!("{mode}, refresh={refresh}: greedy {got:?}, exhaustive {chosen:?}"));
            }
        }
    }
    Ok(())
}

fn single_component_epistemic(_: Option<Fault>) -> Result<(), String> {
    let p = tiny_model(1, 6);
    let ctx = vec![Observation::new(Point::x(0.3), 1.0)];
    let targets: Vec<Point> = (0..20).map(|i| Point::x(-1.9 + 0.2 * i as f64)).collect();
    let preds = predict(&p, &ctx, &targets).map_err(|e| e.to_string())?;
    if preds.iter().any(|m| decompose(m).var_epistemic != 0.0) {
        return Err("K=1 prediction with nonzero epistemic variance".into());
    }
    Ok(())
}

type Property = fn(Option<Fault>) -> Result<(), String>;

const PROPERTIES: [(&str, Property); 6] = [
    ("decomposition identity", decomposition_identity),
    ("mixture NLL vs density sum", nll_matches_density),
    ("tensor gradients", tensor_gradients),
    ("model parameter gradients", model_gradients),
    ("greedy vs exhaustive scan", greedy_vs_exhaustive),
    ("single-component epistemic nullity", single_component_epistemic),
];

pub fn run(fault: Option<Fault>) -> Report {
    let mut report = Report::default();
    for (name, check) in PROPERTIES {
        match check(fault) {
            Ok(()) => report.passed.push(name),
            Err(why) => report.failed.push((name, why)),
        }
    }
    report
}
