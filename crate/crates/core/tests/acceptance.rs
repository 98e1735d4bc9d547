//! Acceptance checks. Runs without the libtest harness so every criterion
//! prints a PASS/FAIL line; exits nonzero if any fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use epiplace::eval::{run_placement_experiment, ExperimentSpec};
use epiplace::model::{predict, ModelConfig, ModelParams, Observation, Point};
use epiplace::placement::{acquisition_scores, greedy_place, AcquisitionMode, CandidateSet, GreedyOptions, PlacementMode};
use epiplace::tasks::{gen_multifn_1d, gen_noisy_1d, read_tasks, write_tasks, GenSpec, TaskSet};
use epiplace::tensor::softmax;
use epiplace::train::{fit, grad_check_params, TrainConfig};
use epiplace::uncertainty::{decompose, mixture_nll, MixtureParams, VARIANCE_FLOOR};

type Outcome = Result<String, String>;

// Shared by both trained models.
const TRAIN_SEED: u64 = 3;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_mixture(rng: &mut ChaCha8Rng, k: usize) -> MixtureParams {
    let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-4.0..4.0)).collect();
    MixtureParams::new(
        softmax(&logits),
        (0..k).map(|_| rng.random_range(-5.0..5.0)).collect(),
        (0..k).map(|_| VARIANCE_FLOOR + rng.random_range(0.0..4.0)).collect(),
    )
}

fn decomposition_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for i in 0..10_000 {
        let m = random_mixture(&mut rng, 1 + i % 5);
        let d = decompose(&m);
        worst = worst.max((d.var_total - (d.var_epistemic + d.var_aleatoric)).abs());
    }
    if worst >= 1e-10 {
        return Err(format!("identity gap {worst:e}"));
    }
    let (w, mu, var) = ([0.3, 0.7], [0.0, 2.0], [1.0, 4.0]);
    let d = decompose(&MixtureParams::new(w.to_vec(), mu.to_vec(), var.to_vec()));
    // closed forms for two components
    let mean = w[0] * mu[0] + w[1] * mu[1];
    let ep = w[0] * w[1] * (mu[0] - mu[1]).powi(2);
    let al = w[0] * var[0] + w[1] * var[1];
    let got = [d.mean, d.var_epistemic, d.var_aleatoric, d.var_total];
    let oracle = [mean, ep, al, ep + al];
    let published = [1.4, 0.84, 3.1, 3.94];
    for j in 0..4 {
        if (got[j] - oracle[j]).abs() > 1e-12 || (got[j] - published[j]).abs() > 1e-12 {
            return Err(format!("worked case {got:?}, closed form {oracle:?}, published {published:?}"));
        }
    }
    Ok(format!("max gap {worst:.1e} over 10000 mixtures; worked case {got:?}"))
}

fn single_component_nullity() -> Outcome {
    let config = ModelConfig {
        components: 1,
        grid_nodes: vec![64],
        backbone_depth: 3,
        backbone_width: 8,
        ..ModelConfig::default_1d()
    };
    let p = ModelParams::init(config, 5).map_err(|e| e.to_string())?;
    let tasks = gen_multifn_1d(GenSpec {
        seed: 21,
        n_tasks: 5,
        nc_min: 0,
        nc_max: 5,
        n_targets: 40,
    })
    .map_err(|e| e.to_string())?;
    let mut n_preds = 0;
    for t in &tasks.tasks {
        let preds = predict(&p, &t.context, &t.target_points()).map_err(|e| e.to_string())?;
        n_preds += preds.len();
        if let Some(m) = preds.iter().find(|m| decompose(m).var_epistemic != 0.0) {
            return Err(format!("nonzero epistemic variance for {m:?}"));
        }
        let cands = CandidateSet::new(t.target_points()[..10].to_vec()).map_err(|e| e.to_string())?;
        let scores = acquisition_scores(&p, &t.context, &cands, &t.target_points(), AcquisitionMode::Ep).map_err(|e| e.to_string())?;
        if scores.scores.iter().any(|&s| s != 0.0) {
            return Err(format!("ep scores {:?}", scores.scores));
        }
    }
    Ok(format!("{n_preds} predictions and 50 ep scores exactly zero"))
}

fn autodiff() -> Outcome {
    let config = ModelConfig {
        dim: 1,
        components: 2,
        domain: vec![(-2.0, 2.0)],
        grid_nodes: vec![32],
        backbone_depth: 2,
        backbone_width: 8,
        kernel_size: 5,
        head_hidden: vec![8],
    };
    let mut p = ModelParams::init(config, 7).map_err(|e| e.to_string())?;
    // Zero biases put ReLU inputs on the kink, where finite differences are meaningless.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut jitter = |bias: &mut [f64]| bias.iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
    p.backbone.iter_mut().for_each(|l| jitter(l.bias.values_mut()));
    p.head.iter_mut().for_each(|l| jitter(l.bias.values_mut()));
    let tasks = gen_noisy_1d(GenSpec {
        seed: 8,
        n_tasks: 5,
        nc_min: 1,
        nc_max: 5,
        n_targets: 10,
    })
    .map_err(|e| e.to_string())?;
    let errs = grad_check_params(&p, &tasks.tasks, 1e-5).map_err(|e| e.to_string())?;
    let n_tensors = p.named_tensors().len();
    let (name, worst) = errs.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    check(
        errs.len() == n_tensors && worst < 1e-4,
        format!("{} of {n_tensors} tensors checked, worst {name} at {worst:.2e}", errs.len()),
    )
}

fn train_scenario(noisy: bool) -> Result<(ModelParams, String), String> {
    let gen = |seed| if noisy { gen_noisy_1d(GenSpec::standard_1d(seed)) } else { gen_multifn_1d(GenSpec::standard_1d(seed)) };
    let train = gen(TRAIN_SEED + 100).map_err(|e| e.to_string())?;
    let val = gen(TRAIN_SEED + 200).map_err(|e| e.to_string())?;
    let config = ModelConfig {
        grid_nodes: vec![64],
        backbone_depth: 8,
        backbone_width: 16,
        kernel_size: 9,
        ..ModelConfig::default_1d()
    };
    let tc = TrainConfig {
        max_epochs: 500,
        patience: 100,
        seed: TRAIN_SEED,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let init = ModelParams::init(config, TRAIN_SEED).map_err(|e| e.to_string())?;
    let (p, h) = fit(&tc, init, &train, &val).map_err(|e| e.to_string())?;
    let note = format!("{} epochs (best {}) in {:.0}s", h.epochs(), h.best_epoch, start.elapsed().as_secs_f64());
    Ok((p, note))
}

fn eval_grid() -> Vec<Point> {
    (0..200).map(|i| Point::x(-2.0 + 4.0 * i as f64 / 199.0)).collect()
}

fn region_mean(xs: &[Point], vals: &[f64], keep: impl Fn(f64) -> bool) -> f64 {
    let picked: Vec<f64> = xs.iter().zip(vals).filter(|(p, _)| keep(p.coords[0])).map(|(_, v)| *v).collect();
    picked.iter().sum::<f64>() / picked.len() as f64
}

fn variances(p: &ModelParams, ctx: &[Observation], xs: &[Point], epistemic: bool) -> Result<Vec<f64>, String> {
    let preds = predict(p, ctx, xs).map_err(|e| e.to_string())?;
    Ok(preds
        .iter()
        .map(|m| {
            let d = decompose(m);
            if epistemic {
                d.var_epistemic
            } else {
                d.var_aleatoric
            }
        })
        .collect())
}

fn noisy_aleatoric(p: &ModelParams, note: &str) -> Outcome {
    let xs = eval_grid();
    let al = variances(p, &[], &xs, false)?;
    let mid = region_mean(&xs, &al, |x| (0.25..=0.75).contains(&x));
    let far = region_mean(&xs, &al, |x| (-2.0..=-1.0).contains(&x));
    check(mid > 2.0 * far, format!("aleatoric {mid:.4} vs {far:.4} (ratio {:.1}); {note}", mid / far))
}

fn multifn_epistemic(p: &ModelParams, note: &str) -> Outcome {
    let xs = eval_grid();
    let ep = variances(p, &[], &xs, true)?;
    let left = region_mean(&xs, &ep, |x| x < 0.0);
    let right = region_mean(&xs, &ep, |x| x > 0.5);
    let mut ok = left > 3.0 * right;
    let mut detail = format!("epistemic {left:.4} vs {right:.4} (ratio {:.1})", left / right);
    // a task's left branch is either sine or cosine; both must collapse
    for truth in [(-1.0f64).sin(), (-1.0f64).cos()] {
        let ctx = [Observation::new(Point::x(-1.0), truth)];
        let cond = region_mean(&xs, &variances(p, &ctx, &xs, true)?, |x| x < 0.0);
        let drop = 1.0 - cond / left;
        ok &= drop >= 0.5;
        detail += &format!(", y={truth:.3} drop {:.0}%", 100.0 * drop);
    }
    check(ok, format!("{detail}; {note}"))
}

fn greedy_oracle(p: &ModelParams) -> Outcome {
    let task = gen_multifn_1d(GenSpec {
        seed: 31,
        n_tasks: 1,
        nc_min: 0,
        nc_max: 0,
        n_targets: 60,
    })
    .map_err(|e| e.to_string())?
    .tasks
    .remove(0);
    let targets = task.target_points();
    let cands = CandidateSet::new(targets.iter().step_by(8).cloned().collect()).map_err(|e| e.to_string())?;
    let pred = |ctx: &[Observation], at: &[Point]| predict(p, ctx, at).map_err(|e| e.to_string());
    let mut runs = Vec::new();
    for mode in [AcquisitionMode::Var, AcquisitionMode::Ep] {
        for refresh in [false, true] {
            let opts = GreedyOptions {
                refresh_predictions: refresh,
                initial_context: vec![],
            };
            let got = greedy_place(p, &cands, &targets, 3, mode, &opts).map_err(|e| e.to_string())?.selected;
            let empty_means: Vec<f64> = pred(&[], cands.points())?.iter().map(|m| decompose(m).mean).collect();
            let (mut ctx, mut chosen) = (Vec::<Observation>::new(), Vec::new());
            for _ in 0..3 {
                let mut best: Option<(usize, f64, f64)> = None;
                for (i, x) in cands.points().iter().enumerate() {
                    if chosen.contains(&i) {
                        continue;
                    }
                    let y = if refresh { decompose(&pred(&ctx, std::slice::from_ref(x))?[0]).mean } else { empty_means[i] };
                    let mut trial = ctx.clone();
                    trial.push(Observation::new(x.clone(), y));
                    let total: f64 = pred(&trial, &targets)?
                        .iter()
                        .map(|m| {
                            let d = decompose(m);
                            if mode == AcquisitionMode::Var {
                                d.var_total
                            } else {
                                d.var_epistemic
                            }
                        })
                        .sum();
                    let score = total / targets.len() as f64;
                    if best.is_none_or(|(_, b, _)| score < b) {
                        best = Some((i, score, y));
                    }
                }
                let (i, _, y) = best.ok_or("no candidate left")?;
                chosen.push(i);
                ctx.push(Observation::new(cands.points()[i].clone(), y));
            }
            if got != chosen {
                return Err(format!("{mode}, refresh={refresh}: greedy {got:?}, scan {chosen:?}"));
            }
            runs.push(format!("{mode}/{refresh}:{got:?}"));
        }
    }
    Ok(format!("{} candidates; {}", cands.len(), runs.join(" ")))
}

fn held_out() -> Result<TaskSet, String> {
    gen_multifn_1d(GenSpec {
        seed: 999,
        n_tasks: 10,
        nc_min: 0,
        nc_max: 0,
        n_targets: 100,
    })
    .map_err(|e| e.to_string())
}

fn placement_efficacy(p: &ModelParams) -> Outcome {
    let (mut wins, mut same_first) = (0, 0);
    for task in &held_out()?.tasks {
        let out = run_placement_experiment(p, task, &ExperimentSpec::over_targets(task, 3)).map_err(|e| e.to_string())?;
        let at3 = |mode| out.table.curve(mode).iter().find(|r| r.n_sensors == 3).map(|r| r.rmse);
        let (ep, random) = (at3(PlacementMode::Ep), at3(PlacementMode::Random));
        if let (Some(ep), Some(random)) = (ep, random) {
            wins += (ep <= random) as usize;
        } else {
            return Err("missing rows at three sensors".into());
        }
        let first = |mode| out.placements.iter().find(|pl| pl.options.mode == mode).map(|pl| pl.selected[0]);
        same_first += (first(PlacementMode::Var) == first(PlacementMode::Ep)) as usize;
    }
    check(
        wins >= 8 && same_first >= 5,
        format!("ep beats random on {wins}/10, same first sensor on {same_first}/10"),
    )
}

fn protocol_fidelity(p: &ModelParams) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("held_out.tasks");
    write_tasks(&held_out()?, &path).map_err(|e| e.to_string())?;
    let file = read_tasks(&path).map_err(|e| e.to_string())?;
    let (mut checked, mut pseudo_differs) = (0, 0);
    for task in file.tasks.iter().take(3) {
        let out = run_placement_experiment(p, task, &ExperimentSpec::over_targets(task, 3)).map_err(|e| e.to_string())?;
        for ec in &out.eval_contexts {
            let placement = out
                .placements
                .iter()
                .find(|pl| pl.options.mode == ec.mode && (ec.mode != PlacementMode::Random || pl.options.seed == ec.seed))
                .ok_or("context without placement")?;
            if ec.context.len() != ec.n_sensors {
                return Err(format!("{} observations for {} sensors", ec.context.len(), ec.n_sensors));
            }
            for (j, obs) in ec.context.iter().enumerate() {
                let truth = &task.targets[placement.selected[j]];
                let same_point = obs.point.coords.iter().zip(&truth.point.coords).all(|(a, b)| a.to_bits() == b.to_bits());
                if !same_point || obs.value.to_bits() != truth.value.to_bits() {
                    return Err(format!("{} n={}: {obs:?} is not the file's {truth:?}", ec.mode, ec.n_sensors));
                }
                if let Some(pseudo) = placement.pseudo_context.get(j) {
                    pseudo_differs += (pseudo.value.to_bits() != truth.value.to_bits()) as usize;
                }
                checked += 1;
            }
        }
    }
    // the check only bites if pseudo-values and truths actually differ
    check(
        pseudo_differs > 0,
        format!("{checked} evaluated observations match the task file; {pseudo_differs} pseudo-values differ from truth"),
    )
}

const TINY_RUN: &str = "\
scenario = multifn
tasks.n_tasks = 4
tasks.n_targets = 24
tasks.seed = 5
model.grid_nodes = 32
model.backbone_depth = 2
model.backbone_width = 8
model.kernel_size = 5
model.head_hidden = 8
train.epochs = 3
train.seed = 5
";

fn cli_run(dir: &Path) -> Result<(), String> {
    let s = |p: &str| dir.join(p).display().to_string();
    std::fs::write(dir.join("run.cfg"), TINY_RUN).map_err(|e| e.to_string())?;
    let steps: Vec<Vec<String>> = vec![
        vec!["gen-tasks".into(), "--config".into(), s("run.cfg"), "--out".into(), s("tasks.txt")],
        vec!["train".into(), "--config".into(), s("run.cfg"), "--tasks".into(), s("tasks.txt"), "--out-ckpt".into(), s("model.ckpt")],
        vec!["place".into(), "--ckpt".into(), s("model.ckpt"), "--tasks".into(), s("tasks.txt"), "--acquisition".into(), "ep".into(), "--out".into(), s("ep.json")],
        vec!["place".into(), "--ckpt".into(), s("model.ckpt"), "--tasks".into(), s("tasks.txt"), "--acquisition".into(), "random".into(), "--seed".into(), "1".into(), "--out".into(), s("random.json")],
        vec![
            "evaluate".into(),
            "--ckpt".into(),
            s("model.ckpt"),
            "--tasks".into(),
            s("tasks.txt"),
            "--placement".into(),
            s("ep.json"),
            s("random.json"),
            "--out".into(),
            s("metrics.csv"),
        ],
        vec!["plot".into(), "--metrics".into(), s("metrics.csv"), "--out".into(), s("plot.svg")],
    ];
    for step in steps {
        let argv = ["epiplace".to_string(), "--threads".into(), "1".into()].into_iter().chain(step.iter().cloned());
        let code = epiplace::cli::dispatch(argv);
        if code != 0 {
            return Err(format!("{} exited with {code}", step[0]));
        }
    }
    Ok(())
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    cli_run(a.path())?;
    cli_run(b.path())?;
    let files = ["tasks.txt", "model.ckpt", "ep.json", "random.json", "metrics.csv", "plot.svg"];
    for f in files {
        let read = |d: &Path| std::fs::read(d.join(f)).map_err(|e| format!("{f}: {e}"));
        if read(a.path())? != read(b.path())? {
            return Err(format!("{f} differs between runs"));
        }
    }
    Ok(format!("{} files byte-identical", files.len()))
}

fn nll_vs_naive() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    let mut degenerate = 0;
    for i in 0..10_000 {
        let k = 1 + i % 5;
        let mut weights = softmax(&(0..k).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>());
        if k > 1 && i % 2 == 0 {
            // one near-dead component
            weights[0] = 1e-12;
            let rest: f64 = weights[1..].iter().sum();
            weights[1..].iter_mut().for_each(|w| *w *= (1.0 - 1e-12) / rest);
            degenerate += 1;
        }
        let means: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let vars: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..5.0)).collect();
        let y = rng.random_range(-6.0..6.0);
        let density: f64 = (0..k)
            .map(|j| weights[j] * (-(y - means[j]).powi(2) / (2.0 * vars[j])).exp() / (2.0 * std::f64::consts::PI * vars[j]).sqrt())
            .sum();
        let got = mixture_nll(&MixtureParams::new(weights, means, vars), y);
        worst = worst.max((got + density.ln()).abs());
    }
    check(worst <= 1e-10, format!("max difference {worst:.1e} over 10000 pairs ({degenerate} with a 1e-12 weight)"))
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 decomposition identity", decomposition_identity()),
        ("2 single-component epistemic nullity", single_component_nullity()),
        ("3 autodiff correctness", autodiff()),
    ];
    match train_scenario(true) {
        Ok((p, note)) => results.push(("4 noisy aleatoric profile", noisy_aleatoric(&p, &note))),
        Err(e) => results.push(("4 noisy aleatoric profile", Err(e))),
    }
    match train_scenario(false) {
        Ok((p, note)) => {
            results.push(("5 multi-function epistemic profile", multifn_epistemic(&p, &note)));
            results.push(("6 greedy oracle equivalence", greedy_oracle(&p)));
            results.push(("7 placement efficacy", placement_efficacy(&p)));
            results.push(("8 evaluation protocol fidelity", protocol_fidelity(&p)));
        }
        Err(e) => {
            for name in ["5 multi-function epistemic profile", "6 greedy oracle equivalence", "7 placement efficacy", "8 evaluation protocol fidelity"] {
                results.push((name, Err(e.clone())));
            }
        }
    }
    results.push(("9 end-to-end determinism", determinism()));
    results.push(("10 mixture NLL vs naive density", nll_vs_naive()));

    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(d) => println!("PASS  {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL  {name}: {d}");
            }
        }
    }
    println!("{}/{} criteria passed in {:.0}s", results.len() - failed, results.len(), start.elapsed().as_secs_f64());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
