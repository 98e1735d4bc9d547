use proptest::prelude::*;

use epiplace::model::{predict, ModelConfig, ModelParams, Observation, Point};
use epiplace::placement::{acquisition_scores, greedy_place, random_place, AcquisitionMode, CandidateSet, GreedyOptions};
use epiplace::tasks::{format_tasks, generate, parse_tasks, FunctionTag, GenSpec, Scenario};
use epiplace::train::TrainConfig;
use epiplace::uncertainty::VARIANCE_FLOOR;

fn scenario() -> impl Strategy<Value = Scenario> {
    prop_oneof![Just(Scenario::Noisy), Just(Scenario::MultiFn), Just(Scenario::Field2d)]
}

fn small_model(dim: usize, k: usize, seed: u64) -> ModelParams {
    let base = if dim == 1 { ModelConfig::default_1d() } else { ModelConfig::default_2d() };
    let config = ModelConfig {
        components: k,
        grid_nodes: vec![if dim == 1 { 24 } else { 10 }; dim],
        backbone_depth: 2,
        backbone_width: 4,
        kernel_size: 3,
        head_hidden: vec![6],
        ..base
    };
    ModelParams::init(config, seed).unwrap()
}

fn point_in(domain: &[(f64, f64)], u: &[f64]) -> Point {
    Point::new(domain.iter().zip(u).map(|((lo, hi), t)| lo + (hi - lo) * t).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn generated_tasks_respect_their_ranges(
        scen in scenario(),
        seed in any::<u64>(),
        n_tasks in 1usize..4,
        n_targets in 1usize..30,
        lo in 0usize..4,
        width in 0usize..4,
    ) {
        let nc_max = (lo + width).min(n_targets);
        let nc_min = lo.min(nc_max);
        let ts = generate(scen, GenSpec { seed, n_tasks, nc_min, nc_max, n_targets }, 2).unwrap();
        prop_assert_eq!(ts.tasks.len(), n_tasks);
        prop_assert_eq!(ts.dim, scen.dim());
        let domain = scen.domain();
        for t in &ts.tasks {
            prop_assert_eq!(t.targets.len(), n_targets);
            prop_assert!((nc_min..=nc_max).contains(&t.context.len()));
            for o in t.context.iter().chain(&t.targets) {
                prop_assert_eq!(o.point.coords.len(), domain.len());
                for (c, (a, b)) in o.point.coords.iter().zip(&domain) {
                    prop_assert!(*a <= *c && *c <= *b);
                }
                prop_assert!(o.value.is_finite());
            }
            let tag_ok = match scen {
                Scenario::MultiFn => matches!(t.tag, FunctionTag::Sin | FunctionTag::Cos),
                _ => t.tag == FunctionTag::NotApplicable,
            };
            prop_assert!(tag_ok);
        }
        // the text format must round-trip every bit
        let back = parse_tasks(&format_tasks(&ts)).unwrap();
        prop_assert_eq!(format_tasks(&back), format_tasks(&ts));
        prop_assert_eq!(back, ts);
    }

    #[test]
    fn training_config_rejects_nonpositive_rates(lr in -1.0f64..=0.0) {
        let config = TrainConfig { learning_rate: lr, ..TrainConfig::default() };
        prop_assert!(config.validate().is_err());
    }

    #[test]
    fn random_placement_is_a_subset(n_cands in 1usize..40, frac in 0.0f64..1.0, seed in any::<u64>()) {
        let n = 1 + ((n_cands - 1) as f64 * frac) as usize;
        let cands = CandidateSet::new((0..n_cands).map(|i| Point::x(i as f64 / 40.0)).collect()).unwrap();
        let r = random_place(&cands, n, seed).unwrap();
        prop_assert_eq!(r.selected.len(), n);
        let mut uniq = r.selected.clone();
        uniq.sort_unstable();
        uniq.dedup();
        prop_assert_eq!(uniq.len(), n);
        prop_assert!(r.selected.iter().all(|&i| i < n_cands));
        prop_assert_eq!(random_place(&cands, n, seed).unwrap(), r);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn predictions_are_valid_mixtures(
        dim in 1usize..=2,
        k in 1usize..4,
        seed in any::<u64>(),
        ctx in proptest::collection::vec((proptest::collection::vec(0.0f64..=1.0, 2), -3.0f64..3.0), 0..6),
        tgt in proptest::collection::vec(proptest::collection::vec(0.0f64..=1.0, 2), 1..8),
    ) {
        let p = small_model(dim, k, seed);
        let domain = p.config.domain.clone();
        let context: Vec<Observation> = ctx.iter().map(|(u, y)| Observation::new(point_in(&domain, u), *y)).collect();
        let targets: Vec<Point> = tgt.iter().map(|u| point_in(&domain, u)).collect();
        let preds = predict(&p, &context, &targets).unwrap();
        prop_assert_eq!(preds.len(), targets.len());
        for m in &preds {
            prop_assert_eq!(m.components(), k);
            prop_assert!((m.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(m.weights.iter().all(|w| (0.0..=1.0).contains(w)));
            prop_assert!(m.variances.iter().all(|v| *v >= VARIANCE_FLOOR));
            prop_assert!(m.means.iter().all(|mu| mu.is_finite()));
        }
    }

    #[test]
    fn greedy_placement_is_valid(
        k in 1usize..3,
        seed in any::<u64>(),
        xs in proptest::collection::vec(-2.0f64..=2.0, 2..7),
        n_frac in 0.0f64..1.0,
        ep in any::<bool>(),
        refresh in any::<bool>(),
    ) {
        let p = small_model(1, k, seed);
        let cands = CandidateSet::new(xs.iter().map(|&x| Point::x(x)).collect()).unwrap();
        let targets: Vec<Point> = (0..9).map(|i| Point::x(-2.0 + 0.5 * i as f64)).collect();
        let mode = if ep { AcquisitionMode::Ep } else { AcquisitionMode::Var };
        let scores = acquisition_scores(&p, &[], &cands, &targets, mode).unwrap();
        prop_assert_eq!(scores.scores.len(), xs.len());
        prop_assert!(scores.scores.iter().all(|s| s.is_finite() && *s >= 0.0));

        let n = 1 + ((xs.len() - 1) as f64 * n_frac) as usize;
        let opts = GreedyOptions { refresh_predictions: refresh, initial_context: vec![] };
        let r = greedy_place(&p, &cands, &targets, n, mode, &opts).unwrap();
        prop_assert_eq!(r.selected.len(), n);
        let mut uniq = r.selected.clone();
        uniq.sort_unstable();
        uniq.dedup();
        prop_assert_eq!(uniq.len(), n);
        prop_assert!(r.selected.iter().all(|&i| i < xs.len()));
        prop_assert_eq!(r.selected[0], scores.best());
    }
}

#[test]
fn training_config_rejects_zero_patience() {
    assert!(TrainConfig { patience: 0, ..TrainConfig::default() }.validate().is_err());
}
