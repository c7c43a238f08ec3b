mod common;

use autocompress::fixtures::planted_network;
use autocompress::model::{build_network, synth_dataset, Dataset, Network, TrainConfig};
use autocompress::sa::{
    accept_move, anneal, fast_evaluate, init_action, perturb, perturb_raw, sa_run, Action, AnnealProblem, SaConfig,
    SchemeMode, SearchContext,
};
use autocompress::schemes::{apply_mask, propagate_channels, MaskSet, Objective};
use autocompress::Result;
use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ctx<'a>(net: &'a Network, base: &'a MaskSet, eval: &'a Dataset, target: f64, scheme: SchemeMode) -> SearchContext<'a> {
    SearchContext {
        network: net,
        base,
        eval,
        target,
        objective: Objective::Params,
        scheme,
        band: (0.9, 1.1),
        delta_max: 0.3,
    }
}

fn setup() -> (Network, MaskSet, Dataset) {
    let net = build_network("convnet-s", [1, 12, 12], 4, 1).unwrap();
    let base = MaskSet::dense(&net);
    let eval = synth_dataset(2, 40, 4).unwrap();
    (net, base, eval)
}

#[test]
fn init_action_hits_target_and_ordering() {
    let (net, base, eval) = setup();
    for objective in [Objective::Params, Objective::Flops] {
        let c = SearchContext { objective, ..ctx(&net, &base, &eval, 2.0, SchemeMode::Combined) };
        for seed in 0..100 {
            let a = init_action(&c, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let r = c.realized_rate(&a).unwrap();
            assert!((1.8..=2.2).contains(&r), "seed {seed}: rate {r}");
            assert!(c.ordering_holds(&a), "seed {seed}: {a:?}");
        }
    }
}

#[test]
fn perturbations_keep_both_invariants() {
    let (net, base, eval) = setup();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for scheme in [SchemeMode::Combined, SchemeMode::FilterOnly] {
        let c = ctx(&net, &base, &eval, 2.0, scheme);
        let mut a = init_action(&c, &mut rng).unwrap();
        for trial in 0..500 {
            let t = rng.gen_range(0.01..=1.0);
            a = perturb(&c, &a, t, 1.0, &mut rng).unwrap();
            assert!(c.is_valid(&a).unwrap(), "{scheme:?} trial {trial}: {a:?}");
            if scheme == SchemeMode::FilterOnly {
                assert!(a.layers.iter().all(|l| l.split == 1.0));
            }
        }
    }
}

#[test]
fn frozen_perturbation_is_identity() {
    let (net, base, eval) = setup();
    let c = ctx(&net, &base, &eval, 2.0, SchemeMode::Combined);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = init_action(&c, &mut rng).unwrap();
    let b = perturb(&c, &a, 0.0, 1.0, &mut rng).unwrap();
    for (x, y) in a.layers.iter().zip(&b.layers) {
        assert!((x.rate - y.rate).abs() <= 1e-9 && x.split == y.split);
    }
}

proptest! {
    #[test]
    fn raw_move_is_bounded(rates in proptest::collection::vec(1.01f64..20.0, 1..9), seed in any::<u64>()) {
        let a = Action {
            layers: rates.iter().enumerate()
                .map(|(layer, &rate)| autocompress::sa::LayerAction { layer, rate, split: 0.5 }).collect(),
        };
        let b = perturb_raw(&a, 0.3, SchemeMode::Combined, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut changed = 0;
        for (x, y) in a.layers.iter().zip(&b.layers) {
            let rel = (y.rate.ln() - x.rate.ln()).abs() / x.rate.ln();
            prop_assert!(rel <= 0.3 + 1e-12);
            prop_assert!((y.split - x.split).abs() <= 0.3 + 1e-12);
            changed += (x != y) as usize;
        }
        prop_assert!(changed <= a.layers.len().div_ceil(3));
    }
}

#[test]
fn monte_carlo_acceptance_rate() {
    let p = (-1.0f64).exp();
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let hits = (0..n).filter(|_| accept_move(0.01, 1e-3, 10.0, &mut rng)).count();
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    assert!((hits as f64 / n as f64 - p).abs() <= 3.0 * sigma);
}

/// Quadratic bowl over integers; the annealer only sees energies.
struct Bowl;

impl AnnealProblem for Bowl {
    type State = i64;
    fn perturb(&self, s: &i64, t: f64, t0: f64, rng: &mut ChaCha8Rng) -> Result<i64> {
        let span = ((10.0 * t / t0).ceil() as i64).max(1);
        Ok(s + rng.gen_range(-span..=span))
    }
    fn energy(&self, s: &i64) -> Result<f64> {
        Ok(((s - 17) * (s - 17)) as f64 * 1e-3)
    }
    fn digest(&self, s: &i64) -> String {
        s.to_string()
    }
}

#[test]
fn temperature_schedule_is_geometric() {
    let cfg = SaConfig { t0: Some(3.0), t_stop_ratio: 0.01, iters_per_temp: 4, ..SaConfig::default() };
    let out = anneal(&Bowl, 0, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut last = f64::INFINITY;
    for step in &out.trace {
        assert_eq!(step.temperature, 3.0 * 0.7f64.powi(step.temperature_index as i32));
        assert!(step.temperature <= last && step.temperature > 0.03);
        last = step.temperature;
    }
    // 0.7^n > 0.01 for n <= 12.
    assert_eq!(out.trace.len(), 13 * 4);
    let best: Vec<f64> = out.trace.iter().map(|s| s.best_energy).collect();
    assert!(best.windows(2).all(|w| w[1] <= w[0]));
    assert!(out.best_energy <= out.initial_energy);
}

#[test]
fn calibrated_t0_accepts_median_uphill_move_often() {
    let cfg = SaConfig { warmup: 20, ..SaConfig::default() };
    let out = anneal(&Bowl, 40, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert!(out.t0 > 0.0 && out.t0.is_finite());
}

#[test]
fn sa_run_is_reproducible_and_valid() {
    let (train, test) = small_glyphs(4, 240, 120, 4);
    let mut net = build_network("convnet-s", train.image_shape(), 4, 1).unwrap();
    autocompress::model::train(&mut net, &train, &TrainConfig { epochs: 1, ..Default::default() }).unwrap();
    let base = MaskSet::dense(&net);
    let c = ctx(&net, &base, &test, 2.0, SchemeMode::Combined);
    let cfg = SaConfig { iters_per_temp: 3, t_stop_ratio: 0.2, warmup: 6, seed: 9, ..SaConfig::default() };
    let a = sa_run(&c, &cfg).unwrap();
    let b = sa_run(&c, &cfg).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.best, b.best);
    for e in &a.trace {
        assert!(c.is_valid(&e.action).unwrap());
    }
    let best: Vec<f64> = a.trace.iter().map(|e| e.best_accuracy).collect();
    assert!(best.windows(2).all(|w| w[1] >= w[0]));
    let again = fast_evaluate(&c, &a.best).unwrap();
    assert_eq!(again.accuracy, a.best_accuracy);
    assert!(again.params_rate >= 1.0 && again.flops_rate >= 1.0);
}

#[test]
fn planted_fixture_search_and_monotonicity() {
    let (train, test) = small_glyphs(6, 600, 400, 4);
    let cfg = TrainConfig { epochs: 3, seed: 3, ..Default::default() };
    let planted = planted_network("convnet-s", &train, &test, 0.5, 0.75, 1e-3, &cfg).unwrap();
    assert!(planted.accuracy > 0.8, "planted accuracy {}", planted.accuracy);
    let base = MaskSet::dense(&planted.network);

    // Pruning the planted filters costs nothing; keeping only them is ruinous.
    let dummy = ctx(&planted.network, &base, &test, 2.0, SchemeMode::Combined);
    let optimal = fast_evaluate(&dummy, &planted.optimal).unwrap();
    assert_eq!(optimal.accuracy, planted.accuracy);
    assert_eq!(fast_evaluate(&dummy, &Action::identity(&planted.network)).unwrap().accuracy, planted.accuracy);
    let mut salient = MaskSet::dense(&planted.network);
    for li in planted.network.prunable_layers() {
        let keep = &planted.redundant.layers[&li].filters;
        let m = salient.layers.get_mut(&li).unwrap();
        m.filters = keep.iter().map(|k| !k).collect();
    }
    propagate_channels(&planted.network, &mut salient).unwrap();
    let ruined = apply_mask(&planted.network, &salient).unwrap();
    assert!(autocompress::model::evaluate_accuracy(&ruined, &test).unwrap() < 0.6);

    // At a 2x target the search finds an action as good as the planted one.
    let c = ctx(&planted.network, &base, &test, 2.0, SchemeMode::Combined);
    let mut good = 0;
    for seed in 0..10 {
        let sa = SaConfig { seed, ..SaConfig::default() };
        let out = sa_run(&c, &sa).unwrap();
        eprintln!("seed {seed}: best {:.4} vs planted {:.4}", out.best_accuracy, optimal.accuracy);
        good += (out.best_accuracy >= optimal.accuracy - 0.01 - 1e-9) as usize;
    }
    assert!(good >= 9, "{good}/10 seeds matched the planted optimum");
}
