mod common;

use autocompress::model::{
    build_network, evaluate_accuracy, synth_dataset, train_with, ConvLayer, FcLayer, Layer, Network, TrainConfig,
};
use autocompress::purify::{
    propagate_removal, purify, search_thresholds, shrink_network, PurifyConfig, ThresholdSearchConfig, Thresholds,
};
use autocompress::schemes::{apply_mask, count_flops, count_params, propagate_channels, MaskSet};
use autocompress::tensor::ConvGeometry;
use autocompress::Tensor;
use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LOGIT_TOL: f64 = 1e-9;

/// Network with nonzero biases everywhere, so the zero-bias step matters.
fn biased(arch: &str, seed: u64) -> Network {
    let mut net = build_network(arch, [1, 12, 12], 5, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    for p in net.weight_layers() {
        let (_, b) = net.layers[p].params_mut().unwrap();
        b.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
    }
    net
}

fn random_removal(net: &Network, seed: u64) -> MaskSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masks = MaskSet::dense(net);
    for li in net.prunable_layers() {
        let m = masks.layers.get_mut(&li).unwrap();
        let keep = rng.gen_range(0.3..1.0);
        m.filters.iter_mut().for_each(|f| *f = rng.gen_bool(keep));
        let j = rng.gen_range(0..m.filters.len());
        m.filters[j] = true;
        m.columns.iter_mut().for_each(|c| *c = rng.gen_bool(0.85));
        let j = rng.gen_range(0..m.columns.len());
        m.columns[j] = true;
    }
    masks
}

/// masked == propagated == shrunk, for the given raw (unpropagated) masks.
fn check_chain(net: &Network, raw: &MaskSet, seed: u64) -> Result<(), TestCaseError> {
    let mut masked = net.clone();
    raw.enforce(&mut masked).unwrap();
    let mut prop = raw.clone();
    propagate_channels(net, &mut prop).unwrap();
    let propagated = apply_mask(&masked, &prop).unwrap();
    let shrunk = shrink_network(&masked, &prop).unwrap();
    let x = random_inputs(net, 50, seed);
    prop_assert!(max_logit_diff(&masked, &propagated, &x) <= LOGIT_TOL);
    prop_assert!(max_logit_diff(&masked, &shrunk, &x) <= LOGIT_TOL);
    let p = count_params(net, Some(&prop)).unwrap();
    let f = count_flops(net, Some(&prop)).unwrap();
    prop_assert_eq!(count_params(&shrunk, None).unwrap(), p);
    prop_assert_eq!(count_flops(&shrunk, None).unwrap(), f);
    prop_assert!(p.total <= count_params(net, None).unwrap().total);
    prop_assert!(f.total <= count_flops(net, None).unwrap().total);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn equivalence_chain_convnet(seed in any::<u64>()) {
        let net = biased("convnet-s", seed);
        check_chain(&net, &random_removal(&net, seed), seed)?;
    }

    #[test]
    fn purification_preserves_outputs_and_never_grows(seed in any::<u64>(), tf in 0.0f64..1.5, tc in 0.0f64..1.0) {
        let net = biased("convnet-s", seed);
        let base = random_removal(&net, seed);
        let mut start = base.clone();
        propagate_channels(&net, &mut start).unwrap();
        let mut pruned = net.clone();
        start.enforce(&mut pruned).unwrap();
        let cfg = PurifyConfig {
            thresholds: net.prunable_layers().into_iter().map(|li| (li, Thresholds { column: tc, filter: tf })).collect(),
        };
        let (purified, masks) = purify(&pruned, &start, &cfg).unwrap();
        for li in net.prunable_layers() {
            prop_assert!(masks.layers[&li].kept_filters() >= 1 && masks.layers[&li].kept_columns() >= 1);
        }
        prop_assert!(count_params(&net, Some(&masks)).unwrap().total <= count_params(&net, Some(&start)).unwrap().total);
        prop_assert!(count_flops(&net, Some(&masks)).unwrap().total <= count_flops(&net, Some(&start)).unwrap().total);
        let shrunk = shrink_network(&purified, &masks).unwrap();
        let x = random_inputs(&net, 50, seed ^ 2);
        prop_assert!(max_logit_diff(&purified, &shrunk, &x) <= LOGIT_TOL);
    }
}

#[test]
fn equivalence_chain_vgg() {
    for seed in 0..4 {
        let net = biased("vgg-mini", seed);
        check_chain(&net, &random_removal(&net, seed), seed).unwrap();
    }
}

#[test]
fn removing_a_zeroed_filter_keeps_logits() {
    let mut net = biased("convnet-s", 3);
    let first = net.prunable_layers()[0];
    let (w, b) = net.layers[first].params_mut().unwrap();
    w.data_mut()[2 * 9..3 * 9].iter_mut().for_each(|v| *v = 0.0);
    b.data_mut()[2] = 0.0;
    let cols = propagate_removal(&net, first, &[2]).unwrap();
    assert_eq!(cols, (18..27).collect::<Vec<_>>());
    let mut masks = MaskSet::dense(&net);
    masks.layers.get_mut(&first).unwrap().filters[2] = false;
    propagate_channels(&net, &mut masks).unwrap();
    let shrunk = shrink_network(&net, &masks).unwrap();
    let x = random_inputs(&net, 20, 4);
    assert!(max_logit_diff(&net, &shrunk, &x) <= LOGIT_TOL);
}

#[test]
fn flatten_boundary_maps_blocks() {
    let net = biased("convnet-s", 5);
    let last = *net.prunable_layers().last().unwrap();
    let fc = net.next_weight_layer(last).unwrap();
    let (_, in_dim) = net.layers[fc].gemm_dims().unwrap();
    let block = in_dim / 32;
    assert_eq!(block, 9);
    let mut zeroed = net.clone();
    zeroed.layers[last].params_mut().unwrap().1.data_mut()[5] = 0.0;
    let cols = propagate_removal(&zeroed, last, &[5]).unwrap();
    assert_eq!(cols, (5 * block..6 * block).collect::<Vec<_>>());
}

/// One conv layer with three filters feeding a classifier.
fn three_filter_net(classes: usize, seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv = ConvLayer {
        geom: ConvGeometry::dense(1, 3, 3, 1, 1),
        weight: random_tensor(&[3, 1, 3, 3], &mut rng),
        bias: Tensor::zeros(&[3]),
    };
    let fc = FcLayer {
        weight: random_tensor(&[classes, 3 * 36], &mut rng).scale(0.1),
        bias: Tensor::zeros(&[classes]),
    };
    let net = Network {
        arch: "three-filter".into(),
        input_shape: [1, 12, 12],
        classes,
        layers: vec![Layer::Conv(conv), Layer::Relu, Layer::MaxPool { size: 2 }, Layer::Flatten, Layer::Fc(fc)],
    };
    net.validate().unwrap();
    net
}

#[test]
fn search_removes_planted_tiny_filters() {
    let data = synth_dataset(8, 900, 3).unwrap();
    let (train, test) = data.split_test(300).unwrap();
    let mut net = three_filter_net(3, 1);
    // Train with only filter 2 alive, then plant two tiny filters.
    let mut only_last = MaskSet::dense(&net);
    only_last.layers.get_mut(&0).unwrap().filters = vec![false, false, true];
    train_with(&mut net, &train, &TrainConfig { epochs: 6, lr: 3e-3, seed: 2, ..Default::default() }, None, Some(&only_last)).unwrap();
    let (w, _) = net.layers[0].params_mut().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for r in 0..2 {
        let raw: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        w.data_mut()[r * 9..(r + 1) * 9].iter_mut().zip(&raw).for_each(|(d, v)| *d = v * 1e-6 / n);
    }
    // Rescale filter 2 to norm 5; relu and max pooling commute with the
    // positive scale, which the classifier columns undo.
    let n2 = w.data()[18..27].iter().map(|v| v * v).sum::<f64>().sqrt();
    let alpha = 5.0 / n2;
    w.data_mut()[18..27].iter_mut().for_each(|v| *v *= alpha);
    net.layers[0].params_mut().unwrap().1.data_mut()[2] *= alpha;
    let (fw, _) = net.layers[4].params_mut().unwrap();
    let in_dim = fw.shape()[1];
    for row in fw.data_mut().chunks_mut(in_dim) {
        row[72..108].iter_mut().for_each(|v| *v /= alpha);
    }
    let before = evaluate_accuracy(&net, &test).unwrap();
    assert!(before > 0.9, "fixture accuracy {before}");

    let dense = MaskSet::dense(&net);
    let cfg = ThresholdSearchConfig::default();
    let found = search_thresholds(&net, &dense, &test, &cfg).unwrap();
    let (purified, masks) = purify(&net, &dense, &found).unwrap();
    assert_eq!(masks.layers[&0].filters, vec![false, false, true], "thresholds {found:?}");
    let after = evaluate_accuracy(&shrink_network(&purified, &masks).unwrap(), &test).unwrap();
    assert!(after >= before - cfg.epsilon, "{before} -> {after}");
}
