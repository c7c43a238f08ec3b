mod common;

use autocompress::tensor::{col2im, conv2d, gemm, im2col, ConvGeometry, Tape};
use autocompress::Tensor;
use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const FLOOR: f64 = 1e-3;
const MAX_REL: f64 = 1e-4;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gemm_matches_triple_loop(m in 1usize..7, k in 1usize..7, n in 1usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_tensor(&[m, k], &mut rng);
        let b = random_tensor(&[k, n], &mut rng);
        prop_assert!(gemm(&a, &b).unwrap().max_abs_diff(&naive_gemm(&a, &b)) < 1e-12);
    }

    #[test]
    fn gemm_is_bilinear(m in 1usize..6, k in 1usize..6, n in 1usize..6, s in -3.0f64..3.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a1 = random_tensor(&[m, k], &mut rng);
        let a2 = random_tensor(&[m, k], &mut rng);
        let b = random_tensor(&[k, n], &mut rng);
        let lhs = gemm(&a1.zip_map(&a2, |x, y| s * x + y).unwrap(), &b).unwrap();
        let rhs = gemm(&a1, &b).unwrap().zip_map(&gemm(&a2, &b).unwrap(), |x, y| s * x + y).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn conv_matches_direct_loops(
        n in 1usize..3, c in 1usize..4, cout in 1usize..4,
        k in 1usize..4, stride in 1usize..3, pad in 0usize..2, extra in 0usize..4,
        seed in any::<u64>(),
    ) {
        // Pick the spatial size so the output extent is integral.
        let hw = k + stride * extra;
        prop_assume!(hw + 2 * pad >= k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&[n, c, hw, hw], &mut rng);
        let w = random_tensor(&[cout, c, k, k], &mut rng);
        let b = random_tensor(&[cout], &mut rng);
        let fast = conv2d(&x, &w, &b, stride, pad).unwrap();
        let slow = direct_conv(&x, &w, &b, stride, pad);
        let scale = slow.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        prop_assert!(fast.max_abs_diff(&slow) / scale <= 1e-12);
    }

    /// `<im2col(x), y> == <x, col2im(y)>`.
    #[test]
    fn col2im_is_adjoint(c in 1usize..3, k in 1usize..4, extra in 0usize..3, pad in 0usize..2, seed in any::<u64>()) {
        let hw = k + extra;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&[c, hw, hw], &mut rng);
        let cols = im2col(&x, (k, k), 1, pad).unwrap();
        let y = random_tensor(cols.shape(), &mut rng);
        let back = col2im(&y, (c, hw, hw), (k, k), 1, pad).unwrap();
        let lhs: f64 = cols.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn elementwise_ops_have_exact_gradients(len in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ps = [random_tensor(&[len], &mut rng), random_tensor(&[len], &mut rng)];
        let target = random_tensor(&[len], &mut rng);
        let err = gradient_error(&ps, H, FLOOR, |t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(s, v[1])?;
            let m = t.mul(d, v[1])?;
            let r = t.relu(m);
            let sc = t.scale(r, 1.7);
            let q = t.sq_dist(v[0], target.clone(), 0.3)?;
            let sum = t.sum(sc);
            t.add(sum, q)
        });
        prop_assert!(err < MAX_REL, "relative error {err}");
    }
}

/// Direct evaluation of mean softmax cross-entropy.
fn direct_cross_entropy(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let row = &logits[i * k..(i + 1) * k];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            z.ln() - row[l]
        })
        .sum::<f64>()
        / labels.len() as f64
}

#[test]
fn cross_entropy_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let logits = random_tensor(&[3, 5], &mut rng).scale(3.0);
    let labels = [4, 0, 2];
    let mut tape = Tape::new();
    let v = tape.constant(logits.clone());
    let loss = tape.softmax_cross_entropy(v, &labels).unwrap();
    let got = tape.value(loss).data()[0];
    assert!((got - direct_cross_entropy(logits.data(), 5, &labels)).abs() < 1e-14);
}

/// Random two-conv-layer networks, including a column-compact layer.
#[test]
fn random_conv_nets_pass_finite_differences() {
    for seed in 0..12u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c, hw) = (2, rng.gen_range(1..3), 6);
        let c1 = rng.gen_range(2..4);
        let x = random_tensor(&[n, c, hw, hw], &mut rng);
        let g1 = ConvGeometry::dense(c, 3, 3, 1, 1);
        // Second conv reads a random subset of its full column layout.
        let full = c1 * 4;
        let mut cols: Vec<usize> = (0..full).filter(|_| rng.gen_bool(0.7)).collect();
        if cols.is_empty() {
            cols.push(0);
        }
        let g2 = ConvGeometry { columns: Some(cols.clone()), ..ConvGeometry::dense(c1, 2, 2, 1, 0) };
        let c2 = 2;
        let classes = 3;
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let params = vec![
            random_tensor(&[c1, c * 9], &mut rng),
            random_tensor(&[c1], &mut rng),
            random_tensor(&[c2, cols.len()], &mut rng),
            random_tensor(&[c2], &mut rng),
            random_tensor(&[classes, c2 * 2 * 2], &mut rng),
            random_tensor(&[classes], &mut rng),
        ];
        let err = gradient_error(&params, H, FLOOR, |t, v| {
            let xi = t.constant(x.clone());
            let h1 = t.conv2d(xi, v[0], v[1], &g1)?;
            let h1 = t.relu(h1);
            let h2 = t.conv2d(h1, v[2], v[3], &g2)?;
            let p = t.max_pool2d(h2, 2)?;
            let f = t.reshape(p, &[n, c2 * 2 * 2])?;
            let logits = t.linear(f, v[4], v[5])?;
            t.softmax_cross_entropy(logits, &labels)
        });
        assert!(err < MAX_REL, "seed {seed}: relative error {err}");
    }
}

#[test]
fn matmul_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ps = [random_tensor(&[3, 4], &mut rng), random_tensor(&[4, 2], &mut rng)];
    let err = gradient_error(&ps, H, FLOOR, |t, v| {
        let m = t.matmul(v[0], v[1])?;
        let sq = t.mul(m, m)?;
        Ok(t.sum(sq))
    });
    assert!(err < MAX_REL, "relative error {err}");
}

#[test]
fn dense_layer_forward_equals_tape_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_tensor(&[2, 2, 5, 5], &mut rng);
    let w = random_tensor(&[3, 2, 3, 3], &mut rng);
    let b = random_tensor(&[3], &mut rng);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x.clone()), tape.param(w.clone()), tape.param(b.clone()));
    let y = tape.conv2d(xv, wv, bv, &ConvGeometry::dense(2, 3, 3, 1, 0)).unwrap();
    let expected: Tensor = conv2d(&x, &w, &b, 1, 0).unwrap();
    assert!(tape.value(y).max_abs_diff(&expected) < 1e-12);
}
