//! Oracles and fixtures shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use autocompress::model::{Dataset, Network};
use autocompress::tensor::{Tape, Var};
use autocompress::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn naive_gemm(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

/// Textbook convolution: `input N x C x H x W`, `weight Cout x C x kh x kw`.
pub fn direct_conv(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [n, c, h, w] = *input.shape() else { panic!("rank 4 input") };
    let [cout, _, kh, kw] = *weight.shape() else { panic!("rank 4 weight") };
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let x = |b: usize, ch: usize, y: isize, xx: isize| -> f64 {
        if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
            0.0
        } else {
            input.data()[((b * c + ch) * h + y as usize) * w + xx as usize]
        }
    };
    let mut out = vec![0.0; n * cout * ho * wo];
    for b in 0..n {
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = bias.data()[o];
                    for ch in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * stride + ky) as isize - pad as isize;
                                let xx = (ox * stride + kx) as isize - pad as isize;
                                s += weight.data()[((o * c + ch) * kh + ky) * kw + kx] * x(b, ch, y, xx);
                            }
                        }
                    }
                    out[((b * cout + o) * ho + oy) * wo + ox] = s;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, ho, wo], out).unwrap()
}

/// Largest relative error between tape gradients and central finite
/// differences of the scalar built by `f` from the given parameters.
/// Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_error<F>(params: &[Tensor], h: f64, floor: f64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (pi, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        for i in 0..params[pi].numel() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[i] += h;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    worst
}

/// Squared distance of `w` (rows x cols) to itself restricted to the
/// given row and column supports.
pub fn restricted_loss(w: &Tensor, rows: &[bool], cols: &[bool]) -> f64 {
    let nc = cols.len();
    w.data()
        .iter()
        .enumerate()
        .filter(|(i, _)| !(rows[i / nc] && cols[i % nc]))
        .map(|(_, v)| v * v)
        .sum()
}

/// All `k`-subsets of `0..n` as boolean masks.
pub fn subsets(n: usize, k: usize) -> Vec<Vec<bool>> {
    (0u32..1 << n)
        .filter(|m| m.count_ones() as usize == k)
        .map(|m| (0..n).map(|i| m >> i & 1 == 1).collect())
        .collect()
}

/// Exhaustive minimizer of `||W - Z||^2` over supports keeping exactly
/// `k` rows (all columns) or `k` columns (all rows).
pub fn best_support(w: &Tensor, k: usize, by_rows: bool) -> Vec<bool> {
    let rows = w.shape()[0];
    let cols = w.numel() / rows;
    let n = if by_rows { rows } else { cols };
    subsets(n, k)
        .into_iter()
        .map(|s| {
            let loss = if by_rows {
                restricted_loss(w, &s, &vec![true; cols])
            } else {
                restricted_loss(w, &vec![true; rows], &s)
            };
            (loss, s)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .unwrap()
        .1
}

/// Nonzero rows / columns of a `rows x cols` matrix.
pub fn support(z: &Tensor) -> (Vec<bool>, Vec<bool>) {
    let rows = z.shape()[0];
    let cols = z.numel() / rows;
    let r = (0..rows).map(|i| (0..cols).any(|j| z.data()[i * cols + j] != 0.0)).collect();
    let c = (0..cols).map(|j| (0..rows).any(|i| z.data()[i * cols + j] != 0.0)).collect();
    (r, c)
}

pub fn max_logit_diff(a: &Network, b: &Network, x: &Tensor) -> f64 {
    a.forward(x).unwrap().max_abs_diff(&b.forward(x).unwrap())
}

/// Uniform random images shaped like the network input.
pub fn random_inputs(net: &Network, n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = net.input_shape;
    let len = n * c * h * w;
    Tensor::new(vec![n, c, h, w], (0..len).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

pub fn small_glyphs(seed: u64, n_train: usize, n_test: usize, classes: usize) -> (Dataset, Dataset) {
    let spec = autocompress::fixtures::GlyphSpec {
        size: 12,
        wobble: 0.6,
        shift: 1.0,
        noise: 0.1,
        clutter: 0.2,
        ..Default::default()
    };
    autocompress::fixtures::glyph_splits(seed, n_train, n_test, classes, &spec).unwrap()
}
