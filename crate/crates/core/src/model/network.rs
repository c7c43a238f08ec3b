use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{contract_err, shape_err, Error, Result};
use crate::tensor::ops::{conv2d_batched, gemm_nt_acc};
use crate::tensor::{ConvGeometry, Tape, Tensor, Var};

/// Convolution stored in GEMM form.
///
/// A dense layer's weight is `cout x cin x kh x kw`; a column-compacted one
/// (`geom.columns` set) stores `cout x columns.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub geom: ConvGeometry,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    pub fn cout(&self) -> usize {
        self.bias.numel()
    }
}

/// Fully connected layer, `weight: out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct FcLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl FcLayer {
    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    Fc(FcLayer),
    Relu,
    MaxPool { size: usize },
    Flatten,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Fc(_) => "fc",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::Flatten => "flatten",
        }
    }

    /// `(weight, bias)` for parameterized layers.
    pub fn params(&self) -> Option<(&Tensor, &Tensor)> {
        match self {
            Layer::Conv(c) => Some((&c.weight, &c.bias)),
            Layer::Fc(f) => Some((&f.weight, &f.bias)),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut Tensor, &mut Tensor)> {
        match self {
            Layer::Conv(c) => Some((&mut c.weight, &mut c.bias)),
            Layer::Fc(f) => Some((&mut f.weight, &mut f.bias)),
            _ => None,
        }
    }

    /// Number of GEMM rows (filters / output units) and columns.
    pub fn gemm_dims(&self) -> Option<(usize, usize)> {
        match self {
            Layer::Conv(c) => Some((c.cout(), c.geom.gemm_columns())),
            Layer::Fc(f) => Some((f.out_dim(), f.in_dim())),
            _ => None,
        }
    }
}

/// A plain feed-forward CNN: conv/relu/maxpool blocks, flatten, fc layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub arch: String,
    pub input_shape: [usize; 3],
    pub classes: usize,
    pub layers: Vec<Layer>,
}

/// Parameter handles recorded on a tape by [`Network::forward_tape`], one
/// `(weight, bias)` pair per parameterized layer in layer order.
#[derive(Debug, Clone)]
pub struct TapeParams {
    pub layer_index: Vec<usize>,
    pub vars: Vec<(Var, Var)>,
}

pub const KNOWN_ARCHS: &[&str] = &["convnet-s", "vgg-mini"];

/// Builds a named architecture with He-normal weights and zero biases.
pub fn build_network(arch: &str, input_shape: [usize; 3], classes: usize, seed: u64) -> Result<Network> {
    use LayerPlan::*;
    let plan: Vec<LayerPlan> = match arch {
        "convnet-s" => vec![
            Conv(16), Relu, Pool, Conv(32), Relu, Pool, Conv(32), Relu, Flatten, Fc(64), Relu,
        ],
        "vgg-mini" => vec![
            Conv(16), Relu, Conv(16), Relu, Pool, Conv(32), Relu, Conv(32), Relu, Pool, Conv(64),
            Relu, Conv(64), Relu, Flatten, Fc(64), Relu,
        ],
        other => {
            return Err(Error::Config(format!(
                "unknown architecture {other:?} (known: {})",
                KNOWN_ARCHS.join(", ")
            )))
        }
    };
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [mut c, mut h, mut w] = input_shape;
    let mut flat = None;
    let mut layers = Vec::new();
    for step in plan.iter().copied().chain(std::iter::once(Fc(classes))) {
        match step {
            Conv(cout) => {
                let geom = ConvGeometry::dense(c, 3, 3, 1, 1);
                let (ho, wo) = geom.output_hw(h, w)?;
                layers.push(Layer::Conv(ConvLayer {
                    weight: he_normal(&[cout, c, 3, 3], c * 9, &mut rng),
                    bias: Tensor::zeros(&[cout]),
                    geom,
                }));
                (c, h, w) = (cout, ho, wo);
            }
            Relu => layers.push(Layer::Relu),
            Pool => {
                if h < 2 || w < 2 {
                    return shape_err(format!("input {input_shape:?} too small for {arch}"));
                }
                layers.push(Layer::MaxPool { size: 2 });
                (h, w) = (h / 2, w / 2);
            }
            Flatten => {
                layers.push(Layer::Flatten);
                flat = Some(c * h * w);
            }
            Fc(out) => {
                let fan_in = flat.expect("flatten precedes fc");
                layers.push(Layer::Fc(FcLayer {
                    weight: he_normal(&[out, fan_in], fan_in, &mut rng),
                    bias: Tensor::zeros(&[out]),
                }));
                flat = Some(out);
            }
        }
    }
    let net = Network {
        arch: arch.to_string(),
        input_shape,
        classes,
        layers,
    };
    net.validate()?;
    Ok(net)
}

#[derive(Debug, Clone, Copy)]
enum LayerPlan {
    Conv(usize),
    Relu,
    Pool,
    Flatten,
    Fc(usize),
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let numel = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..numel).map(|_| dist.sample(rng)).collect())
        .expect("numel matches shape")
}

/// Per-sample activation shape flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ActShape {
    pub fn numel(self) -> usize {
        match self {
            ActShape::Map { c, h, w } => c * h * w,
            ActShape::Flat(n) => n,
        }
    }
}

impl Network {
    /// Activation shape entering each layer, plus the final output shape.
    pub fn shapes(&self) -> Result<Vec<ActShape>> {
        let [c, h, w] = self.input_shape;
        let mut cur = ActShape::Map { c, h, w };
        let mut out = vec![cur];
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match (layer, cur) {
                (Layer::Conv(conv), ActShape::Map { c, h, w }) => {
                    if c != conv.geom.cin {
                        return shape_err(format!("layer {i}: conv expects {} channels, gets {c}", conv.geom.cin));
                    }
                    if conv.weight.numel() != conv.cout() * conv.geom.gemm_columns() {
                        return shape_err(format!("layer {i}: conv weight size does not match geometry"));
                    }
                    let (ho, wo) = conv.geom.output_hw(h, w)?;
                    ActShape::Map { c: conv.cout(), h: ho, w: wo }
                }
                (Layer::Relu, s) => s,
                (Layer::MaxPool { size }, ActShape::Map { c, h, w }) => {
                    if *size == 0 || *size > h || *size > w {
                        return shape_err(format!("layer {i}: pool {size} on {h}x{w}"));
                    }
                    ActShape::Map { c, h: h / size, w: w / size }
                }
                (Layer::Flatten, s) => ActShape::Flat(s.numel()),
                (Layer::Fc(fc), ActShape::Flat(n)) => {
                    if fc.in_dim() != n || fc.bias.numel() != fc.out_dim() {
                        return shape_err(format!("layer {i}: fc expects {} inputs, gets {n}", fc.in_dim()));
                    }
                    ActShape::Flat(fc.out_dim())
                }
                (layer, s) => {
                    return shape_err(format!("layer {i}: {} cannot consume {s:?}", layer.kind()))
                }
            };
            out.push(cur);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = self.shapes()?;
        if !self.layers.iter().any(|l| matches!(l, Layer::Conv(_))) {
            return contract_err("network has no conv layer");
        }
        match self.layers.last() {
            Some(Layer::Fc(fc)) if fc.out_dim() == self.classes => {}
            _ => return contract_err("last layer must be fc with one output per class"),
        }
        debug_assert_eq!(shapes.last(), Some(&ActShape::Flat(self.classes)));
        Ok(())
    }

    /// Indices of conv and fc layers.
    pub fn weight_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.params().is_some())
            .map(|(i, _)| i)
            .collect()
    }

    /// Layers subject to pruning search: every conv layer.
    pub fn prunable_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Conv(_)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn classifier_index(&self) -> usize {
        self.layers.len() - 1
    }

    /// Next parameterized layer after `i` (the consumer of its output channels).
    pub fn next_weight_layer(&self, i: usize) -> Option<usize> {
        (i + 1..self.layers.len()).find(|&j| self.layers[j].params().is_some())
    }

    pub fn conv(&self, i: usize) -> Option<&ConvLayer> {
        match &self.layers[i] {
            Layer::Conv(c) => Some(c),
            _ => None,
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .filter_map(Layer::params)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .filter_map(Layer::params_mut)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Same structure, fresh He-normal weights and zero biases.
    pub fn reinitialized(&self, seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        for layer in &mut out.layers {
            if let Some((w, b)) = layer.params_mut() {
                let fan_in = w.numel() / w.shape()[0];
                *w = he_normal(w.shape(), fan_in, &mut rng);
                *b = Tensor::zeros(b.shape());
            }
        }
        out
    }

    /// Inference forward pass on `N x C x H x W` input; returns `N x classes` logits.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = *input.shape() else {
            return shape_err(format!("forward expects N x C x H x W, got {:?}", input.shape()));
        };
        if [c, h, w] != self.input_shape {
            return shape_err(format!(
                "input {:?} does not match network input {:?}",
                &input.shape()[1..],
                self.input_shape
            ));
        }
        let mut x = input.data().to_vec();
        let mut cur = ActShape::Map { c, h, w };
        for layer in &self.layers {
            match (layer, cur) {
                (Layer::Conv(conv), ActShape::Map { h, w, .. }) => {
                    let (out, ho, wo, _) =
                        conv2d_batched(&x, n, h, w, &conv.geom, conv.weight.data(), conv.bias.data(), false)?;
                    x = out;
                    cur = ActShape::Map { c: conv.cout(), h: ho, w: wo };
                }
                (Layer::Relu, _) => x.iter_mut().for_each(|v| *v = v.max(0.0)),
                (Layer::MaxPool { size }, ActShape::Map { c, h, w }) => {
                    let t = Tensor::new(vec![n, c, h, w], x)?;
                    let (pooled, _) = crate::tensor::max_pool2d(&t, *size)?;
                    x = pooled.into_data();
                    cur = ActShape::Map { c, h: h / size, w: w / size };
                }
                (Layer::Flatten, s) => cur = ActShape::Flat(s.numel()),
                (Layer::Fc(fc), ActShape::Flat(din)) => {
                    let dout = fc.out_dim();
                    let mut out = Vec::with_capacity(n * dout);
                    for _ in 0..n {
                        out.extend_from_slice(fc.bias.data());
                    }
                    gemm_nt_acc(n, din, dout, &x, fc.weight.data(), &mut out);
                    x = out;
                    cur = ActShape::Flat(dout);
                }
                (layer, s) => return shape_err(format!("{} cannot consume {s:?}", layer.kind())),
            }
        }
        Tensor::new(vec![n, cur.numel()], x)
    }

    /// Records the forward pass on `tape`, registering every weight and bias
    /// as a trainable leaf.
    pub fn forward_tape(&self, tape: &mut Tape, input: Var) -> Result<(Var, TapeParams)> {
        let mut x = input;
        let mut params = TapeParams {
            layer_index: Vec::new(),
            vars: Vec::new(),
        };
        for (i, layer) in self.layers.iter().enumerate() {
            x = match layer {
                Layer::Conv(conv) => {
                    let w = tape.param(conv.weight.clone());
                    let b = tape.param(conv.bias.clone());
                    params.layer_index.push(i);
                    params.vars.push((w, b));
                    tape.conv2d(x, w, b, &conv.geom)?
                }
                Layer::Fc(fc) => {
                    let w = tape.param(fc.weight.clone());
                    let b = tape.param(fc.bias.clone());
                    params.layer_index.push(i);
                    params.vars.push((w, b));
                    tape.linear(x, w, b)?
                }
                Layer::Relu => tape.relu(x),
                Layer::MaxPool { size } => tape.max_pool2d(x, *size)?,
                Layer::Flatten => {
                    let shape = tape.value(x).shape();
                    let n = shape[0];
                    let rest = shape[1..].iter().product::<usize>();
                    tape.reshape(x, &[n, rest])?
                }
            };
        }
        Ok((x, params))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let a = build_network("convnet-s", [1, 28, 28], 10, 7).unwrap();
        let b = build_network("convnet-s", [1, 28, 28], 10, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seed_differs() {
        let a = build_network("convnet-s", [1, 28, 28], 10, 7).unwrap();
        let b = build_network("convnet-s", [1, 28, 28], 10, 8).unwrap();
        assert_ne!(a.params()[0], b.params()[0]);
    }

    #[test]
    fn convnet_s_conv_param_count() {
        let net = build_network("convnet-s", [1, 28, 28], 10, 0).unwrap();
        let conv: usize = net
            .prunable_layers()
            .iter()
            .map(|&i| net.conv(i).unwrap().weight.numel())
            .sum();
        assert_eq!(conv, 16 * 9 + 32 * 16 * 9 + 32 * 32 * 9);
        assert_eq!(conv, 13_968);
    }

    #[test]
    fn unknown_arch_is_config_error() {
        assert!(matches!(
            build_network("resnet-50", [1, 28, 28], 10, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn vgg_mini_has_six_convs() {
        let net = build_network("vgg-mini", [3, 32, 32], 10, 1).unwrap();
        assert_eq!(net.prunable_layers().len(), 6);
        let logits = net.forward(&Tensor::zeros(&[2, 3, 32, 32])).unwrap();
        assert_eq!(logits.shape(), &[2, 10]);
    }

    #[test]
    fn tape_forward_matches_inference() {
        let net = build_network("convnet-s", [1, 12, 12], 3, 3).unwrap();
        let x = Tensor::new(vec![2, 1, 12, 12], (0..288).map(|v| (v as f64 * 0.1).sin()).collect()).unwrap();
        let direct = net.forward(&x).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let (logits, params) = net.forward_tape(&mut tape, xv).unwrap();
        assert_eq!(params.vars.len(), 5);
        assert!(tape.value(logits).max_abs_diff(&direct) < 1e-12);
    }
}
