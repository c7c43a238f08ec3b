//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node whose inputs were recorded earlier, so the node
//! order is already topological and the backward pass is one reverse sweep.

use super::ops::{col2im_acc, conv2d_batched, gemm_acc, gemm_nt_acc, gemm_tn_acc, ConvGeometry};
use super::{max_pool2d, Tensor};
use crate::error::{contract_err, shape_err, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
        n: usize,
        h: usize,
        w_in: usize,
        ho: usize,
        wo: usize,
        cols: Vec<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    Sum {
        a: Var,
    },
    SqDist {
        w: Var,
        target: Tensor,
        coef: f64,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for later differentiation. Single-threaded.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients from one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`; `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Batched convolution, `x: N x Cin x H x W`, weight `Cout x gemm_columns`
    /// (any shape of that size), bias `Cout`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: &ConvGeometry) -> Result<Var> {
        let [n, c, h, w_in] = *self.value(x).shape() else {
            return shape_err(format!("conv2d input must be N x C x H x W, got {:?}", self.value(x).shape()));
        };
        if c != geom.cin {
            return shape_err(format!("conv2d channel mismatch: geometry {} vs input {c}", geom.cin));
        }
        let cout = self.value(b).numel();
        let (out, ho, wo, cols) = conv2d_batched(
            self.value(x).data(),
            n,
            h,
            w_in,
            geom,
            self.value(w).data(),
            self.value(b).data(),
            true,
        )?;
        let value = Tensor::new(vec![n, cout, ho, wo], out)?;
        let op = Op::Conv2d {
            x,
            w,
            b,
            geom: geom.clone(),
            n,
            h,
            w_in,
            ho,
            wo,
            cols: cols.unwrap_or_default(),
        };
        Ok(self.push(value, op, &[x, w, b]))
    }

    /// Fully connected layer `x W^T + b` with `x: N x in`, `W: out x in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let ([n, din], [dout, din2]) = (xv.shape(), wv.shape()) else {
            return shape_err(format!("linear expects matrices, got {:?} and {:?}", xv.shape(), wv.shape()));
        };
        let (n, din, dout) = (*n, *din, *dout);
        if din != *din2 || bv.numel() != dout {
            return shape_err(format!(
                "linear shape mismatch: x {:?}, W {:?}, b {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            ));
        }
        let mut out = Vec::with_capacity(n * dout);
        for _ in 0..n {
            out.extend_from_slice(bv.data());
        }
        gemm_nt_acc(n, din, dout, xv.data(), wv.data(), &mut out);
        let value = Tensor::new(vec![n, dout], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, &[x, w, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = super::gemm(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu { x }, &[x])
    }

    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let (value, argmax) = max_pool2d(self.value(x), size)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(value, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push(value, Op::Scale { a, c }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum { a }, &[a])
    }

    /// `coef / 2 * ||w - target||_F^2` with a constant target.
    pub fn sq_dist(&mut self, w: Var, target: Tensor, coef: f64) -> Result<Var> {
        if self.value(w).shape() != target.shape() {
            return shape_err(format!(
                "sq_dist shapes differ: {:?} vs {:?}",
                self.value(w).shape(),
                target.shape()
            ));
        }
        let d: f64 = self
            .value(w)
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let value = Tensor::scalar(0.5 * coef * d);
        Ok(self.push(value, Op::SqDist { w, target, coef }, &[w]))
    }

    /// Mean softmax cross-entropy of `logits: N x K` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let [n, k] = *lv.shape() else {
            return shape_err(format!("logits must be N x K, got {:?}", lv.shape()));
        };
        if labels.len() != n {
            return contract_err(format!("{} labels for {n} rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return contract_err(format!("label {bad} out of range for {k} classes"));
        }
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &lv.data()[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - max).exp();
                z += *p;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p /= z;
            }
            loss += z.ln() - (row[label] - max);
        }
        let value = Tensor::scalar(loss / n as f64);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            probs,
            labels: labels.to_vec(),
        };
        Ok(self.push(value, op, &[logits]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return contract_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                n,
                h,
                w_in,
                ho,
                wo,
                cols,
            } => {
                let k = geom.gemm_columns();
                let hw = ho * wo;
                let cout = self.value(*b).numel();
                let wv = self.value(*w).data();
                let mut dw = vec![0.0; cout * k];
                let mut db = vec![0.0; cout];
                let want_x = self.wants(*x);
                let in_stride = geom.cin * h * w_in;
                let mut dx = if want_x { vec![0.0; n * in_stride] } else { Vec::new() };
                let mut dcols = vec![0.0; k * hw];
                for img in 0..*n {
                    let dy = &gd[img * cout * hw..(img + 1) * cout * hw];
                    let c = &cols[img * k * hw..(img + 1) * k * hw];
                    gemm_nt_acc(cout, hw, k, dy, c, &mut dw);
                    for (oc, acc) in db.iter_mut().enumerate() {
                        *acc += dy[oc * hw..(oc + 1) * hw].iter().sum::<f64>();
                    }
                    if want_x {
                        dcols.fill(0.0);
                        gemm_tn_acc(k, cout, hw, wv, dy, &mut dcols);
                        col2im_acc(
                            &dcols,
                            *h,
                            *w_in,
                            geom,
                            *ho,
                            *wo,
                            &mut dx[img * in_stride..(img + 1) * in_stride],
                        );
                    }
                }
                accumulate(grads, *w, self.value(*w).shape(), dw)?;
                accumulate(grads, *b, self.value(*b).shape(), db)?;
                if want_x {
                    accumulate(grads, *x, self.value(*x).shape(), dx)?;
                }
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let (n, din) = (xv.shape()[0], xv.shape()[1]);
                let dout = self.value(*b).numel();
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * din];
                    gemm_acc(n, dout, din, gd, self.value(*w).data(), &mut dx);
                    accumulate(grads, *x, xv.shape(), dx)?;
                }
                let mut dw = vec![0.0; dout * din];
                gemm_tn_acc(dout, n, din, gd, xv.data(), &mut dw);
                accumulate(grads, *w, self.value(*w).shape(), dw)?;
                let mut db = vec![0.0; dout];
                for row in gd.chunks(dout) {
                    for (acc, v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                accumulate(grads, *b, self.value(*b).shape(), db)?;
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt_acc(m, n, k, gd, bv.data(), &mut da);
                    accumulate(grads, *a, av.shape(), da)?;
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn_acc(k, m, n, av.data(), gd, &mut db);
                    accumulate(grads, *b, bv.shape(), db)?;
                }
            }
            Op::Relu { x } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
                    .collect();
                accumulate(grads, *x, self.value(*x).shape(), dx)?;
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (&src, &d) in argmax.iter().zip(gd) {
                    dx[src] += d;
                }
                accumulate(grads, *x, self.value(*x).shape(), dx)?;
            }
            Op::Reshape { x } => {
                accumulate(grads, *x, self.value(*x).shape(), gd.to_vec())?;
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, g.shape(), gd.to_vec())?;
                accumulate(grads, *b, g.shape(), gd.to_vec())?;
            }
            Op::Sub { a, b } => {
                accumulate(grads, *a, g.shape(), gd.to_vec())?;
                accumulate(grads, *b, g.shape(), gd.iter().map(|v| -v).collect())?;
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let da = gd.iter().zip(bv).map(|(d, y)| d * y).collect();
                let db = gd.iter().zip(av).map(|(d, x)| d * x).collect();
                accumulate(grads, *a, g.shape(), da)?;
                accumulate(grads, *b, g.shape(), db)?;
            }
            Op::Scale { a, c } => {
                accumulate(grads, *a, g.shape(), gd.iter().map(|v| v * c).collect())?;
            }
            Op::Sum { a } => {
                let shape = self.value(*a).shape();
                accumulate(grads, *a, shape, vec![gd[0]; self.value(*a).numel()])?;
            }
            Op::SqDist { w, target, coef } => {
                let scale = gd[0] * coef;
                let dw = self
                    .value(*w)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| scale * (a - b))
                    .collect();
                accumulate(grads, *w, target.shape(), dw)?;
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let shape = self.value(*logits).shape();
                let (n, k) = (shape[0], shape[1]);
                let scale = gd[0] / n as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dl[i * k + l] -= scale;
                }
                accumulate(grads, *logits, shape, dl)?;
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], data: Vec<f64>) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(&data) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape.to_vec(), data)?),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let loss = tape.sum(w);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(w), Tensor::filled(&[2, 3], 1.0));
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut tape = Tape::new();
        let data = Tensor::new(vec![4], vec![0.3, -1.0, 2.5, 0.0]).unwrap();
        let w = tape.param(data.clone());
        let loss = tape.sq_dist(w, Tensor::zeros(&[4]), 1.0).unwrap();
        assert!((tape.value(loss).data()[0] - 0.5 * data.sq_norm()).abs() < 1e-15);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(w), data);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut tape = Tape::new();
        let used = tape.param(Tensor::filled(&[3], 2.0));
        let unused = tape.param(Tensor::filled(&[2, 2], 7.0));
        let loss = tape.sum(used);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(unused), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::filled(&[3], 2.0));
        let y = tape.relu(w);
        assert!(matches!(tape.backward(y), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let mut tape = Tape::new();
        let logits = tape.param(Tensor::filled(&[3, 4], 0.7));
        let loss = tape.softmax_cross_entropy(logits, &[0, 3, 2]).unwrap();
        assert!((tape.value(loss).data()[0] - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn growing_margin_drives_loss_to_zero() {
        let mut prev = f64::INFINITY;
        for margin in [0.0, 1.0, 5.0, 20.0, 100.0, 800.0] {
            let mut tape = Tape::new();
            let logits = tape.constant(Tensor::new(vec![1, 3], vec![margin, 0.0, 0.0]).unwrap());
            let loss = tape.softmax_cross_entropy(logits, &[0]).unwrap();
            let v = tape.value(loss).data()[0];
            assert!(v.is_finite() && v <= prev);
            prev = v;
        }
        assert!(prev < 1e-300);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let mut tape = Tape::new();
        let logits = tape.param(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            tape.softmax_cross_entropy(logits, &[0, 3]),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2], vec![3.0, -1.0]).unwrap());
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[6.0, -2.0]);
    }
}
