//! Define-by-run reverse-mode differentiation.
//!
//! Every forward pass records onto a fresh [`Tape`]. Nodes are appended in
//! execution order, so inputs always precede their consumers and the backward
//! sweep is a single reverse scan.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::layers::{self, BnCache, Conv2dSpec, ConvAlgo};
use crate::tensor::{Scalar, Tensor};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    tape: u32,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Elementwise(ElementwiseOp, Var, Var),
    Scale(Var, T),
    Sum(Var),
    Relu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: BnCache<T>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GlobalAvgPool(Var),
    Upsample2x(Var),
    AvgPool2x(Var),
    Align(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch normalization.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Elements per channel that produced the statistics.
    pub count: usize,
}

#[derive(Debug)]
pub struct Tape<T: Scalar> {
    id: u32,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<&Node<T>> {
        if v.tape != self.id {
            return Err(Error::UnknownVar(v.index));
        }
        self.nodes.get(v.index).ok_or(Error::UnknownVar(v.index))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        self.check(v).map(|n| &n.value)
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        self.check(v).map(|n| n.requires_grad)
    }

    /// A differentiable leaf (parameter or probed input).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Records an op; nodes whose inputs are all constant drop their backward
    /// data and become constants themselves.
    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.index].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.push_raw(value, op, requires_grad)
    }

    pub fn elementwise(&mut self, kind: ElementwiseOp, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a)?, self.value(b)?);
        let out = match kind {
            ElementwiseOp::Add => va.zip_with(vb, "add", |x, y| x + y)?,
            ElementwiseOp::Sub => va.zip_with(vb, "sub", |x, y| x - y)?,
            ElementwiseOp::Mul => va.zip_with(vb, "mul", |x, y| x * y)?,
        };
        Ok(self.push(out, Op::Elementwise(kind, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Mul, a, b)
    }

    /// Scalar-times-tensor.
    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a)?.scale(s);
        Ok(self.push(out, Op::Scale(a, s), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a)?.sum());
        Ok(self.push(out, Op::Sum(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = layers::relu(self.value(a)?);
        Ok(self.push(out, Op::Relu(a), &[a]))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let bias = b.map(|b| self.value(b)).transpose()?;
        let out = layers::conv2d(self.value(x)?, self.value(w)?, bias, &spec)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, spec }, &inputs))
    }

    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let xv = self.value(x)?;
        let (n, _, h, w) = xv.dims4()?;
        let (out, cache) =
            layers::batchnorm_train(xv, self.value(gamma)?, self.value(beta)?, eps)?;
        let stats = BatchStats {
            mean: cache.batch_mean.clone(),
            var: cache.batch_var.clone(),
            count: n * h * w,
        };
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            cache,
        };
        Ok((self.push(out, op, &[x, gamma, beta]), stats))
    }

    pub fn batchnorm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: T,
    ) -> Result<Var> {
        let (out, cache) = layers::batchnorm_infer(
            self.value(x)?,
            self.value(gamma)?,
            self.value(beta)?,
            running_mean,
            running_var,
            eps,
        )?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            cache,
        };
        Ok(self.push(out, op, &[x, gamma, beta]))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let bias = b.map(|b| self.value(b)).transpose()?;
        let out = layers::linear(self.value(x)?, self.value(w)?, bias)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = layers::global_avg_pool(self.value(x)?)?;
        Ok(self.push(out, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let out = layers::nearest_upsample2x(self.value(x)?)?;
        Ok(self.push(out, Op::Upsample2x(x), &[x]))
    }

    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        let out = layers::avg_pool2x(self.value(x)?)?;
        Ok(self.push(out, Op::AvgPool2x(x), &[x]))
    }

    pub fn align(&mut self, x: Var, target_h: usize, target_w: usize) -> Result<Var> {
        let xv = self.value(x)?;
        let (_, _, h, w) = xv.dims4()?;
        if (h, w) == (target_h, target_w) {
            return Ok(x);
        }
        let out = layers::align_spatial(xv, target_h, target_w)?;
        Ok(self.push(out, Op::Align(x), &[x]))
    }

    /// Mean cross-entropy of `logits` against `labels`, as a scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = layers::softmax_cross_entropy(self.value(logits)?, labels)?;
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Gradients of `loss` with respect to every differentiable node it
    /// depends on. A leaf used several times receives the sum of its path
    /// gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.check(loss)?;
        if root.value.len() != 1 {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.index).map(|_| None).collect();
        grads[loss.index] = Some(Tensor::ones(root.value.shape().to_vec()));

        for idx in (0..=loss.index).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let mut acc = |v: Var, t: Tensor<T>| -> Result<()> {
                if !self.nodes[v.index].requires_grad {
                    return Ok(());
                }
                match &mut grads[v.index] {
                    Some(existing) => existing.add_assign(&t),
                    slot => {
                        *slot = Some(t);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Elementwise(kind, a, b) => match kind {
                    ElementwiseOp::Add => {
                        acc(*a, g.clone())?;
                        acc(*b, g)?;
                    }
                    ElementwiseOp::Sub => {
                        acc(*a, g.clone())?;
                        acc(*b, g.map(|v| -v))?;
                    }
                    ElementwiseOp::Mul => {
                        let (va, vb) = (&self.nodes[a.index].value, &self.nodes[b.index].value);
                        acc(*a, g.zip_with(vb, "mul backward", |x, y| x * y)?)?;
                        acc(*b, g.zip_with(va, "mul backward", |x, y| x * y)?)?;
                    }
                },
                Op::Scale(a, s) => acc(*a, g.scale(*s))?,
                Op::Sum(a) => {
                    let gv = g.item()?;
                    acc(*a, Tensor::full(self.nodes[a.index].value.shape().to_vec(), gv))?;
                }
                Op::Relu(a) => acc(*a, layers::relu_backward(&self.nodes[a.index].value, &g)?)?,
                Op::Conv2d { x, w, b, spec } => {
                    let grads_c = layers::conv2d_backward(
                        &self.nodes[x.index].value,
                        &self.nodes[w.index].value,
                        &g,
                        spec,
                        b.is_some(),
                        ConvAlgo::Auto,
                    )?;
                    acc(*x, grads_c.input)?;
                    acc(*w, grads_c.weight)?;
                    if let (Some(b), Some(db)) = (b, grads_c.bias) {
                        acc(*b, db)?;
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let (dx, dgamma, dbeta) =
                        layers::batchnorm_backward(&g, &self.nodes[gamma.index].value, cache)?;
                    acc(*x, dx)?;
                    acc(*gamma, dgamma)?;
                    acc(*beta, dbeta)?;
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = layers::linear_backward(
                        &self.nodes[x.index].value,
                        &self.nodes[w.index].value,
                        &g,
                    )?;
                    acc(*x, dx)?;
                    acc(*w, dw)?;
                    if let Some(b) = b {
                        acc(*b, db)?;
                    }
                }
                Op::GlobalAvgPool(x) => {
                    let (_, _, h, w) = self.nodes[x.index].value.dims4()?;
                    acc(*x, layers::global_avg_pool_backward(&g, h, w)?)?;
                }
                Op::Upsample2x(x) => acc(*x, layers::nearest_upsample2x_backward(&g)?)?,
                Op::AvgPool2x(x) => acc(*x, layers::avg_pool2x_backward(&g)?)?,
                Op::Align(x) => {
                    let (_, _, h, w) = self.nodes[x.index].value.dims4()?;
                    acc(*x, layers::align_spatial_backward(&g, h, w)?)?;
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => acc(
                    *logits,
                    layers::softmax_cross_entropy_backward(probs, labels, g.item()?)?,
                )?,
            }
        }

        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}

/// Result of [`Tape::backward`]: gradient tensors of leaves by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    tape: u32,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(Option::take)
    }
}

/// Central differences: `(f(x + h e_i) - f(x - h e_i)) / 2h` for every `i`.
pub fn finite_difference_gradient<T, F>(f: F, x: &Tensor<T>, h: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<T>,
{
    if !(h > T::zero()) {
        return Err(Error::OutOfRange("finite-difference step must be > 0".into()));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    let two_h = h + h;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteProbe { index: i });
        }
        out.push((up - down) / two_h);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s).unwrap().data(), &[4.0, 6.0]);
        let c = tape.constant(t(&[2], &[2.0, 3.0]));
        let d = tape.constant(t(&[2], &[4.0, 5.0]));
        let m = tape.mul(c, d).unwrap();
        assert_eq!(tape.value(m).unwrap().data(), &[8.0, 15.0]);
    }

    #[test]
    fn adding_zeros_is_bitwise_identity() {
        let x = Tensor::<f32>::from_fn(vec![3, 3], |i| (i as f32 * 1.7).sin() * 1e-3);
        let mut tape = Tape::new();
        let a = tape.constant(x.clone());
        let z = tape.constant(Tensor::zeros_like(&x));
        let s = tape.add(a, z).unwrap();
        assert_eq!(tape.value(s).unwrap(), &x);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2]));
        let b = tape.constant(Tensor::zeros(vec![3]));
        assert!(matches!(
            tape.add(a, b),
            Err(Error::ShapeMismatch { op: "add", .. })
        ));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[0.3, -1.0, 2.0]));
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn reused_leaf_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[5.0]));
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
        let other = Tape::<f64>::new();
        let loss = tape.sum(x).unwrap();
        assert!(matches!(other.backward(loss), Err(Error::UnknownVar(_))));
    }

    #[test]
    fn finite_difference_examples() {
        let x = t(&[4], &[0.1, 0.2, -3.0, 4.0]);
        let g = finite_difference_gradient(|x| Ok(x.sum()), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-9));
        let x = t(&[1], &[3.0]);
        let g = finite_difference_gradient(|x| Ok(x.data()[0] * x.data()[0]), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn finite_difference_names_bad_index() {
        let x = t(&[3], &[0.0, 1.0, 2.0]);
        let err = finite_difference_gradient(
            |x| Ok(if x.data()[2] > 2.0 { f64::NAN } else { 0.0 }),
            &x,
            1e-3,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteProbe { index: 2 }));
    }
}
