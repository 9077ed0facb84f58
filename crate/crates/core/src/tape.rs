//! Tape-based reverse-mode differentiation over the operator set in [`crate::ops`].
//!
//! Every operation appends one node holding its output value, so node order is
//! a topological order and the backward pass is a single reverse sweep.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv1x1 { x: Var, w: Var, b: Var },
    Depthwise { x: Var, k: Var },
    AvgPool { x: Var, factor: usize },
    GlobalAvgPool { x: Var },
    Upsample { x: Var, factor: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Softmax { x: Var, axis: usize },
    Gate { x: Var, scaled: bool },
    Broadcast { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Square { x: Var },
    Sum { x: Var },
    Mean { x: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Confined to one thread; independent tapes may run in parallel.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let v = ops::conv1x1(self.value(x), self.value(w), self.value(b))?;
        Ok(self.record(v, Op::Conv1x1 { x, w, b }, &[x, w, b]))
    }

    pub fn depthwise_conv(&mut self, x: Var, k: Var) -> Result<Var> {
        let v = ops::depthwise_conv(self.value(x), self.value(k))?;
        Ok(self.record(v, Op::Depthwise { x, k }, &[x, k]))
    }

    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let v = ops::avg_pool(self.value(x), factor)?;
        Ok(self.record(v, Op::AvgPool { x, factor }, &[x]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let v = ops::global_avg_pool(self.value(x))?;
        Ok(self.record(v, Op::GlobalAvgPool { x }, &[x]))
    }

    pub fn bilinear_upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let v = ops::bilinear_upsample(self.value(x), factor)?;
        Ok(self.record(v, Op::Upsample { x, factor }, &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let v = ops::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.record(v, Op::LayerNorm { x, gain, bias, eps }, &[x, gain, bias]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = ops::softmax(self.value(x), axis)?;
        Ok(self.record(v, Op::Softmax { x, axis }, &[x]))
    }

    pub fn simple_gate(&mut self, x: Var, scaled: bool) -> Result<Var> {
        let v = ops::simple_gate(self.value(x), scaled)?;
        Ok(self.record(v, Op::Gate { x, scaled }, &[x]))
    }

    /// (B, C, 1, 1) → (B, C, h, w).
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let v = ops::broadcast_spatial(self.value(x), h, w)?;
        Ok(self.record(v, Op::Broadcast { x }, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.record(v, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.record(v, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.record(v, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let ct = T::of(c);
        let v = self.value(x).map(|a| a * ct);
        self.record(v, Op::Scale { x, c }, &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * a);
        self.record(v, Op::Square { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.record(v, Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let v = Tensor::scalar(self.value(x).sum() * T::of(1.0 / n as f64));
        self.record(v, Op::Mean { x }, &[x])
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));
        let mut leaves = HashMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let mut acc = |v: Var, d: Tensor<T>| -> Result<()> {
                if !self.nodes[v.0].requires_grad {
                    return Ok(());
                }
                match &mut grads[v.0] {
                    Some(existing) => {
                        *existing = existing.zip_map(&d, |a, b| a + b)?;
                    }
                    slot @ None => *slot = Some(d),
                }
                Ok(())
            };
            match node.op {
                Op::Leaf => {
                    leaves.insert(Var(idx), g);
                }
                Op::Conv1x1 { x, w, b } => {
                    let (dx, dw, db) = ops::conv1x1_backward(self.value(x), self.value(w), &g)?;
                    acc(x, dx)?;
                    acc(w, dw)?;
                    acc(b, db)?;
                }
                Op::Depthwise { x, k } => {
                    let (dx, dk) = ops::depthwise_conv_backward(self.value(x), self.value(k), &g)?;
                    acc(x, dx)?;
                    acc(k, dk)?;
                }
                Op::AvgPool { x, factor } => acc(x, ops::avg_pool_backward(&g, factor)?)?,
                Op::GlobalAvgPool { x } => {
                    let (_, _, h, w) = self.value(x).dims4()?;
                    acc(x, ops::global_avg_pool_backward(&g, h, w)?)?;
                }
                Op::Upsample { x, factor } => {
                    acc(x, ops::bilinear_upsample_backward(&g, factor)?)?
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (dx, dg, db) =
                        ops::layer_norm_backward(self.value(x), self.value(gain), eps, &g)?;
                    acc(x, dx)?;
                    acc(gain, dg)?;
                    acc(bias, db)?;
                }
                Op::Softmax { x: input, axis } => {
                    acc(input, ops::softmax_backward(&node.value, &g, axis)?)?
                }
                Op::Gate { x, scaled } => {
                    acc(x, ops::simple_gate_backward(self.value(x), &g, scaled)?)?
                }
                Op::Broadcast { x } => acc(x, ops::broadcast_spatial_backward(&g)?)?,
                Op::Add { a, b } => {
                    acc(a, g.clone())?;
                    acc(b, g)?;
                }
                Op::Sub { a, b } => {
                    acc(a, g.clone())?;
                    acc(b, g.map(|v| -v))?;
                }
                Op::Mul { a, b } => {
                    acc(a, g.zip_map(self.value(b), |u, v| u * v)?)?;
                    acc(b, g.zip_map(self.value(a), |u, v| u * v)?)?;
                }
                Op::Scale { x, c } => {
                    let ct = T::of(c);
                    acc(x, g.map(|v| v * ct))?;
                }
                Op::Square { x } => {
                    let two = T::of(2.0);
                    acc(x, g.zip_map(self.value(x), |u, v| two * u * v)?)?;
                }
                Op::Sum { x } => {
                    let gv = g.item()?;
                    acc(x, Tensor::full(self.value(x).shape().to_vec(), gv))?;
                }
                Op::Mean { x } => {
                    let n = self.value(x).len();
                    let gv = g.item()? * T::of(1.0 / n as f64);
                    acc(x, Tensor::full(self.value(x).shape().to_vec(), gv))?;
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }
}
