//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] is built for one forward pass: every primitive appends a node
//! holding its value and its parents. [`Tape::backward`] then walks the nodes
//! in exact reverse recording order, which is a valid reverse topological
//! order because parents are always recorded before their children.

use std::sync::Arc;

use super::Tensor;
use crate::{Error, Result};

/// A linear operator with a known adjoint, recordable on the tape.
///
/// Used for fixed spatial maps (pooling, upsampling, rotary embeddings)
/// whose gradient is just the transpose.
pub trait LinearOp: Send + Sync {
    fn apply(&self, x: &Tensor) -> Result<Tensor>;
    fn adjoint(&self, g: &Tensor) -> Result<Tensor>;
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Softmax(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    Linear(Var, Arc<dyn LinearOp>),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros if `v` did not
    /// contribute to the loss.
    pub fn get(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input (trainable or constant; the tape does not care).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    /// `a + c` for a constant `c`; `c` may hold `-inf` (additive masks).
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let v = self.value(a).add(c)?;
        Ok(self.push(v, Op::AddConst(a)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&values, axis)?;
        Ok(self.push(v, Op::Concat { parts: parts.to_vec(), axis }))
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).softmax_lastdim()?;
        Ok(self.push(v, Op::Softmax(a)))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a))
    }

    pub fn apply_linear(&mut self, a: Var, op: Arc<dyn LinearOp>) -> Result<Var> {
        let v = op.apply(self.value(a))?;
        Ok(self.push(v, Op::Linear(a, op)))
    }

    /// `x · wᵀ` for row-major tokens `x: [n, d_in]` and `w: [d_out, d_in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let wt = self.transpose(w)?;
        self.matmul(x, wt)
    }

    /// `mean((a - b)^2)`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Reverse sweep from a one-element `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::ones(out.shape().to_vec()));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut acc = |v: Var, contrib: Tensor| -> Result<()> {
                match &mut grads[v.0] {
                    Some(existing) => *existing = existing.add(&contrib)?,
                    slot => *slot = Some(contrib),
                }
                Ok(())
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(*a, g.clone())?;
                    acc(*b, g.clone())?;
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone())?;
                    acc(*b, g.scale(-1.0))?;
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    acc(*a, g.mul(vb)?)?;
                    acc(*b, g.mul(va)?)?;
                }
                Op::Scale(a, s) => acc(*a, g.scale(*s))?,
                Op::AddConst(a) => acc(*a, g.clone())?,
                Op::MatMul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    acc(*a, g.matmul(&vb.transpose()?)?)?;
                    acc(*b, va.transpose()?.matmul(&g)?)?;
                }
                Op::Transpose(a) => acc(*a, g.transpose()?)?,
                Op::Reshape(a) => {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    acc(*a, g.reshape(shape)?)?;
                }
                Op::Concat { parts, axis } => {
                    let mut start = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.shape()[*axis];
                        acc(*p, g.narrow(*axis, start, len)?)?;
                        start += len;
                    }
                }
                Op::Softmax(a) => {
                    let p = &node.value;
                    let n = *p.shape().last().expect("softmax output has a last dim");
                    let mut dx = vec![0.0; p.len()];
                    for ((prow, grow), drow) in p
                        .data()
                        .chunks(n)
                        .zip(g.data().chunks(n))
                        .zip(dx.chunks_mut(n))
                    {
                        let dot: f64 = prow.iter().zip(grow).map(|(p, g)| p * g).sum();
                        for ((d, p), g) in drow.iter_mut().zip(prow).zip(grow) {
                            *d = p * (g - dot);
                        }
                    }
                    acc(*a, Tensor::new(p.shape().to_vec(), dx)?)?;
                }
                Op::Gelu(a) => {
                    let x = &self.nodes[a.0].value;
                    acc(*a, g.zip_map(x, |g, x| g * gelu_grad(x))?)?;
                }
                Op::Sum(a) => {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    acc(*a, Tensor::full(shape, g.item()?))?;
                }
                Op::Mean(a) => {
                    let x = &self.nodes[a.0].value;
                    let n = x.len().max(1) as f64;
                    acc(*a, Tensor::full(x.shape().to_vec(), g.item()? / n))?;
                }
                Op::Linear(a, op) => acc(*a, op.adjoint(&g)?)?,
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1., 2.]));
        let sq = tape.mul(x, x).unwrap();
        let y = tape.sum(sq);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).data(), &[2., 4.]);
    }

    #[test]
    fn unused_inputs_get_zero_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1., 2.]));
        let unused = tape.leaf(Tensor::zeros([3, 2]));
        let y = tape.sum(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(unused), Tensor::zeros([3, 2]));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1., 2.]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn masked_softmax_entries_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.3, -0.2, 0.9]));
        let m = tape
            .add_const(x, &Tensor::vector(vec![0., f64::NEG_INFINITY, 0.]))
            .unwrap();
        let p = tape.softmax_lastdim(m).unwrap();
        let w = tape.leaf(Tensor::vector(vec![1., 5., -2.]));
        let pw = tape.mul(p, w).unwrap();
        let y = tape.sum(pw);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).data()[1], 0.0);
        assert!(g.get(x).is_finite());
    }
}
