//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a Wengert list: every operation appends a node holding its
//! forward value and the indices of its inputs, so node order is already a
//! topological order. [`Graph::backward`] walks the list once in reverse.

use crate::error::{contract, Error, Result};
use crate::tensor::{silu_grad, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<Var>,
}

impl Gradients {
    /// Gradient for any node that the loss depends on.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for the trainable leaves, in registration order. Leaves the
    /// loss does not depend on receive zeros of their own shape.
    pub fn into_param_grads(mut self, graph: &Graph) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|&p| {
                self.grads[p.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(graph.value(p).shape()))
            })
            .collect()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Param);
        self.params.push(v);
        v
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.value(x).add_row_bias(self.value(bias))?;
        Ok(self.push(out, Op::AddRowBias(x, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).scale(k);
        self.push(out, Op::Scale(a, k))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).silu();
        self.push(out, Op::Silu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        self.push(out, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        self.push(out, Op::Mean(a))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(contract("loss variable does not belong to this graph"));
        }
        if !self.value(loss).is_scalar() {
            return Err(contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match node.op {
                Op::Constant | Op::Param => {}
                Op::MatMul(a, b) => {
                    let da = upstream.matmul_nt(self.value(b))?;
                    let db = self.value(a).matmul_tn(&upstream)?;
                    accumulate(&mut grads, a, da)?;
                    accumulate(&mut grads, b, db)?;
                }
                Op::AddRowBias(x, bias) => {
                    let db = upstream.sum_rows();
                    accumulate(&mut grads, bias, db)?;
                    accumulate(&mut grads, x, upstream.clone())?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, upstream.clone())?;
                    accumulate(&mut grads, b, upstream.clone())?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, b, upstream.scale(-1.0))?;
                    accumulate(&mut grads, a, upstream.clone())?;
                }
                Op::Mul(a, b) => {
                    let da = upstream.mul(self.value(b))?;
                    let db = upstream.mul(self.value(a))?;
                    accumulate(&mut grads, a, da)?;
                    accumulate(&mut grads, b, db)?;
                }
                Op::Scale(a, k) => accumulate(&mut grads, a, upstream.scale(k))?,
                Op::Silu(a) => {
                    let local = self.value(a).map(silu_grad);
                    accumulate(&mut grads, a, upstream.mul(&local)?)?;
                }
                Op::Square(a) => {
                    let local = self.value(a).scale(2.0);
                    accumulate(&mut grads, a, upstream.mul(&local)?)?;
                }
                Op::Sum(a) => {
                    let g = upstream.data()[0];
                    accumulate(&mut grads, a, Tensor::full(self.value(a).shape(), g))?;
                }
                Op::Mean(a) => {
                    let n = self.value(a).len() as f64;
                    let g = upstream.data()[0] / n;
                    accumulate(&mut grads, a, Tensor::full(self.value(a).shape(), g))?;
                }
            }
            // Keep gradients of leaves for the caller.
            if matches!(node.op, Op::Param | Op::Constant) {
                grads[idx] = Some(upstream);
            }
        }

        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    let slot = grads
        .get_mut(v.0)
        .ok_or_else(|| Error::Contract("input node after its consumer".into()))?;
    *slot = Some(match slot.take() {
        Some(existing) => existing.add(&g)?,
        None => g,
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut g = Graph::new();
        let theta = g.param(Tensor::vector(vec![0.3, -1.0, 2.0]));
        let loss = g.sum(theta);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(theta).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn gradient_of_square() {
        let mut g = Graph::new();
        let theta = g.param(Tensor::scalar(3.0));
        let sq = g.square(theta);
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(theta).unwrap().data(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let theta = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(theta), Err(Error::Contract(_))));
    }

    #[test]
    fn reused_node_accumulates() {
        // loss = sum(x * x + x) → 2x + 1
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, -2.0]));
        let xx = g.mul(x, x).unwrap();
        let y = g.add(xx, x).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, -3.0]);
    }

    #[test]
    fn unused_params_get_zero_gradients() {
        let mut g = Graph::new();
        let used = g.param(Tensor::vector(vec![1.0]));
        let _unused = g.param(Tensor::zeros(&[2, 3]));
        let loss = g.sum(used);
        let grads = g.backward(loss).unwrap().into_param_grads(&g);
        assert_eq!(grads.len(), 2);
        assert_eq!(grads[1].shape(), &[2, 3]);
        assert!(grads[1].data().iter().all(|&v| v == 0.0));
    }
}
