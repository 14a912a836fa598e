//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its value, its input node ids and a [`Function`] that knows the local
//! vector-Jacobian product. Node ids are assigned in creation order, so every
//! input id is smaller than its consumer's id and the reverse sweep in
//! [`Tape::backward`] is a plain descending loop.

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, transpose, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Read-only view of a node's inputs and output during the backward sweep.
pub struct VjpContext<'a, S: Scalar> {
    tape: &'a Tape<S>,
    node: usize,
}

impl<S: Scalar> VjpContext<'_, S> {
    pub fn input(&self, i: usize) -> &Tensor<S> {
        let id = self.tape.nodes[self.node].inputs[i];
        &self.tape.nodes[id.0].value
    }

    pub fn output(&self) -> &Tensor<S> {
        &self.tape.nodes[self.node].value
    }

    /// Whether input `i` leads back to a differentiable leaf. Functions may
    /// skip computing contributions for inputs that do not.
    pub fn needs_grad(&self, i: usize) -> bool {
        let id = self.tape.nodes[self.node].inputs[i];
        self.tape.nodes[id.0].requires_grad
    }
}

/// Local derivative rule of one recorded operation.
pub trait Function<S: Scalar> {
    fn name(&self) -> &'static str;

    /// Gradient contribution for each input (in input order) given the
    /// gradient flowing into the output. `None` means "no contribution".
    fn vjp(&self, ctx: &VjpContext<'_, S>, upstream: &Tensor<S>) -> Result<Vec<Option<Tensor<S>>>>;
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    inputs: Vec<Var>,
    func: Option<Box<dyn Function<S>>>,
    requires_grad: bool,
}

pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a differentiable input or parameter node.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push_leaf(value, true)
    }

    /// Adds an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            func: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records an operation whose value has already been computed.
    pub fn record(
        &mut self,
        inputs: &[Var],
        value: Tensor<S>,
        func: impl Function<S> + 'static,
    ) -> Result<Var> {
        let next = self.nodes.len();
        if let Some(bad) = inputs.iter().find(|v| v.0 >= next) {
            return Err(Error::invalid(format!(
                "input node {} does not precede node {next}",
                bad.0
            )));
        }
        let value = value.ensure_finite(func.name())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.to_vec(),
            func: Some(Box::new(func)),
            requires_grad,
        });
        Ok(Var(next))
    }

    /// Backpropagates from a scalar `loss` with unit seed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let value = self.value(loss);
        if value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                value.shape()
            )));
        }
        self.backward_with(loss, Tensor::full(value.shape(), S::one()))
    }

    /// Backpropagates an arbitrary upstream gradient from `output`.
    pub fn backward_with(&self, output: Var, seed: Tensor<S>) -> Result<Gradients<S>> {
        if seed.shape() != self.shape(output) {
            return Err(Error::shape("backward", seed.shape(), self.shape(output)));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            let Some(func) = node.func.as_ref().filter(|_| node.requires_grad) else {
                continue;
            };
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let ctx = VjpContext { tape: self, node: id };
            let contributions = func.vjp(&ctx, &upstream)?;
            debug_assert_eq!(contributions.len(), node.inputs.len());
            for (input, contrib) in node.inputs.iter().zip(contributions) {
                let Some(contrib) = contrib.filter(|_| self.nodes[input.0].requires_grad) else {
                    continue;
                };
                let slot = &mut grads[input.0];
                *slot = Some(match slot.take() {
                    None => contrib,
                    Some(acc) => acc.zip_map(&contrib, "grad-accumulate", |a, b| a + b)?,
                });
            }
            grads[id] = Some(upstream);
        }
        let shapes = self.nodes[..=output.0]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.record(&[a, b], v, Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.record(&[a, b], v, Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.record(&[a, b], v, Mul)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x > S::zero() { x } else { S::zero() });
        self.record(&[a], v, Relu)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.abs());
        self.record(&[a], v, Abs)
    }

    pub fn scale(&mut self, a: Var, alpha: S) -> Result<Var> {
        let v = self.value(a).map(|x| alpha * x);
        self.record(&[a], v, Scale(alpha))
    }

    /// Elementwise product with a constant tensor (no gradient to `mask`).
    pub fn mul_const(&mut self, a: Var, mask: &Tensor<S>) -> Result<Var> {
        let v = self.value(a).zip_map(mask, "mul_const", |x, m| x * m)?;
        self.record(&[a], v, MulConst(mask.clone()))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.record(&[a], v, SumAll)
    }

    /// Squared Frobenius norm, `Σ x²`.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).data().iter().map(|&x| x * x).sum());
        self.record(&[a], v, SumSquares)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        self.record(&[a], v, Reshape)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = crate::tensor::matmul(self.value(a), self.value(b))?;
        self.record(&[a, b], v, MatMul)
    }
}

/// Per-node gradients produced by a backward sweep.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of `v`, or `None` when `v` is not reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zero-filled when `v` is unreachable.
    pub fn wrt(&self, v: Var) -> Option<Tensor<S>> {
        match self.get(v) {
            Some(g) => Some(g.clone()),
            None => self.shapes.get(v.0).map(|s| Tensor::zeros(s)),
        }
    }

    /// Moves the gradient of `v` out, zero-filled when unreachable.
    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        let shape = self.shapes.get(v.0)?;
        Some(
            self.grads[v.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(shape)),
        )
    }
}

struct Add;
struct Sub;
struct Mul;
struct Relu;
struct Abs;
struct Scale<S>(S);
struct MulConst<S: Scalar>(Tensor<S>);
struct SumAll;
struct SumSquares;
struct Reshape;
struct MatMul;

impl<S: Scalar> Function<S> for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn vjp(&self, _: &VjpContext<'_, S>, g: &Tensor<S>) -> Result<Vec<Option<Tensor<S>>>> {
        Ok(vec![Some(g.clone()), Some(g.clone())])
    }
}

impl<S: Scalar> Function<S> for Sub {
    fn name(&self) -> &'static str {
        "sub"
    }

    fn vjp(&self, _: &VjpContext<'_, S>, g: &Tensor<S>) -> Result<Vec<Option<Tensor<S>>>> {
        Ok(vec![Some(g.clone()), Some(g.map(|x| -x))])
    }
}

impl<S: Scalar> Function<S> for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn vjp(&self, ctx: &VjpContext<'_, S>, g: &Tensor<S>) -> Result<Vec<Option<Tensor<S>>>> {
        let ga = g.zip_map(ctx.input(1), "mul", |u, b| u * b)?;
        let gb = g.zip_map(ctx.input(0), "mul", |u, a| u * a)?;
        Ok(vec![Some(ga), Some(gb)])
    }
}

impl<S: Scalar> Function<S> for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn vjp(&self, ctx: &VjpContext<'_, S>, g: &Tensor<S>) -> Result<Vec<Option<Tensor<S>>>> {
        let ga = g.zip_map(ctx.input(0), "relu", |u, x| {
            if x > S::zero() {
                u
            } else {
                S::zero()
            }
        })?;
        Ok(vec![Some(ga)])
    }
}

impl<S: Scalar> Function<S> for Abs {
    fn name(&self) -> &'static str {
        "abs"
    }

    fn vjp(&self, ctx: &VjpContext<'_, S>, g: &Tensor<S>) -> Result<Vec<Option<Tensor<S>>>> {
        // sign(0) = 0 is the minimum-norm subgradient at the kink.
        let ga = g.zip_map(ctx.input(0), "abs", |u, x| {
            if x > S::zero() {
                u
            } else if x < S::zero() {
                -u
            } else {
                S::zero()
            }
        })?;
        Ok(vec![Some(ga)])
    }
}

impl<S: Scalar> Function<S> for Scale<S> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn vjp(&self, _: &VjpContext<'_, S>, g: &Tensor<S>) -> Result<Vec<Option<Tensor<S>>>> {
        let alpha = self.0;
        Ok(vec![Some(g.map(|u| alpha * u))])
    }
}

impl<S: Scalar> Function<S> for MulConst<S> {
    fn name(&self) -> &'static str {
        "mul_const"
    }

    fn vjp(&self, _: &VjpContext<'_, S>, g: &Tensor<S>) -> Result<Vec<Option<Tensor<S>>>> {
        Ok(vec![Some(g.zip_map(&self.0, "mul_const", |u, m| u * m)?)])
    }
}

impl<S: Scalar> Function<S> for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn vjp(&self, ctx: &VjpContext<'_, S>, g: &Tensor<S>) -> Result<Vec<Option<Tensor<S>>>> {
        let u = g.item()?;
        Ok(vec![Some(Tensor::full(ctx.input(0).shape(), u))])
    }
}

impl<S: Scalar> Function<S> for SumSquares {
    fn name(&self) -> &'static str {
        "sum_squares"
    }

    fn vjp(&self, ctx: &VjpContext<'_, S>, g: &Tensor<S>) -> Result<Vec<Option<Tensor<S>>>> {
        let two_u = S::lit(2.0) * g.item()?;
        Ok(vec![Some(ctx.input(0).map(|x| two_u * x))])
    }
}

impl<S: Scalar> Function<S> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn vjp(&self, ctx: &VjpContext<'_, S>, g: &Tensor<S>) -> Result<Vec<Option<Tensor<S>>>> {
        Ok(vec![Some(g.reshape(ctx.input(0).shape())?)])
    }
}

impl<S: Scalar> Function<S> for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn vjp(&self, ctx: &VjpContext<'_, S>, g: &Tensor<S>) -> Result<Vec<Option<Tensor<S>>>> {
        let (a, b) = (ctx.input(0), ctx.input(1));
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        // dA = G·Bᵀ, dB = Aᵀ·G
        let bt = transpose(k, n, b.data());
        let mut ga = vec![S::zero(); m * k];
        gemm_acc(m, n, k, g.data(), &bt, &mut ga);
        let at = transpose(m, k, a.data());
        let mut gb = vec![S::zero(); k * n];
        gemm_acc(k, m, n, &at, g.data(), &mut gb);
        Ok(vec![
            Some(Tensor::from_parts(vec![m, k], ga)),
            Some(Tensor::from_parts(vec![k, n], gb)),
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn add_forward() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn relu_forward() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(a).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn mul_backward_product_rule() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1], &[2.0]));
        let b = tape.leaf(t(&[1], &[5.0]));
        let c = tape.mul(a, b).unwrap();
        let grads = tape.backward_with(c, t(&[1], &[1.0])).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[5.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[2.0]);
    }

    #[test]
    fn binary_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(tape.add(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1], &[1e300]));
        assert!(matches!(tape.mul(a, a), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn sum_gives_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 - 2.5));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let y = tape.scale(x, 2.0).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn unreachable_nodes_get_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let unused = tape.leaf(t(&[2, 2], &[1.0; 4]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(unused).unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn matmul_backward_matches_hand_derivation() {
        // loss = sum(A·B): dA = 1·Bᵀ (row sums of B), dB = Aᵀ·1 (column sums of A)
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t(&[2, 1], &[5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(g.get(b).unwrap().data(), &[4.0, 6.0]);
    }
}
