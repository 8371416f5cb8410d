//! Reverse-mode differentiation over a recorded operation list.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order; the backward sweep walks it once in reverse.

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use super::{kernels, Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Relu(usize),
    Abs(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Conv2d { x: usize, kernel: usize, stride: usize },
    SoftmaxRows(usize),
    MeanAxis { x: usize, axis: usize },
    MeanAll(usize),
    Sum(usize),
    Upsample { x: usize, factor: usize },
    Patchify { x: usize, s: usize },
    Unpatchify { x: usize, s: usize },
    Reshape(usize),
    ExpandCols(usize),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations for one forward pass. Confined to a single thread.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

/// Gradients of a scalar loss with respect to every tracked leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient for `var`; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        self.grads[var.id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Tensor<T> {
        self.grads[var.id]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    /// Leaf that participates in differentiation.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(Rc::new(value), true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(Rc::new(value), false)
    }

    pub fn leaf(&self, value: Rc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Result<Var<'_, T>> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = inputs.iter().any(|&i| nodes[i].needs_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Propagates `d loss / d node` back to every leaf. A tape supports one
    /// backward sweep.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Backward("loss was recorded on a different tape"));
        }
        if self.consumed.replace(true) {
            return Err(Error::Backward("tape already consumed by a previous backward pass"));
        }
        let nodes: Ref<'_, Vec<Node<T>>> = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            self.consumed.set(false);
            return Err(Error::Backward("loss must be a single-element tensor"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.id].needs_grad {
            grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), T::one()));
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads)?;
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Tensor<T>>], nodes: &[Node<T>], id: usize, g: Tensor<T>) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += *v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node<T: Element>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) -> Result<()> {
    let val = |i: usize| -> &Tensor<T> { &nodes[i].value };
    let wants = |i: usize| nodes[i].needs_grad;
    match node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, a, g.clone());
            accumulate(grads, nodes, b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, a, g.clone());
            if wants(b) {
                accumulate(grads, nodes, b, g.map(|v| -v));
            }
        }
        Op::Mul(a, b) => {
            if wants(a) {
                accumulate(grads, nodes, a, kernels::zip_with("mul", g, val(b), |x, y| x * y)?);
            }
            if wants(b) {
                accumulate(grads, nodes, b, kernels::zip_with("mul", g, val(a), |x, y| x * y)?);
            }
        }
        Op::Scale(a, c) => accumulate(grads, nodes, a, g.map(|v| v * c)),
        Op::AddScalar(a) | Op::Reshape(a) => {
            let shaped = Tensor::from_parts(val(a).shape().to_vec(), g.data().to_vec());
            accumulate(grads, nodes, a, shaped)
        }
        Op::Relu(a) => {
            let d = kernels::zip_with("relu", g, val(a), |gv, x| if x > T::zero() { gv } else { T::zero() })?;
            accumulate(grads, nodes, a, d);
        }
        Op::Abs(a) => {
            let d = kernels::zip_with("abs", g, val(a), |gv, x| {
                if x > T::zero() {
                    gv
                } else if x < T::zero() {
                    -gv
                } else {
                    T::zero()
                }
            })?;
            accumulate(grads, nodes, a, d);
        }
        Op::MatMul(a, b) => {
            if wants(a) {
                accumulate(grads, nodes, a, kernels::matmul_t(g, false, val(b), true)?);
            }
            if wants(b) {
                accumulate(grads, nodes, b, kernels::matmul_t(val(a), true, g, false)?);
            }
        }
        Op::Transpose(a) => accumulate(grads, nodes, a, kernels::transpose(g)?),
        Op::Conv2d { x, kernel, stride } => {
            let (dx, dk) = kernels::conv2d_backward(val(x), val(kernel), stride, g, wants(x), wants(kernel))?;
            if let Some(dx) = dx {
                accumulate(grads, nodes, x, dx);
            }
            if let Some(dk) = dk {
                accumulate(grads, nodes, kernel, dk);
            }
        }
        Op::SoftmaxRows(a) => {
            accumulate(grads, nodes, a, kernels::softmax_rows_backward(&node.value, g));
        }
        Op::MeanAxis { x, axis } => {
            accumulate(grads, nodes, x, kernels::mean_axis_backward(val(x).shape(), axis, g));
        }
        Op::MeanAll(a) | Op::Sum(a) => {
            let n = val(a).len();
            let scale = if matches!(node.op, Op::MeanAll(_)) {
                T::one() / T::from_f64_lossy(n as f64)
            } else {
                T::one()
            };
            accumulate(grads, nodes, a, Tensor::full(val(a).shape(), g.data()[0] * scale));
        }
        Op::Upsample { x, factor } => {
            accumulate(grads, nodes, x, kernels::bilinear_upsample_backward(val(x).shape(), factor, g));
        }
        Op::Patchify { x, s } => {
            let (h, w, _) = val(x).hwc()?;
            accumulate(grads, nodes, x, kernels::unpatchify(g, h, w, s)?);
        }
        Op::Unpatchify { x, s } => accumulate(grads, nodes, x, kernels::patchify(g, s)?),
        Op::ExpandCols(a) => accumulate(grads, nodes, a, kernels::sum_cols(g)),
    }
    Ok(())
}

impl<'t, T: Element> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    fn same_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::InvalidArgument("operands recorded on different tapes".into()))
        }
    }

    fn binary(
        &self,
        other: &Var<'t, T>,
        name: &'static str,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let out = kernels::zip_with(name, &self.value(), &other.value(), f)?;
        self.tape.push(name, out, op, &[self.id, other.id])
    }

    fn unary(&self, name: &'static str, out: Tensor<T>, op: Op<T>) -> Result<Var<'t, T>> {
        self.tape.push(name, out, op, &[self.id])
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Result<Var<'t, T>> {
        let out = self.value().map(|v| v * c);
        self.unary("scale", out, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: T) -> Result<Var<'t, T>> {
        let out = self.value().map(|v| v + c);
        self.unary("add_scalar", out, Op::AddScalar(self.id))
    }

    pub fn relu(&self) -> Result<Var<'t, T>> {
        let out = kernels::relu(&self.value());
        self.unary("relu", out, Op::Relu(self.id))
    }

    pub fn abs(&self) -> Result<Var<'t, T>> {
        let out = self.value().map(|v| v.abs());
        self.unary("abs", out, Op::Abs(self.id))
    }

    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let out = kernels::matmul(&self.value(), &other.value())?;
        self.tape.push("matmul", out, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let out = kernels::transpose(&self.value())?;
        self.unary("transpose", out, Op::Transpose(self.id))
    }

    pub fn conv2d(&self, kernel: &Var<'t, T>, stride: usize) -> Result<Var<'t, T>> {
        self.same_tape(kernel)?;
        let out = kernels::conv2d(&self.value(), &kernel.value(), stride)?;
        let op = Op::Conv2d {
            x: self.id,
            kernel: kernel.id,
            stride,
        };
        self.tape.push("conv2d", out, op, &[self.id, kernel.id])
    }

    pub fn softmax_rows(&self) -> Result<Var<'t, T>> {
        let out = kernels::softmax_rows(&self.value())?;
        self.unary("softmax", out, Op::SoftmaxRows(self.id))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        let out = kernels::mean_axis(&self.value(), axis)?;
        self.unary("mean_axis", out, Op::MeanAxis { x: self.id, axis })
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&self) -> Result<Var<'t, T>> {
        let v = self.value();
        if v.is_empty() {
            return Err(Error::InvalidArgument("mean of an empty tensor".into()));
        }
        let m = v.data().iter().copied().sum::<T>() / T::from_f64_lossy(v.len() as f64);
        self.unary("mean", Tensor::scalar(m), Op::MeanAll(self.id))
    }

    pub fn sum(&self) -> Result<Var<'t, T>> {
        let s = self.value().data().iter().copied().sum::<T>();
        self.unary("sum", Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn bilinear_upsample(&self, factor: usize) -> Result<Var<'t, T>> {
        let out = kernels::bilinear_upsample(&self.value(), factor)?;
        self.unary("bilinear_upsample", out, Op::Upsample { x: self.id, factor })
    }

    pub fn patchify(&self, s: usize) -> Result<Var<'t, T>> {
        let out = kernels::patchify(&self.value(), s)?;
        self.unary("patchify", out, Op::Patchify { x: self.id, s })
    }

    pub fn unpatchify(&self, h: usize, w: usize, s: usize) -> Result<Var<'t, T>> {
        let out = kernels::unpatchify(&self.value(), h, w, s)?;
        self.unary("unpatchify", out, Op::Unpatchify { x: self.id, s })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value().reshape(shape)?;
        self.unary("reshape", out, Op::Reshape(self.id))
    }

    /// Repeats a length-`n` vector into an `n × cols` matrix, one value per row.
    pub fn expand_cols(&self, cols: usize) -> Result<Var<'t, T>> {
        let out = kernels::expand_cols(&self.value(), cols)?;
        self.unary("expand_cols", out, Op::ExpandCols(self.id))
    }

    /// Inner product with a constant tensor of the same shape.
    pub fn dot_const(&self, weights: &Tensor<T>) -> Result<Var<'t, T>> {
        let w = self.tape.constant(weights.clone());
        self.mul(&w)?.sum()
    }
}
