//! Wengert tape for reverse-mode differentiation.
//!
//! Every forward operation appends one node holding its output value and
//! the rule needed to push gradients back to its inputs. Nodes only ever
//! reference earlier nodes, so a single reverse sweep visits each record
//! exactly once.

use std::fmt;

use crate::autodiff::kernels::{self, ConvGeometry, StandardizeOver};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Tape::custom`]: `(inputs, output, output_grad)` to
/// one gradient per input.
pub type CustomBackward<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Tensor<T>>>;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    LnClampMin(Var, T),
    ClampMin(Var, T),
    SumAll(Var),
    SumAxes(Var),
    Softmax(Var, usize),
    L2Norm(Var),
    L2Normalize(Var, usize, T),
    MatMul(Var, Var),
    TransposeLast2(Var),
    Reshape(Var),
    Upsample2x(Var),
    AvgPool2(Var),
    Conv2d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geo: ConvGeometry,
    },
    Standardize {
        x: Var,
        over: StandardizeOver,
        inv_std: Vec<T>,
    },
    GatherRows {
        table: Var,
        rows: Vec<usize>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

/// Batch statistics returned alongside a standardized tensor.
#[derive(Clone, Debug)]
pub struct GroupStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Enables or disables the non-finite output check run after each op.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::binary(self.value(a), self.value(b), |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::binary(self.value(a), self.value(b), |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::binary(self.value(a), self.value(b), |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::binary(self.value(a), self.value(b), |x, y| x / y)?;
        self.push("div", out, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push("scale", out, Op::Scale(x, c), &[x])
    }

    /// `x + c` for a scalar constant `c`.
    pub fn offset(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v + c);
        self.push("offset", out, Op::Offset(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.tanh());
        self.push("tanh", out, Op::Tanh(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.abs());
        self.push("abs", out, Op::Abs(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * v);
        self.push("square", out, Op::Square(x), &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.sqrt());
        self.push("sqrt", out, Op::Sqrt(x), &[x])
    }

    /// `ln(max(x, floor))`; the gradient is zero where the clamp is active.
    pub fn ln_clamp_min(&mut self, x: Var, floor: T) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(floor).ln());
        self.push("ln", out, Op::LnClampMin(x, floor), &[x])
    }

    pub fn clamp_min(&mut self, x: Var, floor: T) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(floor));
        self.push("clamp_min", out, Op::ClampMin(x, floor), &[x])
    }

    // ---- reductions -----------------------------------------------------

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::from_usize(n).unwrap())
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if let Some(&bad) = axes.iter().find(|&&a| a >= shape.len()) {
            return Err(Error::shape("sum_axes", format!("axis {bad} of {shape:?}")));
        }
        let target = kernels::reduced_shape(&shape, axes);
        let out = kernels::sum_to_shape(self.value(x), &target);
        self.push("sum_axes", out, Op::SumAxes(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let out = kernels::softmax(self.value(x), axis);
        self.push("softmax", out, Op::Softmax(x, axis), &[x])
    }

    /// Square root of the sum of squares along `axis` (kept as size 1).
    pub fn l2_norm(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("l2_norm", x, axis)?;
        let sq = self.value(x).map(|v| v * v);
        let target = kernels::reduced_shape(sq.shape(), &[axis]);
        let out = kernels::sum_to_shape(&sq, &target).map(|v| v.sqrt());
        self.push("l2_norm", out, Op::L2Norm(x), &[x])
    }

    /// Divides each slice along `axis` by its l2 norm. Slices whose norm is
    /// below `floor` map to zero.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, floor: T) -> Result<Var> {
        self.check_axis("l2_normalize", x, axis)?;
        let xv = self.value(x);
        let (outer, len, inner) = kernels::split_axis(xv.shape(), axis);
        let xd = xv.data();
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let norm = (0..len).map(|j| xd[at(j)] * xd[at(j)]).sum::<T>().sqrt();
                if norm >= floor {
                    for j in 0..len {
                        out[at(j)] = xd[at(j)] / norm;
                    }
                }
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        self.push("l2_normalize", out, Op::L2Normalize(x, axis, floor), &[x])
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::shape(op, format!("axis {axis} of {:?}", self.shape(x))));
        }
        Ok(())
    }

    // ---- shape and linear algebra --------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), false, self.value(b), false)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = kernels::transpose_last2(self.value(x))?;
        self.push("transpose", out, Op::TransposeLast2(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let out = kernels::upsample2x(self.value(x))?;
        self.push("upsample2x", out, Op::Upsample2x(x), &[x])
    }

    pub fn avgpool2(&mut self, x: Var) -> Result<Var> {
        let out = kernels::avgpool2(self.value(x))?;
        self.push("avgpool2", out, Op::AvgPool2(x), &[x])
    }

    /// Cross-correlation of `x (B,Cin,H,W)` with `weight (Cout,Cin,k,k)`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (_, cin, h, w) = self.value(x).dims4("conv2d")?;
        let ws = self.shape(weight).to_vec();
        let [cout, wcin, kh, kw] = ws[..] else {
            return Err(Error::shape("conv2d", format!("weight must be rank 4, got {ws:?}")));
        };
        if kh != kw {
            return Err(Error::shape("conv2d", format!("kernel must be square, got {kh}x{kw}")));
        }
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input channels: input has {cin}, weight expects {wcin}"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias: expected [{cout}], got {:?}", self.shape(b)),
                ));
            }
        }
        let geo = ConvGeometry::new(cin, h, w, kh, stride, padding)?;
        let out = kernels::conv2d_forward(self.value(x), self.value(weight), bias.map(|b| self.value(b)), &geo);
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push("conv2d", out, Op::Conv2d { x, weight, bias, geo }, &inputs)
    }

    /// Standardizes a `(B,C,H,W)` tensor per group (biased variance).
    pub fn standardize(&mut self, x: Var, over: StandardizeOver, eps: T) -> Result<(Var, GroupStats<T>)> {
        let s = kernels::standardize(self.value(x), over, eps)?;
        let var = self.push(
            "standardize",
            s.out,
            Op::Standardize {
                x,
                over,
                inv_std: s.inv_std,
            },
            &[x],
        )?;
        Ok((
            var,
            GroupStats {
                mean: s.mean,
                var: s.var,
            },
        ))
    }

    /// Rows of a `(K, D)` table, one per entry of `rows`.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let [k, d] = t.shape()[..] else {
            return Err(Error::shape(
                "gather_rows",
                format!("table must be rank 2, got {:?}", t.shape()),
            ));
        };
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= k {
                return Err(Error::ClassOutOfRange {
                    index: r,
                    num_classes: k,
                });
            }
            data.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
        }
        let out = Tensor::new(vec![rows.len(), d], data)?;
        self.push(
            "gather_rows",
            out,
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
            &[table],
        )
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, backward: CustomBackward<T>) -> Result<Var> {
        self.push(
            "custom",
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            inputs,
        )
    }

    // ---- reverse sweep --------------------------------------------------

    /// Gradients of a scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, gi) in self.input_grads(node, &g) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn input_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let y = &node.value;
        let v = |var: Var| &self.nodes[var.0].value;
        let unary = |x: Var, f: &dyn Fn(T, T, T) -> T| {
            let xd = v(x).data();
            let data = g
                .data()
                .iter()
                .zip(xd)
                .zip(y.data())
                .map(|((&gi, &xi), &yi)| f(gi, xi, yi))
                .collect();
            vec![(x, Tensor::new(v(x).shape(), data).expect("unary grad"))]
        };
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![
                (*a, kernels::sum_to_shape(g, v(*a).shape())),
                (*b, kernels::sum_to_shape(g, v(*b).shape())),
            ],
            Op::Sub(a, b) => vec![
                (*a, kernels::sum_to_shape(g, v(*a).shape())),
                (*b, kernels::sum_to_shape(&g.map(|x| -x), v(*b).shape())),
            ],
            Op::Mul(a, b) => {
                let ga = kernels::binary(g, v(*b), |x, y| x * y).expect("mul grad");
                let gb = kernels::binary(g, v(*a), |x, y| x * y).expect("mul grad");
                vec![
                    (*a, kernels::sum_to_shape(&ga, v(*a).shape())),
                    (*b, kernels::sum_to_shape(&gb, v(*b).shape())),
                ]
            }
            Op::Div(a, b) => {
                let ga = kernels::binary(g, v(*b), |x, y| x / y).expect("div grad");
                // d(a/b)/db = -(a/b)/b = -y/b
                let gy = kernels::binary(g, y, |x, q| x * q).expect("div grad");
                let gb = kernels::binary(&gy, v(*b), |x, d| -x / d).expect("div grad");
                vec![
                    (*a, kernels::sum_to_shape(&ga, v(*a).shape())),
                    (*b, kernels::sum_to_shape(&gb, v(*b).shape())),
                ]
            }
            Op::Scale(x, c) => vec![(*x, g.map(|gi| gi * *c))],
            Op::Offset(x) => vec![(*x, g.clone())],
            Op::Relu(x) => unary(*x, &|gi, xi, _| if xi > T::zero() { gi } else { T::zero() }),
            Op::Sigmoid(x) => unary(*x, &|gi, _, yi| gi * yi * (T::one() - yi)),
            Op::Tanh(x) => unary(*x, &|gi, _, yi| gi * (T::one() - yi * yi)),
            Op::Abs(x) => unary(*x, &|gi, xi, _| gi * sign(xi)),
            Op::Square(x) => unary(*x, &|gi, xi, _| gi * (xi + xi)),
            Op::Sqrt(x) => unary(*x, &|gi, _, yi| {
                if yi > T::zero() {
                    gi / (yi + yi)
                } else {
                    T::zero()
                }
            }),
            Op::LnClampMin(x, floor) => {
                let floor = *floor;
                unary(*x, &move |gi, xi, _| if xi > floor { gi / xi } else { T::zero() })
            }
            Op::ClampMin(x, floor) => {
                let floor = *floor;
                unary(*x, &move |gi, xi, _| if xi > floor { gi } else { T::zero() })
            }
            Op::SumAll(x) => vec![(*x, Tensor::full(v(*x).shape(), g.item()))],
            Op::SumAxes(x) => vec![(*x, kernels::expand_to(g, v(*x).shape()))],
            Op::Softmax(x, axis) => vec![(*x, kernels::softmax_backward(y, g, *axis))],
            Op::L2Norm(x) => {
                let xs = v(*x);
                let ratio =
                    kernels::binary(g, y, |gi, n| if n > T::zero() { gi / n } else { T::zero() }).expect("l2 grad");
                let gx = kernels::binary(xs, &ratio, |xi, r| xi * r).expect("l2 grad");
                vec![(*x, gx)]
            }
            Op::L2Normalize(x, axis, floor) => {
                let xs = v(*x);
                let (outer, len, inner) = kernels::split_axis(xs.shape(), *axis);
                let (xd, yd, gd) = (xs.data(), y.data(), g.data());
                let mut out = vec![T::zero(); xd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let norm = (0..len).map(|j| xd[at(j)] * xd[at(j)]).sum::<T>().sqrt();
                        if norm < *floor {
                            continue;
                        }
                        let dot: T = (0..len).map(|j| yd[at(j)] * gd[at(j)]).sum();
                        for j in 0..len {
                            out[at(j)] = (gd[at(j)] - yd[at(j)] * dot) / norm;
                        }
                    }
                }
                vec![(*x, Tensor::new(xs.shape(), out).expect("normalize grad"))]
            }
            Op::MatMul(a, b) => {
                let ga = kernels::matmul(g, false, v(*b), true).expect("matmul grad");
                let gb = kernels::matmul(v(*a), true, g, false).expect("matmul grad");
                vec![(*a, ga), (*b, gb)]
            }
            Op::TransposeLast2(x) => vec![(*x, kernels::transpose_last2(g).expect("transpose grad"))],
            Op::Reshape(x) => vec![(*x, g.reshape(v(*x).shape()).expect("reshape grad"))],
            Op::Upsample2x(x) => vec![(*x, kernels::upsample2x_backward(g, v(*x).shape()))],
            Op::AvgPool2(x) => vec![(*x, kernels::avgpool2_backward(g, v(*x).shape()))],
            Op::Conv2d { x, weight, bias, geo } => {
                let need = (
                    self.nodes[x.0].needs_grad,
                    self.nodes[weight.0].needs_grad,
                    bias.is_some_and(|b| self.nodes[b.0].needs_grad),
                );
                let grads = kernels::conv2d_backward(v(*x), v(*weight), g, geo, need);
                let mut out = Vec::new();
                out.extend(grads.x.map(|t| (*x, t)));
                out.extend(grads.weight.map(|t| (*weight, t)));
                if let (Some(b), Some(t)) = (bias, grads.bias) {
                    out.push((*b, t));
                }
                out
            }
            Op::Standardize { x, over, inv_std } => {
                vec![(*x, kernels::standardize_backward(y, g, *over, inv_std))]
            }
            Op::GatherRows { table, rows } => {
                let t = v(*table);
                let d = t.shape()[1];
                let mut out = vec![T::zero(); t.numel()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        out[r * d + j] += g.data()[i * d + j];
                    }
                }
                vec![(*table, Tensor::new(t.shape(), out).expect("gather grad"))]
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&i| v(i)).collect();
                inputs.iter().copied().zip(backward(&vals, y, g)).collect()
            }
        }
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Sign with `sign(0) = 0`.
fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zero-filled when `v` does not reach the loss.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn relu_values_and_kink() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(&tape, x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn l2_norm_of_three_four() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[3.0, 4.0]));
        let n = tape.l2_norm(x, 0).unwrap();
        assert_eq!(tape.value(n).item(), 5.0);
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_x() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = tape.square(x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(&tape, x).data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let unused = tape.leaf(t(&[2], &[3.0, 4.0]));
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(&tape, unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn broadcast_error_surfaces() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros([2, 3]));
        let b = tape.leaf(Tensor::zeros([4, 3]));
        assert!(matches!(tape.add(a, b), Err(Error::Broadcast { .. })));
    }

    #[test]
    fn conv_channel_mismatch_names_dimension() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros([1, 2, 4, 4]));
        let w = tape.leaf(Tensor::zeros([3, 5, 3, 3]));
        let err = tape.conv2d(x, w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("input channels"), "{err}");
    }

    #[test]
    fn non_finite_is_reported_when_checked() {
        let mut tape = Tape::<f64>::new();
        tape.set_check_finite(true);
        let x = tape.leaf(t(&[1], &[-1.0]));
        assert!(matches!(tape.sqrt(x), Err(Error::NonFinite("sqrt"))));
    }
}
