//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends a node to the tape; node ids grow in execution order,
//! so [`Tape::backward`] simply walks the ids downward from the loss.
//! Nodes created from [`Tape::constant`] (and anything computed only from
//! constants) never receive gradients.

use std::cell::{Ref, RefCell};

use crate::error::{shape_err, Result, TensorError};
use crate::kernels;
use crate::tensor::Tensor;

/// Probabilities are clipped from below at this value before `ln`.
pub const LOG_CLIP: f64 = 1e-12;

/// Tolerance on `|Σp − 1|` when validating simplex inputs.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
}

impl Var {
    pub fn id(self) -> usize {
        self.id
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Conv {
        input: usize,
        kernel: usize,
        bias: usize,
        cols: Vec<f64>,
        dims: [usize; 5],
    },
    MaxPool {
        input: usize,
        argmax: Vec<usize>,
    },
    Reshape(usize),
    Row(usize, usize),
    ConcatRows(Vec<usize>),
    PadCols(usize),
    Softmax(usize),
    CrossEntropy {
        probs: usize,
        target: Tensor,
    },
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for later differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Ids of the non-leaf nodes whose backward rule ran, in visit order.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(TensorError::Invalid(format!(
            "{op} expects a rank-2 tensor, got {:?}",
            t.shape()
        ))),
    }
}

/// Batch dims of an NHWC (or HWC, read as N = 1) tensor.
fn nhwc(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [h, w, c] => Ok([1, h, w, c]),
        [n, h, w, c] => Ok([n, h, w, c]),
        _ => Err(TensorError::Invalid(format!(
            "{op} expects HWC or NHWC input, got {:?}",
            t.shape()
        ))),
    }
}

fn check_simplex(what: &str, t: &Tensor) -> Result<()> {
    let s = t.sum();
    if (s - 1.0).abs() > SIMPLEX_TOL || t.data().iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(TensorError::Invalid(format!(
            "{what} is not on the simplex (sum = {s})"
        )));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("zip_map shapes agree")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[var.id].value)
    }

    pub fn shape(&self, var: Var) -> Vec<usize> {
        self.nodes.borrow()[var.id].value.shape().to_vec()
    }

    fn unary(&self, a: Var, f: impl Fn(&Tensor) -> Tensor, op: Op) -> Var {
        let out = f(&self.value(a));
        let rg = self.needs(&[a.id]);
        self.push(out, op, rg)
    }

    fn binary_same(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            if va.shape() != vb.shape() {
                return shape_err(name, va.shape(), vb.shape());
            }
            zip_map(&va, &vb, f)
        };
        let rg = self.needs(&[a.id, b.id]);
        Ok(self.push(out, op, rg))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            let (m, k) = rank2("matmul", &va)?;
            let (k2, n) = rank2("matmul", &vb)?;
            if k != k2 {
                return shape_err("matmul", va.shape(), vb.shape());
            }
            let mut c = vec![0.0; m * n];
            kernels::gemm(m, k, n, va.data(), false, vb.data(), false, 0.0, &mut c);
            Tensor::new(&[m, n], c)?
        };
        let rg = self.needs(&[a.id, b.id]);
        Ok(self.push(out, Op::MatMul(a.id, b.id), rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b, |x, y| x + y, Op::Add(a.id, b.id))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b, |x, y| x - y, Op::Sub(a.id, b.id))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b, |x, y| x * y, Op::Mul(a.id, b.id))
    }

    /// Adds a `[d]` bias along the last axis of `a`.
    pub fn add_bias(&self, a: Var, bias: Var) -> Result<Var> {
        let out = {
            let (va, vb) = (self.value(a), self.value(bias));
            let d = *va.shape().last().expect("non-empty shape");
            if vb.shape() != [d] {
                return shape_err("add_bias", va.shape(), vb.shape());
            }
            let data = va
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| x + vb.data()[i % d])
                .collect();
            Tensor::new(va.shape(), data)?
        };
        let rg = self.needs(&[a.id, bias.id]);
        Ok(self.push(out, Op::AddBias(a.id, bias.id), rg))
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        self.unary(a, |t| t.map(|x| x * factor), Op::Scale(a.id, factor))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, |t| t.map(f64::tanh), Op::Tanh(a.id))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, |t| t.map(sigmoid), Op::Sigmoid(a.id))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |t| t.map(|x| x.max(0.0)), Op::Relu(a.id))
    }

    /// 3×3 stride-1 convolution with zero "same" padding.
    ///
    /// `input` is `[H, W, Cin]` or `[N, H, W, Cin]`, `kernel` is
    /// `[3, 3, Cin, Cout]` and `bias` is `[Cout]`. The output keeps the
    /// input's rank and spatial extent.
    pub fn conv2d_same(&self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (out, cols, dims) = {
            let (vi, vk, vb) = (self.value(input), self.value(kernel), self.value(bias));
            let [n, h, w, cin] = nhwc("conv2d_same", &vi)?;
            let cout = match *vk.shape() {
                [3, 3, c, co] if c == cin => co,
                _ => return shape_err("conv2d_same", vi.shape(), vk.shape()),
            };
            if vb.shape() != [cout] {
                return shape_err("conv2d_same", vk.shape(), vb.shape());
            }
            let cols = kernels::im2col(vi.data(), n, h, w, cin);
            let rows = n * h * w;
            let mut out = Vec::with_capacity(rows * cout);
            for _ in 0..rows {
                out.extend_from_slice(vb.data());
            }
            kernels::gemm(rows, 9 * cin, cout, &cols, false, vk.data(), false, 1.0, &mut out);
            let shape: Vec<usize> = if vi.rank() == 3 {
                vec![h, w, cout]
            } else {
                vec![n, h, w, cout]
            };
            (Tensor::new(&shape, out)?, cols, [n, h, w, cin, cout])
        };
        let rg = self.needs(&[input.id, kernel.id, bias.id]);
        Ok(self.push(
            out,
            Op::Conv {
                input: input.id,
                kernel: kernel.id,
                bias: bias.id,
                cols,
                dims,
            },
            rg,
        ))
    }

    /// 2×2 stride-2 max pooling; output spatial size is `⌈H/2⌉×⌈W/2⌉`.
    pub fn maxpool2(&self, input: Var) -> Result<Var> {
        let (out, argmax) = {
            let vi = self.value(input);
            let [n, h, w, c] = nhwc("maxpool2", &vi)?;
            let (vals, arg) = kernels::maxpool2(vi.data(), n, h, w, c);
            let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
            let shape: Vec<usize> = if vi.rank() == 3 {
                vec![oh, ow, c]
            } else {
                vec![n, oh, ow, c]
            };
            (Tensor::new(&shape, vals)?, arg)
        };
        let rg = self.needs(&[input.id]);
        Ok(self.push(
            out,
            Op::MaxPool {
                input: input.id,
                argmax,
            },
            rg,
        ))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.needs(&[a.id]);
        Ok(self.push(out, Op::Reshape(a.id), rg))
    }

    /// Row `index` of a rank-2 tensor, as `[1, cols]`.
    pub fn row(&self, a: Var, index: usize) -> Result<Var> {
        let out = self.value(a).row(index)?;
        let rg = self.needs(&[a.id]);
        Ok(self.push(out, Op::Row(a.id, index), rg))
    }

    /// Stacks rank-2 tensors with equal column counts.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("concat_rows of nothing".into()));
        }
        let out = {
            let first = self.value(parts[0]);
            let (_, cols) = rank2("concat_rows", &first)?;
            drop(first);
            let mut rows = 0;
            let mut data = Vec::new();
            for &p in parts {
                let v = self.value(p);
                let (r, c) = rank2("concat_rows", &v)?;
                if c != cols {
                    return shape_err("concat_rows", &[rows, cols], v.shape());
                }
                rows += r;
                data.extend_from_slice(v.data());
            }
            Tensor::new(&[rows, cols], data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.needs(&ids);
        Ok(self.push(out, Op::ConcatRows(ids), rg))
    }

    /// Zero-pads the columns of a rank-2 tensor up to `cols`.
    pub fn pad_cols(&self, a: Var, cols: usize) -> Result<Var> {
        let out = {
            let v = self.value(a);
            let (r, c) = rank2("pad_cols", &v)?;
            if c > cols {
                return shape_err("pad_cols", v.shape(), &[r, cols]);
            }
            let mut data = vec![0.0; r * cols];
            for i in 0..r {
                data[i * cols..i * cols + c].copy_from_slice(&v.data()[i * c..(i + 1) * c]);
            }
            Tensor::new(&[r, cols], data)?
        };
        let rg = self.needs(&[a.id]);
        Ok(self.push(out, Op::PadCols(a.id), rg))
    }

    /// Softmax along the last axis (each row of a rank-2 tensor).
    pub fn softmax(&self, a: Var) -> Result<Var> {
        let out = {
            let v = self.value(a);
            let (_, k) = v
                .dims2()
                .ok_or_else(|| TensorError::Invalid(format!("softmax on {:?}", v.shape())))?;
            let mut data = Vec::with_capacity(v.len());
            for row in v.data().chunks(k) {
                data.extend(crate::func::softmax(row));
            }
            Tensor::new(v.shape(), data)?
        };
        let rg = self.needs(&[a.id]);
        Ok(self.push(out, Op::Softmax(a.id), rg))
    }

    /// `−Σ target·ln(max(probs, LOG_CLIP))`; both must lie on the simplex.
    pub fn cross_entropy(&self, target: &Tensor, probs: Var) -> Result<Var> {
        let out = {
            let p = self.value(probs);
            if p.shape() != target.shape() {
                return shape_err("cross_entropy", target.shape(), p.shape());
            }
            check_simplex("cross_entropy target", target)?;
            check_simplex("cross_entropy prediction", &p)?;
            Tensor::scalar(crate::func::cross_entropy_unchecked(target.data(), p.data()))
        };
        let rg = self.needs(&[probs.id]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                probs: probs.id,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&self, a: Var) -> Var {
        self.unary(a, |t| Tensor::scalar(t.sum()), Op::Sum(a.id))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(TensorError::Invalid(format!(
                "backward needs a scalar loss, got {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        let mut visited = Vec::new();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            visited.push(id);
            let mut acc = |target: usize, delta: Tensor| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => existing
                        .add_assign(&delta)
                        .expect("gradient shape matches value shape"),
                    slot @ None => *slot = Some(delta),
                }
            };
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (m, k) = val(*a).dims2().unwrap();
                    let n = val(*b).shape()[1];
                    if nodes[*a].requires_grad {
                        let mut ga = vec![0.0; m * k];
                        kernels::gemm(m, n, k, g.data(), false, val(*b).data(), true, 0.0, &mut ga);
                        acc(*a, Tensor::new(&[m, k], ga).unwrap());
                    }
                    if nodes[*b].requires_grad {
                        let mut gb = vec![0.0; k * n];
                        kernels::gemm(k, m, n, val(*a).data(), true, g.data(), false, 0.0, &mut gb);
                        acc(*b, Tensor::new(&[k, n], gb).unwrap());
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|x| -x));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, zip_map(&g, val(*b), |x, y| x * y));
                    acc(*b, zip_map(&g, val(*a), |x, y| x * y));
                }
                Op::AddBias(a, b) => {
                    let d = val(*b).len();
                    let mut gb = vec![0.0; d];
                    for (i, x) in g.data().iter().enumerate() {
                        gb[i % d] += x;
                    }
                    acc(*b, Tensor::vector(gb));
                    acc(*a, g);
                }
                Op::Scale(a, f) => acc(*a, g.map(|x| x * f)),
                Op::Tanh(a) => acc(*a, zip_map(&g, &node.value, |x, y| x * (1.0 - y * y))),
                Op::Sigmoid(a) => acc(*a, zip_map(&g, &node.value, |x, y| x * y * (1.0 - y))),
                Op::Relu(a) => acc(
                    *a,
                    zip_map(&g, val(*a), |x, y| if y > 0.0 { x } else { 0.0 }),
                ),
                Op::Conv {
                    input,
                    kernel,
                    bias,
                    cols,
                    dims,
                } => {
                    let [n, h, w, cin, cout] = *dims;
                    let rows = n * h * w;
                    if nodes[*bias].requires_grad {
                        let mut gb = vec![0.0; cout];
                        for (i, x) in g.data().iter().enumerate() {
                            gb[i % cout] += x;
                        }
                        acc(*bias, Tensor::vector(gb));
                    }
                    if nodes[*kernel].requires_grad {
                        let mut gk = vec![0.0; 9 * cin * cout];
                        kernels::gemm(9 * cin, rows, cout, cols, true, g.data(), false, 0.0, &mut gk);
                        acc(*kernel, Tensor::new(&[3, 3, cin, cout], gk).unwrap());
                    }
                    if nodes[*input].requires_grad {
                        let mut gcols = vec![0.0; rows * 9 * cin];
                        kernels::gemm(
                            rows,
                            cout,
                            9 * cin,
                            g.data(),
                            false,
                            val(*kernel).data(),
                            true,
                            0.0,
                            &mut gcols,
                        );
                        let gi = kernels::col2im(&gcols, n, h, w, cin);
                        acc(*input, Tensor::new(val(*input).shape(), gi).unwrap());
                    }
                }
                Op::MaxPool { input, argmax } => {
                    let mut gi = vec![0.0; val(*input).len()];
                    for (o, &i) in argmax.iter().enumerate() {
                        gi[i] += g.data()[o];
                    }
                    acc(*input, Tensor::new(val(*input).shape(), gi).unwrap());
                }
                Op::Reshape(a) => acc(*a, g.reshape(val(*a).shape()).unwrap()),
                Op::Row(a, index) => {
                    let shape = val(*a).shape();
                    let cols = shape[1];
                    let mut ga = vec![0.0; val(*a).len()];
                    ga[index * cols..(index + 1) * cols].copy_from_slice(g.data());
                    acc(*a, Tensor::new(shape, ga).unwrap());
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = val(p).len();
                        let part = g.data()[offset..offset + len].to_vec();
                        acc(p, Tensor::new(val(p).shape(), part).unwrap());
                        offset += len;
                    }
                }
                Op::PadCols(a) => {
                    let shape = val(*a).shape();
                    let (r, c) = (shape[0], shape[1]);
                    let cols = node.value.shape()[1];
                    let mut ga = Vec::with_capacity(r * c);
                    for i in 0..r {
                        ga.extend_from_slice(&g.data()[i * cols..i * cols + c]);
                    }
                    acc(*a, Tensor::new(shape, ga).unwrap());
                }
                Op::Softmax(a) => {
                    let p = &node.value;
                    let k = *p.shape().last().unwrap();
                    let mut ga = Vec::with_capacity(p.len());
                    for (prow, grow) in p.data().chunks(k).zip(g.data().chunks(k)) {
                        let dot: f64 = prow.iter().zip(grow).map(|(x, y)| x * y).sum();
                        ga.extend(prow.iter().zip(grow).map(|(pi, gi)| pi * (gi - dot)));
                    }
                    acc(*a, Tensor::new(p.shape(), ga).unwrap());
                }
                Op::CrossEntropy { probs, target } => {
                    let s = g.item();
                    let gp = zip_map(target, val(*probs), |t, p| {
                        if p > LOG_CLIP {
                            -s * t / p
                        } else {
                            0.0
                        }
                    });
                    acc(*probs, gp);
                }
                Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), g.item())),
            }
        }
        Ok(Gradients { grads, visited })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
