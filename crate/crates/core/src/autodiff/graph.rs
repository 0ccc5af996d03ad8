//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to the tape, so node order is a topological
//! order. Backward rules are expressed with the same differentiable operations,
//! which means a gradient computed with `create_graph = true` is itself part of
//! the tape and can be differentiated again (the attacks need this to take the
//! derivative of a gradient-matching objective with respect to the dummy input).

use std::collections::HashMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine { x: Var, scale: f64 },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Abs(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Expand(Var),
    SumToAxis { x: Var, axis: usize },
    BroadcastAxis { x: Var, axis: usize },
    Reshape(Var),
    SliceAxis { x: Var, axis: usize, start: usize },
    PadAxis { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeometry },
    ConvInputGrad { g: Var, w: Var, geom: ConvGeometry },
    ConvWeightGrad { x: Var, g: Var, geom: ConvGeometry },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded computation tape. Build a fresh one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    no_grad: bool,
}

/// Gradients of a scalar root with respect to every grad-requiring leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    by_var: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.by_var.get(&var)
    }

    pub fn len(&self) -> usize {
        self.by_var.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_var.is_empty()
    }
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> Error {
    Error::Shape {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

fn conv_out(size: usize, kernel: usize, geom: ConvGeometry) -> Option<usize> {
    let padded = size + 2 * geom.padding;
    if padded < kernel || geom.stride == 0 {
        return None;
    }
    Some((padded - kernel) / geom.stride + 1)
}

impl Graph {
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && !self.no_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = !self.no_grad && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, &[self.shape(a), self.shape(b)]));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(name, out, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out = self.value(x).map(f);
        self.push(name, out, op, &[x])
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &[sa, sb]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = da[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(shape_err("transpose", &[sa]));
        }
        let (r, c) = (sa[0], sa[1]);
        let d = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        self.push("transpose", Tensor::from_parts(vec![c, r], out), Op::Transpose(a), &[a])
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.unary("affine", x, Op::Affine { x, scale }, |v| scale * v + shift)
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, Op::Sigmoid(x), |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, Op::Log(x), f64::ln)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary("sqrt", x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, Op::Abs(x), f64::abs)
    }

    /// `|a - b|` elementwise.
    pub fn abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        self.abs(d)
    }

    // ---- softmax family (last axis) ---------------------------------------

    fn rows_cols(shape: &[usize]) -> (usize, usize) {
        let cols = *shape.last().expect("non-empty shape");
        (shape.iter().product::<usize>() / cols, cols)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let (rows, cols) = Self::rows_cols(v.shape());
        let mut out = v.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                total += *e;
            }
            row.iter_mut().for_each(|e| *e /= total);
        }
        let out = Tensor::from_parts(v.shape().to_vec(), out);
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let (rows, cols) = Self::rows_cols(v.shape());
        let mut out = v.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|e| (e - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|e| *e -= lse);
        }
        let out = Tensor::from_parts(v.shape().to_vec(), out);
        self.push("log_softmax", out, Op::LogSoftmax(x), &[x])
    }

    // ---- reductions and broadcasting ------------------------------------

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Broadcast a one-element tensor to `shape`.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if !v.is_scalar() || shape.is_empty() || shape.contains(&0) {
            return Err(shape_err("expand", &[v.shape(), shape]));
        }
        let out = Tensor::full(shape, v.item());
        self.push("expand", out, Op::Expand(x), &[x])
    }

    /// Sum over every axis except `axis`; result has shape `[shape[axis]]`.
    pub fn sum_to_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape();
        if axis >= shape.len() {
            return Err(shape_err("sum_to_axis", &[shape, &[axis]]));
        }
        let outer: usize = shape[..axis].iter().product();
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let d = v.data();
        let mut out = vec![0.0; dim];
        for o in 0..outer {
            for (a, acc) in out.iter_mut().enumerate() {
                let base = (o * dim + a) * inner;
                *acc += d[base..base + inner].iter().sum::<f64>();
            }
        }
        self.push("sum_to_axis", Tensor::from_parts(vec![dim], out), Op::SumToAxis { x, axis }, &[x])
    }

    /// Broadcast a vector of length `shape[axis]` along every other axis of `shape`.
    pub fn broadcast_axis(&mut self, x: Var, axis: usize, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if v.shape().len() != 1 || axis >= shape.len() || shape[axis] != v.len() || shape.contains(&0) {
            return Err(shape_err("broadcast_axis", &[v.shape(), shape]));
        }
        let outer: usize = shape[..axis].iter().product();
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let d = v.data();
        let mut out = Vec::with_capacity(outer * dim * inner);
        for _ in 0..outer {
            for &val in d.iter().take(dim) {
                out.extend(std::iter::repeat_n(val, inner));
            }
        }
        let out = Tensor::from_parts(shape.to_vec(), out);
        self.push("broadcast_axis", out, Op::BroadcastAxis { x, axis }, &[x])
    }

    /// Adds `bias` (length `shape[axis]`) to `x` along `axis`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let b = self.broadcast_axis(bias, axis, &shape)?;
        self.add(x, b)
    }

    // ---- structural ----------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != v.len() {
            return Err(shape_err("reshape", &[v.shape(), shape]));
        }
        let out = Tensor::from_parts(shape.to_vec(), v.data().to_vec());
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        self.reshape(x, &[n])
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err("slice_axis", &[shape, &[axis, start, len]]));
        }
        let outer: usize = shape[..axis].iter().product();
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let d = v.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let out = Tensor::from_parts(out_shape, out);
        self.push("slice_axis", out, Op::SliceAxis { x, axis, start }, &[x])
    }

    /// Zero-pads `x` along `axis` so that it occupies `start..start + len` of `size`.
    pub fn pad_axis(&mut self, x: Var, axis: usize, start: usize, size: usize) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape();
        if axis >= shape.len() || start + shape[axis] > size {
            return Err(shape_err("pad_axis", &[shape, &[axis, start, size]]));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let d = v.data();
        let mut out = vec![0.0; outer * size * inner];
        for o in 0..outer {
            let src = o * len * inner;
            let dst = (o * size + start) * inner;
            out[dst..dst + len * inner].copy_from_slice(&d[src..src + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = size;
        let out = Tensor::from_parts(out_shape, out);
        self.push("pad_axis", out, Op::PadAxis { x, axis, start }, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::usage("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", &[&base, &[axis]]));
        }
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &[&base, s]));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = xs.iter().map(|&x| self.shape(x)[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let chunk = self.shape(x)[axis] * inner;
                out.extend_from_slice(&self.value(x).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        let out = Tensor::from_parts(out_shape, out);
        self.push(
            "concat",
            out,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        )
    }

    // ---- convolution -----------------------------------------------------

    /// `x: [N, C, H, W]`, `w: [O, C, KH, KW]` -> `[N, O, H', W']` with zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeometry) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(shape_err("conv2d", &[&sx, &sw]));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        let (Some(oh), Some(ow)) = (conv_out(h, kh, geom), conv_out(wd, kw, geom)) else {
            return Err(shape_err("conv2d", &[&sx, &sw]));
        };
        let (dx, dw) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; n * o * oh * ow];
        let (s, p) = (geom.stride as isize, geom.padding as isize);
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for ky in 0..kh {
                                let iy = oy as isize * s - p + ky as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = ox as isize * s - p + kx as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += dx[((b * c + ic) * h + iy as usize) * wd + ix as usize]
                                        * dw[((oc * c + ic) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((b * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![n, o, oh, ow], out);
        self.push("conv2d", out, Op::Conv2d { x, w, geom }, &[x, w])
    }

    /// Vector-Jacobian product of `conv2d` with respect to its input.
    /// `g: [N, O, H', W']`, `w: [O, C, KH, KW]` -> `[N, C, in_hw.0, in_hw.1]`.
    pub fn conv2d_input_grad(&mut self, g: Var, w: Var, geom: ConvGeometry, in_hw: (usize, usize)) -> Result<Var> {
        let (sg, sw) = (self.shape(g).to_vec(), self.shape(w).to_vec());
        let (h, wd) = in_hw;
        let ok = sg.len() == 4
            && sw.len() == 4
            && sg[1] == sw[0]
            && conv_out(h, sw[2], geom) == Some(sg[2])
            && conv_out(wd, sw[3], geom) == Some(sg[3]);
        if !ok {
            return Err(shape_err("conv2d_input_grad", &[&sg, &sw, &[h, wd]]));
        }
        let (n, o, oh, ow) = (sg[0], sg[1], sg[2], sg[3]);
        let (c, kh, kw) = (sw[1], sw[2], sw[3]);
        let (dg, dw) = (self.value(g).data(), self.value(w).data());
        let mut out = vec![0.0; n * c * h * wd];
        let (s, p) = (geom.stride as isize, geom.padding as isize);
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = dg[((b * o + oc) * oh + oy) * ow + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        for ic in 0..c {
                            for ky in 0..kh {
                                let iy = oy as isize * s - p + ky as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = ox as isize * s - p + kx as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    out[((b * c + ic) * h + iy as usize) * wd + ix as usize] +=
                                        gv * dw[((oc * c + ic) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![n, c, h, wd], out);
        self.push("conv2d_input_grad", out, Op::ConvInputGrad { g, w, geom }, &[g, w])
    }

    /// Vector-Jacobian product of `conv2d` with respect to its kernel.
    /// `x: [N, C, H, W]`, `g: [N, O, H', W']` -> `[O, C, kernel.0, kernel.1]`.
    pub fn conv2d_weight_grad(&mut self, x: Var, g: Var, geom: ConvGeometry, kernel: (usize, usize)) -> Result<Var> {
        let (sx, sg) = (self.shape(x).to_vec(), self.shape(g).to_vec());
        let (kh, kw) = kernel;
        let ok = sx.len() == 4
            && sg.len() == 4
            && sx[0] == sg[0]
            && conv_out(sx[2], kh, geom) == Some(sg[2])
            && conv_out(sx[3], kw, geom) == Some(sg[3]);
        if !ok {
            return Err(shape_err("conv2d_weight_grad", &[&sx, &sg, &[kh, kw]]));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, oh, ow) = (sg[1], sg[2], sg[3]);
        let (dx, dg) = (self.value(x).data(), self.value(g).data());
        let mut out = vec![0.0; o * c * kh * kw];
        let (s, p) = (geom.stride as isize, geom.padding as isize);
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = dg[((b * o + oc) * oh + oy) * ow + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        for ic in 0..c {
                            for ky in 0..kh {
                                let iy = oy as isize * s - p + ky as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = ox as isize * s - p + kx as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    out[((oc * c + ic) * kh + ky) * kw + kx] +=
                                        gv * dx[((b * c + ic) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![o, c, kh, kw], out);
        self.push("conv2d_weight_grad", out, Op::ConvWeightGrad { x, g, geom }, &[x, g])
    }

    // ---- differentiation -------------------------------------------------

    /// Gradients of the scalar `root` with respect to `wrt`.
    ///
    /// With `create_graph` the returned gradients are differentiable nodes;
    /// otherwise they are constants. Targets that `root` does not depend on
    /// receive zeros.
    pub fn grad(&mut self, root: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        if !self.value(root).is_scalar() {
            return Err(Error::usage(format!(
                "backward from non-scalar root of shape {:?}",
                self.shape(root)
            )));
        }
        let n = root.0 + 1;
        // Nodes on some path from a target to the root.
        let mut relevant = vec![false; n];
        for &w in wrt {
            if w.0 < n {
                relevant[w.0] = true;
            }
        }
        for i in 0..n {
            if relevant[i] || !self.nodes[i].requires_grad {
                continue;
            }
            relevant[i] = op_inputs(&self.nodes[i].op).iter().any(|v| relevant[v.0]);
        }

        let saved = self.no_grad;
        self.no_grad = !create_graph;
        let result = self.propagate(root, &relevant);
        self.no_grad = saved;
        let adjoint = result?;

        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            match adjoint.get(w.0).copied().flatten() {
                Some(g) => out.push(g),
                None => {
                    let zeros = Tensor::zeros(self.shape(w));
                    out.push(self.constant(zeros));
                }
            }
        }
        Ok(out)
    }

    fn propagate(&mut self, root: Var, relevant: &[bool]) -> Result<Vec<Option<Var>>> {
        let n = root.0 + 1;
        let mut adjoint: Vec<Option<Var>> = vec![None; n];
        let seed = Tensor::full(self.shape(root), 1.0);
        adjoint[root.0] = Some(self.constant(seed));
        for i in (0..n).rev() {
            let Some(g) = adjoint[i] else { continue };
            if !relevant[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let contributions = self.backward_rule(Var(i), &op, g, relevant)?;
            for (input, grad) in contributions {
                adjoint[input.0] = Some(match adjoint[input.0] {
                    Some(prev) => self.add(prev, grad)?,
                    None => grad,
                });
            }
        }
        Ok(adjoint)
    }

    fn backward_rule(&mut self, out: Var, op: &Op, g: Var, relevant: &[bool]) -> Result<Vec<(Var, Var)>> {
        let want = |v: &Var| relevant[v.0];
        let mut grads = Vec::new();
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if want(&a) {
                    let bt = self.transpose(b)?;
                    grads.push((a, self.matmul(g, bt)?));
                }
                if want(&b) {
                    let at = self.transpose(a)?;
                    grads.push((b, self.matmul(at, g)?));
                }
            }
            Op::Transpose(a) => grads.push((a, self.transpose(g)?)),
            Op::Add(a, b) => {
                if want(&a) {
                    grads.push((a, g));
                }
                if want(&b) {
                    grads.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if want(&a) {
                    grads.push((a, g));
                }
                if want(&b) {
                    grads.push((b, self.neg(g)?));
                }
            }
            Op::Mul(a, b) => {
                if want(&a) {
                    grads.push((a, self.mul(g, b)?));
                }
                if want(&b) {
                    grads.push((b, self.mul(g, a)?));
                }
            }
            Op::Div(a, b) => {
                if want(&a) {
                    grads.push((a, self.div(g, b)?));
                }
                if want(&b) {
                    let gy = self.mul(g, out)?;
                    let q = self.div(gy, b)?;
                    grads.push((b, self.neg(q)?));
                }
            }
            Op::Affine { x, scale } => grads.push((x, self.scale(g, scale)?)),
            Op::Relu(x) => {
                let mask = self.value(x).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let mask = self.constant(mask);
                grads.push((x, self.mul(g, mask)?));
            }
            Op::Sigmoid(x) => {
                let one_minus = self.affine(out, -1.0, 1.0)?;
                let d = self.mul(out, one_minus)?;
                grads.push((x, self.mul(g, d)?));
            }
            Op::Exp(x) => grads.push((x, self.mul(g, out)?)),
            Op::Log(x) => grads.push((x, self.div(g, x)?)),
            Op::Sqrt(x) => {
                let half = self.scale(g, 0.5)?;
                grads.push((x, self.div(half, out)?));
            }
            Op::Abs(x) => {
                let sign = self.value(x).map(f64::signum);
                let sign = self.constant(sign);
                grads.push((x, self.mul(g, sign)?));
            }
            Op::Softmax(x) => {
                // y * (g - rowsum(g * y))
                let shape = self.shape(x).to_vec();
                let (g2, y2) = (self.as_rows(g)?, self.as_rows(out)?);
                let gy = self.mul(g2, y2)?;
                let s = self.sum_to_axis(gy, 0)?;
                let rows_shape = self.shape(g2).to_vec();
                let sb = self.broadcast_axis(s, 0, &rows_shape)?;
                let centered = self.sub(g2, sb)?;
                let dx = self.mul(y2, centered)?;
                grads.push((x, self.restore_shape(dx, &shape)?));
            }
            Op::LogSoftmax(x) => {
                // g - softmax(x) * rowsum(g)
                let shape = self.shape(x).to_vec();
                let (g2, y2) = (self.as_rows(g)?, self.as_rows(out)?);
                let p = self.exp(y2)?;
                let s = self.sum_to_axis(g2, 0)?;
                let rows_shape = self.shape(g2).to_vec();
                let sb = self.broadcast_axis(s, 0, &rows_shape)?;
                let ps = self.mul(p, sb)?;
                let dx = self.sub(g2, ps)?;
                grads.push((x, self.restore_shape(dx, &shape)?));
            }
            Op::Sum(x) => {
                let shape = self.shape(x).to_vec();
                grads.push((x, self.expand(g, &shape)?));
            }
            Op::Expand(x) => {
                let s = self.sum(g)?;
                let shape = self.shape(x).to_vec();
                grads.push((x, self.restore_shape(s, &shape)?));
            }
            Op::SumToAxis { x, axis } => {
                let shape = self.shape(x).to_vec();
                grads.push((x, self.broadcast_axis(g, axis, &shape)?));
            }
            Op::BroadcastAxis { x, axis } => grads.push((x, self.sum_to_axis(g, axis)?)),
            Op::Reshape(x) => {
                let shape = self.shape(x).to_vec();
                grads.push((x, self.reshape(g, &shape)?));
            }
            Op::SliceAxis { x, axis, start } => {
                let size = self.shape(x)[axis];
                grads.push((x, self.pad_axis(g, axis, start, size)?));
            }
            Op::PadAxis { x, axis, start } => {
                let len = self.shape(x)[axis];
                grads.push((x, self.slice_axis(g, axis, start, len)?));
            }
            Op::Concat { ref xs, axis } => {
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[axis];
                    if want(&x) {
                        grads.push((x, self.slice_axis(g, axis, offset, len)?));
                    }
                    offset += len;
                }
            }
            Op::Conv2d { x, w, geom } => {
                if want(&x) {
                    let s = self.shape(x);
                    let hw = (s[2], s[3]);
                    grads.push((x, self.conv2d_input_grad(g, w, geom, hw)?));
                }
                if want(&w) {
                    let s = self.shape(w);
                    let k = (s[2], s[3]);
                    grads.push((w, self.conv2d_weight_grad(x, g, geom, k)?));
                }
            }
            Op::ConvInputGrad { g: up, w, geom } => {
                if want(&up) {
                    grads.push((up, self.conv2d(g, w, geom)?));
                }
                if want(&w) {
                    let s = self.shape(w);
                    let k = (s[2], s[3]);
                    grads.push((w, self.conv2d_weight_grad(g, up, geom, k)?));
                }
            }
            Op::ConvWeightGrad { x, g: up, geom } => {
                if want(&x) {
                    let s = self.shape(x);
                    let hw = (s[2], s[3]);
                    grads.push((x, self.conv2d_input_grad(up, g, geom, hw)?));
                }
                if want(&up) {
                    grads.push((up, self.conv2d(x, g, geom)?));
                }
            }
        }
        Ok(grads)
    }

    fn as_rows(&mut self, v: Var) -> Result<Var> {
        let shape = self.shape(v).to_vec();
        if shape.len() == 2 {
            return Ok(v);
        }
        let (r, c) = Self::rows_cols(&shape);
        self.reshape(v, &[r, c])
    }

    fn restore_shape(&mut self, v: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(v) == shape {
            return Ok(v);
        }
        self.reshape(v, shape)
    }

    /// Computes gradients of `root` for every grad-requiring leaf, without
    /// recording the backward pass.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        let leaves: Vec<Var> = (0..=root.0)
            .filter(|&i| self.nodes[i].requires_grad && matches!(self.nodes[i].op, Op::Leaf))
            .map(Var)
            .collect();
        let grads = self.grad(root, &leaves, false)?;
        let by_var = leaves
            .into_iter()
            .zip(grads)
            .map(|(leaf, g)| (leaf, self.value(g).clone()))
            .collect();
        Ok(Gradients { by_var })
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match *op {
        Op::Leaf => vec![],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::Conv2d { x: a, w: b, .. }
        | Op::ConvInputGrad { g: a, w: b, .. }
        | Op::ConvWeightGrad { x: a, g: b, .. } => vec![a, b],
        Op::Transpose(x)
        | Op::Affine { x, .. }
        | Op::Relu(x)
        | Op::Sigmoid(x)
        | Op::Exp(x)
        | Op::Log(x)
        | Op::Sqrt(x)
        | Op::Abs(x)
        | Op::Softmax(x)
        | Op::LogSoftmax(x)
        | Op::Sum(x)
        | Op::Expand(x)
        | Op::SumToAxis { x, .. }
        | Op::BroadcastAxis { x, .. }
        | Op::Reshape(x)
        | Op::SliceAxis { x, .. }
        | Op::PadAxis { x, .. } => vec![x],
        Op::Concat { ref xs, .. } => xs.clone(),
    }
}
