//! Operator catalog: every forward op records an [`Op`] and the reverse pass
//! dispatches on it in [`backward_node`].

use super::params::BufferId;
use super::tape::{Node, StatUpdate, Var};
use super::{AutodiffError, Tensor};

pub(crate) const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Unary {
    Relu,
    Gelu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Square,
    Sqrt,
    Softplus,
    Recip,
}

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    AddBias(usize, usize),
    MulRows(usize, usize),
    Concat { inputs: Vec<usize>, axis: usize },
    IndexSelect { input: usize, indices: Vec<usize> },
    ScatterAddRows { input: usize, indices: Vec<usize> },
    Reshape(usize),
    Permute { input: usize, axes: Vec<usize> },
    Narrow { input: usize, start: usize },
    Unary(usize, Unary),
    Softmax(usize),
    MaxAxis { input: usize, argmax: Vec<usize> },
    SumAxis { input: usize, axis: usize, scale: f64 },
    SumAll { input: usize, scale: f64 },
    LayerNorm { input: usize, gamma: usize, beta: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    BatchNorm { input: usize, gamma: usize, beta: usize, xhat: Vec<f64>, rstd: Vec<f64>, batch_stats: bool },
    PairwiseSqDist(usize, usize),
    NearestDist { from: usize, to: usize, argmin: Vec<usize> },
    TopK { input: usize, indices: Vec<usize> },
    SmoothL1 { input: usize, target: Vec<f64>, beta: f64 },
    NormLast(usize),
}

fn mismatch(msg: String) -> AutodiffError {
    AutodiffError::ShapeMismatch(msg)
}

/// `(outer, axis length, inner)` for reductions/concats along `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = if cols == 0 { 0 } else { shape.iter().product::<usize>() / cols };
    (rows, cols)
}

/// `C = A·B + beta·C` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices whose extents cover the strided m×k, k×n and
    // m×n views; `c` is row-major contiguous and does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

pub(crate) fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return (out, out_shape);
    }
    let last = nd - 1;
    let (last_len, last_stride) = (out_shape[last], strides[last]);
    let mut idx = vec![0usize; nd];
    let mut base = 0usize;
    while out.len() < total {
        let mut off = base;
        for _ in 0..last_len {
            out.push(data[off]);
            off += last_stride;
        }
        // advance the multi-index over all but the last axis
        let mut d = last;
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            idx[d] += 1;
            base += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

impl<'t> Var<'t> {
    fn same_shape(self, other: Var<'t>, name: &str) -> Result<(), AutodiffError> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(mismatch(format!("{name}: {a:?} vs {b:?}")));
        }
        Ok(())
    }

    fn elementwise(self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>, AutodiffError> {
        self.same_shape(other, name)?;
        let out = {
            let a = self.value();
            let b = other.value();
            let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
            Tensor::new(a.shape(), data)?
        };
        let ng = self.needs_grad() || other.needs_grad();
        Ok(self.tape.push(out, op, ng, name))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.elementwise(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.elementwise(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.elementwise(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    /// Scalar · tensor.
    pub fn scale(self, s: f64) -> Var<'t> {
        let out = {
            let a = self.value();
            Tensor::new(a.shape(), a.data().iter().map(|x| x * s).collect()).unwrap()
        };
        self.tape.push(out, Op::Scale(self.id, s), self.needs_grad(), "scale")
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let out = {
            let a = self.value();
            Tensor::new(a.shape(), a.data().iter().map(|x| x + s).collect()).unwrap()
        };
        self.tape.push(out, Op::AddScalar(self.id), self.needs_grad(), "add_scalar")
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let out = {
            let a = self.value();
            let b = other.value();
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(mismatch(format!("matmul: {sa:?} · {sb:?}")));
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, a.data(), k as isize, 1, b.data(), n as isize, 1, 0.0, &mut c);
            Tensor::new(&[m, n], c)?
        };
        let ng = self.needs_grad() || other.needs_grad();
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id), ng, "matmul"))
    }

    /// `[b, m, k] · [b, k, n]`.
    pub fn bmm(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let out = {
            let a = self.value();
            let b = other.value();
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
                return Err(mismatch(format!("bmm: {sa:?} · {sb:?}")));
            }
            let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let mut c = vec![0.0; bs * m * n];
            for i in 0..bs {
                gemm(
                    m,
                    k,
                    n,
                    &a.data()[i * m * k..],
                    k as isize,
                    1,
                    &b.data()[i * k * n..],
                    n as isize,
                    1,
                    0.0,
                    &mut c[i * m * n..],
                );
            }
            Tensor::new(&[bs, m, n], c)?
        };
        let ng = self.needs_grad() || other.needs_grad();
        Ok(self.tape.push(out, Op::BatchMatMul(self.id, other.id), ng, "bmm"))
    }

    /// Explicit row broadcast: `x[r, c] + b[c]`.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let out = {
            let x = self.value();
            let b = bias.value();
            let (_, c) = rows_cols(x.shape());
            if b.len() != c || b.ndim() != 1 {
                return Err(mismatch(format!("add_bias: {:?} + {:?}", x.shape(), b.shape())));
            }
            let mut data = x.data().to_vec();
            for row in data.chunks_exact_mut(c) {
                for (v, bb) in row.iter_mut().zip(b.data()) {
                    *v += bb;
                }
            }
            Tensor::new(x.shape(), data)?
        };
        let ng = self.needs_grad() || bias.needs_grad();
        Ok(self.tape.push(out, Op::AddBias(self.id, bias.id), ng, "add_bias"))
    }

    /// Explicit column broadcast: `x[r, c] * s[r]` (s may also be `[r, 1]`).
    pub fn mul_rows(self, s: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let out = {
            let x = self.value();
            let sv = s.value();
            let (r, c) = rows_cols(x.shape());
            if sv.len() != r {
                return Err(mismatch(format!("mul_rows: {:?} * {:?}", x.shape(), sv.shape())));
            }
            let mut data = x.data().to_vec();
            for (row, f) in data.chunks_exact_mut(c.max(1)).zip(sv.data()) {
                row.iter_mut().for_each(|v| *v *= f);
            }
            Tensor::new(x.shape(), data)?
        };
        let ng = self.needs_grad() || s.needs_grad();
        Ok(self.tape.push(out, Op::MulRows(self.id, s.id), ng, "mul_rows"))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>, AutodiffError> {
        let first = parts.first().ok_or_else(|| mismatch("concat: no inputs".into()))?;
        let tape = first.tape;
        let out = {
            let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let s0 = vals[0].shape().to_vec();
            if axis >= s0.len() {
                return Err(mismatch(format!("concat: axis {axis} on {s0:?}")));
            }
            for v in &vals[1..] {
                let s = v.shape();
                if s.len() != s0.len() || s.iter().zip(&s0).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                    return Err(mismatch(format!("concat: {s0:?} vs {s:?} on axis {axis}")));
                }
            }
            let (outer, _, inner) = split_axis(&s0, axis);
            let total_axis: usize = vals.iter().map(|v| v.shape()[axis]).sum();
            let mut data = Vec::with_capacity(outer * total_axis * inner);
            for o in 0..outer {
                for v in &vals {
                    let block = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
                }
            }
            let mut shape = s0;
            shape[axis] = total_axis;
            Tensor::new(&shape, data)?
        };
        let ng = parts.iter().any(|p| p.needs_grad());
        Ok(tape.push(out, Op::Concat { inputs: parts.iter().map(|p| p.id).collect(), axis }, ng, "concat"))
    }

    /// Gathers slices along axis 0.
    pub fn index_select(self, indices: &[usize]) -> Result<Var<'t>, AutodiffError> {
        let out = {
            let x = self.value();
            let shape = x.shape();
            if shape.is_empty() {
                return Err(mismatch("index_select on a scalar".into()));
            }
            let row: usize = shape[1..].iter().product();
            let mut data = Vec::with_capacity(indices.len() * row);
            for &i in indices {
                if i >= shape[0] {
                    return Err(AutodiffError::Index(format!("index {i} out of {}", shape[0])));
                }
                data.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
            }
            let mut s = shape.to_vec();
            s[0] = indices.len();
            Tensor::new(&s, data)?
        };
        Ok(self.tape.push(out, Op::IndexSelect { input: self.id, indices: indices.to_vec() }, self.needs_grad(), "index_select"))
    }

    /// `out[indices[i]] += x[i]` over rows, producing `out_rows` rows.
    pub fn scatter_add_rows(self, indices: &[usize], out_rows: usize) -> Result<Var<'t>, AutodiffError> {
        let out = {
            let x = self.value();
            let shape = x.shape();
            if shape.is_empty() || shape[0] != indices.len() {
                return Err(mismatch(format!("scatter_add_rows: {shape:?} with {} indices", indices.len())));
            }
            let row: usize = shape[1..].iter().product();
            let mut data = vec![0.0; out_rows * row];
            for (i, &dst) in indices.iter().enumerate() {
                if dst >= out_rows {
                    return Err(AutodiffError::Index(format!("index {dst} out of {out_rows}")));
                }
                for (o, v) in data[dst * row..(dst + 1) * row].iter_mut().zip(&x.data()[i * row..(i + 1) * row]) {
                    *o += v;
                }
            }
            let mut s = shape.to_vec();
            s[0] = out_rows;
            Tensor::new(&s, data)?
        };
        Ok(self.tape.push(out, Op::ScatterAddRows { input: self.id, indices: indices.to_vec() }, self.needs_grad(), "scatter_add_rows"))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>, AutodiffError> {
        let out = self.value().clone().reshaped(shape)?;
        Ok(self.tape.push(out, Op::Reshape(self.id), self.needs_grad(), "reshape"))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>, AutodiffError> {
        let out = {
            let x = self.value();
            let nd = x.ndim();
            let mut seen = vec![false; nd];
            if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
                return Err(mismatch(format!("permute {axes:?} on {:?}", x.shape())));
            }
            let (data, shape) = permute_data(x.data(), x.shape(), axes);
            Tensor::new(&shape, data)?
        };
        Ok(self.tape.push(out, Op::Permute { input: self.id, axes: axes.to_vec() }, self.needs_grad(), "permute"))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>, AutodiffError> {
        let nd = self.value().ndim();
        if nd < 2 {
            return Err(mismatch("transpose needs >= 2 dims".into()));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(&axes)
    }

    /// Rows `start..start+len` along axis 0.
    pub fn narrow(self, start: usize, len: usize) -> Result<Var<'t>, AutodiffError> {
        let out = {
            let x = self.value();
            let shape = x.shape();
            if shape.is_empty() || start + len > shape[0] {
                return Err(mismatch(format!("narrow {start}+{len} on {shape:?}")));
            }
            let row: usize = shape[1..].iter().product();
            let mut s = shape.to_vec();
            s[0] = len;
            Tensor::new(&s, x.data()[start * row..(start + len) * row].to_vec())?
        };
        Ok(self.tape.push(out, Op::Narrow { input: self.id, start }, self.needs_grad(), "narrow"))
    }

    fn unary(self, kind: Unary) -> Var<'t> {
        let out = {
            let x = self.value();
            let f: fn(f64) -> f64 = match kind {
                Unary::Relu => |v| v.max(0.0),
                Unary::Gelu => |v| gelu(v).0,
                Unary::Sigmoid => sigmoid,
                Unary::Tanh => f64::tanh,
                Unary::Exp => f64::exp,
                Unary::Log => f64::ln,
                Unary::Square => |v| v * v,
                Unary::Sqrt => f64::sqrt,
                Unary::Softplus => softplus,
                Unary::Recip => |v| 1.0 / v,
            };
            Tensor::new(x.shape(), x.data().iter().map(|v| f(*v)).collect()).unwrap()
        };
        let name = match kind {
            Unary::Relu => "relu",
            Unary::Gelu => "gelu",
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
            Unary::Softplus => "softplus",
            Unary::Recip => "recip",
        };
        self.tape.push(out, Op::Unary(self.id, kind), self.needs_grad(), name)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Unary::Relu)
    }
    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'t> {
        self.unary(Unary::Gelu)
    }
    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }
    pub fn tanh(self) -> Var<'t> {
        self.unary(Unary::Tanh)
    }
    pub fn exp(self) -> Var<'t> {
        self.unary(Unary::Exp)
    }
    pub fn log(self) -> Var<'t> {
        self.unary(Unary::Log)
    }
    pub fn square(self) -> Var<'t> {
        self.unary(Unary::Square)
    }
    /// The gradient at exactly zero is taken as zero.
    pub fn sqrt(self) -> Var<'t> {
        self.unary(Unary::Sqrt)
    }
    pub fn softplus(self) -> Var<'t> {
        self.unary(Unary::Softplus)
    }
    pub fn recip(self) -> Var<'t> {
        self.unary(Unary::Recip)
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let out = {
            let x = self.value();
            let (_, c) = rows_cols(x.shape());
            let mut data = x.data().to_vec();
            for row in data.chunks_exact_mut(c.max(1)) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                row.iter_mut().for_each(|v| *v /= s);
            }
            Tensor::new(x.shape(), data).unwrap()
        };
        self.tape.push(out, Op::Softmax(self.id), self.needs_grad(), "softmax")
    }

    /// Max over `axis`, removing it. The argmax is saved for backward.
    pub fn max_axis(self, axis: usize) -> Result<Var<'t>, AutodiffError> {
        let (out, argmax) = {
            let x = self.value();
            let shape = x.shape();
            if axis >= shape.len() || shape[axis] == 0 {
                return Err(mismatch(format!("max_axis {axis} on {shape:?}")));
            }
            let (outer, len, inner) = split_axis(shape, axis);
            let mut data = Vec::with_capacity(outer * inner);
            let mut arg = Vec::with_capacity(outer * inner);
            let xd = x.data();
            for o in 0..outer {
                let base = o * len * inner;
                for i in 0..inner {
                    let mut best = base + i;
                    for l in 1..len {
                        let idx = base + l * inner + i;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    data.push(xd[best]);
                    arg.push(best);
                }
            }
            let mut s = shape.to_vec();
            s.remove(axis);
            (Tensor::new(&s, data)?, arg)
        };
        Ok(self.tape.push(out, Op::MaxAxis { input: self.id, argmax }, self.needs_grad(), "max_axis"))
    }

    /// Min over `axis` (as `-max(-x)`).
    pub fn min_axis(self, axis: usize) -> Result<Var<'t>, AutodiffError> {
        Ok(self.scale(-1.0).max_axis(axis)?.scale(-1.0))
    }

    fn reduce_axis(self, axis: usize, mean: bool) -> Result<Var<'t>, AutodiffError> {
        let (out, scale) = {
            let x = self.value();
            let shape = x.shape();
            if axis >= shape.len() {
                return Err(mismatch(format!("reduce axis {axis} on {shape:?}")));
            }
            let (outer, len, inner) = split_axis(shape, axis);
            let scale = if mean { 1.0 / len as f64 } else { 1.0 };
            let mut data = vec![0.0; outer * inner];
            let xd = x.data();
            for o in 0..outer {
                for l in 0..len {
                    let src = &xd[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (d, v) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
            data.iter_mut().for_each(|v| *v *= scale);
            let mut s = shape.to_vec();
            s.remove(axis);
            (Tensor::new(&s, data)?, scale)
        };
        Ok(self.tape.push(out, Op::SumAxis { input: self.id, axis, scale }, self.needs_grad(), "reduce_axis"))
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>, AutodiffError> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>, AutodiffError> {
        self.reduce_axis(axis, true)
    }

    fn reduce_all(self, mean: bool) -> Var<'t> {
        let (out, scale) = {
            let x = self.value();
            let scale = if mean { 1.0 / x.len() as f64 } else { 1.0 };
            (Tensor::scalar(crate::numeric::compensated_sum(x.data().iter().copied()) * scale), scale)
        };
        self.tape.push(out, Op::SumAll { input: self.id, scale }, self.needs_grad(), "reduce_all")
    }

    pub fn sum(self) -> Var<'t> {
        self.reduce_all(false)
    }

    pub fn mean(self) -> Var<'t> {
        self.reduce_all(true)
    }

    /// Normalizes over the last axis, then `γ·x̂ + β`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let (out, xhat, rstd) = {
            let x = self.value();
            let (g, b) = (gamma.value(), beta.value());
            let (r, c) = rows_cols(x.shape());
            if g.len() != c || b.len() != c {
                return Err(mismatch(format!("layer_norm: {:?} with γ {:?}", x.shape(), g.shape())));
            }
            let mut xhat = vec![0.0; r * c];
            let mut rstd = vec![0.0; r];
            let mut y = vec![0.0; r * c];
            for i in 0..r {
                let row = &x.data()[i * c..(i + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let rs = 1.0 / (var + NORM_EPS).sqrt();
                rstd[i] = rs;
                for j in 0..c {
                    let h = (row[j] - mean) * rs;
                    xhat[i * c + j] = h;
                    y[i * c + j] = h * g.data()[j] + b.data()[j];
                }
            }
            (Tensor::new(x.shape(), y)?, xhat, rstd)
        };
        let ng = self.needs_grad() || gamma.needs_grad() || beta.needs_grad();
        Ok(self.tape.push(
            out,
            Op::LayerNorm { input: self.id, gamma: gamma.id, beta: beta.id, xhat, rstd },
            ng,
            "layer_norm",
        ))
    }

    /// Batch norm over the rows of `[r, c]` (channels last). On a training
    /// tape batch statistics are used and queued as a running-stat update for
    /// `buffer`; otherwise `running_mean`/`running_var` are used.
    pub fn batch_norm(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        buffer: BufferId,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var<'t>, AutodiffError> {
        let training = self.tape.is_training();
        let (out, xhat, rstd) = {
            let x = self.value();
            let (g, b) = (gamma.value(), beta.value());
            let (r, c) = rows_cols(x.shape());
            if g.len() != c || b.len() != c || running_mean.len() != c || running_var.len() != c {
                return Err(mismatch(format!("batch_norm: {:?} with γ {:?}", x.shape(), g.shape())));
            }
            if training && r < 2 {
                return Err(mismatch("batch_norm needs >= 2 rows in training".into()));
            }
            let xd = x.data();
            let (mean, var) = if training {
                let mut mean = vec![0.0; c];
                for row in xd.chunks_exact(c) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= r as f64);
                let mut var = vec![0.0; c];
                for row in xd.chunks_exact(c) {
                    for j in 0..c {
                        let d = row[j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= r as f64);
                let unbiased: Vec<f64> = var.iter().map(|v| v * r as f64 / (r - 1) as f64).collect();
                self.tape.record_stats(StatUpdate { buffer, mean: mean.clone(), var: unbiased });
                (mean, var)
            } else {
                (running_mean.to_vec(), running_var.to_vec())
            };
            let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
            let mut xhat = vec![0.0; r * c];
            let mut y = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    let h = (xd[i * c + j] - mean[j]) * rstd[j];
                    xhat[i * c + j] = h;
                    y[i * c + j] = h * g.data()[j] + b.data()[j];
                }
            }
            (Tensor::new(x.shape(), y)?, xhat, rstd)
        };
        let ng = self.needs_grad() || gamma.needs_grad() || beta.needs_grad();
        Ok(self.tape.push(
            out,
            Op::BatchNorm { input: self.id, gamma: gamma.id, beta: beta.id, xhat, rstd, batch_stats: training },
            ng,
            "batch_norm",
        ))
    }

    /// `[n, d]` vs `[m, d]` → `[n, m]` squared Euclidean distances.
    pub fn pairwise_sq_dist(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let out = {
            let a = self.value();
            let b = other.value();
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
                return Err(mismatch(format!("pairwise_sq_dist: {sa:?} vs {sb:?}")));
            }
            let (n, m, d) = (sa[0], sb[0], sa[1]);
            let mut data = Vec::with_capacity(n * m);
            for i in 0..n {
                let ai = &a.data()[i * d..(i + 1) * d];
                for j in 0..m {
                    let bj = &b.data()[j * d..(j + 1) * d];
                    data.push(ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum());
                }
            }
            Tensor::new(&[n, m], data)?
        };
        let ng = self.needs_grad() || other.needs_grad();
        Ok(self.tape.push(out, Op::PairwiseSqDist(self.id, other.id), ng, "pairwise_sq_dist"))
    }

    /// For each row of `self` (`[n, 3]`), the Euclidean distance to its
    /// nearest row of `other` (`[m, 3]`). Equivalent to
    /// `pairwise_sq_dist → min_axis(1) → sqrt` without materializing `n×m`.
    pub fn nearest_dist(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let (out, argmin) = {
            let a = self.value();
            let b = other.value();
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != 3 || sb[1] != 3 || sb[0] == 0 {
                return Err(mismatch(format!("nearest_dist: {sa:?} vs {sb:?}")));
            }
            let bd = b.data();
            let mut dist = Vec::with_capacity(sa[0]);
            let mut arg = Vec::with_capacity(sa[0]);
            for p in a.data().chunks_exact(3) {
                let mut best = f64::INFINITY;
                let mut bi = 0;
                for (j, q) in bd.chunks_exact(3).enumerate() {
                    let (dx, dy, dz) = (p[0] - q[0], p[1] - q[1], p[2] - q[2]);
                    let d = dx * dx + dy * dy + dz * dz;
                    if d < best {
                        best = d;
                        bi = j;
                    }
                }
                dist.push(best.sqrt());
                arg.push(bi);
            }
            (Tensor::new(&[sa[0]], dist)?, arg)
        };
        let ng = self.needs_grad() || other.needs_grad();
        Ok(self.tape.push(out, Op::NearestDist { from: self.id, to: other.id, argmin }, ng, "nearest_dist"))
    }

    /// Largest `k` entries along the last axis (descending). Values carry
    /// gradient to the selected slots only; the returned indices are local
    /// to each row.
    pub fn topk(self, k: usize) -> Result<(Var<'t>, Vec<usize>), AutodiffError> {
        let (out, flat, local) = {
            let x = self.value();
            let (r, c) = rows_cols(x.shape());
            if k > c || x.ndim() == 0 {
                return Err(mismatch(format!("topk {k} on {:?}", x.shape())));
            }
            let mut vals = Vec::with_capacity(r * k);
            let mut flat = Vec::with_capacity(r * k);
            let mut local = Vec::with_capacity(r * k);
            let mut order: Vec<usize> = Vec::with_capacity(c);
            for i in 0..r {
                let row = &x.data()[i * c..(i + 1) * c];
                order.clear();
                order.extend(0..c);
                order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
                for &j in &order[..k] {
                    vals.push(row[j]);
                    flat.push(i * c + j);
                    local.push(j);
                }
            }
            let mut s = x.shape().to_vec();
            *s.last_mut().unwrap() = k;
            (Tensor::new(&s, vals)?, flat, local)
        };
        Ok((self.tape.push(out, Op::TopK { input: self.id, indices: flat }, self.needs_grad(), "topk"), local))
    }

    /// Elementwise smooth-L1 against a constant target:
    /// `0.5 d²/β` for `|d| < β`, else `|d| - 0.5β`.
    pub fn smooth_l1(self, target: &[f64], beta: f64) -> Result<Var<'t>, AutodiffError> {
        let out = {
            let x = self.value();
            if x.len() != target.len() {
                return Err(mismatch(format!("smooth_l1: {} values vs {} targets", x.len(), target.len())));
            }
            let data = x
                .data()
                .iter()
                .zip(target)
                .map(|(v, t)| {
                    let d = (v - t).abs();
                    if d < beta {
                        0.5 * d * d / beta
                    } else {
                        d - 0.5 * beta
                    }
                })
                .collect();
            Tensor::new(x.shape(), data)?
        };
        Ok(self.tape.push(
            out,
            Op::SmoothL1 { input: self.id, target: target.to_vec(), beta },
            self.needs_grad(),
            "smooth_l1",
        ))
    }

    /// Euclidean norm over the last axis (gradient zero at a zero vector).
    pub fn norm_last(self) -> Result<Var<'t>, AutodiffError> {
        let out = {
            let x = self.value();
            if x.ndim() == 0 {
                return Err(mismatch("norm_last on a scalar".into()));
            }
            let (_, c) = rows_cols(x.shape());
            let data = x.data().chunks_exact(c).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
            let mut s = x.shape().to_vec();
            s.pop();
            Tensor::new(&s, data)?
        };
        Ok(self.tape.push(out, Op::NormLast(self.id), self.needs_grad(), "norm_last"))
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], id: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].needs_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]))
}

fn add_into(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
    if let Some(s) = slot(nodes, grads, id) {
        s.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
}

fn norm_backward(g: &[f64], xhat: &[f64], gamma: &[f64], rstd: f64, dx: &mut [f64], stride: usize, count: usize) {
    // dx = rstd · (dxhat - mean(dxhat) - xhat · mean(dxhat · xhat))
    let mut mean_d = 0.0;
    let mut mean_dx = 0.0;
    for i in 0..count {
        let d = g[i * stride] * gamma[0];
        mean_d += d;
        mean_dx += d * xhat[i * stride];
    }
    mean_d /= count as f64;
    mean_dx /= count as f64;
    for i in 0..count {
        let d = g[i * stride] * gamma[0];
        dx[i * stride] += rstd * (d - mean_d - xhat[i * stride] * mean_dx);
    }
}

pub(crate) fn backward_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            add_into(nodes, grads, *a, g);
            add_into(nodes, grads, *b, g);
        }
        Op::Sub(a, b) => {
            add_into(nodes, grads, *a, g);
            if let Some(s) = slot(nodes, grads, *b) {
                s.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            if let Some(s) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    s[i] += g[i] * vb[i];
                }
            }
            if let Some(s) = slot(nodes, grads, *b) {
                for i in 0..g.len() {
                    s[i] += g[i] * va[i];
                }
            }
        }
        Op::Scale(a, f) => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(g).for_each(|(x, y)| *x += f * y);
            }
        }
        Op::AddScalar(a) => add_into(nodes, grads, *a, g),
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k) = (va.shape()[0], va.shape()[1]);
            let n = vb.shape()[1];
            if let Some(s) = slot(nodes, grads, *a) {
                // dA = G · Bᵀ
                gemm(m, n, k, g, n as isize, 1, vb.data(), 1, n as isize, 1.0, s);
            }
            if let Some(s) = slot(nodes, grads, *b) {
                // dB = Aᵀ · G
                gemm(k, m, n, va.data(), 1, k as isize, g, n as isize, 1, 1.0, s);
            }
        }
        Op::BatchMatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
            let n = vb.shape()[2];
            if let Some(s) = slot(nodes, grads, *a) {
                for i in 0..bs {
                    gemm(m, n, k, &g[i * m * n..], n as isize, 1, &vb.data()[i * k * n..], 1, n as isize, 1.0, &mut s[i * m * k..]);
                }
            }
            if let Some(s) = slot(nodes, grads, *b) {
                for i in 0..bs {
                    gemm(k, m, n, &va.data()[i * m * k..], 1, k as isize, &g[i * m * n..], n as isize, 1, 1.0, &mut s[i * k * n..]);
                }
            }
        }
        Op::AddBias(x, b) => {
            add_into(nodes, grads, *x, g);
            let c = val(*b).len();
            if let Some(s) = slot(nodes, grads, *b) {
                for row in g.chunks_exact(c) {
                    s.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
            }
        }
        Op::MulRows(x, f) => {
            let (vx, vf) = (val(*x), val(*f));
            let c = rows_cols(vx.shape()).1.max(1);
            if let Some(s) = slot(nodes, grads, *x) {
                for (i, (srow, grow)) in s.chunks_exact_mut(c).zip(g.chunks_exact(c)).enumerate() {
                    let fi = vf.data()[i];
                    srow.iter_mut().zip(grow).for_each(|(a, v)| *a += v * fi);
                }
            }
            if let Some(s) = slot(nodes, grads, *f) {
                for (i, (xrow, grow)) in vx.data().chunks_exact(c).zip(g.chunks_exact(c)).enumerate() {
                    s[i] += xrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let out_shape = node.value.shape();
            let (outer, total_axis, inner) = split_axis(out_shape, *axis);
            let mut offset = 0;
            for &inp in inputs {
                let len = val(inp).shape()[*axis];
                if let Some(s) = slot(nodes, grads, inp) {
                    let block = len * inner;
                    for o in 0..outer {
                        let src = &g[o * total_axis * inner + offset * inner..][..block];
                        s[o * block..(o + 1) * block].iter_mut().zip(src).for_each(|(a, v)| *a += v);
                    }
                }
                offset += len;
            }
        }
        Op::IndexSelect { input, indices } => {
            let shape = val(*input).shape();
            let row: usize = shape[1..].iter().product();
            if let Some(s) = slot(nodes, grads, *input) {
                for (i, &src) in indices.iter().enumerate() {
                    s[src * row..(src + 1) * row].iter_mut().zip(&g[i * row..(i + 1) * row]).for_each(|(a, v)| *a += v);
                }
            }
        }
        Op::ScatterAddRows { input, indices } => {
            let shape = val(*input).shape();
            let row: usize = shape[1..].iter().product();
            if let Some(s) = slot(nodes, grads, *input) {
                for (i, &dst) in indices.iter().enumerate() {
                    s[i * row..(i + 1) * row].iter_mut().zip(&g[dst * row..(dst + 1) * row]).for_each(|(a, v)| *a += v);
                }
            }
        }
        Op::Reshape(a) => add_into(nodes, grads, *a, g),
        Op::Permute { input, axes } => {
            let mut inverse = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            let (back, _) = permute_data(g, node.value.shape(), &inverse);
            add_into(nodes, grads, *input, &back);
        }
        Op::Narrow { input, start } => {
            let shape = val(*input).shape();
            let row: usize = shape[1..].iter().product();
            if let Some(s) = slot(nodes, grads, *input) {
                s[start * row..start * row + g.len()].iter_mut().zip(g).for_each(|(a, v)| *a += v);
            }
        }
        Op::Unary(a, kind) => {
            let x = val(*a).data();
            let y = node.value.data();
            if let Some(s) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    let d = match kind {
                        Unary::Relu => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Gelu => gelu(x[i]).1,
                        Unary::Sigmoid => y[i] * (1.0 - y[i]),
                        Unary::Tanh => 1.0 - y[i] * y[i],
                        Unary::Exp => y[i],
                        Unary::Log => 1.0 / x[i],
                        Unary::Square => 2.0 * x[i],
                        Unary::Sqrt => {
                            if y[i] > 0.0 {
                                0.5 / y[i]
                            } else {
                                0.0
                            }
                        }
                        Unary::Softplus => sigmoid(x[i]),
                        Unary::Recip => -y[i] * y[i],
                    };
                    s[i] += g[i] * d;
                }
            }
        }
        Op::Softmax(a) => {
            let y = node.value.data();
            let c = rows_cols(node.value.shape()).1.max(1);
            if let Some(s) = slot(nodes, grads, *a) {
                for ((yr, gr), sr) in y.chunks_exact(c).zip(g.chunks_exact(c)).zip(s.chunks_exact_mut(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        sr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::MaxAxis { input, argmax } => {
            if let Some(s) = slot(nodes, grads, *input) {
                for (o, &src) in argmax.iter().enumerate() {
                    s[src] += g[o];
                }
            }
        }
        Op::SumAxis { input, axis, scale } => {
            let shape = val(*input).shape();
            let (outer, len, inner) = split_axis(shape, *axis);
            if let Some(s) = slot(nodes, grads, *input) {
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        s[(o * len + l) * inner..(o * len + l + 1) * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, v)| *a += v * scale);
                    }
                }
            }
        }
        Op::SumAll { input, scale } => {
            if let Some(s) = slot(nodes, grads, *input) {
                let v = g[0] * scale;
                s.iter_mut().for_each(|a| *a += v);
            }
        }
        Op::LayerNorm { input, gamma, beta, xhat, rstd } => {
            let gm = val(*gamma).data();
            let c = gm.len();
            if let Some(s) = slot(nodes, grads, *gamma) {
                for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        s[j] += gr[j] * hr[j];
                    }
                }
            }
            if let Some(s) = slot(nodes, grads, *beta) {
                for gr in g.chunks_exact(c) {
                    s.iter_mut().zip(gr).for_each(|(a, v)| *a += v);
                }
            }
            if let Some(s) = slot(nodes, grads, *input) {
                for (i, rs) in rstd.iter().enumerate() {
                    let (gr, hr) = (&g[i * c..(i + 1) * c], &xhat[i * c..(i + 1) * c]);
                    let d: Vec<f64> = gr.iter().zip(gm).map(|(a, b)| a * b).collect();
                    let mean_d = d.iter().sum::<f64>() / c as f64;
                    let mean_dx = d.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        s[i * c + j] += rs * (d[j] - mean_d - hr[j] * mean_dx);
                    }
                }
            }
        }
        Op::BatchNorm { input, gamma, beta, xhat, rstd, batch_stats } => {
            let gm = val(*gamma).data();
            let c = gm.len();
            let r = g.len() / c.max(1);
            if let Some(s) = slot(nodes, grads, *gamma) {
                for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        s[j] += gr[j] * hr[j];
                    }
                }
            }
            if let Some(s) = slot(nodes, grads, *beta) {
                for gr in g.chunks_exact(c) {
                    s.iter_mut().zip(gr).for_each(|(a, v)| *a += v);
                }
            }
            if let Some(s) = slot(nodes, grads, *input) {
                if *batch_stats {
                    for j in 0..c {
                        norm_backward(&g[j..], &xhat[j..], &gm[j..], rstd[j], &mut s[j..], c, r);
                    }
                } else {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[i * c + j] * gm[j] * rstd[j];
                        }
                    }
                }
            }
        }
        Op::PairwiseSqDist(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (n, d) = (va.shape()[0], va.shape()[1]);
            let m = vb.shape()[0];
            let (ad, bd) = (va.data(), vb.data());
            if let Some(s) = slot(nodes, grads, *a) {
                for i in 0..n {
                    for j in 0..m {
                        let w = 2.0 * g[i * m + j];
                        for k in 0..d {
                            s[i * d + k] += w * (ad[i * d + k] - bd[j * d + k]);
                        }
                    }
                }
            }
            if let Some(s) = slot(nodes, grads, *b) {
                for i in 0..n {
                    for j in 0..m {
                        let w = 2.0 * g[i * m + j];
                        for k in 0..d {
                            s[j * d + k] -= w * (ad[i * d + k] - bd[j * d + k]);
                        }
                    }
                }
            }
        }
        Op::NearestDist { from, to, argmin } => {
            let (ad, bd) = (val(*from).data(), val(*to).data());
            let dist = node.value.data();
            let mut ga = vec![0.0; ad.len()];
            let mut gb = vec![0.0; bd.len()];
            for (i, &j) in argmin.iter().enumerate() {
                if dist[i] <= 0.0 {
                    continue;
                }
                let w = g[i] / dist[i];
                for k in 0..3 {
                    let diff = w * (ad[i * 3 + k] - bd[j * 3 + k]);
                    ga[i * 3 + k] += diff;
                    gb[j * 3 + k] -= diff;
                }
            }
            add_into(nodes, grads, *from, &ga);
            add_into(nodes, grads, *to, &gb);
        }
        Op::TopK { input, indices } => {
            if let Some(s) = slot(nodes, grads, *input) {
                for (o, &src) in indices.iter().enumerate() {
                    s[src] += g[o];
                }
            }
        }
        Op::SmoothL1 { input, target, beta } => {
            let x = val(*input).data();
            if let Some(s) = slot(nodes, grads, *input) {
                for i in 0..g.len() {
                    let d = x[i] - target[i];
                    let dd = if d.abs() < *beta { d / beta } else { d.signum() };
                    s[i] += g[i] * dd;
                }
            }
        }
        Op::NormLast(a) => {
            let x = val(*a).data();
            let y = node.value.data();
            let c = x.len() / y.len().max(1);
            if let Some(s) = slot(nodes, grads, *a) {
                for (i, &n) in y.iter().enumerate() {
                    if n > 0.0 {
                        for k in 0..c {
                            s[i * c + k] += g[i] * x[i * c + k] / n;
                        }
                    }
                }
            }
        }
    }
}
