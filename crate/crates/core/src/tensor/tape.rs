use rand::Rng;

use super::{broadcast_index, broadcast_shape, gemm, reduce_broadcast, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var },
    Binary { kind: Binary, a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    AddScalar { x: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Exp { x: Var },
    Ln { x: Var },
    Abs { x: Var },
    Clamp { x: Var, lo: f64, hi: f64 },
    Huber { x: Var, delta: f64 },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Permute { x: Var, axes: Vec<usize> },
    Reshape { x: Var },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    IndexSelect { x: Var, indices: Vec<usize> },
    SumAll { x: Var },
    SumAxis { x: Var, axis: usize },
    MaxAxis { x: Var, argmax: Vec<usize> },
    SegmentMax { x: Var, argmax: Vec<usize> },
    MaskedFill { x: Var, mask: Vec<bool> },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Records a forward pass for reverse-mode differentiation.
///
/// Every operation checks shapes up front and rejects non-finite outputs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every tracked value on a tape.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros if the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.get(v) {
            Some(g) => Tensor {
                shape,
                data: g.to_vec(),
            },
            None => Tensor::zeros(&shape),
        }
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Gathers `src` (shape `shape`) into the permuted layout given by `axes`.
fn permute_data(src: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides_of(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = src.len();
    let mut out = Vec::with_capacity(total);
    let mut counter = vec![0usize; out_shape.len()];
    let mut flat = 0usize;
    for _ in 0..total {
        out.push(src[flat]);
        for axis in (0..out_shape.len()).rev() {
            counter[axis] += 1;
            flat += src_strides[axis];
            if counter[axis] < out_shape[axis] {
                break;
            }
            flat -= src_strides[axis] * counter[axis];
            counter[axis] = 0;
        }
    }
    (out_shape, out)
}

/// Splits a shape around `axis` into (outer, axis_len, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        check_finite(name, &data)?;
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        Ok(self.push(Tensor { shape, data }, op, tracked))
    }

    /// A value the loss may be differentiated with respect to.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A value treated as constant by [`Tape::backward`].
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// `[.., m, k] @ [k, n] -> [.., m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m: usize = sa[..sa.len() - 1].iter().product();
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.data(a),
            false,
            self.data(b),
            false,
            &mut out,
            0.0,
        );
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        self.push_checked("matmul", shape, out, Op::MatMul { a, b }, &[a, b])
    }

    /// `[b, m, k] @ [b, k, n] -> [b, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            let ad = &self.nodes[a.0].value.data[t * m * k..(t + 1) * m * k];
            let bd = &self.nodes[b.0].value.data[t * k * n..(t + 1) * k * n];
            gemm(
                m,
                k,
                n,
                ad,
                false,
                bd,
                false,
                &mut out[t * m * n..(t + 1) * m * n],
                0.0,
            );
        }
        self.push_checked(
            "bmm",
            vec![batch, m, n],
            out,
            Op::BatchMatMul { a, b },
            &[a, b],
        )
    }

    fn binary(&mut self, kind: Binary, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| shape_err(name, &sa, &sb))?;
        let ia = broadcast_index(&out_shape, &sa);
        let ib = broadcast_index(&out_shape, &sb);
        let da = self.data(a);
        let db = self.data(b);
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
            Binary::Min => |x, y| if x <= y { x } else { y },
            Binary::Max => |x, y| if x >= y { x } else { y },
        };
        let out: Vec<f64> = ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect();
        self.push_checked(name, out_shape, out, Op::Binary { kind, a, b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, "div", a, b)
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Min, "minimum", a, b)
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Max, "maximum", a, b)
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out: Vec<f64> = self.data(x).iter().map(|&v| f(v)).collect();
        self.push_checked(name, shape, out, op, &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * factor, Op::Scale { x, factor })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar { x })
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid { x })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp { x })
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary("ln", x, f64::ln, Op::Ln { x })
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, f64::abs, Op::Abs { x })
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// Smooth-L1 form of the Huber penalty: `0.5 x^2 / delta` inside
    /// `[-delta, delta]`, `|x| - 0.5 delta` outside.
    pub fn huber(&mut self, x: Var, delta: f64) -> Result<Var> {
        if delta <= 0.0 {
            return Err(Error::contract("huber delta must be positive"));
        }
        self.unary(
            "huber",
            x,
            |v| {
                if v.abs() <= delta {
                    0.5 * v * v / delta
                } else {
                    v.abs() - 0.5 * delta
                }
            },
            Op::Huber { x, delta },
        )
    }

    fn last_axis(&self, name: &'static str, x: Var) -> Result<usize> {
        match self.shape(x).last() {
            Some(&w) if w > 0 => Ok(w),
            _ => Err(shape_err(name, self.shape(x), &[])),
        }
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Softmax over the last axis where `mask[j] == false` entries get
    /// exactly zero weight.
    ///
    /// `mask` covers the trailing dimensions of `x` and repeats over the
    /// leading ones, so an `[n, m]` mask applies to every head of an
    /// `[h, n, m]` score tensor. A row with no unmasked entry is an error.
    pub fn softmax_masked(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        self.softmax_impl(x, Some(mask))
    }

    fn softmax_impl(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let w = self.last_axis("softmax", x)?;
        let shape = self.shape(x).to_vec();
        let data = self.data(x);
        if let Some(mask) = mask {
            if mask.is_empty()
                || !mask.len().is_multiple_of(w)
                || !data.len().is_multiple_of(mask.len())
            {
                return Err(shape_err("softmax_masked", &shape, &[mask.len()]));
            }
        }
        let mut out = vec![0.0; data.len()];
        for (r, (row, dst)) in data.chunks(w).zip(out.chunks_mut(w)).enumerate() {
            let keep = |j: usize| match mask {
                Some(m) => m[(r * w + j) % m.len()],
                None => true,
            };
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::contract("softmax row has no unmasked entry"));
            }
            let mut sum = 0.0;
            for (j, (&v, d)) in row.iter().zip(dst.iter_mut()).enumerate() {
                if keep(j) {
                    *d = (v - max).exp();
                    sum += *d;
                }
            }
            dst.iter_mut().for_each(|d| *d /= sum);
        }
        self.push_checked("softmax", shape, out, Op::Softmax { x }, &[x])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let w = self.last_axis("log_softmax", x)?;
        let shape = self.shape(x).to_vec();
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(w) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push_checked("log_softmax", shape, out, Op::LogSoftmax { x }, &[x])
    }

    /// Normalizes the last axis to zero mean and unit (biased) variance.
    /// Gain and bias are applied separately by the caller.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let w = self.last_axis("layer_norm", x)?;
        let shape = self.shape(x).to_vec();
        let mut out = self.data(x).to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / w);
        for row in out.chunks_mut(w) {
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        self.push_checked("layer_norm", shape, out, Op::LayerNorm { x, inv_std }, &[x])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(shape_err("permute", &shape, axes));
        }
        let (out_shape, out) = permute_data(self.data(x), &shape, axes);
        self.push_checked(
            "permute",
            out_shape,
            out,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(shape_err("transpose", self.shape(x), &[]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let data = self.data(x).to_vec();
        self.push_checked("reshape", shape.to_vec(), data, Op::Reshape { x }, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = match xs.first() {
            Some(&v) => self.shape(v).to_vec(),
            None => return Err(Error::contract("concat of zero tensors")),
        };
        if axis >= first.len() {
            return Err(shape_err("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push_checked(
            "concat",
            shape,
            out,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        )
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(shape_err("slice", &shape, &[axis, start, end]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let data = self.data(x);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&data[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        self.push_checked("slice", out_shape, out, Op::Slice { x, axis, start }, &[x])
    }

    /// Gathers rows (first axis) by index; indices may repeat.
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || indices.iter().any(|&i| i >= shape[0]) {
            return Err(shape_err("index_select", &shape, &[indices.len()]));
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.data(x);
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            out.extend_from_slice(&data[i * inner..(i + 1) * inner]);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        self.push_checked(
            "index_select",
            out_shape,
            out,
            Op::IndexSelect {
                x,
                indices: indices.to_vec(),
            },
            &[x],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.data(x).iter().sum();
        self.push_checked("sum", vec![], vec![s], Op::SumAll { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::contract("mean of empty tensor"));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("sum_axis", &shape, &[axis]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let data = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &data[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.push_checked("sum_axis", out_shape, out, Op::SumAxis { x, axis }, &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| shape_err("mean_axis", self.shape(x), &[axis]))?;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / len.max(1) as f64)
    }

    /// Maximum over `axis`, removing it; ties go to the lowest index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(shape_err("max_axis", &shape, &[axis]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let data = self.data(x);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let src = (o * len + l) * inner + i;
                    let dst = o * inner + i;
                    if data[src] > out[dst] {
                        out[dst] = data[src];
                        argmax[dst] = src;
                    }
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.push_checked("max_axis", out_shape, out, Op::MaxAxis { x, argmax }, &[x])
    }

    /// Column-wise maximum over contiguous row segments of a 2-D tensor.
    ///
    /// Segment `s` spans rows `offsets[s]..offsets[s + 1]`; each must be
    /// non-empty. Output is `[offsets.len() - 1, cols]`.
    pub fn segment_max(&mut self, x: Var, offsets: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let bad = shape.len() != 2
            || offsets.len() < 2
            || offsets[0] != 0
            || *offsets.last().unwrap() != shape[0]
            || offsets.windows(2).any(|w| w[1] <= w[0]);
        if bad {
            return Err(shape_err("segment_max", &shape, &[offsets.len()]));
        }
        let cols = shape[1];
        let segs = offsets.len() - 1;
        let data = self.data(x);
        let mut out = vec![f64::NEG_INFINITY; segs * cols];
        let mut argmax = vec![0usize; segs * cols];
        for s in 0..segs {
            for r in offsets[s]..offsets[s + 1] {
                for c in 0..cols {
                    let v = data[r * cols + c];
                    if v > out[s * cols + c] {
                        out[s * cols + c] = v;
                        argmax[s * cols + c] = r * cols + c;
                    }
                }
            }
        }
        self.push_checked(
            "segment_max",
            vec![segs, cols],
            out,
            Op::SegmentMax { x, argmax },
            &[x],
        )
    }

    /// Replaces entries where `mask` is true with `value`; those entries
    /// receive no gradient. `mask` repeats over leading dimensions.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = self.value(x).len();
        if mask.is_empty() || !n.is_multiple_of(mask.len()) {
            return Err(shape_err("masked_fill", &shape, &[mask.len()]));
        }
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| if mask[i % mask.len()] { value } else { v })
            .collect();
        self.push_checked(
            "masked_fill",
            shape,
            out,
            Op::MaskedFill {
                x,
                mask: mask.to_vec(),
            },
            &[x],
        )
    }

    /// Inverted dropout. Identity when `rate == 0` or not training.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::contract(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = self.shape(x).to_vec();
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let m = self.constant(Tensor { shape, data: mask });
        self.mul(x, m)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing
                .iter_mut()
                .zip(&contribution)
                .for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].tracked {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[v.0].value.len()]);
        }
        f(slot.as_mut().unwrap());
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (k, n) = (vb.shape[0], vb.shape[1]);
                let m = va.len() / k.max(1);
                self.accumulate_with(grads, *a, |ga| {
                    gemm(m, n, k, g, false, &vb.data, true, ga, 1.0)
                });
                self.accumulate_with(grads, *b, |gb| {
                    gemm(k, m, n, &va.data, true, g, false, gb, 1.0)
                });
            }
            Op::BatchMatMul { a, b } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (batch, m, k, n) = (va.shape[0], va.shape[1], va.shape[2], vb.shape[2]);
                self.accumulate_with(grads, *a, |ga| {
                    for t in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[t * m * n..(t + 1) * m * n],
                            false,
                            &vb.data[t * k * n..(t + 1) * k * n],
                            true,
                            &mut ga[t * m * k..(t + 1) * m * k],
                            1.0,
                        );
                    }
                });
                self.accumulate_with(grads, *b, |gb| {
                    for t in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            &va.data[t * m * k..(t + 1) * m * k],
                            true,
                            &g[t * m * n..(t + 1) * m * n],
                            false,
                            &mut gb[t * k * n..(t + 1) * k * n],
                            1.0,
                        );
                    }
                });
            }
            Op::Binary { kind, a, b } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let ia = broadcast_index(&out.shape, &va.shape);
                let ib = broadcast_index(&out.shape, &vb.shape);
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; g.len()];
                for t in 0..g.len() {
                    let (x, y) = (va.data[ia[t]], vb.data[ib[t]]);
                    let (da, db) = match kind {
                        Binary::Add => (1.0, 1.0),
                        Binary::Sub => (1.0, -1.0),
                        Binary::Mul => (y, x),
                        Binary::Div => (1.0 / y, -x / (y * y)),
                        Binary::Min => {
                            if x <= y {
                                (1.0, 0.0)
                            } else {
                                (0.0, 1.0)
                            }
                        }
                        Binary::Max => {
                            if x >= y {
                                (1.0, 0.0)
                            } else {
                                (0.0, 1.0)
                            }
                        }
                    };
                    ga[t] = g[t] * da;
                    gb[t] = g[t] * db;
                }
                if self.nodes[a.0].tracked {
                    self.accumulate(grads, *a, reduce_broadcast(&ga, &out.shape, &va.shape));
                }
                if self.nodes[b.0].tracked {
                    self.accumulate(grads, *b, reduce_broadcast(&gb, &out.shape, &vb.shape));
                }
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, g.iter().map(|v| v * factor).collect());
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                self.accumulate(grads, *x, g.to_vec());
            }
            Op::Relu { x } => {
                let xv = &self.value(*x).data;
                self.accumulate(
                    grads,
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sigmoid { x } => {
                self.accumulate(
                    grads,
                    *x,
                    g.iter()
                        .zip(&out.data)
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect(),
                );
            }
            Op::Exp { x } => {
                self.accumulate(
                    grads,
                    *x,
                    g.iter().zip(&out.data).map(|(g, y)| g * y).collect(),
                );
            }
            Op::Ln { x } => {
                let xv = &self.value(*x).data;
                self.accumulate(grads, *x, g.iter().zip(xv).map(|(g, v)| g / v).collect());
            }
            Op::Abs { x } => {
                let xv = &self.value(*x).data;
                self.accumulate(
                    grads,
                    *x,
                    g.iter().zip(xv).map(|(g, v)| g * v.signum()).collect(),
                );
            }
            Op::Clamp { x, lo, hi } => {
                let xv = &self.value(*x).data;
                self.accumulate(
                    grads,
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(g, v)| if *v >= *lo && *v <= *hi { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Huber { x, delta } => {
                let xv = &self.value(*x).data;
                self.accumulate(
                    grads,
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(g, v)| {
                            if v.abs() <= *delta {
                                g * v / delta
                            } else {
                                g * v.signum()
                            }
                        })
                        .collect(),
                );
            }
            Op::Softmax { x } => {
                let w = *out.shape.last().unwrap();
                let mut gx = vec![0.0; g.len()];
                for ((y, gy), dst) in out.data.chunks(w).zip(g.chunks(w)).zip(gx.chunks_mut(w)) {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..w {
                        dst[j] = y[j] * (gy[j] - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LogSoftmax { x } => {
                let w = *out.shape.last().unwrap();
                let mut gx = vec![0.0; g.len()];
                for ((y, gy), dst) in out.data.chunks(w).zip(g.chunks(w)).zip(gx.chunks_mut(w)) {
                    let total: f64 = gy.iter().sum();
                    for j in 0..w {
                        dst[j] = gy[j] - y[j].exp() * total;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm { x, inv_std } => {
                let w = *out.shape.last().unwrap();
                let mut gx = vec![0.0; g.len()];
                for (r, ((xh, gy), dst)) in out
                    .data
                    .chunks(w)
                    .zip(g.chunks(w))
                    .zip(gx.chunks_mut(w))
                    .enumerate()
                {
                    let mean_g = gy.iter().sum::<f64>() / w as f64;
                    let mean_gx = gy.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                    for j in 0..w {
                        dst[j] = inv_std[r] * (gy[j] - mean_g - xh[j] * mean_gx);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (_, gx) = permute_data(g, &out.shape, &inverse);
                self.accumulate(grads, *x, gx);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(&out.shape, *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if self.nodes[v.0].tracked {
                        let mut gv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[base..base + len * inner]);
                        }
                        self.accumulate(grads, v, gv);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.shape(*x);
                let (outer, len, inner) = split_axis(in_shape, *axis);
                let width = out.shape[*axis];
                self.accumulate_with(grads, *x, |gx| {
                    for o in 0..outer {
                        let dst = o * len * inner + start * inner;
                        let src = o * width * inner;
                        for (d, s) in gx[dst..dst + width * inner]
                            .iter_mut()
                            .zip(&g[src..src + width * inner])
                        {
                            *d += s;
                        }
                    }
                });
            }
            Op::IndexSelect { x, indices } => {
                let inner = out.len() / indices.len().max(1);
                self.accumulate_with(grads, *x, |gx| {
                    for (r, &i) in indices.iter().enumerate() {
                        for (d, s) in gx[i * inner..(i + 1) * inner]
                            .iter_mut()
                            .zip(&g[r * inner..(r + 1) * inner])
                        {
                            *d += s;
                        }
                    }
                });
            }
            Op::SumAll { x } => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let dst = (o * len + l) * inner;
                        gx[dst..dst + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::MaxAxis { x, argmax } | Op::SegmentMax { x, argmax } => {
                self.accumulate_with(grads, *x, |gx| {
                    for (gv, &src) in g.iter().zip(argmax) {
                        gx[src] += gv;
                    }
                });
            }
            Op::MaskedFill { x, mask } => {
                self.accumulate(
                    grads,
                    *x,
                    g.iter()
                        .enumerate()
                        .map(|(i, g)| if mask[i % mask.len()] { 0.0 } else { *g })
                        .collect(),
                );
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        t(
            shape,
            &(0..n)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<_>>(),
        )
    }

    /// Central-difference check of `f` (a scalar function of the inputs)
    /// against tape gradients.
    fn grad_check(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
        let h = 1e-5;
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = f(&mut tape, &vars).unwrap();
        let grads = tape.backward(loss).unwrap();

        let eval = |inputs: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
            let loss = f(&mut tape, &vars).unwrap();
            tape.value(loss).item().unwrap()
        };

        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[k]);
            for i in 0..input.len() {
                let mut plus = inputs.clone();
                plus[k].data[i] += h;
                let mut minus = inputs.clone();
                minus[k].data[i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data[i];
                let scale = a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (a - numeric).abs() <= 1e-4 * scale,
                    "input {k} elem {i}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_shape() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 4]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 4]);
        let bad = tape.constant(Tensor::zeros(&[4, 4]));
        let err = tape.matmul(a, bad).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 4]"), "{msg}");
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3]));
        let y = tape.softmax(x).unwrap();
        for &v in tape.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_masked_zeroes_excluded_entries() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape
            .softmax_masked(x, &[true, false, true, false, true, true])
            .unwrap();
        let d = tape.data(y);
        assert_eq!(d[1], 0.0);
        assert_eq!(d[3], 0.0);
        assert!((d[0] + d[2] - 1.0).abs() < 1e-15);
        assert!((d[4] + d[5] - 1.0).abs() < 1e-15);
        assert!(tape.softmax_masked(x, &[false, false, false]).is_err());
    }

    #[test]
    fn layer_norm_standardizes() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.layer_norm(x, 1e-5).unwrap();
        let d = tape.data(y);
        let mean = d.iter().sum::<f64>() / 3.0;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
        // direct evaluation: (x - 2) / sqrt(2/3 + 1e-5)
        let expect = -1.0 / (2.0f64 / 3.0 + 1e-5).sqrt();
        assert!((d[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn backward_of_square_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn untouched_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2], 1.0));
        let unused = tape.leaf(Tensor::full(&[3], 1.0));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.get_or_zeros(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn non_finite_output_is_reported() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 0.0]));
        let err = tape.ln(x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "ln" }));
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.leaf(random(&mut rng, &[5, 5]));
        assert_eq!(tape.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.7, false, &mut rng).unwrap(), x);
        assert!(tape.dropout(x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1_000_000], 1.0));
        let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
        let mean = tape.data(y).iter().sum::<f64>() / 1e6;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!(tape.data(y).iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn gradcheck_elementwise_and_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4]);
        let c = random(&mut rng, &[3, 1]);
        grad_check(vec![a, b, c], |tp, v| {
            let s = tp.add(v[0], v[1])?;
            let m = tp.mul(s, v[2])?;
            let d = tp.sub(m, v[1])?;
            let q = tp.add_scalar(v[2], 3.0)?;
            let e = tp.div(d, q)?;
            let mn = tp.minimum(e, v[1])?;
            let mx = tp.maximum(mn, v[2])?;
            let sg = tp.sigmoid(mx)?;
            let ex = tp.exp(sg)?;
            let l = tp.ln(ex)?;
            let ab = tp.abs(l)?;
            let sq = tp.mul(ab, e)?;
            tp.sum(sq)
        });
    }

    #[test]
    fn gradcheck_matmul_and_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, &[2, 3, 4]);
        let w = random(&mut rng, &[4, 5]);
        let y = random(&mut rng, &[2, 5, 3]);
        grad_check(vec![x, w, y], |tp, v| {
            let h = tp.matmul(v[0], v[1])?;
            let r = tp.relu(h)?;
            let p = tp.bmm(r, v[2])?;
            let sq = tp.mul(p, p)?;
            tp.sum(sq)
        });
    }

    #[test]
    fn gradcheck_softmax_family_and_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, &[3, 5]);
        let wt = random(&mut rng, &[3, 5]);
        let mask = vec![true, true, false, true, false];
        grad_check(vec![x, wt], move |tp, v| {
            let s = tp.softmax(v[0])?;
            let sm = tp.softmax_masked(v[0], &mask)?;
            let ls = tp.log_softmax(v[0])?;
            let ln = tp.layer_norm(v[0], 1e-5)?;
            let a = tp.mul(s, v[1])?;
            let b = tp.mul(sm, v[1])?;
            let c = tp.mul(ls, v[1])?;
            let d = tp.mul(ln, v[1])?;
            let ab = tp.add(a, b)?;
            let cd = tp.add(c, d)?;
            let all = tp.add(ab, cd)?;
            let sq = tp.mul(all, all)?;
            tp.sum(sq)
        });
    }

    #[test]
    fn gradcheck_shape_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, &[2, 3, 4]);
        let y = random(&mut rng, &[2, 2, 4]);
        let wt = random(&mut rng, &[4, 5, 2]);
        grad_check(vec![x, y, wt], |tp, v| {
            let c = tp.concat(&[v[0], v[1]], 1)?; // [2,5,4]
            let p = tp.permute(c, &[2, 1, 0])?; // [4,5,2]
            let m = tp.mul(p, v[2])?;
            let r = tp.reshape(m, &[20, 2])?;
            let sel = tp.index_select(r, &[3, 0, 3, 19])?;
            let sl = tp.slice(r, 0, 5, 12)?;
            let tr = tp.transpose(sl)?; // [2,7]
            let sa = tp.sum_axis(tr, 1)?;
            let mx = tp.max_axis(sel, 0)?;
            let seg = tp.segment_max(r, &[0, 7, 8, 20])?;
            let mf = tp.masked_fill(seg, &[true, false], 0.25)?;
            let a = tp.mul(sa, mx)?;
            let b = tp.mean_axis(mf, 0)?;
            let ab = tp.mul(a, b)?;
            let sum = tp.sum(ab)?;
            let msum = tp.mean(mf)?;
            let h = tp.huber(msum, 0.05)?;
            tp.add(sum, h)
        });
    }

    #[test]
    fn gradcheck_huber_and_clamp() {
        let x = t(&[6], &[-2.0, -0.7, -0.2, 0.3, 0.9, 1.7]);
        grad_check(vec![x], |tp, v| {
            let h = tp.huber(v[0], 1.0)?;
            let c = tp.clamp(v[0], -1.0, 1.0)?;
            let s = tp.scale(c, 0.5)?;
            let n = tp.neg(s)?;
            let a = tp.add(h, n)?;
            tp.sum(a)
        });
    }

    #[test]
    fn huber_is_c1_at_delta() {
        let delta = 1.0;
        let f = |x: f64| {
            let mut tape = Tape::new();
            let v = tape.leaf(Tensor::scalar(x));
            let h = tape.huber(v, delta).unwrap();
            let g = tape.backward(h).unwrap();
            (tape.data(h)[0], g.get(v).unwrap()[0])
        };
        for side in [-1.0, 1.0] {
            let (vi, gi) = f(side * (delta - 1e-9));
            let (vo, go) = f(side * (delta + 1e-9));
            assert!((vi - vo).abs() < 1e-8);
            assert!((gi - go).abs() < 1e-8);
        }
        assert_eq!(f(0.5).0, 0.125);
        assert_eq!(f(3.0).0, 2.5);
    }

    #[test]
    fn repeated_use_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[3.0]));
        let y = tape.add(x, x).unwrap();
        let z = tape.mul(y, x).unwrap();
        let s = tape.sum(z).unwrap();
        let g = tape.backward(s).unwrap();
        // d(2x^2)/dx = 4x
        assert_eq!(g.get(x).unwrap(), &[12.0]);
    }
}
