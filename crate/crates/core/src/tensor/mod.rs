//! Dense row-major tensors, a reverse-mode gradient tape, and the optimizer.
//!
//! [`Tensor`] is a plain value. Anything that needs gradients goes through a
//! [`Tape`]: values are recorded as [`Var`] handles, and [`Tape::backward`]
//! returns a [`Gradients`] map keyed by those handles. A tape lives for one
//! forward pass and is dropped afterwards.

pub mod nn;
mod optim;
mod params;
mod tape;

pub use optim::{clip_global_norm, cosine_lr, AdamW, AdamWConfig, StepStats};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds an `n x 3` tensor from point coordinates.
    pub fn from_points(points: &[[f64; 3]]) -> Self {
        Tensor {
            shape: vec![points.len(), 3],
            data: points.iter().flatten().copied().collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Row `i` of a tensor viewed as `[rows, last_dim]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let width = self.shape.last().copied().unwrap_or(1);
        &self.data[i * width..(i + 1) * width]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Numpy-style broadcast of two shapes, aligned from the right.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `inp` as seen from an `out`-shaped index, zero on broadcast axes.
fn broadcast_strides(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let offset = out.len() - inp.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..inp.len()).rev() {
        if inp[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= inp[i];
    }
    strides
}

/// Maps each flat output index to the flat index of a broadcast input.
pub(crate) fn broadcast_index(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let total: usize = out.iter().product();
    if out == inp {
        return (0..total).collect();
    }
    let n_in: usize = inp.iter().product();
    if out.ends_with(inp) {
        return (0..total).map(|i| i % n_in.max(1)).collect();
    }
    let strides = broadcast_strides(out, inp);
    let mut counter = vec![0usize; out.len()];
    let mut idx = Vec::with_capacity(total);
    let mut flat = 0usize;
    for _ in 0..total {
        idx.push(flat);
        for axis in (0..out.len()).rev() {
            counter[axis] += 1;
            flat += strides[axis];
            if counter[axis] < out[axis] {
                break;
            }
            flat -= strides[axis] * counter[axis];
            counter[axis] = 0;
        }
    }
    idx
}

/// Sums an `out`-shaped gradient down onto a broadcast operand's shape.
pub(crate) fn reduce_broadcast(grad: &[f64], out: &[usize], inp: &[usize]) -> Vec<f64> {
    if out == inp {
        return grad.to_vec();
    }
    let n_in: usize = inp.iter().product();
    let mut acc = vec![0.0; n_in];
    if out.ends_with(inp) {
        for chunk in grad.chunks(n_in.max(1)) {
            for (a, g) in acc.iter_mut().zip(chunk) {
                *a += g;
            }
        }
        return acc;
    }
    for (g, j) in grad.iter().zip(broadcast_index(out, inp)) {
        acc[j] += g;
    }
    acc
}

/// `c = alpha * op(a) @ op(b) + beta * c` for row-major slices.
///
/// `a` is `m x k` after optional transposition, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: strides describe exactly the m*k, k*n and m*n row-major buffers
    // checked above, and `c` does not alias `a` or `b`.
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
