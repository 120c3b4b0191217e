//! Raw numeric kernels shared by the tape's forward and backward passes.
//! Everything here is plain slices; the tape owns shapes and bookkeeping.

use crate::error::{AdError, Result};
use crate::scalar::Scalar;
use crate::tensor::strides;

/// Per-axis placement rule for zero-padding and the matching slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alignment {
    /// Source occupies the leading indices of the axis.
    Leading,
    /// Source sits centered; requires an even gap.
    Centered,
}

impl Alignment {
    pub fn offset(self, source: usize, target: usize, axis: usize) -> Result<usize> {
        if source > target {
            return Err(AdError::ShapeError {
                op: "zero_pad",
                shape: vec![source, target],
                reason: format!("axis {axis}: source extent exceeds target"),
            });
        }
        match self {
            Alignment::Leading => Ok(0),
            Alignment::Centered => {
                let gap = target - source;
                if gap % 2 != 0 {
                    return Err(AdError::AlignmentError {
                        axis,
                        src_extent: source,
                        target,
                    });
                }
                Ok(gap / 2)
            }
        }
    }
}

pub(crate) fn check_window(shape: &[usize], offsets: &[usize], lens: &[usize]) -> Result<()> {
    if offsets.len() != shape.len() || lens.len() != shape.len() {
        return Err(AdError::ShapeError {
            op: "slice_view",
            shape: shape.to_vec(),
            reason: format!("window rank {} vs tensor rank {}", offsets.len(), shape.len()),
        });
    }
    for axis in 0..shape.len() {
        if lens[axis] == 0 || offsets[axis] + lens[axis] > shape[axis] {
            return Err(AdError::RangeError {
                axis,
                offset: offsets[axis],
                len: lens[axis],
                extent: shape[axis],
            });
        }
    }
    Ok(())
}

/// Copy the window `offsets..offsets+lens` of `src` (shape `shape`) into `dst`.
pub(crate) fn copy_window<T: Scalar>(
    src: &[T],
    shape: &[usize],
    offsets: &[usize],
    lens: &[usize],
    dst: &mut [T],
) {
    let src_strides = strides(shape);
    // Walk the window row by contiguous last-axis run.
    let last = shape.len() - 1;
    let run = lens[last];
    let rows: usize = lens[..last].iter().product();
    let mut idx = vec![0usize; last];
    for row in 0..rows.max(1) {
        let mut src_base = offsets[last];
        for (axis, &i) in idx.iter().enumerate() {
            src_base += (offsets[axis] + i) * src_strides[axis];
        }
        dst[row * run..(row + 1) * run].copy_from_slice(&src[src_base..src_base + run]);
        // Odometer increment over the leading axes.
        for axis in (0..last).rev() {
            idx[axis] += 1;
            if idx[axis] < lens[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

/// Accumulate `src` (shape `lens`) into the window of `dst` (shape `shape`).
pub(crate) fn scatter_window<T: Scalar>(
    src: &[T],
    shape: &[usize],
    offsets: &[usize],
    lens: &[usize],
    dst: &mut [T],
) {
    let dst_strides = strides(shape);
    let last = shape.len() - 1;
    let run = lens[last];
    let rows: usize = lens[..last].iter().product();
    let mut idx = vec![0usize; last];
    for row in 0..rows.max(1) {
        let mut dst_base = offsets[last];
        for (axis, &i) in idx.iter().enumerate() {
            dst_base += (offsets[axis] + i) * dst_strides[axis];
        }
        for j in 0..run {
            dst[dst_base + j] = dst[dst_base + j] + src[row * run + j];
        }
        for axis in (0..last).rev() {
            idx[axis] += 1;
            if idx[axis] < lens[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

/// c[m,n] += a[m,k] * b[k,n]
pub(crate) fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + aip * brow[j];
            }
        }
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T
pub(crate) fn matmul_bt_acc<T: Scalar>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for p in 0..k {
                acc = acc + arow[p] * brow[p];
            }
            crow[j] = crow[j] + acc;
        }
    }
}

/// c[k,n] += a[m,k]^T * b[m,n]
pub(crate) fn matmul_at_acc<T: Scalar>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + aip * brow[j];
            }
        }
    }
}

/// Softmax with max-subtraction along contiguous lanes of length `len`;
/// the caller arranges (outer, len, inner) indexing.
pub(crate) fn softmax_lanes<T: Scalar>(
    x: &[T],
    y: &mut [T],
    outer: usize,
    len: usize,
    inner: usize,
) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = T::neg_infinity();
            for l in 0..len {
                let v = x[base + l * inner];
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = T::zero();
            for l in 0..len {
                let e = (x[base + l * inner] - mx).exp();
                y[base + l * inner] = e;
                sum = sum + e;
            }
            for l in 0..len {
                y[base + l * inner] = y[base + l * inner] / sum;
            }
        }
    }
}

pub(crate) const GELU_COEF: f64 = 0.044_715;

pub(crate) fn gelu_value<T: Scalar>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::from_f64(GELU_COEF) * x * x * x);
    T::from_f64(0.5) * x * (T::one() + u.tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let coef = T::from_f64(GELU_COEF);
    let u = c * (x + coef * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    let du = c * (T::one() + T::from_f64(3.0) * coef * x * x);
    T::from_f64(0.5) * (T::one() + t) + T::from_f64(0.5) * x * sech2 * du
}

pub(crate) fn softplus_value<T: Scalar>(x: T) -> T {
    // log(1 + e^x) = max(x, 0) + log(1 + e^{-|x|})
    let zero = T::zero();
    let m = if x > zero { x } else { zero };
    m + (T::one() + (-x.abs()).exp()).ln()
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}
