//! Recording tape and differentiable variables.
//!
//! Every forward primitive appends one record; `Tape::backward` walks the
//! records in reverse, accumulating vector-Jacobian products. A tape is
//! consumed by its backward pass and must be re-recorded afterwards.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;

use crate::conv::{conv2d_backward, conv2d_forward, conv_dims};
pub use crate::conv::Conv2dSpec;
use crate::error::{AdError, Result};
use crate::ops::{
    check_window, copy_window, gelu_grad, gelu_value, matmul_acc, matmul_at_acc, matmul_bt_acc,
    scatter_window, sigmoid, softmax_lanes, softplus_value, Alignment,
};
use crate::scalar::Scalar;
use crate::tensor::{numel, strides, Tensor};

const MASK_FILL: f64 = -1e30;

#[derive(Debug, Clone, Copy)]
struct GammaNoise<T> {
    /// Accepted standard normal draw of the Marsaglia-Tsang sampler.
    x: T,
    /// Uniform used for the shape augmentation when concentration < 1.
    boost: Option<T>,
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Matmul { a: usize, b: usize },
    /// y = a * b^T with b stored row-major [n, k].
    MatmulBt { a: usize, b: usize },
    Bmm { a: usize, b: usize, transpose_b: bool },
    Conv2d { x: usize, kernel: usize, spec: Conv2dSpec },
    ZeroPad { x: usize, offsets: Vec<usize> },
    Slice { x: usize, offsets: Vec<usize> },
    Permute { x: usize, perm: Vec<usize> },
    Softmax { x: usize, axis: usize },
    CrossEntropy { logits: usize, labels: Vec<usize> },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRow { x: usize, bias: usize },
    AddChanBias { x: usize, bias: usize },
    Scale { x: usize, c: T },
    MulScalarVar { x: usize, s: usize },
    NormalizeSum { x: usize },
    Relu { x: usize },
    Gelu { x: usize },
    Softplus { x: usize },
    Sum { x: usize },
    Mean { x: usize },
    Concat { xs: Vec<usize>, axis: usize },
    Reshape { x: usize },
    NormFeature { x: usize, gamma: usize, beta: usize, count: usize, eps: T },
    NormSpatial { x: usize, gamma: usize, beta: usize, eps: T },
    Embed { table: usize, ids: Vec<usize> },
    CausalMask { x: usize },
    GlobalAvgPool { x: usize },
    GammaReparam { c: usize, noise: Vec<GammaNoise<T>> },
    GumbelSt { alpha: usize, noise: Vec<T>, tau: T },
}

struct Record<T: Scalar> {
    op: Op<T>,
    out: usize,
}

struct Node<T: Scalar> {
    data: Vec<T>,
    shape: Vec<usize>,
    needs_grad: bool,
    is_leaf: bool,
}

struct TapeInner<T: Scalar> {
    nodes: Vec<Node<T>>,
    records: Vec<Record<T>>,
    consumed: bool,
}

/// Recording tape; cheap to clone (shared handle).
pub struct Tape<T: Scalar> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Scalar> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one tape node.
pub struct Var<T: Scalar> {
    tape: Tape<T>,
    id: usize,
}

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var {
            tape: self.tape.clone(),
            id: self.id,
        }
    }
}

/// Adjoints of the `requires_grad` leaves after a backward pass.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&[T]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: &Var<T>) -> Option<Vec<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                records: Vec::new(),
                consumed: false,
            })),
        }
    }

    fn push_node(&self, data: Vec<T>, shape: Vec<usize>, needs_grad: bool, is_leaf: bool) -> Var<T> {
        let mut inner = self.inner.borrow_mut();
        assert!(
            !inner.consumed,
            "recording on a consumed tape; create a fresh tape per step"
        );
        debug_assert_eq!(data.len(), numel(&shape));
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            data,
            shape,
            needs_grad,
            is_leaf,
        });
        Var {
            tape: self.clone(),
            id,
        }
    }

    /// Register a tensor as a differentiable leaf (data is snapshotted).
    pub fn leaf(&self, t: &Tensor<T>) -> Var<T> {
        self.push_node(t.values().to_vec(), t.shape().to_vec(), t.requires_grad(), true)
    }

    /// Register a tensor as a constant input.
    pub fn constant(&self, t: &Tensor<T>) -> Var<T> {
        self.push_node(t.values().to_vec(), t.shape().to_vec(), false, true)
    }

    pub fn constant_from(&self, shape: Vec<usize>, data: Vec<T>) -> Var<T> {
        self.push_node(data, shape, false, true)
    }

    pub fn scalar_const(&self, value: T) -> Var<T> {
        self.push_node(vec![value], vec![1], false, true)
    }

    fn record(&self, op: Op<T>, data: Vec<T>, shape: Vec<usize>, needs_grad: bool) -> Var<T> {
        let out = self.push_node(data, shape, needs_grad, false);
        self.inner.borrow_mut().records.push(Record { op, out: out.id });
        out
    }

    fn node_shape(&self, id: usize) -> Vec<usize> {
        self.inner.borrow().nodes[id].shape.clone()
    }

    fn node_needs_grad(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].needs_grad
    }

    /// Reverse pass from a scalar loss. Consumes the recording: a second
    /// backward on the same tape is a stale-tape error.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(AdError::StaleTape);
        }
        inner.consumed = true;
        if loss.id >= inner.nodes.len() {
            return Err(AdError::NotScalar { numel: 0 });
        }
        if inner.nodes[loss.id].data.len() != 1 {
            return Err(AdError::NotScalar {
                numel: inner.nodes[loss.id].data.len(),
            });
        }
        let TapeInner { nodes, records, .. } = &mut *inner;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![T::one()]);
        for rec in records.iter().rev() {
            // Taking the output grad releases intermediates as we go.
            let gout = match grads[rec.out].take() {
                Some(g) => g,
                None => continue,
            };
            backward_op(nodes, &mut grads, &rec.op, rec.out, &gout);
        }
        // Only leaves keep their adjoints.
        for (node, grad) in nodes.iter().zip(grads.iter_mut()) {
            if !(node.is_leaf && node.needs_grad) {
                *grad = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn grad_buf<'a, T: Scalar>(
    grads: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    id: usize,
) -> Option<&'a mut Vec<T>> {
    if !nodes[id].needs_grad {
        return None;
    }
    if grads[id].is_none() {
        grads[id] = Some(vec![T::zero(); nodes[id].data.len()]);
    }
    grads[id].as_mut()
}

impl<T: Scalar> Var<T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> Tape<T> {
        self.tape.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.node_shape(self.id)
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].data.len()
    }

    pub fn value(&self) -> Vec<T> {
        self.tape.inner.borrow().nodes[self.id].data.clone()
    }

    pub fn scalar_value(&self) -> T {
        self.tape.inner.borrow().nodes[self.id].data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.node_needs_grad(self.id)
    }

    fn same_tape(&self, other: &Var<T>) {
        assert!(
            Rc::ptr_eq(&self.tape.inner, &other.tape.inner),
            "variables belong to different tapes"
        );
    }

    pub fn matmul(&self, rhs: &Var<T>) -> Result<Var<T>> {
        self.same_tape(rhs);
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AdError::DimMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let inner = self.tape.inner.borrow();
        let mut out = vec![T::zero(); m * n];
        matmul_acc(
            &inner.nodes[self.id].data,
            &inner.nodes[rhs.id].data,
            &mut out,
            m,
            k,
            n,
        );
        let needs = inner.nodes[self.id].needs_grad || inner.nodes[rhs.id].needs_grad;
        drop(inner);
        Ok(self.tape.record(
            Op::Matmul {
                a: self.id,
                b: rhs.id,
            },
            out,
            vec![m, n],
            needs,
        ))
    }

    /// y = self * rhs^T, rhs stored [n, k] (linear-layer weight convention).
    pub fn matmul_bt(&self, rhs: &Var<T>) -> Result<Var<T>> {
        self.same_tape(rhs);
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(AdError::DimMismatch {
                op: "matmul_bt",
                left: sa,
                right: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let inner = self.tape.inner.borrow();
        let mut out = vec![T::zero(); m * n];
        matmul_bt_acc(
            &inner.nodes[self.id].data,
            &inner.nodes[rhs.id].data,
            &mut out,
            m,
            k,
            n,
        );
        let needs = inner.nodes[self.id].needs_grad || inner.nodes[rhs.id].needs_grad;
        drop(inner);
        Ok(self.tape.record(
            Op::MatmulBt {
                a: self.id,
                b: rhs.id,
            },
            out,
            vec![m, n],
            needs,
        ))
    }

    pub fn add(&self, rhs: &Var<T>) -> Result<Var<T>> {
        self.same_tape(rhs);
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa != sb {
            return Err(AdError::DimMismatch {
                op: "add",
                left: sa,
                right: sb,
            });
        }
        let inner = self.tape.inner.borrow();
        let out: Vec<T> = inner.nodes[self.id]
            .data
            .iter()
            .zip(&inner.nodes[rhs.id].data)
            .map(|(&a, &b)| a + b)
            .collect();
        let needs = inner.nodes[self.id].needs_grad || inner.nodes[rhs.id].needs_grad;
        drop(inner);
        Ok(self.tape.record(
            Op::Add {
                a: self.id,
                b: rhs.id,
            },
            out,
            sa,
            needs,
        ))
    }

    pub fn mul(&self, rhs: &Var<T>) -> Result<Var<T>> {
        self.same_tape(rhs);
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa != sb {
            return Err(AdError::DimMismatch {
                op: "mul",
                left: sa,
                right: sb,
            });
        }
        let inner = self.tape.inner.borrow();
        let out: Vec<T> = inner.nodes[self.id]
            .data
            .iter()
            .zip(&inner.nodes[rhs.id].data)
            .map(|(&a, &b)| a * b)
            .collect();
        let needs = inner.nodes[self.id].needs_grad || inner.nodes[rhs.id].needs_grad;
        drop(inner);
        Ok(self.tape.record(
            Op::Mul {
                a: self.id,
                b: rhs.id,
            },
            out,
            sa,
            needs,
        ))
    }

    /// Broadcast-add a vector along the last axis.
    pub fn add_row(&self, bias: &Var<T>) -> Result<Var<T>> {
        self.same_tape(bias);
        let (sx, sb) = (self.shape(), bias.shape());
        if sb.len() != 1 || sx.is_empty() || *sx.last().unwrap() != sb[0] {
            return Err(AdError::DimMismatch {
                op: "add_row",
                left: sx,
                right: sb,
            });
        }
        let d = sb[0];
        let inner = self.tape.inner.borrow();
        let b = &inner.nodes[bias.id].data;
        let out: Vec<T> = inner.nodes[self.id]
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % d])
            .collect();
        let needs = inner.nodes[self.id].needs_grad || inner.nodes[bias.id].needs_grad;
        drop(inner);
        Ok(self.tape.record(
            Op::AddRow {
                x: self.id,
                bias: bias.id,
            },
            out,
            sx,
            needs,
        ))
    }

    /// Broadcast-add a per-channel bias to a [N, C, H, W] tensor.
    pub fn add_chan_bias(&self, bias: &Var<T>) -> Result<Var<T>> {
        self.same_tape(bias);
        let (sx, sb) = (self.shape(), bias.shape());
        if sx.len() != 4 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(AdError::DimMismatch {
                op: "add_chan_bias",
                left: sx,
                right: sb,
            });
        }
        let hw = sx[2] * sx[3];
        let c = sx[1];
        let inner = self.tape.inner.borrow();
        let b = &inner.nodes[bias.id].data;
        let out: Vec<T> = inner.nodes[self.id]
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[(i / hw) % c])
            .collect();
        let needs = inner.nodes[self.id].needs_grad || inner.nodes[bias.id].needs_grad;
        drop(inner);
        Ok(self.tape.record(
            Op::AddChanBias {
                x: self.id,
                bias: bias.id,
            },
            out,
            sx,
            needs,
        ))
    }

    pub fn scale(&self, c: T) -> Var<T> {
        let shape = self.shape();
        let inner = self.tape.inner.borrow();
        let out: Vec<T> = inner.nodes[self.id].data.iter().map(|&v| v * c).collect();
        let needs = inner.nodes[self.id].needs_grad;
        drop(inner);
        self.tape.record(Op::Scale { x: self.id, c }, out, shape, needs)
    }

    /// Multiply by a one-element variable (differentiable in both).
    pub fn mul_scalar_var(&self, s: &Var<T>) -> Result<Var<T>> {
        self.same_tape(s);
        if s.numel() != 1 {
            return Err(AdError::NotScalar { numel: s.numel() });
        }
        let shape = self.shape();
        let inner = self.tape.inner.borrow();
        let sv = inner.nodes[s.id].data[0];
        let out: Vec<T> = inner.nodes[self.id].data.iter().map(|&v| v * sv).collect();
        let needs = inner.nodes[self.id].needs_grad || inner.nodes[s.id].needs_grad;
        drop(inner);
        Ok(self.tape.record(
            Op::MulScalarVar {
                x: self.id,
                s: s.id,
            },
            out,
            shape,
            needs,
        ))
    }

    /// y = x / sum(x); caller guarantees a nonnegative vector.
    pub fn normalize_sum(&self) -> Var<T> {
        let shape = self.shape();
        let inner = self.tape.inner.borrow();
        let s: T = inner.nodes[self.id].data.iter().copied().sum();
        let out: Vec<T> = inner.nodes[self.id].data.iter().map(|&v| v / s).collect();
        let needs = inner.nodes[self.id].needs_grad;
        drop(inner);
        self.tape.record(Op::NormalizeSum { x: self.id }, out, shape, needs)
    }

    pub fn relu(&self) -> Var<T> {
        let shape = self.shape();
        let inner = self.tape.inner.borrow();
        let out: Vec<T> = inner.nodes[self.id]
            .data
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let needs = inner.nodes[self.id].needs_grad;
        drop(inner);
        self.tape.record(Op::Relu { x: self.id }, out, shape, needs)
    }

    pub fn gelu(&self) -> Var<T> {
        let shape = self.shape();
        let inner = self.tape.inner.borrow();
        let out: Vec<T> = inner.nodes[self.id].data.iter().map(|&v| gelu_value(v)).collect();
        let needs = inner.nodes[self.id].needs_grad;
        drop(inner);
        self.tape.record(Op::Gelu { x: self.id }, out, shape, needs)
    }

    pub fn softplus(&self) -> Var<T> {
        let shape = self.shape();
        let inner = self.tape.inner.borrow();
        let out: Vec<T> = inner.nodes[self.id]
            .data
            .iter()
            .map(|&v| softplus_value(v))
            .collect();
        let needs = inner.nodes[self.id].needs_grad;
        drop(inner);
        self.tape.record(Op::Softplus { x: self.id }, out, shape, needs)
    }

    pub fn sum(&self) -> Var<T> {
        let inner = self.tape.inner.borrow();
        let s: T = inner.nodes[self.id].data.iter().copied().sum();
        let needs = inner.nodes[self.id].needs_grad;
        drop(inner);
        self.tape.record(Op::Sum { x: self.id }, vec![s], vec![1], needs)
    }

    pub fn mean(&self) -> Var<T> {
        let inner = self.tape.inner.borrow();
        let n = inner.nodes[self.id].data.len();
        let s: T = inner.nodes[self.id].data.iter().copied().sum();
        let needs = inner.nodes[self.id].needs_grad;
        drop(inner);
        self.tape.record(
            Op::Mean { x: self.id },
            vec![s / T::from_usize(n)],
            vec![1],
            needs,
        )
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<T>> {
        if numel(&shape) != self.numel() {
            return Err(AdError::ShapeError {
                op: "reshape",
                shape,
                reason: format!("element count mismatch with {:?}", self.shape()),
            });
        }
        let inner = self.tape.inner.borrow();
        let out = inner.nodes[self.id].data.clone();
        let needs = inner.nodes[self.id].needs_grad;
        drop(inner);
        Ok(self.tape.record(Op::Reshape { x: self.id }, out, shape, needs))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<T>> {
        let shape = self.shape();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(AdError::ShapeError {
                op: "permute",
                shape,
                reason: format!("invalid permutation {perm:?}"),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides(&shape);
        let out_strides = strides(&out_shape);
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].data;
        let mut out = vec![T::zero(); x.len()];
        let mut idx = vec![0usize; rank];
        for o in 0..x.len() {
            // Decode output index, map through the permutation.
            let mut rem = o;
            for a in 0..rank {
                idx[a] = rem / out_strides[a];
                rem %= out_strides[a];
            }
            let mut src = 0;
            for a in 0..rank {
                src += idx[a] * in_strides[perm[a]];
            }
            out[o] = x[src];
        }
        let needs = inner.nodes[self.id].needs_grad;
        drop(inner);
        Ok(self.tape.record(
            Op::Permute {
                x: self.id,
                perm: perm.to_vec(),
            },
            out,
            out_shape,
            needs,
        ))
    }

    /// Contiguous window view (copy). Backward scatters into the window.
    pub fn slice_view(&self, offsets: &[usize], lens: &[usize]) -> Result<Var<T>> {
        let shape = self.shape();
        check_window(&shape, offsets, lens)?;
        let inner = self.tape.inner.borrow();
        let mut out = vec![T::zero(); numel(lens)];
        copy_window(&inner.nodes[self.id].data, &shape, offsets, lens, &mut out);
        let needs = inner.nodes[self.id].needs_grad;
        drop(inner);
        Ok(self.tape.record(
            Op::Slice {
                x: self.id,
                offsets: offsets.to_vec(),
            },
            out,
            lens.to_vec(),
            needs,
        ))
    }

    /// Embed into `target_shape`, placing the source per-axis by `alignment`.
    pub fn zero_pad(&self, target_shape: &[usize], alignment: &[Alignment]) -> Result<Var<T>> {
        let shape = self.shape();
        if target_shape.len() != shape.len() || alignment.len() != shape.len() {
            return Err(AdError::ShapeError {
                op: "zero_pad",
                shape: target_shape.to_vec(),
                reason: format!("rank mismatch with source {shape:?}"),
            });
        }
        let mut offsets = Vec::with_capacity(shape.len());
        for axis in 0..shape.len() {
            offsets.push(alignment[axis].offset(shape[axis], target_shape[axis], axis)?);
        }
        let inner = self.tape.inner.borrow();
        let mut out = vec![T::zero(); numel(target_shape)];
        scatter_window(
            &inner.nodes[self.id].data,
            target_shape,
            &offsets,
            &shape,
            &mut out,
        );
        let needs = inner.nodes[self.id].needs_grad;
        drop(inner);
        Ok(self.tape.record(
            Op::ZeroPad {
                x: self.id,
                offsets,
            },
            out,
            target_shape.to_vec(),
            needs,
        ))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(AdError::AxisOutOfRange {
                axis,
                rank: shape.len(),
            });
        }
        let len = shape[axis];
        let inner_dim: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let inner = self.tape.inner.borrow();
        let mut out = vec![T::zero(); inner.nodes[self.id].data.len()];
        softmax_lanes(&inner.nodes[self.id].data, &mut out, outer, len, inner_dim);
        let needs = inner.nodes[self.id].needs_grad;
        drop(inner);
        Ok(self.tape.record(Op::Softmax { x: self.id, axis }, out, shape, needs))
    }

    /// Mask the strict upper triangle of each [T, T] slice to a large
    /// negative value (pre-softmax causal attention mask).
    pub fn causal_mask(&self) -> Result<Var<T>> {
        let shape = self.shape();
        if shape.len() != 3 || shape[1] != shape[2] {
            return Err(AdError::ShapeError {
                op: "causal_mask",
                shape,
                reason: "expects [batch, t, t]".into(),
            });
        }
        let t = shape[1];
        let fill = T::from_f64(MASK_FILL);
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].data;
        let mut out = x.clone();
        for b in 0..shape[0] {
            for i in 0..t {
                for j in (i + 1)..t {
                    out[(b * t + i) * t + j] = fill;
                }
            }
        }
        let needs = inner.nodes[self.id].needs_grad;
        drop(inner);
        Ok(self.tape.record(Op::CausalMask { x: self.id }, out, shape, needs))
    }

    /// Mean over the spatial axes of [N, C, H, W] -> [N, C].
    pub fn global_avg_pool(&self) -> Result<Var<T>> {
        let shape = self.shape();
        if shape.len() != 4 {
            return Err(AdError::ShapeError {
                op: "global_avg_pool",
                shape,
                reason: "expects rank 4".into(),
            });
        }
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].data;
        let mut out = vec![T::zero(); n * c];
        for i in 0..n * c {
            let mut s = T::zero();
            for j in 0..hw {
                s = s + x[i * hw + j];
            }
            out[i] = s / T::from_usize(hw);
        }
        let needs = inner.nodes[self.id].needs_grad;
        drop(inner);
        Ok(self.tape.record(
            Op::GlobalAvgPool { x: self.id },
            out,
            vec![n, c],
            needs,
        ))
    }
}

/// Grouped 2-D cross-correlation.
pub fn conv2d<T: Scalar>(x: &Var<T>, kernel: &Var<T>, spec: Conv2dSpec) -> Result<Var<T>> {
    x.same_tape(kernel);
    let d = conv_dims(&x.shape(), &kernel.shape(), &spec)?;
    let inner = x.tape.inner.borrow();
    let out = conv2d_forward(
        &inner.nodes[x.id].data,
        &inner.nodes[kernel.id].data,
        &d,
        &spec,
    );
    let needs = inner.nodes[x.id].needs_grad || inner.nodes[kernel.id].needs_grad;
    let shape = vec![d.n, d.cout, d.ho, d.wo];
    drop(inner);
    Ok(x.tape.record(
        Op::Conv2d {
            x: x.id,
            kernel: kernel.id,
            spec,
        },
        out,
        shape,
        needs,
    ))
}

/// Batched matmul over rank-3 operands; `transpose_b` treats `b` as [batch, n, k].
pub fn bmm<T: Scalar>(a: &Var<T>, b: &Var<T>, transpose_b: bool) -> Result<Var<T>> {
    a.same_tape(b);
    let (sa, sb) = (a.shape(), b.shape());
    let ok = sa.len() == 3
        && sb.len() == 3
        && sa[0] == sb[0]
        && if transpose_b {
            sa[2] == sb[2]
        } else {
            sa[2] == sb[1]
        };
    if !ok {
        return Err(AdError::DimMismatch {
            op: "bmm",
            left: sa,
            right: sb,
        });
    }
    let (batch, m, k) = (sa[0], sa[1], sa[2]);
    let n = if transpose_b { sb[1] } else { sb[2] };
    let inner = a.tape.inner.borrow();
    let av = &inner.nodes[a.id].data;
    let bv = &inner.nodes[b.id].data;
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        let ab = &av[i * m * k..(i + 1) * m * k];
        let bb = &bv[i * k * n..(i + 1) * k * n];
        let ob = &mut out[i * m * n..(i + 1) * m * n];
        if transpose_b {
            matmul_bt_acc(ab, bb, ob, m, k, n);
        } else {
            matmul_acc(ab, bb, ob, m, k, n);
        }
    }
    let needs = inner.nodes[a.id].needs_grad || inner.nodes[b.id].needs_grad;
    drop(inner);
    Ok(a.tape.record(
        Op::Bmm {
            a: a.id,
            b: b.id,
            transpose_b,
        },
        out,
        vec![batch, m, n],
        needs,
    ))
}

/// Mean cross-entropy between logits [rows, classes] and integer labels.
pub fn cross_entropy<T: Scalar>(logits: &Var<T>, labels: &[usize]) -> Result<Var<T>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(AdError::ShapeError {
            op: "cross_entropy",
            shape,
            reason: format!("expects [rows, classes] with {} labels", labels.len()),
        });
    }
    let classes = shape[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(AdError::LabelOutOfRange {
            label: bad,
            classes,
        });
    }
    let inner = logits.tape.inner.borrow();
    let x = &inner.nodes[logits.id].data;
    let rows = labels.len();
    let mut total = T::zero();
    for (r, &label) in labels.iter().enumerate() {
        let row = &x[r * classes..(r + 1) * classes];
        let mut mx = T::neg_infinity();
        for &v in row {
            if v > mx {
                mx = v;
            }
        }
        let mut lse = T::zero();
        for &v in row {
            lse = lse + (v - mx).exp();
        }
        total = total + (mx + lse.ln() - row[label]);
    }
    let needs = inner.nodes[logits.id].needs_grad;
    drop(inner);
    Ok(logits.tape.record(
        Op::CrossEntropy {
            logits: logits.id,
            labels: labels.to_vec(),
        },
        vec![total / T::from_usize(rows)],
        vec![1],
        needs,
    ))
}

/// Concatenate along `axis`; inputs must agree on every other axis.
pub fn concat<T: Scalar>(vars: &[Var<T>], axis: usize) -> Result<Var<T>> {
    assert!(!vars.is_empty(), "concat of zero inputs");
    let first = vars[0].shape();
    if axis >= first.len() {
        return Err(AdError::AxisOutOfRange {
            axis,
            rank: first.len(),
        });
    }
    let mut out_shape = first.clone();
    out_shape[axis] = 0;
    for v in vars {
        vars[0].same_tape(v);
        let s = v.shape();
        if s.len() != first.len()
            || s.iter()
                .zip(&first)
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(AdError::DimMismatch {
                op: "concat",
                left: first,
                right: s,
            });
        }
        out_shape[axis] += s[axis];
    }
    let mut out = vec![T::zero(); numel(&out_shape)];
    let inner = vars[0].tape.inner.borrow();
    let mut offset = 0;
    for v in vars {
        let s = &inner.nodes[v.id].shape;
        let mut offsets = vec![0usize; s.len()];
        offsets[axis] = offset;
        scatter_window(&inner.nodes[v.id].data, &out_shape, &offsets, s, &mut out);
        offset += s[axis];
    }
    let needs = vars.iter().any(|v| inner.nodes[v.id].needs_grad);
    drop(inner);
    Ok(vars[0].tape.record(
        Op::Concat {
            xs: vars.iter().map(|v| v.id).collect(),
            axis,
        },
        out,
        out_shape,
        needs,
    ))
}

/// Row lookups: out[i] = table[ids[i]] with scatter-add backward.
pub fn embed<T: Scalar>(table: &Var<T>, ids: &[usize]) -> Result<Var<T>> {
    let shape = table.shape();
    if shape.len() != 2 {
        return Err(AdError::ShapeError {
            op: "embed",
            shape,
            reason: "table must be rank 2".into(),
        });
    }
    let (v, e) = (shape[0], shape[1]);
    if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
        return Err(AdError::LabelOutOfRange {
            label: bad,
            classes: v,
        });
    }
    let inner = table.tape.inner.borrow();
    let tv = &inner.nodes[table.id].data;
    let mut out = Vec::with_capacity(ids.len() * e);
    for &i in ids {
        out.extend_from_slice(&tv[i * e..(i + 1) * e]);
    }
    let needs = inner.nodes[table.id].needs_grad;
    drop(inner);
    Ok(table.tape.record(
        Op::Embed {
            table: table.id,
            ids: ids.to_vec(),
        },
        out,
        vec![ids.len(), e],
        needs,
    ))
}

/// Standardize each row of x (flattened to [rows, d]) using a soft element
/// count, then apply a learned affine. With zero-padded inputs and a count
/// equal to the active width this reproduces the narrow-layer normalization
/// exactly, because moments are computed as sums over the row divided by
/// `count` and the padded affine weights zero the polluted tail.
pub fn norm_feature<T: Scalar>(
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    count: &Var<T>,
    eps: T,
) -> Result<Var<T>> {
    x.same_tape(gamma);
    x.same_tape(beta);
    x.same_tape(count);
    let shape = x.shape();
    let d = *shape.last().ok_or(AdError::ShapeError {
        op: "norm_feature",
        shape: shape.clone(),
        reason: "rank 0".into(),
    })?;
    if gamma.shape() != vec![d] || beta.shape() != vec![d] || count.numel() != 1 {
        return Err(AdError::DimMismatch {
            op: "norm_feature",
            left: shape,
            right: gamma.shape(),
        });
    }
    let rows = numel(&shape) / d;
    let inner = x.tape.inner.borrow();
    let xv = &inner.nodes[x.id].data;
    let g = &inner.nodes[gamma.id].data;
    let b = &inner.nodes[beta.id].data;
    let n = inner.nodes[count.id].data[0];
    let mut out = vec![T::zero(); xv.len()];
    for r in 0..rows {
        let row = &xv[r * d..(r + 1) * d];
        let (mu, rstd) = row_moments(row, n, eps);
        for j in 0..d {
            out[r * d + j] = g[j] * (row[j] - mu) * rstd + b[j];
        }
    }
    let needs = inner.nodes[x.id].needs_grad
        || inner.nodes[gamma.id].needs_grad
        || inner.nodes[beta.id].needs_grad
        || inner.nodes[count.id].needs_grad;
    drop(inner);
    Ok(x.tape.record(
        Op::NormFeature {
            x: x.id,
            gamma: gamma.id,
            beta: beta.id,
            count: count.id,
            eps,
        },
        out,
        shape,
        needs,
    ))
}

/// Per-(sample, channel) standardization over the spatial axes of
/// [N, C, H, W] with a learned per-channel affine. No running statistics.
pub fn norm_spatial<T: Scalar>(x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: T) -> Result<Var<T>> {
    x.same_tape(gamma);
    x.same_tape(beta);
    let shape = x.shape();
    if shape.len() != 4 || gamma.shape() != vec![shape[1]] || beta.shape() != vec![shape[1]] {
        return Err(AdError::DimMismatch {
            op: "norm_spatial",
            left: shape,
            right: gamma.shape(),
        });
    }
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let count = T::from_usize(hw);
    let inner = x.tape.inner.borrow();
    let xv = &inner.nodes[x.id].data;
    let g = &inner.nodes[gamma.id].data;
    let b = &inner.nodes[beta.id].data;
    let mut out = vec![T::zero(); xv.len()];
    for i in 0..n * c {
        let row = &xv[i * hw..(i + 1) * hw];
        let (mu, rstd) = row_moments(row, count, eps);
        let ch = i % c;
        for j in 0..hw {
            out[i * hw + j] = g[ch] * (row[j] - mu) * rstd + b[ch];
        }
    }
    let needs = inner.nodes[x.id].needs_grad
        || inner.nodes[gamma.id].needs_grad
        || inner.nodes[beta.id].needs_grad;
    drop(inner);
    Ok(x.tape.record(
        Op::NormSpatial {
            x: x.id,
            gamma: gamma.id,
            beta: beta.id,
            eps,
        },
        out,
        shape,
        needs,
    ))
}

fn row_moments<T: Scalar>(row: &[T], count: T, eps: T) -> (T, T) {
    let mut s1 = T::zero();
    let mut s2 = T::zero();
    for &v in row {
        s1 = s1 + v;
        s2 = s2 + v * v;
    }
    let mu = s1 / count;
    let var = s2 / count - mu * mu;
    (mu, T::one() / (var + eps).sqrt())
}

/// Reparameterized Gamma(concentration, 1) draws, one per element.
/// The accepted rejection-sampler noise is stored so the backward pass can
/// differentiate the sample with respect to the concentration.
pub fn gamma_reparam<T: Scalar, R: Rng>(c: &Var<T>, rng: &mut R) -> Result<Var<T>> {
    let shape = c.shape();
    let inner = c.tape.inner.borrow();
    let cv = inner.nodes[c.id].data.clone();
    let needs = inner.nodes[c.id].needs_grad;
    drop(inner);
    let mut noise = Vec::with_capacity(cv.len());
    let mut out = Vec::with_capacity(cv.len());
    for &ci in &cv {
        let c64 = ci.as_f64();
        if !(c64 > 0.0) {
            return Err(AdError::NonFinite {
                what: format!("gamma concentration {c64}"),
            });
        }
        let boosted = c64 < 1.0;
        let a = if boosted { c64 + 1.0 } else { c64 };
        let x = marsaglia_tsang_accepted(a, rng);
        let boost = boosted.then(|| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            u
        });
        let (z, _) = gamma_value_grad(c64, x, boost);
        noise.push(GammaNoise {
            x: T::from_f64(x),
            boost: boost.map(T::from_f64),
        });
        out.push(T::from_f64(z));
    }
    Ok(c.tape.record(
        Op::GammaReparam {
            c: c.id,
            noise,
        },
        out,
        shape,
        needs,
    ))
}

/// Accepted standard-normal draw of the Marsaglia-Tsang squeeze sampler
/// for shape `a >= 1`.
fn marsaglia_tsang_accepted<R: Rng>(a: f64, rng: &mut R) -> f64 {
    let d = a - 1.0 / 3.0;
    let cc = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(rand_distr::StandardNormal);
        let t = 1.0 + cc * x;
        if t <= 0.0 {
            continue;
        }
        let v = t * t * t;
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        if u.ln() < 0.5 * x * x + d - d * v + d * v.ln() {
            return x;
        }
    }
}

/// Sample value and d(sample)/d(concentration) for fixed accepted noise.
fn gamma_value_grad(c: f64, x: f64, boost: Option<f64>) -> (f64, f64) {
    let a = if boost.is_some() { c + 1.0 } else { c };
    let d = a - 1.0 / 3.0;
    let cc = 1.0 / (9.0 * d).sqrt();
    let t = 1.0 + cc * x;
    let v = t * t * t;
    let z1 = d * v;
    // dcc/dd for cc = (9d)^(-1/2)
    let dcc = -4.5 * (9.0 * d).powf(-1.5);
    let dv = 3.0 * t * t * x * dcc;
    let dz1 = v + d * dv;
    match boost {
        None => (z1, dz1),
        Some(u) => {
            let w = (u.ln() / c).exp();
            let z = z1 * w;
            let dz = dz1 * w + z1 * w * u.ln() * (-1.0 / (c * c));
            (z, dz)
        }
    }
}

/// Straight-through Gumbel sample: the forward value is exactly one-hot at
/// argmax(alpha + g); the backward pass uses the softmax((alpha + g)/tau)
/// Jacobian. Ties break toward the lowest index.
pub fn gumbel_straight_through<T: Scalar, R: Rng>(
    alpha: &Var<T>,
    tau: T,
    rng: &mut R,
) -> Result<Var<T>> {
    let shape = alpha.shape();
    if shape.len() != 1 {
        return Err(AdError::ShapeError {
            op: "gumbel_straight_through",
            shape,
            reason: "expects a vector".into(),
        });
    }
    let inner = alpha.tape.inner.borrow();
    let av = inner.nodes[alpha.id].data.clone();
    let needs = inner.nodes[alpha.id].needs_grad;
    drop(inner);
    let mut noise = Vec::with_capacity(av.len());
    for _ in 0..av.len() {
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        noise.push(T::from_f64(-(-u.ln()).ln()));
    }
    let mut best = 0usize;
    let mut best_v = av[0] + noise[0];
    for i in 1..av.len() {
        let v = av[i] + noise[i];
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    let mut out = vec![T::zero(); av.len()];
    out[best] = T::one();
    Ok(alpha.tape.record(
        Op::GumbelSt {
            alpha: alpha.id,
            noise,
            tau,
        },
        out,
        shape,
        needs,
    ))
}

fn backward_op<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut Vec<Option<Vec<T>>>,
    op: &Op<T>,
    out: usize,
    gout: &[T],
) {
    match op {
        Op::Matmul { a, b } => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[1];
            let (av, bv) = (&nodes[*a].data, &nodes[*b].data);
            if let Some(da) = grad_buf(grads, nodes, *a) {
                matmul_bt_acc(gout, bv, da, m, n, k);
            }
            if let Some(db) = grad_buf(grads, nodes, *b) {
                matmul_at_acc(av, gout, db, m, k, n);
            }
        }
        Op::MatmulBt { a, b } => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[0];
            let (av, bv) = (&nodes[*a].data, &nodes[*b].data);
            if let Some(da) = grad_buf(grads, nodes, *a) {
                matmul_acc(gout, bv, da, m, n, k);
            }
            if let Some(db) = grad_buf(grads, nodes, *b) {
                matmul_at_acc(gout, av, db, m, n, k);
            }
        }
        Op::Bmm { a, b, transpose_b } => {
            let (batch, m, k) = (
                nodes[*a].shape[0],
                nodes[*a].shape[1],
                nodes[*a].shape[2],
            );
            let n = if *transpose_b {
                nodes[*b].shape[1]
            } else {
                nodes[*b].shape[2]
            };
            let (av, bv) = (&nodes[*a].data, &nodes[*b].data);
            for i in 0..batch {
                let gb = &gout[i * m * n..(i + 1) * m * n];
                let ab = &av[i * m * k..(i + 1) * m * k];
                let bb = &bv[i * k * n..(i + 1) * k * n];
                if let Some(da) = grad_buf(grads, nodes, *a) {
                    let da = &mut da[i * m * k..(i + 1) * m * k];
                    if *transpose_b {
                        matmul_acc(gb, bb, da, m, n, k);
                    } else {
                        matmul_bt_acc(gb, bb, da, m, n, k);
                    }
                }
                if let Some(db) = grad_buf(grads, nodes, *b) {
                    let db = &mut db[i * k * n..(i + 1) * k * n];
                    if *transpose_b {
                        matmul_at_acc(gb, ab, db, m, n, k);
                    } else {
                        matmul_at_acc(ab, gb, db, m, k, n);
                    }
                }
            }
        }
        Op::Conv2d { x, kernel, spec } => {
            let d = conv_dims(&nodes[*x].shape, &nodes[*kernel].shape, spec)
                .expect("conv dims validated at record time");
            let need_dx = nodes[*x].needs_grad;
            let need_dk = nodes[*kernel].needs_grad;
            let g = conv2d_backward(
                &nodes[*x].data,
                &nodes[*kernel].data,
                gout,
                &d,
                spec,
                need_dx,
                need_dk,
            );
            if let (Some(dx_new), Some(dx)) = (g.dx, grad_buf(grads, nodes, *x)) {
                for (d0, d1) in dx.iter_mut().zip(&dx_new) {
                    *d0 = *d0 + *d1;
                }
            }
            if let (Some(dk_new), Some(dk)) = (g.dk, grad_buf(grads, nodes, *kernel)) {
                for (d0, d1) in dk.iter_mut().zip(&dk_new) {
                    *d0 = *d0 + *d1;
                }
            }
        }
        Op::ZeroPad { x, offsets } => {
            if nodes[*x].needs_grad {
                let lens = nodes[*x].shape.clone();
                let out_shape = nodes[out].shape.clone();
                let mut tmp = vec![T::zero(); nodes[*x].data.len()];
                copy_window(gout, &out_shape, offsets, &lens, &mut tmp);
                let dx = grad_buf(grads, nodes, *x).unwrap();
                for (d0, d1) in dx.iter_mut().zip(&tmp) {
                    *d0 = *d0 + *d1;
                }
            }
        }
        Op::Slice { x, offsets } => {
            if nodes[*x].needs_grad {
                let out_shape = nodes[out].shape.clone();
                let x_shape = nodes[*x].shape.clone();
                let dx = grad_buf(grads, nodes, *x).unwrap();
                scatter_window(gout, &x_shape, offsets, &out_shape, dx);
            }
        }
        Op::Permute { x, perm } => {
            if let Some(dx) = grad_buf(grads, nodes, *x) {
                let in_shape = &nodes[*x].shape;
                let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
                let in_strides = strides(in_shape);
                let out_strides = strides(&out_shape);
                let rank = in_shape.len();
                let mut idx = vec![0usize; rank];
                for (o, &g) in gout.iter().enumerate() {
                    let mut rem = o;
                    for a in 0..rank {
                        idx[a] = rem / out_strides[a];
                        rem %= out_strides[a];
                    }
                    let mut src = 0;
                    for a in 0..rank {
                        src += idx[a] * in_strides[perm[a]];
                    }
                    dx[src] = dx[src] + g;
                }
            }
        }
        Op::Softmax { x, axis } => {
            if nodes[*x].needs_grad {
                let shape = &nodes[*x].shape;
                let len = shape[*axis];
                let inner_dim: usize = shape[*axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let y = &nodes[out].data;
                let dx = grad_buf(grads, nodes, *x).unwrap();
                for o in 0..outer {
                    for i in 0..inner_dim {
                        let base = o * len * inner_dim + i;
                        let mut dot = T::zero();
                        for l in 0..len {
                            let idx = base + l * inner_dim;
                            dot = dot + gout[idx] * y[idx];
                        }
                        for l in 0..len {
                            let idx = base + l * inner_dim;
                            dx[idx] = dx[idx] + y[idx] * (gout[idx] - dot);
                        }
                    }
                }
            }
        }
        Op::CrossEntropy { logits, labels } => {
            if nodes[*logits].needs_grad {
                let classes = nodes[*logits].shape[1];
                let rows = labels.len();
                let x = &nodes[*logits].data;
                let scale = gout[0] / T::from_usize(rows);
                let dl = grad_buf(grads, nodes, *logits).unwrap();
                for (r, &label) in labels.iter().enumerate() {
                    let row = &x[r * classes..(r + 1) * classes];
                    let mut mx = T::neg_infinity();
                    for &v in row {
                        if v > mx {
                            mx = v;
                        }
                    }
                    let mut sum = T::zero();
                    let mut exps = vec![T::zero(); classes];
                    for (j, &v) in row.iter().enumerate() {
                        let e = (v - mx).exp();
                        exps[j] = e;
                        sum = sum + e;
                    }
                    for j in 0..classes {
                        let p = exps[j] / sum;
                        let ind = if j == label { T::one() } else { T::zero() };
                        dl[r * classes + j] = dl[r * classes + j] + (p - ind) * scale;
                    }
                }
            }
        }
        Op::Add { a, b } => {
            if let Some(da) = grad_buf(grads, nodes, *a) {
                for (d0, &g) in da.iter_mut().zip(gout) {
                    *d0 = *d0 + g;
                }
            }
            if let Some(db) = grad_buf(grads, nodes, *b) {
                for (d0, &g) in db.iter_mut().zip(gout) {
                    *d0 = *d0 + g;
                }
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (&nodes[*a].data, &nodes[*b].data);
            if let Some(da) = grad_buf(grads, nodes, *a) {
                for i in 0..gout.len() {
                    da[i] = da[i] + gout[i] * bv[i];
                }
            }
            if let Some(db) = grad_buf(grads, nodes, *b) {
                for i in 0..gout.len() {
                    db[i] = db[i] + gout[i] * av[i];
                }
            }
        }
        Op::AddRow { x, bias } => {
            if let Some(dx) = grad_buf(grads, nodes, *x) {
                for (d0, &g) in dx.iter_mut().zip(gout) {
                    *d0 = *d0 + g;
                }
            }
            if let Some(db) = grad_buf(grads, nodes, *bias) {
                let d = db.len();
                for (i, &g) in gout.iter().enumerate() {
                    db[i % d] = db[i % d] + g;
                }
            }
        }
        Op::AddChanBias { x, bias } => {
            if let Some(dx) = grad_buf(grads, nodes, *x) {
                for (d0, &g) in dx.iter_mut().zip(gout) {
                    *d0 = *d0 + g;
                }
            }
            if let Some(db) = grad_buf(grads, nodes, *bias) {
                let c = db.len();
                let hw = nodes[*x].shape[2] * nodes[*x].shape[3];
                for (i, &g) in gout.iter().enumerate() {
                    let ch = (i / hw) % c;
                    db[ch] = db[ch] + g;
                }
            }
        }
        Op::Scale { x, c } => {
            if let Some(dx) = grad_buf(grads, nodes, *x) {
                for (d0, &g) in dx.iter_mut().zip(gout) {
                    *d0 = *d0 + g * *c;
                }
            }
        }
        Op::MulScalarVar { x, s } => {
            let sv = nodes[*s].data[0];
            let xv = &nodes[*x].data;
            if let Some(dx) = grad_buf(grads, nodes, *x) {
                for (d0, &g) in dx.iter_mut().zip(gout) {
                    *d0 = *d0 + g * sv;
                }
            }
            if let Some(ds) = grad_buf(grads, nodes, *s) {
                let mut dot = T::zero();
                for (g, &v) in gout.iter().zip(xv) {
                    dot = dot + *g * v;
                }
                ds[0] = ds[0] + dot;
            }
        }
        Op::NormalizeSum { x } => {
            if nodes[*x].needs_grad {
                let xv = &nodes[*x].data;
                let y = &nodes[out].data;
                let s: T = xv.iter().copied().sum();
                let mut dot = T::zero();
                for (g, &yi) in gout.iter().zip(y) {
                    dot = dot + *g * yi;
                }
                let dx = grad_buf(grads, nodes, *x).unwrap();
                for i in 0..dx.len() {
                    dx[i] = dx[i] + (gout[i] - dot) / s;
                }
            }
        }
        Op::Relu { x } => {
            if let Some(dx) = grad_buf(grads, nodes, *x) {
                let xv = &nodes[*x].data;
                for i in 0..dx.len() {
                    if xv[i] > T::zero() {
                        dx[i] = dx[i] + gout[i];
                    }
                }
            }
        }
        Op::Gelu { x } => {
            if let Some(dx) = grad_buf(grads, nodes, *x) {
                let xv = &nodes[*x].data;
                for i in 0..dx.len() {
                    dx[i] = dx[i] + gout[i] * gelu_grad(xv[i]);
                }
            }
        }
        Op::Softplus { x } => {
            if let Some(dx) = grad_buf(grads, nodes, *x) {
                let xv = &nodes[*x].data;
                for i in 0..dx.len() {
                    dx[i] = dx[i] + gout[i] * sigmoid(xv[i]);
                }
            }
        }
        Op::Sum { x } => {
            if let Some(dx) = grad_buf(grads, nodes, *x) {
                for d0 in dx.iter_mut() {
                    *d0 = *d0 + gout[0];
                }
            }
        }
        Op::Mean { x } => {
            if let Some(dx) = grad_buf(grads, nodes, *x) {
                let n = T::from_usize(dx.len());
                for d0 in dx.iter_mut() {
                    *d0 = *d0 + gout[0] / n;
                }
            }
        }
        Op::Concat { xs, axis } => {
            let out_shape = &nodes[out].shape;
            let mut offset = 0;
            for &xid in xs {
                let s = nodes[xid].shape.clone();
                if nodes[xid].needs_grad {
                    let mut offsets = vec![0usize; s.len()];
                    offsets[*axis] = offset;
                    let mut tmp = vec![T::zero(); nodes[xid].data.len()];
                    copy_window(gout, out_shape, &offsets, &s, &mut tmp);
                    let dx = grad_buf(grads, nodes, xid).unwrap();
                    for (d0, d1) in dx.iter_mut().zip(&tmp) {
                        *d0 = *d0 + *d1;
                    }
                }
                offset += s[*axis];
            }
        }
        Op::Reshape { x } => {
            if let Some(dx) = grad_buf(grads, nodes, *x) {
                for (d0, &g) in dx.iter_mut().zip(gout) {
                    *d0 = *d0 + g;
                }
            }
        }
        Op::NormFeature {
            x,
            gamma,
            beta,
            count,
            eps,
        } => {
            backward_norm_rows(
                nodes,
                grads,
                *x,
                *gamma,
                *beta,
                Some(*count),
                *eps,
                gout,
                NormLayout::LastAxis,
            );
        }
        Op::NormSpatial {
            x,
            gamma,
            beta,
            eps,
        } => {
            backward_norm_rows(
                nodes,
                grads,
                *x,
                *gamma,
                *beta,
                None,
                *eps,
                gout,
                NormLayout::Spatial,
            );
        }
        Op::Embed { table, ids } => {
            if let Some(dt) = grad_buf(grads, nodes, *table) {
                let e = nodes[*table].shape[1];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..e {
                        dt[id * e + j] = dt[id * e + j] + gout[row * e + j];
                    }
                }
            }
        }
        Op::CausalMask { x } => {
            if let Some(dx) = grad_buf(grads, nodes, *x) {
                let t = nodes[*x].shape[1];
                let b = nodes[*x].shape[0];
                for bi in 0..b {
                    for i in 0..t {
                        for j in 0..=i {
                            let idx = (bi * t + i) * t + j;
                            dx[idx] = dx[idx] + gout[idx];
                        }
                    }
                }
            }
        }
        Op::GlobalAvgPool { x } => {
            if let Some(dx) = grad_buf(grads, nodes, *x) {
                let hw = nodes[*x].shape[2] * nodes[*x].shape[3];
                let inv = T::one() / T::from_usize(hw);
                for (i, &g) in gout.iter().enumerate() {
                    for j in 0..hw {
                        dx[i * hw + j] = dx[i * hw + j] + g * inv;
                    }
                }
            }
        }
        Op::GammaReparam { c, noise } => {
            if let Some(dc) = grad_buf(grads, nodes, *c) {
                let cv = &nodes[*c].data;
                for i in 0..dc.len() {
                    let (_, dz) = gamma_value_grad(
                        cv[i].as_f64(),
                        noise[i].x.as_f64(),
                        noise[i].boost.map(|b| b.as_f64()),
                    );
                    dc[i] = dc[i] + gout[i] * T::from_f64(dz);
                }
            }
        }
        Op::GumbelSt { alpha, noise, tau } => {
            if let Some(da) = grad_buf(grads, nodes, *alpha) {
                let av = &nodes[*alpha].data;
                let n = av.len();
                // softmax((alpha + g) / tau)
                let mut soft = vec![T::zero(); n];
                let mut mx = T::neg_infinity();
                for i in 0..n {
                    soft[i] = (av[i] + noise[i]) / *tau;
                    if soft[i] > mx {
                        mx = soft[i];
                    }
                }
                let mut sum = T::zero();
                for s in soft.iter_mut() {
                    *s = (*s - mx).exp();
                    sum = sum + *s;
                }
                for s in soft.iter_mut() {
                    *s = *s / sum;
                }
                let mut dot = T::zero();
                for i in 0..n {
                    dot = dot + gout[i] * soft[i];
                }
                for i in 0..n {
                    da[i] = da[i] + soft[i] * (gout[i] - dot) / *tau;
                }
            }
        }
    }
}

enum NormLayout {
    /// Rows are the leading axes, features are the last axis; gamma indexed by feature.
    LastAxis,
    /// Rows are (n, c) pairs over H*W elements; gamma indexed by channel.
    Spatial,
}

#[allow(clippy::too_many_arguments)]
fn backward_norm_rows<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut Vec<Option<Vec<T>>>,
    x: usize,
    gamma: usize,
    beta: usize,
    count: Option<usize>,
    eps: T,
    gout: &[T],
    layout: NormLayout,
) {
    let shape = &nodes[x].shape;
    let (rows, d, chans) = match layout {
        NormLayout::LastAxis => {
            let d = *shape.last().unwrap();
            (nodes[x].data.len() / d, d, d)
        }
        NormLayout::Spatial => {
            let hw = shape[2] * shape[3];
            (shape[0] * shape[1], hw, shape[1])
        }
    };
    let n = match count {
        Some(cid) => nodes[cid].data[0],
        None => T::from_usize(d),
    };
    let xv = &nodes[x].data;
    let g = &nodes[gamma].data;
    let need_dx = nodes[x].needs_grad;
    let need_dg = nodes[gamma].needs_grad;
    let need_db = nodes[beta].needs_grad;
    let need_dn = count.map(|cid| nodes[cid].needs_grad).unwrap_or(false);

    let mut dgamma = vec![T::zero(); g.len()];
    let mut dbeta = vec![T::zero(); g.len()];
    let mut dn_total = T::zero();
    let mut dx_all = need_dx.then(|| vec![T::zero(); xv.len()]);

    for r in 0..rows {
        let row = &xv[r * d..(r + 1) * d];
        let grow = &gout[r * d..(r + 1) * d];
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for &v in row {
            s1 = s1 + v;
            s2 = s2 + v * v;
        }
        let mu = s1 / n;
        let var = s2 / n - mu * mu;
        let rstd = T::one() / (var + eps).sqrt();
        let ch_of = |j: usize| match layout {
            NormLayout::LastAxis => j,
            NormLayout::Spatial => r % chans,
        };
        // h = gout * gamma, A = sum h, B = sum h*(x - mu)
        let mut a_sum = T::zero();
        let mut b_sum = T::zero();
        for j in 0..d {
            let h = grow[j] * g[ch_of(j)];
            a_sum = a_sum + h;
            b_sum = b_sum + h * (row[j] - mu);
        }
        if need_dg || need_db {
            for j in 0..d {
                let z = (row[j] - mu) * rstd;
                dgamma[ch_of(j)] = dgamma[ch_of(j)] + grow[j] * z;
                dbeta[ch_of(j)] = dbeta[ch_of(j)] + grow[j];
            }
        }
        if let Some(dx) = dx_all.as_mut() {
            let r3 = rstd * rstd * rstd;
            for j in 0..d {
                let h = grow[j] * g[ch_of(j)];
                let term = rstd * h - rstd * a_sum / n - r3 * (row[j] - mu) * b_sum / n;
                dx[r * d + j] = dx[r * d + j] + term;
            }
        }
        if need_dn {
            // mu and var depend on the count: dmu/dn = -s1/n^2,
            // dvar/dn = -s2/n^2 + 2*mu*s1/n^2, drstd/dn = -0.5*rstd^3*dvar/dn.
            let n2 = n * n;
            let dmu = -(s1 / n2);
            let dvar = (T::from_f64(2.0) * mu * s1 - s2) / n2;
            let drstd = -(T::from_f64(0.5)) * rstd * rstd * rstd * dvar;
            dn_total = dn_total + (-dmu) * rstd * a_sum + drstd * b_sum;
        }
    }
    if let (Some(dx_new), Some(dx)) = (dx_all, grad_buf(grads, nodes, x)) {
        for (d0, d1) in dx.iter_mut().zip(&dx_new) {
            *d0 = *d0 + *d1;
        }
    }
    if need_dg {
        if let Some(dg) = grad_buf(grads, nodes, gamma) {
            for (d0, d1) in dg.iter_mut().zip(&dgamma) {
                *d0 = *d0 + *d1;
            }
        }
    }
    if need_db {
        if let Some(db) = grad_buf(grads, nodes, beta) {
            for (d0, d1) in db.iter_mut().zip(&dbeta) {
                *d0 = *d0 + *d1;
            }
        }
    }
    if need_dn {
        if let Some(dnb) = grad_buf(grads, nodes, count.unwrap()) {
            dnb[0] = dnb[0] + dn_total;
        }
    }
}

