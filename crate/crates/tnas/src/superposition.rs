//! Entangled parameter storage and weight superposition.
//!
//! A stored tensor is sized for the largest choice on every axis. Smaller
//! choices are structured slices of it: count-like dimensions (channels,
//! embedding width, heads, ratio, depth) take leading windows, kernel sizes
//! take centered windows. Superposition forms one effective weight as the
//! simplex-weighted sum of zero-padded choice slices, so a single forward
//! pass reflects every choice at once; the combi variant crosses two or
//! more interacting dimensions with multiplied per-dimension weights.

use tnas_autodiff::{conv2d, Alignment, Conv2dSpec, Scalar, Tensor, Var};

use crate::arch::Architecture;
use crate::error::{Result, TnasError};

pub const SIMPLEX_TOL: f64 = 1e-6;

/// One searchable dimension of a stored tensor.
#[derive(Debug, Clone)]
pub struct ChoiceDim {
    pub name: String,
    /// Strictly increasing positive extents (kernel sizes, channel counts...).
    pub choices: Vec<usize>,
    /// Axes of the stored tensor this dimension slices, with the placement
    /// rule per axis. An axis extent is `base * product of bound choices`.
    pub axes: Vec<(usize, Alignment)>,
    /// Whether the dimension participates in superposition. Follower
    /// dimensions (for instance the input-channel axis tracking the previous
    /// layer's width) slice only on discrete paths.
    pub mixed: bool,
}

impl ChoiceDim {
    pub fn leading(name: impl Into<String>, choices: &[usize], axes: &[usize]) -> Self {
        ChoiceDim {
            name: name.into(),
            choices: choices.to_vec(),
            axes: axes.iter().map(|&a| (a, Alignment::Leading)).collect(),
            mixed: true,
        }
    }

    pub fn centered(name: impl Into<String>, choices: &[usize], axes: &[usize]) -> Self {
        ChoiceDim {
            name: name.into(),
            choices: choices.to_vec(),
            axes: axes.iter().map(|&a| (a, Alignment::Centered)).collect(),
            mixed: true,
        }
    }

    pub fn follower(mut self) -> Self {
        self.mixed = false;
        self
    }

    pub fn max_choice(&self) -> usize {
        *self.choices.last().unwrap()
    }
}

/// Slicing metadata of one entangled tensor.
#[derive(Debug, Clone)]
pub struct EntangleMeta {
    storage_shape: Vec<usize>,
    /// Fixed multiplier per axis (e.g. the per-head width, or an input
    /// channel count that is not searched).
    base: Vec<usize>,
    dims: Vec<ChoiceDim>,
    has_bias: bool,
}

impl EntangleMeta {
    pub fn new(
        storage_shape: Vec<usize>,
        base: Vec<usize>,
        dims: Vec<ChoiceDim>,
        has_bias: bool,
    ) -> Result<Self> {
        if base.len() != storage_shape.len() {
            return Err(TnasError::Config(format!(
                "base rank {} vs storage rank {}",
                base.len(),
                storage_shape.len()
            )));
        }
        for dim in &dims {
            if dim.choices.len() < 2 {
                return Err(TnasError::Config(format!(
                    "dimension {:?} needs at least 2 choices",
                    dim.name
                )));
            }
            if dim.choices.windows(2).any(|w| w[0] >= w[1]) || dim.choices[0] == 0 {
                return Err(TnasError::Config(format!(
                    "choices of {:?} must be strictly increasing and positive",
                    dim.name
                )));
            }
            for &(axis, align) in &dim.axes {
                if axis >= storage_shape.len() {
                    return Err(TnasError::Config(format!(
                        "dimension {:?} targets axis {axis} of rank-{} storage",
                        dim.name,
                        storage_shape.len()
                    )));
                }
                if align == Alignment::Centered
                    && dims
                        .iter()
                        .flat_map(|d| d.axes.iter())
                        .filter(|(a, _)| *a == axis)
                        .count()
                        > 1
                {
                    return Err(TnasError::Config(format!(
                        "centered axis {axis} must be owned by a single dimension"
                    )));
                }
            }
        }
        let meta = EntangleMeta {
            storage_shape,
            base,
            dims,
            has_bias,
        };
        // The maximal assignment must reproduce the storage extents exactly.
        for axis in 0..meta.storage_shape.len() {
            let max_extent = meta.axis_extent(axis, |d| d.choices.len() - 1);
            if max_extent != meta.storage_shape[axis] {
                return Err(TnasError::Config(format!(
                    "axis {axis}: maximal choice extent {max_extent} != storage extent {}",
                    meta.storage_shape[axis]
                )));
            }
        }
        Ok(meta)
    }

    pub fn storage_shape(&self) -> &[usize] {
        &self.storage_shape
    }

    pub fn dims(&self) -> &[ChoiceDim] {
        &self.dims
    }

    pub fn mixed_dims(&self) -> impl Iterator<Item = &ChoiceDim> {
        self.dims.iter().filter(|d| d.mixed)
    }

    pub fn has_bias(&self) -> bool {
        self.has_bias
    }

    fn axis_extent(&self, axis: usize, choose: impl Fn(&ChoiceDim) -> usize) -> usize {
        let mut extent = self.base[axis];
        for dim in &self.dims {
            for &(a, _) in &dim.axes {
                if a == axis {
                    extent *= dim.choices[choose(dim)];
                }
            }
        }
        extent
    }

    fn axis_alignment(&self, axis: usize) -> Alignment {
        for dim in &self.dims {
            for &(a, align) in &dim.axes {
                if a == axis && align == Alignment::Centered {
                    return Alignment::Centered;
                }
            }
        }
        Alignment::Leading
    }

    pub fn alignments(&self) -> Vec<Alignment> {
        (0..self.storage_shape.len())
            .map(|axis| self.axis_alignment(axis))
            .collect()
    }

    fn choice_index(&self, dim: &ChoiceDim, pick: &dyn Fn(&ChoiceDim) -> Option<usize>) -> Result<usize> {
        match pick(dim) {
            Some(i) if i < dim.choices.len() => Ok(i),
            Some(i) => Err(TnasError::Choice {
                dim: dim.name.clone(),
                index: i,
                choices: dim.choices.len(),
            }),
            None => Err(TnasError::InvalidArchitecture(format!(
                "no assignment for dimension {:?}",
                dim.name
            ))),
        }
    }

    /// Slice window (offsets, lens) for an index picker over all dims.
    fn window_by(&self, pick: &dyn Fn(&ChoiceDim) -> Option<usize>) -> Result<(Vec<usize>, Vec<usize>)> {
        let rank = self.storage_shape.len();
        let mut lens = Vec::with_capacity(rank);
        let mut offsets = Vec::with_capacity(rank);
        let mut indices = Vec::with_capacity(self.dims.len());
        for dim in &self.dims {
            indices.push(self.choice_index(dim, pick)?);
        }
        for axis in 0..rank {
            let mut extent = self.base[axis];
            for (dim, &idx) in self.dims.iter().zip(&indices) {
                for &(a, _) in &dim.axes {
                    if a == axis {
                        extent *= dim.choices[idx];
                    }
                }
            }
            let align = self.axis_alignment(axis);
            offsets.push(align.offset(extent, self.storage_shape[axis], axis)?);
            lens.push(extent);
        }
        Ok((offsets, lens))
    }

    /// Window for a full assignment (all dims, follower included).
    pub fn window(&self, arch: &Architecture) -> Result<(Vec<usize>, Vec<usize>)> {
        self.window_by(&|d: &ChoiceDim| arch.get(&d.name))
    }

    /// Window for mixed-dim indices only; follower dims sit at their max.
    pub fn window_mixed(&self, mixed_idx: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
        let names: Vec<&str> = self.mixed_dims().map(|d| d.name.as_str()).collect();
        self.window_by(&|d: &ChoiceDim| {
            if d.mixed {
                names.iter().position(|n| *n == d.name).map(|p| mixed_idx[p])
            } else {
                Some(d.choices.len() - 1)
            }
        })
    }

    /// Bias window on axis 0 for a full assignment.
    pub fn bias_window(&self, arch: &Architecture) -> Result<(usize, usize)> {
        let (offsets, lens) = self.window(arch)?;
        Ok((offsets[0], lens[0]))
    }
}

/// Maximal storage plus slicing metadata; the stand-alone form used by
/// tests and by weight inheritance.
#[derive(Debug, Clone)]
pub struct EntangledParameter<T: Scalar> {
    pub storage: Tensor<T>,
    pub bias_storage: Option<Tensor<T>>,
    pub meta: EntangleMeta,
}

impl<T: Scalar> EntangledParameter<T> {
    pub fn new(storage: Tensor<T>, bias_storage: Option<Tensor<T>>, meta: EntangleMeta) -> Result<Self> {
        if storage.shape() != meta.storage_shape() {
            return Err(TnasError::Config(format!(
                "storage shape {:?} does not match metadata {:?}",
                storage.shape(),
                meta.storage_shape()
            )));
        }
        if let Some(b) = &bias_storage {
            if b.shape() != [meta.storage_shape()[0]] {
                return Err(TnasError::Config(format!(
                    "bias shape {:?} must be [{}]",
                    b.shape(),
                    meta.storage_shape()[0]
                )));
            }
        }
        Ok(EntangledParameter {
            storage,
            bias_storage,
            meta,
        })
    }

    /// Copy of the sub-tensor for one discrete assignment.
    pub fn slice_choice(&self, arch: &Architecture) -> Result<Tensor<T>> {
        let (offsets, lens) = self.meta.window(arch)?;
        Ok(self.storage.slice_copy(&offsets, &lens)?)
    }

    pub fn slice_bias(&self, arch: &Architecture) -> Result<Option<Tensor<T>>> {
        match &self.bias_storage {
            None => Ok(None),
            Some(b) => {
                let (offset, len) = self.meta.bias_window(arch)?;
                Ok(Some(b.slice_copy(&[offset], &[len])?))
            }
        }
    }
}

/// Validate that a mixture vector is a simplex of the expected length.
pub fn check_simplex<T: Scalar>(mix: &Var<T>, len: usize) -> Result<()> {
    let v = mix.value();
    if v.len() != len {
        return Err(TnasError::Config(format!(
            "mixture length {} does not match {} choices",
            v.len(),
            len
        )));
    }
    let sum: f64 = v.iter().map(|x| x.as_f64()).sum();
    let min = v.iter().map(|x| x.as_f64()).fold(f64::INFINITY, f64::min);
    if (sum - 1.0).abs() > SIMPLEX_TOL || min < -SIMPLEX_TOL {
        return Err(TnasError::Normalization { sum, min });
    }
    Ok(())
}

/// Single-dimension weight superposition: sum over choices of
/// `mix[i] * zero_pad(slice_i(storage))`. The result has the storage shape
/// and is differentiable with respect to both the mixture and the storage.
pub fn superpose<T: Scalar>(storage: &Var<T>, meta: &EntangleMeta, mix: &Var<T>) -> Result<Var<T>> {
    let mixed: Vec<&ChoiceDim> = meta.mixed_dims().collect();
    if mixed.len() != 1 {
        return Err(TnasError::Config(format!(
            "superpose expects one mixed dimension, found {}",
            mixed.len()
        )));
    }
    combi_superpose(storage, None, meta, std::slice::from_ref(mix)).map(|(w, _)| w)
}

/// Combi-superposition over the cross product of all mixed dimensions.
/// Per-combination weights are the products of the per-dimension simplex
/// entries, so they again sum to one. The optional bias is padded and mixed
/// with the same weights along axis 0.
pub fn combi_superpose<T: Scalar>(
    storage: &Var<T>,
    bias: Option<&Var<T>>,
    meta: &EntangleMeta,
    mixes: &[Var<T>],
) -> Result<(Var<T>, Option<Var<T>>)> {
    let mixed: Vec<&ChoiceDim> = meta.mixed_dims().collect();
    if mixed.is_empty() || mixes.len() != mixed.len() {
        return Err(TnasError::Config(format!(
            "need one mixture per mixed dimension ({} != {})",
            mixes.len(),
            mixed.len()
        )));
    }
    for (dim, mix) in mixed.iter().zip(mixes) {
        check_simplex(mix, dim.choices.len())?;
    }
    let target = meta.storage_shape().to_vec();
    let aligns = meta.alignments();
    let counts: Vec<usize> = mixed.iter().map(|d| d.choices.len()).collect();
    let total: usize = counts.iter().product();

    let mut w_acc: Option<Var<T>> = None;
    let mut b_acc: Option<Var<T>> = None;
    let mut idx = vec![0usize; counts.len()];
    for _ in 0..total {
        // Product of the per-dimension weights for this combination.
        let mut weight = mixes[0].slice_view(&[idx[0]], &[1])?;
        for d in 1..counts.len() {
            weight = weight.mul(&mixes[d].slice_view(&[idx[d]], &[1])?)?;
        }
        let (offsets, lens) = meta.window_mixed(&idx)?;
        let padded = storage
            .slice_view(&offsets, &lens)?
            .zero_pad(&target, &aligns)?
            .mul_scalar_var(&weight)?;
        w_acc = Some(match w_acc {
            None => padded,
            Some(acc) => acc.add(&padded)?,
        });
        if let Some(bias) = bias {
            let padded_bias = bias
                .slice_view(&[offsets[0]], &[lens[0]])?
                .zero_pad(&[target[0]], &[aligns[0]])?
                .mul_scalar_var(&weight)?;
            b_acc = Some(match b_acc {
                None => padded_bias,
                Some(acc) => acc.add(&padded_bias)?,
            });
        }
        for d in (0..counts.len()).rev() {
            idx[d] += 1;
            if idx[d] < counts[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok((w_acc.unwrap(), b_acc))
}

/// Fully-connected layer on superposed weights: `y = x W_mix^T + b_mix`.
/// `x` spans the maximal input width; smaller widths arrive zero-padded.
pub fn mixture_linear<T: Scalar>(
    x: &Var<T>,
    storage: &Var<T>,
    bias: Option<&Var<T>>,
    meta: &EntangleMeta,
    mixes: &[Var<T>],
) -> Result<Var<T>> {
    let (w_mix, b_mix) = combi_superpose(storage, bias, meta, mixes)?;
    let y = x.matmul_bt(&w_mix)?;
    match b_mix {
        Some(b) => Ok(y.add_row(&b)?),
        None => Ok(y),
    }
}

/// Convolution on a superposed kernel. Padding is fixed against the largest
/// kernel (`dilation * (k_max - 1) / 2`), with smaller kernels centered, so
/// every kernel-size choice produces the same output extent.
pub fn mixture_conv2d<T: Scalar>(
    x: &Var<T>,
    storage: &Var<T>,
    bias: Option<&Var<T>>,
    meta: &EntangleMeta,
    mixes: &[Var<T>],
    stride: usize,
    dilation: usize,
    groups: usize,
) -> Result<Var<T>> {
    let k_max = meta.storage_shape()[2];
    let spec = Conv2dSpec {
        stride,
        dilation,
        padding: dilation * (k_max - 1) / 2,
        groups,
    };
    let (w_mix, b_mix) = combi_superpose(storage, bias, meta, mixes)?;
    let y = conv2d(x, &w_mix, spec)?;
    match b_mix {
        Some(b) => Ok(y.add_chan_bias(&b)?),
        None => Ok(y),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tnas_autodiff::Tape;

    fn arch(pairs: &[(&str, usize)]) -> Architecture {
        let mut a = Architecture::empty();
        for (k, v) in pairs {
            a.set(k, *v);
        }
        a
    }

    #[test]
    fn kernel_slice_is_centered_window() {
        // 5x5 kernel storage, kernel-size choice 3 -> centered 3x3 window.
        let meta = EntangleMeta::new(
            vec![5, 5],
            vec![1, 1],
            vec![ChoiceDim::centered("k", &[3, 5], &[0, 1])],
            false,
        )
        .unwrap();
        let vals: Vec<f64> = (0..25).map(f64::from).collect();
        let ep =
            EntangledParameter::new(Tensor::from_vec(vec![5, 5], vals).unwrap(), None, meta).unwrap();
        let small = ep.slice_choice(&arch(&[("k", 0)])).unwrap();
        assert_eq!(small.shape(), &[3, 3]);
        assert_eq!(small.values(), &[6.0, 7.0, 8.0, 11.0, 12.0, 13.0, 16.0, 17.0, 18.0]);

        // Max assignment on every dim is the storage itself.
        let full = ep.slice_choice(&arch(&[("k", 1)])).unwrap();
        assert_eq!(full.values(), ep.storage.values());

        // Out-of-range index is a choice error.
        assert!(matches!(
            ep.slice_choice(&arch(&[("k", 2)])),
            Err(TnasError::Choice { .. })
        ));
    }

    #[test]
    fn alg5_row_rule_embed_times_ratio() {
        // Linear storage (4,2), embed in {1,2}, ratio in {1,2}:
        // assignment (e=1, r=2) slices W[: e*r, : e] = rows 0..1, col 0.
        let meta = EntangleMeta::new(
            vec![4, 2],
            vec![1, 1],
            vec![
                ChoiceDim::leading("embed", &[1, 2], &[0, 1]),
                ChoiceDim::leading("ratio", &[1, 2], &[0]),
            ],
            false,
        )
        .unwrap();
        let vals: Vec<f64> = (0..8).map(f64::from).collect();
        let ep =
            EntangledParameter::new(Tensor::from_vec(vec![4, 2], vals).unwrap(), None, meta).unwrap();
        let sliced = ep.slice_choice(&arch(&[("embed", 0), ("ratio", 1)])).unwrap();
        assert_eq!(sliced.shape(), &[2, 1]);
        assert_eq!(sliced.values(), &[0.0, 2.0]);
    }

    #[test]
    fn one_hot_superpose_reproduces_padded_slice() {
        let meta = EntangleMeta::new(
            vec![5, 5],
            vec![1, 1],
            vec![ChoiceDim::centered("k", &[3, 5], &[0, 1])],
            false,
        )
        .unwrap();
        let tape = Tape::<f64>::new();
        let vals: Vec<f64> = (0..25).map(|i| (i as f64) * 0.37 - 3.0).collect();
        let storage = tape.constant(&Tensor::from_vec(vec![5, 5], vals).unwrap());
        let one_hot = tape.constant(&Tensor::from_vec(vec![2], vec![1.0, 0.0]).unwrap());
        let mixed = superpose(&storage, &meta, &one_hot).unwrap();
        let direct = storage
            .slice_view(&[1, 1], &[3, 3])
            .unwrap()
            .zero_pad(&[5, 5], &[Alignment::Centered, Alignment::Centered])
            .unwrap();
        assert_eq!(mixed.value(), direct.value());
    }

    #[test]
    fn superpose_hand_arithmetic_and_fig2_structure() {
        // 3x3 storage, kernel choices {1,3}, mix (0.25, 0.75): the center
        // receives both terms, the ring only the larger one.
        let meta = EntangleMeta::new(
            vec![3, 3],
            vec![1, 1],
            vec![ChoiceDim::centered("k", &[1, 3], &[0, 1])],
            false,
        )
        .unwrap();
        let tape = Tape::<f64>::new();
        let vals: Vec<f64> = (1..=9).map(f64::from).collect();
        let storage = tape.constant(&Tensor::from_vec(vec![3, 3], vals.clone()).unwrap());
        let mix = tape.constant(&Tensor::from_vec(vec![2], vec![0.25, 0.75]).unwrap());
        let out = superpose(&storage, &meta, &mix).unwrap().value();
        // center = 0.25*5 + 0.75*5 = 5, corners = 0.75 * corner
        assert!((out[4] - 5.0).abs() < 1e-12);
        for idx in [0, 2, 6, 8, 1, 3, 5, 7] {
            assert!((out[idx] - 0.75 * vals[idx]).abs() < 1e-12);
        }
    }

    #[test]
    fn simplex_violation_rejected() {
        let meta = EntangleMeta::new(
            vec![3, 3],
            vec![1, 1],
            vec![ChoiceDim::centered("k", &[1, 3], &[0, 1])],
            false,
        )
        .unwrap();
        let tape = Tape::<f64>::new();
        let storage = tape.constant(&Tensor::zeros(vec![3, 3]));
        let bad = tape.constant(&Tensor::from_vec(vec![2], vec![0.6, 0.6]).unwrap());
        assert!(matches!(
            superpose(&storage, &meta, &bad),
            Err(TnasError::Normalization { .. })
        ));
    }

    #[test]
    fn combi_cross_product_weights_sum_to_one() {
        // Explicit 4-term oracle on a (4,2) storage with embed/ratio in {1,2}.
        let meta = EntangleMeta::new(
            vec![4, 2],
            vec![1, 1],
            vec![
                ChoiceDim::leading("embed", &[1, 2], &[0, 1]),
                ChoiceDim::leading("ratio", &[1, 2], &[0]),
            ],
            true,
        )
        .unwrap();
        let tape = Tape::<f64>::new();
        let w_vals: Vec<f64> = (1..=8).map(f64::from).collect();
        let b_vals: Vec<f64> = vec![0.5, -1.0, 2.0, 4.0];
        let storage = tape.constant(&Tensor::from_vec(vec![4, 2], w_vals.clone()).unwrap());
        let bias = tape.constant(&Tensor::from_vec(vec![4], b_vals.clone()).unwrap());
        let me = [0.5, 0.5];
        let mr = [0.25, 0.75];
        let mix_e = tape.constant(&Tensor::from_vec(vec![2], me.to_vec()).unwrap());
        let mix_r = tape.constant(&Tensor::from_vec(vec![2], mr.to_vec()).unwrap());
        let (w_mix, b_mix) =
            combi_superpose(&storage, Some(&bias), &meta, &[mix_e, mix_r]).unwrap();

        // Brute-force loop over all combinations.
        let e_choices = [1usize, 2];
        let r_choices = [1usize, 2];
        let mut expect_w = vec![0.0f64; 8];
        let mut expect_b = vec![0.0f64; 4];
        let mut weight_total = 0.0;
        for (i, &e) in e_choices.iter().enumerate() {
            for (j, &r) in r_choices.iter().enumerate() {
                let w = me[i] * mr[j];
                weight_total += w;
                for row in 0..e * r {
                    for col in 0..e {
                        expect_w[row * 2 + col] += w * w_vals[row * 2 + col];
                    }
                    expect_b[row] += w * b_vals[row];
                }
            }
        }
        assert!((weight_total - 1.0).abs() < 1e-12);
        for (got, want) in w_mix.value().iter().zip(&expect_w) {
            assert!((got - want).abs() < 1e-12);
        }
        for (got, want) in b_mix.unwrap().value().iter().zip(&expect_b) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn four_dimension_combi_accepted() {
        // Four interacting dimensions on one storage tensor.
        let meta = EntangleMeta::new(
            vec![24, 2],
            vec![1, 1],
            vec![
                ChoiceDim::leading("a", &[1, 2], &[0]),
                ChoiceDim::leading("b", &[1, 2], &[0]),
                ChoiceDim::leading("c", &[1, 3], &[0]),
                ChoiceDim::leading("d", &[1, 2], &[0, 1]),
            ],
            false,
        )
        .unwrap();
        let tape = Tape::<f64>::new();
        let storage = tape.constant(&Tensor::full(vec![24, 2], 1.0));
        let mixes: Vec<_> = [2usize, 2, 2, 2]
            .iter()
            .map(|&n| {
                tape.constant(
                    &Tensor::from_vec(vec![n], vec![1.0 / n as f64; n]).unwrap(),
                )
            })
            .collect();
        let (w, _) = combi_superpose(&storage, None, &meta, &mixes).unwrap();
        assert_eq!(w.shape(), vec![24, 2]);
        // All-ones storage: entry (r, c) accumulates the cross-product mass
        // of the combinations whose window contains it; row 0 col 0 is in
        // every window, so it gets the full unit mass.
        assert!((w.value()[0] - 1.0).abs() < 1e-12);
    }
}
