//! Cell-based toy space: triangular cells whose three edges each choose
//! among separable and dilated convolutions with kernel size 3 or 5.
//! Kernel sizes are entangled within each convolution type; across types
//! the edge output is the type-total-weighted sum of the two branch
//! outputs, with the within-type kernel mixture renormalized. The macro
//! stack is reduction, normal, reduction; both reduction cells share one
//! genotype. Head is global-average-pool + linear.

use std::collections::BTreeMap;

use tnas_autodiff::{
    conv2d, norm_spatial, Conv2dSpec, ParamId, ParamStore, Scalar, SliceMask, Tape, Tensor, Var,
};

use crate::arch::{Architecture, SearchDim, SearchSpaceSpec};
use crate::error::{Result, TnasError};
use crate::spaces::{init_max_shape, Batch, Bound, SubnetModel, Supernet, SupernetMode};
use crate::superposition::{superpose, ChoiceDim, EntangleMeta};

pub const CELL_OPS: [&str; 4] = [
    "sep_conv_3x3",
    "sep_conv_5x5",
    "dil_conv_3x3",
    "dil_conv_5x5",
];
const KERNELS: [usize; 2] = [3, 5];
const NORM_EPS: f64 = 1e-5;
/// DAG edges of one cell as (from, to) over nodes {0, 1, 2}.
const EDGES: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];
/// Stack order: reduction, normal, reduction.
const CELL_GENOTYPES: [&str; 3] = ["reduce", "normal", "reduce"];

fn kernel_meta_depthwise(width: usize) -> EntangleMeta {
    EntangleMeta::new(
        vec![width, 1, 5, 5],
        vec![width, 1, 1, 1],
        vec![ChoiceDim::centered("k", &KERNELS, &[2, 3])],
        false,
    )
    .expect("static metadata")
}

fn kernel_meta_full(width: usize) -> EntangleMeta {
    EntangleMeta::new(
        vec![width, width, 5, 5],
        vec![width, width, 1, 1],
        vec![ChoiceDim::centered("k", &KERNELS, &[2, 3])],
        false,
    )
    .expect("static metadata")
}

fn kernel_arch(idx: usize) -> Architecture {
    let mut a = Architecture::empty();
    a.set("k", idx);
    a
}

/// Weight-entangled edge: one depthwise storage shared by both separable
/// kernels, one full storage shared by both dilated kernels.
struct EdgeWe {
    sep_dw: ParamId,
    sep_pw: ParamId,
    sep_gamma: ParamId,
    sep_beta: ParamId,
    dil_w: ParamId,
    dil_gamma: ParamId,
    dil_beta: ParamId,
    dw_meta: EntangleMeta,
    dil_meta: EntangleMeta,
}

/// Weight-sharing edge: independent weights for all four operations.
struct EdgeWs {
    /// (dw, pw, gamma, beta) for sep_conv_3x3 and sep_conv_5x5.
    sep: [(ParamId, ParamId, ParamId, ParamId); 2],
    /// (w, gamma, beta) for dil_conv_3x3 and dil_conv_5x5.
    dil: [(ParamId, ParamId, ParamId); 2],
}

enum EdgeParams {
    We(EdgeWe),
    Ws(EdgeWs),
}

pub struct CellSupernet<T: Scalar> {
    space: SearchSpaceSpec,
    mode: SupernetMode,
    weights: ParamStore<T>,
    arch_params: ParamStore<T>,
    stem_w: ParamId,
    stem_gamma: ParamId,
    stem_beta: ParamId,
    /// edges[cell][edge]
    edges: Vec<Vec<EdgeParams>>,
    head_w: ParamId,
    head_b: ParamId,
    base_channels: usize,
    in_channels: usize,
    classes: usize,
}

fn cell_space() -> SearchSpaceSpec {
    let mut dims = Vec::new();
    for geno in ["normal", "reduce"] {
        for (a, b) in EDGES {
            dims.push(SearchDim::new(
                format!("{geno}/e{a}{b}"),
                CELL_OPS.iter().map(|s| s.to_string()).collect(),
            ));
        }
    }
    SearchSpaceSpec::new("toy-cell", dims)
}

fn cell_width(base: usize, cell: usize) -> usize {
    base << cell
}

impl<T: Scalar> CellSupernet<T> {
    pub fn new(
        in_channels: usize,
        base_channels: usize,
        classes: usize,
        mode: SupernetMode,
        seed: u64,
    ) -> Result<Self> {
        if base_channels < 4 {
            return Err(TnasError::Config("base_channels must be >= 4".into()));
        }
        let space = cell_space();
        let mut weights = ParamStore::new();
        let stem_name = "stem/weight".to_string();
        let stem_std = (2.0 / (in_channels * 9) as f64).sqrt();
        let stem_w = weights.insert(
            stem_name.clone(),
            init_max_shape::<T>(seed, &stem_name, vec![base_channels, in_channels, 3, 3], stem_std)
                .with_grad(),
        );
        let stem_gamma = weights.insert("stem/gamma", Tensor::full(vec![base_channels], T::one()).with_grad());
        let stem_beta = weights.insert("stem/beta", Tensor::zeros(vec![base_channels]).with_grad());

        let mut edges = Vec::new();
        for cell in 0..3 {
            let w = cell_width(base_channels, cell);
            let mut cell_edges = Vec::new();
            for (a, b) in EDGES {
                let prefix = format!("cell{cell}/e{a}{b}");
                let dw_std = (2.0 / 25.0f64).sqrt();
                let pw_std = (2.0 / w as f64).sqrt();
                let full_std = (2.0 / (w * 25) as f64).sqrt();
                let edge = match mode {
                    SupernetMode::WE => EdgeParams::We(EdgeWe {
                        sep_dw: weights.insert(
                            format!("{prefix}/sep/dw/storage"),
                            init_max_shape::<T>(seed, &format!("{prefix}/sep/dw/storage"), vec![w, 1, 5, 5], dw_std)
                                .with_grad(),
                        ),
                        sep_pw: weights.insert(
                            format!("{prefix}/sep/pw/weight"),
                            init_max_shape::<T>(seed, &format!("{prefix}/sep/pw/weight"), vec![w, w, 1, 1], pw_std)
                                .with_grad(),
                        ),
                        sep_gamma: weights.insert(
                            format!("{prefix}/sep/gamma"),
                            Tensor::full(vec![w], T::one()).with_grad(),
                        ),
                        sep_beta: weights.insert(
                            format!("{prefix}/sep/beta"),
                            Tensor::zeros(vec![w]).with_grad(),
                        ),
                        dil_w: weights.insert(
                            format!("{prefix}/dil/storage"),
                            init_max_shape::<T>(seed, &format!("{prefix}/dil/storage"), vec![w, w, 5, 5], full_std)
                                .with_grad(),
                        ),
                        dil_gamma: weights.insert(
                            format!("{prefix}/dil/gamma"),
                            Tensor::full(vec![w], T::one()).with_grad(),
                        ),
                        dil_beta: weights.insert(
                            format!("{prefix}/dil/beta"),
                            Tensor::zeros(vec![w]).with_grad(),
                        ),
                        dw_meta: kernel_meta_depthwise(w),
                        dil_meta: kernel_meta_full(w),
                    }),
                    SupernetMode::WS => {
                        let mut sep = Vec::new();
                        let mut dil = Vec::new();
                        for &k in &KERNELS {
                            let dwn = format!("{prefix}/ws/sep{k}/dw");
                            sep.push((
                                weights.insert(
                                    dwn.clone(),
                                    init_max_shape::<T>(seed, &dwn, vec![w, 1, k, k], dw_std).with_grad(),
                                ),
                                weights.insert(
                                    format!("{prefix}/ws/sep{k}/pw"),
                                    init_max_shape::<T>(seed, &format!("{prefix}/ws/sep{k}/pw"), vec![w, w, 1, 1], pw_std)
                                        .with_grad(),
                                ),
                                weights.insert(
                                    format!("{prefix}/ws/sep{k}/gamma"),
                                    Tensor::full(vec![w], T::one()).with_grad(),
                                ),
                                weights.insert(
                                    format!("{prefix}/ws/sep{k}/beta"),
                                    Tensor::zeros(vec![w]).with_grad(),
                                ),
                            ));
                            let dn = format!("{prefix}/ws/dil{k}/weight");
                            dil.push((
                                weights.insert(
                                    dn.clone(),
                                    init_max_shape::<T>(seed, &dn, vec![w, w, k, k], full_std).with_grad(),
                                ),
                                weights.insert(
                                    format!("{prefix}/ws/dil{k}/gamma"),
                                    Tensor::full(vec![w], T::one()).with_grad(),
                                ),
                                weights.insert(
                                    format!("{prefix}/ws/dil{k}/beta"),
                                    Tensor::zeros(vec![w]).with_grad(),
                                ),
                            ));
                        }
                        EdgeParams::Ws(EdgeWs {
                            sep: [sep[0], sep[1]],
                            dil: [dil[0], dil[1]],
                        })
                    }
                };
                cell_edges.push(edge);
            }
            edges.push(cell_edges);
        }

        let out_width = 2 * cell_width(base_channels, 2);
        let head_w = weights.insert(
            "head/weight",
            init_max_shape::<T>(seed, "head/weight", vec![classes, out_width], (1.0 / out_width as f64).sqrt())
                .with_grad(),
        );
        let head_b = weights.insert("head/bias", Tensor::zeros(vec![classes]).with_grad());
        let arch_params = super::make_arch_params(&space);
        Ok(CellSupernet {
            space,
            mode,
            weights,
            arch_params,
            stem_w,
            stem_gamma,
            stem_beta,
            edges,
            head_w,
            head_b,
            base_channels,
            in_channels,
            classes,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn dim_name(cell: usize, edge: usize) -> String {
        let (a, b) = EDGES[edge];
        format!("{}/e{a}{b}", CELL_GENOTYPES[cell])
    }

    fn sep_forward(
        &self,
        weights: &Bound<T>,
        e: &EdgeWe,
        x: &Var<T>,
        kernel_mix: &Var<T>,
        stride: usize,
    ) -> Result<Var<T>> {
        let width = weights.var(e.sep_pw).shape()[0];
        let dw = superpose(weights.var(e.sep_dw), &e.dw_meta, kernel_mix)?;
        let y = conv2d(
            &x.relu(),
            &dw,
            Conv2dSpec {
                stride,
                dilation: 1,
                padding: 2,
                groups: width,
            },
        )?;
        let y = conv2d(&y, weights.var(e.sep_pw), Conv2dSpec::default())?;
        Ok(norm_spatial(
            &y,
            weights.var(e.sep_gamma),
            weights.var(e.sep_beta),
            T::from_f64(NORM_EPS),
        )?)
    }

    fn dil_forward(
        &self,
        weights: &Bound<T>,
        e: &EdgeWe,
        x: &Var<T>,
        kernel_mix: &Var<T>,
        stride: usize,
    ) -> Result<Var<T>> {
        let w = superpose(weights.var(e.dil_w), &e.dil_meta, kernel_mix)?;
        let y = conv2d(
            &x.relu(),
            &w,
            Conv2dSpec {
                stride,
                dilation: 2,
                padding: 4,
                groups: 1,
            },
        )?;
        Ok(norm_spatial(
            &y,
            weights.var(e.dil_gamma),
            weights.var(e.dil_beta),
            T::from_f64(NORM_EPS),
        )?)
    }

    /// Hybrid edge mixture: within-type kernel superposition with the
    /// renormalized sub-simplex, branch outputs weighted by type totals.
    /// A type whose total weight is exactly zero is skipped.
    fn edge_mixture(
        &self,
        weights: &Bound<T>,
        e: &EdgeWe,
        x: &Var<T>,
        mix4: &Var<T>,
        stride: usize,
    ) -> Result<Var<T>> {
        let v = mix4.value();
        let sep_total = v[0].as_f64() + v[1].as_f64();
        let dil_total = v[2].as_f64() + v[3].as_f64();
        let mut acc: Option<Var<T>> = None;
        if sep_total > 0.0 {
            let sub = mix4.slice_view(&[0], &[2])?;
            let y = self.sep_forward(weights, e, x, &sub.normalize_sum(), stride)?;
            acc = Some(y.mul_scalar_var(&sub.sum())?);
        }
        if dil_total > 0.0 {
            let sub = mix4.slice_view(&[2], &[2])?;
            let y = self.dil_forward(weights, e, x, &sub.normalize_sum(), stride)?;
            let term = y.mul_scalar_var(&sub.sum())?;
            acc = Some(match acc {
                None => term,
                Some(a) => a.add(&term)?,
            });
        }
        acc.ok_or_else(|| TnasError::Normalization {
            sum: sep_total + dil_total,
            min: 0.0,
        })
    }

    fn edge_path(
        &self,
        weights: &Bound<T>,
        cell: usize,
        edge: usize,
        x: &Var<T>,
        op: usize,
        stride: usize,
    ) -> Result<Var<T>> {
        let kernel_idx = op % 2;
        let k = KERNELS[kernel_idx];
        match &self.edges[cell][edge] {
            EdgeParams::We(e) => {
                if op < 2 {
                    let width = weights.var(e.sep_pw).shape()[0];
                    let (offsets, lens) = e.dw_meta.window(&kernel_arch(kernel_idx))?;
                    let dw = weights.var(e.sep_dw).slice_view(&offsets, &lens)?;
                    let y = conv2d(
                        &x.relu(),
                        &dw,
                        Conv2dSpec {
                            stride,
                            dilation: 1,
                            padding: (k - 1) / 2,
                            groups: width,
                        },
                    )?;
                    let y = conv2d(&y, weights.var(e.sep_pw), Conv2dSpec::default())?;
                    Ok(norm_spatial(
                        &y,
                        weights.var(e.sep_gamma),
                        weights.var(e.sep_beta),
                        T::from_f64(NORM_EPS),
                    )?)
                } else {
                    let (offsets, lens) = e.dil_meta.window(&kernel_arch(kernel_idx))?;
                    let w = weights.var(e.dil_w).slice_view(&offsets, &lens)?;
                    let y = conv2d(
                        &x.relu(),
                        &w,
                        Conv2dSpec {
                            stride,
                            dilation: 2,
                            padding: k - 1,
                            groups: 1,
                        },
                    )?;
                    Ok(norm_spatial(
                        &y,
                        weights.var(e.dil_gamma),
                        weights.var(e.dil_beta),
                        T::from_f64(NORM_EPS),
                    )?)
                }
            }
            EdgeParams::Ws(e) => {
                if op < 2 {
                    let (dw, pw, gamma, beta) = e.sep[kernel_idx];
                    let width = weights.var(pw).shape()[0];
                    let y = conv2d(
                        &x.relu(),
                        weights.var(dw),
                        Conv2dSpec {
                            stride,
                            dilation: 1,
                            padding: (k - 1) / 2,
                            groups: width,
                        },
                    )?;
                    let y = conv2d(&y, weights.var(pw), Conv2dSpec::default())?;
                    Ok(norm_spatial(
                        &y,
                        weights.var(gamma),
                        weights.var(beta),
                        T::from_f64(NORM_EPS),
                    )?)
                } else {
                    let (w, gamma, beta) = e.dil[kernel_idx];
                    let y = conv2d(
                        &x.relu(),
                        weights.var(w),
                        Conv2dSpec {
                            stride,
                            dilation: 2,
                            padding: k - 1,
                            groups: 1,
                        },
                    )?;
                    Ok(norm_spatial(
                        &y,
                        weights.var(gamma),
                        weights.var(beta),
                        T::from_f64(NORM_EPS),
                    )?)
                }
            }
        }
    }

    /// WS-mode output mixture over all four operations.
    fn edge_mixture_ws(
        &self,
        weights: &Bound<T>,
        cell: usize,
        edge: usize,
        x: &Var<T>,
        mix4: &Var<T>,
        stride: usize,
    ) -> Result<Var<T>> {
        let mut acc: Option<Var<T>> = None;
        for op in 0..4 {
            let y = self.edge_path(weights, cell, edge, x, op, stride)?;
            let term = y.mul_scalar_var(&mix4.slice_view(&[op], &[1])?)?;
            acc = Some(match acc {
                None => term,
                Some(a) => a.add(&term)?,
            });
        }
        Ok(acc.unwrap())
    }

    fn trunk<F>(&self, tape: &Tape<T>, weights: &Bound<T>, batch: &Batch<T>, mut edge_fn: F) -> Result<Var<T>>
    where
        F: FnMut(&Bound<T>, usize, usize, &Var<T>, usize) -> Result<Var<T>>,
    {
        let x = match batch {
            Batch::Images { x, .. } => x,
            _ => return Err(TnasError::Config("image batch expected".into())),
        };
        let mut h = conv2d(
            &tape.constant(x),
            weights.var(self.stem_w),
            Conv2dSpec {
                stride: 1,
                dilation: 1,
                padding: 1,
                groups: 1,
            },
        )?;
        h = norm_spatial(
            &h,
            weights.var(self.stem_gamma),
            weights.var(self.stem_beta),
            T::from_f64(NORM_EPS),
        )?;
        for cell in 0..3 {
            let reduce = CELL_GENOTYPES[cell] == "reduce";
            let n0 = h.clone();
            let s0 = if reduce { 2 } else { 1 };
            let n1 = edge_fn(weights, cell, 0, &n0, s0)?;
            let e02 = edge_fn(weights, cell, 1, &n0, s0)?;
            let e12 = edge_fn(weights, cell, 2, &n1, 1)?;
            let n2 = e02.add(&e12)?;
            h = tnas_autodiff::concat(&[n1, n2], 1)?;
        }
        let pooled = h.global_avg_pool()?;
        Ok(pooled
            .matmul_bt(weights.var(self.head_w))?
            .add_row(weights.var(self.head_b))?)
    }
}

impl<T: Scalar> Supernet<T> for CellSupernet<T> {
    type Subnet = CellSubnet<T>;

    fn space(&self) -> &SearchSpaceSpec {
        &self.space
    }

    fn mode(&self) -> SupernetMode {
        self.mode
    }

    fn weights(&self) -> &ParamStore<T> {
        &self.weights
    }

    fn weights_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.weights
    }

    fn arch_params(&self) -> &ParamStore<T> {
        &self.arch_params
    }

    fn arch_params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.arch_params
    }

    fn forward_mixture(
        &self,
        tape: &Tape<T>,
        weights: &Bound<T>,
        mixes: &BTreeMap<String, Var<T>>,
        batch: &Batch<T>,
    ) -> Result<Var<T>> {
        self.trunk(tape, weights, batch, |w, cell, edge, x, stride| {
            let mix4 = mixes
                .get(&Self::dim_name(cell, edge))
                .ok_or_else(|| TnasError::Config("missing edge mixture".into()))?;
            crate::superposition::check_simplex(mix4, 4)?;
            match &self.edges[cell][edge] {
                EdgeParams::We(e) => self.edge_mixture(w, e, x, mix4, stride),
                EdgeParams::Ws(_) => self.edge_mixture_ws(w, cell, edge, x, mix4, stride),
            }
        })
    }

    fn forward_path(
        &self,
        tape: &Tape<T>,
        weights: &Bound<T>,
        arch: &Architecture,
        batch: &Batch<T>,
    ) -> Result<Var<T>> {
        self.space.validate(arch)?;
        self.trunk(tape, weights, batch, |w, cell, edge, x, stride| {
            let op = arch.index(&Self::dim_name(cell, edge));
            self.edge_path(w, cell, edge, x, op, stride)
        })
    }

    fn active_slices(&self, arch: &Architecture) -> Result<SliceMask> {
        self.space.validate(arch)?;
        let mut mask = SliceMask::new();
        let full = |mask: &mut SliceMask, id: ParamId, store: &ParamStore<T>| {
            let shape = store.get(id).shape().to_vec();
            mask.allow(id, vec![0; shape.len()], shape);
        };
        full(&mut mask, self.stem_w, &self.weights);
        full(&mut mask, self.stem_gamma, &self.weights);
        full(&mut mask, self.stem_beta, &self.weights);
        full(&mut mask, self.head_w, &self.weights);
        full(&mut mask, self.head_b, &self.weights);
        for cell in 0..3 {
            for edge in 0..3 {
                let op = arch.index(&Self::dim_name(cell, edge));
                let kernel_idx = op % 2;
                match &self.edges[cell][edge] {
                    EdgeParams::We(e) => {
                        if op < 2 {
                            let (offsets, lens) = e.dw_meta.window(&kernel_arch(kernel_idx))?;
                            mask.allow(e.sep_dw, offsets, lens);
                            full(&mut mask, e.sep_pw, &self.weights);
                            full(&mut mask, e.sep_gamma, &self.weights);
                            full(&mut mask, e.sep_beta, &self.weights);
                        } else {
                            let (offsets, lens) = e.dil_meta.window(&kernel_arch(kernel_idx))?;
                            mask.allow(e.dil_w, offsets, lens);
                            full(&mut mask, e.dil_gamma, &self.weights);
                            full(&mut mask, e.dil_beta, &self.weights);
                        }
                    }
                    EdgeParams::Ws(e) => {
                        if op < 2 {
                            let (dw, pw, gamma, beta) = e.sep[kernel_idx];
                            for id in [dw, pw, gamma, beta] {
                                full(&mut mask, id, &self.weights);
                            }
                        } else {
                            let (w, gamma, beta) = e.dil[kernel_idx];
                            for id in [w, gamma, beta] {
                                full(&mut mask, id, &self.weights);
                            }
                        }
                    }
                }
            }
        }
        Ok(mask)
    }

    fn inherit(&self, arch: &Architecture) -> Result<CellSubnet<T>> {
        self.space.validate(arch)?;
        let mut params = ParamStore::new();
        params.insert("stem/weight", self.weights.get(self.stem_w).clone());
        params.insert("stem/gamma", self.weights.get(self.stem_gamma).clone());
        params.insert("stem/beta", self.weights.get(self.stem_beta).clone());
        for cell in 0..3 {
            for edge in 0..3 {
                let op = arch.index(&Self::dim_name(cell, edge));
                let kernel_idx = op % 2;
                let prefix = format!("cell{cell}/e{edge}");
                match &self.edges[cell][edge] {
                    EdgeParams::We(e) => {
                        if op < 2 {
                            let (o, l) = e.dw_meta.window(&kernel_arch(kernel_idx))?;
                            params.insert(
                                format!("{prefix}/dw"),
                                self.weights.get(e.sep_dw).slice_copy(&o, &l)?,
                            );
                            params.insert(format!("{prefix}/pw"), self.weights.get(e.sep_pw).clone());
                            params.insert(format!("{prefix}/gamma"), self.weights.get(e.sep_gamma).clone());
                            params.insert(format!("{prefix}/beta"), self.weights.get(e.sep_beta).clone());
                        } else {
                            let (o, l) = e.dil_meta.window(&kernel_arch(kernel_idx))?;
                            params.insert(
                                format!("{prefix}/w"),
                                self.weights.get(e.dil_w).slice_copy(&o, &l)?,
                            );
                            params.insert(format!("{prefix}/gamma"), self.weights.get(e.dil_gamma).clone());
                            params.insert(format!("{prefix}/beta"), self.weights.get(e.dil_beta).clone());
                        }
                    }
                    EdgeParams::Ws(e) => {
                        if op < 2 {
                            let (dw, pw, gamma, beta) = e.sep[kernel_idx];
                            params.insert(format!("{prefix}/dw"), self.weights.get(dw).clone());
                            params.insert(format!("{prefix}/pw"), self.weights.get(pw).clone());
                            params.insert(format!("{prefix}/gamma"), self.weights.get(gamma).clone());
                            params.insert(format!("{prefix}/beta"), self.weights.get(beta).clone());
                        } else {
                            let (w, gamma, beta) = e.dil[kernel_idx];
                            params.insert(format!("{prefix}/w"), self.weights.get(w).clone());
                            params.insert(format!("{prefix}/gamma"), self.weights.get(gamma).clone());
                            params.insert(format!("{prefix}/beta"), self.weights.get(beta).clone());
                        }
                    }
                }
            }
        }
        params.insert("head/weight", self.weights.get(self.head_w).clone());
        params.insert("head/bias", self.weights.get(self.head_b).clone());
        for id in params.ids().collect::<Vec<_>>() {
            params.get_mut(id).set_requires_grad(true);
        }
        Ok(CellSubnet {
            arch: arch.clone(),
            params,
            in_channels: self.in_channels,
            base_channels: self.base_channels,
            classes: self.classes,
        })
    }
}

/// Fixed-genotype cell model.
pub struct CellSubnet<T: Scalar> {
    arch: Architecture,
    params: ParamStore<T>,
    in_channels: usize,
    base_channels: usize,
    classes: usize,
}

impl<T: Scalar> CellSubnet<T> {
    pub fn fresh(
        arch: &Architecture,
        in_channels: usize,
        base_channels: usize,
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        CellSupernet::<T>::new(in_channels, base_channels, classes, SupernetMode::WE, seed)?
            .inherit(arch)
    }

    /// Genotype in the conventional pretty-printed form.
    pub fn genotype(&self) -> String {
        genotype_text(&self.arch)
    }
}

/// `Genotype(normal=[(op, from), ...], normal_concat=range(1, 3), ...)`.
pub fn genotype_text(arch: &Architecture) -> String {
    let fmt_geno = |geno: &str| {
        EDGES
            .iter()
            .map(|(a, b)| {
                let op = CELL_OPS[arch.index(&format!("{geno}/e{a}{b}"))];
                format!("('{op}', {a})")
            })
            .collect::<Vec<_>>()
            .join(", ")
    };
    format!(
        "Genotype(normal=[{}], normal_concat=range(1, 3), reduce=[{}], reduce_concat=range(1, 3))",
        fmt_geno("normal"),
        fmt_geno("reduce")
    )
}

impl<T: Scalar> SubnetModel<T> for CellSubnet<T> {
    fn arch(&self) -> &Architecture {
        &self.arch
    }

    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn forward(&self, tape: &Tape<T>, weights: &Bound<T>, batch: &Batch<T>) -> Result<Var<T>> {
        let x = match batch {
            Batch::Images { x, .. } => x,
            _ => return Err(TnasError::Config("image batch expected".into())),
        };
        let get = |name: &str| self.params.lookup(name).unwrap();
        let mut h = conv2d(
            &tape.constant(x),
            weights.var(get("stem/weight")),
            Conv2dSpec {
                stride: 1,
                dilation: 1,
                padding: 1,
                groups: 1,
            },
        )?;
        h = norm_spatial(
            &h,
            weights.var(get("stem/gamma")),
            weights.var(get("stem/beta")),
            T::from_f64(NORM_EPS),
        )?;
        for cell in 0..3 {
            let reduce = CELL_GENOTYPES[cell] == "reduce";
            let s0 = if reduce { 2 } else { 1 };
            let n0 = h.clone();
            let mut node_out: Vec<Var<T>> = Vec::new();
            for edge in 0..3 {
                let (src, stride) = match edge {
                    0 | 1 => (n0.clone(), s0),
                    _ => (node_out[0].clone(), 1),
                };
                let src = &src;
                let dim = format!(
                    "{}/e{}{}",
                    CELL_GENOTYPES[cell], EDGES[edge].0, EDGES[edge].1
                );
                let op = self.arch.index(&dim);
                let k = KERNELS[op % 2];
                let prefix = format!("cell{cell}/e{edge}");
                let y = if op < 2 {
                    let dw = weights.var(get(&format!("{prefix}/dw")));
                    let width = dw.shape()[0];
                    let y = conv2d(
                        &src.relu(),
                        &dw,
                        Conv2dSpec {
                            stride,
                            dilation: 1,
                            padding: (k - 1) / 2,
                            groups: width,
                        },
                    )?;
                    let y = conv2d(&y, weights.var(get(&format!("{prefix}/pw"))), Conv2dSpec::default())?;
                    norm_spatial(
                        &y,
                        weights.var(get(&format!("{prefix}/gamma"))),
                        weights.var(get(&format!("{prefix}/beta"))),
                        T::from_f64(NORM_EPS),
                    )?
                } else {
                    let y = conv2d(
                        &src.relu(),
                        weights.var(get(&format!("{prefix}/w"))),
                        Conv2dSpec {
                            stride,
                            dilation: 2,
                            padding: k - 1,
                            groups: 1,
                        },
                    )?;
                    norm_spatial(
                        &y,
                        weights.var(get(&format!("{prefix}/gamma"))),
                        weights.var(get(&format!("{prefix}/beta"))),
                        T::from_f64(NORM_EPS),
                    )?
                };
                node_out.push(y);
            }
            let n2 = node_out[1].add(&node_out[2])?;
            h = tnas_autodiff::concat(&[node_out[0].clone(), n2], 1)?;
        }
        let pooled = h.global_avg_pool()?;
        Ok(pooled
            .matmul_bt(weights.var(get("head/weight")))?
            .add_row(weights.var(get("head/bias")))?)
    }

    fn reinitialize(&mut self, seed: u64) {
        let fresh = CellSubnet::<T>::fresh(
            &self.arch,
            self.in_channels,
            self.base_channels,
            self.classes,
            seed,
        )
        .expect("arch already validated");
        self.params = fresh.params;
    }
}
