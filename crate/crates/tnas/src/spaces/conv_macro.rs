//! Four-layer convolutional macro space: per layer a kernel size in
//! {3, 5, 7} and an output width from a layer-specific channel menu.
//! Kernel and width are entangled on each layer's single weight tensor via
//! combi grouping; the input-channel axis follows the previous layer's
//! width on discrete paths. Layers are conv -> relu with stride-2
//! downsampling between layers; the head is global-average-pool + linear
//! sized for the maximal width.

use std::collections::BTreeMap;

use tnas_autodiff::{
    conv2d, Conv2dSpec, ParamId, ParamStore, Scalar, SliceMask, Tape, Tensor, Var,
};

use crate::arch::{Architecture, SearchDim, SearchSpaceSpec};
use crate::error::{Result, TnasError};
use crate::spaces::{
    init_max_shape, Batch, Bound, Site, SubnetModel, Supernet, SupernetMode,
};
use crate::superposition::{mixture_conv2d, ChoiceDim, EntangleMeta};

pub const MACRO_KERNELS: [usize; 3] = [3, 5, 7];
pub const MACRO_CHANNELS: [[usize; 3]; 4] = [
    [8, 16, 32],
    [16, 32, 64],
    [32, 64, 128],
    [64, 128, 256],
];
const STRIDES: [usize; 4] = [1, 2, 2, 2];
const K_MAX: usize = 7;

fn conv_std(cin_max: usize) -> f64 {
    (2.0 / (cin_max * K_MAX * K_MAX) as f64).sqrt()
}

fn head_std(width: usize) -> f64 {
    (1.0 / width as f64).sqrt()
}

pub struct ConvMacroSupernet<T: Scalar> {
    space: SearchSpaceSpec,
    mode: SupernetMode,
    weights: ParamStore<T>,
    arch_params: ParamStore<T>,
    sites: Vec<Site>,
    /// WS mode: per layer, one (weight, bias) per (kernel, width) combo in
    /// kernel-major order.
    ws_combos: Vec<Vec<(ParamId, ParamId)>>,
    head_w: ParamId,
    head_b: ParamId,
    in_channels: usize,
    classes: usize,
}

fn macro_space() -> SearchSpaceSpec {
    let mut dims = Vec::new();
    for i in 0..4 {
        dims.push(SearchDim::numeric(format!("k{}", i + 1), &MACRO_KERNELS));
        dims.push(SearchDim::numeric(format!("c{}", i + 1), &MACRO_CHANNELS[i]));
    }
    SearchSpaceSpec::new("toy-conv-macro", dims)
}

fn layer_meta(layer: usize, in_channels: usize) -> Result<EntangleMeta> {
    let cout = MACRO_CHANNELS[layer].to_vec();
    let cmax = cout[cout.len() - 1];
    let mut dims = vec![
        ChoiceDim::leading(format!("c{}", layer + 1), &cout, &[0]),
        ChoiceDim::centered(format!("k{}", layer + 1), &MACRO_KERNELS, &[2, 3]),
    ];
    let (cin_max, base_cin) = if layer == 0 {
        (in_channels, in_channels)
    } else {
        let prev = MACRO_CHANNELS[layer - 1];
        dims.push(ChoiceDim::leading(format!("c{layer}"), &prev, &[1]).follower());
        (prev[prev.len() - 1], 1)
    };
    EntangleMeta::new(
        vec![cmax, cin_max, K_MAX, K_MAX],
        vec![1, base_cin, 1, 1],
        dims,
        true,
    )
}

fn head_meta(classes: usize) -> Result<EntangleMeta> {
    let last = MACRO_CHANNELS[3];
    EntangleMeta::new(
        vec![classes, last[last.len() - 1]],
        vec![classes, 1],
        vec![ChoiceDim::leading("c4", &last, &[1]).follower()],
        true,
    )
}

impl<T: Scalar> ConvMacroSupernet<T> {
    pub fn new(in_channels: usize, classes: usize, mode: SupernetMode, seed: u64) -> Result<Self> {
        let space = macro_space();
        let mut weights = ParamStore::new();
        let mut sites = Vec::new();
        let mut ws_combos = Vec::new();

        for layer in 0..4 {
            let meta = layer_meta(layer, in_channels)?;
            let cin_max = meta.storage_shape()[1];
            let cmax = meta.storage_shape()[0];
            match mode {
                SupernetMode::WE => {
                    let name = format!("layer{}/weight", layer + 1);
                    let std = conv_std(cin_max);
                    let w = weights.insert(
                        name.clone(),
                        init_max_shape::<T>(seed, &name, vec![cmax, cin_max, K_MAX, K_MAX], std)
                            .with_grad(),
                    );
                    let b = weights.insert(
                        format!("layer{}/bias", layer + 1),
                        Tensor::zeros(vec![cmax]).with_grad(),
                    );
                    sites.push(Site {
                        weight: w,
                        bias: Some(b),
                        meta,
                    });
                    ws_combos.push(Vec::new());
                }
                SupernetMode::WS => {
                    let mut combos = Vec::new();
                    for &k in &MACRO_KERNELS {
                        for &c in &MACRO_CHANNELS[layer] {
                            let name = format!("layer{}/ws/k{k}c{c}/weight", layer + 1);
                            let std = conv_std(cin_max);
                            let w = weights.insert(
                                name.clone(),
                                init_max_shape::<T>(seed, &name, vec![c, cin_max, k, k], std)
                                    .with_grad(),
                            );
                            let b = weights.insert(
                                format!("layer{}/ws/k{k}c{c}/bias", layer + 1),
                                Tensor::zeros(vec![c]).with_grad(),
                            );
                            combos.push((w, b));
                        }
                    }
                    ws_combos.push(combos);
                    sites.push(Site {
                        // Sliced path access still needs the meta; WS keeps
                        // its per-combo weights alongside.
                        weight: ParamId(usize::MAX),
                        bias: None,
                        meta,
                    });
                }
            }
        }
        let head = head_meta(classes)?;
        let width = head.storage_shape()[1];
        let head_w = weights.insert(
            "head/weight",
            init_max_shape::<T>(seed, "head/weight", vec![classes, width], head_std(width))
                .with_grad(),
        );
        let head_b = weights.insert("head/bias", Tensor::zeros(vec![classes]).with_grad());
        sites.push(Site {
            weight: head_w,
            bias: Some(head_b),
            meta: head,
        });

        let arch_params = super::make_arch_params(&space);
        Ok(ConvMacroSupernet {
            space,
            mode,
            weights,
            arch_params,
            sites,
            ws_combos,
            head_w,
            head_b,
            in_channels,
            classes,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    fn batch_images<'a>(&self, batch: &'a Batch<T>) -> Result<&'a Tensor<T>> {
        match batch {
            Batch::Images { x, .. } => Ok(x),
            Batch::Tokens { .. } => Err(TnasError::Config(
                "conv-macro space expects image batches".into(),
            )),
        }
    }

    /// Structural weight-sharing parameter count for this space.
    pub fn ws_param_count(in_channels: usize, classes: usize) -> usize {
        let mut total = 0usize;
        let mut cin_max = in_channels;
        for layer in 0..4 {
            for &k in &MACRO_KERNELS {
                for &c in &MACRO_CHANNELS[layer] {
                    total += c * cin_max * k * k + c;
                }
            }
            cin_max = MACRO_CHANNELS[layer][2];
        }
        total + classes * cin_max + classes
    }
}

impl<T: Scalar> Supernet<T> for ConvMacroSupernet<T> {
    type Subnet = ConvMacroSubnet<T>;

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
        let _ = tape;
        let x = self.batch_images(batch)?;
        let mut h = weights_input(tape, x);
        for layer in 0..4 {
            let site = &self.sites[layer];
            h = match self.mode {
                SupernetMode::WE => {
                    let site_mixes = site.mixes(mixes)?;
                    mixture_conv2d(
                        &h,
                        weights.var(site.weight),
                        site.bias.map(|b| weights.var(b)),
                        &site.meta,
                        &site_mixes,
                        STRIDES[layer],
                        1,
                        1,
                    )?
                }
                SupernetMode::WS => {
                    let wk = &mixes[&format!("k{}", layer + 1)];
                    let wc = &mixes[&format!("c{}", layer + 1)];
                    let cmax = MACRO_CHANNELS[layer][2];
                    let mut acc: Option<Var<T>> = None;
                    for (j, &k) in MACRO_KERNELS.iter().enumerate() {
                        for (l, &_c) in MACRO_CHANNELS[layer].iter().enumerate() {
                            let (w, b) = self.ws_combos[layer][j * 3 + l];
                            let spec = Conv2dSpec {
                                stride: STRIDES[layer],
                                dilation: 1,
                                padding: (k - 1) / 2,
                                groups: 1,
                            };
                            let y = conv2d(&h, weights.var(w), spec)?
                                .add_chan_bias(weights.var(b))?;
                            let shape = y.shape();
                            let padded = y.zero_pad(
                                &[shape[0], cmax, shape[2], shape[3]],
                                &[tnas_autodiff::Alignment::Leading; 4],
                            )?;
                            let weight = wk
                                .slice_view(&[j], &[1])?
                                .mul(&wc.slice_view(&[l], &[1])?)?;
                            let term = padded.mul_scalar_var(&weight)?;
                            acc = Some(match acc {
                                None => term,
                                Some(a) => a.add(&term)?,
                            });
                        }
                    }
                    acc.unwrap()
                }
            };
            h = h.relu();
        }
        let pooled = h.global_avg_pool()?;
        let logits = pooled
            .matmul_bt(weights.var(self.head_w))?
            .add_row(weights.var(self.head_b))?;
        Ok(logits)
    }

    fn forward_path(
        &self,
        tape: &Tape<T>,
        weights: &Bound<T>,
        arch: &Architecture,
        batch: &Batch<T>,
    ) -> Result<Var<T>> {
        self.space.validate(arch)?;
        let x = self.batch_images(batch)?;
        let mut h = weights_input(tape, x);
        for layer in 0..4 {
            let site = &self.sites[layer];
            let k = MACRO_KERNELS[arch.index(&format!("k{}", layer + 1))];
            let spec = Conv2dSpec {
                stride: STRIDES[layer],
                dilation: 1,
                padding: (k - 1) / 2,
                groups: 1,
            };
            h = match self.mode {
                SupernetMode::WE => {
                    let (offsets, lens) = site.meta.window(arch)?;
                    let w = weights.var(site.weight).slice_view(&offsets, &lens)?;
                    let (bo, bl) = site.meta.bias_window(arch)?;
                    let b = weights.var(site.bias.unwrap()).slice_view(&[bo], &[bl])?;
                    conv2d(&h, &w, spec)?.add_chan_bias(&b)?
                }
                SupernetMode::WS => {
                    let j = arch.index(&format!("k{}", layer + 1));
                    let l = arch.index(&format!("c{}", layer + 1));
                    let (w, b) = self.ws_combos[layer][j * 3 + l];
                    let wv = weights.var(w);
                    let cin = if layer == 0 {
                        self.in_channels
                    } else {
                        MACRO_CHANNELS[layer - 1][arch.index(&format!("c{layer}"))]
                    };
                    let shape = wv.shape();
                    let w_sliced =
                        wv.slice_view(&[0, 0, 0, 0], &[shape[0], cin, shape[2], shape[3]])?;
                    conv2d(&h, &w_sliced, spec)?.add_chan_bias(weights.var(b))?
                }
            };
            h = h.relu();
        }
        let pooled = h.global_avg_pool()?;
        let head_site = &self.sites[4];
        let (offsets, lens) = head_site.meta.window(arch)?;
        let hw = weights.var(self.head_w).slice_view(&offsets, &lens)?;
        Ok(pooled.matmul_bt(&hw)?.add_row(weights.var(self.head_b))?)
    }

    fn active_slices(&self, arch: &Architecture) -> Result<SliceMask> {
        self.space.validate(arch)?;
        let mut mask = SliceMask::new();
        match self.mode {
            SupernetMode::WE => {
                for site in &self.sites {
                    site.allow_slices(&mut mask, arch)?;
                }
            }
            SupernetMode::WS => {
                for layer in 0..4 {
                    let j = arch.index(&format!("k{}", layer + 1));
                    let l = arch.index(&format!("c{}", layer + 1));
                    let (w, b) = self.ws_combos[layer][j * 3 + l];
                    let shape = self.weights.get(w).shape().to_vec();
                    mask.allow(w, vec![0; 4], shape.clone());
                    let blen = self.weights.get(b).shape()[0];
                    mask.allow(b, vec![0], vec![blen]);
                }
                self.sites[4].allow_slices(&mut mask, arch)?;
            }
        }
        Ok(mask)
    }

    fn inherit(&self, arch: &Architecture) -> Result<ConvMacroSubnet<T>> {
        self.space.validate(arch)?;
        let mut params = ParamStore::new();
        for layer in 0..4 {
            let site = &self.sites[layer];
            let (w, b) = match self.mode {
                SupernetMode::WE => {
                    let (offsets, lens) = site.meta.window(arch)?;
                    let w = self.weights.get(site.weight).slice_copy(&offsets, &lens)?;
                    let (bo, bl) = site.meta.bias_window(arch)?;
                    let b = self
                        .weights
                        .get(site.bias.unwrap())
                        .slice_copy(&[bo], &[bl])?;
                    (w, b)
                }
                SupernetMode::WS => {
                    let j = arch.index(&format!("k{}", layer + 1));
                    let l = arch.index(&format!("c{}", layer + 1));
                    let (wid, bid) = self.ws_combos[layer][j * 3 + l];
                    let wt = self.weights.get(wid);
                    let cin = if layer == 0 {
                        self.in_channels
                    } else {
                        MACRO_CHANNELS[layer - 1][arch.index(&format!("c{layer}"))]
                    };
                    let s = wt.shape().to_vec();
                    let w = wt.slice_copy(&[0, 0, 0, 0], &[s[0], cin, s[2], s[3]])?;
                    (w, self.weights.get(bid).clone())
                }
            };
            params.insert(format!("layer{}/weight", layer + 1), w.with_grad());
            params.insert(format!("layer{}/bias", layer + 1), b.with_grad());
        }
        let head_site = &self.sites[4];
        let (offsets, lens) = head_site.meta.window(arch)?;
        let hw = self.weights.get(self.head_w).slice_copy(&offsets, &lens)?;
        params.insert("head/weight", hw.with_grad());
        params.insert("head/bias", self.weights.get(self.head_b).clone().with_grad());
        Ok(ConvMacroSubnet {
            arch: arch.clone(),
            params,
            in_channels: self.in_channels,
            classes: self.classes,
        })
    }
}

fn weights_input<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Var<T> {
    tape.constant(x)
}

/// Standalone four-layer model with a fixed architecture.
pub struct ConvMacroSubnet<T: Scalar> {
    arch: Architecture,
    params: ParamStore<T>,
    in_channels: usize,
    classes: usize,
}

impl<T: Scalar> ConvMacroSubnet<T> {
    /// Fresh model: slice-consistent random initialization at `seed`.
    pub fn fresh(arch: &Architecture, in_channels: usize, classes: usize, seed: u64) -> Result<Self> {
        let supernet = ConvMacroSupernet::<T>::new(in_channels, classes, SupernetMode::WE, seed)?;
        supernet.inherit(arch)
    }

    pub fn kernel(&self, layer: usize) -> usize {
        MACRO_KERNELS[self.arch.index(&format!("k{}", layer + 1))]
    }
}

impl<T: Scalar> SubnetModel<T> for ConvMacroSubnet<T> {
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
        let mut h = tape.constant(x);
        for layer in 0..4 {
            let k = self.kernel(layer);
            let spec = Conv2dSpec {
                stride: STRIDES[layer],
                dilation: 1,
                padding: (k - 1) / 2,
                groups: 1,
            };
            let w = self.params.lookup(&format!("layer{}/weight", layer + 1)).unwrap();
            let b = self.params.lookup(&format!("layer{}/bias", layer + 1)).unwrap();
            h = conv2d(&h, weights.var(w), spec)?
                .add_chan_bias(weights.var(b))?
                .relu();
        }
        let pooled = h.global_avg_pool()?;
        let hw = self.params.lookup("head/weight").unwrap();
        let hb = self.params.lookup("head/bias").unwrap();
        Ok(pooled.matmul_bt(weights.var(hw))?.add_row(weights.var(hb))?)
    }

    fn reinitialize(&mut self, seed: u64) {
        let fresh = ConvMacroSubnet::<T>::fresh(&self.arch, self.in_channels, self.classes, seed)
            .expect("arch already validated");
        self.params = fresh.params;
    }
}
