//! Decoder-only transformer space with four interacting choice dimensions:
//! embedding width, head count, MLP expansion ratio, and depth. Width-like
//! dimensions slice leading windows of the stored tensors; the MLP weights
//! are combi-superposed over embed x ratio and the attention projections
//! over embed x heads. Depth is mixed by weighting the hidden states of
//! layer prefixes, which share the single trunk's weights.
//!
//! Feature normalization uses the soft active width as its element count,
//! so one-hot mixtures reproduce the narrow discrete model exactly.

use std::collections::BTreeMap;

use tnas_autodiff::{
    bmm, embed, norm_feature, ParamId, ParamStore, Scalar, SliceMask, Tape,
    Tensor, Var,
};

use crate::arch::{Architecture, SearchDim, SearchSpaceSpec};
use crate::error::{Result, TnasError};
use crate::spaces::{init_max_shape, Batch, Bound, SubnetModel, Supernet, SupernetMode};
use crate::superposition::{mixture_linear, superpose, ChoiceDim, EntangleMeta};

const INIT_STD: f64 = 0.02;
const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmPreset {
    /// Published configuration: embed {384, 576, 768}, heads {6, 8, 12},
    /// ratio {2, 3, 4}, layers {5, 6, 7}.
    Paper,
    /// Desk-scale configuration for minutes-scale tests: embed {32, 48, 64},
    /// heads {2, 4}, ratio {2, 4}, layers {2, 3, 4}.
    Desk,
}

#[derive(Debug, Clone)]
pub struct LmDims {
    pub embed: Vec<usize>,
    pub heads: Vec<usize>,
    pub ratio: Vec<usize>,
    pub layers: Vec<usize>,
}

impl LmPreset {
    pub fn dims(self) -> LmDims {
        match self {
            LmPreset::Paper => LmDims {
                embed: vec![384, 576, 768],
                heads: vec![6, 8, 12],
                ratio: vec![2, 3, 4],
                layers: vec![5, 6, 7],
            },
            LmPreset::Desk => LmDims {
                embed: vec![32, 48, 64],
                heads: vec![2, 4],
                ratio: vec![2, 4],
                layers: vec![2, 3, 4],
            },
        }
    }
}

struct BlockParams {
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    out: (ParamId, ParamId),
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
    mlp_in: (ParamId, ParamId),
    mlp_out: (ParamId, ParamId),
}

pub struct LmSupernet<T: Scalar> {
    space: SearchSpaceSpec,
    dims: LmDims,
    weights: ParamStore<T>,
    arch_params: ParamStore<T>,
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<BlockParams>,
    final_gamma: ParamId,
    final_beta: ParamId,
    lm_head: ParamId,
    vocab: usize,
    ctx_len: usize,
    head_dim: usize,
    vec_meta: EntangleMeta,
    qkv_meta: EntangleMeta,
    out_meta: EntangleMeta,
    mlp_in_meta: EntangleMeta,
    mlp_out_meta: EntangleMeta,
    tok_meta: EntangleMeta,
    pos_meta: EntangleMeta,
}

fn lm_space(dims: &LmDims) -> SearchSpaceSpec {
    SearchSpaceSpec::new(
        "tiny-lm",
        vec![
            SearchDim::numeric("embed", &dims.embed),
            SearchDim::numeric("heads", &dims.heads),
            SearchDim::numeric("ratio", &dims.ratio),
            SearchDim::numeric("layers", &dims.layers),
        ],
    )
}

impl<T: Scalar> LmSupernet<T> {
    pub fn new(
        preset: LmPreset,
        vocab: usize,
        ctx_len: usize,
        mode: SupernetMode,
        seed: u64,
    ) -> Result<Self> {
        if mode == SupernetMode::WS {
            return Err(TnasError::Config(
                "the LM space is built weight-entangled; weight-sharing is accounted structurally only".into(),
            ));
        }
        let dims = preset.dims();
        let e_max = *dims.embed.last().unwrap();
        let h_max = *dims.heads.last().unwrap();
        let r_max = *dims.ratio.last().unwrap();
        let l_max = *dims.layers.last().unwrap();
        if e_max % h_max != 0 {
            return Err(TnasError::Config(format!(
                "embed max {e_max} not divisible by heads max {h_max}"
            )));
        }
        let head_dim = e_max / h_max;

        let embed_dim = |axes: &[usize]| ChoiceDim::leading("embed", &dims.embed, axes);
        let heads_dim = |axes: &[usize]| ChoiceDim::leading("heads", &dims.heads, axes);
        let ratio_dim = |axes: &[usize]| ChoiceDim::leading("ratio", &dims.ratio, axes);

        let vec_meta = EntangleMeta::new(vec![e_max], vec![1], vec![embed_dim(&[0])], false)?;
        let tok_meta = EntangleMeta::new(vec![vocab, e_max], vec![vocab, 1], vec![embed_dim(&[1])], false)?;
        let pos_meta =
            EntangleMeta::new(vec![ctx_len, e_max], vec![ctx_len, 1], vec![embed_dim(&[1])], false)?;
        let qkv_meta = EntangleMeta::new(
            vec![h_max * head_dim, e_max],
            vec![head_dim, 1],
            vec![heads_dim(&[0]), embed_dim(&[1])],
            true,
        )?;
        let out_meta = EntangleMeta::new(
            vec![e_max, h_max * head_dim],
            vec![1, head_dim],
            vec![embed_dim(&[0]), heads_dim(&[1])],
            true,
        )?;
        let mlp_in_meta = EntangleMeta::new(
            vec![r_max * e_max, e_max],
            vec![1, 1],
            vec![ratio_dim(&[0]), embed_dim(&[0, 1])],
            true,
        )?;
        let mlp_out_meta = EntangleMeta::new(
            vec![e_max, r_max * e_max],
            vec![1, 1],
            vec![embed_dim(&[0, 1]), ratio_dim(&[1])],
            true,
        )?;

        let mut weights = ParamStore::new();
        let insert_w = |store: &mut ParamStore<T>, name: String, shape: Vec<usize>| {
            store.insert(
                name.clone(),
                init_max_shape::<T>(seed, &name, shape, INIT_STD).with_grad(),
            )
        };
        let tok = insert_w(&mut weights, "tok/storage".into(), vec![vocab, e_max]);
        let pos = insert_w(&mut weights, "pos/storage".into(), vec![ctx_len, e_max]);
        let mut blocks = Vec::new();
        for b in 0..l_max {
            let pre = format!("block{b}");
            let linear = |store: &mut ParamStore<T>, name: String, shape: Vec<usize>| {
                let w = store.insert(
                    format!("{name}/storage"),
                    init_max_shape::<T>(seed, &format!("{name}/storage"), shape.clone(), INIT_STD)
                        .with_grad(),
                );
                let bias = store.insert(
                    format!("{name}/bias_storage"),
                    Tensor::zeros(vec![shape[0]]).with_grad(),
                );
                (w, bias)
            };
            blocks.push(BlockParams {
                ln1_gamma: weights.insert(
                    format!("{pre}/ln1/gamma"),
                    Tensor::full(vec![e_max], T::one()).with_grad(),
                ),
                ln1_beta: weights.insert(
                    format!("{pre}/ln1/beta"),
                    Tensor::zeros(vec![e_max]).with_grad(),
                ),
                q: linear(&mut weights, format!("{pre}/attn/q"), vec![h_max * head_dim, e_max]),
                k: linear(&mut weights, format!("{pre}/attn/k"), vec![h_max * head_dim, e_max]),
                v: linear(&mut weights, format!("{pre}/attn/v"), vec![h_max * head_dim, e_max]),
                out: linear(&mut weights, format!("{pre}/attn/out"), vec![e_max, h_max * head_dim]),
                ln2_gamma: weights.insert(
                    format!("{pre}/ln2/gamma"),
                    Tensor::full(vec![e_max], T::one()).with_grad(),
                ),
                ln2_beta: weights.insert(
                    format!("{pre}/ln2/beta"),
                    Tensor::zeros(vec![e_max]).with_grad(),
                ),
                mlp_in: linear(&mut weights, format!("{pre}/mlp/in"), vec![r_max * e_max, e_max]),
                mlp_out: linear(&mut weights, format!("{pre}/mlp/out"), vec![e_max, r_max * e_max]),
            });
        }
        let final_gamma = weights.insert(
            "final_ln/gamma",
            Tensor::full(vec![e_max], T::one()).with_grad(),
        );
        let final_beta = weights.insert("final_ln/beta", Tensor::zeros(vec![e_max]).with_grad());
        let lm_head = insert_w(&mut weights, "lm_head/storage".into(), vec![vocab, e_max]);

        let space = lm_space(&dims);
        let arch_params = super::make_arch_params(&space);
        Ok(LmSupernet {
            space,
            dims,
            weights,
            arch_params,
            tok,
            pos,
            blocks,
            final_gamma,
            final_beta,
            lm_head,
            vocab,
            ctx_len,
            head_dim,
            vec_meta,
            qkv_meta,
            out_meta,
            mlp_in_meta,
            mlp_out_meta,
            tok_meta,
            pos_meta,
        })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn dims(&self) -> &LmDims {
        &self.dims
    }

    /// Structural weight-sharing parameter count: independent weights per
    /// choice combination at every site.
    pub fn ws_param_count(preset: LmPreset, vocab: usize, ctx_len: usize) -> usize {
        let dims = preset.dims();
        let e_max = *dims.embed.last().unwrap();
        let h_max = *dims.heads.last().unwrap();
        let hd = e_max / h_max;
        let l_max = *dims.layers.last().unwrap();
        let mut total = 0usize;
        // Embeddings and head: one weight per embed choice.
        for &e in &dims.embed {
            total += vocab * e * 2 + ctx_len * e;
        }
        for _ in 0..l_max {
            for &e in &dims.embed {
                total += 2 * e; // ln1
                total += 2 * e; // ln2
                for &h in &dims.heads {
                    total += 3 * (h * hd * e + h * hd); // qkv
                    total += e * h * hd + e; // out
                }
                for &r in &dims.ratio {
                    total += r * e * e + r * e; // mlp in
                    total += e * r * e + e; // mlp out
                }
            }
        }
        total += 2 * e_max; // final ln at max width
        total
    }

    fn token_batch<'a>(&self, batch: &'a Batch<T>) -> Result<(&'a [usize], usize, usize)> {
        match batch {
            Batch::Tokens { ids, batch, seq, .. } => Ok((ids, *batch, *seq)),
            Batch::Images { .. } => Err(TnasError::Config("the LM space expects token batches".into())),
        }
    }

    fn soft_width(&self, mix_e: &Var<T>) -> Result<Var<T>> {
        let mut acc: Option<Var<T>> = None;
        for (i, &e) in self.dims.embed.iter().enumerate() {
            let term = mix_e.slice_view(&[i], &[1])?.scale(T::from_usize(e));
            acc = Some(match acc {
                None => term,
                Some(a) => a.add(&term)?,
            });
        }
        Ok(acc.unwrap())
    }

    fn norm_mixture(
        &self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        mix_e: &Var<T>,
        width: &Var<T>,
    ) -> Result<Var<T>> {
        let g = superpose(gamma, &self.vec_meta, mix_e)?;
        let b = superpose(beta, &self.vec_meta, mix_e)?;
        Ok(norm_feature(x, &g, &b, width, T::from_f64(NORM_EPS))?)
    }

    fn attention(
        &self,
        q: Var<T>,
        k: Var<T>,
        v: Var<T>,
        batch: usize,
        seq: usize,
        active_heads: usize,
    ) -> Result<Var<T>> {
        let width = active_heads * self.head_dim;
        let split = |t: Var<T>| -> Result<Var<T>> {
            Ok(t.reshape(vec![batch, seq, active_heads, self.head_dim])?
                .permute(&[0, 2, 1, 3])?
                .reshape(vec![batch * active_heads, seq, self.head_dim])?)
        };
        let (q, k, v) = (split(q)?, split(k)?, split(v)?);
        let scale = T::from_f64(1.0 / (self.head_dim as f64).sqrt());
        let scores = bmm(&q, &k, true)?.scale(scale);
        let probs = scores.causal_mask()?.softmax(2)?;
        let ctx = bmm(&probs, &v, false)?;
        Ok(ctx
            .reshape(vec![batch, active_heads, seq, self.head_dim])?
            .permute(&[0, 2, 1, 3])?
            .reshape(vec![batch * seq, width])?)
    }

    #[allow(clippy::too_many_arguments)]
    fn block_mixture(
        &self,
        weights: &Bound<T>,
        block: &BlockParams,
        x: &Var<T>,
        mixes: &BTreeMap<String, Var<T>>,
        width: &Var<T>,
        batch: usize,
        seq: usize,
    ) -> Result<Var<T>> {
        let mix_e = &mixes["embed"];
        let mix_h = &mixes["heads"];
        let mix_r = &mixes["ratio"];
        let h_max = *self.dims.heads.last().unwrap();

        let a = self.norm_mixture(
            x,
            weights.var(block.ln1_gamma),
            weights.var(block.ln1_beta),
            mix_e,
            width,
        )?;
        let qkv = |p: (ParamId, ParamId)| -> Result<Var<T>> {
            mixture_linear(
                &a,
                weights.var(p.0),
                Some(weights.var(p.1)),
                &self.qkv_meta,
                &[mix_h.clone(), mix_e.clone()],
            )
        };
        let q = qkv(block.q)?;
        let k = qkv(block.k)?;
        let v = qkv(block.v)?;
        let ctx = self.attention(q, k, v, batch, seq, h_max)?;
        let attn = mixture_linear(
            &ctx,
            weights.var(block.out.0),
            Some(weights.var(block.out.1)),
            &self.out_meta,
            &[mix_e.clone(), mix_h.clone()],
        )?;
        let x = x.add(&attn)?;

        let m = self.norm_mixture(
            &x,
            weights.var(block.ln2_gamma),
            weights.var(block.ln2_beta),
            mix_e,
            width,
        )?;
        let m = mixture_linear(
            &m,
            weights.var(block.mlp_in.0),
            Some(weights.var(block.mlp_in.1)),
            &self.mlp_in_meta,
            &[mix_r.clone(), mix_e.clone()],
        )?
        .gelu();
        let m = mixture_linear(
            &m,
            weights.var(block.mlp_out.0),
            Some(weights.var(block.mlp_out.1)),
            &self.mlp_out_meta,
            &[mix_e.clone(), mix_r.clone()],
        )?;
        x.add(&m).map_err(Into::into)
    }

    fn block_path(
        &self,
        weights: &Bound<T>,
        block: &BlockParams,
        x: &Var<T>,
        arch: &Architecture,
        batch: usize,
        seq: usize,
    ) -> Result<Var<T>> {
        let e = self.dims.embed[arch.index("embed")];
        let h = self.dims.heads[arch.index("heads")];
        let count = x.tape().scalar_const(T::from_usize(e));

        let slice_vec = |id: ParamId| -> Result<Var<T>> {
            Ok(weights.var(id).slice_view(&[0], &[e])?)
        };
        let linear = |x: &Var<T>, p: (ParamId, ParamId), meta: &EntangleMeta| -> Result<Var<T>> {
            let (o, l) = meta.window(arch)?;
            let w = weights.var(p.0).slice_view(&o, &l)?;
            let (bo, bl) = meta.bias_window(arch)?;
            let b = weights.var(p.1).slice_view(&[bo], &[bl])?;
            Ok(x.matmul_bt(&w)?.add_row(&b)?)
        };

        let a = norm_feature(
            x,
            &slice_vec(block.ln1_gamma)?,
            &slice_vec(block.ln1_beta)?,
            &count,
            T::from_f64(NORM_EPS),
        )?;
        let q = linear(&a, block.q, &self.qkv_meta)?;
        let k = linear(&a, block.k, &self.qkv_meta)?;
        let v = linear(&a, block.v, &self.qkv_meta)?;
        let ctx = self.attention(q, k, v, batch, seq, h)?;
        let attn = linear(&ctx, block.out, &self.out_meta)?;
        let x = x.add(&attn)?;

        let m = norm_feature(
            &x,
            &slice_vec(block.ln2_gamma)?,
            &slice_vec(block.ln2_beta)?,
            &count,
            T::from_f64(NORM_EPS),
        )?;
        let m = linear(&m, block.mlp_in, &self.mlp_in_meta)?.gelu();
        let m = linear(&m, block.mlp_out, &self.mlp_out_meta)?;
        x.add(&m).map_err(Into::into)
    }
}

impl<T: Scalar> Supernet<T> for LmSupernet<T> {
    type Subnet = LmSubnet<T>;

    fn space(&self) -> &SearchSpaceSpec {
        &self.space
    }

    fn mode(&self) -> SupernetMode {
        SupernetMode::WE
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
        let (ids, bsz, seq) = self.token_batch(batch)?;
        if seq > self.ctx_len {
            return Err(TnasError::Config(format!(
                "sequence length {seq} exceeds context {}",
                self.ctx_len
            )));
        }
        let mix_e = &mixes["embed"];
        let mix_d = &mixes["layers"];
        let width = self.soft_width(mix_e)?;

        let tok_mix = superpose(weights.var(self.tok), &self.tok_meta, mix_e)?;
        let pos_mix = superpose(weights.var(self.pos), &self.pos_meta, mix_e)?;
        let tok = embed(&tok_mix, ids)?;
        let pos_ids: Vec<usize> = (0..bsz).flat_map(|_| 0..seq).collect();
        let pos = embed(&pos_mix, &pos_ids)?;
        let mut x = tok.add(&pos)?;

        let mut snapshots = Vec::new();
        let l_max = *self.dims.layers.last().unwrap();
        for (b, block) in self.blocks.iter().enumerate().take(l_max) {
            x = self.block_mixture(weights, block, &x, mixes, &width, bsz, seq)?;
            if self.dims.layers.contains(&(b + 1)) {
                snapshots.push(x.clone());
            }
        }
        // Depth mixing: the head applied to every layer-prefix state, the
        // resulting logits weighted by the depth simplex. Prefixes share the
        // single trunk's weights.
        let head_mix = superpose(weights.var(self.lm_head), &self.tok_meta, mix_e)?;
        let mut mixed: Option<Var<T>> = None;
        for (d, snap) in snapshots.iter().enumerate() {
            let h = self.norm_mixture(
                snap,
                weights.var(self.final_gamma),
                weights.var(self.final_beta),
                mix_e,
                &width,
            )?;
            let logits = h.matmul_bt(&head_mix)?;
            let term = logits.mul_scalar_var(&mix_d.slice_view(&[d], &[1])?)?;
            mixed = Some(match mixed {
                None => term,
                Some(a) => a.add(&term)?,
            });
        }
        let _ = tape;
        Ok(mixed.expect("at least one depth choice"))
    }

    fn forward_path(
        &self,
        tape: &Tape<T>,
        weights: &Bound<T>,
        arch: &Architecture,
        batch: &Batch<T>,
    ) -> Result<Var<T>> {
        self.space.validate(arch)?;
        let (ids, bsz, seq) = self.token_batch(batch)?;
        let e = self.dims.embed[arch.index("embed")];
        let layers = self.dims.layers[arch.index("layers")];

        let tok = weights
            .var(self.tok)
            .slice_view(&[0, 0], &[self.vocab, e])?;
        let pos = weights
            .var(self.pos)
            .slice_view(&[0, 0], &[self.ctx_len, e])?;
        let mut x = embed(&tok, ids)?;
        let pos_ids: Vec<usize> = (0..bsz).flat_map(|_| 0..seq).collect();
        x = x.add(&embed(&pos, &pos_ids)?)?;

        for block in self.blocks.iter().take(layers) {
            x = self.block_path(weights, block, &x, arch, bsz, seq)?;
        }
        let count = tape.scalar_const(T::from_usize(e));
        let h = norm_feature(
            &x,
            &weights.var(self.final_gamma).slice_view(&[0], &[e])?,
            &weights.var(self.final_beta).slice_view(&[0], &[e])?,
            &count,
            T::from_f64(NORM_EPS),
        )?;
        let head = weights
            .var(self.lm_head)
            .slice_view(&[0, 0], &[self.vocab, e])?;
        Ok(h.matmul_bt(&head)?)
    }

    fn active_slices(&self, arch: &Architecture) -> Result<SliceMask> {
        self.space.validate(arch)?;
        let e = self.dims.embed[arch.index("embed")];
        let layers = self.dims.layers[arch.index("layers")];
        let mut mask = SliceMask::new();
        mask.allow(self.tok, vec![0, 0], vec![self.vocab, e]);
        mask.allow(self.pos, vec![0, 0], vec![self.ctx_len, e]);
        for block in self.blocks.iter().take(layers) {
            for (id, meta) in [
                (block.q, &self.qkv_meta),
                (block.k, &self.qkv_meta),
                (block.v, &self.qkv_meta),
                (block.out, &self.out_meta),
                (block.mlp_in, &self.mlp_in_meta),
                (block.mlp_out, &self.mlp_out_meta),
            ] {
                let (o, l) = meta.window(arch)?;
                mask.allow(id.0, o, l);
                let (bo, bl) = meta.bias_window(arch)?;
                mask.allow(id.1, vec![bo], vec![bl]);
            }
            for id in [block.ln1_gamma, block.ln1_beta, block.ln2_gamma, block.ln2_beta] {
                mask.allow(id, vec![0], vec![e]);
            }
        }
        mask.allow(self.final_gamma, vec![0], vec![e]);
        mask.allow(self.final_beta, vec![0], vec![e]);
        mask.allow(self.lm_head, vec![0, 0], vec![self.vocab, e]);
        Ok(mask)
    }

    fn inherit(&self, arch: &Architecture) -> Result<LmSubnet<T>> {
        self.space.validate(arch)?;
        let e = self.dims.embed[arch.index("embed")];
        let h = self.dims.heads[arch.index("heads")];
        let layers = self.dims.layers[arch.index("layers")];
        let mut params = ParamStore::new();
        let mut put = |name: String, t: Tensor<T>| {
            params.insert(name, t.with_grad());
        };
        put(
            "tok".into(),
            self.weights.get(self.tok).slice_copy(&[0, 0], &[self.vocab, e])?,
        );
        put(
            "pos".into(),
            self.weights.get(self.pos).slice_copy(&[0, 0], &[self.ctx_len, e])?,
        );
        for (b, block) in self.blocks.iter().enumerate().take(layers) {
            let pre = format!("block{b}");
            let lin = |p: (ParamId, ParamId), meta: &EntangleMeta| -> Result<(Tensor<T>, Tensor<T>)> {
                let (o, l) = meta.window(arch)?;
                let w = self.weights.get(p.0).slice_copy(&o, &l)?;
                let (bo, bl) = meta.bias_window(arch)?;
                let bias = self.weights.get(p.1).slice_copy(&[bo], &[bl])?;
                Ok((w, bias))
            };
            let (qw, qb) = lin(block.q, &self.qkv_meta)?;
            let (kw, kb) = lin(block.k, &self.qkv_meta)?;
            let (vw, vb) = lin(block.v, &self.qkv_meta)?;
            let (ow, ob) = lin(block.out, &self.out_meta)?;
            let (iw, ib) = lin(block.mlp_in, &self.mlp_in_meta)?;
            let (mw, mb) = lin(block.mlp_out, &self.mlp_out_meta)?;
            put(format!("{pre}/ln1/gamma"), self.weights.get(block.ln1_gamma).slice_copy(&[0], &[e])?);
            put(format!("{pre}/ln1/beta"), self.weights.get(block.ln1_beta).slice_copy(&[0], &[e])?);
            put(format!("{pre}/q/w"), qw);
            put(format!("{pre}/q/b"), qb);
            put(format!("{pre}/k/w"), kw);
            put(format!("{pre}/k/b"), kb);
            put(format!("{pre}/v/w"), vw);
            put(format!("{pre}/v/b"), vb);
            put(format!("{pre}/out/w"), ow);
            put(format!("{pre}/out/b"), ob);
            put(format!("{pre}/ln2/gamma"), self.weights.get(block.ln2_gamma).slice_copy(&[0], &[e])?);
            put(format!("{pre}/ln2/beta"), self.weights.get(block.ln2_beta).slice_copy(&[0], &[e])?);
            put(format!("{pre}/mlp_in/w"), iw);
            put(format!("{pre}/mlp_in/b"), ib);
            put(format!("{pre}/mlp_out/w"), mw);
            put(format!("{pre}/mlp_out/b"), mb);
        }
        put("final_ln/gamma".into(), self.weights.get(self.final_gamma).slice_copy(&[0], &[e])?);
        put("final_ln/beta".into(), self.weights.get(self.final_beta).slice_copy(&[0], &[e])?);
        put("lm_head".into(), self.weights.get(self.lm_head).slice_copy(&[0, 0], &[self.vocab, e])?);
        Ok(LmSubnet {
            arch: arch.clone(),
            params,
            preset_dims: self.dims.clone(),
            vocab: self.vocab,
            ctx_len: self.ctx_len,
            head_dim: self.head_dim,
            embed: e,
            heads: h,
            layers,
        })
    }
}

/// Fixed-architecture decoder-only transformer.
pub struct LmSubnet<T: Scalar> {
    arch: Architecture,
    params: ParamStore<T>,
    preset_dims: LmDims,
    vocab: usize,
    ctx_len: usize,
    head_dim: usize,
    embed: usize,
    heads: usize,
    layers: usize,
}

impl<T: Scalar> LmSubnet<T> {
    fn preset(&self) -> LmPreset {
        if self.preset_dims.embed == LmPreset::Paper.dims().embed {
            LmPreset::Paper
        } else {
            LmPreset::Desk
        }
    }
}

impl<T: Scalar> SubnetModel<T> for LmSubnet<T> {
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
        let (ids, bsz, seq) = match batch {
            Batch::Tokens { ids, batch, seq, .. } => (ids.as_slice(), *batch, *seq),
            _ => return Err(TnasError::Config("token batch expected".into())),
        };
        let get = |name: &str| weights.var(self.params.lookup(name).unwrap());
        let e = self.embed;
        let count = tape.scalar_const(T::from_usize(e));
        let mut x = embed(&get("tok"), ids)?;
        let pos_ids: Vec<usize> = (0..bsz).flat_map(|_| 0..seq).collect();
        x = x.add(&embed(&get("pos"), &pos_ids)?)?;
        for b in 0..self.layers {
            let pre = format!("block{b}");
            let a = norm_feature(
                &x,
                &get(&format!("{pre}/ln1/gamma")),
                &get(&format!("{pre}/ln1/beta")),
                &count,
                T::from_f64(NORM_EPS),
            )?;
            let lin = |x: &Var<T>, name: &str| -> Result<Var<T>> {
                Ok(x.matmul_bt(&get(&format!("{pre}/{name}/w")))?
                    .add_row(&get(&format!("{pre}/{name}/b")))?)
            };
            let q = lin(&a, "q")?;
            let k = lin(&a, "k")?;
            let v = lin(&a, "v")?;
            let split = |t: Var<T>| -> Result<Var<T>> {
                Ok(t.reshape(vec![bsz, seq, self.heads, self.head_dim])?
                    .permute(&[0, 2, 1, 3])?
                    .reshape(vec![bsz * self.heads, seq, self.head_dim])?)
            };
            let (q, k, v) = (split(q)?, split(k)?, split(v)?);
            let scale = T::from_f64(1.0 / (self.head_dim as f64).sqrt());
            let probs = bmm(&q, &k, true)?.scale(scale).causal_mask()?.softmax(2)?;
            let ctx = bmm(&probs, &v, false)?
                .reshape(vec![bsz, self.heads, seq, self.head_dim])?
                .permute(&[0, 2, 1, 3])?
                .reshape(vec![bsz * seq, self.heads * self.head_dim])?;
            let attn = lin(&ctx, "out")?;
            x = x.add(&attn)?;
            let m = norm_feature(
                &x,
                &get(&format!("{pre}/ln2/gamma")),
                &get(&format!("{pre}/ln2/beta")),
                &count,
                T::from_f64(NORM_EPS),
            )?;
            let m = lin(&m, "mlp_in")?.gelu();
            let m = lin(&m, "mlp_out")?;
            x = x.add(&m)?;
        }
        let h = norm_feature(
            &x,
            &get("final_ln/gamma"),
            &get("final_ln/beta"),
            &count,
            T::from_f64(NORM_EPS),
        )?;
        Ok(h.matmul_bt(&get("lm_head"))?)
    }

    fn reinitialize(&mut self, seed: u64) {
        let supernet = LmSupernet::<T>::new(
            self.preset(),
            self.vocab,
            self.ctx_len,
            SupernetMode::WE,
            seed,
        )
        .expect("preset already validated");
        self.params = supernet.inherit(&self.arch).expect("arch already validated").params;
    }
}
