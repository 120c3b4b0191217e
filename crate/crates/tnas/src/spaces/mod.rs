//! Search-space definitions: supernet construction in weight-entangled and
//! weight-sharing modes, discrete-path forwards, weight inheritance, and
//! parameter accounting.

mod cell;
mod conv_macro;
mod lm;

pub use cell::{genotype_text, CellSubnet, CellSupernet, CELL_OPS};
pub use conv_macro::{ConvMacroSubnet, ConvMacroSupernet, MACRO_CHANNELS, MACRO_KERNELS};
pub use lm::{LmPreset, LmSubnet, LmSupernet};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tnas_autodiff::{ParamId, ParamStore, Scalar, SliceMask, Tape, Tensor, Var};

use crate::arch::{Architecture, SearchSpaceSpec};
use crate::error::Result;
use crate::superposition::EntangleMeta;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SupernetMode {
    /// Weight entanglement: one maximal tensor per site, choices are slices.
    WE,
    /// Weight sharing: independent weights per choice combination.
    WS,
}

/// One minibatch, either labeled images or a next-token window.
#[derive(Debug, Clone)]
pub enum Batch<T: Scalar> {
    Images { x: Tensor<T>, labels: Vec<usize> },
    Tokens {
        ids: Vec<usize>,
        targets: Vec<usize>,
        batch: usize,
        seq: usize,
    },
}

impl<T: Scalar> Batch<T> {
    pub fn targets(&self) -> &[usize] {
        match self {
            Batch::Images { labels, .. } => labels,
            Batch::Tokens { targets, .. } => targets,
        }
    }

    pub fn rows(&self) -> usize {
        self.targets().len()
    }
}

/// Tape variables for every parameter of a store, indexed by `ParamId`.
pub struct Bound<T: Scalar> {
    vars: Vec<Var<T>>,
}

impl<T: Scalar> Bound<T> {
    pub fn var(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }
}

/// Register every parameter of the store as a tape leaf.
pub fn bind_all<T: Scalar>(tape: &Tape<T>, store: &ParamStore<T>) -> Bound<T> {
    Bound {
        vars: store.iter().map(|(_, _, t)| tape.leaf(t)).collect(),
    }
}

/// Register every parameter as a frozen (non-differentiable) leaf.
pub fn bind_frozen<T: Scalar>(tape: &Tape<T>, store: &ParamStore<T>) -> Bound<T> {
    Bound {
        vars: store
            .iter()
            .map(|(_, _, t)| {
                let mut frozen = t.clone();
                frozen.set_requires_grad(false);
                tape.leaf(&frozen)
            })
            .collect(),
    }
}

/// An entangled weight site: maximal storage, optional bias, slicing rules.
#[derive(Debug, Clone)]
pub struct Site {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub meta: EntangleMeta,
}

impl Site {
    /// Mixture variables for this site's mixed dims, in declaration order.
    pub fn mixes<T: Scalar>(&self, all: &BTreeMap<String, Var<T>>) -> Result<Vec<Var<T>>> {
        self.meta
            .mixed_dims()
            .map(|d| {
                all.get(&d.name).cloned().ok_or_else(|| {
                    crate::error::TnasError::Config(format!("no mixture for dimension {:?}", d.name))
                })
            })
            .collect()
    }

    pub fn allow_slices(&self, mask: &mut SliceMask, arch: &Architecture) -> Result<()> {
        let (offsets, lens) = self.meta.window(arch)?;
        mask.allow(self.weight, offsets, lens);
        if let Some(bias) = self.bias {
            let (o, l) = self.meta.bias_window(arch)?;
            mask.allow(bias, vec![o], vec![l]);
        }
        Ok(())
    }
}

/// Stable per-tensor RNG stream: the same (seed, name) always yields the
/// same draws, independent of creation order. Standalone models initialize
/// by generating the maximal tensor from this stream and slicing, so two
/// architectures agree bit-for-bit on every weight they share.
pub fn seeded_rng_for(seed: u64, name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(b))
}

/// Maximal-shape normal init with a fixed std, from the per-name stream.
pub fn init_max_shape<T: Scalar>(seed: u64, name: &str, shape: Vec<usize>, std: f64) -> Tensor<T> {
    let mut rng = seeded_rng_for(seed, name);
    Tensor::randn(shape, T::from_f64(std), &mut rng)
}

/// The architecture-parameter store: one zero vector per searchable
/// dimension, named `arch/<dim>`.
pub fn make_arch_params<T: Scalar>(space: &SearchSpaceSpec) -> ParamStore<T> {
    let mut store = ParamStore::new();
    for dim in &space.dims {
        store.insert(
            format!("arch/{}", dim.name),
            Tensor::zeros(vec![dim.labels.len()]).with_grad(),
        );
    }
    store
}

/// Current architecture-parameter values keyed by dimension name.
pub fn alphas_of<T: Scalar>(space: &SearchSpaceSpec, arch_params: &ParamStore<T>) -> BTreeMap<String, Vec<f64>> {
    let mut out = BTreeMap::new();
    for dim in &space.dims {
        let id = arch_params
            .lookup(&format!("arch/{}", dim.name))
            .expect("arch param present");
        out.insert(
            dim.name.clone(),
            arch_params.get(id).values().iter().map(|v| v.as_f64()).collect(),
        );
    }
    out
}

/// A supernet: weights, architecture parameters, and both forward modes.
pub trait Supernet<T: Scalar> {
    type Subnet: SubnetModel<T>;

    fn space(&self) -> &SearchSpaceSpec;
    fn mode(&self) -> SupernetMode;
    fn weights(&self) -> &ParamStore<T>;
    fn weights_mut(&mut self) -> &mut ParamStore<T>;
    fn arch_params(&self) -> &ParamStore<T>;
    fn arch_params_mut(&mut self) -> &mut ParamStore<T>;

    /// Single differentiable pass reflecting every choice, weighted by the
    /// per-dimension mixtures.
    fn forward_mixture(
        &self,
        tape: &Tape<T>,
        weights: &Bound<T>,
        mixes: &BTreeMap<String, Var<T>>,
        batch: &Batch<T>,
    ) -> Result<Var<T>>;

    /// Discrete single-path pass on sliced weights; activations are sized
    /// to the chosen dimensions.
    fn forward_path(
        &self,
        tape: &Tape<T>,
        weights: &Bound<T>,
        arch: &Architecture,
        batch: &Batch<T>,
    ) -> Result<Var<T>>;

    /// The slice windows a discrete path reads and writes.
    fn active_slices(&self, arch: &Architecture) -> Result<SliceMask>;

    /// Standalone model whose every weight is a copy of the corresponding
    /// slice of the trained supernet.
    fn inherit(&self, arch: &Architecture) -> Result<Self::Subnet>;

    fn alphas(&self) -> BTreeMap<String, Vec<f64>> {
        alphas_of(self.space(), self.arch_params())
    }

    fn discretize(&self) -> Architecture {
        crate::arch::discretize(&self.alphas())
    }
}

/// A fixed-architecture model (inherited or freshly initialized).
pub trait SubnetModel<T: Scalar> {
    fn arch(&self) -> &Architecture;
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    fn forward(&self, tape: &Tape<T>, weights: &Bound<T>, batch: &Batch<T>) -> Result<Var<T>>;
    /// Fresh slice-consistent random initialization.
    fn reinitialize(&mut self, seed: u64);
}
