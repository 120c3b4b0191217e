//! Parameter update rules. Both optimizers consume the adjoint left on each
//! tensor by the backward pass and clear it afterwards. An optional
//! [`SliceMask`] restricts an update (and its state buffers) to the windows a
//! sampled path actually touched, leaving everything outside bit-identical.

use std::collections::HashMap;

use crate::error::{AdError, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::strides;

/// Per-parameter windows that an update is allowed to touch.
#[derive(Debug, Clone, Default)]
pub struct SliceMask {
    windows: HashMap<usize, Vec<(Vec<usize>, Vec<usize>)>>,
}

impl SliceMask {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn allow(&mut self, id: ParamId, offsets: Vec<usize>, lens: Vec<usize>) {
        self.windows.entry(id.0).or_default().push((offsets, lens));
    }

    /// Every flat index inside any window of `id`, deduplicated, ascending.
    fn indices(&self, id: ParamId, shape: &[usize]) -> Option<Vec<usize>> {
        let wins = self.windows.get(&id.0)?;
        let st = strides(shape);
        let mut flags = vec![false; shape.iter().product()];
        for (offsets, lens) in wins {
            let rank = shape.len();
            let total: usize = lens.iter().product();
            let mut idx = vec![0usize; rank];
            for _ in 0..total {
                let mut flat = 0;
                for a in 0..rank {
                    flat += (offsets[a] + idx[a]) * st[a];
                }
                flags[flat] = true;
                for a in (0..rank).rev() {
                    idx[a] += 1;
                    if idx[a] < lens[a] {
                        break;
                    }
                    idx[a] = 0;
                }
            }
        }
        Some(flags.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i).collect())
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.windows.contains_key(&id.0)
    }

    /// Public view of the allowed flat indices (None if the parameter has
    /// no window at all).
    pub fn flat_indices(&self, id: ParamId, shape: &[usize]) -> Option<Vec<usize>> {
        self.indices(id, shape)
    }
}

pub trait Optimizer<T: Scalar> {
    /// Update every parameter that carries an adjoint; clear the adjoints.
    fn step(&mut self, store: &mut ParamStore<T>) -> Result<()>;

    /// Masked update: only parameters listed in the mask move, and only
    /// inside their windows.
    fn step_masked(&mut self, store: &mut ParamStore<T>, mask: &SliceMask) -> Result<()>;

    fn set_lr(&mut self, lr: f64);
}

#[derive(Debug, Clone)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            nesterov: false,
            weight_decay: 0.0,
        }
    }
}

/// SGD with momentum; `nesterov` switches to the lookahead update.
pub struct Sgd<T: Scalar> {
    cfg: SgdConfig,
    velocity: HashMap<usize, Vec<T>>,
    steps: u64,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(cfg: SgdConfig) -> Self {
        Sgd {
            cfg,
            velocity: HashMap::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn update_indices(
        &mut self,
        store: &mut ParamStore<T>,
        id: ParamId,
        indices: Option<&[usize]>,
    ) -> Result<()> {
        let numel = store.get(id).numel();
        let grad = match store.get(id).adjoint() {
            Some(g) => g.to_vec(),
            None => {
                return Err(AdError::MissingAdjoint {
                    name: store.name(id).to_string(),
                })
            }
        };
        let vel = self
            .velocity
            .entry(id.0)
            .or_insert_with(|| vec![T::zero(); numel]);
        let lr = T::from_f64(self.cfg.lr);
        let mu = T::from_f64(self.cfg.momentum);
        let wd = T::from_f64(self.cfg.weight_decay);
        let tensor = store.get_mut(id);
        let values = tensor.values_mut();
        let mut apply = |i: usize| {
            let g = grad[i] + wd * values[i];
            let v = mu * vel[i] + g;
            vel[i] = v;
            let step = if self.cfg.nesterov { g + mu * v } else { v };
            values[i] = values[i] - lr * step;
        };
        match indices {
            Some(idx) => idx.iter().for_each(|&i| apply(i)),
            None => (0..numel).for_each(apply),
        }
        tensor.clear_adjoint();
        Ok(())
    }
}

impl<T: Scalar> Optimizer<T> for Sgd<T> {
    fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        self.steps += 1;
        let ids: Vec<ParamId> = store
            .ids()
            .filter(|&id| store.get(id).requires_grad() && store.get(id).adjoint().is_some())
            .collect();
        for id in ids {
            self.update_indices(store, id, None)?;
        }
        Ok(())
    }

    fn step_masked(&mut self, store: &mut ParamStore<T>, mask: &SliceMask) -> Result<()> {
        self.steps += 1;
        let ids: Vec<ParamId> = store
            .ids()
            .filter(|&id| {
                store.get(id).requires_grad()
                    && store.get(id).adjoint().is_some()
                    && mask.contains(id)
            })
            .collect();
        for id in ids {
            let indices = mask.indices(id, store.get(id).shape()).unwrap();
            self.update_indices(store, id, Some(&indices))?;
        }
        store.clear_adjoints();
        Ok(())
    }

    fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }
}

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// AdamW with decoupled weight decay. Bias correction uses a per-parameter
/// step counter so masked (path-local) updates stay slice-consistent.
pub struct AdamW<T: Scalar> {
    cfg: AdamWConfig,
    first: HashMap<usize, Vec<T>>,
    second: HashMap<usize, Vec<T>>,
    steps: HashMap<usize, u64>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            first: HashMap::new(),
            second: HashMap::new(),
            steps: HashMap::new(),
        }
    }

    fn update_indices(
        &mut self,
        store: &mut ParamStore<T>,
        id: ParamId,
        indices: Option<&[usize]>,
    ) -> Result<()> {
        let numel = store.get(id).numel();
        let grad = match store.get(id).adjoint() {
            Some(g) => g.to_vec(),
            None => {
                return Err(AdError::MissingAdjoint {
                    name: store.name(id).to_string(),
                })
            }
        };
        let m = self
            .first
            .entry(id.0)
            .or_insert_with(|| vec![T::zero(); numel]);
        let v = self
            .second
            .entry(id.0)
            .or_insert_with(|| vec![T::zero(); numel]);
        let t = self.steps.entry(id.0).or_insert(0);
        *t += 1;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one = T::one();
        let bc1 = one - T::from_f64(self.cfg.beta1.powi(*t as i32));
        let bc2 = one - T::from_f64(self.cfg.beta2.powi(*t as i32));
        let lr = T::from_f64(self.cfg.lr);
        let eps = T::from_f64(self.cfg.eps);
        let wd = T::from_f64(self.cfg.weight_decay);
        let tensor = store.get_mut(id);
        let values = tensor.values_mut();
        let mut apply = |i: usize| {
            let g = grad[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            values[i] = values[i] - lr * (mhat / (vhat.sqrt() + eps) + wd * values[i]);
        };
        match indices {
            Some(idx) => idx.iter().for_each(|&i| apply(i)),
            None => (0..numel).for_each(apply),
        }
        tensor.clear_adjoint();
        Ok(())
    }
}

impl<T: Scalar> Optimizer<T> for AdamW<T> {
    fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<ParamId> = store
            .ids()
            .filter(|&id| store.get(id).requires_grad() && store.get(id).adjoint().is_some())
            .collect();
        for id in ids {
            self.update_indices(store, id, None)?;
        }
        Ok(())
    }

    fn step_masked(&mut self, store: &mut ParamStore<T>, mask: &SliceMask) -> Result<()> {
        let ids: Vec<ParamId> = store
            .ids()
            .filter(|&id| {
                store.get(id).requires_grad()
                    && store.get(id).adjoint().is_some()
                    && mask.contains(id)
            })
            .collect();
        for id in ids {
            let indices = mask.indices(id, store.get(id).shape()).unwrap();
            self.update_indices(store, id, Some(&indices))?;
        }
        store.clear_adjoints();
        Ok(())
    }

    fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }
}
