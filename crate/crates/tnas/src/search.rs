//! Training and search procedures: single-stage bi-level optimization with
//! weight superposition, single-path uniform-sampling supernet training,
//! post-hoc random and evolutionary search with weight inheritance, and
//! from-scratch retraining of discretized architectures.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tnas_autodiff::{
    cross_entropy, write_back_grads, AdamW, AdamWConfig, Optimizer, Scalar, Sgd, SgdConfig, Tape,
};

use crate::arch::{Architecture, SearchSpaceSpec};
use crate::error::{Result, TnasError};
use crate::harness::data::DataSet;
use crate::samplers::{anchor_regularizer, Sampler, SamplerConfig};
use crate::spaces::{bind_all, bind_frozen, Batch, SubnetModel, Supernet};

pub const DEFAULT_SEQ_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightOptim {
    /// SGD with momentum 0.9; `nesterov` per the space's recipe.
    Sgd { nesterov: bool },
    Adam,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BilevelConfig {
    pub epochs: usize,
    pub arch_lr: f64,
    pub arch_weight_decay: f64,
    pub weight_lr: f64,
    pub min_weight_lr: f64,
    pub weight_optim: WeightOptim,
    pub weight_decay: f64,
    pub momentum: f64,
    pub train_fraction: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub sampler: SamplerConfig,
    pub seed: u64,
    /// Sample cap for the per-epoch discretized-architecture evaluation.
    pub eval_cap: usize,
}

impl Default for BilevelConfig {
    fn default() -> Self {
        // Conv-macro recipe: Adam 3e-4 -> 1e-4, architecture Adam 3e-4 with
        // 1e-3 decay, batch 64, weight decay 5e-4, 100 epochs.
        BilevelConfig {
            epochs: 100,
            arch_lr: 3e-4,
            arch_weight_decay: 1e-3,
            weight_lr: 3e-4,
            min_weight_lr: 1e-4,
            weight_optim: WeightOptim::Adam,
            weight_decay: 5e-4,
            momentum: 0.9,
            train_fraction: 0.5,
            batch_size: 64,
            seq_len: DEFAULT_SEQ_LEN,
            sampler: SamplerConfig::default(),
            seed: 0,
            eval_cap: 512,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub alphas: BTreeMap<String, Vec<f64>>,
    pub arch: String,
    pub arch_metric: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct BilevelOutcome {
    pub final_arch: Architecture,
    pub epochs: Vec<EpochRecord>,
}

enum AnyOptim<T: Scalar> {
    Sgd(Sgd<T>),
    Adam(AdamW<T>),
}

impl<T: Scalar> AnyOptim<T> {
    fn new(kind: WeightOptim, lr: f64, weight_decay: f64, momentum: f64) -> Self {
        match kind {
            WeightOptim::Sgd { nesterov } => AnyOptim::Sgd(Sgd::new(SgdConfig {
                lr,
                momentum,
                nesterov,
                weight_decay,
            })),
            WeightOptim::Adam => AnyOptim::Adam(AdamW::new(AdamWConfig {
                lr,
                weight_decay,
                ..Default::default()
            })),
        }
    }

    fn as_dyn(&mut self) -> &mut dyn Optimizer<T> {
        match self {
            AnyOptim::Sgd(o) => o,
            AnyOptim::Adam(o) => o,
        }
    }
}

fn cosine_lr(max: f64, min: f64, epoch: usize, total: usize) -> f64 {
    if total <= 1 {
        return max;
    }
    let t = epoch as f64 / (total - 1) as f64;
    min + 0.5 * (max - min) * (1.0 + (std::f64::consts::PI * t).cos())
}

fn check_finite(loss: f64, where_: &str) -> Result<()> {
    if !loss.is_finite() {
        return Err(TnasError::Divergence {
            where_: where_.to_string(),
        });
    }
    Ok(())
}

/// Alternating per-batch updates: architecture parameters on the validation
/// split (plus the anchor regularizer), weights on the train split. Records
/// the architecture trajectory and a per-epoch discretized-architecture
/// metric.
pub fn train_bilevel<T: Scalar, S: Supernet<T>>(
    net: &mut S,
    data: &DataSet<T>,
    cfg: &BilevelConfig,
) -> Result<BilevelOutcome> {
    let (train, val) = data.split(cfg.train_fraction, cfg.seed)?;
    let mut sampler = Sampler::new(SamplerConfig {
        seed: cfg.sampler.seed ^ cfg.seed,
        ..cfg.sampler.clone()
    });
    let mut arch_opt = AdamW::<T>::new(AdamWConfig {
        lr: cfg.arch_lr,
        weight_decay: cfg.arch_weight_decay,
        ..Default::default()
    });
    let mut weight_opt = AnyOptim::<T>::new(
        cfg.weight_optim,
        cfg.weight_lr,
        cfg.weight_decay,
        cfg.momentum,
    );
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0xDA7A).wrapping_add(1));
    let mut epochs = Vec::new();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        weight_opt
            .as_dyn()
            .set_lr(cosine_lr(cfg.weight_lr, cfg.min_weight_lr, epoch, cfg.epochs));
        let train_batches = train.shuffled_batches(cfg.batch_size, cfg.seq_len, &mut data_rng);
        let val_batches = val.shuffled_batches(cfg.batch_size, cfg.seq_len, &mut data_rng);
        if train_batches.is_empty() || val_batches.is_empty() {
            return Err(TnasError::Config("empty split".into()));
        }
        let mut train_loss_sum = 0.0;
        let mut val_loss_sum = 0.0;
        for (i, tb) in train_batches.iter().enumerate() {
            let vb = &val_batches[i % val_batches.len()];

            // Architecture step on the validation batch.
            let val_loss = {
                let tape = Tape::new();
                let wbound = bind_frozen(&tape, net.weights());
                let abound = bind_all(&tape, net.arch_params());
                let mixes = sample_mixes(net.space(), net.arch_params(), &abound, &mut sampler, step)?;
                let logits = net.forward_mixture(&tape, &wbound, &mixes, vb)?;
                let data_loss = cross_entropy(&logits, vb.targets())?;
                let mut loss = data_loss.clone();
                if cfg.sampler.reg_scale > 0.0 {
                    for dim in &net.space().dims {
                        let id = net
                            .arch_params()
                            .lookup(&format!("arch/{}", dim.name))
                            .expect("arch param");
                        let reg = anchor_regularizer(abound.var(id), cfg.sampler.reg_scale)?;
                        loss = loss.add(&reg)?;
                    }
                }
                let loss_v = loss.scalar_value().as_f64();
                check_finite(loss_v, "validation loss")?;
                let mut grads = tape.backward(&loss)?;
                let bindings: Vec<_> = net
                    .arch_params()
                    .ids()
                    .map(|id| (id, abound.var(id).clone()))
                    .collect();
                write_back_grads(net.arch_params_mut(), &bindings, &mut grads);
                arch_opt.step(net.arch_params_mut())?;
                net.arch_params_mut().clear_adjoints();
                data_loss.scalar_value().as_f64()
            };
            val_loss_sum += val_loss;

            // Weight step on the train batch (fresh mixture sample).
            let train_loss = {
                let tape = Tape::new();
                let wbound = bind_all(&tape, net.weights());
                let abound = bind_frozen(&tape, net.arch_params());
                let mixes = sample_mixes(net.space(), net.arch_params(), &abound, &mut sampler, step)?;
                let logits = net.forward_mixture(&tape, &wbound, &mixes, tb)?;
                let loss = cross_entropy(&logits, tb.targets())?;
                let loss_v = loss.scalar_value().as_f64();
                check_finite(loss_v, "train loss")?;
                let mut grads = tape.backward(&loss)?;
                let bindings: Vec<_> = net
                    .weights()
                    .ids()
                    .map(|id| (id, wbound.var(id).clone()))
                    .collect();
                write_back_grads(net.weights_mut(), &bindings, &mut grads);
                weight_opt.as_dyn().step(net.weights_mut())?;
                net.weights_mut().clear_adjoints();
                loss_v
            };
            train_loss_sum += train_loss;
            step += 1;
        }

        let arch = net.discretize();
        let arch_metric = if cfg.eval_cap > 0 {
            Some(evaluate_path(net, &arch, &val, cfg.batch_size, cfg.seq_len, cfg.eval_cap)?.metric)
        } else {
            None
        };
        epochs.push(EpochRecord {
            epoch,
            train_loss: train_loss_sum / train_batches.len() as f64,
            val_loss: val_loss_sum / train_batches.len() as f64,
            alphas: net.alphas(),
            arch: arch.serialize_text(),
            arch_metric,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(BilevelOutcome {
        final_arch: net.discretize(),
        epochs,
    })
}

fn sample_mixes<T: Scalar>(
    space: &SearchSpaceSpec,
    arch_params: &tnas_autodiff::ParamStore<T>,
    abound: &crate::spaces::Bound<T>,
    sampler: &mut Sampler,
    step: usize,
) -> Result<BTreeMap<String, tnas_autodiff::Var<T>>> {
    let mut mixes = BTreeMap::new();
    for dim in &space.dims {
        let id = arch_params
            .lookup(&format!("arch/{}", dim.name))
            .expect("arch param");
        mixes.insert(dim.name.clone(), sampler.sample(abound.var(id), step)?);
    }
    Ok(mixes)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SposConfig {
    pub epochs: usize,
    pub weight_lr: f64,
    pub min_weight_lr: f64,
    pub weight_optim: WeightOptim,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for SposConfig {
    fn default() -> Self {
        SposConfig {
            epochs: 250,
            weight_lr: 3e-4,
            min_weight_lr: 1e-4,
            weight_optim: WeightOptim::Adam,
            weight_decay: 5e-4,
            momentum: 0.9,
            batch_size: 64,
            seq_len: DEFAULT_SEQ_LEN,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SposOutcome {
    pub epoch_losses: Vec<f64>,
    pub paths_sampled: usize,
}

/// Uniform single-path supernet training: per batch, sample one
/// architecture, run its discrete path, and update only the slices that
/// path touches. Architecture parameters are never read or written.
pub fn train_spos<T: Scalar, S: Supernet<T>>(
    net: &mut S,
    data: &DataSet<T>,
    cfg: &SposConfig,
) -> Result<SposOutcome> {
    let mut weight_opt = AnyOptim::<T>::new(
        cfg.weight_optim,
        cfg.weight_lr,
        cfg.weight_decay,
        cfg.momentum,
    );
    let mut path_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x5905).wrapping_add(7));
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0xDA7A).wrapping_add(2));
    let mut epoch_losses = Vec::new();
    let mut paths = 0usize;
    for epoch in 0..cfg.epochs {
        weight_opt
            .as_dyn()
            .set_lr(cosine_lr(cfg.weight_lr, cfg.min_weight_lr, epoch, cfg.epochs));
        let batches = data.shuffled_batches(cfg.batch_size, cfg.seq_len, &mut data_rng);
        let mut loss_sum = 0.0;
        for batch in &batches {
            let arch = net.space().random_arch(&mut path_rng);
            let tape = Tape::new();
            let wbound = bind_all(&tape, net.weights());
            let logits = net.forward_path(&tape, &wbound, &arch, batch)?;
            let loss = cross_entropy(&logits, batch.targets())?;
            let loss_v = loss.scalar_value().as_f64();
            check_finite(loss_v, "spos loss")?;
            loss_sum += loss_v;
            let mut grads = tape.backward(&loss)?;
            let bindings: Vec<_> = net
                .weights()
                .ids()
                .map(|id| (id, wbound.var(id).clone()))
                .collect();
            write_back_grads(net.weights_mut(), &bindings, &mut grads);
            let mask = net.active_slices(&arch)?;
            weight_opt.as_dyn().step_masked(net.weights_mut(), &mask)?;
            paths += 1;
        }
        epoch_losses.push(loss_sum / batches.len().max(1) as f64);
    }
    Ok(SposOutcome {
        epoch_losses,
        paths_sampled: paths,
    })
}

/// Higher-is-better evaluation result.
#[derive(Debug, Clone, Copy)]
pub struct EvalResult {
    /// Accuracy for image tasks, negative mean loss for token tasks.
    pub metric: f64,
    pub loss: f64,
    pub samples: usize,
}

fn eval_batches<T: Scalar>(
    logits_of: impl Fn(&Batch<T>) -> Result<tnas_autodiff::Var<T>>,
    batches: &[Batch<T>],
    images: bool,
) -> Result<EvalResult> {
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut rows = 0usize;
    for batch in batches {
        let logits = logits_of(batch)?;
        let loss = cross_entropy(&logits, batch.targets())?.scalar_value().as_f64();
        check_finite(loss, "eval loss")?;
        let n = batch.rows();
        loss_sum += loss * n as f64;
        rows += n;
        if images {
            let v = logits.value();
            let classes = logits.shape()[1];
            for (r, &label) in batch.targets().iter().enumerate() {
                let row = &v[r * classes..(r + 1) * classes];
                let mut best = 0;
                for (i, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = i;
                    }
                }
                if best == label {
                    correct += 1;
                }
            }
        }
    }
    let mean_loss = loss_sum / rows.max(1) as f64;
    Ok(EvalResult {
        metric: if images {
            correct as f64 / rows.max(1) as f64
        } else {
            -mean_loss
        },
        loss: mean_loss,
        samples: rows,
    })
}

fn cap_data<T: Scalar>(data: &DataSet<T>, cap: usize) -> DataSet<T> {
    match data {
        DataSet::Images(d) if d.len() > cap => DataSet::Images(d.take(cap)),
        DataSet::Tokens(d) if d.len() > cap => DataSet::Tokens(crate::harness::data::TokenCorpus {
            ids: d.ids[..cap].to_vec(),
            vocab: d.vocab,
        }),
        _ => data.clone(),
    }
}

/// Score a discrete path of the supernet without inheritance.
pub fn evaluate_path<T: Scalar, S: Supernet<T>>(
    net: &S,
    arch: &Architecture,
    data: &DataSet<T>,
    batch_size: usize,
    seq_len: usize,
    cap: usize,
) -> Result<EvalResult> {
    let capped = cap_data(data, cap);
    let batches = capped.batches(batch_size, seq_len);
    let images = matches!(data, DataSet::Images(_));
    eval_batches(
        |batch| {
            let tape = Tape::new();
            let bound = bind_frozen(&tape, net.weights());
            net.forward_path(&tape, &bound, arch, batch)
        },
        &batches,
        images,
    )
}

/// Score inherited (sliced, copied) weights without training.
pub fn evaluate_inherited<T: Scalar, S: Supernet<T>>(
    net: &S,
    arch: &Architecture,
    data: &DataSet<T>,
    batch_size: usize,
    seq_len: usize,
) -> Result<EvalResult> {
    let subnet = net.inherit(arch)?;
    evaluate_subnet(&subnet, data, batch_size, seq_len)
}

pub fn evaluate_subnet<T: Scalar, M: SubnetModel<T>>(
    model: &M,
    data: &DataSet<T>,
    batch_size: usize,
    seq_len: usize,
) -> Result<EvalResult> {
    let batches = data.batches(batch_size, seq_len);
    let images = matches!(data, DataSet::Images(_));
    eval_batches(
        |batch| {
            let tape = Tape::new();
            let bound = bind_frozen(&tape, model.params());
            model.forward(&tape, &bound, batch)
        },
        &batches,
        images,
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub optim: WeightOptim,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            lr: 3e-3,
            min_lr: 1e-3,
            optim: WeightOptim::Adam,
            weight_decay: 1e-4,
            momentum: 0.9,
            batch_size: 32,
            seq_len: DEFAULT_SEQ_LEN,
            seed: 0,
        }
    }
}

/// Plain supervised training of a fixed-architecture model.
pub fn train_subnet<T: Scalar, M: SubnetModel<T>>(
    model: &mut M,
    train: &DataSet<T>,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let mut opt = AnyOptim::<T>::new(cfg.optim, cfg.lr, cfg.weight_decay, cfg.momentum);
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0xDA7A).wrapping_add(3));
    let mut losses = Vec::new();
    for epoch in 0..cfg.epochs {
        opt.as_dyn()
            .set_lr(cosine_lr(cfg.lr, cfg.min_lr, epoch, cfg.epochs));
        let batches = train.shuffled_batches(cfg.batch_size, cfg.seq_len, &mut data_rng);
        let mut loss_sum = 0.0;
        for batch in &batches {
            let tape = Tape::new();
            let bound = bind_all(&tape, model.params());
            let logits = model.forward(&tape, &bound, batch)?;
            let loss = cross_entropy(&logits, batch.targets())?;
            let loss_v = loss.scalar_value().as_f64();
            check_finite(loss_v, "subnet train loss")?;
            loss_sum += loss_v;
            let mut grads = tape.backward(&loss)?;
            let bindings: Vec<_> = model
                .params()
                .ids()
                .map(|id| (id, bound.var(id).clone()))
                .collect();
            write_back_grads(model.params_mut(), &bindings, &mut grads);
            opt.as_dyn().step(model.params_mut())?;
            model.params_mut().clear_adjoints();
        }
        losses.push(loss_sum / batches.len().max(1) as f64);
    }
    Ok(losses)
}

/// Fresh slice-consistent initialization, then standard training; the
/// "train this architecture from scratch" primitive shared by retraining
/// and benchmark building.
pub fn retrain<T: Scalar, S: Supernet<T>>(
    net: &S,
    arch: &Architecture,
    train: &DataSet<T>,
    eval: &DataSet<T>,
    cfg: &TrainConfig,
) -> Result<(EvalResult, S::Subnet)> {
    let mut model = net.inherit(arch)?;
    model.reinitialize(cfg.seed);
    train_subnet(&mut model, train, cfg)?;
    let result = evaluate_subnet(&model, eval, cfg.batch_size, cfg.seq_len)?;
    Ok((result, model))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub arch: String,
    pub metric: f64,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best: Architecture,
    pub best_metric: f64,
    pub records: Vec<EvalRecord>,
    /// Best-so-far metric after each evaluation; nondecreasing.
    pub best_curve: Vec<f64>,
}

/// Evaluate `num_samples` uniform architectures by weight inheritance on
/// the validation stream; deterministic under the seed. Ties break toward
/// the smaller serialized architecture.
pub fn random_search<T: Scalar, S: Supernet<T>>(
    net: &S,
    val: &DataSet<T>,
    num_samples: usize,
    seed: u64,
    batch_size: usize,
    seq_len: usize,
) -> Result<SearchOutcome> {
    if num_samples < 1 {
        return Err(TnasError::Config("num_samples must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outcome: Option<(Architecture, f64)> = None;
    let mut records = Vec::new();
    let mut best_curve = Vec::new();
    for _ in 0..num_samples {
        let arch = net.space().random_arch(&mut rng);
        let metric = evaluate_inherited(net, &arch, val, batch_size, seq_len)?.metric;
        records.push(EvalRecord {
            arch: arch.serialize_text(),
            metric,
        });
        let better = match &outcome {
            None => true,
            Some((best_arch, best_metric)) => {
                metric > *best_metric
                    || (metric == *best_metric
                        && arch.serialize_text() < best_arch.serialize_text())
            }
        };
        if better {
            outcome = Some((arch, metric));
        }
        best_curve.push(outcome.as_ref().unwrap().1);
    }
    let (best, best_metric) = outcome.unwrap();
    Ok(SearchOutcome {
        best,
        best_metric,
        records,
        best_curve,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvolutionConfig {
    pub population: usize,
    pub generations: usize,
    pub parent_fraction: f64,
    pub mutation_prob: f64,
    pub crossover_prob: f64,
    pub elitism: usize,
    pub seed: u64,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            population: 20,
            generations: 10,
            parent_fraction: 0.25,
            mutation_prob: 0.1,
            crossover_prob: 0.5,
            elitism: 1,
            seed: 0,
        }
    }
}

/// Evolutionary search over a black-box metric (typically inherited-weight
/// validation performance, or a benchmark table). Uniform initialization,
/// top-fraction parent selection, uniform crossover, per-dimension
/// mutation, elitism on the best individual.
pub fn evolutionary_search<F>(
    space: &SearchSpaceSpec,
    mut eval: F,
    cfg: &EvolutionConfig,
) -> Result<SearchOutcome>
where
    F: FnMut(&Architecture) -> Result<f64>,
{
    if cfg.population < 2 || cfg.parent_fraction <= 0.0 || cfg.parent_fraction > 1.0 {
        return Err(TnasError::Config("degenerate evolution config".into()));
    }
    if !(0.0..=1.0).contains(&cfg.mutation_prob) || !(0.0..=1.0).contains(&cfg.crossover_prob) {
        return Err(TnasError::Config("probabilities must be in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cache: BTreeMap<String, f64> = BTreeMap::new();
    let mut records = Vec::new();
    let mut best_curve: Vec<f64> = Vec::new();

    let score = |arch: &Architecture,
                     cache: &mut BTreeMap<String, f64>,
                     records: &mut Vec<EvalRecord>,
                     best_curve: &mut Vec<f64>,
                     eval: &mut F|
     -> Result<f64> {
        let key = arch.serialize_text();
        if let Some(&m) = cache.get(&key) {
            return Ok(m);
        }
        let m = eval(arch)?;
        cache.insert(key.clone(), m);
        records.push(EvalRecord {
            arch: key,
            metric: m,
        });
        let so_far = best_curve.last().copied().unwrap_or(f64::NEG_INFINITY);
        best_curve.push(so_far.max(m));
        Ok(m)
    };

    let mut population: Vec<(Architecture, f64)> = Vec::new();
    for _ in 0..cfg.population {
        let arch = space.random_arch(&mut rng);
        let m = score(&arch, &mut cache, &mut records, &mut best_curve, &mut eval)?;
        population.push((arch, m));
    }

    let sort_pop = |pop: &mut Vec<(Architecture, f64)>| {
        pop.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap()
                .then_with(|| a.0.serialize_text().cmp(&b.0.serialize_text()))
        });
    };

    for _ in 0..cfg.generations {
        sort_pop(&mut population);
        let parents = ((cfg.population as f64 * cfg.parent_fraction).ceil() as usize)
            .clamp(1, population.len());
        let mut next: Vec<(Architecture, f64)> = population[..cfg.elitism.min(population.len())].to_vec();
        while next.len() < cfg.population {
            let p1 = &population[rng.gen_range(0..parents)].0;
            let p2 = &population[rng.gen_range(0..parents)].0;
            let mut child = if rng.gen_bool(cfg.crossover_prob) {
                let mut c = Architecture::empty();
                for dim in &space.dims {
                    let from = if rng.gen_bool(0.5) { p1 } else { p2 };
                    c.set(&dim.name, from.index(&dim.name));
                }
                c
            } else {
                p1.clone()
            };
            for dim in &space.dims {
                if rng.gen_bool(cfg.mutation_prob) {
                    child.set(&dim.name, rng.gen_range(0..dim.labels.len()));
                }
            }
            let m = score(&child, &mut cache, &mut records, &mut best_curve, &mut eval)?;
            next.push((child, m));
        }
        population = next;
    }
    sort_pop(&mut population);
    let (best, best_metric) = population[0].clone();
    Ok(SearchOutcome {
        best,
        best_metric,
        records,
        best_curve,
    })
}

/// One search or evaluation outcome; the rows of every results file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRecord {
    pub run_id: String,
    pub method: String,
    pub space_id: String,
    pub architecture: String,
    pub seed: u64,
    pub val_metric: f64,
    pub test_metric: Option<f64>,
    pub epoch: Option<usize>,
    pub wall_seconds: f64,
    pub param_count: usize,
    pub supernet_mode: String,
}
