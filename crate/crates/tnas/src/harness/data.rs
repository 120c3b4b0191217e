//! Dataset containers and deterministic splitting/batching.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tnas_autodiff::{Scalar, Tensor};

use crate::error::{Result, TnasError};
use crate::spaces::Batch;

#[derive(Debug, Clone)]
pub struct LabeledImages<T: Scalar> {
    /// [N, C, H, W]
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl<T: Scalar> LabeledImages<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let shape = self.images.shape();
        let (c, h, w) = (shape[1], shape[2], shape[3]);
        let stride = c * h * w;
        let mut values = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            values.extend_from_slice(&self.images.values()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        LabeledImages {
            images: Tensor::from_vec(vec![indices.len(), c, h, w], values).unwrap(),
            labels,
            classes: self.classes,
        }
    }

    pub fn take(&self, n: usize) -> Self {
        let indices: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&indices)
    }

    fn batch_of(&self, indices: &[usize]) -> Batch<T> {
        let sub = self.subset(indices);
        Batch::Images {
            x: sub.images,
            labels: sub.labels,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TokenCorpus {
    pub ids: Vec<usize>,
    pub vocab: usize,
}

impl TokenCorpus {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Non-overlapping next-token windows starting at `offset * seq`.
    fn window<T: Scalar>(&self, start: usize, batch: usize, seq: usize) -> Option<Batch<T>> {
        let need = batch * seq + 1;
        if start + need > self.ids.len() {
            return None;
        }
        let mut ids = Vec::with_capacity(batch * seq);
        let mut targets = Vec::with_capacity(batch * seq);
        for b in 0..batch {
            let base = start + b * seq;
            ids.extend_from_slice(&self.ids[base..base + seq]);
            targets.extend_from_slice(&self.ids[base + 1..base + seq + 1]);
        }
        Some(Batch::Tokens {
            ids,
            targets,
            batch,
            seq,
        })
    }
}

#[derive(Debug, Clone)]
pub enum DataSet<T: Scalar> {
    Images(LabeledImages<T>),
    Tokens(TokenCorpus),
}

impl<T: Scalar> DataSet<T> {
    pub fn len(&self) -> usize {
        match self {
            DataSet::Images(d) => d.len(),
            DataSet::Tokens(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        match self {
            DataSet::Images(d) => d.classes,
            DataSet::Tokens(d) => d.vocab,
        }
    }

    /// Deterministic disjoint split. Images are shuffled by the seed before
    /// splitting; token streams split contiguously to preserve order.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(DataSet<T>, DataSet<T>)> {
        if !(0.0 < fraction && fraction < 1.0) {
            return Err(TnasError::Config(format!(
                "split fraction {fraction} outside (0, 1)"
            )));
        }
        match self {
            DataSet::Images(d) => {
                let mut indices: Vec<usize> = (0..d.len()).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                indices.shuffle(&mut rng);
                let cut = ((d.len() as f64) * fraction).floor() as usize;
                if cut == 0 || cut == d.len() {
                    return Err(TnasError::Config("split produces an empty part".into()));
                }
                Ok((
                    DataSet::Images(d.subset(&indices[..cut])),
                    DataSet::Images(d.subset(&indices[cut..])),
                ))
            }
            DataSet::Tokens(d) => {
                let cut = ((d.len() as f64) * fraction).floor() as usize;
                if cut == 0 || cut == d.len() {
                    return Err(TnasError::Config("split produces an empty part".into()));
                }
                Ok((
                    DataSet::Tokens(TokenCorpus {
                        ids: d.ids[..cut].to_vec(),
                        vocab: d.vocab,
                    }),
                    DataSet::Tokens(TokenCorpus {
                        ids: d.ids[cut..].to_vec(),
                        vocab: d.vocab,
                    }),
                ))
            }
        }
    }

    /// In-order batches covering the whole set (last partial batch kept).
    pub fn batches(&self, batch_size: usize, seq: usize) -> Vec<Batch<T>> {
        match self {
            DataSet::Images(d) => {
                let mut out = Vec::new();
                let mut i = 0;
                while i < d.len() {
                    let end = (i + batch_size).min(d.len());
                    let indices: Vec<usize> = (i..end).collect();
                    out.push(d.batch_of(&indices));
                    i = end;
                }
                out
            }
            DataSet::Tokens(d) => {
                let mut out = Vec::new();
                let mut start = 0;
                while let Some(b) = d.window(start, batch_size, seq) {
                    out.push(b);
                    start += batch_size * seq;
                }
                out
            }
        }
    }

    /// Seed-shuffled batches (sample order for images, window order for
    /// token streams).
    pub fn shuffled_batches(&self, batch_size: usize, seq: usize, rng: &mut ChaCha8Rng) -> Vec<Batch<T>> {
        match self {
            DataSet::Images(d) => {
                let mut indices: Vec<usize> = (0..d.len()).collect();
                indices.shuffle(rng);
                indices
                    .chunks(batch_size)
                    .map(|chunk| d.batch_of(chunk))
                    .collect()
            }
            DataSet::Tokens(_) => {
                let mut batches = self.batches(batch_size, seq);
                batches.shuffle(rng);
                batches
            }
        }
    }
}
