//! Full-enumeration benchmark tables: every architecture of a space
//! trained from scratch under a fixed small recipe, persisted append-only
//! so an interrupted run resumes without duplicating rows.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tnas_autodiff::Scalar;

use crate::error::{Result, TnasError};
use crate::harness::data::DataSet;
use crate::search::{retrain, TrainConfig};
use crate::spaces::Supernet;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRecipe {
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    /// Cap on the number of training samples per architecture.
    pub train_cap: usize,
}

impl Default for BenchRecipe {
    fn default() -> Self {
        BenchRecipe {
            train: TrainConfig::default(),
            seeds: vec![0],
            train_cap: 128,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchHeader {
    pub space_id: String,
    pub config_hash: String,
    pub cardinality: u64,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub arch: String,
    pub seed: u64,
    pub val_metric: f64,
    pub test_metric: f64,
    pub train_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct BenchmarkTable {
    pub header: BenchHeader,
    pub rows: Vec<BenchRow>,
}

pub fn config_hash(space_id: &str, recipe: &BenchRecipe, data_tag: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(space_id.as_bytes());
    hasher.update(serde_json::to_vec(recipe).expect("recipe serializes"));
    hasher.update(data_tag.as_bytes());
    hex_prefix(&hasher.finalize(), 16)
}

fn hex_prefix(bytes: &[u8], n: usize) -> String {
    bytes[..n].iter().map(|b| format!("{b:02x}")).collect()
}

impl BenchmarkTable {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| TnasError::Data("empty benchmark file".into()))??;
        let header: BenchHeader = serde_json::from_str(&header_line)?;
        let mut rows = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            rows.push(serde_json::from_str(&line)?);
        }
        Ok(BenchmarkTable { header, rows })
    }

    pub fn seen(&self) -> BTreeSet<(String, u64)> {
        self.rows.iter().map(|r| (r.arch.clone(), r.seed)).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.seen().len() as u64 == self.header.cardinality * self.header.seeds.len() as u64
    }

    /// Mean validation metric per architecture over the seed set.
    pub fn mean_val_metrics(&self) -> BTreeMap<String, f64> {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for r in &self.rows {
            let e = sums.entry(r.arch.clone()).or_insert((0.0, 0));
            e.0 += r.val_metric;
            e.1 += 1;
        }
        sums.into_iter()
            .map(|(k, (s, n))| (k, s / n as f64))
            .collect()
    }

    /// Best architecture by mean validation metric; exact metric ties break
    /// toward the smaller serialized architecture.
    pub fn argmax(&self) -> Option<(String, f64)> {
        let means = self.mean_val_metrics();
        let mut best: Option<(String, f64)> = None;
        for (arch, m) in means {
            let better = match &best {
                None => true,
                Some((ba, bm)) => m > *bm || (m == *bm && arch < *ba),
            };
            if better {
                best = Some((arch, m));
            }
        }
        best
    }
}

/// Train every architecture of the space (all seeds of the recipe) and
/// append one row per (architecture, seed). Resume mode refuses a file
/// whose configuration hash differs.
#[allow(clippy::too_many_arguments)]
pub fn enumerate_and_train<T: Scalar, S: Supernet<T>>(
    net: &S,
    train: &DataSet<T>,
    val: &DataSet<T>,
    test: &DataSet<T>,
    recipe: &BenchRecipe,
    data_tag: &str,
    out_path: impl AsRef<Path>,
    resume: bool,
    mut progress: impl FnMut(usize, usize),
) -> Result<BenchmarkTable> {
    let space = net.space();
    let hash = config_hash(&space.space_id, recipe, data_tag);
    let header = BenchHeader {
        space_id: space.space_id.clone(),
        config_hash: hash.clone(),
        cardinality: space.cardinality() as u64,
        seeds: recipe.seeds.clone(),
    };

    let mut seen = BTreeSet::new();
    let path = out_path.as_ref();
    if path.exists() {
        if !resume {
            return Err(TnasError::ResumeMismatch(format!(
                "{} exists; pass resume to continue",
                path.display()
            )));
        }
        let existing = BenchmarkTable::load(path)?;
        if existing.header.config_hash != hash {
            return Err(TnasError::ResumeMismatch(format!(
                "config hash {} != existing {}",
                hash, existing.header.config_hash
            )));
        }
        seen = existing.seen();
    }

    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    if seen.is_empty() && file.metadata()?.len() == 0 {
        let mut line = serde_json::to_string(&header)?;
        line.push('\n');
        file.write_all(line.as_bytes())?;
        file.flush()?;
    }

    let train_small = match train {
        DataSet::Images(d) if d.len() > recipe.train_cap => DataSet::Images(d.take(recipe.train_cap)),
        other => other.clone(),
    };

    let total = (space.cardinality() as usize) * recipe.seeds.len();
    let mut done = seen.len();
    for arch in space.enumerate() {
        let text = arch.serialize_text();
        for &seed in &recipe.seeds {
            if seen.contains(&(text.clone(), seed)) {
                continue;
            }
            let started = Instant::now();
            let cfg = TrainConfig {
                seed,
                ..recipe.train.clone()
            };
            let (val_result, model) = retrain(net, &arch, &train_small, val, &cfg)?;
            let test_result =
                crate::search::evaluate_subnet(&model, test, cfg.batch_size, cfg.seq_len)?;
            let row = BenchRow {
                arch: text.clone(),
                seed,
                val_metric: val_result.metric,
                test_metric: test_result.metric,
                train_seconds: started.elapsed().as_secs_f64(),
            };
            let mut line = serde_json::to_string(&row)?;
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.flush()?;
            done += 1;
            progress(done, total);
        }
    }
    BenchmarkTable::load(path)
}
