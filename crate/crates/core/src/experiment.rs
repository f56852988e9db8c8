//! Experiment configuration, dataset preparation and run orchestration.
//!
//! A training run writes into its output directory:
//!
//! * `manifest.json` with the config hash, seed, thread count and output hashes
//! * `rounds.jsonl` with one [`RoundReport`] per round
//! * `checkpoint.bin` holding the final supernet
//! * `eval.json` with initial and personalized accuracy of B, M and S
//! * `pareto.csv` when `eval.pareto_samples > 0`

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::info;

use crate::arch::{ArchSpace, Preset};
use crate::checkpoint;
use crate::data::{generate_synthetic_split, load_cifar10_binary, load_csv, Dataset, Standardization};
use crate::error::{Error, Result};
use crate::eval::{evaluate_child, pareto_sweep, save_pareto_csv, ChildAccuracy, FinetuneConfig, ParetoRow};
use crate::federation::{lr_schedule, run, FederatedData, FederationConfig, RoundReport};
use crate::partition::{mirror_test_split, partition_dirichlet, partition_shards};
use crate::rng::{stream, Stream};
use crate::supernet::Supernet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        classes: usize,
        per_class: usize,
        resolution: usize,
        noise: f64,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
    },
    Cifar10 {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
        #[serde(default)]
        standardization: Option<Standardization>,
    },
    Csv {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
        channels: usize,
        resolution: usize,
        classes: usize,
    },
}

fn default_test_per_class() -> usize {
    20
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum PartitionConfig {
    /// Shards per client.
    Shards(usize),
    /// Dirichlet concentration.
    Dirichlet(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpacePreset {
    /// The full MobileNetV1-style space (32-1024 channels).
    Default,
    /// A narrow version (8-128 channels) for desk-scale runs.
    Compact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpaceConfig {
    Preset(SpacePreset),
    Custom(ArchSpace),
}

impl Default for SpaceConfig {
    fn default() -> Self {
        SpaceConfig::Preset(SpacePreset::Compact)
    }
}

impl SpaceConfig {
    /// Presets take the class count and resolution from the dataset.
    pub fn resolve(&self, data: &Dataset) -> Result<ArchSpace> {
        let space = match self {
            SpaceConfig::Preset(SpacePreset::Default) => {
                let mut s = ArchSpace::with_classes(data.num_classes);
                s.input_resolution = data.resolution;
                s
            }
            SpaceConfig::Preset(SpacePreset::Compact) => ArchSpace::compact(data.num_classes, data.resolution),
            SpaceConfig::Custom(s) => s.clone(),
        };
        space.validate()?;
        if space.num_classes != data.num_classes || space.input_resolution != data.resolution || space.input_channels != data.channels {
            return Err(Error::Config("search space does not match the dataset's classes, resolution or channels".into()));
        }
        Ok(space)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub finetune_epochs: usize,
    /// Head learning rate; defaults to the last training learning rate.
    pub finetune_lr: Option<f64>,
    pub finetune_batch_size: usize,
    pub pareto_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { finetune_epochs: 5, finetune_lr: None, finetune_batch_size: 10, pareto_samples: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    #[serde(default)]
    pub space: SpaceConfig,
    #[serde(default)]
    pub federation: FederationConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub seed: u64,
    /// Test examples per client relative to its train examples, used when
    /// splitting the test pool.
    #[serde(default = "default_test_ratio")]
    pub test_ratio: f64,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_test_ratio() -> f64 {
    0.2
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.federation.validate()?;
        if !(self.test_ratio > 0.0) {
            return Err(Error::Config("test_ratio must be positive".into()));
        }
        if self.eval.finetune_batch_size == 0 {
            return Err(Error::Config("eval.finetune_batch_size must be positive".into()));
        }
        if self.eval.finetune_lr.is_some_and(|l| !(l >= 0.0)) {
            return Err(Error::Config("eval.finetune_lr must be >= 0".into()));
        }
        match self.partition {
            PartitionConfig::Shards(0) => Err(Error::Config("shards per client must be positive".into())),
            PartitionConfig::Dirichlet(b) if !(b > 0.0) => Err(Error::Config("Dirichlet beta must be positive".into())),
            _ => Ok(()),
        }
    }

    /// Fine-tuning settings with the learning-rate default applied.
    pub fn finetune(&self) -> FinetuneConfig {
        let last = self.federation.rounds.saturating_sub(1);
        FinetuneConfig {
            epochs: self.eval.finetune_epochs,
            lr: self.eval.finetune_lr.unwrap_or_else(|| lr_schedule(last, &self.federation)),
            batch_size: self.eval.finetune_batch_size,
        }
    }
}

/// JSON with object keys sorted, independent of field order in the source.
pub fn canonical_json(value: &Value) -> String {
    fn sort(v: &Value) -> Value {
        match v {
            Value::Object(m) => {
                let mut keys: Vec<&String> = m.keys().collect();
                keys.sort();
                Value::Object(keys.into_iter().map(|k| (k.clone(), sort(&m[k]))).collect())
            }
            Value::Array(a) => Value::Array(a.iter().map(sort).collect()),
            other => other.clone(),
        }
    }
    sort(value).to_string()
}

pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    Ok(checkpoint::sha256_hex(canonical_json(&serde_json::to_value(cfg)?).as_bytes()))
}

/// Loaded data, partition and search space of an experiment.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub space: ArchSpace,
    pub data: FederatedData,
    pub standardization: Option<Standardization>,
}

fn load_pair(train: Dataset, test: Option<Dataset>, seed: u64) -> Result<(Dataset, Dataset)> {
    match test {
        Some(t) => Ok((train, t)),
        None => {
            // hold out every fifth example of a seeded permutation
            use rand::seq::SliceRandom;
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut stream(seed, Stream::Partition, &[u64::MAX]));
            let (mut keep, mut hold): (Vec<usize>, Vec<usize>) = (Vec::new(), Vec::new());
            for (j, i) in order.into_iter().enumerate() {
                if j % 5 == 4 { hold.push(i) } else { keep.push(i) }
            }
            keep.sort_unstable();
            hold.sort_unstable();
            let pick = |idx: &[usize]| -> Result<Dataset> {
                let b = train.batch(idx)?;
                Dataset::new(b.into_data(), train.labels_of(idx), train.channels, train.resolution, train.num_classes)
            };
            Ok((pick(&keep)?, pick(&hold)?))
        }
    }
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let seed = cfg.seed;
    let (train, test, standardization) = match &cfg.dataset {
        DatasetConfig::Synthetic { classes, per_class, resolution, noise, test_per_class } => {
            let train = generate_synthetic_split(*classes, *per_class, *resolution, *noise, seed, 0)?;
            let test = generate_synthetic_split(*classes, *test_per_class, *resolution, *noise, seed, 1)?;
            (train, test, None)
        }
        DatasetConfig::Cifar10 { train, test, standardization } => {
            let norm = standardization.unwrap_or_default();
            let tr = load_cifar10_binary(train, &norm)?;
            let te = test.as_deref().map(|p| load_cifar10_binary(p, &norm)).transpose()?;
            let (tr, te) = load_pair(tr, te, seed)?;
            (tr, te, Some(norm))
        }
        DatasetConfig::Csv { train, test, channels, resolution, classes } => {
            let tr = load_csv(train, *channels, *resolution, *classes)?;
            let te = test.as_deref().map(|p| load_csv(p, *channels, *resolution, *classes)).transpose()?;
            let (tr, te) = load_pair(tr, te, seed)?;
            (tr, te, None)
        }
    };
    let space = cfg.space.resolve(&train)?;
    let n = cfg.federation.clients;
    let mut prng = stream(seed, Stream::Partition, &[0]);
    let parts = match cfg.partition {
        PartitionConfig::Shards(s) => partition_shards(&train.labels, n, s, &mut prng)?,
        PartitionConfig::Dirichlet(beta) => partition_dirichlet(&train.labels, train.num_classes, n, beta, &mut prng)?,
    };
    let clients = mirror_test_split(&train, parts, &test, cfg.test_ratio, &mut stream(seed, Stream::Partition, &[1]))?;
    Ok(Prepared { space, data: FederatedData { train, test, clients }, standardization })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub threads: usize,
    pub started_at: String,
    pub finished_at: String,
    pub rounds_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub rounds_sha256: String,
    pub checkpoint_sha256: String,
    pub standardization: Option<Standardization>,
    pub config: ExperimentConfig,
}

/// Final evaluation of the B, M and S children.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalEval {
    pub finetune: FinetuneConfig,
    pub children: std::collections::BTreeMap<String, ChildAccuracy>,
}

pub fn final_eval(cfg: &ExperimentConfig, net: &Supernet, data: &FederatedData) -> Result<FinalEval> {
    let ft = cfg.finetune();
    let children = Preset::ALL
        .iter()
        .map(|&p| {
            let acc = evaluate_child(net, &net.space.preset(p), &data.clients, &data.train, &data.test, &ft, cfg.seed)?;
            Ok((p.short().to_string(), acc))
        })
        .collect::<Result<_>>()?;
    Ok(FinalEval { finetune: ft, children })
}

pub fn sweep(cfg: &ExperimentConfig, net: &Supernet, data: &FederatedData, k: usize) -> Result<Vec<ParetoRow>> {
    pareto_sweep(net, k, &data.clients, &data.train, &data.test, &cfg.finetune(), cfg.seed)
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub manifest: RunManifest,
    pub reports: Vec<RoundReport>,
    pub net: Supernet,
    pub eval: FinalEval,
    pub pareto: Vec<ParetoRow>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Trains, evaluates and writes all artifacts into `out`, using a rayon pool
/// of `threads` workers.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, threads: usize) -> Result<RunOutput> {
    cfg.validate()?;
    let threads = threads.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| run_in_pool(cfg, out, threads))
}

fn run_in_pool(cfg: &ExperimentConfig, out: &Path, threads: usize) -> Result<RunOutput> {
    let started_at = chrono::Utc::now().to_rfc3339();
    fs::create_dir_all(out)?;
    let prepared = prepare(cfg)?;
    let rounds_path = out.join("rounds.jsonl");
    let checkpoint_path = out.join("checkpoint.bin");
    let mut jsonl = BufWriter::new(fs::File::create(&rounds_path)?);
    let mut reports = Vec::new();
    let net = run(&cfg.federation, &prepared.space, cfg.seed, &prepared.data, |r| {
        serde_json::to_writer(&mut jsonl, r)?;
        jsonl.write_all(b"\n")?;
        jsonl.flush()?;
        reports.push(r.clone());
        Ok(())
    })?;
    drop(jsonl);
    checkpoint::write(&checkpoint_path, &net)?;
    let eval = final_eval(cfg, &net, &prepared.data)?;
    write_json(&out.join("eval.json"), &eval)?;
    let pareto = if cfg.eval.pareto_samples > 0 {
        let rows = sweep(cfg, &net, &prepared.data, cfg.eval.pareto_samples)?;
        save_pareto_csv(&out.join("pareto.csv"), &rows)?;
        rows
    } else {
        Vec::new()
    };
    let manifest = RunManifest {
        config_hash: config_hash(cfg)?,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        threads,
        started_at,
        finished_at: chrono::Utc::now().to_rfc3339(),
        rounds_sha256: checkpoint::sha256_hex(&fs::read(&rounds_path)?),
        checkpoint_sha256: checkpoint::sha256_hex(&fs::read(&checkpoint_path)?),
        rounds_path,
        checkpoint_path,
        standardization: prepared.standardization,
        config: cfg.clone(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    info!(out = %out.display(), "run complete");
    Ok(RunOutput { manifest, reports, net, eval, pareto })
}

/// Per-client partition summary written by the `partition` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub id: usize,
    pub train: usize,
    pub test: usize,
    pub train_histogram: Vec<usize>,
}

pub fn partition_summary(p: &Prepared) -> Vec<PartitionSummary> {
    p.data
        .clients
        .iter()
        .map(|c| PartitionSummary {
            id: c.id,
            train: c.train.len(),
            test: c.test.len(),
            train_histogram: p.data.train.histogram(&c.train),
        })
        .collect()
}
