//! Initial and personalized accuracy, Pareto sweeps and communication totals.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::arch::SubnetSpec;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::federation::RoundReport;
use crate::kernel::{linear_backward, linear_forward, sgd_step, softmax_cross_entropy, OptimizerState};
use crate::norm::Phase;
use crate::partition::ClientDataset;
use crate::rng::{stream, Stream};
use crate::supernet::{MaterializedModel, Supernet};
use crate::tensor::Tensor;

/// Evaluation batches are cut at this size everywhere, so every code path
/// sees identical batches (this matters for batch-dependent sBN).
pub const EVAL_CHUNK: usize = 64;

/// Mean and population standard deviation of per-client accuracies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyStats {
    pub acc: f64,
    pub std: f64,
    pub clients: usize,
}

impl AccuracyStats {
    pub fn from_values(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { acc: 0.0, std: 0.0, clients: 0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { acc: mean, std: var.sqrt(), clients: values.len() }
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let c = logits.shape()[1];
    logits.data().chunks_exact(c).zip(labels).filter(|(row, &l)| argmax(row) == l).count()
}

/// Pooled eval-mode body features of the selected examples.
pub fn features_of(model: &MaterializedModel, data: &Dataset, idx: &[usize]) -> Result<Tensor> {
    let width = model.shape.head_in();
    let mut out = Vec::with_capacity(idx.len() * width);
    for chunk in idx.chunks(EVAL_CHUNK) {
        out.extend_from_slice(model.features(&data.batch(chunk)?, Phase::Eval)?.data());
    }
    Tensor::new(vec![idx.len(), width], out)
}

/// Fraction of `idx` classified correctly; `None` for an empty index set.
pub fn accuracy_on(model: &MaterializedModel, data: &Dataset, idx: &[usize]) -> Result<Option<f64>> {
    if idx.is_empty() {
        return Ok(None);
    }
    let mut correct = 0;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let logits = model.forward(&data.batch(chunk)?, Phase::Eval)?;
        correct += count_correct(&logits, &data.labels_of(chunk));
    }
    Ok(Some(correct as f64 / idx.len() as f64))
}

fn head_accuracy(feats: &Tensor, w: &Tensor, b: &Tensor, labels: &[usize]) -> Result<f64> {
    let logits = linear_forward(feats, w, b)?;
    Ok(count_correct(&logits, labels) as f64 / labels.len() as f64)
}

/// Per-client accuracy of `spec` on each client's test split.
pub fn client_accuracies(net: &Supernet, spec: &SubnetSpec, test: &Dataset, clients: &[ClientDataset]) -> Result<Vec<Option<f64>>> {
    let model = net.extract_submodel(spec)?;
    clients.par_iter().map(|c| accuracy_on(&model, test, &c.test)).collect()
}

/// Global child evaluated on every client's own test data; clients with an
/// empty test split are skipped.
pub fn initial_accuracy(net: &Supernet, spec: &SubnetSpec, test: &Dataset, clients: &[ClientDataset]) -> Result<AccuracyStats> {
    let per = client_accuracies(net, spec, test, clients)?;
    let skipped = per.iter().filter(|a| a.is_none()).count();
    if skipped > 0 {
        debug!(skipped, "clients without test data excluded from evaluation");
    }
    let values: Vec<f64> = per.into_iter().flatten().collect();
    Ok(AccuracyStats::from_values(&values))
}

/// Head-only fine-tuning hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone)]
pub struct Personalized {
    pub model: MaterializedModel,
    pub initial: Option<f64>,
    pub accuracy: Option<f64>,
}

/// Copies the child, freezes its body and runs plain SGD (no momentum) on
/// the linear head over the client's train data; returns the tuned copy
/// and its accuracy on the client's test data.
///
/// The frozen body runs in evaluation mode, so its features are computed
/// once and reused for every epoch.
pub fn personalize(
    net: &Supernet,
    spec: &SubnetSpec,
    client: &ClientDataset,
    train: &Dataset,
    test: &Dataset,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<Personalized> {
    let model = net.extract_submodel(spec)?;
    personalize_model(model, client, train, test, cfg, seed)
}

pub fn personalize_model(
    mut model: MaterializedModel,
    client: &ClientDataset,
    train: &Dataset,
    test: &Dataset,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<Personalized> {
    if cfg.batch_size == 0 {
        return Err(Error::invalid("fine-tuning batch size must be positive"));
    }
    let hi = model.head_index();
    let test_feats = if client.test.is_empty() { None } else { Some(features_of(&model, test, &client.test)?) };
    let test_labels = test.labels_of(&client.test);
    let initial = match &test_feats {
        Some(f) => Some(head_accuracy(f, &model.params[hi], &model.params[hi + 1], &test_labels)?),
        None => None,
    };
    if cfg.epochs > 0 && !client.train.is_empty() {
        let train_feats = features_of(&model, train, &client.train)?;
        let width = train_feats.shape()[1];
        let mut head = vec![model.params[hi].clone(), model.params[hi + 1].clone()];
        let mut opt = OptimizerState::new(&head, cfg.lr, 0.0);
        let mut rng = stream(seed, Stream::Personalize, &[client.id as u64]);
        let mut order: Vec<usize> = (0..client.train.len()).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                let mut x = Vec::with_capacity(chunk.len() * width);
                for &i in chunk {
                    x.extend_from_slice(&train_feats.data()[i * width..(i + 1) * width]);
                }
                let x = Tensor::new(vec![chunk.len(), width], x)?;
                let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[client.train[i]]).collect();
                let logits = linear_forward(&x, &head[0], &head[1])?;
                let (_, g) = softmax_cross_entropy(&logits, &labels, 0.0)?;
                let (_, gw, gb) = linear_backward(&g, &x, &head[0])?;
                sgd_step(&mut head, &[gw, gb], &mut opt)?;
            }
        }
        let [w, b]: [Tensor; 2] = head.try_into().expect("two head tensors");
        model.params[hi] = w;
        model.params[hi + 1] = b;
    }
    let accuracy = match &test_feats {
        Some(f) => Some(head_accuracy(f, &model.params[hi], &model.params[hi + 1], &test_labels)?),
        None => None,
    };
    Ok(Personalized { model, initial, accuracy })
}

/// Initial and personalized statistics of one child over all clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChildAccuracy {
    pub initial: AccuracyStats,
    pub personalized: AccuracyStats,
}

pub fn evaluate_child(
    net: &Supernet,
    spec: &SubnetSpec,
    clients: &[ClientDataset],
    train: &Dataset,
    test: &Dataset,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<ChildAccuracy> {
    let model = net.extract_submodel(spec)?;
    let results: Vec<Personalized> = clients
        .par_iter()
        .map(|c| personalize_model(model.clone(), c, train, test, cfg, seed))
        .collect::<Result<_>>()?;
    let initial: Vec<f64> = results.iter().filter_map(|r| r.initial).collect();
    let tuned: Vec<f64> = results.iter().filter_map(|r| r.accuracy).collect();
    Ok(ChildAccuracy { initial: AccuracyStats::from_values(&initial), personalized: AccuracyStats::from_values(&tuned) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoRow {
    pub spec_hash: String,
    pub flops: u64,
    pub params: u64,
    pub initial_acc: f64,
    pub personalized_acc: f64,
    #[serde(skip)]
    pub spec: Option<SubnetSpec>,
}

/// Evaluates `k` uniformly sampled children; sample `i` is drawn from its
/// own stream so rows do not depend on evaluation order.
#[allow(clippy::too_many_arguments)]
pub fn pareto_sweep(
    net: &Supernet,
    k: usize,
    clients: &[ClientDataset],
    train: &Dataset,
    test: &Dataset,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<Vec<ParetoRow>> {
    if k == 0 {
        return Err(Error::invalid("Pareto sweep needs at least one sample"));
    }
    (0..k)
        .map(|i| {
            let spec = net.space.sample_random(&mut stream(seed, Stream::Pareto, &[i as u64]));
            let acc = evaluate_child(net, &spec, clients, train, test, cfg, seed)?;
            Ok(ParetoRow {
                spec_hash: spec.hash(),
                flops: net.space.flops(&spec)?,
                params: net.space.param_count(&spec)?,
                initial_acc: acc.initial.acc,
                personalized_acc: acc.personalized.acc,
                spec: Some(spec),
            })
        })
        .collect()
}

pub fn write_pareto_csv<W: Write>(mut out: W, rows: &[ParetoRow]) -> Result<()> {
    writeln!(out, "spec_hash,flops,params,initial_acc,personalized_acc")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.spec_hash, r.flops, r.params, r.initial_acc, r.personalized_acc)?;
    }
    Ok(())
}

pub fn save_pareto_csv(path: &Path, rows: &[ParetoRow]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_pareto_csv(std::io::BufWriter::new(f), rows)
}

/// Cumulative traffic over a run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CommSummary {
    pub rounds: usize,
    pub bytes_broadcast: u64,
    pub bytes_upload: u64,
    pub mean_broadcast_per_round: f64,
}

impl CommSummary {
    pub fn total(&self) -> u64 {
        self.bytes_broadcast + self.bytes_upload
    }

    /// Broadcast traffic of `self` relative to `baseline`.
    pub fn broadcast_ratio(&self, baseline: &CommSummary) -> f64 {
        self.bytes_broadcast as f64 / baseline.bytes_broadcast as f64
    }
}

pub fn comm_summary(reports: &[RoundReport]) -> CommSummary {
    let bytes_broadcast = reports.iter().map(|r| r.bytes_broadcast).sum();
    let bytes_upload = reports.iter().map(|r| r.bytes_upload).sum();
    CommSummary {
        rounds: reports.len(),
        bytes_broadcast,
        bytes_upload,
        mean_broadcast_per_round: if reports.is_empty() { 0.0 } else { bytes_broadcast as f64 / reports.len() as f64 },
    }
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            r[o] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson correlation of average ranks).
/// Returns 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}
