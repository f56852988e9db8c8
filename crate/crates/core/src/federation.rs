//! Round protocol: client sampling, broadcast, local supernet optimization
//! and weighted aggregation, for FedSup, E-FedSup and plain FedAvg.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::arch::{ArchSpace, Preset, SubnetSpec};
use crate::data::{augment, Dataset};
use crate::error::{Error, Result};
use crate::eval::{initial_accuracy, AccuracyStats};
use crate::kernel::{clip_global_norm, sgd_step, OptimizerState};
use crate::norm::{NormKind, Phase};
use crate::partition::{sample_clients, ClientDataset};
use crate::rng::{stream, Stream};
use crate::supernet::{Distill, LossSpec, MaterializedModel, Supernet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    #[default]
    FedSup,
    EFedSup,
    FedAvg,
}

/// A FLOPS ceiling given as a preset child or an absolute MAC count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Budget {
    Preset(Preset),
    Flops(u64),
}

impl Budget {
    pub fn resolve(&self, space: &ArchSpace) -> Result<u64> {
        match *self {
            Budget::Preset(p) => space.flops(&space.preset(p)),
            Budget::Flops(f) => Ok(f),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tier {
    pub fraction: f64,
    pub max_flops: Budget,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub enabled: bool,
    pub temperature: f64,
    pub balance: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { enabled: true, temperature: 1.0, balance: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub algorithm: Algorithm,
    pub clients: usize,
    pub participation: f64,
    pub local_epochs: usize,
    pub rounds: usize,
    /// Children sampled per local iteration.
    pub children: usize,
    pub momentum: f64,
    pub base_lr: f64,
    pub warmup_rounds: usize,
    pub batch_size: usize,
    pub norm: NormKind,
    /// Client capability classes for E-FedSup, assigned by client id.
    pub tiers: Vec<Tier>,
    pub distill: DistillConfig,
    pub fedprox: f64,
    pub label_smoothing: f64,
    /// `None` disables gradient clipping.
    pub clip_norm: Option<f64>,
    pub weight_decay: f64,
    /// Train only this preset child (every one of the M slots).
    pub pin_child: Option<Preset>,
    pub augment: bool,
    /// E-FedSup: draw a new sub-model for each client every round.
    pub resample_tier_spec: bool,
    /// Evaluate B/M/S every this many rounds (and after the last); 0 = never.
    pub eval_every: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::FedSup,
            clients: 20,
            participation: 0.5,
            local_epochs: 1,
            rounds: 30,
            children: 3,
            momentum: 0.5,
            base_lr: 0.1,
            warmup_rounds: 20,
            batch_size: 10,
            norm: NormKind::Pn,
            tiers: Vec::new(),
            distill: DistillConfig::default(),
            fedprox: 0.0,
            label_smoothing: 0.0,
            clip_norm: Some(1.0),
            weight_decay: 0.0,
            pin_child: None,
            augment: false,
            resample_tier_spec: true,
            eval_every: 1,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.clients == 0 {
            return bad("clients must be positive".into());
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad(format!("participation must be in (0, 1], got {}", self.participation));
        }
        if self.local_epochs == 0 || self.children == 0 || self.batch_size == 0 {
            return bad("local_epochs, children and batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.base_lr > 0.0) {
            return bad("base_lr must be positive".into());
        }
        if !(self.distill.temperature > 0.0) || !(0.0..=1.0).contains(&self.distill.balance) {
            return bad("distillation needs temperature > 0 and balance in [0, 1]".into());
        }
        if !(self.fedprox >= 0.0) || !(0.0..1.0).contains(&self.label_smoothing) || !(self.weight_decay >= 0.0) {
            return bad("fedprox and weight_decay must be >= 0, label_smoothing in [0, 1)".into());
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip_norm must be positive".into());
        }
        if !self.tiers.is_empty() {
            if self.tiers.iter().any(|t| !(t.fraction > 0.0)) {
                return bad("tier fractions must be positive".into());
            }
            let sum: f64 = self.tiers.iter().map(|t| t.fraction).sum();
            if (sum - 1.0).abs() > 1e-9 {
                return bad(format!("tier fractions sum to {sum}, not 1"));
            }
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr` over `warmup_rounds`, then a half cosine
/// decaying towards zero at the last round.
pub fn lr_schedule(round: usize, cfg: &FederationConfig) -> f64 {
    let w = cfg.warmup_rounds;
    if round < w {
        cfg.base_lr * (round + 1) as f64 / w as f64
    } else {
        let span = cfg.rounds.saturating_sub(w).max(1) as f64;
        0.5 * cfg.base_lr * (1.0 + (std::f64::consts::PI * (round - w) as f64 / span).cos())
    }
}

/// Tier index of every client: ids are cut into consecutive blocks whose
/// sizes follow the tier fractions.
pub fn assign_tiers(clients: usize, tiers: &[Tier]) -> Vec<usize> {
    if tiers.is_empty() {
        return vec![0; clients];
    }
    let mut bounds = Vec::with_capacity(tiers.len());
    let mut cum = 0.0;
    for t in tiers {
        cum += t.fraction;
        bounds.push((cum * clients as f64).round() as usize);
    }
    *bounds.last_mut().expect("non-empty") = clients;
    (0..clients).map(|k| bounds.iter().position(|&b| k < b).expect("last bound covers all")).collect()
}

/// Training data shared by all clients plus the per-client index sets.
#[derive(Debug, Clone)]
pub struct FederatedData {
    pub train: Dataset,
    pub test: Dataset,
    pub clients: Vec<ClientDataset>,
}

/// Result of one client's local work.
#[derive(Debug, Clone)]
pub struct LocalResult<P> {
    pub params: P,
    pub mean_loss: f64,
    pub steps: usize,
}

struct Step<'a> {
    cfg: &'a FederationConfig,
    lr: f64,
    seed: u64,
    round: usize,
}

/// Shuffled mini-batches of one client, one list per epoch, plus the
/// augmentation stream. Batch order comes from the `LocalTraining` stream
/// keyed by `(round, client)`: one shuffle of the client's train indices
/// per epoch, then consecutive `batch_size` chunks.
fn local_batches(client: &ClientDataset, s: &Step<'_>) -> Vec<Vec<usize>> {
    let mut rng = stream(s.seed, Stream::LocalTraining, &[s.round as u64, client.id as u64]);
    let mut out = Vec::new();
    for _ in 0..s.cfg.local_epochs {
        let mut order = client.train.clone();
        order.shuffle(&mut rng);
        for chunk in order.chunks(s.cfg.batch_size) {
            if chunk.len() < 2 && s.cfg.norm == NormKind::Sbn {
                continue;
            }
            out.push(chunk.to_vec());
        }
    }
    out
}

fn finish_grads(grads: &mut [Tensor], params: &[Tensor], anchor: &[Tensor], cfg: &FederationConfig) {
    if let Some(c) = cfg.clip_norm {
        clip_global_norm(grads, c);
    }
    if cfg.fedprox > 0.0 {
        let lam = cfg.fedprox as f32;
        for ((g, w), w0) in grads.iter_mut().zip(params).zip(anchor) {
            for ((gi, &wi), &w0i) in g.data_mut().iter_mut().zip(w.data()).zip(w0.data()) {
                *gi += lam * (wi - w0i);
            }
        }
    }
}

fn load_batch(data: &Dataset, idx: &[usize], s: &Step<'_>, aug: &mut crate::rng::StreamRng) -> Result<Tensor> {
    let x = data.batch(idx)?;
    if s.cfg.augment {
        augment(&x, Phase::Train, aug)
    } else {
        Ok(x)
    }
}

/// The children trained in one local iteration.
fn child_set(space: &ArchSpace, cfg: &FederationConfig, rng: &mut crate::rng::StreamRng) -> Result<Vec<SubnetSpec>> {
    if cfg.algorithm == Algorithm::FedAvg {
        return Ok(vec![space.biggest()]);
    }
    match cfg.pin_child {
        Some(p) => Ok(vec![space.preset(p); cfg.children]),
        None => space.sample_sandwich_set(cfg.children, rng),
    }
}

/// FedSup local optimization on a copy of the broadcast supernet.
///
/// Per iteration the sampled children all see the same batch. The biggest
/// child learns from hard labels; with distillation on, every other child
/// also matches the biggest child's detached logits. Child gradients are
/// summed, clipped, optionally given the FedProx pull towards the broadcast
/// weights, and applied in one momentum SGD step. Momentum starts from zero
/// at every broadcast.
pub fn local_train_fedsup(
    net: &Supernet,
    client: &ClientDataset,
    data: &Dataset,
    cfg: &FederationConfig,
    lr: f64,
    seed: u64,
    round: usize,
) -> Result<Option<LocalResult<Vec<Tensor>>>> {
    if client.train.is_empty() {
        warn!(client = client.id, "client has no training data; skipped");
        return Ok(None);
    }
    let s = Step { cfg, lr, seed, round };
    let coords = [round as u64, client.id as u64];
    let mut child_rng = stream(seed, Stream::ChildSampling, &coords);
    let mut aug_rng = stream(seed, Stream::Augment, &coords);
    let mut local = net.clone();
    let mut opt = OptimizerState::new(&local.params, s.lr, cfg.momentum);
    opt.weight_decay = cfg.weight_decay;
    let biggest = net.space.biggest();
    let big_view = local.view(&biggest)?;
    let (mut loss_sum, mut steps) = (0.0, 0);
    for idx in local_batches(client, &s) {
        let x = load_batch(data, &idx, &s, &mut aug_rng)?;
        let labels = data.labels_of(&idx);
        let children = child_set(&net.space, cfg, &mut child_rng)?;
        let mut grads = local.zeros_like();
        let mut teacher: Option<Tensor> = None;
        let distill = cfg.distill.enabled && cfg.algorithm == Algorithm::FedSup;
        for spec in &children {
            let is_big = *spec == biggest;
            let view = if is_big { big_view.clone() } else { local.view(spec)? };
            if distill && !is_big && teacher.is_none() {
                teacher = Some(local.forward(&big_view, &x, Phase::Train)?);
            }
            let loss = LossSpec {
                label_smoothing: cfg.label_smoothing,
                distill: match (&teacher, distill && !is_big) {
                    (Some(t), true) => Some(Distill { teacher: t, temperature: cfg.distill.temperature, balance: cfg.distill.balance }),
                    _ => None,
                },
            };
            let pass = local.backward_accumulate(&view, &x, &labels, &loss, &mut grads)?;
            loss_sum += pass.loss as f64;
            if is_big && teacher.is_none() {
                teacher = Some(pass.logits);
            }
        }
        finish_grads(&mut grads, &local.params, &net.params, cfg);
        sgd_step(&mut local.params, &grads, &mut opt)?;
        steps += 1;
    }
    let denom = (steps * cfg_children(cfg)).max(1) as f64;
    Ok(Some(LocalResult { params: local.params, mean_loss: loss_sum / denom, steps }))
}

fn cfg_children(cfg: &FederationConfig) -> usize {
    if cfg.algorithm == Algorithm::FedAvg {
        1
    } else {
        cfg.children
    }
}

/// E-FedSup local optimization: plain momentum SGD on one fixed, already
/// materialized sub-model; no distillation.
pub fn local_train_efedsup(
    model: &MaterializedModel,
    client: &ClientDataset,
    data: &Dataset,
    cfg: &FederationConfig,
    lr: f64,
    seed: u64,
    round: usize,
) -> Result<Option<LocalResult<MaterializedModel>>> {
    if client.train.is_empty() {
        warn!(client = client.id, "client has no training data; skipped");
        return Ok(None);
    }
    let s = Step { cfg, lr, seed, round };
    let mut aug_rng = stream(seed, Stream::Augment, &[round as u64, client.id as u64]);
    let mut local = model.clone();
    let mut opt = OptimizerState::new(&local.params, s.lr, cfg.momentum);
    opt.weight_decay = cfg.weight_decay;
    let loss = LossSpec { label_smoothing: cfg.label_smoothing, distill: None };
    let (mut loss_sum, mut steps) = (0.0, 0);
    for idx in local_batches(client, &s) {
        let x = load_batch(data, &idx, &s, &mut aug_rng)?;
        let (pass, mut grads) = local.loss_and_grads(&x, &data.labels_of(&idx), &loss)?;
        loss_sum += pass.loss as f64;
        finish_grads(&mut grads, &local.params, &model.params, cfg);
        sgd_step(&mut local.params, &grads, &mut opt)?;
        steps += 1;
    }
    Ok(Some(LocalResult { params: local, mean_loss: loss_sum / steps.max(1) as f64, steps }))
}

/// One participant's contribution to aggregation.
#[derive(Debug, Clone)]
pub struct ClientReturn {
    pub id: usize,
    pub weight: f64,
    pub params: Vec<Tensor>,
}

/// `p_k = |D_k| / Σ_j |D_j|` over the participants.
pub fn participation_weights(sizes: &[usize]) -> Vec<f64> {
    let total: usize = sizes.iter().sum();
    sizes.iter().map(|&n| n as f64 / total as f64).collect()
}

/// Weighted average `Σ p_k w_k`, accumulated in ascending client id.
pub fn aggregate(returns: &[ClientReturn]) -> Result<Vec<Tensor>> {
    let Some(first) = returns.first() else {
        return Err(Error::invalid("aggregation needs at least one client"));
    };
    let sum: f64 = returns.iter().map(|r| r.weight).sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("aggregation weights sum to {sum}, not 1")));
    }
    let mut order: Vec<&ClientReturn> = returns.iter().collect();
    order.sort_by_key(|r| r.id);
    let mut out: Vec<Tensor> = first.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    for r in order {
        if r.params.len() != out.len() {
            return Err(Error::shape(format!("client {} returned {} tensors, expected {}", r.id, r.params.len(), out.len())));
        }
        for (o, p) in out.iter_mut().zip(&r.params) {
            o.add_scaled(p, r.weight as f32)?;
        }
    }
    Ok(out)
}

/// One line of the per-round JSONL log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub lr: f64,
    pub clients: Vec<usize>,
    pub bytes_broadcast: u64,
    pub bytes_upload: u64,
    pub train_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<BTreeMap<String, AccuracyStats>>,
}

/// B, M and S initial accuracy keyed by their short names.
pub fn evaluate_presets(net: &Supernet, data: &FederatedData) -> Result<BTreeMap<String, AccuracyStats>> {
    Preset::ALL
        .iter()
        .map(|&p| Ok((p.short().to_string(), initial_accuracy(net, &net.space.preset(p), &data.test, &data.clients)?)))
        .collect()
}

/// Spec that client `client` trains in `round` under E-FedSup.
pub fn tier_spec(space: &ArchSpace, cfg: &FederationConfig, tier: Option<&Tier>, seed: u64, round: usize, client: usize) -> Result<SubnetSpec> {
    let budget = match tier {
        Some(t) => t.max_flops.resolve(space)?,
        None => space.flops(&space.biggest())?,
    };
    let r = if cfg.resample_tier_spec { round as u64 } else { 0 };
    space.sample_within_flops(budget, &mut stream(seed, Stream::TierSpec, &[r, client as u64]))
}

/// Runs `cfg.rounds` rounds from a fresh supernet. `on_round` sees each
/// report as soon as its round finishes.
pub fn run(
    cfg: &FederationConfig,
    space: &ArchSpace,
    seed: u64,
    data: &FederatedData,
    on_round: impl FnMut(&RoundReport) -> Result<()>,
) -> Result<Supernet> {
    let net = Supernet::build(space, cfg.norm, &mut stream(seed, Stream::Init, &[]))?;
    run_from(net, cfg, seed, data, on_round)
}

pub fn run_from(
    mut net: Supernet,
    cfg: &FederationConfig,
    seed: u64,
    data: &FederatedData,
    mut on_round: impl FnMut(&RoundReport) -> Result<()>,
) -> Result<Supernet> {
    cfg.validate()?;
    if data.clients.len() != cfg.clients {
        return Err(Error::Config(format!(
            "config expects {} clients, partition produced {}",
            cfg.clients,
            data.clients.len()
        )));
    }
    let space = net.space.clone();
    let tiers = assign_tiers(cfg.clients, &cfg.tiers);
    let full_bytes = 4 * net.num_params() as u64;
    for round in 0..cfg.rounds {
        let lr = lr_schedule(round, cfg);
        let ids = sample_clients(cfg.clients, cfg.participation, &mut stream(seed, Stream::ClientSampling, &[round as u64]))?;
        let base = &net;
        let outcomes: Vec<Option<(ClientReturn, u64, u64, f64)>> = ids
            .par_iter()
            .map(|&k| {
                let client = &data.clients[k];
                let weight = client.size() as f64;
                match cfg.algorithm {
                    Algorithm::FedSup | Algorithm::FedAvg => {
                        let res = local_train_fedsup(base, client, &data.train, cfg, lr, seed, round)?;
                        Ok(res.map(|r| (ClientReturn { id: k, weight, params: r.params }, full_bytes, full_bytes, r.mean_loss)))
                    }
                    Algorithm::EFedSup => {
                        let spec = tier_spec(&space, cfg, cfg.tiers.get(tiers[k]), seed, round, k)?;
                        let model = base.extract_submodel(&spec)?;
                        let bytes = model.byte_size();
                        let Some(r) = local_train_efedsup(&model, client, &data.train, cfg, lr, seed, round)? else {
                            return Ok(None);
                        };
                        let merged = base.merge_submodel(&r.params)?;
                        Ok(Some((ClientReturn { id: k, weight, params: merged.params }, bytes, bytes, r.mean_loss)))
                    }
                }
            })
            .collect::<Result<_>>()?;
        let mut returns = Vec::with_capacity(outcomes.len());
        let (mut down, mut up, mut loss) = (0u64, 0u64, 0.0);
        for (ret, b, u, l) in outcomes.into_iter().flatten() {
            down += b;
            up += u;
            loss += l;
            returns.push(ret);
        }
        if !returns.is_empty() {
            let sizes: Vec<usize> = returns.iter().map(|r| r.weight as usize).collect();
            for (r, p) in returns.iter_mut().zip(participation_weights(&sizes)) {
                r.weight = p;
            }
            loss /= returns.len() as f64;
            net.params = aggregate(&returns)?;
        }
        if !net.all_finite() {
            return Err(Error::invalid(format!("non-finite parameters after round {round}")));
        }
        let eval_now = cfg.eval_every > 0 && ((round + 1) % cfg.eval_every == 0 || round + 1 == cfg.rounds);
        let eval = if eval_now { Some(evaluate_presets(&net, data)?) } else { None };
        let report = RoundReport { round, lr, clients: ids, bytes_broadcast: down, bytes_upload: up, train_loss: loss, eval };
        if let Some(e) = &report.eval {
            info!(round, lr, loss, b = e["B"].acc, m = e["M"].acc, s = e["S"].acc, "round done");
        }
        on_round(&report)?;
    }
    Ok(net)
}
