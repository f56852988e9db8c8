//! End-to-end acceptance checks. Runs as a plain binary (`harness = false`)
//! so every criterion reports one PASS/FAIL line, even when an earlier one
//! fails.
//!
//! ```text
//! cargo test -p fedsup-core --test acceptance
//! ```

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use fedsup::data::generate_synthetic;
use fedsup::eval::{personalize, FinetuneConfig};
use fedsup::experiment::{self, ExperimentConfig, RunOutput};
use fedsup::federation::{self, Algorithm, Budget, FederatedData, FederationConfig, RoundReport, Tier};
use fedsup::kernel::{
    conv2d_backward, conv2d_forward, global_avg_pool, global_avg_pool_backward, kl_distill_loss, linear_backward,
    linear_forward, relu, relu_backward, softmax_cross_entropy,
};
use fedsup::network::{self, NetworkShape};
use fedsup::norm::{pn_backward, pn_forward, PnState};
use fedsup::partition::{partition_dirichlet, partition_shards, ClientDataset};
use fedsup::rng::{stream, Stream};
use fedsup::{checkpoint, ArchSpace, NormKind, Phase, Preset, SubnetSpec, Supernet, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

fn uniform_f32(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| r.random_range(-1.0f32..1.0))
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------- gradients

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

/// Worst relative error between `analytic` and central differences of `f`.
fn fd_error(x: &Tensor<f64>, analytic: &[f64], f: impl Fn(&Tensor<f64>) -> f64) -> f64 {
    assert_eq!(x.len(), analytic.len(), "gradient length");
    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let up = f(&probe);
        probe.data_mut()[i] = orig - FD_STEP;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
    }
    worst
}

fn vec_tensor(v: &[f64]) -> Tensor<f64> {
    Tensor::new(vec![v.len()], v.to_vec()).expect("1-d")
}

fn grad_conv(seed: u64, depthwise: bool) -> f64 {
    let mut r = rng(seed);
    let stride = 1 + (seed as usize % 2);
    let (c, k) = (3, if seed % 3 == 0 { 5 } else { 3 });
    let x = uniform(&[2, c, 6, 6], &mut r);
    let (w, groups) = if depthwise { (uniform(&[c, 1, k, k], &mut r), c) } else { (uniform(&[4, c, k, k], &mut r), 1) };
    let pad = (k - 1) / 2;
    let out = conv2d_forward(&x, &w, stride, pad, groups).unwrap();
    let probe = uniform(out.shape(), &mut r);
    let (gx, gw) = conv2d_backward(&probe, &x, &w, stride, pad, groups).unwrap();
    let ex = fd_error(&x, gx.data(), |x| dot(&conv2d_forward(x, &w, stride, pad, groups).unwrap(), &probe));
    let ew = fd_error(&w, gw.data(), |w| dot(&conv2d_forward(&x, w, stride, pad, groups).unwrap(), &probe));
    ex.max(ew)
}

fn grad_linear(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (x, w, b) = (uniform(&[3, 5], &mut r), uniform(&[4, 5], &mut r), uniform(&[4], &mut r));
    let probe = uniform(&[3, 4], &mut r);
    let (gx, gw, gb) = linear_backward(&probe, &x, &w).unwrap();
    let f = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| dot(&linear_forward(x, w, b).unwrap(), &probe);
    fd_error(&x, gx.data(), |x| f(x, &w, &b))
        .max(fd_error(&w, gw.data(), |w| f(&x, w, &b)))
        .max(fd_error(&b, gb.data(), |b| f(&x, &w, b)))
}

fn grad_relu(seed: u64) -> f64 {
    let mut r = rng(seed);
    // keep inputs away from the kink so central differences never straddle it
    let x = Tensor::from_fn(&[2, 3, 4, 4], |_| {
        let v: f64 = r.random_range(0.01..1.0);
        if r.random_bool(0.5) {
            v
        } else {
            -v
        }
    });
    let probe = uniform(x.shape(), &mut r);
    let g = relu_backward(&probe, &x).unwrap();
    fd_error(&x, g.data(), |x| dot(&relu(x), &probe))
}

fn grad_pool(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = uniform(&[2, 3, 4, 5], &mut r);
    let probe = uniform(&[2, 3], &mut r);
    let g = global_avg_pool_backward(&probe, x.shape()).unwrap();
    fd_error(&x, g.data(), |x| dot(&global_avg_pool(x).unwrap(), &probe))
}

fn grad_ce(seed: u64, smoothing: f64) -> f64 {
    let mut r = rng(seed);
    let logits = uniform(&[4, 6], &mut r).map(|v| 3.0 * v);
    let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..6)).collect();
    let (_, g) = softmax_cross_entropy(&logits, &labels, smoothing).unwrap();
    fd_error(&logits, g.data(), |l| softmax_cross_entropy(l, &labels, smoothing).unwrap().0)
}

fn grad_kl(seed: u64) -> f64 {
    let mut r = rng(seed);
    let teacher = uniform(&[4, 6], &mut r).map(|v| 3.0 * v);
    let student = uniform(&[4, 6], &mut r).map(|v| 3.0 * v);
    let temperature = [1.0, 2.0, 4.0][seed as usize % 3];
    let (_, g) = kl_distill_loss(&teacher, &student, temperature).unwrap();
    fd_error(&student, g.data(), |s| kl_distill_loss(&teacher, s, temperature).unwrap().0)
}

fn grad_pn(seed: u64, phase: Phase) -> f64 {
    let mut r = rng(seed);
    let x = uniform(&[3, 4, 3, 3], &mut r).map(|v| 2.0 * v + 0.5);
    let alpha: Vec<f64> = (0..4).map(|_| r.random_range(-0.5..0.5)).collect();
    let gamma: Vec<f64> = (0..4).map(|_| r.random_range(0.5..1.5)).collect();
    let beta: Vec<f64> = (0..4).map(|_| r.random_range(-0.5..0.5)).collect();
    let eps = 1e-5;
    let (out, cache) = pn_forward(&x, &alpha, &gamma, &beta, eps, phase).unwrap();
    let probe = uniform(out.shape(), &mut r);
    let (gx, ga, gg, gb) = pn_backward(&probe, &x, &alpha, &gamma, eps, &cache).unwrap();
    let f = |x: &Tensor<f64>, a: &[f64], g: &[f64], b: &[f64]| dot(&pn_forward(x, a, g, b, eps, phase).unwrap().0, &probe);
    let e = [
        fd_error(&x, gx.data(), |x| f(x, &alpha, &gamma, &beta)),
        fd_error(&vec_tensor(&alpha), &ga, |a| f(&x, a.data(), &gamma, &beta)),
        fd_error(&vec_tensor(&gamma), &gg, |g| f(&x, &alpha, g.data(), &beta)),
        fd_error(&vec_tensor(&beta), &gb, |b| f(&x, &alpha, &gamma, b.data())),
    ];
    e.into_iter().fold(0.0, f64::max)
}

fn criterion_gradients() -> Check {
    const SEEDS: u64 = 20;
    let ops: Vec<(&str, Box<dyn Fn(u64) -> f64>)> = vec![
        ("conv", Box::new(|s| grad_conv(s, false))),
        ("depthwise conv", Box::new(|s| grad_conv(s, true))),
        ("linear", Box::new(grad_linear)),
        ("relu", Box::new(grad_relu)),
        ("avg pool", Box::new(grad_pool)),
        ("cross-entropy", Box::new(|s| grad_ce(s, 0.0))),
        ("cross-entropy smoothed", Box::new(|s| grad_ce(s, 0.1))),
        ("kl distill", Box::new(grad_kl)),
        ("pn train", Box::new(|s| grad_pn(s, Phase::Train))),
        ("pn eval", Box::new(|s| grad_pn(s, Phase::Eval))),
    ];
    let mut worst = (0.0, "");
    for (name, op) in &ops {
        for seed in 0..SEEDS {
            let e = op(1000 + seed);
            ensure(e < FD_TOL, || format!("{name} seed {seed}: relative error {e:.3e}"))?;
            if e > worst.0 {
                worst = (e, name);
            }
        }
    }
    Ok(format!("{} ops x {SEEDS} seeds, worst relative error {:.2e} ({})", ops.len(), worst.0, worst.1))
}

// ---------------------------------------------------------------- slicing

/// The maximal network written out layer by layer from the raw parameter
/// list, without views or gathering.
fn static_forward(space: &ArchSpace, p: &[Tensor<f32>], x: &Tensor<f32>, phase: Phase) -> Tensor<f32> {
    let eps = fedsup::norm::DEFAULT_EPS;
    let unit = |z: Tensor<f32>, at: usize| {
        relu(&pn_forward(&z, p[at + 1].data(), p[at + 2].data(), p[at + 3].data(), eps, phase).unwrap().0)
    };
    let stem = conv2d_forward(x, &p[0], space.stem.stride, (space.stem.kernel - 1) / 2, 1).unwrap();
    let mut h = unit(stem, 0);
    let mut at = 4;
    for stage in &space.stages {
        for l in 0..stage.max_layers {
            let stride = if l == 0 { stage.first_layer_stride } else { 1 };
            let k = p[at].shape()[2];
            let groups = h.shape()[1];
            h = unit(conv2d_forward(&h, &p[at], stride, (k - 1) / 2, groups).unwrap(), at);
            h = unit(conv2d_forward(&h, &p[at + 4], 1, 0, 1).unwrap(), at + 4);
            at += 8;
        }
    }
    linear_forward(&global_avg_pool(&h).unwrap(), &p[at], &p[at + 1]).unwrap()
}

fn criterion_slicing() -> Check {
    let space = ArchSpace::compact(10, 16);
    let net: Supernet = ok(Supernet::build(&space, NormKind::Pn, &mut rng(7)))?;
    let view = ok(net.view(&space.biggest()))?;
    let mut r = rng(8);
    for b in 0..10 {
        let x = uniform_f32(&[1 + b % 4, 3, 16, 16], &mut r);
        for phase in [Phase::Train, Phase::Eval] {
            let sliced = ok(net.forward(&view, &x, phase))?;
            let fixed = static_forward(&space, &net.params, &x, phase);
            let same = sliced.shape() == fixed.shape()
                && sliced.data().iter().zip(fixed.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(same, || format!("batch {b} ({phase:?}): sliced and static logits differ"))?;
        }
    }
    Ok("10 batches bitwise equal in train and eval mode".into())
}

// ---------------------------------------------------------------- fedavg

fn fedavg_lr(round: usize, base: f64, warmup: usize, rounds: usize) -> f64 {
    if round < warmup {
        return base * (round + 1) as f64 / warmup as f64;
    }
    let progress = (round - warmup) as f64 / (rounds - warmup).max(1) as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Plain FedAvg: every client runs momentum SGD on the full network from the
/// broadcast weights, then the server takes the size-weighted average.
fn fedavg_reference(space: &ArchSpace, data: &FederatedData, cfg: &FederationConfig, seed: u64) -> Vec<Tensor<f32>> {
    let shape = NetworkShape::new(space, &space.biggest(), NormKind::Pn).unwrap();
    let mut global = Supernet::build(space, NormKind::Pn, &mut stream(seed, Stream::Init, &[])).unwrap().params;
    let total: usize = data.clients.iter().map(|c| c.train.len()).sum();
    for round in 0..cfg.rounds {
        let lr = fedavg_lr(round, cfg.base_lr, cfg.warmup_rounds, cfg.rounds) as f32;
        let m = cfg.momentum as f32;
        let mut next: Vec<Tensor<f32>> = global.iter().map(|t| Tensor::zeros(t.shape())).collect();
        for client in &data.clients {
            let mut w = global.clone();
            let mut v: Vec<Tensor<f32>> = global.iter().map(|t| Tensor::zeros(t.shape())).collect();
            let mut order = client.train.clone();
            order.shuffle(&mut stream(seed, Stream::LocalTraining, &[round as u64, client.id as u64]));
            for batch in order.chunks(cfg.batch_size) {
                let x = data.train.batch(batch).unwrap();
                let (logits, cache) = network::forward(&shape, &w, &x, Phase::Train).unwrap();
                let (_, g_logits) = softmax_cross_entropy(&logits, &data.train.labels_of(batch), 0.0).unwrap();
                let grads = network::backward(&shape, &w, &cache, &g_logits).unwrap();
                for ((wt, vt), gt) in w.iter_mut().zip(&mut v).zip(&grads) {
                    for ((wi, vi), &gi) in wt.data_mut().iter_mut().zip(vt.data_mut()).zip(gt.data()) {
                        *vi = m * *vi + gi;
                        *wi -= lr * *vi;
                    }
                }
            }
            let p = (client.train.len() as f64 / total as f64) as f32;
            for (acc, wt) in next.iter_mut().zip(&w) {
                for (a, &wi) in acc.data_mut().iter_mut().zip(wt.data()) {
                    *a += p * wi;
                }
            }
        }
        global = next;
    }
    global
}

fn tiny_federation(classes: usize, per_class: usize, res: usize, clients: usize, seed: u64) -> FederatedData {
    let train = generate_synthetic(classes, per_class, res, 0.3, seed).unwrap();
    let test = fedsup::data::generate_synthetic_split(classes, 4, res, 0.3, seed, 1).unwrap();
    let parts = partition_shards(&train.labels, clients, 2, &mut stream(seed, Stream::Partition, &[])).unwrap();
    let clients = fedsup::partition::mirror_test_split(&train, parts, &test, 0.25, &mut stream(seed, Stream::Partition, &[1])).unwrap();
    FederatedData { train, test, clients }
}

fn criterion_fedavg() -> Check {
    let seed = 11;
    let space = ArchSpace::compact(4, 8);
    let data = tiny_federation(4, 10, 8, 4, seed);
    let cfg = FederationConfig {
        algorithm: Algorithm::FedSup,
        clients: 4,
        participation: 1.0,
        local_epochs: 1,
        rounds: 3,
        children: 1,
        pin_child: Some(Preset::Biggest),
        batch_size: 4,
        clip_norm: None,
        eval_every: 0,
        ..FederationConfig::default()
    };
    let net = ok(federation::run(&cfg, &space, seed, &data, |_| Ok(())))?;
    let reference = fedavg_reference(&space, &data, &cfg, seed);
    let mut compared = 0;
    for (i, (a, b)) in net.params.iter().zip(&reference).enumerate() {
        ensure(a.shape() == b.shape(), || format!("tensor {i} shape {:?} vs {:?}", a.shape(), b.shape()))?;
        for (j, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
            ensure(x.to_bits() == y.to_bits(), || format!("tensor {i}[{j}]: fedsup {x} vs fedavg {y}"))?;
        }
        compared += a.len();
    }
    let init = ok(Supernet::<f32>::build(&space, NormKind::Pn, &mut stream(seed, Stream::Init, &[])))?;
    ensure(init.params != net.params, || "training did not move the parameters".into())?;
    Ok(format!("{compared} parameters bitwise equal after 3 rounds"))
}

// ---------------------------------------------------------------- flops

struct MacCounter {
    macs: u64,
}

impl MacCounter {
    /// Dense direct convolution over an explicitly zero-padded input; every
    /// multiply-add executed is counted.
    fn conv(&mut self, x: &Tensor<f32>, w: &Tensor<f32>, stride: usize, groups: usize) -> Tensor<f32> {
        let (c, h, wd) = (x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, cig, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        let pad = (k - 1) / 2;
        let (hp, wp) = (h + 2 * pad, wd + 2 * pad);
        let mut padded = vec![0.0f32; c * hp * wp];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..wd {
                    padded[(ch * hp + y + pad) * wp + xx + pad] = x.data()[(ch * h + y) * wd + xx];
                }
            }
        }
        let (oh, ow) = ((hp - k) / stride + 1, (wp - k) / stride + 1);
        let cog = co / groups;
        let mut out = vec![0.0f32; co * oh * ow];
        for o in 0..co {
            let g = o / cog;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for ci in 0..cig {
                        let ic = g * cig + ci;
                        for ky in 0..k {
                            for kx in 0..k {
                                acc += padded[(ic * hp + oy * stride + ky) * wp + ox * stride + kx]
                                    * w.data()[((o * cig + ci) * k + ky) * k + kx];
                                self.macs += 1;
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        Tensor::new(vec![1, co, oh, ow], out).unwrap()
    }

    fn linear(&mut self, x: &[f32], w: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f32> {
        let (dout, din) = (w.shape()[0], w.shape()[1]);
        (0..dout)
            .map(|o| {
                let mut acc = 0.0f32;
                for i in 0..din {
                    acc += x[i] * w.data()[o * din + i];
                    self.macs += 1;
                }
                acc + b.data()[o]
            })
            .collect()
    }
}

/// Runs one sample through a materialized child, counting multiply-adds.
fn counted_forward(space: &ArchSpace, spec: &SubnetSpec, p: &[Tensor<f32>], x: &Tensor<f32>) -> (u64, Vec<f32>) {
    let mut mc = MacCounter { macs: 0 };
    let eps = fedsup::norm::DEFAULT_EPS;
    let unit = |z: Tensor<f32>, at: usize| {
        relu(&pn_forward(&z, p[at + 1].data(), p[at + 2].data(), p[at + 3].data(), eps, Phase::Eval).unwrap().0)
    };
    let mut h = unit(mc.conv(x, &p[0], space.stem.stride, 1), 0);
    let mut at = 4;
    for (stage, choice) in space.stages.iter().zip(&spec.stages) {
        for l in 0..choice.depth {
            let stride = if l == 0 { stage.first_layer_stride } else { 1 };
            let groups = h.shape()[1];
            h = unit(mc.conv(&h, &p[at], stride, groups), at);
            h = unit(mc.conv(&h, &p[at + 4], 1, 1), at + 4);
            at += 8;
        }
    }
    let feats = global_avg_pool(&h).unwrap();
    let logits = mc.linear(feats.data(), &p[at], &p[at + 1]);
    (mc.macs, logits)
}

fn criterion_flops() -> Check {
    let mut space = ArchSpace::default_space();
    space.input_resolution = 8;
    let net: Supernet = ok(Supernet::build(&space, NormKind::Pn, &mut rng(21)))?;
    let mut r = rng(22);
    let mut specs = vec![space.smallest(), space.biggest()];
    specs.extend((0..10).map(|_| space.sample_random(&mut r)));
    for (i, spec) in specs.iter().enumerate() {
        let model = ok(net.extract_submodel(spec))?;
        let x = uniform_f32(&[1, 3, 8, 8], &mut r);
        let (counted, logits) = counted_forward(&space, spec, &model.params, &x);
        let analytic = ok(space.flops(spec))?;
        ensure(counted == analytic, || format!("spec {i} ({spec}): counted {counted} MACs, flops() says {analytic}"))?;
        // the counted pass must be the same network, not just the same count
        let reference = ok(model.forward(&x, Phase::Eval))?;
        let close = reference.data().iter().zip(&logits).all(|(a, b)| (a - b).abs() <= 1e-4 * (1.0 + a.abs()));
        ensure(close, || format!("spec {i}: instrumented logits disagree with the network"))?;
    }
    Ok(format!("{} specs at 8x8, counted MACs equal flops()", specs.len()))
}

// ---------------------------------------------------------------- pn

fn rows_equal(a: &Tensor<f32>, i: usize, b: &Tensor<f32>, j: usize) -> bool {
    let c = a.shape()[1];
    a.data()[i * c..(i + 1) * c].iter().zip(&b.data()[j * c..(j + 1) * c]).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// True when every sample's eval logits are identical alone and in batch.
fn batch_independent(net: &Supernet, x: &Tensor<f32>) -> std::result::Result<bool, String> {
    let view = ok(net.view(&net.space.biggest()))?;
    let together = ok(net.forward(&view, x, Phase::Eval))?;
    let n = x.shape()[0];
    let per = x.len() / n;
    for i in 0..n {
        let one = ok(Tensor::new(vec![1, 3, 16, 16], x.data()[i * per..(i + 1) * per].to_vec()))?;
        let alone = ok(net.forward(&view, &one, Phase::Eval))?;
        if !rows_equal(&together, i, &alone, 0) {
            return Ok(false);
        }
    }
    Ok(true)
}

fn criterion_pn() -> Check {
    let space = ArchSpace::compact(10, 16);
    let net: Supernet = ok(Supernet::build(&space, NormKind::Pn, &mut rng(31)))?;
    let mut r = rng(32);
    let before = ok(checkpoint::to_bytes(&net))?;
    let view = ok(net.view(&space.biggest()))?;
    let mut state = PnState::<f32>::new(16);
    state.alpha.iter_mut().for_each(|a| *a = r.random_range(-0.5..0.5));
    let state_before = state.to_bytes();
    for q in 0..100 {
        let x = uniform_f32(&[1 + q % 5, 3, 16, 16], &mut r);
        ok(net.forward(&view, &x, Phase::Eval))?;
        ok(state.forward(&uniform_f32(&[1 + q % 5, 16, 4, 4], &mut r), Phase::Eval))?;
    }
    ensure(ok(checkpoint::to_bytes(&net))? == before, || "supernet bytes changed after eval queries".into())?;
    ensure(state.to_bytes() == state_before, || "PN state bytes changed after eval queries".into())?;

    let x = uniform_f32(&[8, 3, 16, 16], &mut r);
    ensure(batch_independent(&net, &x)?, || "PN eval output depends on the batch".into())?;
    let sbn: Supernet = ok(Supernet::build(&space, NormKind::Sbn, &mut rng(31)))?;
    // a single sample cannot be normalized by batch statistics at all, so
    // compare two different batches containing the same first sample
    let sview = ok(sbn.view(&space.biggest()))?;
    let other = uniform_f32(&[8, 3, 16, 16], &mut r);
    let mut mixed = other.clone();
    let per = x.len() / 8;
    mixed.data_mut()[..per].copy_from_slice(&x.data()[..per]);
    let a = ok(sbn.forward(&sview, &x, Phase::Eval))?;
    let b = ok(sbn.forward(&sview, &mixed, Phase::Eval))?;
    ensure(!rows_equal(&a, 0, &b, 0), || "sBN output did not change with the batch".into())?;
    let pa = ok(net.forward(&view, &x, Phase::Eval))?;
    let pb = ok(net.forward(&view, &mixed, Phase::Eval))?;
    ensure(rows_equal(&pa, 0, &pb, 0), || "PN output changed with the batch".into())?;
    Ok("state bytes unchanged after 100 queries; PN rows batch-independent, sBN rows not".into())
}

// ---------------------------------------------------------------- comm

fn comm_round(space: &ArchSpace, data: &FederatedData, algorithm: Algorithm, tiers: Vec<Tier>) -> std::result::Result<RoundReport, String> {
    let cfg = FederationConfig {
        algorithm,
        clients: data.clients.len(),
        participation: 1.0,
        rounds: 1,
        batch_size: 2,
        tiers,
        eval_every: 0,
        ..FederationConfig::default()
    };
    let mut reports = Vec::new();
    ok(federation::run(&cfg, space, 41, data, |r| {
        reports.push(r.clone());
        Ok(())
    }))?;
    reports.pop().ok_or_else(|| "no round report".to_string())
}

fn criterion_comm() -> Check {
    let space = ArchSpace::default_space();
    let train = ok(generate_synthetic(space.num_classes, 1, space.input_resolution, 0.3, 40))?;
    let test = train.clone();
    let clients = (0..2).map(|k| ClientDataset { id: k, train: vec![2 * k, 2 * k + 1], test: vec![] }).collect();
    let data = FederatedData { train, test, clients };
    let small_tier = vec![Tier { fraction: 1.0, max_flops: Budget::Preset(Preset::Smallest) }];
    let full = comm_round(&space, &data, Algorithm::FedSup, vec![])?;
    let small = comm_round(&space, &data, Algorithm::EFedSup, small_tier)?;
    let (pb, ps) = (ok(space.param_count(&space.biggest()))?, ok(space.param_count(&space.smallest()))?);
    let (fb, fs) = (ok(space.flops(&space.biggest()))?, ok(space.flops(&space.smallest()))?);
    let exact = small.bytes_broadcast as u128 * pb as u128 == full.bytes_broadcast as u128 * ps as u128;
    ensure(exact, || {
        format!("byte ratio {}/{} does not equal param ratio {ps}/{pb}", small.bytes_broadcast, full.bytes_broadcast)
    })?;
    let ratio = small.bytes_broadcast as f64 / full.bytes_broadcast as f64;
    let flops_ratio = fb as f64 / fs as f64;
    let target = 0.78 / 1.96;
    let detail = format!(
        "byte ratio = param ratio = {ratio:.4} (reference {target:.3} ± 15%); flops(B)/flops(S) = {flops_ratio:.2} (reference 3.34 ± 0.7)"
    );
    ensure((ratio - target).abs() <= 0.15 * target, || format!("{detail}: byte ratio outside the band"))?;
    ensure((flops_ratio - 13.36 / 4.0).abs() <= 0.7, || format!("{detail}: flops ratio outside the band"))?;
    Ok(detail)
}

// ---------------------------------------------------------------- desk run

const DESK_CONFIG: &str = include_str!("../../../configs/desk.json");
const DESK_SEEDS: [u64; 3] = [1, 2, 3];
const DESK_LIMIT: Duration = Duration::from_secs(600);

struct DeskRun {
    seed: u64,
    cfg: ExperimentConfig,
    out: RunOutput,
    elapsed: Duration,
}

fn desk_runs() -> &'static std::result::Result<Vec<DeskRun>, String> {
    static RUNS: OnceLock<std::result::Result<Vec<DeskRun>, String>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let dir = ok(tempfile::tempdir())?;
        DESK_SEEDS
            .iter()
            .map(|&seed| {
                let mut cfg = ok(ExperimentConfig::from_json(DESK_CONFIG))?;
                cfg.seed = seed;
                let start = Instant::now();
                let out = ok(experiment::run_experiment(&cfg, &dir.path().join(seed.to_string()), 1))?;
                Ok(DeskRun { seed, cfg, out, elapsed: start.elapsed() })
            })
            .collect()
    })
}

fn criterion_desk() -> Check {
    let runs = desk_runs().as_ref().map_err(Clone::clone)?;
    let chance = 1.0 / 10.0;
    let mut lines = Vec::new();
    let mut big_wins = 0;
    let mut failures = Vec::new();
    for run in runs {
        let c = &run.out.eval.children;
        let (b, s) = (c["B"].initial.acc, c["S"].initial.acc);
        lines.push(format!("seed {}: B {b:.3} S {s:.3} in {:.0}s", run.seed, run.elapsed.as_secs_f64()));
        if b < 5.0 * chance || s < 5.0 * chance {
            failures.push(format!("seed {} below 5x chance", run.seed));
        }
        if run.elapsed > DESK_LIMIT {
            failures.push(format!("seed {} took {:.0}s", run.seed, run.elapsed.as_secs_f64()));
        }
        big_wins += usize::from(b >= s);
    }
    if big_wins < 2 {
        failures.push(format!("B >= S in only {big_wins} of 3 seeds"));
    }
    let detail = lines.join("; ");
    ensure(failures.is_empty(), || format!("{detail}; {}", failures.join(", ")))?;
    Ok(detail)
}

fn criterion_personalization() -> Check {
    let runs = desk_runs().as_ref().map_err(Clone::clone)?;
    let mut lines = Vec::new();
    for run in runs {
        let mut gains = BTreeMap::new();
        for (name, acc) in &run.out.eval.children {
            let (init, pers) = (acc.initial.acc, acc.personalized.acc);
            ensure(pers >= init, || format!("seed {} child {name}: personalized {pers:.3} < initial {init:.3}", run.seed))?;
            gains.insert(name.clone(), pers - init);
        }
        let gains: Vec<String> = gains.iter().map(|(n, g)| format!("{n} {g:+.3}")).collect();
        lines.push(format!("seed {} gains {}", run.seed, gains.join(" ")));

        // fine-tuning must leave every body tensor untouched
        let prepared = ok(experiment::prepare(&run.cfg))?;
        let net = &run.out.net;
        let ft: FinetuneConfig = run.cfg.finetune();
        for p in Preset::ALL {
            let spec = net.space.preset(p);
            let base = ok(net.extract_submodel(&spec))?;
            let hi = base.head_index();
            for client in &prepared.data.clients {
                let tuned = ok(personalize(net, &spec, client, &prepared.data.train, &prepared.data.test, &ft, run.seed))?;
                let frozen = tuned.model.params[..hi]
                    .iter()
                    .zip(&base.params[..hi])
                    .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
                ensure(frozen, || format!("seed {} {p:?} client {}: body parameters changed", run.seed, client.id))?;
            }
        }
    }
    Ok(format!("{}; bodies bitwise frozen", lines.join("; ")))
}

// ---------------------------------------------------------------- partitions

fn check_disjoint_exhaustive(parts: &[Vec<usize>], n: usize, must_cover: bool) -> std::result::Result<usize, String> {
    let mut seen = vec![false; n];
    for (k, p) in parts.iter().enumerate() {
        for &i in p {
            ensure(!seen[i], || format!("example {i} assigned twice (client {k})"))?;
            seen[i] = true;
        }
    }
    let covered = seen.iter().filter(|&&s| s).count();
    ensure(!must_cover || covered == n, || format!("{} examples unassigned", n - covered))?;
    Ok(covered)
}

fn histogram(labels: &[usize], part: &[usize], classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    part.iter().for_each(|&i| h[labels[i]] += 1);
    h
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn criterion_partitions() -> Check {
    // shards: 100 classes x 500 examples, 100 clients x 2 shards of 250
    let labels: Vec<usize> = (0..50_000).map(|i| i % 100).collect();
    for seed in 0..5 {
        let (n, s) = (100, 2);
        let parts = ok(partition_shards(&labels, n, s, &mut rng(seed)))?;
        check_disjoint_exhaustive(&parts, labels.len(), true)?;
        let shard = labels.len() / (n * s);
        for (k, p) in parts.iter().enumerate() {
            ensure(p.len() == s * shard, || format!("client {k} holds {} examples, expected {}", p.len(), s * shard))?;
            // shards align with classes here, so counts come in whole shards
            let h = histogram(&labels, p, 100);
            let whole: usize = h.iter().map(|&c| c / shard).sum();
            ensure(h.iter().all(|&c| c % shard == 0) && whole == s, || format!("client {k} histogram is not {s} whole shards"))?;
        }
        // a remainder that does not divide evenly is dropped
        let odd: Vec<usize> = (0..50_037).map(|i| i % 100).collect();
        let parts = ok(partition_shards(&odd, n, s, &mut rng(seed)))?;
        let covered = check_disjoint_exhaustive(&parts, odd.len(), false)?;
        ensure(covered == 50_000 && parts.iter().all(|p| p.len() == 500), || "remainder handling".into())?;
    }

    // dirichlet: 10 classes x 500 examples, 10 clients
    let labels: Vec<usize> = (0..5_000).map(|i| i % 10).collect();
    let global = histogram(&labels, &(0..labels.len()).collect::<Vec<_>>(), 10);
    let mut worst_uniform: f64 = 0.0;
    let mut degenerate = Vec::new();
    for seed in 0..10 {
        for beta in [0.01, 0.5, 100.0] {
            let parts = ok(partition_dirichlet(&labels, 10, 10, beta, &mut rng(100 + seed)))?;
            check_disjoint_exhaustive(&parts, labels.len(), true)?;
            let mut per_class = vec![0; 10];
            for p in &parts {
                for (c, v) in histogram(&labels, p, 10).into_iter().enumerate() {
                    per_class[c] += v;
                }
            }
            ensure(per_class == global, || format!("beta {beta} seed {seed}: class counts not conserved"))?;
            if beta == 100.0 {
                for p in &parts {
                    let h = histogram(&labels, p, 10);
                    let dev: f64 = h
                        .iter()
                        .zip(&global)
                        .map(|(&a, &g)| (a as f64 / p.len() as f64 - g as f64 / labels.len() as f64).abs())
                        .sum();
                    worst_uniform = worst_uniform.max(dev);
                }
            }
            if beta == 0.01 {
                let top = parts.iter().map(|p| *histogram(&labels, p, 10).iter().max().unwrap() as f64 / p.len() as f64);
                degenerate.push(top.collect::<Vec<_>>());
            }
        }
    }
    ensure(worst_uniform <= 0.2, || format!("beta=100: client histogram deviates {worst_uniform:.3} (L1) from the global one"))?;
    // the median is taken over every client of every simulated seed
    let per_seed: Vec<f64> = degenerate.iter().map(|d| median(d.clone())).collect();
    let pooled = median(degenerate.concat());
    let (lo, hi) = (per_seed.iter().copied().fold(1.0, f64::min), per_seed.iter().copied().fold(0.0, f64::max));
    ensure(pooled >= 0.9, || format!("beta=0.01: median dominant-class share only {pooled:.3}"))?;
    Ok(format!(
        "shards exact; dirichlet conserves classes; beta=100 worst L1 deviation {worst_uniform:.3}; \
         beta=0.01 median top-class share {pooled:.3} over 10 seeds (per-seed {lo:.2}..{hi:.2})"
    ))
}

// ---------------------------------------------------------------- determinism

fn criterion_determinism() -> Check {
    let cfg_text = r#"{
        "dataset": {"kind": "synthetic", "classes": 4, "per_class": 12, "resolution": 8, "noise": 0.3, "test_per_class": 6},
        "partition": {"dirichlet": 0.5},
        "federation": {"clients": 6, "participation": 0.5, "rounds": 3, "batch_size": 4, "warmup_rounds": 2, "eval_every": 1},
        "eval": {"finetune_epochs": 2, "pareto_samples": 3},
        "seed": 5
    }"#;
    let cfg = ok(ExperimentConfig::from_json(cfg_text))?;
    let dir = ok(tempfile::tempdir())?;
    let hashes = |name: &str, threads: usize| -> std::result::Result<(String, String, Vec<u8>), String> {
        let out = dir.path().join(name);
        let run = ok(experiment::run_experiment(&cfg, &out, threads))?;
        let eval = ok(std::fs::read(out.join("eval.json")))?;
        Ok((run.manifest.rounds_sha256, run.manifest.checkpoint_sha256, eval))
    };
    let a = hashes("a", 2)?;
    let b = hashes("b", 2)?;
    ensure(a == b, || "two runs with the same config, seed and threads differ".into())?;
    let c = hashes("c", 1)?;
    ensure(a == c, || "one and two threads disagree".into())?;
    Ok(format!("rounds {} checkpoint {} (also equal across thread counts)", &a.0[..12], &a.1[..12]))
}

// ---------------------------------------------------------------- driver

fn main() {
    let criteria: [(u32, &str, fn() -> Check); 10] = [
        (1, "gradient suite", criterion_gradients),
        (2, "slicing identity", criterion_slicing),
        (3, "fedavg equivalence", criterion_fedavg),
        (4, "flops oracle", criterion_flops),
        (5, "pn privacy and determinism", criterion_pn),
        (6, "communication accounting", criterion_comm),
        (7, "desk-scale learning", criterion_desk),
        (8, "personalization", criterion_personalization),
        (9, "partitioners", criterion_partitions),
        (10, "determinism", criterion_determinism),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {id} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {id} {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
