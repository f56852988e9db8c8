//! Non-i.i.d. client partitioning and per-client test splits.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::data::Dataset;
use crate::error::{Error, Result};

const DIRICHLET_RETRIES: usize = 100;

/// One client's examples: indices into the shared train and test datasets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub id: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClientDataset {
    pub fn size(&self) -> usize {
        self.train.len()
    }
}

/// Shard partition. Examples are shuffled, truncated to a multiple of
/// `clients * shards`, stably sorted by label and cut into equal shards;
/// each client receives `shards` distinct shards.
pub fn partition_shards<R: Rng + ?Sized>(
    labels: &[usize],
    clients: usize,
    shards: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let total = clients * shards;
    if clients == 0 || shards == 0 {
        return Err(Error::invalid("shard partition needs at least one client and one shard"));
    }
    if total > labels.len() {
        return Err(Error::invalid(format!("{total} shards requested from {} examples", labels.len())));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(rng);
    let shard_size = labels.len() / total;
    let dropped = labels.len() - shard_size * total;
    if dropped > 0 {
        info!(dropped, "shard partition drops the remainder examples");
    }
    order.truncate(shard_size * total);
    order.sort_by_key(|&i| labels[i]);
    let mut shard_ids: Vec<usize> = (0..total).collect();
    shard_ids.shuffle(rng);
    Ok(shard_ids
        .chunks(shards)
        .map(|ids| {
            let mut own: Vec<usize> = ids.iter().flat_map(|&s| order[s * shard_size..(s + 1) * shard_size].iter().copied()).collect();
            own.sort_unstable();
            own
        })
        .collect())
}

/// Splits `n` items by `props` with largest-remainder rounding, so the
/// counts always sum to `n`.
fn apportion(n: usize, props: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = props.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut rest = n - counts.iter().sum::<usize>().min(n);
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    for &k in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[k] += 1;
        rest -= 1;
    }
    counts
}

fn dirichlet_once<R: Rng + ?Sized>(by_class: &[Vec<usize>], clients: usize, gamma: &Gamma<f64>, rng: &mut R) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); clients];
    for members in by_class {
        let mut members = members.clone();
        members.shuffle(rng);
        let mut props: Vec<f64> = (0..clients).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = props.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            props.iter_mut().for_each(|p| *p /= sum);
        } else {
            // every draw underflowed: give the class to one client
            let k = rng.random_range(0..clients);
            props.iter_mut().enumerate().for_each(|(i, p)| *p = f64::from(u8::from(i == k)));
        }
        let mut start = 0;
        for (k, c) in apportion(members.len(), &props).into_iter().enumerate() {
            out[k].extend_from_slice(&members[start..start + c]);
            start += c;
        }
    }
    out
}

/// Dirichlet partition: for every class, client proportions come from
/// `Dir(beta·1)` and that class's examples are dealt accordingly.
///
/// A draw that leaves some client empty is repeated (up to 100 times). If
/// clients are still empty after that, each takes one example from the
/// currently largest client.
pub fn partition_dirichlet<R: Rng + ?Sized>(
    labels: &[usize],
    num_classes: usize,
    clients: usize,
    beta: f64,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::invalid(format!("Dirichlet concentration must be positive, got {beta}")));
    }
    if clients == 0 || clients > labels.len() {
        return Err(Error::invalid(format!("cannot split {} examples across {clients} clients", labels.len())));
    }
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::invalid(format!("label {l} outside {num_classes} classes")));
        }
        by_class[l].push(i);
    }
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let mut parts = dirichlet_once(&by_class, clients, &gamma, rng);
    let mut attempt = 1;
    while parts.iter().any(Vec::is_empty) && attempt < DIRICHLET_RETRIES {
        parts = dirichlet_once(&by_class, clients, &gamma, rng);
        attempt += 1;
    }
    let empty = parts.iter().filter(|p| p.is_empty()).count();
    if empty > 0 {
        warn!(empty, attempts = attempt, "Dirichlet draws kept leaving clients empty; moving single examples");
        for k in 0..clients {
            if parts[k].is_empty() {
                let donor = (0..clients).max_by_key(|&j| (parts[j].len(), std::cmp::Reverse(j))).expect("clients > 0");
                let i = parts[donor].pop().expect("donor holds examples");
                parts[k].push(i);
            }
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

/// Per-client test sets with the same label histogram shape as the
/// client's train set: for each class the client holds, `ratio` times its
/// train count (at least one) examples are drawn from that class of the
/// test pool, without replacement within the client.
pub fn mirror_test_split<R: Rng + ?Sized>(
    train: &Dataset,
    parts: Vec<Vec<usize>>,
    test: &Dataset,
    ratio: f64,
    rng: &mut R,
) -> Result<Vec<ClientDataset>> {
    if test.num_classes != train.num_classes {
        return Err(Error::invalid("train and test pools disagree on the class count"));
    }
    let pool = test.by_class();
    let mut clients = Vec::with_capacity(parts.len());
    for (id, own) in parts.into_iter().enumerate() {
        let mut test_idx = Vec::new();
        for (c, &n) in train.histogram(&own).iter().enumerate() {
            if n == 0 {
                continue;
            }
            let avail = &pool[c];
            if avail.is_empty() {
                return Err(Error::invalid(format!("test pool has no examples of class {c}")));
            }
            let want = ((n as f64 * ratio).round() as usize).clamp(1, avail.len());
            test_idx.extend(index::sample(rng, avail.len(), want).into_iter().map(|j| avail[j]));
        }
        test_idx.sort_unstable();
        clients.push(ClientDataset { id, train: own, test: test_idx });
    }
    Ok(clients)
}

/// Uniform sample of `round(clients·ratio)` (at least one) distinct ids,
/// returned ascending.
pub fn sample_clients<R: Rng + ?Sized>(clients: usize, ratio: f64, rng: &mut R) -> Result<Vec<usize>> {
    if clients == 0 || !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid(format!("need clients > 0 and 0 < R <= 1, got {clients} and {ratio}")));
    }
    let k = ((clients as f64 * ratio).round() as usize).clamp(1, clients);
    let mut ids = index::sample(rng, clients, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}
