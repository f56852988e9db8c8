//! Shared parameter store at the maximal dimensions of the search space.
//!
//! A child never owns parameters. Its [`SubnetView`] lists, for each tensor of
//! the child's parameter list, a box inside one supernet tensor: prefix
//! channel ranges, the centred `k×k` window of the largest kernel, and the
//! first `d` layers of each stage. Gathering the boxes gives a
//! [`MaterializedModel`]; scattering gradients back through the same boxes
//! keeps every update local to the child.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::arch::{ArchSpace, SubnetSpec};
use crate::error::{Error, Result};
use crate::kernel::{kl_distill_loss, softmax_cross_entropy};
use crate::network::{self, ForwardCache, NetworkShape, LAYER_TENSORS, STEM_TENSORS};
use crate::norm::{NormKind, Phase};
use crate::tensor::{Scalar, Tensor};

/// Axis-aligned region of one supernet tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub tensor: usize,
    pub start: Vec<usize>,
    pub len: Vec<usize>,
}

impl Region {
    fn whole(tensor: usize, shape: &[usize]) -> Self {
        Self { tensor, start: vec![0; shape.len()], len: shape.to_vec() }
    }

    fn prefix(tensor: usize, len: Vec<usize>) -> Self {
        Self { tensor, start: vec![0; len.len()], len }
    }

    /// Start offsets of the contiguous runs (along the last axis) covered by
    /// this region inside a row-major tensor of `shape`.
    fn runs(&self, shape: &[usize]) -> (Vec<usize>, usize) {
        let nd = shape.len();
        let mut strides = vec![1; nd];
        for i in (0..nd.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * shape[i + 1];
        }
        let run = self.len[nd - 1];
        let mut offsets = vec![self.start[nd - 1]];
        for axis in (0..nd - 1).rev() {
            let mut next = Vec::with_capacity(offsets.len() * self.len[axis]);
            for i in 0..self.len[axis] {
                let base = (self.start[axis] + i) * strides[axis];
                next.extend(offsets.iter().map(|o| base + o));
            }
            offsets = next;
        }
        offsets.sort_unstable();
        (offsets, run)
    }

    fn contains(&self, index: &[usize]) -> bool {
        index.iter().zip(self.start.iter().zip(&self.len)).all(|(&i, (&s, &l))| i >= s && i < s + l)
    }
}

/// Index ranges of one child inside the supernet.
#[derive(Debug, Clone, PartialEq)]
pub struct SubnetView {
    pub spec: SubnetSpec,
    pub shape: NetworkShape,
    /// One region per tensor of the child's parameter list.
    pub regions: Vec<Region>,
}

impl SubnetView {
    /// True when the flat element `offset` of supernet tensor `tensor` is
    /// read by this child.
    pub fn covers(&self, tensor: usize, shape: &[usize], offset: usize) -> bool {
        let mut idx = vec![0; shape.len()];
        let mut rem = offset;
        for (i, &d) in shape.iter().enumerate().rev() {
            idx[i] = rem % d;
            rem /= d;
        }
        self.regions.iter().any(|r| r.tensor == tensor && r.contains(&idx))
    }
}

/// Loss applied to one child during local training.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossSpec<'a, T = f32> {
    pub label_smoothing: f64,
    /// Detached teacher logits, temperature and the weight of the KL term.
    pub distill: Option<Distill<'a, T>>,
}

#[derive(Debug, Clone, Copy)]
pub struct Distill<'a, T> {
    pub teacher: &'a Tensor<T>,
    pub temperature: f64,
    pub balance: f64,
}

/// Outcome of one child's forward/backward pass.
#[derive(Debug, Clone)]
pub struct ChildPass<T> {
    pub loss: T,
    pub hard_loss: T,
    pub distill_loss: T,
    pub logits: Tensor<T>,
}

/// Evaluates `loss` on `logits`; returns `(pass, grad_logits)`.
pub fn child_loss<T: Scalar>(
    logits: Tensor<T>,
    labels: &[usize],
    loss: &LossSpec<'_, T>,
) -> Result<(ChildPass<T>, Tensor<T>)> {
    let (hard, mut grad) = softmax_cross_entropy(&logits, labels, loss.label_smoothing)?;
    let Some(d) = loss.distill else {
        return Ok((ChildPass { loss: hard, hard_loss: hard, distill_loss: T::zero(), logits }, grad));
    };
    let (kl, g_kl) = kl_distill_loss(d.teacher, &logits, d.temperature)?;
    let bal = T::of(d.balance);
    let keep = T::one() - bal;
    grad.scale(keep);
    grad.add_scaled(&g_kl, bal)?;
    let total = keep * hard + bal * kl;
    Ok((ChildPass { loss: total, hard_loss: hard, distill_loss: kl, logits }, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Supernet<T = f32> {
    pub space: ArchSpace,
    pub norm: NormKind,
    pub params: Vec<Tensor<T>>,
}

/// A contiguous copy of exactly one child's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterializedModel<T = f32> {
    pub spec: SubnetSpec,
    pub shape: NetworkShape,
    pub params: Vec<Tensor<T>>,
}

impl<T: Scalar> Supernet<T> {
    /// He-normal init for convolutions (fan-in of the maximal tensor), uniform
    /// `±1/sqrt(fan_in)` head weights, zero head bias, normalization at
    /// `α = 0, γ = 1, β = 0`.
    pub fn build<R: Rng + ?Sized>(space: &ArchSpace, norm: NormKind, rng: &mut R) -> Result<Self> {
        space.validate()?;
        let shape = NetworkShape::new(space, &space.biggest(), norm)?;
        let head = shape.head_index();
        let mut params = Vec::with_capacity(shape.num_tensors());
        for (i, s) in shape.tensor_shapes().into_iter().enumerate() {
            let t = if i == head {
                let bound = 1.0 / (s[1] as f64).sqrt();
                let dist = Uniform::new(-bound, bound).expect("valid bound");
                Tensor::from_fn(&s, |_| T::of(dist.sample(rng)))
            } else if i == head + 1 {
                Tensor::zeros(&s)
            } else if s.len() == 4 {
                let fan_in = (s[1] * s[2] * s[3]) as f64;
                let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
                Tensor::from_fn(&s, |_| T::of(dist.sample(rng)))
            } else {
                // α, γ, β triples follow each conv weight
                let gamma = (i - if i < STEM_TENSORS { 0 } else { STEM_TENSORS }) % 4 == 2;
                Tensor::full(&s, if gamma { T::one() } else { T::zero() })
            };
            params.push(t);
        }
        Ok(Self { space: space.clone(), norm, params })
    }

    /// Tensor shapes of a supernet over `space`.
    pub fn build_shapes(space: &ArchSpace, norm: NormKind) -> Result<Vec<Vec<usize>>> {
        space.validate()?;
        Ok(NetworkShape::new(space, &space.biggest(), norm)?.tensor_shapes())
    }

    pub fn full_shape(&self) -> Result<NetworkShape> {
        NetworkShape::new(&self.space, &self.space.biggest(), self.norm)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| Tensor::zeros(p.shape())).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(Tensor::all_finite)
    }

    /// Supernet tensor index of the first tensor of layer `index` in `stage`.
    fn layer_base(&self, stage: usize, index: usize) -> usize {
        let before: usize = self.space.stages[..stage].iter().map(|s| s.max_layers).sum();
        STEM_TENSORS + LAYER_TENSORS * (before + index)
    }

    pub fn view(&self, spec: &SubnetSpec) -> Result<SubnetView> {
        let shape = NetworkShape::new(&self.space, spec, self.norm)?;
        let kmax = self.space.max_kernel();
        let mut regions = Vec::with_capacity(shape.num_tensors());
        for i in 0..STEM_TENSORS {
            regions.push(Region::whole(i, self.params[i].shape()));
        }
        for d in &shape.layers {
            let base = self.layer_base(d.stage, d.index);
            let off = (kmax - d.kernel) / 2;
            let (ci, co, k) = (d.in_channels, d.out_channels, d.kernel);
            regions.push(Region { tensor: base, start: vec![0, 0, off, off], len: vec![ci, 1, k, k] });
            for t in 1..4 {
                regions.push(Region::prefix(base + t, vec![ci]));
            }
            regions.push(Region::prefix(base + 4, vec![co, ci, 1, 1]));
            for t in 5..8 {
                regions.push(Region::prefix(base + t, vec![co]));
            }
        }
        let head = self.params.len() - 2;
        regions.push(Region::prefix(head, vec![self.space.num_classes, shape.head_in()]));
        regions.push(Region::whole(head + 1, self.params[head + 1].shape()));
        Ok(SubnetView { spec: spec.clone(), shape, regions })
    }

    fn gather(&self, view: &SubnetView) -> Vec<Tensor<T>> {
        view.regions
            .iter()
            .map(|r| {
                let src = &self.params[r.tensor];
                let (offsets, run) = r.runs(src.shape());
                let mut data = Vec::with_capacity(offsets.len() * run);
                for o in offsets {
                    data.extend_from_slice(&src.data()[o..o + run]);
                }
                Tensor::new(r.len.clone(), data).expect("region inside tensor")
            })
            .collect()
    }

    /// Adds `values` (laid out as the child's parameter list) into `target`
    /// at the view's regions, scaled by `alpha`; `assign` overwrites instead.
    fn scatter(target: &mut [Tensor<T>], view: &SubnetView, values: &[Tensor<T>], assign: bool) -> Result<()> {
        if values.len() != view.regions.len() {
            return Err(Error::shape(format!(
                "view has {} regions, got {} tensors",
                view.regions.len(),
                values.len()
            )));
        }
        for (r, v) in view.regions.iter().zip(values) {
            v.expect_shape(&r.len, "scatter")?;
            let dst = &mut target[r.tensor];
            let (offsets, run) = r.runs(dst.shape());
            let dd = dst.data_mut();
            for (o, chunk) in offsets.into_iter().zip(v.data().chunks_exact(run)) {
                if assign {
                    dd[o..o + run].copy_from_slice(chunk);
                } else {
                    for (d, &s) in dd[o..o + run].iter_mut().zip(chunk) {
                        *d += s;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn forward(&self, view: &SubnetView, batch: &Tensor<T>, phase: Phase) -> Result<Tensor<T>> {
        let params = self.gather(view);
        network::predict(&view.shape, &params, batch, phase)
    }

    /// Pooled features entering the head.
    pub fn features(&self, view: &SubnetView, batch: &Tensor<T>, phase: Phase) -> Result<Tensor<T>> {
        let params = self.gather(view);
        network::features(&view.shape, &params, batch, phase)
    }

    /// Runs one child in training mode and adds its gradients into `grads`
    /// (shaped like `self.params`) at the view's regions only.
    pub fn backward_accumulate(
        &self,
        view: &SubnetView,
        batch: &Tensor<T>,
        labels: &[usize],
        loss: &LossSpec<'_, T>,
        grads: &mut [Tensor<T>],
    ) -> Result<ChildPass<T>> {
        if grads.len() != self.params.len() {
            return Err(Error::shape("gradient accumulator does not match the supernet"));
        }
        let params = self.gather(view);
        let (logits, cache): (Tensor<T>, ForwardCache<T>) =
            network::forward(&view.shape, &params, batch, Phase::Train)?;
        let (pass, g_logits) = child_loss(logits, labels, loss)?;
        let child_grads = network::backward(&view.shape, &params, &cache, &g_logits)?;
        Self::scatter(grads, view, &child_grads, false)?;
        Ok(pass)
    }

    pub fn extract_submodel(&self, spec: &SubnetSpec) -> Result<MaterializedModel<T>> {
        let view = self.view(spec)?;
        let params = self.gather(&view);
        Ok(MaterializedModel { spec: spec.clone(), shape: view.shape, params })
    }

    /// Copy of `self` with the child's regions replaced by `trained`.
    pub fn merge_submodel(&self, trained: &MaterializedModel<T>) -> Result<Supernet<T>> {
        let view = self.view(&trained.spec)?;
        if view.shape != trained.shape {
            return Err(Error::InvalidSpec("sub-model was built for a different space".into()));
        }
        let mut out = self.clone();
        Self::scatter(&mut out.params, &view, &trained.params, true)?;
        Ok(out)
    }
}

impl<T: Scalar> MaterializedModel<T> {
    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Transfer size with 32-bit parameters.
    pub fn byte_size(&self) -> u64 {
        4 * self.num_params() as u64
    }

    pub fn forward(&self, batch: &Tensor<T>, phase: Phase) -> Result<Tensor<T>> {
        network::predict(&self.shape, &self.params, batch, phase)
    }

    pub fn features(&self, batch: &Tensor<T>, phase: Phase) -> Result<Tensor<T>> {
        network::features(&self.shape, &self.params, batch, phase)
    }

    /// Training-mode pass; returns the loss and gradients laid out like `params`.
    pub fn loss_and_grads(
        &self,
        batch: &Tensor<T>,
        labels: &[usize],
        loss: &LossSpec<'_, T>,
    ) -> Result<(ChildPass<T>, Vec<Tensor<T>>)> {
        let (logits, cache) = network::forward(&self.shape, &self.params, batch, Phase::Train)?;
        let (pass, g_logits) = child_loss(logits, labels, loss)?;
        let grads = network::backward(&self.shape, &self.params, &cache, &g_logits)?;
        Ok((pass, grads))
    }

    pub fn head_index(&self) -> usize {
        self.shape.head_index()
    }
}
