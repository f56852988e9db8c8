use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// SGD with heavy-ball momentum: `v ← m·v + g (+ wd·w)`, `w ← w − η·v`.
#[derive(Debug, Clone)]
pub struct OptimizerState<T = f32> {
    pub velocity: Vec<Tensor<T>>,
    pub momentum: f64,
    pub lr: f64,
    pub weight_decay: f64,
}

impl<T: Scalar> OptimizerState<T> {
    /// Zero velocity mirroring `params`.
    pub fn new(params: &[Tensor<T>], lr: f64, momentum: f64) -> Self {
        Self {
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            momentum,
            lr,
            weight_decay: 0.0,
        }
    }
}

pub fn sgd_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::shape(format!(
            "sgd_step: {} params, {} grads, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    let m = T::of(state.momentum);
    let lr = T::of(state.lr);
    let wd = T::of(state.weight_decay);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        g.expect_shape(p.shape(), "sgd_step grad")?;
        v.expect_shape(p.shape(), "sgd_step velocity")?;
        for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let mut d = gi;
            if state.weight_decay != 0.0 {
                d += wd * *w;
            }
            *vi = m * *vi + d;
            *w -= lr * *vi;
        }
    }
    Ok(())
}

pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> T {
    let mut acc = T::zero();
    for g in grads {
        acc += g.sum_squares();
    }
    acc.sqrt()
}

/// Rescales all gradients by `max_norm / norm` when their joint L2 norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> T {
    let norm = global_norm(grads);
    let limit = T::of(max_norm);
    if norm > limit {
        let s = limit / norm;
        grads.iter_mut().for_each(|g| g.scale(s));
    }
    norm
}
