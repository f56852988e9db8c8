//! Forward and backward passes of one concrete child network.
//!
//! Parameters are a flat list of tensors in a fixed traversal order:
//!
//! ```text
//! stem.weight, stem.alpha, stem.gamma, stem.beta,
//! for every active layer:
//!     dw.weight [c_in,1,k,k], dw.alpha, dw.gamma, dw.beta   (c_in entries)
//!     pw.weight [c_out,c_in,1,1], pw.alpha, pw.gamma, pw.beta (c_out entries)
//! head.weight [classes, c_last], head.bias [classes]
//! ```
//!
//! Every convolution is followed by normalization and ReLU, then global
//! average pooling feeds the linear head.

use crate::arch::{ArchSpace, LayerDims, SubnetSpec};
use crate::error::{Error, Result};
use crate::kernel::{
    conv2d_backward, conv2d_forward, global_avg_pool, global_avg_pool_backward, linear_backward,
    linear_forward, relu, relu_backward,
};
use crate::norm::{pn_backward, pn_forward, sbn_backward, sbn_forward, NormCache, NormKind, Phase, DEFAULT_EPS};
use crate::tensor::{Scalar, Tensor};

pub const STEM_TENSORS: usize = 4;
pub const LAYER_TENSORS: usize = 8;

/// Convolution geometry of one conv + norm + relu unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Unit {
    first_param: usize,
    stride: usize,
    padding: usize,
    groups: usize,
}

/// Everything needed to run a child besides its parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkShape {
    pub input_channels: usize,
    pub input_resolution: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub layers: Vec<LayerDims>,
    pub num_classes: usize,
    pub norm: NormKind,
    pub eps: f64,
}

impl NetworkShape {
    pub fn new(space: &ArchSpace, spec: &SubnetSpec, norm: NormKind) -> Result<Self> {
        Ok(Self {
            input_channels: space.input_channels,
            input_resolution: space.input_resolution,
            stem_channels: space.stem.out_channels,
            stem_kernel: space.stem.kernel,
            stem_stride: space.stem.stride,
            layers: space.layer_dims(spec)?,
            num_classes: space.num_classes,
            norm,
            eps: DEFAULT_EPS,
        })
    }

    pub fn head_in(&self) -> usize {
        self.layers.last().map_or(self.stem_channels, |d| d.out_channels)
    }

    pub fn head_index(&self) -> usize {
        STEM_TENSORS + LAYER_TENSORS * self.layers.len()
    }

    pub fn num_tensors(&self) -> usize {
        self.head_index() + 2
    }

    /// Expected shape of every parameter tensor, in traversal order.
    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        let c0 = self.stem_channels;
        let mut shapes = vec![
            vec![c0, self.input_channels, self.stem_kernel, self.stem_kernel],
            vec![c0],
            vec![c0],
            vec![c0],
        ];
        for d in &self.layers {
            let (ci, co, k) = (d.in_channels, d.out_channels, d.kernel);
            shapes.extend([vec![ci, 1, k, k], vec![ci], vec![ci], vec![ci]]);
            shapes.extend([vec![co, ci, 1, 1], vec![co], vec![co], vec![co]]);
        }
        shapes.push(vec![self.num_classes, self.head_in()]);
        shapes.push(vec![self.num_classes]);
        shapes
    }

    pub fn check_params<T: Scalar>(&self, params: &[Tensor<T>]) -> Result<()> {
        let shapes = self.tensor_shapes();
        if params.len() != shapes.len() {
            return Err(Error::shape(format!(
                "network expects {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (i, (p, s)) in params.iter().zip(&shapes).enumerate() {
            p.expect_shape(s, &format!("parameter {i}"))?;
        }
        Ok(())
    }

    fn units(&self) -> Vec<Unit> {
        let mut units = vec![Unit {
            first_param: 0,
            stride: self.stem_stride,
            padding: (self.stem_kernel - 1) / 2,
            groups: 1,
        }];
        for (i, d) in self.layers.iter().enumerate() {
            let base = STEM_TENSORS + LAYER_TENSORS * i;
            units.push(Unit {
                first_param: base,
                stride: d.stride,
                padding: (d.kernel - 1) / 2,
                groups: d.in_channels,
            });
            units.push(Unit { first_param: base + 4, stride: 1, padding: 0, groups: 1 });
        }
        units
    }
}

struct UnitCache<T> {
    conv_in: Tensor<T>,
    norm_in: Tensor<T>,
    norm: NormCache<T>,
    relu_in: Tensor<T>,
}

/// Saved activations of a forward pass.
pub struct ForwardCache<T> {
    units: Vec<UnitCache<T>>,
    pool_in_shape: Vec<usize>,
    features: Tensor<T>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Pooled features that enter the head, `[N, c_last]`.
    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }
}

fn normalize<T: Scalar>(
    shape: &NetworkShape,
    params: &[Tensor<T>],
    first: usize,
    x: &Tensor<T>,
    phase: Phase,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let (a, g, b) = (params[first + 1].data(), params[first + 2].data(), params[first + 3].data());
    match shape.norm {
        NormKind::Pn => pn_forward(x, a, g, b, shape.eps, phase),
        NormKind::Sbn => sbn_forward(x, g, b, shape.eps, phase),
    }
}

fn body_forward<T: Scalar>(
    shape: &NetworkShape,
    params: &[Tensor<T>],
    input: &Tensor<T>,
    phase: Phase,
    keep: bool,
) -> Result<(Tensor<T>, Vec<UnitCache<T>>)> {
    shape.check_params(params)?;
    let [_, c, h, w] = input.dims4("network input")?;
    let r = shape.input_resolution;
    if c != shape.input_channels || h != r || w != r {
        return Err(Error::shape(format!(
            "network expects inputs of {} channels at {r}x{r}, got {:?}",
            shape.input_channels,
            input.shape()
        )));
    }
    let mut caches = Vec::new();
    let mut x = input.clone();
    for u in shape.units() {
        let z = conv2d_forward(&x, &params[u.first_param], u.stride, u.padding, u.groups)?;
        let (n, nc) = normalize(shape, params, u.first_param, &z, phase)?;
        let out = relu(&n);
        if keep {
            caches.push(UnitCache { conv_in: x, norm_in: z, norm: nc, relu_in: n });
        }
        x = out;
    }
    Ok((x, caches))
}

/// Runs the child and returns logits plus the activations needed by
/// [`backward`].
pub fn forward<T: Scalar>(
    shape: &NetworkShape,
    params: &[Tensor<T>],
    input: &Tensor<T>,
    phase: Phase,
) -> Result<(Tensor<T>, ForwardCache<T>)> {
    let (x, units) = body_forward(shape, params, input, phase, true)?;
    let features = global_avg_pool(&x)?;
    let hi = shape.head_index();
    let logits = linear_forward(&features, &params[hi], &params[hi + 1])?;
    Ok((logits, ForwardCache { units, pool_in_shape: x.shape().to_vec(), features }))
}

/// Logits without keeping activations.
pub fn predict<T: Scalar>(
    shape: &NetworkShape,
    params: &[Tensor<T>],
    input: &Tensor<T>,
    phase: Phase,
) -> Result<Tensor<T>> {
    let feats = features(shape, params, input, phase)?;
    let hi = shape.head_index();
    linear_forward(&feats, &params[hi], &params[hi + 1])
}

/// Pooled body output `[N, c_last]`.
pub fn features<T: Scalar>(
    shape: &NetworkShape,
    params: &[Tensor<T>],
    input: &Tensor<T>,
    phase: Phase,
) -> Result<Tensor<T>> {
    let (x, _) = body_forward(shape, params, input, phase, false)?;
    global_avg_pool(&x)
}

/// Gradients of every parameter given the gradient of the loss w.r.t. logits.
pub fn backward<T: Scalar>(
    shape: &NetworkShape,
    params: &[Tensor<T>],
    cache: &ForwardCache<T>,
    grad_logits: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    shape.check_params(params)?;
    let mut grads: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    let hi = shape.head_index();
    let (g_feat, g_hw, g_hb) = linear_backward(grad_logits, &cache.features, &params[hi])?;
    grads[hi] = g_hw;
    grads[hi + 1] = g_hb;
    let mut g = global_avg_pool_backward(&g_feat, &cache.pool_in_shape)?;
    let units = shape.units();
    for (i, (u, uc)) in units.iter().zip(&cache.units).enumerate().rev() {
        let g_norm_out = relu_backward(&g, &uc.relu_in)?;
        let p = u.first_param;
        let g_z = match shape.norm {
            NormKind::Pn => {
                let (gz, ga, gg, gb) =
                    pn_backward(&g_norm_out, &uc.norm_in, params[p + 1].data(), params[p + 2].data(), shape.eps, &uc.norm)?;
                grads[p + 1].data_mut().copy_from_slice(&ga);
                grads[p + 2].data_mut().copy_from_slice(&gg);
                grads[p + 3].data_mut().copy_from_slice(&gb);
                gz
            }
            NormKind::Sbn => {
                let (gz, gg, gb) = sbn_backward(&g_norm_out, &uc.norm_in, params[p + 2].data(), &uc.norm)?;
                grads[p + 2].data_mut().copy_from_slice(&gg);
                grads[p + 3].data_mut().copy_from_slice(&gb);
                gz
            }
        };
        let (g_in, g_w) = conv2d_backward(&g_z, &uc.conv_in, &params[p], u.stride, u.padding, u.groups)?;
        grads[p] = g_w;
        if i > 0 {
            g = g_in;
        }
    }
    Ok(grads)
}
