//! Elastic search space, child architecture specs and their analytic cost.
//!
//! A child keeps the first `d` layers of every stage. Each active layer picks
//! a width multiplier (applied to the stage's maximal channel count) and a
//! depthwise kernel size.

use std::fmt;

use num_bigint::BigUint;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Rejection sampling attempts before falling back to the smallest child.
const MAX_BUDGET_ATTEMPTS: usize = 5_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StemSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub min_layers: usize,
    pub max_layers: usize,
    pub max_channels: usize,
    pub first_layer_stride: usize,
}

impl StageSpec {
    pub fn new(min_layers: usize, max_layers: usize, max_channels: usize, first_layer_stride: usize) -> Self {
        Self { min_layers, max_layers, max_channels, first_layer_stride }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpace {
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    /// Sorted ascending, last element 1.0.
    pub width_multipliers: Vec<f64>,
    /// Odd kernel sizes, sorted ascending.
    pub kernel_choices: Vec<usize>,
    pub num_classes: usize,
    pub input_resolution: usize,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
}

fn default_input_channels() -> usize {
    3
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerChoice {
    pub w: f64,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageChoice {
    pub depth: usize,
    pub layers: Vec<LayerChoice>,
}

/// One child architecture. Serializes to the canonical
/// `{"stages":[{"depth":..,"layers":[{"w":..,"k":..}]}]}` form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubnetSpec {
    pub stages: Vec<StageChoice>,
}

/// The three reference children used for deployment tiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[serde(alias = "S", alias = "small")]
    Smallest,
    #[serde(alias = "M")]
    Medium,
    #[serde(alias = "B", alias = "big")]
    Biggest,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Biggest, Preset::Medium, Preset::Smallest];

    pub fn short(self) -> &'static str {
        match self {
            Preset::Biggest => "B",
            Preset::Medium => "M",
            Preset::Smallest => "S",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "biggest" | "big" | "b" => Ok(Preset::Biggest),
            "medium" | "m" => Ok(Preset::Medium),
            "smallest" | "small" | "s" => Ok(Preset::Smallest),
            other => Err(Error::invalid(format!("unknown preset {other:?}"))),
        }
    }
}

/// Concrete dimensions of one active MBConv layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDims {
    pub stage: usize,
    pub index: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub in_res: usize,
    pub out_res: usize,
}

impl ArchSpace {
    /// MobileNetV1-style space: stem 32ch, four stages of 64/128/256/1024
    /// maximal channels, kernels {3,5,7}, widths {0.5,0.75,1.0}.
    pub fn default_space() -> Self {
        Self::with_classes(100)
    }

    pub fn with_classes(num_classes: usize) -> Self {
        Self {
            stem: StemSpec { out_channels: 32, kernel: 3, stride: 1 },
            stages: vec![
                StageSpec::new(1, 1, 64, 2),
                StageSpec::new(1, 2, 128, 1),
                StageSpec::new(1, 2, 256, 2),
                StageSpec::new(1, 2, 1024, 2),
            ],
            width_multipliers: vec![0.5, 0.75, 1.0],
            kernel_choices: vec![3, 5, 7],
            num_classes,
            input_resolution: 32,
            input_channels: 3,
        }
    }

    /// Same topology as [`ArchSpace::default_space`] with 8x fewer channels in
    /// the last stage and 4x fewer elsewhere; sized for single-core runs.
    pub fn compact(num_classes: usize, input_resolution: usize) -> Self {
        Self {
            stem: StemSpec { out_channels: 8, kernel: 3, stride: 1 },
            stages: vec![
                StageSpec::new(1, 1, 16, 2),
                StageSpec::new(1, 2, 32, 1),
                StageSpec::new(1, 2, 64, 2),
                StageSpec::new(1, 2, 128, 2),
            ],
            width_multipliers: vec![0.5, 0.75, 1.0],
            kernel_choices: vec![3, 5, 7],
            num_classes,
            input_resolution,
            input_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.stages.is_empty() {
            return bad("search space has no stages".into());
        }
        if self.width_multipliers.is_empty()
            || self.width_multipliers.windows(2).any(|w| w[0] >= w[1])
            || self.width_multipliers[0] <= 0.0
            || *self.width_multipliers.last().unwrap() != 1.0
        {
            return bad(format!(
                "width multipliers must be strictly ascending in (0, 1] ending at 1.0, got {:?}",
                self.width_multipliers
            ));
        }
        if self.kernel_choices.is_empty()
            || self.kernel_choices.iter().any(|k| k % 2 == 0)
            || self.kernel_choices.windows(2).any(|w| w[0] >= w[1])
        {
            return bad(format!("kernel choices must be odd and ascending, got {:?}", self.kernel_choices));
        }
        if self.stem.kernel % 2 == 0 || self.stem.stride == 0 || self.stem.out_channels == 0 {
            return bad("stem needs an odd kernel, positive stride and channels".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.min_layers < 1 || s.min_layers > s.max_layers || s.max_channels == 0 || s.first_layer_stride == 0 {
                return bad(format!("stage {i} is malformed: {s:?}"));
            }
        }
        if self.num_classes < 2 || self.input_resolution == 0 || self.input_channels == 0 {
            return bad("need >= 2 classes and a positive input size".into());
        }
        Ok(())
    }

    pub fn max_kernel(&self) -> usize {
        *self.kernel_choices.last().expect("validated space")
    }

    /// Active channel count for multiplier `w` on a stage with `max` channels.
    pub fn channels(w: f64, max: usize) -> usize {
        ((w * max as f64 - 1e-9).ceil() as usize).clamp(1, max)
    }

    pub fn stem_out_res(&self) -> usize {
        self.input_resolution.div_ceil(self.stem.stride)
    }

    /// Maximal input channels of layer `index` in `stage`.
    pub fn max_in_channels(&self, stage: usize, index: usize) -> usize {
        match (stage, index) {
            (0, 0) => self.stem.out_channels,
            (s, 0) => self.stages[s - 1].max_channels,
            (s, _) => self.stages[s].max_channels,
        }
    }

    pub fn last_max_channels(&self) -> usize {
        self.stages.last().expect("validated space").max_channels
    }

    pub fn validate_spec(&self, spec: &SubnetSpec) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if spec.stages.len() != self.stages.len() {
            return bad(format!("spec has {} stages, space has {}", spec.stages.len(), self.stages.len()));
        }
        for (i, (choice, stage)) in spec.stages.iter().zip(&self.stages).enumerate() {
            if choice.depth < stage.min_layers || choice.depth > stage.max_layers {
                return bad(format!(
                    "stage {i} depth {} outside [{}, {}]",
                    choice.depth, stage.min_layers, stage.max_layers
                ));
            }
            if choice.layers.len() != choice.depth {
                return bad(format!("stage {i} lists {} layers for depth {}", choice.layers.len(), choice.depth));
            }
            for l in &choice.layers {
                if !self.width_multipliers.contains(&l.w) {
                    return bad(format!("stage {i}: multiplier {} not in {:?}", l.w, self.width_multipliers));
                }
                if !self.kernel_choices.contains(&l.k) {
                    return bad(format!("stage {i}: kernel {} not in {:?}", l.k, self.kernel_choices));
                }
            }
        }
        Ok(())
    }

    /// Dimensions of every active layer, in forward order.
    pub fn layer_dims(&self, spec: &SubnetSpec) -> Result<Vec<LayerDims>> {
        self.validate_spec(spec)?;
        let mut dims = Vec::new();
        let mut cin = self.stem.out_channels;
        let mut res = self.stem_out_res();
        for (s, (choice, stage)) in spec.stages.iter().zip(&self.stages).enumerate() {
            for (i, l) in choice.layers.iter().enumerate() {
                let stride = if i == 0 { stage.first_layer_stride } else { 1 };
                let out_res = res.div_ceil(stride);
                let cout = Self::channels(l.w, stage.max_channels);
                dims.push(LayerDims {
                    stage: s,
                    index: i,
                    in_channels: cin,
                    out_channels: cout,
                    kernel: l.k,
                    stride,
                    in_res: res,
                    out_res,
                });
                cin = cout;
                res = out_res;
            }
        }
        Ok(dims)
    }

    /// Width of the features entering the classifier head.
    pub fn head_in(&self, spec: &SubnetSpec) -> Result<usize> {
        Ok(self.layer_dims(spec)?.last().map_or(self.stem.out_channels, |d| d.out_channels))
    }

    /// Multiply-accumulate count of one forward pass on a single input.
    pub fn flops(&self, spec: &SubnetSpec) -> Result<u64> {
        let dims = self.layer_dims(spec)?;
        let r = self.stem_out_res() as u64;
        let ks = self.stem.kernel as u64;
        let mut macs = r * r * ks * ks * self.input_channels as u64 * self.stem.out_channels as u64;
        for d in &dims {
            let o = (d.out_res * d.out_res) as u64;
            let (cin, cout, k) = (d.in_channels as u64, d.out_channels as u64, d.kernel as u64);
            macs += o * k * k * cin; // depthwise
            macs += o * cin * cout; // pointwise
        }
        let head_in = dims.last().map_or(self.stem.out_channels, |d| d.out_channels) as u64;
        Ok(macs + head_in * self.num_classes as u64)
    }

    /// Learnable scalars of the child: conv weights, three normalization
    /// vectors per normalized feature map, head weight and bias.
    pub fn param_count(&self, spec: &SubnetSpec) -> Result<u64> {
        let dims = self.layer_dims(spec)?;
        let stem = &self.stem;
        let mut n = (stem.out_channels * self.input_channels * stem.kernel * stem.kernel + 3 * stem.out_channels) as u64;
        for d in &dims {
            let (cin, cout) = (d.in_channels as u64, d.out_channels as u64);
            n += cin * (d.kernel * d.kernel) as u64 + 3 * cin;
            n += cout * cin + 3 * cout;
        }
        let head_in = dims.last().map_or(stem.out_channels, |d| d.out_channels) as u64;
        Ok(n + head_in * self.num_classes as u64 + self.num_classes as u64)
    }

    /// Number of distinct child specs.
    pub fn count_subnets(&self) -> BigUint {
        let per_layer = BigUint::from(self.width_multipliers.len() * self.kernel_choices.len());
        self.stages.iter().fold(BigUint::from(1u32), |acc, s| {
            let stage_total: BigUint = (s.min_layers..=s.max_layers).map(|d| per_layer.pow(d as u32)).sum();
            acc * stage_total
        })
    }

    fn uniform_spec(&self, depth: impl Fn(&StageSpec) -> usize, w: f64, k: usize) -> SubnetSpec {
        SubnetSpec {
            stages: self
                .stages
                .iter()
                .map(|s| {
                    let d = depth(s);
                    StageChoice { depth: d, layers: vec![LayerChoice { w, k }; d] }
                })
                .collect(),
        }
    }

    /// Minimum depth, thinnest width, smallest kernel.
    pub fn smallest(&self) -> SubnetSpec {
        self.uniform_spec(|s| s.min_layers, self.width_multipliers[0], self.kernel_choices[0])
    }

    /// Maximum depth, full width, largest kernel.
    pub fn biggest(&self) -> SubnetSpec {
        self.uniform_spec(|s| s.max_layers, 1.0, self.max_kernel())
    }

    /// Minimum depth, full width, middle kernel choice.
    pub fn medium(&self) -> SubnetSpec {
        let k = self.kernel_choices[self.kernel_choices.len() / 2];
        self.uniform_spec(|s| s.min_layers, 1.0, k)
    }

    pub fn preset(&self, p: Preset) -> SubnetSpec {
        match p {
            Preset::Smallest => self.smallest(),
            Preset::Medium => self.medium(),
            Preset::Biggest => self.biggest(),
        }
    }

    /// Independent uniform choice of every depth, width and kernel slot.
    pub fn sample_random<R: Rng + ?Sized>(&self, rng: &mut R) -> SubnetSpec {
        let stages = self
            .stages
            .iter()
            .map(|s| {
                let depth = rng.random_range(s.min_layers..=s.max_layers);
                let layers = (0..depth)
                    .map(|_| LayerChoice {
                        w: self.width_multipliers[rng.random_range(0..self.width_multipliers.len())],
                        k: self.kernel_choices[rng.random_range(0..self.kernel_choices.len())],
                    })
                    .collect();
                StageChoice { depth, layers }
            })
            .collect();
        SubnetSpec { stages }
    }

    /// `M` children for one local iteration. With `M >= 3` the set always
    /// starts with the biggest and smallest child (sandwich rule).
    pub fn sample_sandwich_set<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Result<Vec<SubnetSpec>> {
        if m < 1 {
            return Err(Error::invalid("need at least one child per iteration"));
        }
        let mut set = Vec::with_capacity(m);
        if m >= 3 {
            set.push(self.biggest());
            set.push(self.smallest());
        }
        while set.len() < m {
            set.push(self.sample_random(rng));
        }
        Ok(set)
    }

    /// Rejection-samples random children until one fits `max_flops`.
    pub fn sample_within_flops<R: Rng + ?Sized>(&self, max_flops: u64, rng: &mut R) -> Result<SubnetSpec> {
        let smallest = self.smallest();
        let floor = self.flops(&smallest)?;
        if max_flops < floor {
            return Err(Error::InfeasibleBudget { budget: max_flops, floor });
        }
        for _ in 0..MAX_BUDGET_ATTEMPTS {
            let spec = self.sample_random(rng);
            if self.flops(&spec)? <= max_flops {
                return Ok(spec);
            }
        }
        tracing::warn!(max_flops, "budget rejection sampling exhausted, using smallest child");
        Ok(smallest)
    }
}

impl Default for ArchSpace {
    fn default() -> Self {
        Self::default_space()
    }
}

impl SubnetSpec {
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        hex::encode(&digest[..8])
    }

    /// True when every dimension of `self` is <= the matching one of `other`.
    pub fn nested_in(&self, other: &SubnetSpec) -> bool {
        self.stages.len() == other.stages.len()
            && self.stages.iter().zip(&other.stages).all(|(a, b)| {
                // the last active layer sets the next stage's input width
                let out_w = |c: &StageChoice| c.layers[..c.depth].last().map_or(0.0, |l| l.w);
                a.depth <= b.depth
                    && a.layers.iter().zip(&b.layers).all(|(la, lb)| la.w <= lb.w && la.k <= lb.k)
                    && out_w(a) <= out_w(b)
            })
    }
}

impl fmt::Display for SubnetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.stages.iter().enumerate() {
            if i > 0 {
                write!(f, "|")?;
            }
            for (j, l) in s.layers.iter().enumerate() {
                if j > 0 {
                    write!(f, ",")?;
                }
                write!(f, "{}k{}", l.w, l.k)?;
            }
        }
        Ok(())
    }
}
