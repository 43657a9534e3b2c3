//! Latent distribution blocks: Gaussian, categorical, Dirichlet and
//! logit-normal posteriors with closed-form KL, weighted-product fusion and
//! reparameterized sampling.
//!
//! Every posterior has a flat parameter layout used for gradients:
//!
//! | family                  | flat layout          |
//! |-------------------------|----------------------|
//! | Gaussian / LogitNormal  | `[mean.., var..]`    |
//! | Categorical             | `[probs..]`          |
//! | Dirichlet               | `[alpha..]`          |

mod fusion;
mod kl;
mod sample;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use fusion::{fuse, fuse_vjp, DirichletFusion};
pub use kl::{kl, kl_with_grad, log_prob};
pub use sample::{draw_noise, sample, sample_with_grad, Noise, ReparamSample};

/// Floor added to every predicted variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;
/// Floor added to every predicted Dirichlet concentration.
pub const CONCENTRATION_FLOOR: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistError {
    #[error("cannot fuse an empty list of posteriors")]
    EmptyFusion,
    #[error("family mismatch: {0:?} vs {1:?}")]
    FamilyMismatch(Family, Family),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("non-finite input")]
    NonFinite,
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("value outside the support of {0:?}")]
    OutsideSupport(Family),
}

pub type Result<T> = std::result::Result<T, DistError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Categorical,
    Dirichlet,
    #[serde(rename = "logitnormal", alias = "logit_normal")]
    LogitNormal,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::Gaussian,
        Family::Categorical,
        Family::Dirichlet,
        Family::LogitNormal,
    ];

    /// Number of flat parameters for a block of dimension `dim`.
    pub fn param_len(self, dim: usize) -> usize {
        match self {
            Family::Gaussian | Family::LogitNormal => 2 * dim,
            Family::Categorical | Family::Dirichlet => dim,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Categorical => "categorical",
            Family::Dirichlet => "dirichlet",
            Family::LogitNormal => "logitnormal",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(Family::Gaussian),
            "categorical" => Ok(Family::Categorical),
            "dirichlet" => Ok(Family::Dirichlet),
            "logitnormal" | "logit_normal" | "logit-normal" => Ok(Family::LogitNormal),
            other => Err(format!("unknown distribution family `{other}`")),
        }
    }
}

/// Natural parameters of one latent block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum PosteriorParams {
    Gaussian {
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    Categorical {
        probs: Vec<f64>,
    },
    Dirichlet {
        alpha: Vec<f64>,
    },
    #[serde(rename = "logitnormal")]
    LogitNormal {
        mean: Vec<f64>,
        var: Vec<f64>,
    },
}

impl PosteriorParams {
    pub fn family(&self) -> Family {
        match self {
            PosteriorParams::Gaussian { .. } => Family::Gaussian,
            PosteriorParams::Categorical { .. } => Family::Categorical,
            PosteriorParams::Dirichlet { .. } => Family::Dirichlet,
            PosteriorParams::LogitNormal { .. } => Family::LogitNormal,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            PosteriorParams::Gaussian { mean, .. } | PosteriorParams::LogitNormal { mean, .. } => mean.len(),
            PosteriorParams::Categorical { probs } => probs.len(),
            PosteriorParams::Dirichlet { alpha } => alpha.len(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        match self {
            PosteriorParams::Gaussian { mean, var } | PosteriorParams::LogitNormal { mean, var } => {
                mean.iter().chain(var.iter()).copied().collect()
            }
            PosteriorParams::Categorical { probs } => probs.clone(),
            PosteriorParams::Dirichlet { alpha } => alpha.clone(),
        }
    }

    /// Rebuilds parameters from the flat layout. Does not validate.
    pub fn from_flat(family: Family, flat: &[f64]) -> Self {
        match family {
            Family::Gaussian | Family::LogitNormal => {
                let d = flat.len() / 2;
                let mean = flat[..d].to_vec();
                let var = flat[d..].to_vec();
                if family == Family::Gaussian {
                    PosteriorParams::Gaussian { mean, var }
                } else {
                    PosteriorParams::LogitNormal { mean, var }
                }
            }
            Family::Categorical => PosteriorParams::Categorical { probs: flat.to_vec() },
            Family::Dirichlet => PosteriorParams::Dirichlet { alpha: flat.to_vec() },
        }
    }

    /// Checks the family invariants.
    pub fn validate(&self) -> Result<()> {
        let flat = self.to_flat();
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(DistError::NonFinite);
        }
        match self {
            PosteriorParams::Gaussian { mean, var } | PosteriorParams::LogitNormal { mean, var } => {
                if mean.len() != var.len() || mean.is_empty() {
                    return Err(DistError::InvalidParams(
                        "mean and variance must be nonempty and of equal length".into(),
                    ));
                }
                if var.iter().any(|&v| v <= 0.0) {
                    return Err(DistError::InvalidParams("variance must be positive".into()));
                }
            }
            PosteriorParams::Categorical { probs } => {
                if probs.is_empty() || probs.iter().any(|&p| p < 0.0) {
                    return Err(DistError::InvalidParams("probabilities must be nonnegative".into()));
                }
                let s: f64 = probs.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(DistError::InvalidParams(format!("probabilities sum to {s}, not 1")));
                }
            }
            PosteriorParams::Dirichlet { alpha } => {
                if alpha.is_empty() || alpha.iter().any(|&a| a <= 0.0) {
                    return Err(DistError::InvalidParams("concentrations must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// Mean of the distribution in sample space.
    ///
    /// Logit-normal has no closed-form mean; its logit-space mean is mapped
    /// through the sigmoid instead (the median).
    pub fn mean(&self) -> Vec<f64> {
        match self {
            PosteriorParams::Gaussian { mean, .. } => mean.clone(),
            PosteriorParams::LogitNormal { mean, .. } => mean.iter().map(|&m| sigmoid(m)).collect(),
            PosteriorParams::Categorical { probs } => probs.clone(),
            PosteriorParams::Dirichlet { alpha } => {
                let s: f64 = alpha.iter().sum();
                alpha.iter().map(|a| a / s).collect()
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn default_temperature() -> f64 {
    1.0
}

/// One block of the latent space. Also parses from the shorthand
/// `"family:dim"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BlockRepr")]
pub struct LatentBlockSpec {
    pub family: Family,
    pub dim: usize,
    pub temperature: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FullBlock {
    family: Family,
    dim: usize,
    #[serde(default = "default_temperature")]
    temperature: f64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum BlockRepr {
    Short(String),
    Full(FullBlock),
}

impl TryFrom<BlockRepr> for LatentBlockSpec {
    type Error = String;

    fn try_from(repr: BlockRepr) -> std::result::Result<Self, String> {
        match repr {
            BlockRepr::Full(b) => Ok(Self {
                family: b.family,
                dim: b.dim,
                temperature: b.temperature,
            }),
            BlockRepr::Short(s) => s.parse(),
        }
    }
}

impl std::str::FromStr for LatentBlockSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (family, dim) = s
            .split_once(':')
            .ok_or_else(|| format!("expected `family:dim`, got `{s}`"))?;
        let dim = dim
            .trim()
            .parse()
            .map_err(|_| format!("bad block dimension in `{s}`"))?;
        Ok(Self::new(family.trim().parse()?, dim))
    }
}

impl LatentBlockSpec {
    pub fn new(family: Family, dim: usize) -> Self {
        Self {
            family,
            dim,
            temperature: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(DistError::InvalidParams("block dimension must be >= 1".into()));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(DistError::BadTemperature(self.temperature));
        }
        Ok(())
    }

    pub fn param_len(&self) -> usize {
        self.family.param_len(self.dim)
    }
}

/// Ordered composite latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentSpec {
    pub blocks: Vec<LatentBlockSpec>,
}

impl LatentSpec {
    pub fn new(blocks: Vec<LatentBlockSpec>) -> Result<Self> {
        let spec = Self { blocks };
        spec.validate()?;
        Ok(spec)
    }

    /// `count` identical blocks.
    pub fn repeated(family: Family, dim: usize, count: usize) -> Self {
        Self {
            blocks: vec![LatentBlockSpec::new(family, dim); count],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(DistError::InvalidParams("latent spec has no blocks".into()));
        }
        self.blocks.iter().try_for_each(LatentBlockSpec::validate)
    }

    pub fn total_dim(&self) -> usize {
        self.blocks.iter().map(|b| b.dim).sum()
    }

    /// Total number of flat parameters over all blocks.
    pub fn param_len(&self) -> usize {
        self.blocks.iter().map(LatentBlockSpec::param_len).sum()
    }

    /// Start offset of each block in the sample vector.
    pub fn offsets(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .scan(0, |acc, b| {
                let o = *acc;
                *acc += b.dim;
                Some(o)
            })
            .collect()
    }

    /// Start offset of each block in the flat parameter vector.
    pub fn param_offsets(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .scan(0, |acc, b| {
                let o = *acc;
                *acc += b.param_len();
                Some(o)
            })
            .collect()
    }

    pub fn priors(&self) -> Vec<PosteriorParams> {
        self.blocks.iter().map(prior_params).collect()
    }
}

/// A sample of the whole latent space, segmented by block.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub value: Vec<f64>,
    pub offsets: Vec<usize>,
}

impl LatentSample {
    pub fn from_segments(segments: &[Vec<f64>]) -> Self {
        let mut value = Vec::new();
        let mut offsets = Vec::with_capacity(segments.len());
        for s in segments {
            offsets.push(value.len());
            value.extend_from_slice(s);
        }
        Self { value, offsets }
    }

    pub fn segment(&self, block: usize) -> &[f64] {
        let start = self.offsets[block];
        let end = self.offsets.get(block + 1).copied().unwrap_or(self.value.len());
        &self.value[start..end]
    }
}

/// The fixed uninformative prior of a block.
pub fn prior_params(spec: &LatentBlockSpec) -> PosteriorParams {
    let d = spec.dim;
    match spec.family {
        Family::Gaussian => PosteriorParams::Gaussian {
            mean: vec![0.0; d],
            var: vec![1.0; d],
        },
        Family::LogitNormal => PosteriorParams::LogitNormal {
            mean: vec![0.0; d],
            var: vec![1.0; d],
        },
        Family::Categorical => PosteriorParams::Categorical {
            probs: vec![1.0 / d as f64; d],
        },
        Family::Dirichlet => PosteriorParams::Dirichlet { alpha: vec![1.0; d] },
    }
}

fn check_pair(q: &PosteriorParams, p: &PosteriorParams) -> Result<()> {
    if q.family() != p.family() {
        return Err(DistError::FamilyMismatch(q.family(), p.family()));
    }
    if q.dim() != p.dim() {
        return Err(DistError::DimMismatch {
            expected: q.dim(),
            got: p.dim(),
        });
    }
    Ok(())
}
