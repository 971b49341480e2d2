//! Enhancement models.
//!
//! [`bsrnn`] is the discriminative band-split recurrent mask estimator and
//! [`sgmse`] the score-based diffusion enhancer. Both are written against the
//! tape in [`graph`] and the shared front end in [`spectral`]; [`checkpoint`]
//! serializes either kind.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub mod bsrnn;
pub mod checkpoint;
pub mod graph;
pub mod sgmse;
pub mod spectral;

pub use bsrnn::{bsrnn_forward, bsrnn_loss, BsrnnConfig};
pub use checkpoint::Checkpoint;
pub use graph::{Graph, Tensor, Var};
pub use sgmse::{ouve_marginal, score_loss, sgmse_enhance, OuveParams, SgmseConfig};
pub use spectral::{istft, stft, ComplexSpec, SpectrogramConfig, Stft, Window};

use crate::{Error, Result};

/// Named parameter tensors, ordered by name.
pub type ParamStore = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Bsrnn,
    Sgmse,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Bsrnn => "bsrnn",
            ModelKind::Sgmse => "sgmse",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bsrnn" => Ok(ModelKind::Bsrnn),
            "sgmse" => Ok(ModelKind::Sgmse),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Configuration of either model kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelConfig {
    Bsrnn(BsrnnConfig),
    Sgmse(SgmseConfig),
}

impl ModelConfig {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::Bsrnn(_) => ModelKind::Bsrnn,
            ModelConfig::Sgmse(_) => ModelKind::Sgmse,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Bsrnn(c) => c.validate(),
            ModelConfig::Sgmse(c) => c.validate(),
        }
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        match self {
            ModelConfig::Bsrnn(c) => c.init_params(seed),
            ModelConfig::Sgmse(c) => c.init_params(seed),
        }
    }
}

/// Gaussian weights with standard deviation `scale / sqrt(rows)`.
pub(crate) fn init_weight(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let s = scale / (rows as f64).sqrt();
    Tensor::new(
        rows,
        cols,
        (0..rows * cols).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect(),
    )
}

pub fn check_finite(params: &ParamStore) -> Result<()> {
    for (name, t) in params {
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("parameter {name} contains non-finite values")));
        }
    }
    Ok(())
}

pub fn param_norm(params: &ParamStore) -> f64 {
    params
        .values()
        .flat_map(|t| t.data.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

pub fn param_count(params: &ParamStore) -> usize {
    params.values().map(|t| t.len()).sum()
}

/// Adds every tensor of `params` to `g` as a named parameter leaf.
pub(crate) fn load_params(g: &mut Graph, params: &ParamStore) -> BTreeMap<String, Var> {
    params
        .iter()
        .map(|(name, t)| (name.clone(), g.param(name, t.clone())))
        .collect()
}

pub(crate) fn require<'a>(vars: &'a BTreeMap<String, Var>, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
}
