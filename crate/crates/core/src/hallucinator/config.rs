use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::set_transformer::SetEncoderConfig;

/// Which conditioning mechanisms are enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Per-slot equivariant embeddings `g_i`.
    pub peq: bool,
    /// Concatenation of `theta` and `g_i` to the MLP inputs.
    pub cat: bool,
    /// Sigmoid gates on every MLP layer.
    pub modulate: bool,
}

impl AblationFlags {
    pub const ALL: Self = Self {
        peq: true,
        cat: true,
        modulate: true,
    };

    pub fn validate(&self) -> Result<()> {
        if !self.cat && !self.modulate {
            return Err(Error::Config(
                "CAT and MOD cannot both be disabled: the decoder would ignore the target set".into(),
            ));
        }
        Ok(())
    }
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::ALL
    }
}

/// The six named architecture variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    V1,
    V2,
    V3,
    V4,
    V5,
    V6,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Self::V1, Self::V2, Self::V3, Self::V4, Self::V5, Self::V6];

    pub fn flags(self) -> AblationFlags {
        let (peq, cat, modulate) = match self {
            Self::V1 => (true, true, true),
            Self::V2 => (false, true, true),
            Self::V3 => (true, false, true),
            Self::V4 => (true, true, false),
            Self::V5 => (false, true, false),
            Self::V6 => (false, false, true),
        };
        AblationFlags { peq, cat, modulate }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?} (expected V1..V6)")))
    }
}

/// Prior over the per-frame latent `z`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZPrior {
    #[default]
    StandardNormal,
    /// Learned Gaussian head on `(theta, g_i)`. Reserved; rejected by validation.
    Conditional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HallucinatorConfig {
    pub feature_dim: usize,
    pub theta_dim: usize,
    pub z_dim: usize,
    /// Width of every set encoder; also the width of `g_i`.
    pub set_hidden: usize,
    pub set_blocks: usize,
    pub num_inducing: usize,
    pub heads: usize,
    pub mlp_layers: usize,
    pub mlp_hidden: usize,
    pub flow_layers: usize,
    pub flow_hidden: usize,
    /// Coupling log-scales are `bound * tanh(raw)`.
    pub flow_scale_bound: f64,
    pub flags: AblationFlags,
    pub z_prior: ZPrior,
    /// Set cardinality `N` used in training and for inference batches.
    pub set_cardinality: usize,
    /// Maximum number of observed slots per inference batch.
    pub observed_cap: usize,
    /// Evaluate set encoders in canonical slot order.
    pub deterministic: bool,
}

impl HallucinatorConfig {
    /// Published model size.
    pub fn paper(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            theta_dim: 256,
            z_dim: 256,
            set_hidden: 256,
            set_blocks: 4,
            num_inducing: 16,
            heads: 4,
            mlp_layers: 4,
            mlp_hidden: 512,
            flow_layers: 4,
            flow_hidden: 256,
            flow_scale_bound: 2.0,
            flags: AblationFlags::ALL,
            z_prior: ZPrior::StandardNormal,
            set_cardinality: 200,
            observed_cap: 100,
            deterministic: true,
        }
    }

    /// Reduced size that trains in minutes on one CPU core.
    pub fn desk(feature_dim: usize) -> Self {
        Self {
            theta_dim: 32,
            z_dim: 16,
            set_hidden: 64,
            set_blocks: 2,
            mlp_hidden: 128,
            flow_hidden: 64,
            ..Self::paper(feature_dim)
        }
    }

    /// Every width divided by eight; used for gradient checks.
    pub fn tiny(feature_dim: usize) -> Self {
        Self {
            theta_dim: 32,
            z_dim: 32,
            set_hidden: 32,
            num_inducing: 2,
            mlp_hidden: 64,
            flow_hidden: 32,
            set_cardinality: 8,
            observed_cap: 4,
            ..Self::paper(feature_dim)
        }
    }

    pub fn with_flags(mut self, flags: AblationFlags) -> Self {
        self.flags = flags;
        self
    }

    pub fn g_dim(&self) -> usize {
        self.set_hidden
    }

    /// Set encoder settings for slot inputs of width `feature_dim + 1`.
    pub fn set_encoder(&self) -> SetEncoderConfig {
        SetEncoderConfig {
            input_dim: self.feature_dim + 1,
            hidden_dim: self.set_hidden,
            num_blocks: self.set_blocks,
            num_inducing: self.num_inducing,
            heads: self.heads,
            canonical_order: self.deterministic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.flags.validate()?;
        self.set_encoder().validate()?;
        let positive = [
            ("feature_dim", self.feature_dim),
            ("theta_dim", self.theta_dim),
            ("z_dim", self.z_dim),
            ("mlp_layers", self.mlp_layers),
            ("mlp_hidden", self.mlp_hidden),
            ("flow_hidden", self.flow_hidden),
            ("set_cardinality", self.set_cardinality),
            ("observed_cap", self.observed_cap),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.flow_layers > 0 && self.theta_dim < 2 {
            return Err(Error::Config("coupling flow needs theta_dim ≥ 2".into()));
        }
        if self.observed_cap >= self.set_cardinality {
            return Err(Error::Config(format!(
                "observed_cap {} leaves no generation slots in sets of {}",
                self.observed_cap, self.set_cardinality
            )));
        }
        if !(self.flow_scale_bound > 0.0 && self.flow_scale_bound.is_finite()) {
            return Err(Error::Config("flow_scale_bound must be positive".into()));
        }
        if self.z_prior != ZPrior::StandardNormal {
            return Err(Error::Config("only the standard normal z prior is implemented".into()));
        }
        Ok(())
    }
}
