//! Training hyperparameters and variant switches shared by the model, the
//! losses and the federation loop.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datasets::HoldoutPolicy;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Start point of the transfer network's output layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AceInit {
    /// Output layer is all zeros, so the first transfer matrix is `0`.
    #[default]
    Zero,
    /// Output layer produces the identity matrix.
    Identity,
}

/// How prototype/item cosine similarities become a top-one distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopOneMode {
    #[default]
    Softmax,
    /// Similarities clamped to `[1e-6, 1]` and divided by their sum.
    LiteralRatio,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnhancementKind {
    #[default]
    Ace,
    ConsensusTransfer,
    UnifiedTransfer,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComplementarityKind {
    #[default]
    Orthogonal,
    /// Negative squared distance between the two views.
    L2Distance,
}

macro_rules! kebab_from_str {
    ($ty:ty, $what:literal) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                serde_json::from_value(serde_json::Value::String(s.to_string()))
                    .map_err(|_| Error::Config(format!("invalid {} `{s}`", $what)))
            }
        }
    };
}

kebab_from_str!(Precision, "precision");
kebab_from_str!(AceInit, "ace_init");
kebab_from_str!(TopOneMode, "eq12_mode");
kebab_from_str!(EnhancementKind, "enhancement_kind");
kebab_from_str!(ComplementarityKind, "complementarity_kind");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// Communication rounds.
    pub rounds: usize,
    /// Local iterations per round.
    pub local_iters: usize,
    pub dim: usize,
    pub batch_size: usize,
    pub negatives_per_positive: usize,
    pub client_fraction: f64,
    pub lr: f64,
    /// Exponential decay applied once per local iteration.
    pub lr_gamma: f64,
    /// Per-block gradient L2-norm cap applied before every SGD step (0 disables).
    pub grad_clip: f64,
    pub beta_a: f64,
    pub beta_o: f64,
    /// Number of listed transfer-network widths: 2 → `[2d, 4d]`, 3 → `[2d, 4d, 8d]`, ...
    pub ace_layers: usize,
    pub ace_init: AceInit,
    /// Scalar multiplier applied to the generated transfer matrix.
    pub ace_scale: f64,
    pub eq12_mode: TopOneMode,
    /// Restrict the consistency distributions to the batch's items.
    pub consistency_sample: bool,
    pub eval_negatives: usize,
    pub top_k: usize,
    pub rbo_k: usize,
    pub rbo_p: f64,
    pub init_std: f64,
    pub holdout: HoldoutPolicy,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            rounds: 100,
            local_iters: 10,
            dim: 32,
            batch_size: 2048,
            negatives_per_positive: 4,
            client_fraction: 1.0,
            lr: 0.1,
            lr_gamma: 0.999,
            grad_clip: 10.0,
            beta_a: 0.5,
            beta_o: 0.5,
            ace_layers: 2,
            ace_init: AceInit::Zero,
            ace_scale: 1.0,
            eq12_mode: TopOneMode::Softmax,
            consistency_sample: false,
            eval_negatives: 99,
            top_k: 10,
            rbo_k: 50,
            rbo_p: 0.99,
            init_std: 0.01,
            holdout: HoldoutPolicy::LatestTimestamp,
            precision: Precision::F32,
            seed: 0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.rounds < 1 {
            return bad("training.rounds must be >= 1");
        }
        if self.local_iters < 1 {
            return bad("training.local_iters must be >= 1");
        }
        if self.dim < 1 {
            return bad("training.dim must be >= 1");
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return bad("training.client_fraction must lie in (0, 1]");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("training.lr must be > 0");
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return bad("training.lr_gamma must lie in (0, 1]");
        }
        if !(self.grad_clip >= 0.0) {
            return bad("training.grad_clip must be >= 0");
        }
        if self.beta_a < 0.0 || self.beta_o < 0.0 {
            return bad("loss weights must be non-negative");
        }
        if self.ace_layers < 1 {
            return bad("training.ace_layers must be >= 1");
        }
        if self.batch_size < 1 {
            return bad("training.batch_size must be >= 1");
        }
        if !(self.rbo_p > 0.0 && self.rbo_p < 1.0) {
            return bad("eval.rbo_p must lie in (0, 1)");
        }
        if self.top_k < 1 || self.rbo_k < 1 {
            return bad("eval.top_k and eval.rbo_k must be >= 1");
        }
        Ok(())
    }

    /// Transfer-network widths before the `d²` output: `[2d, 4d, ...]`.
    pub fn transfer_schedule(&self) -> Vec<usize> {
        (0..self.ace_layers).map(|k| self.dim << (k + 1)).collect()
    }
}

/// Which components of the training objective and enhancement are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariantConfig {
    pub ace_enabled: bool,
    pub consistency_enabled: bool,
    pub orthogonality_enabled: bool,
    pub enhancement_kind: EnhancementKind,
    pub complementarity_kind: ComplementarityKind,
}

impl Default for VariantConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl VariantConfig {
    pub const ABLATION_LABELS: [&'static str; 8] =
        ["C0", "C1", "C2", "C3", "C4", "C5", "C6", "Fed3CR"];

    pub fn full() -> Self {
        Self::from_flags(true, true, true)
    }

    pub fn from_flags(ace: bool, consistency: bool, orthogonality: bool) -> Self {
        Self {
            ace_enabled: ace,
            consistency_enabled: consistency,
            orthogonality_enabled: orthogonality,
            enhancement_kind: if ace {
                EnhancementKind::Ace
            } else {
                EnhancementKind::None
            },
            complementarity_kind: ComplementarityKind::Orthogonal,
        }
    }

    pub fn with_enhancement(mut self, kind: EnhancementKind) -> Self {
        self.enhancement_kind = kind;
        self.ace_enabled = kind == EnhancementKind::Ace;
        self
    }

    pub fn with_complementarity(mut self, kind: ComplementarityKind) -> Self {
        self.complementarity_kind = kind;
        self
    }

    /// Ablation rows C0–C6 and the full model.
    pub fn from_label(label: &str) -> Result<Self> {
        let v = match label {
            "C0" => Self::from_flags(false, false, false),
            "C1" => Self::from_flags(true, false, false),
            "C2" => Self::from_flags(false, true, false),
            "C3" => Self::from_flags(false, false, true),
            "C4" => Self::from_flags(false, true, true),
            "C5" => Self::from_flags(true, true, false),
            "C6" => Self::from_flags(true, false, true),
            "Fed3CR" | "fed3cr" => Self::full(),
            "Fed3CR-L2" | "fed3cr-l2" => {
                Self::full().with_complementarity(ComplementarityKind::L2Distance)
            }
            "consensus-transfer" => {
                Self::from_flags(false, false, false).with_enhancement(EnhancementKind::ConsensusTransfer)
            }
            "unified-transfer" => {
                Self::from_flags(false, false, false).with_enhancement(EnhancementKind::UnifiedTransfer)
            }
            other => {
                return Err(Error::Config(format!("unknown variant label `{other}`")));
            }
        };
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ace_enabled != (self.enhancement_kind == EnhancementKind::Ace) {
            return Err(Error::Config(format!(
                "variant.ace_enabled={} contradicts variant.enhancement_kind={:?}",
                self.ace_enabled, self.enhancement_kind
            )));
        }
        Ok(())
    }
}
