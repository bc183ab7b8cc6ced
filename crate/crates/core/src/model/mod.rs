//! Token-level sequence model built around the bilinear recurrence.
//!
//! Each block is pre-norm residual:
//!
//! ```text
//! n1 = rmsnorm(x)
//! q, k, v = n1 Wq, n1 Wk, n1 Wv          (per-head columns)
//! q, k, v = silu(causal_depthwise_conv(.))
//! q, k    = l2-normalize per head
//! gates   = gate signals from n1          (per head)
//! mix     = recurrence over each (batch, head) stream
//! out     = sigmoid(n1 W_outgate) * mix
//! h       = x + out W_out
//! y       = h + silu(rmsnorm(h) W1) W2
//! ```
//!
//! The embedding is tied: logits are the final-norm output against the
//! embedding transpose. Both execution modes (token-sequential and chunkwise)
//! compute the same function; training gradients always go through the
//! chunk-replayed backward pass.

mod backward;
mod forward;
mod params;

pub use backward::{masked_accuracy, masked_cross_entropy, model_backward};
pub use forward::{
    block_forward, layer_weights, model_forward, model_forward_cached, BlockCache, LayerWeights,
    ModelCache, RMS_EPS,
};
pub use params::{Layout, LayoutEntry, ModelParams};

use serde::{Deserialize, Serialize};

use crate::error::{KernelError, Result};
use crate::recurrence::{UpdateOrder, Variant};

/// Which engine drives the per-stream recurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    /// One token at a time; the semantic reference.
    Recurrent,
    /// Chunk-parallel scan; equal up to roundoff for supported variants.
    #[default]
    Chunkwise,
}

impl ExecMode {
    pub const ALL: [ExecMode; 2] = [ExecMode::Recurrent, ExecMode::Chunkwise];

    pub fn name(&self) -> &'static str {
        match self {
            ExecMode::Recurrent => "recurrent",
            ExecMode::Chunkwise => "chunkwise",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name).ok_or_else(|| {
            KernelError::contract(
                "execution mode",
                format!("unknown mode {name:?}; expected recurrent or chunkwise"),
            )
        })
    }
}

impl std::fmt::Display for ExecMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for ExecMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for ExecMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        ExecMode::from_name(&name).map_err(serde::de::Error::custom)
    }
}

/// Model hyperparameters. All fields have defaults, so a config file may set
/// only what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_dk: usize,
    pub head_dv: usize,
    pub conv_width: usize,
    pub mlp_expansion: f64,
    pub chunk_size: usize,
    /// Initial output-correction strength (small models ~0.02).
    pub d_init: f64,
    pub variant: Variant,
    pub update_order: UpdateOrder,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: 64,
            model_dim: 128,
            layers: 2,
            heads: 2,
            head_dk: 64,
            head_dv: 64,
            conv_width: 4,
            mlp_expansion: 2.0,
            chunk_size: 64,
            d_init: 0.02,
            variant: Variant::CombaSplr,
            update_order: UpdateOrder::Normative,
        }
    }
}

impl ModelConfig {
    /// MLP hidden width: `round(model_dim * mlp_expansion)`.
    pub fn mlp_hidden(&self) -> usize {
        (self.model_dim as f64 * self.mlp_expansion).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let err = |detail: String| Err(KernelError::contract("model config", detail));
        if self.vocab < 2 {
            return err(format!("vocab must be at least 2, got {}", self.vocab));
        }
        if self.vocab > u16::MAX as usize + 1 {
            return err(format!("vocab must fit 16-bit tokens, got {}", self.vocab));
        }
        for (name, v) in [
            ("model_dim", self.model_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("head_dk", self.head_dk),
            ("head_dv", self.head_dv),
            ("conv_width", self.conv_width),
            ("chunk_size", self.chunk_size),
        ] {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        if !self.mlp_expansion.is_finite() || self.mlp_expansion <= 0.0 || self.mlp_hidden() == 0 {
            return err(format!("mlp_expansion {} yields no hidden units", self.mlp_expansion));
        }
        if !self.d_init.is_finite() {
            return err("d_init must be finite".to_string());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_roundtrips_json() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        let s = serde_json::to_string(&cfg).unwrap();
        let back: ModelConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(cfg, back);
        assert!(s.contains("\"comba-splr\""));
        assert!(s.contains("\"normative\""));
    }

    #[test]
    fn partial_config_fills_defaults_and_rejects_unknown_fields() {
        let cfg: ModelConfig =
            serde_json::from_str(r#"{"layers": 3, "variant": "deltanet"}"#).unwrap();
        assert_eq!(cfg.layers, 3);
        assert_eq!(cfg.variant, Variant::DeltaNet);
        assert_eq!(cfg.model_dim, 128);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"layrs": 3}"#).is_err());
        assert!(serde_json::from_str::<ModelConfig>(r#"{"variant": "comba"}"#).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for mutate in [
            (|c: &mut ModelConfig| c.vocab = 1) as fn(&mut ModelConfig),
            |c| c.vocab = 1 << 17,
            |c| c.model_dim = 0,
            |c| c.layers = 0,
            |c| c.heads = 0,
            |c| c.head_dk = 0,
            |c| c.head_dv = 0,
            |c| c.conv_width = 0,
            |c| c.chunk_size = 0,
            |c| c.mlp_expansion = 0.0,
            |c| c.mlp_expansion = f64::NAN,
            |c| c.d_init = f64::INFINITY,
        ] {
            let mut cfg = ModelConfig::default();
            mutate(&mut cfg);
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn exec_mode_names_roundtrip() {
        for m in ExecMode::ALL {
            assert_eq!(ExecMode::from_name(m.name()).unwrap(), m);
        }
        assert!(ExecMode::from_name("parallel").is_err());
    }
}
