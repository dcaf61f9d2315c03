//! Training configuration, read from a flat `key = value` file (TOML
//! syntax; dotted keys address the `loss.`, `model.` and `data.` groups).
//!
//! ```text
//! # SPARC on planted data
//! loss.objective = "sparc"
//! loss.lambda_f = 1.0
//! model.dim = 32
//! data.noise_std = 0.2
//! lr = 1e-3
//! total_steps = 2000
//! ```
//!
//! Every key is optional. `loss.*` takes the fields of
//! [`LossConfig`](sparc_core::losses::LossConfig) (`sparsity_threshold` is
//! `"auto"` or `{ value = 0.1 }`), `data.*` those of
//! [`SyntheticSpec`]. The encoder reads its patch count, caption length,
//! vocabulary and patch width from `data.*`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sparc_core::encoder::EncoderConfig;
use sparc_core::losses::LossConfig;

use crate::data::SyntheticSpec;
use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    /// Shared embedding width d.
    pub dim: usize,
    pub positional: bool,
    /// Keep the non-linear h_v on the global image path.
    pub global_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 32,
            layers: 1,
            heads: 2,
            dim: 32,
            positional: false,
            global_head: false,
        }
    }
}

/// How metric timestamps are produced. `Logical` stamps step `n` as
/// `1970-01-01T00:00:00Z` plus `n` seconds so that reruns are
/// byte-identical; `Wall` uses the current UTC time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clock {
    #[default]
    Logical,
    Wall,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub data: SyntheticSpec,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Held-out evaluation period in steps; 0 evaluates only at the start
    /// and the end.
    pub eval_every: usize,
    pub eval_batches: usize,
    pub eval_batch_size: usize,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub clock: Clock,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            data: SyntheticSpec::default(),
            lr: 1e-3,
            weight_decay: 0.1,
            warmup_steps: 100,
            total_steps: 2000,
            batch_size: 32,
            seed: 0,
            eval_every: 250,
            eval_batches: 4,
            eval_batch_size: 32,
            checkpoint_every: 0,
            clock: Clock::Logical,
        }
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut String) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        v => out.push_str(&format!("{prefix} = {v}\n")),
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Flat dotted-key form; `parse(to_text())` gives back the same config.
    pub fn to_text(&self) -> String {
        let value = toml::Value::try_from(self).expect("config serializes");
        let mut out = String::new();
        flatten("", &value, &mut out);
        out
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            num_patches: self.data.num_patches,
            max_tokens: self.data.max_tokens,
            vocab_size: self.data.vocab_size,
            patch_dim: self.data.patch_dim,
            model_width: self.model.width,
            num_layers: self.model.layers,
            num_heads: self.model.heads,
            shared_dim: self.model.dim,
            positional: self.model.positional,
            global_head: self.model.global_head,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.total_steps == 0 || self.batch_size == 0 {
            return bad("total_steps and batch_size must be positive");
        }
        if self.warmup_steps > self.total_steps {
            return bad("warmup_steps exceeds total_steps");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return bad("lr must be positive and weight_decay nonnegative");
        }
        if self.eval_batches == 0 || self.eval_batch_size < 5 {
            return bad("need at least one held-out batch of five or more pairs (recall at 5)");
        }
        if self.batch_size < 2 {
            return bad("contrastive objectives need batch_size >= 2");
        }
        self.loss.validate()?;
        self.data.validate()?;
        self.encoder().validate()?;
        Ok(())
    }
}
