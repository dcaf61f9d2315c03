//! Contrastive objectives over an [`EmbeddingSet`]: SPARC with its ablations
//! and the CLIP, FILIP, PACL, GLoRIA and MGCA baselines.

mod baselines;
mod mgca;
mod sparc;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sparc_tensor::{Graph, Tensor, Var};

use crate::encoder::{truncated_normal, EmbeddingSet};
use crate::error::{CoreError, Result};
use crate::params::{BoundParams, ParamStore};

pub use baselines::{filip_loss, gloria_loss, pacl_loss, FILIP_TEXT_SIDE};
pub use mgca::{cross_attention, mgca_loss, prototype_codes, sinkhorn_knopp};
pub use sparc::{
    alignment, compute_alignment, fine_grained_contrastive, fine_grained_pair, group_patches,
    sparc_loss, AlignmentMatrices, AlignmentMode, AlignmentVars,
};

/// Norm floor used by every cosine similarity.
pub const NORM_EPS: f64 = 1e-8;

pub const LOG_INV_TEMPERATURE: &str = "loss.log_inv_temperature";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Sparc,
    SparcNoSparsity,
    SparcSoftmax,
    Clip,
    Filip,
    Pacl,
    Gloria,
    Mgca,
}

impl Objective {
    pub const ALL: [Objective; 8] = [
        Objective::Sparc,
        Objective::SparcNoSparsity,
        Objective::SparcSoftmax,
        Objective::Clip,
        Objective::Filip,
        Objective::Pacl,
        Objective::Gloria,
        Objective::Mgca,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Sparc => "sparc",
            Objective::SparcNoSparsity => "sparc_no_sparsity",
            Objective::SparcSoftmax => "sparc_softmax",
            Objective::Clip => "clip",
            Objective::Filip => "filip",
            Objective::Pacl => "pacl",
            Objective::Gloria => "gloria",
            Objective::Mgca => "mgca",
        }
    }

    pub fn is_sparc(self) -> bool {
        matches!(
            self,
            Objective::Sparc | Objective::SparcNoSparsity | Objective::SparcSoftmax
        )
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| CoreError::UnknownObjective(s.to_string()))
    }
}

/// Sparsity threshold σ; `Auto` resolves to `1/P` at call time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    Auto,
    Value(f64),
}

impl Threshold {
    pub fn resolve(self, num_patches: usize) -> f64 {
        match self {
            Threshold::Auto => 1.0 / num_patches as f64,
            Threshold::Value(v) => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MgcaConfig {
    pub num_heads: usize,
    pub attn_dim: usize,
    pub num_prototypes: usize,
    pub sinkhorn_eps: f64,
    pub sinkhorn_iters: usize,
    /// Temperature of the prototype assignment softmax.
    pub proto_temperature: f64,
}

impl Default for MgcaConfig {
    fn default() -> Self {
        Self {
            num_heads: 1,
            attn_dim: 128,
            num_prototypes: 500,
            sinkhorn_eps: 0.05,
            sinkhorn_iters: 3,
            proto_temperature: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub objective: Objective,
    pub lambda_g: f64,
    pub lambda_f: f64,
    /// Initial (or fixed) temperature τ.
    pub temperature: f64,
    pub learnable_temperature: bool,
    pub sparsity_threshold: Threshold,
    pub filip_token_drop: f64,
    pub gloria_scale: bool,
    pub mgca: MgcaConfig,
    /// Seeds stochastic parts of an objective (FILIP token dropping).
    pub seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Sparc,
            lambda_g: 0.5,
            lambda_f: 1.0,
            temperature: 0.07,
            learnable_temperature: true,
            sparsity_threshold: Threshold::Auto,
            filip_token_drop: 0.2,
            gloria_scale: true,
            mgca: MgcaConfig::default(),
            seed: 0,
        }
    }
}

impl LossConfig {
    pub fn with_objective(objective: Objective) -> Self {
        Self {
            objective,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if !(self.lambda_g >= 0.0 && self.lambda_f >= 0.0) {
            return bad("loss weights must be nonnegative".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!(
                "temperature must be positive, got {}",
                self.temperature
            ));
        }
        if let Threshold::Value(s) = self.sparsity_threshold {
            if !(0.0..=1.0).contains(&s) {
                return bad(format!("sparsity threshold {s} outside [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.filip_token_drop) {
            return bad(format!(
                "token drop {} outside [0, 1)",
                self.filip_token_drop
            ));
        }
        let m = &self.mgca;
        if m.num_heads != 1 {
            return bad("only single-head token attention is supported".into());
        }
        if m.attn_dim == 0 || m.num_prototypes == 0 || m.sinkhorn_iters == 0 {
            return bad("attention/prototype sizes and iteration count must be positive".into());
        }
        if !(m.sinkhorn_eps > 0.0 && m.proto_temperature > 0.0) {
            return bad("sinkhorn eps and prototype temperature must be positive".into());
        }
        Ok(())
    }
}

/// Scalar total plus named parts. `total` is a graph handle so callers can
/// differentiate it.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub total: Var,
    pub components: BTreeMap<String, f64>,
    pub diagnostics: BTreeMap<String, f64>,
    /// Per-pair alignment matrices (SPARC variants only).
    pub alignments: Vec<AlignmentMatrices>,
}

impl LossOutput {
    pub fn value(&self, g: &Graph) -> f64 {
        g.value(self.total).item()
    }
}

/// Loss-side graph handles: the inverse temperature and, for MGCA, its
/// attention and prototype parameters.
#[derive(Clone, Debug)]
pub struct LossParams {
    /// Scalar `1/τ`.
    pub inv_temperature: Var,
    pub mgca: Option<MgcaParams>,
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

#[derive(Clone, Debug)]
pub struct MgcaParams {
    pub word: AttentionParams,
    pub patch: AttentionParams,
    /// `[K, d]`
    pub prototypes: Var,
    /// Fixed `(image, text)` Sinkhorn codes; recomputed from the scores when
    /// absent.
    pub frozen_codes: Option<(Tensor, Tensor)>,
}

impl LossParams {
    /// Fixed temperature, no MGCA parameters.
    pub fn fixed(g: &mut Graph, temperature: f64) -> Self {
        Self {
            inv_temperature: g.scalar(1.0 / temperature),
            mgca: None,
        }
    }

    /// Reads loss parameters from a bound store; a fixed temperature is used
    /// when the store has no log-inverse-temperature entry.
    pub fn from_bound(g: &mut Graph, cfg: &LossConfig, p: &BoundParams) -> Result<Self> {
        let inv_temperature = if cfg.learnable_temperature {
            let log_inv = p.get(LOG_INV_TEMPERATURE)?;
            g.exp(log_inv)?
        } else {
            g.scalar(1.0 / cfg.temperature)
        };
        let mgca = if cfg.objective == Objective::Mgca {
            let attn = |side: &str| -> Result<AttentionParams> {
                Ok(AttentionParams {
                    wq: p.get(&format!("mgca.{side}.q"))?,
                    wk: p.get(&format!("mgca.{side}.k"))?,
                    wv: p.get(&format!("mgca.{side}.v"))?,
                    wo: p.get(&format!("mgca.{side}.o"))?,
                })
            };
            Some(MgcaParams {
                word: attn("word")?,
                patch: attn("patch")?,
                prototypes: p.get("mgca.prototypes")?,
                frozen_codes: None,
            })
        } else {
            None
        };
        Ok(Self {
            inv_temperature,
            mgca,
        })
    }
}

/// Parameters owned by the objective itself, for embeddings of width `d`.
pub fn init_loss_params(cfg: &LossConfig, d: usize, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    if cfg.learnable_temperature {
        store.insert(
            LOG_INV_TEMPERATURE,
            Tensor::scalar((1.0 / cfg.temperature).ln()),
        );
    }
    if cfg.objective == Objective::Mgca {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d67_6361);
        let a = cfg.mgca.attn_dim;
        for side in ["word", "patch"] {
            for proj in ["q", "k", "v"] {
                let w = truncated_normal(&mut rng, vec![d, a], 1.0 / (d as f64).sqrt());
                store.insert(format!("mgca.{side}.{proj}"), w);
            }
            let wo = truncated_normal(&mut rng, vec![a, d], 1.0 / (a as f64).sqrt());
            store.insert(format!("mgca.{side}.o"), wo);
        }
        let protos = truncated_normal(&mut rng, vec![cfg.mgca.num_prototypes, d], 1.0);
        store.insert("mgca.prototypes", protos);
    }
    Ok(store)
}

/// Evaluates the configured objective.
pub fn compute_loss(
    g: &mut Graph,
    e: &EmbeddingSet,
    lp: &LossParams,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    match cfg.objective {
        Objective::Sparc | Objective::SparcNoSparsity | Objective::SparcSoftmax => {
            sparc_loss(g, e, lp, cfg)
        }
        Objective::Clip => clip_loss(g, e, lp),
        Objective::Filip => filip_loss(g, e, lp, cfg),
        Objective::Pacl => pacl_loss(g, e, lp),
        Objective::Gloria => gloria_loss(g, e, lp, cfg),
        Objective::Mgca => mgca_loss(g, e, lp, cfg),
    }
}

// ---- shared pieces -------------------------------------------------------

pub(crate) fn require_pairs(objective: &'static str, batch: usize) -> Result<()> {
    if batch < 2 {
        return Err(CoreError::TooFewPairs { objective, batch });
    }
    Ok(())
}

/// Symmetric InfoNCE on a square logit matrix whose diagonal holds the
/// positives: `-(1/2n) Σ_i [log softmax_row(i)_i + log softmax_col(i)_i]`.
pub fn symmetric_infonce(g: &mut Graph, logits: Var) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(CoreError::Batch(format!(
            "logits must be square, got {shape:?}"
        )));
    }
    let n = shape[0];
    let rows = g.log_softmax(logits, 1)?;
    let cols = g.log_softmax(logits, 0)?;
    let rd = g.diagonal(rows)?;
    let cd = g.diagonal(cols)?;
    let both = g.concat(&[rd, cd], 0)?;
    let s = g.sum_all(both)?;
    Ok(g.scale(s, -1.0 / (2 * n) as f64)?)
}

/// Runs `f` with its forward counts attributed to `scope`.
pub(crate) fn scoped<T>(
    g: &mut Graph,
    scope: &str,
    f: impl FnOnce(&mut Graph) -> Result<T>,
) -> Result<T> {
    let prev = g.set_scope(Some(scope));
    let out = f(g);
    g.set_scope(prev.as_deref());
    out
}

/// `[m, d] x [n, d] -> [m, n]` cosine similarities; only the product is
/// counted under `scope`.
pub(crate) fn cosine_matrix(g: &mut Graph, a: Var, b: Var, scope: &str) -> Result<Var> {
    let an = g.l2_normalize(a, 1, NORM_EPS)?;
    let bn = g.l2_normalize(b, 1, NORM_EPS)?;
    let bt = g.transpose(bn)?;
    scoped(g, scope, |g| Ok(g.matmul(an, bt)?))
}

/// Batch-wise contrastive loss on pooled embeddings, cosine logits.
pub fn global_contrastive(
    g: &mut Graph,
    v_bar: Var,
    t_bar: Var,
    inv_temperature: Var,
) -> Result<Var> {
    require_pairs("global contrastive", g.shape(v_bar)[0])?;
    let sim = cosine_matrix(g, v_bar, t_bar, "global_logits")?;
    let logits = g.mul(sim, inv_temperature)?;
    symmetric_infonce(g, logits)
}

pub fn clip_loss(g: &mut Graph, e: &EmbeddingSet, lp: &LossParams) -> Result<LossOutput> {
    let global = global_contrastive(g, e.v_bar, e.t_bar, lp.inv_temperature)?;
    let mut out = output(g, global, &[("global", global)]);
    temperature_diagnostic(g, lp, &mut out);
    Ok(out)
}

pub(crate) fn output(g: &Graph, total: Var, parts: &[(&str, Var)]) -> LossOutput {
    LossOutput {
        total,
        components: parts
            .iter()
            .map(|(k, v)| (k.to_string(), g.value(*v).item()))
            .collect(),
        diagnostics: BTreeMap::new(),
        alignments: Vec::new(),
    }
}

pub(crate) fn temperature_diagnostic(g: &Graph, lp: &LossParams, out: &mut LossOutput) {
    let inv = g.value(lp.inv_temperature).item();
    out.diagnostics.insert("temperature".into(), 1.0 / inv);
}
