//! Multiplication counts and peak activation memory per objective.
//!
//! "flops" here are multiplications (each multiply-accumulate counts once).
//! Peak bytes cover activations only: parameter values, parameter gradients
//! and optimizer state are excluded.
//!
//! Three sources are reported:
//! - `analytic`: closed-form dominant terms of the loss, backward taken as 2x
//!   forward;
//! - `measured_loss`: the loss alone on random embeddings, forward and
//!   backward instrumented by the tensor counter;
//! - `measured_step`: a whole update step (encoder and loss, forward and
//!   backward), which is what the ratios against CLIP are taken over.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sparc_tensor::{Graph, Tensor};

use crate::encoder::{encode, init_params, EncoderConfig, ImageTextBatch, RawEmbeddings};
use crate::error::{CoreError, Result};
use crate::losses::{compute_loss, init_loss_params, LossConfig, LossParams, MgcaConfig, Objective};

const BYTES: u64 = 8;

/// Loss-side dimensions. `attn_dim`, `prototypes` and `filip_token_drop`
/// only matter for MGCA and FILIP.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostDims {
    pub batch: usize,
    pub tokens: usize,
    pub patches: usize,
    pub dim: usize,
    pub attn_dim: usize,
    pub prototypes: usize,
    pub filip_token_drop: f64,
}

impl CostDims {
    pub fn new(batch: usize, tokens: usize, patches: usize, dim: usize) -> Self {
        let mgca = MgcaConfig::default();
        Self {
            batch,
            tokens,
            patches,
            dim,
            attn_dim: mgca.attn_dim,
            prototypes: mgca.num_prototypes,
            filip_token_drop: LossConfig::default().filip_token_drop,
        }
    }

    pub fn with_batch(self, batch: usize) -> Self {
        Self { batch, ..self }
    }

    fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.tokens == 0 || self.patches == 0 || self.dim == 0 {
            return Err(CoreError::Config(format!("cost dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Tokens FILIP keeps per caption.
    pub fn filip_tokens(&self) -> usize {
        let dropped = (self.filip_token_drop * self.tokens as f64).floor() as usize;
        (self.tokens - dropped.min(self.tokens)).max(1)
    }

    /// Loss configuration the measurements run with.
    pub fn loss_config(&self, objective: Objective) -> LossConfig {
        let mut cfg = LossConfig::with_objective(objective);
        cfg.filip_token_drop = self.filip_token_drop;
        cfg.mgca.attn_dim = self.attn_dim;
        cfg.mgca.num_prototypes = self.prototypes;
        cfg
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostSource {
    Analytic,
    MeasuredLoss,
    MeasuredStep,
}

impl fmt::Display for CostSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CostSource::Analytic => "analytic",
            CostSource::MeasuredLoss => "measured_loss",
            CostSource::MeasuredStep => "measured_step",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    pub objective: Objective,
    pub source: CostSource,
    pub dims: CostDims,
    pub flops_forward: u64,
    /// Forward plus backward.
    pub flops_total: u64,
    pub peak_bytes: u64,
    /// Named forward terms. Analytic terms and measured counter scopes
    /// share names.
    pub terms: BTreeMap<String, u64>,
}

/// Closed-form dominant forward terms, keyed like the counter scopes.
pub fn analytic_terms(objective: Objective, dims: &CostDims) -> BTreeMap<String, u64> {
    let [b, l, p, d, a, k] =
        [dims.batch, dims.tokens, dims.patches, dims.dim, dims.attn_dim, dims.prototypes].map(|x| x as u64);
    let mut t = BTreeMap::new();
    let mut put = |name: &str, v: u64| {
        t.insert(name.to_string(), v);
    };
    match objective {
        Objective::Clip => put("global_logits", b * b * d),
        Objective::Sparc | Objective::SparcNoSparsity | Objective::SparcSoftmax => {
            put("global_logits", b * b * d);
            put("similarity", b * l * p * d);
            put("grouping", b * l * p * d);
            put("sequence_logits", b * l * l * d);
        }
        Objective::Filip => put("token_patch_similarity", b * b * dims.filip_tokens() as u64 * p * d),
        Objective::Pacl => {
            put("patch_text_similarity", b * b * p * d);
            put("weighted_pooling", b * b * p * d);
            put("pooled_logits", b * b * d);
        }
        Objective::Gloria => {
            put("global_logits", b * b * d);
            put("token_patch_similarity", b * b * l * p * d);
            put("attention_pooling", b * b * l * p * d);
            put("local_logits", b * b * l * d);
        }
        Objective::Mgca => {
            put("global_logits", b * b * d);
            // both directions: q/k/v/o projections plus scores and context
            put("cross_attention", b * (4 * (l + p) * d * a + 4 * l * p * a));
            put("sequence_logits", b * (l * l + p * p) * d);
            put("prototype_scores", 2 * b * k * d);
        }
    }
    t
}

/// Elements in the largest intermediate the objective keeps for backward.
fn largest_intermediate(objective: Objective, dims: &CostDims) -> u64 {
    let [b, l, p, d, a, k] =
        [dims.batch, dims.tokens, dims.patches, dims.dim, dims.attn_dim, dims.prototypes].map(|x| x as u64);
    match objective {
        Objective::Clip => b * b,
        Objective::Sparc | Objective::SparcNoSparsity | Objective::SparcSoftmax => (b * b).max(b * l * p),
        Objective::Filip => b * b * dims.filip_tokens() as u64 * p,
        Objective::Pacl => b * b * p.max(d),
        Objective::Gloria => b * b * l * p.max(d),
        Objective::Mgca => (b * b).max(b * l * p).max(b * (l + p) * a).max(b * k),
    }
}

pub fn analytic_entry(objective: Objective, dims: &CostDims) -> Result<CostEntry> {
    dims.validate()?;
    let terms = analytic_terms(objective, dims);
    let forward: u64 = terms.values().sum();
    Ok(CostEntry {
        objective,
        source: CostSource::Analytic,
        dims: *dims,
        flops_forward: forward,
        flops_total: 3 * forward,
        peak_bytes: BYTES * largest_intermediate(objective, dims),
        terms,
    })
}

/// [`analytic_entry`] by objective name.
pub fn analytic_cost(objective: &str, dims: &CostDims) -> Result<CostEntry> {
    analytic_entry(objective.parse()?, dims)
}

/// Runs the loss forward and backward on random full-length embeddings.
pub fn measured_cost(objective: Objective, dims: &CostDims, seed: u64) -> Result<CostEntry> {
    dims.validate()?;
    let cfg = dims.loss_config(objective);
    let lengths = vec![dims.tokens; dims.batch];
    let raw = RawEmbeddings::random(dims.batch, dims.tokens, dims.patches, dims.dim, &lengths, seed);
    let mut g = Graph::new();
    let e = raw.bind(&mut g, true)?;
    let params = init_loss_params(&cfg, dims.dim, seed)?.bind(&mut g);
    let lp = LossParams::from_bound(&mut g, &cfg, &params)?;
    let before = g.counter().forward.mults;
    let out = compute_loss(&mut g, &e, &lp, &cfg)?;
    let forward = g.counter().forward.mults - before;
    g.backward(out.total)?;
    let c = g.counter();
    Ok(CostEntry {
        objective,
        source: CostSource::MeasuredLoss,
        dims: *dims,
        flops_forward: forward,
        flops_total: forward + c.backward.mults,
        peak_bytes: c.peak_activation_bytes,
        terms: c.scopes.iter().map(|(k, v)| (k.clone(), v.mults)).collect(),
    })
}

/// Encoder configuration matching the loss dimensions of `dims`.
pub fn step_encoder(dims: &CostDims, base: &EncoderConfig) -> EncoderConfig {
    EncoderConfig {
        num_patches: dims.patches,
        max_tokens: dims.tokens,
        shared_dim: dims.dim,
        ..base.clone()
    }
}

fn random_batch(cfg: &EncoderConfig, batch: usize, seed: u64) -> Result<ImageTextBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = batch * cfg.num_patches * cfg.patch_dim;
    let patches = Tensor::new(
        vec![batch, cfg.num_patches, cfg.patch_dim],
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let token_ids = (0..batch)
        .map(|_| (0..cfg.max_tokens).map(|_| rng.gen_range(0..cfg.vocab_size)).collect())
        .collect();
    Ok(ImageTextBatch {
        patches,
        token_ids,
        token_mask: vec![vec![true; cfg.max_tokens]; batch],
    })
}

/// Whole update step: encoder and loss, forward and backward.
pub fn measured_step_cost(objective: Objective, dims: &CostDims, base: &EncoderConfig, seed: u64) -> Result<CostEntry> {
    dims.validate()?;
    let enc = step_encoder(dims, base);
    let cfg = dims.loss_config(objective);
    let mut params = init_params(&enc, seed)?;
    params.extend(init_loss_params(&cfg, dims.dim, seed)?);
    let batch = random_batch(&enc, dims.batch, seed)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let e = encode(&mut g, &enc, &p, &batch)?;
    let lp = LossParams::from_bound(&mut g, &cfg, &p)?;
    let out = compute_loss(&mut g, &e, &lp, &cfg)?;
    g.backward(out.total)?;
    let c = g.counter();
    Ok(CostEntry {
        objective,
        source: CostSource::MeasuredStep,
        dims: *dims,
        flops_forward: c.forward.mults,
        flops_total: c.mults(),
        peak_bytes: c.peak_activation_bytes,
        terms: c.scopes.iter().map(|(k, v)| (k.clone(), v.mults)).collect(),
    })
}

/// Every objective at every batch size, from every source. Grid points run
/// on separate threads; output order is objective-major, then batch, then
/// source.
pub fn sweep(
    objectives: &[Objective],
    batches: &[usize],
    dims: &CostDims,
    encoder: &EncoderConfig,
    seed: u64,
) -> Result<Vec<CostEntry>> {
    let points: Vec<(Objective, CostDims)> = objectives
        .iter()
        .flat_map(|&o| batches.iter().map(move |&b| (o, dims.with_batch(b))))
        .collect();
    let results: Vec<Result<[CostEntry; 3]>> = std::thread::scope(|s| {
        let handles: Vec<_> = points
            .iter()
            .map(|(o, d)| {
                s.spawn(move || {
                    Ok([
                        analytic_entry(*o, d)?,
                        measured_cost(*o, d, seed)?,
                        measured_step_cost(*o, d, encoder, seed)?,
                    ])
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("cost sweep worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(3 * points.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Desk-scale sweep used by the CLI and the scaling checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSetup {
    pub objectives: Vec<Objective>,
    pub batches: Vec<usize>,
    pub dims: CostDims,
    pub encoder: EncoderConfig,
    pub seed: u64,
}

impl Default for SweepSetup {
    fn default() -> Self {
        let mut dims = CostDims::new(2, 8, 32, 64);
        // 500 prototypes is negligible next to a 16k batch but not next to
        // B = 2; keep the bank at the patch count instead
        dims.prototypes = 32;
        Self {
            objectives: vec![
                Objective::Clip,
                Objective::Sparc,
                Objective::Filip,
                Objective::Mgca,
                Objective::Gloria,
                Objective::Pacl,
            ],
            batches: vec![2, 4, 8, 16],
            dims,
            encoder: EncoderConfig {
                patch_dim: 48,
                model_width: 64,
                num_layers: 4,
                num_heads: 2,
                vocab_size: 64,
                ..EncoderConfig::default()
            },
            seed: 0,
        }
    }
}

impl SweepSetup {
    pub fn run(&self) -> Result<Vec<CostEntry>> {
        sweep(&self.objectives, &self.batches, &self.dims, &self.encoder, self.seed)
    }
}

/// One objective at one batch size, divided by CLIP from the same source.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativeCost {
    pub objective: Objective,
    pub batch: usize,
    pub flops: f64,
    pub peak_bytes: f64,
}

/// Ratios against CLIP for every non-CLIP entry of `source`. Entries
/// without a CLIP counterpart at the same batch size are skipped.
pub fn relative_to_clip(entries: &[CostEntry], source: CostSource) -> Vec<RelativeCost> {
    entries
        .iter()
        .filter(|e| e.source == source && e.objective != Objective::Clip)
        .filter_map(|e| {
            let clip = find(entries, Objective::Clip, source, e.dims.batch)?;
            Some(RelativeCost {
                objective: e.objective,
                batch: e.dims.batch,
                flops: e.flops_total as f64 / clip.flops_total as f64,
                peak_bytes: e.peak_bytes as f64 / clip.peak_bytes as f64,
            })
        })
        .collect()
}

/// Looks up one entry of a sweep.
pub fn find(entries: &[CostEntry], objective: Objective, source: CostSource, batch: usize) -> Option<&CostEntry> {
    entries
        .iter()
        .find(|e| e.objective == objective && e.source == source && e.dims.batch == batch)
}

pub const CSV_HEADER: &str = "objective,source,B,L,P,d,flops_forward,flops_total,peak_bytes";

pub fn write_csv(w: &mut impl Write, entries: &[CostEntry]) -> Result<()> {
    writeln!(w, "# flops = multiplications; peak_bytes = activations only (no parameters, parameter gradients or optimizer state)")?;
    writeln!(w, "{CSV_HEADER}")?;
    for e in entries {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            e.objective, e.source, e.dims.batch, e.dims.tokens, e.dims.patches, e.dims.dim, e.flops_forward, e.flops_total, e.peak_bytes
        )?;
    }
    Ok(())
}
