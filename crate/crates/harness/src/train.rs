//! Training loop on synthetic planted data, held-out evaluation and run
//! directory layout.
//!
//! A run directory holds `config.toml`, `metrics.jsonl` (one JSON object per
//! step), `checkpoints/*.ckpt` and `report.json`. A non-finite loss or
//! gradient stops the run with `checkpoints/last_good.ckpt` and
//! `nan_dump.json`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sparc_core::encoder::{encode, init_params, ImageTextBatch, RawEmbeddings};
use sparc_core::losses::{
    compute_alignment, compute_loss, init_loss_params, AlignmentMatrices, AlignmentMode,
    LossParams, LOG_INV_TEMPERATURE,
};
use sparc_core::metrics::{cosine_similarity_matrix, recall_at_k};
use sparc_core::params::ParamStore;
use sparc_core::CoreError;
use sparc_tensor::{Graph, Tensor, TensorError};

use crate::config::{Clock, TrainConfig};
use crate::data::{generate_batch, PlantedAlignment};
use crate::error::{HarnessError, Result};
use crate::optim::{adamw_step, lr_schedule, AdamHyper, AdamState};
use crate::recovery::{alignment_recovery_score, RecoveryScore};

/// Upper bound on the learned inverse temperature (as in CLIP).
pub const MAX_INV_TEMPERATURE: f64 = 100.0;

const EVAL_SALT: u64 = 0x5eed_e7a1;

pub type HeldOut = Vec<(ImageTextBatch, PlantedAlignment)>;

/// Encoder and loss parameters at initialization.
pub fn init_run_params(cfg: &TrainConfig) -> Result<ParamStore> {
    let mut params = init_params(&cfg.encoder(), cfg.seed)?;
    params.extend(init_loss_params(&cfg.loss, cfg.model.dim, cfg.seed)?);
    Ok(params)
}

/// Held-out planted batches; disjoint seed stream from training.
pub fn held_out_set(cfg: &TrainConfig) -> Result<HeldOut> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ EVAL_SALT);
    (0..cfg.eval_batches)
        .map(|_| generate_batch(&cfg.data, cfg.eval_batch_size, rng.next_u64()))
        .collect()
}

/// Embeddings of a batch under fixed parameters.
pub fn embed(params: &ParamStore, cfg: &TrainConfig, batch: &ImageTextBatch) -> Result<RawEmbeddings> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let e = encode(&mut g, &cfg.encoder(), &p, batch)?;
    Ok(RawEmbeddings::from_graph(&g, &e))
}

/// Per-pair alignment weights over the valid tokens of every pair.
pub fn recover_alignments(
    raw: &RawEmbeddings,
    mode: AlignmentMode,
    sigma: f64,
) -> Result<Vec<AlignmentMatrices>> {
    (0..raw.batch_size())
        .map(|i| {
            let t = raw.t.index_first(i);
            let d = t.shape()[1];
            let len = raw.lengths[i];
            let t = Tensor::new(vec![len, d], t.data()[..len * d].to_vec())?;
            Ok(compute_alignment(&t, &raw.v.index_first(i), sigma, mode)?)
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub image_to_text_r1: f64,
    pub image_to_text_r5: f64,
    pub text_to_image_r1: f64,
    pub text_to_image_r5: f64,
    /// SPARC variants only, scored with the run's own alignment mode.
    pub recovery: Option<RecoveryScore>,
}

impl EvalMetrics {
    pub fn scalars(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::from([
            ("i2t_r1".to_string(), self.image_to_text_r1),
            ("i2t_r5".to_string(), self.image_to_text_r5),
            ("t2i_r1".to_string(), self.text_to_image_r1),
            ("t2i_r5".to_string(), self.text_to_image_r5),
        ]);
        if let Some(r) = &self.recovery {
            m.insert("align_precision".into(), r.precision);
            m.insert("align_recall".into(), r.recall);
            if let Some(x) = r.multi_patch_recall {
                m.insert("align_recall_multi".into(), x);
            }
        }
        m
    }
}

/// Retrieval recall and, for SPARC variants, alignment recovery, averaged
/// over the held-out batches.
pub fn evaluate(params: &ParamStore, cfg: &TrainConfig, held_out: &HeldOut) -> Result<EvalMetrics> {
    let mode = AlignmentMode::for_objective(cfg.loss.objective);
    let sigma = cfg.loss.sparsity_threshold.resolve(cfg.data.num_patches);
    let n = held_out.len() as f64;
    let mut out = EvalMetrics::default();
    let mut rec = RecoveryScore::default();
    let (mut multi, mut multi_n) = (0.0, 0usize);
    for (batch, planted) in held_out {
        let raw = embed(params, cfg, batch)?;
        let sim = cosine_similarity_matrix(&raw.v_bar, &raw.t_bar)?;
        let r = recall_at_k(&sim, &[1, 5])?;
        out.image_to_text_r1 += r.image_to_text[&1] / n;
        out.image_to_text_r5 += r.image_to_text[&5] / n;
        out.text_to_image_r1 += r.text_to_image[&1] / n;
        out.text_to_image_r5 += r.text_to_image[&5] / n;
        if let Some(mode) = mode {
            let s = alignment_recovery_score(&recover_alignments(&raw, mode, sigma)?, planted)?;
            rec.precision += s.precision / n;
            rec.recall += s.recall / n;
            rec.tokens += s.tokens;
            if let Some(x) = s.multi_patch_recall {
                multi += x * s.multi_patch_tokens as f64;
                multi_n += s.multi_patch_tokens;
            }
        }
    }
    if mode.is_some() {
        rec.multi_patch_tokens = multi_n;
        rec.multi_patch_recall = (multi_n > 0).then(|| multi / multi_n as f64);
        out.recovery = Some(rec);
    }
    Ok(out)
}

fn timestamp(clock: Clock, step: usize) -> String {
    let t = match clock {
        Clock::Logical => DateTime::<Utc>::from_timestamp(step as i64, 0).expect("in range"),
        Clock::Wall => Utc::now(),
    };
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub steps: usize,
    pub final_loss: f64,
    pub initial_eval: EvalMetrics,
    pub final_eval: EvalMetrics,
}

/// Checkpoint metadata carries the full configuration so a checkpoint alone
/// is enough for evaluation.
pub fn save_checkpoint(path: &Path, params: &ParamStore, cfg: &TrainConfig, step: usize) -> Result<()> {
    let meta = json!({ "step": step, "config": cfg });
    params.save(path, &meta)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, TrainConfig, usize)> {
    let (params, meta) = ParamStore::load(path)?;
    let cfg: TrainConfig = serde_json::from_value(meta["config"].clone())?;
    let step = meta["step"].as_u64().unwrap_or(0) as usize;
    Ok((params, cfg, step))
}

struct StepResult {
    loss: f64,
    components: BTreeMap<String, f64>,
    diagnostics: BTreeMap<String, f64>,
    grads: BTreeMap<String, Tensor>,
}

fn forward_backward(params: &ParamStore, cfg: &TrainConfig, batch: &ImageTextBatch, step: usize) -> Result<StepResult> {
    let mut loss_cfg = cfg.loss.clone();
    loss_cfg.seed = cfg.loss.seed ^ step as u64;
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let e = encode(&mut g, &cfg.encoder(), &p, batch)?;
    let lp = LossParams::from_bound(&mut g, &loss_cfg, &p)?;
    let out = compute_loss(&mut g, &e, &lp, &loss_cfg)?;
    g.backward(out.total)?;
    let grads = p
        .iter()
        .filter_map(|(name, &v)| g.grad(v).map(|t| (name.clone(), t.clone())))
        .collect();
    Ok(StepResult {
        loss: out.value(&g),
        components: out.components,
        diagnostics: out.diagnostics,
        grads,
    })
}

fn record(clock: Clock, step: usize, scalars: impl IntoIterator<Item = (String, f64)>) -> String {
    let mut m = Map::new();
    m.insert("timestamp".into(), Value::String(timestamp(clock, step)));
    m.insert("step".into(), json!(step));
    for (k, v) in scalars {
        m.insert(k, json!(v));
    }
    Value::Object(m).to_string()
}

fn eval_scalars(e: &EvalMetrics) -> impl Iterator<Item = (String, f64)> {
    e.scalars().into_iter().map(|(k, v)| (format!("eval.{k}"), v))
}

fn is_non_finite(e: &HarnessError) -> bool {
    matches!(
        e,
        HarnessError::Tensor(TensorError::NonFinite { .. })
            | HarnessError::Core(CoreError::Tensor(TensorError::NonFinite { .. }))
    )
}

/// Saves the parameters as they were before the failing step and writes the
/// dump; returns the error to surface.
fn abort(run_dir: &Path, params: &ParamStore, cfg: &TrainConfig, step: usize, body: &Value) -> Result<HarnessError> {
    let checkpoint = run_dir.join("checkpoints").join("last_good.ckpt");
    save_checkpoint(&checkpoint, params, cfg, step)?;
    let dump = run_dir.join("nan_dump.json");
    fs::write(&dump, serde_json::to_string_pretty(body)?)?;
    Ok(HarnessError::NonFinite { step, checkpoint, dump })
}

/// Trains from scratch into `run_dir` (created if needed).
pub fn train(cfg: &TrainConfig, run_dir: &Path) -> Result<RunSummary> {
    train_from(cfg, run_dir, init_run_params(cfg)?)
}

/// Trains starting from the given parameters, which must cover every
/// parameter the config's encoder and loss read.
pub fn train_from(cfg: &TrainConfig, run_dir: &Path, mut params: ParamStore) -> Result<RunSummary> {
    cfg.validate()?;
    let ckpt_dir = run_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    fs::write(run_dir.join("config.toml"), cfg.to_text())?;
    let mut metrics = BufWriter::new(File::create(run_dir.join("metrics.jsonl"))?);

    let mut state = AdamState::default();
    let hyper = AdamHyper::default();
    let held_out = held_out_set(cfg)?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let max_log_inv = MAX_INV_TEMPERATURE.ln();

    let initial_eval = evaluate(&params, cfg, &held_out)?;
    let mut final_loss = f64::NAN;
    for step in 0..cfg.total_steps {
        let (batch, _) = generate_batch(&cfg.data, cfg.batch_size, data_rng.next_u64())?;
        let lr = lr_schedule(step, cfg.lr, cfg.warmup_steps, cfg.total_steps);
        let r = match forward_backward(&params, cfg, &batch, step) {
            Ok(r) => r,
            Err(e) if is_non_finite(&e) => {
                metrics.flush()?;
                let body = json!({ "step": step, "error": e.to_string() });
                return Err(abort(run_dir, &params, cfg, step, &body)?);
            }
            Err(e) => return Err(e),
        };

        let mut scalars: Vec<(String, f64)> = vec![("lr".into(), lr), ("loss".into(), r.loss)];
        scalars.extend(r.components.iter().map(|(k, v)| (format!("loss.{k}"), *v)));
        scalars.extend(r.diagnostics.iter().map(|(k, v)| (format!("diag.{k}"), *v)));
        if step == 0 {
            scalars.extend(eval_scalars(&initial_eval));
        } else if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            scalars.extend(eval_scalars(&evaluate(&params, cfg, &held_out)?));
        }
        writeln!(metrics, "{}", record(cfg.clock, step, scalars))?;

        let bad: Vec<&String> = r
            .grads
            .iter()
            .filter(|(_, t)| !t.is_finite())
            .map(|(k, _)| k)
            .collect();
        if !r.loss.is_finite() || !bad.is_empty() {
            metrics.flush()?;
            let body = json!({
                "step": step,
                "loss": r.loss,
                "components": r.components,
                "diagnostics": r.diagnostics,
                "non_finite_gradients": bad,
            });
            return Err(abort(run_dir, &params, cfg, step, &body)?);
        }
        final_loss = r.loss;

        adamw_step(&mut params, &r.grads, &mut state, &hyper, lr, cfg.weight_decay, |_, t| {
            t.rank() >= 2
        })?;
        if let Ok(t) = params.get_mut(LOG_INV_TEMPERATURE) {
            let x = t.item().min(max_log_inv);
            *t = Tensor::scalar(x);
        }
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            save_checkpoint(&ckpt_dir.join(format!("step_{:06}.ckpt", step + 1)), &params, cfg, step + 1)?;
        }
    }

    let final_eval = evaluate(&params, cfg, &held_out)?;
    writeln!(metrics, "{}", record(cfg.clock, cfg.total_steps, eval_scalars(&final_eval)))?;
    metrics.flush()?;
    save_checkpoint(&ckpt_dir.join("final.ckpt"), &params, cfg, cfg.total_steps)?;

    let summary = RunSummary {
        run_dir: run_dir.to_path_buf(),
        steps: cfg.total_steps,
        final_loss,
        initial_eval,
        final_eval,
    };
    let report = json!({
        "objective": cfg.loss.objective,
        "steps": summary.steps,
        "final_loss": summary.final_loss,
        "initial_eval": summary.initial_eval,
        "final_eval": summary.final_eval,
    });
    fs::write(run_dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(summary)
}
