//! Checkpoint evaluation on held-out planted data: retrieval, K-Precision
//! over concept words and zero-shot segmentation of the patch grid.
//!
//! Concept `c` is written as the word `concept<c>`. The lexicon tags
//! concepts with `c % 4 == 1` as adjectives, `c % 4 == 3` as function words
//! and the rest as nouns, so the noun/adjective filter has something to
//! remove.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sparc_core::encoder::{encode, ImageTextBatch};
use sparc_core::metrics::{
    cosine_similarity_matrix, k_precision, zero_shot_segment, KPrecisionMode, LexiconTagger,
    PosTag, SegmentationTask,
};
use sparc_core::params::ParamStore;
use sparc_tensor::{Graph, Tensor};

use crate::config::TrainConfig;
use crate::error::{HarnessError, Result};
use crate::train::{embed, HeldOut};

pub fn concept_word(c: usize) -> String {
    format!("concept{c}")
}

pub fn concept_lexicon(num_concepts: usize) -> LexiconTagger {
    LexiconTagger::new((0..num_concepts).map(|c| {
        let tag = match c % 4 {
            1 => PosTag::Adjective,
            3 => PosTag::Other,
            _ => PosTag::Noun,
        };
        (concept_word(c), tag)
    }))
}

/// `[C, d]` global text embeddings of the one-word captions, one per
/// concept.
pub fn concept_text_embeddings(params: &ParamStore, cfg: &TrainConfig) -> Result<Tensor> {
    let n = cfg.data.num_concepts;
    let l_max = cfg.data.max_tokens;
    let batch = ImageTextBatch {
        patches: Tensor::zeros(vec![n, cfg.data.num_patches, cfg.data.patch_dim]),
        token_ids: (0..n)
            .map(|c| {
                let mut ids = vec![0; l_max];
                ids[0] = cfg.data.token_of(c);
                ids
            })
            .collect(),
        token_mask: (0..n).map(|_| (0..l_max).map(|l| l == 0).collect()).collect(),
    };
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let e = encode(&mut g, &cfg.encoder(), &p, &batch)?;
    Ok(g.value(e.t_bar).clone())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KPrecisionReport {
    pub all: f64,
    pub noun_adj: f64,
    pub images: usize,
}

/// For every held-out image, the concepts whose one-word captions score
/// highest against the image (as many as its caption has words) form the
/// candidate; the true caption is the reference.
pub fn k_precision_eval(params: &ParamStore, cfg: &TrainConfig, held_out: &HeldOut) -> Result<KPrecisionReport> {
    let classes = concept_text_embeddings(params, cfg)?;
    let lexicon = concept_lexicon(cfg.data.num_concepts);
    let mut out = KPrecisionReport::default();
    for (batch, planted) in held_out {
        let raw = embed(params, cfg, batch)?;
        let sim = cosine_similarity_matrix(&raw.v_bar, &classes)?;
        for (i, concepts) in planted.concepts.iter().enumerate() {
            let mut order: Vec<usize> = (0..cfg.data.num_concepts).collect();
            order.sort_by(|&a, &b| sim.get(&[i, b]).total_cmp(&sim.get(&[i, a])).then(a.cmp(&b)));
            let candidate: Vec<String> = order[..concepts.len()].iter().map(|&c| concept_word(c)).collect();
            let truth = vec![concepts.iter().map(|&c| concept_word(c)).collect::<Vec<_>>()];
            out.all += k_precision(&candidate, &truth, KPrecisionMode::All, &lexicon);
            out.noun_adj += k_precision(&candidate, &truth, KPrecisionMode::NounAdj, &lexicon);
            out.images += 1;
        }
    }
    out.all /= out.images as f64;
    out.noun_adj /= out.images as f64;
    Ok(out)
}

/// Side of the square patch grid.
pub fn grid_side(num_patches: usize) -> Result<usize> {
    let side = (num_patches as f64).sqrt().round() as usize;
    if side * side != num_patches {
        return Err(HarnessError::Config(format!(
            "segmentation needs a square patch grid, got {num_patches} patches"
        )));
    }
    Ok(side)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub mean_iou: f64,
    pub images: usize,
}

/// Patches laid out row-major on a square grid; planted patches carry their
/// concept as ground truth, distractors are background. Every concept is a
/// candidate class, described by its one-word caption.
pub fn segmentation_eval(params: &ParamStore, cfg: &TrainConfig, held_out: &HeldOut) -> Result<SegmentationReport> {
    let side = grid_side(cfg.data.num_patches)?;
    let classes = concept_text_embeddings(params, cfg)?;
    let n = cfg.data.num_concepts;
    let d = cfg.model.dim;
    let mut out = SegmentationReport::default();
    for (batch, planted) in held_out {
        let raw = embed(params, cfg, batch)?;
        for i in 0..batch.batch_size() {
            let owner = planted.patch_concepts(i, cfg.data.num_patches);
            let truth: Vec<Vec<usize>> = owner
                .chunks(side)
                .map(|row| row.iter().map(|c| c.unwrap_or(n)).collect())
                .collect();
            let task = SegmentationTask {
                patch_grid: raw.v.index_first(i).reshape(vec![side, side, d])?,
                class_names: (0..n).map(concept_word).collect(),
                class_embeds: classes.clone(),
                ground_truth: truth,
                background: n,
                foreground_classes: (0..n).collect::<BTreeSet<_>>(),
            };
            out.mean_iou += zero_shot_segment(&task)?.1;
            out.images += 1;
        }
    }
    out.mean_iou /= out.images as f64;
    Ok(out)
}
