//! FILIP, PACL and GLoRIA objectives.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sparc_tensor::Graph;

use super::{
    cosine_matrix, global_contrastive, output, require_pairs, scoped, symmetric_infonce,
    temperature_diagnostic, LossConfig, LossOutput, LossParams, NORM_EPS,
};
use crate::encoder::EmbeddingSet;
use crate::error::Result;

/// How the text-to-image logits of FILIP are formed: mean over kept tokens
/// of the best-matching patch. The image-to-text logits use the mean over
/// patches of the best-matching kept token.
pub const FILIP_TEXT_SIDE: &str = "mean over tokens of max over patches";

/// Token positions kept after dropping a fraction `drop` (at least one kept).
fn kept_tokens(len: usize, drop: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let keep = (len - (drop * len as f64).floor() as usize).max(1);
    if keep == len {
        return (0..len).collect();
    }
    let mut idx = sample(rng, len, keep).into_vec();
    idx.sort_unstable();
    idx
}

/// Late-interaction contrastive loss. For text `j` and image `i`, with
/// cosine similarities `S[p, l]` between patches and kept tokens:
/// text-side logit is `mean_l max_p S`, image-side logit `mean_p max_l S`.
/// The similarities of every patch in the batch against every kept token
/// are computed as one `[B*P, ΣL']` block.
pub fn filip_loss(g: &mut Graph, e: &EmbeddingSet, lp: &LossParams, cfg: &LossConfig) -> Result<LossOutput> {
    let b = e.batch_size();
    require_pairs("filip", b)?;
    let shape = g.shape(e.v).to_vec();
    let (p, d) = (shape[1], shape[2]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let flat = g.reshape(e.v, &[b * p, d])?;
    let patches = g.l2_normalize(flat, 1, NORM_EPS)?;
    let mut kept_rows = Vec::with_capacity(b);
    let mut kept_lens = Vec::with_capacity(b);
    for j in 0..b {
        let tj = e.tokens(g, j)?;
        let kept = kept_tokens(e.lengths[j], cfg.filip_token_drop, &mut rng);
        kept_lens.push(kept.len());
        kept_rows.push(if kept.len() == e.lengths[j] { tj } else { g.embedding(tj, &kept)? });
    }
    let tokens = g.concat(&kept_rows, 0)?;
    let tokens = g.l2_normalize(tokens, 1, NORM_EPS)?;
    let tt = g.transpose(tokens)?;
    let block = scoped(g, "token_patch_similarity", |g| Ok(g.matmul(patches, tt)?))?;

    let mut text_cols = Vec::with_capacity(b);
    let mut image_cols = Vec::with_capacity(b);
    let mut offset = 0;
    for &len in &kept_lens {
        let sim = g.slice(block, 1, offset, len)?;
        offset += len;
        // [B*P, L'] -> [B, P, L'], one block per image
        let sim = g.reshape(sim, &[b, p, len])?;
        let best_patch = g.max(sim, 1, false)?;
        text_cols.push(g.mean(best_patch, 1, false)?);
        let best_token = g.max(sim, 2, false)?;
        image_cols.push(g.mean(best_token, 1, false)?);
    }
    // stacked columns are indexed [text j, image i]; transpose to [i, j]
    let text_side = g.stack(&text_cols)?;
    let image_side = g.stack(&image_cols)?;
    let text_logits = g.transpose(text_side)?;
    let image_logits = g.transpose(image_side)?;
    let text_logits = g.mul(text_logits, lp.inv_temperature)?;
    let image_logits = g.mul(image_logits, lp.inv_temperature)?;

    // image->text: softmax over texts in each image row; text->image: over
    // images in each text column
    let i2t = g.log_softmax(image_logits, 1)?;
    let t2i = g.log_softmax(text_logits, 0)?;
    let i2t = g.diagonal(i2t)?;
    let t2i = g.diagonal(t2i)?;
    let both = g.concat(&[i2t, t2i], 0)?;
    let s = g.sum_all(both)?;
    let loss = g.scale(s, -1.0 / (2 * b) as f64)?;

    let mut out = output(g, loss, &[("filip", loss)]);
    temperature_diagnostic(g, lp, &mut out);
    out.diagnostics.insert("kept_tokens".into(), offset as f64);
    Ok(out)
}

/// Patch-aligned contrastive loss: for every (image i, text j) the patches of
/// image i are pooled with softmax weights of their cosine to `t_bar_j`
/// (scaled by `1/τ`), and the pooled vector is contrasted with `t_bar_j`.
pub fn pacl_loss(g: &mut Graph, e: &EmbeddingSet, lp: &LossParams) -> Result<LossOutput> {
    let b = e.batch_size();
    require_pairs("pacl", b)?;
    let shape = g.shape(e.v).to_vec();
    let (p, d) = (shape[1], shape[2]);

    let flat = g.reshape(e.v, &[b * p, d])?;
    let cos = cosine_matrix(g, flat, e.t_bar, "patch_text_similarity")?;
    // [B*P, B] -> [i, p, j]
    let cos = g.reshape(cos, &[b, p, b])?;
    let scaled = g.mul(cos, lp.inv_temperature)?;
    let w = g.softmax(scaled, 1)?;
    let w = g.permute(w, &[0, 2, 1])?; // [i, j, p]
    let pooled = scoped(g, "weighted_pooling", |g| Ok(g.bmm(w, e.v)?))?; // [i, j, d]
    let pooled = g.l2_normalize(pooled, 2, NORM_EPS)?;
    let tn = g.l2_normalize(e.t_bar, 1, NORM_EPS)?;
    let prod = scoped(g, "pooled_logits", |g| Ok(g.mul(pooled, tn)?))?; // t_bar broadcast over i
    let logits = g.sum(prod, 2, false)?;
    let logits = g.mul(logits, lp.inv_temperature)?;
    let loss = symmetric_infonce(g, logits)?;
    let mut out = output(g, loss, &[("pacl", loss)]);
    temperature_diagnostic(g, lp, &mut out);
    Ok(out)
}

/// Global contrastive term plus a local term: each token of text j attends
/// over the patches of image i (softmax of dot products, divided by √d when
/// `gloria_scale`), and the pair logit is the mean cosine between tokens and
/// their attended contexts, scaled by `1/τ`.
pub fn gloria_loss(
    g: &mut Graph,
    e: &EmbeddingSet,
    lp: &LossParams,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    let b = e.batch_size();
    require_pairs("gloria", b)?;
    let shape = g.shape(e.v).to_vec();
    let (p, d) = (shape[1], shape[2]);
    let scale = if cfg.gloria_scale {
        1.0 / (d as f64).sqrt()
    } else {
        1.0
    };

    let flat = g.reshape(e.v, &[b * p, d])?;
    let mut cols = Vec::with_capacity(b);
    let mut entropy = 0.0;
    let mut rows = 0usize;
    for j in 0..b {
        let tj = e.tokens(g, j)?;
        let l = e.lengths[j];
        let ft = g.transpose(flat)?;
        let scores = scoped(g, "token_patch_similarity", |g| Ok(g.matmul(tj, ft)?))?;
        // [L, B*P] -> [B, L, P]
        let scores = g.reshape(scores, &[l, b, p])?;
        let scores = g.permute(scores, &[1, 0, 2])?;
        let scores = g.scale(scores, scale)?;
        let att = g.softmax(scores, 2)?;
        for row in g.value(att).data().chunks(p) {
            entropy -= row
                .iter()
                .filter(|&&a| a > 0.0)
                .map(|a| a * a.ln())
                .sum::<f64>();
            rows += 1;
        }
        let ctx = scoped(g, "attention_pooling", |g| Ok(g.bmm(att, e.v)?))?; // [B, L, d]
        let ctx = g.l2_normalize(ctx, 2, NORM_EPS)?;
        let tn = g.l2_normalize(tj, 1, NORM_EPS)?;
        let prod = scoped(g, "local_logits", |g| Ok(g.mul(ctx, tn)?))?;
        let cos = g.sum(prod, 2, false)?; // [B, L]
        cols.push(g.mean(cos, 1, false)?);
    }
    let stacked = g.stack(&cols)?; // [j, i]
    let local = g.transpose(stacked)?;
    let local = g.mul(local, lp.inv_temperature)?;
    let local = symmetric_infonce(g, local)?;
    let global = global_contrastive(g, e.v_bar, e.t_bar, lp.inv_temperature)?;
    let total = g.add(global, local)?;
    let mut out = output(g, total, &[("global", global), ("local", local)]);
    temperature_diagnostic(g, lp, &mut out);
    out.diagnostics
        .insert("attention_entropy".into(), entropy / rows.max(1) as f64);
    Ok(out)
}
