//! MGCA: global contrast, bidirectional token-patch cross-attention
//! alignment and prototype (cluster assignment) alignment.

use sparc_tensor::{Graph, Tensor, Var};

use super::sparc::mean_of;
use super::{
    global_contrastive, output, require_pairs, scoped, symmetric_infonce, temperature_diagnostic,
    AttentionParams, LossConfig, LossOutput, LossParams, MgcaParams, NORM_EPS,
};
use crate::encoder::EmbeddingSet;
use crate::error::{CoreError, Result};

/// Balanced soft assignment of `B` rows to `K` clusters.
///
/// `Q = exp((scores - max) / eps)`, then `iters` rounds of column
/// normalization (each column sums to `B/K`) followed by row normalization
/// (each row sums to 1).
pub fn sinkhorn_knopp(scores: &Tensor, eps: f64, iters: usize) -> Result<Tensor> {
    if scores.rank() != 2 || iters == 0 || !(eps > 0.0) {
        return Err(CoreError::Config(
            "sinkhorn needs a matrix, iters >= 1 and eps > 0".into(),
        ));
    }
    let (b, k) = (scores.shape()[0], scores.shape()[1]);
    let max = scores
        .data()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut q: Vec<f64> = scores
        .data()
        .iter()
        .map(|&s| ((s - max) / eps).exp())
        .collect();
    let col_target = b as f64 / k as f64;
    for _ in 0..iters {
        for c in 0..k {
            let sum: f64 = (0..b).map(|r| q[r * k + c]).sum();
            if sum > 0.0 {
                for r in 0..b {
                    q[r * k + c] *= col_target / sum;
                }
            }
        }
        for row in q.chunks_mut(k) {
            let sum: f64 = row.iter().sum();
            for x in row {
                *x /= sum;
            }
        }
    }
    Ok(Tensor::new(vec![b, k], q)?)
}

/// Single-head cross-attention: queries `[n, d]` attend over keys `[m, d]`;
/// returns contexts `[n, d]` = `softmax(q Wq (k Wk)ᵀ / √a) (k Wv) Wo`.
pub fn cross_attention(g: &mut Graph, queries: Var, keys: Var, w: &AttentionParams) -> Result<Var> {
    let a = g.shape(w.wq)[1];
    let mm = |g: &mut Graph, x: Var, y: Var| scoped(g, "cross_attention", |g| Ok(g.matmul(x, y)?));
    let q = mm(g, queries, w.wq)?;
    let k = mm(g, keys, w.wk)?;
    let v = mm(g, keys, w.wv)?;
    let kt = g.transpose(k)?;
    let scores = mm(g, q, kt)?;
    let scores = g.scale(scores, 1.0 / (a as f64).sqrt())?;
    let att = g.softmax(scores, 1)?;
    let ctx = mm(g, att, v)?;
    mm(g, ctx, w.wo)
}

fn sequence_infonce(g: &mut Graph, x: Var, y: Var, inv_temperature: Var) -> Result<Var> {
    let xn = g.l2_normalize(x, 1, NORM_EPS)?;
    let yn = g.l2_normalize(y, 1, NORM_EPS)?;
    let yt = g.transpose(yn)?;
    let sim = scoped(g, "sequence_logits", |g| Ok(g.matmul(xn, yt)?))?;
    let logits = g.mul(sim, inv_temperature)?;
    symmetric_infonce(g, logits)
}

/// Swapped-prediction loss against Sinkhorn codes. Codes are computed from
/// the current scores and treated as constants.
fn prototype_loss(
    g: &mut Graph,
    v_bar: Var,
    t_bar: Var,
    mp: &MgcaParams,
    cfg: &LossConfig,
) -> Result<Var> {
    let prototypes = mp.prototypes;
    let m = &cfg.mgca;
    let b = g.shape(v_bar)[0];
    let cn = g.l2_normalize(prototypes, 1, NORM_EPS)?;
    let ct = g.transpose(cn)?;
    let vn = g.l2_normalize(v_bar, 1, NORM_EPS)?;
    let tn = g.l2_normalize(t_bar, 1, NORM_EPS)?;
    let zv = scoped(g, "prototype_scores", |g| Ok(g.matmul(vn, ct)?))?;
    let zt = scoped(g, "prototype_scores", |g| Ok(g.matmul(tn, ct)?))?;
    let (qv, qt) = match &mp.frozen_codes {
        Some(codes) => codes.clone(),
        None => (
            sinkhorn_knopp(g.value(zv), m.sinkhorn_eps, m.sinkhorn_iters)?,
            sinkhorn_knopp(g.value(zt), m.sinkhorn_eps, m.sinkhorn_iters)?,
        ),
    };
    let qv = g.constant(qv);
    let qt = g.constant(qt);
    let inv = 1.0 / m.proto_temperature;
    let zv = g.scale(zv, inv)?;
    let zt = g.scale(zt, inv)?;
    let pv = g.log_softmax(zv, 1)?;
    let pt = g.log_softmax(zt, 1)?;
    // image predicts the text's code and vice versa
    let a = g.mul(qt, pv)?;
    let c = g.mul(qv, pt)?;
    let both = g.concat(&[a, c], 0)?;
    let s = g.sum_all(both)?;
    Ok(g.scale(s, -1.0 / (2 * b) as f64)?)
}

/// `global + token alignment + prototype alignment`, unit weights. The token
/// alignment term averages the word-side (tokens attend to patches, contrast
/// over the item's tokens) and patch-side (patches attend to tokens,
/// contrast over the item's patches) sequence-wise losses.
pub fn mgca_loss(
    g: &mut Graph,
    e: &EmbeddingSet,
    lp: &LossParams,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    let b = e.batch_size();
    require_pairs("mgca", b)?;
    let mp = lp
        .mgca
        .as_ref()
        .ok_or_else(|| CoreError::MissingParam("mgca attention and prototype parameters".into()))?;

    let global = global_contrastive(g, e.v_bar, e.t_bar, lp.inv_temperature)?;

    let mut word_terms = Vec::with_capacity(b);
    let mut patch_terms = Vec::with_capacity(b);
    for i in 0..b {
        let ti = e.tokens(g, i)?;
        let vi = e.patches(g, i)?;
        let word_ctx = cross_attention(g, ti, vi, &mp.word)?;
        word_terms.push(sequence_infonce(g, word_ctx, ti, lp.inv_temperature)?);
        let patch_ctx = cross_attention(g, vi, ti, &mp.patch)?;
        patch_terms.push(sequence_infonce(g, patch_ctx, vi, lp.inv_temperature)?);
    }
    let word = mean_of(g, &word_terms)?;
    let patch = mean_of(g, &patch_terms)?;
    let wp = g.add(word, patch)?;
    let token = g.scale(wp, 0.5)?;

    let proto = prototype_loss(g, e.v_bar, e.t_bar, mp, cfg)?;

    let gt = g.add(global, token)?;
    let total = g.add(gt, proto)?;
    let mut out = output(
        g,
        total,
        &[
            ("global", global),
            ("token", token),
            ("token_word", word),
            ("token_patch", patch),
            ("prototype", proto),
        ],
    );
    temperature_diagnostic(g, lp, &mut out);
    Ok(out)
}

/// Sinkhorn codes `(image, text)` for given pooled embeddings and prototypes.
/// Feeding them back through [`MgcaParams::frozen_codes`] pins the codes,
/// e.g. for finite-difference checks.
pub fn prototype_codes(
    v_bar: &Tensor,
    t_bar: &Tensor,
    prototypes: &Tensor,
    cfg: &LossConfig,
) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let c = g.constant(prototypes.clone());
    let cn = g.l2_normalize(c, 1, NORM_EPS)?;
    let ct = g.transpose(cn)?;
    let mut codes = |x: &Tensor| -> Result<Tensor> {
        let x = g.constant(x.clone());
        let xn = g.l2_normalize(x, 1, NORM_EPS)?;
        let z = g.matmul(xn, ct)?;
        sinkhorn_knopp(g.value(z), cfg.mgca.sinkhorn_eps, cfg.mgca.sinkhorn_iters)
    };
    Ok((codes(v_bar)?, codes(t_bar)?))
}
