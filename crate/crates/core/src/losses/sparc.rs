use serde::{Deserialize, Serialize};
use sparc_tensor::{Graph, Tensor, Var};

use super::{
    global_contrastive, output, scoped, symmetric_infonce, temperature_diagnostic, LossConfig,
    LossOutput, LossParams, Objective, NORM_EPS,
};
use crate::encoder::EmbeddingSet;
use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentMode {
    /// Per-row min-max normalization, threshold, renormalize.
    SparseMinmax,
    /// As `SparseMinmax` with the threshold forced to 0.
    NoSparsity,
    /// Plain softmax over patches of the raw similarities.
    Softmax,
}

impl AlignmentMode {
    pub fn for_objective(objective: Objective) -> Option<Self> {
        match objective {
            Objective::Sparc => Some(Self::SparseMinmax),
            Objective::SparcNoSparsity => Some(Self::NoSparsity),
            Objective::SparcSoftmax => Some(Self::Softmax),
            _ => None,
        }
    }
}

/// Alignment intermediates for one image-text pair, all `[L, P]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentMatrices {
    pub s: Tensor,
    pub s_hat: Tensor,
    pub s_tilde: Tensor,
    pub a: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct AlignmentVars {
    pub s: Var,
    pub s_hat: Var,
    pub s_tilde: Var,
    pub a: Var,
}

impl AlignmentVars {
    pub fn values(&self, g: &Graph) -> AlignmentMatrices {
        AlignmentMatrices {
            s: g.value(self.s).clone(),
            s_hat: g.value(self.s_hat).clone(),
            s_tilde: g.value(self.s_tilde).clone(),
            a: g.value(self.a).clone(),
        }
    }
}

/// Token-to-patch alignment weights for one pair: `t_pair [L,d]`,
/// `v_pair [P,d]`. Rows of `s` with zero range get `s_hat = 0` and uniform
/// weights.
pub fn alignment(
    g: &mut Graph,
    t_pair: Var,
    v_pair: Var,
    sigma: f64,
    mode: AlignmentMode,
) -> Result<AlignmentVars> {
    let p = g.shape(v_pair)[0];
    if p < 2 {
        return Err(CoreError::Batch(format!(
            "alignment needs at least 2 patches, got {p}"
        )));
    }
    let vt = g.transpose(v_pair)?;
    let s = scoped(g, "similarity", |g| Ok(g.matmul(t_pair, vt)?))?;
    if mode == AlignmentMode::Softmax {
        let a = g.softmax(s, 1)?;
        return Ok(AlignmentVars {
            s,
            s_hat: a,
            s_tilde: a,
            a,
        });
    }
    let sigma = if mode == AlignmentMode::NoSparsity {
        0.0
    } else {
        sigma
    };
    let l = g.shape(s)[0];
    let lo = g.min(s, 1, true)?;
    let hi = g.max(s, 1, true)?;
    let range = g.sub(hi, lo)?;
    let degenerate: Vec<bool> = g.value(range).data().iter().map(|&r| r == 0.0).collect();
    for &d in &degenerate {
        g.record_decision(u64::from(d) | 2);
    }
    let ones = g.constant(Tensor::ones(vec![l, 1]));
    let safe_range = g.where_(&degenerate, ones, range)?;
    let shifted = g.sub(s, lo)?;
    // constant rows: shifted is exactly 0, so s_hat is the zero row
    let s_hat = g.div(shifted, safe_range)?;
    let s_tilde = g.threshold(s_hat, sigma)?;
    let row_sum = g.sum(s_tilde, 1, true)?;
    let safe_sum = g.where_(&degenerate, ones, row_sum)?;
    let weights = g.div(s_tilde, safe_sum)?;
    let a = if degenerate.iter().any(|&d| d) {
        let full: Vec<bool> = degenerate
            .iter()
            .flat_map(|&d| std::iter::repeat(d).take(p))
            .collect();
        let uniform = g.constant(Tensor::full(vec![l, p], 1.0 / p as f64));
        g.where_(&full, uniform, weights)?
    } else {
        weights
    };
    Ok(AlignmentVars {
        s,
        s_hat,
        s_tilde,
        a,
    })
}

/// Value-level alignment for inspection and evaluation.
pub fn compute_alignment(
    t_pair: &Tensor,
    v_pair: &Tensor,
    sigma: f64,
    mode: AlignmentMode,
) -> Result<AlignmentMatrices> {
    let mut g = Graph::new();
    let t = g.constant(t_pair.clone());
    let v = g.constant(v_pair.clone());
    Ok(alignment(&mut g, t, v, sigma, mode)?.values(&g))
}

/// Language-grouped vision embeddings `c = a · v_pair`, `[L, d]`.
pub fn group_patches(g: &mut Graph, a: Var, v_pair: Var) -> Result<Var> {
    scoped(g, "grouping", |g| Ok(g.matmul(a, v_pair)?))
}

/// Sequence-wise symmetric InfoNCE for one pair over its valid tokens; no
/// negatives from other pairs. A single-token pair yields exactly 0.
pub fn fine_grained_pair(g: &mut Graph, c: Var, t: Var, inv_temperature: Var) -> Result<Var> {
    let cn = g.l2_normalize(c, 1, NORM_EPS)?;
    let tn = g.l2_normalize(t, 1, NORM_EPS)?;
    let tt = g.transpose(tn)?;
    let sim = scoped(g, "sequence_logits", |g| Ok(g.matmul(cn, tt)?))?;
    let logits = g.mul(sim, inv_temperature)?;
    symmetric_infonce(g, logits)
}

/// Batch mean of per-pair sequence-wise losses. `c` and `t` are
/// `[B, L_max, d]`; only the first `lengths[i]` rows of item `i` are read.
/// Returns the mean and the per-pair terms.
pub fn fine_grained_contrastive(
    g: &mut Graph,
    c: Var,
    t: Var,
    lengths: &[usize],
    inv_temperature: Var,
) -> Result<(Var, Vec<Var>)> {
    let mut terms = Vec::with_capacity(lengths.len());
    for (i, &len) in lengths.iter().enumerate() {
        if len == 0 {
            return Err(CoreError::Batch(format!("item {i} has no valid tokens")));
        }
        let ci = g.select(c, 0, i)?;
        let ci = g.slice(ci, 0, 0, len)?;
        let ti = g.select(t, 0, i)?;
        let ti = g.slice(ti, 0, 0, len)?;
        terms.push(fine_grained_pair(g, ci, ti, inv_temperature)?);
    }
    Ok((mean_of(g, &terms)?, terms))
}

pub(crate) fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let stacked = g.stack(terms)?;
    let total = g.sum_all(stacked)?;
    Ok(g.scale(total, 1.0 / terms.len() as f64)?)
}

/// `λ_g · global + λ_f · fine-grained`, with the alignment rule chosen by the
/// objective variant.
pub fn sparc_loss(
    g: &mut Graph,
    e: &EmbeddingSet,
    lp: &LossParams,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    let mode = AlignmentMode::for_objective(cfg.objective)
        .ok_or_else(|| CoreError::Config(format!("{} is not a SPARC variant", cfg.objective)))?;
    let b = e.batch_size();
    let p = g.shape(e.v)[1];
    let sigma = cfg.sparsity_threshold.resolve(p);

    let global = global_contrastive(g, e.v_bar, e.t_bar, lp.inv_temperature)?;

    let mut terms = Vec::with_capacity(b);
    let mut alignments = Vec::with_capacity(b);
    for i in 0..b {
        let ti = e.tokens(g, i)?;
        let vi = e.patches(g, i)?;
        let al = alignment(g, ti, vi, sigma, mode)?;
        let ci = group_patches(g, al.a, vi)?;
        terms.push(fine_grained_pair(g, ci, ti, lp.inv_temperature)?);
        alignments.push(al.values(g));
    }
    let fine = mean_of(g, &terms)?;

    let wg = g.scale(global, cfg.lambda_g)?;
    let wf = g.scale(fine, cfg.lambda_f)?;
    let total = g.add(wg, wf)?;
    let mut out = output(g, total, &[("global", global), ("fine_grained", fine)]);
    temperature_diagnostic(g, lp, &mut out);
    alignment_diagnostics(&alignments, &e.lengths, &mut out);
    out.alignments = alignments;
    Ok(out)
}

fn alignment_diagnostics(
    alignments: &[AlignmentMatrices],
    lengths: &[usize],
    out: &mut LossOutput,
) {
    let mut rows = 0usize;
    let mut nonzeros = 0usize;
    let mut sims = Vec::new();
    for al in alignments {
        let (l, p) = (al.a.shape()[0], al.a.shape()[1]);
        rows += l;
        nonzeros += al.a.data().iter().filter(|&&x| x != 0.0).count();
        sims.extend_from_slice(al.s.data());
        debug_assert_eq!(al.s.shape(), [l, p]);
    }
    let n = sims.len().max(1) as f64;
    let mean = sims.iter().sum::<f64>() / n;
    let var = sims.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    let d = &mut out.diagnostics;
    d.insert(
        "alignment_nonzeros_per_row".into(),
        nonzeros as f64 / rows.max(1) as f64,
    );
    d.insert("similarity_mean".into(), mean);
    d.insert("similarity_std".into(), var.sqrt());
    d.insert(
        "single_token_pairs".into(),
        lengths.iter().filter(|&&l| l == 1).count() as f64,
    );
}
