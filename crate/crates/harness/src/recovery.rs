//! How well learned alignment weights recover the planted groupings.

use serde::{Deserialize, Serialize};
use sparc_core::losses::AlignmentMatrices;

use crate::data::PlantedAlignment;
use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecoveryScore {
    /// Mean over tokens within a pair, then over pairs.
    pub precision: f64,
    pub recall: f64,
    /// Recall pooled over every token with at least two planted patches;
    /// `None` when there is no such token.
    pub multi_patch_recall: Option<f64>,
    pub tokens: usize,
    pub multi_patch_tokens: usize,
}

/// Scores per-pair alignment weights against the planted sets. A patch is
/// predicted for a token when its weight exceeds `1/(2P)`.
pub fn alignment_recovery_score(
    alignments: &[AlignmentMatrices],
    planted: &PlantedAlignment,
) -> Result<RecoveryScore> {
    if alignments.len() != planted.pairs.len() || alignments.is_empty() {
        return Err(HarnessError::Config(format!(
            "{} alignment matrices for {} planted pairs",
            alignments.len(),
            planted.pairs.len()
        )));
    }
    let (mut prec_sum, mut rec_sum) = (0.0, 0.0);
    let (mut multi_sum, mut multi_n, mut tokens) = (0.0, 0usize, 0usize);
    for (m, sets) in alignments.iter().zip(&planted.pairs) {
        let a = &m.a;
        let shape = a.shape();
        if shape.len() != 2 || shape[0] != sets.len() {
            return Err(HarnessError::Config(format!(
                "alignment of shape {shape:?} for {} planted tokens",
                sets.len()
            )));
        }
        let p = shape[1];
        let cut = 1.0 / (2.0 * p as f64);
        let (mut pp, mut pr) = (0.0, 0.0);
        for (l, set) in sets.iter().enumerate() {
            let predicted: Vec<usize> = (0..p).filter(|&j| a.get(&[l, j]) > cut).collect();
            let hits = predicted.iter().filter(|j| set.contains(j)).count() as f64;
            let precision = if predicted.is_empty() { 0.0 } else { hits / predicted.len() as f64 };
            let recall = hits / set.len() as f64;
            pp += precision;
            pr += recall;
            if set.len() >= 2 {
                multi_sum += recall;
                multi_n += 1;
            }
        }
        prec_sum += pp / sets.len() as f64;
        rec_sum += pr / sets.len() as f64;
        tokens += sets.len();
    }
    let n = alignments.len() as f64;
    Ok(RecoveryScore {
        precision: prec_sum / n,
        recall: rec_sum / n,
        multi_patch_recall: (multi_n > 0).then(|| multi_sum / multi_n as f64),
        tokens,
        multi_patch_tokens: multi_n,
    })
}
