//! Synthetic image-text pairs with planted token-to-patch groupings.
//!
//! Every concept owns a token id and a prototype patch vector. A pair picks
//! a handful of distinct concepts, writes their token ids as the caption and
//! drops noisy copies of their prototypes into random patch slots. Slots
//! left over hold the noise alone, with no prototype under it (distractors).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sparc_core::encoder::ImageTextBatch;
use sparc_tensor::Tensor;

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_concepts: usize,
    /// Inclusive range of patches a concept occupies in one image.
    pub patches_min: usize,
    pub patches_max: usize,
    pub noise_std: f64,
    pub num_patches: usize,
    pub max_tokens: usize,
    pub vocab_size: usize,
    pub patch_dim: usize,
    /// Seeds the concept prototypes; batches are seeded separately.
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_concepts: 32,
            patches_min: 1,
            patches_max: 2,
            noise_std: 0.2,
            num_patches: 16,
            max_tokens: 6,
            vocab_size: 32,
            patch_dim: 16,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.num_concepts == 0 || self.num_concepts > self.vocab_size {
            return bad(format!(
                "need 1 <= num_concepts <= vocab_size, got {} concepts for {} ids",
                self.num_concepts, self.vocab_size
            ));
        }
        if self.patches_min == 0 || self.patches_min > self.patches_max {
            return bad(format!(
                "patches per concept {}..={} is empty or starts at zero",
                self.patches_min, self.patches_max
            ));
        }
        if self.max_tokens < 2 || self.patch_dim == 0 {
            return bad("max_tokens must be at least 2 and patch_dim positive".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be finite and >= 0, got {}", self.noise_std));
        }
        let worst = self.max_tokens.min(self.num_concepts) * self.patches_max;
        if worst > self.num_patches {
            return bad(format!(
                "patch budget over-full: up to {worst} planted patches for {} slots",
                self.num_patches
            ));
        }
        Ok(())
    }

    /// `[num_concepts, patch_dim]` prototype vectors, one row per concept.
    pub fn prototypes(&self) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        gaussian(&mut rng, vec![self.num_concepts, self.patch_dim], 1.0)
    }

    /// Token id of concept `c`.
    pub fn token_of(&self, concept: usize) -> usize {
        concept
    }
}

/// For each pair, the patch indices planted for each caption position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedAlignment {
    pub pairs: Vec<Vec<Vec<usize>>>,
    /// Concept behind each caption position.
    pub concepts: Vec<Vec<usize>>,
}

impl PlantedAlignment {
    /// Concept id of every patch of pair `i`, `None` for distractors.
    pub fn patch_concepts(&self, i: usize, num_patches: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_patches];
        for (sets, &c) in self.pairs[i].iter().zip(&self.concepts[i]) {
            for &p in sets {
                out[p] = Some(c);
            }
        }
        out
    }
}

fn gaussian<R: Rng>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Draws `batch_size` pairs, each with 2 to `max_tokens` distinct concepts
/// (fewer only when fewer concepts exist). The same `(spec, batch_size, seed)` always gives
/// the same batch.
pub fn generate_batch(
    spec: &SyntheticSpec,
    batch_size: usize,
    seed: u64,
) -> Result<(ImageTextBatch, PlantedAlignment)> {
    spec.validate()?;
    if batch_size == 0 {
        return Err(HarnessError::Config("batch_size must be positive".into()));
    }
    let protos = spec.prototypes();
    let (p, l_max, dim) = (spec.num_patches, spec.max_tokens, spec.patch_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut patches = Vec::with_capacity(batch_size * p * dim);
    let mut token_ids = Vec::with_capacity(batch_size);
    let mut token_mask = Vec::with_capacity(batch_size);
    let mut planted = PlantedAlignment {
        pairs: Vec::with_capacity(batch_size),
        concepts: Vec::with_capacity(batch_size),
    };
    let all: Vec<usize> = (0..spec.num_concepts).collect();
    for _ in 0..batch_size {
        let most = l_max.min(spec.num_concepts);
        let n = rng.gen_range(most.min(2)..=most);
        let concepts: Vec<usize> = all.choose_multiple(&mut rng, n).copied().collect();
        let mut slots: Vec<usize> = (0..p).collect();
        slots.shuffle(&mut rng);
        let mut slots = slots.into_iter();
        let mut image: Vec<Option<usize>> = vec![None; p];
        let mut sets = Vec::with_capacity(n);
        for &c in &concepts {
            let count = rng.gen_range(spec.patches_min..=spec.patches_max);
            let mut set: Vec<usize> = slots.by_ref().take(count).collect();
            set.sort_unstable();
            for &s in &set {
                image[s] = Some(c);
            }
            sets.push(set);
        }
        for slot in image {
            match slot {
                Some(c) => patches.extend(protos.row(c).iter().map(|&x| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x + spec.noise_std * z
                })),
                None => patches.extend((0..dim).map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    spec.noise_std * z
                })),
            }
        }
        let mut ids: Vec<usize> = concepts.iter().map(|&c| spec.token_of(c)).collect();
        ids.resize(l_max, 0);
        token_ids.push(ids);
        token_mask.push((0..l_max).map(|l| l < n).collect());
        planted.pairs.push(sets);
        planted.concepts.push(concepts);
    }
    let batch = ImageTextBatch {
        patches: Tensor::new(vec![batch_size, p, dim], patches)?,
        token_ids,
        token_mask,
    };
    Ok((batch, planted))
}
