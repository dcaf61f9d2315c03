//! Zero-shot evaluation: retrieval recall, prompt-ensembled classification,
//! K-Precision and patch-argmax segmentation mIoU. Ties go to the lowest
//! index everywhere.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sparc_tensor::Tensor;

use crate::error::{CoreError, Result};

const EPS: f64 = 1e-12;

fn metric_err(msg: impl Into<String>) -> CoreError {
    CoreError::Metric(msg.into())
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b)).max(EPS)
}

/// First index of the maximum.
fn argmax(xs: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in xs.into_iter().enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

/// Cosine similarity between every row of `a` `[N, d]` and of `b` `[M, d]`.
pub fn cosine_similarity_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(metric_err(format!(
            "cosine similarity needs [N, d] and [M, d], got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (n, m) = (a.shape()[0], b.shape()[0]);
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            out.push(cosine(a.row(i), b.row(j)));
        }
    }
    Ok(Tensor::new(vec![n, m], out)?)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// Row `i` (image) retrieves among columns (texts).
    pub image_to_text: BTreeMap<usize, f64>,
    /// Column `j` (text) retrieves among rows (images).
    pub text_to_image: BTreeMap<usize, f64>,
}

/// 1-based rank of `scores[target]` in descending order, ties ranked by index.
fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < target))
        .count()
}

/// Recall@k for a square similarity matrix whose diagonal holds the
/// matched pairs.
pub fn recall_at_k(sim: &Tensor, ks: &[usize]) -> Result<RetrievalResult> {
    if sim.rank() != 2 || sim.shape()[0] != sim.shape()[1] {
        return Err(metric_err(format!(
            "similarity must be square, got {:?}",
            sim.shape()
        )));
    }
    let n = sim.shape()[0];
    let max_k = ks
        .iter()
        .copied()
        .max()
        .ok_or_else(|| metric_err("no k values"))?;
    if ks.contains(&0) || n < max_k {
        return Err(metric_err(format!(
            "need 1 <= k <= N, got ks {ks:?} with N = {n}"
        )));
    }
    let row_ranks: Vec<usize> = (0..n).map(|i| rank_of(sim.row(i), i)).collect();
    let col_ranks: Vec<usize> = (0..n)
        .map(|j| {
            let col: Vec<f64> = (0..n).map(|i| sim.get(&[i, j])).collect();
            rank_of(&col, j)
        })
        .collect();
    let frac =
        |ranks: &[usize], k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64;
    let mut out = RetrievalResult::default();
    for &k in ks {
        out.image_to_text.insert(k, frac(&row_ranks, k));
        out.text_to_image.insert(k, frac(&col_ranks, k));
    }
    Ok(out)
}

/// Class whose ensembled prompt embedding (mean of the L2-normalized prompts,
/// re-normalized) has the highest cosine with `image` `[d]`.
/// `prompts` is `[C, M, d]`.
pub fn zero_shot_classify(image: &Tensor, prompts: &Tensor) -> Result<usize> {
    let s = prompts.shape();
    if prompts.rank() != 3 || image.rank() != 1 || s[2] != image.numel() || s[0] == 0 || s[1] == 0 {
        return Err(metric_err(format!(
            "classification needs image [d] and prompts [C, M, d], got {:?} and {:?}",
            image.shape(),
            s
        )));
    }
    let (c, m, d) = (s[0], s[1], s[2]);
    let scores = (0..c).map(|class| {
        let mut mean = vec![0.0; d];
        for p in 0..m {
            let start = (class * m + p) * d;
            let row = &prompts.data()[start..start + d];
            let n = norm(row).max(EPS);
            for (acc, x) in mean.iter_mut().zip(row) {
                *acc += x / n / m as f64;
            }
        }
        cosine(image.data(), &mean)
    });
    Ok(argmax(scores))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosTag {
    Noun,
    Adjective,
    Other,
}

/// Word-to-tag lookup loaded from `word<TAB>tag` lines. Unknown words are
/// `Other`.
#[derive(Clone, Debug, Default)]
pub struct LexiconTagger {
    tags: HashMap<String, PosTag>,
}

impl LexiconTagger {
    pub fn new(entries: impl IntoIterator<Item = (String, PosTag)>) -> Self {
        Self {
            tags: entries.into_iter().collect(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut tags = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (word, tag) = line.split_once('\t').ok_or_else(|| {
                metric_err(format!("lexicon line {}: expected word<TAB>tag", n + 1))
            })?;
            let tag = match tag.trim() {
                "noun" => PosTag::Noun,
                "adjective" | "adj" => PosTag::Adjective,
                "other" => PosTag::Other,
                t => {
                    return Err(metric_err(format!(
                        "lexicon line {}: unknown tag {t:?}",
                        n + 1
                    )))
                }
            };
            tags.insert(word.to_string(), tag);
        }
        Ok(Self { tags })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn tag(&self, word: &str) -> PosTag {
        self.tags.get(word).copied().unwrap_or(PosTag::Other)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KPrecisionMode {
    All,
    NounAdj,
}

/// Fraction of the distinct candidate tokens (after filtering by `mode`) that
/// occur in any ground-truth caption. An empty filtered candidate scores 1.0.
pub fn k_precision<S: AsRef<str>>(
    candidate: &[S],
    ground_truth: &[Vec<S>],
    mode: KPrecisionMode,
    tagger: &LexiconTagger,
) -> f64 {
    let keep = |w: &str| match mode {
        KPrecisionMode::All => true,
        KPrecisionMode::NounAdj => matches!(tagger.tag(w), PosTag::Noun | PosTag::Adjective),
    };
    let types: HashSet<&str> = candidate
        .iter()
        .map(AsRef::as_ref)
        .filter(|w| keep(w))
        .collect();
    if types.is_empty() {
        return 1.0;
    }
    let truth: HashSet<&str> = ground_truth.iter().flatten().map(AsRef::as_ref).collect();
    types.iter().filter(|w| truth.contains(*w)).count() as f64 / types.len() as f64
}

#[derive(Clone, Debug)]
pub struct SegmentationTask {
    /// `[Hp, Wp, d]`
    pub patch_grid: Tensor,
    pub class_names: Vec<String>,
    /// `[C, d]`
    pub class_embeds: Tensor,
    /// `H` rows of `W` class ids; `background` marks unlabeled pixels.
    pub ground_truth: Vec<Vec<usize>>,
    pub background: usize,
    pub foreground_classes: BTreeSet<usize>,
}

impl SegmentationTask {
    fn validate(&self) -> Result<(usize, usize, usize, usize, usize)> {
        let g = self.patch_grid.shape();
        let c = self.class_embeds.shape();
        if g.len() != 3 || c.len() != 2 || g[2] != c[1] {
            return Err(metric_err(format!(
                "patch grid must be [Hp, Wp, d] and classes [C, d], got {g:?} and {c:?}"
            )));
        }
        if !self.class_names.is_empty() && self.class_names.len() != c[0] {
            return Err(metric_err(
                "class names and class embeddings disagree in count",
            ));
        }
        let h = self.ground_truth.len();
        let w = self.ground_truth.first().map_or(0, Vec::len);
        if h == 0 || w == 0 || self.ground_truth.iter().any(|r| r.len() != w) {
            return Err(metric_err("ground truth must be a nonempty rectangle"));
        }
        if h % g[0] != 0 || w % g[1] != 0 {
            return Err(metric_err(format!(
                "mask {h}x{w} is not an integer multiple of the {}x{} patch grid",
                g[0], g[1]
            )));
        }
        if let Some(bad) = self
            .ground_truth
            .iter()
            .flatten()
            .find(|&&id| id >= c[0] && id != self.background)
        {
            return Err(metric_err(format!(
                "ground-truth id {bad} is neither a class nor background"
            )));
        }
        Ok((g[0], g[1], c[0], h, w))
    }
}

/// IoU averaged over foreground classes present in `truth`. Classes absent
/// from the ground truth are ignored even when predicted.
pub fn mean_iou(
    pred: &[Vec<usize>],
    truth: &[Vec<usize>],
    foreground: &BTreeSet<usize>,
) -> Result<f64> {
    let present: BTreeSet<usize> = truth
        .iter()
        .flatten()
        .copied()
        .filter(|c| foreground.contains(c))
        .collect();
    if present.is_empty() {
        return Err(metric_err(
            "no foreground class present in the ground truth",
        ));
    }
    let mut total = 0.0;
    for &class in &present {
        let (mut inter, mut union) = (0usize, 0usize);
        for (pr, tr) in pred.iter().zip(truth) {
            for (&p, &t) in pr.iter().zip(tr) {
                let (a, b) = (p == class, t == class);
                inter += (a && b) as usize;
                union += (a || b) as usize;
            }
        }
        total += inter as f64 / union as f64;
    }
    Ok(total / present.len() as f64)
}

/// Assigns every patch its highest-cosine class, upsamples by
/// nearest neighbour to the mask size and scores mIoU.
pub fn zero_shot_segment(task: &SegmentationTask) -> Result<(Vec<Vec<usize>>, f64)> {
    let (hp, wp, c, h, w) = task.validate()?;
    let d = task.patch_grid.shape()[2];
    let patch_class: Vec<usize> = task
        .patch_grid
        .data()
        .chunks(d)
        .map(|patch| argmax((0..c).map(|k| cosine(patch, task.class_embeds.row(k)))))
        .collect();
    let (sy, sx) = (h / hp, w / wp);
    let pred: Vec<Vec<usize>> = (0..h)
        .map(|y| {
            (0..w)
                .map(|x| patch_class[(y / sy) * wp + x / sx])
                .collect()
        })
        .collect();
    let miou = mean_iou(&pred, &task.ground_truth, &task.foreground_classes)?;
    Ok((pred, miou))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingRole {
    Image,
    Text,
    PatchGrid,
}

/// One line of an embedding dump (JSON-lines).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub role: EmbeddingRole,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl EmbeddingRecord {
    pub fn new(id: impl Into<String>, role: EmbeddingRole, t: &Tensor) -> Self {
        Self {
            id: id.into(),
            role,
            shape: t.shape().to_vec(),
            values: t.data().to_vec(),
        }
    }

    pub fn tensor(&self) -> Result<Tensor> {
        Ok(Tensor::new(self.shape.clone(), self.values.clone())?)
    }
}

pub fn write_embedding_dump(w: &mut impl Write, records: &[EmbeddingRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_embedding_dump(r: impl BufRead) -> Result<Vec<EmbeddingRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingRecord = serde_json::from_str(&line)?;
        if rec.shape.iter().product::<usize>() != rec.values.len() {
            return Err(metric_err(format!(
                "record {} has shape {:?} but {} values",
                rec.id,
                rec.shape,
                rec.values.len()
            )));
        }
        out.push(rec);
    }
    Ok(out)
}
