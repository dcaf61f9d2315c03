//! Toy dual encoder: patch features and token ids to patch, token and
//! pooled embeddings in a shared space.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sparc_tensor::{Graph, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::params::{BoundParams, ParamStore};

const LN_EPS: f64 = 1e-5;
const MLP_RATIO: usize = 4;
/// Standard deviation of a unit normal truncated to ±2.
const TRUNC_STD: f64 = 0.879_625_661_034_239_8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_patches: usize,
    pub max_tokens: usize,
    pub vocab_size: usize,
    pub patch_dim: usize,
    pub model_width: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub shared_dim: usize,
    pub positional: bool,
    /// Non-linear layer h_v between the patch average and g_v on the
    /// global image path. Off, v_bar is g_v of the plain patch average.
    pub global_head: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_patches: 16,
            max_tokens: 6,
            vocab_size: 64,
            patch_dim: 32,
            model_width: 32,
            num_layers: 1,
            num_heads: 2,
            shared_dim: 32,
            positional: false,
            global_head: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_patches", self.num_patches),
            ("max_tokens", self.max_tokens),
            ("vocab_size", self.vocab_size),
            ("patch_dim", self.patch_dim),
            ("model_width", self.model_width),
            ("num_heads", self.num_heads),
            ("shared_dim", self.shared_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CoreError::Config(format!("{name} must be positive")));
            }
        }
        if self.model_width % self.num_heads != 0 {
            return Err(CoreError::Config(format!(
                "model_width {} not divisible by num_heads {}",
                self.model_width, self.num_heads
            )));
        }
        if self.shared_dim > self.model_width {
            return Err(CoreError::Config(format!(
                "shared_dim {} exceeds model_width {}",
                self.shared_dim, self.model_width
            )));
        }
        Ok(())
    }
}

/// B paired items. Masks are prefix masks: valid tokens precede padding.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTextBatch {
    /// `[B, P, patch_dim]`
    pub patches: Tensor,
    pub token_ids: Vec<Vec<usize>>,
    pub token_mask: Vec<Vec<bool>>,
}

impl ImageTextBatch {
    pub fn batch_size(&self) -> usize {
        self.token_ids.len()
    }

    /// Valid-token count per item, checking the prefix-mask invariant.
    pub fn lengths(&self) -> Result<Vec<usize>> {
        mask_lengths(&self.token_mask)
    }

    /// Same batch with every mask row extended by `extra` padding positions.
    pub fn padded(&self, extra: usize) -> Self {
        let mut out = self.clone();
        for (ids, mask) in out.token_ids.iter_mut().zip(&mut out.token_mask) {
            ids.extend(std::iter::repeat(0).take(extra));
            mask.extend(std::iter::repeat(false).take(extra));
        }
        out
    }

    /// Items at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let shape = self.patches.shape();
        let per = shape[1] * shape[2];
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.patches.data()[i * per..(i + 1) * per]);
        }
        Self {
            patches: Tensor::new(vec![indices.len(), shape[1], shape[2]], data)
                .expect("subset of a valid batch"),
            token_ids: indices.iter().map(|&i| self.token_ids[i].clone()).collect(),
            token_mask: indices
                .iter()
                .map(|&i| self.token_mask[i].clone())
                .collect(),
        }
    }
}

pub fn mask_lengths(mask: &[Vec<bool>]) -> Result<Vec<usize>> {
    mask.iter()
        .enumerate()
        .map(|(i, row)| {
            let len = row.iter().take_while(|&&m| m).count();
            if len == 0 {
                return Err(CoreError::Batch(format!("item {i} has no valid tokens")));
            }
            if row[len..].iter().any(|&m| m) {
                return Err(CoreError::Batch(format!(
                    "item {i} mask is not a prefix mask"
                )));
            }
            Ok(len)
        })
        .collect()
}

/// Graph handles for one batch's embeddings.
#[derive(Clone, Debug)]
pub struct EmbeddingSet {
    /// `[B, P, d]`
    pub v: Var,
    /// `[B, L_max, d]`, zero at padded positions
    pub t: Var,
    /// `[B, d]`
    pub v_bar: Var,
    /// `[B, d]`
    pub t_bar: Var,
    /// Valid tokens per item.
    pub lengths: Vec<usize>,
}

impl EmbeddingSet {
    /// Wraps raw tensors as graph leaves (gradient-receiving when `trainable`).
    pub fn from_tensors(
        g: &mut Graph,
        v: Tensor,
        t: Tensor,
        v_bar: Tensor,
        t_bar: Tensor,
        lengths: Vec<usize>,
        trainable: bool,
    ) -> Result<Self> {
        let b = v.shape()[0];
        if v.rank() != 3
            || t.rank() != 3
            || v_bar.shape() != [b, v.shape()[2]]
            || t_bar.shape() != [b, v.shape()[2]]
            || t.shape()[0] != b
            || t.shape()[2] != v.shape()[2]
            || lengths.len() != b
        {
            return Err(CoreError::Batch("inconsistent embedding shapes".into()));
        }
        if lengths.iter().any(|&l| l == 0 || l > t.shape()[1]) {
            return Err(CoreError::Batch("token lengths out of range".into()));
        }
        let mut leaf = |x: Tensor| if trainable { g.param(x) } else { g.constant(x) };
        Ok(Self {
            v: leaf(v),
            t: leaf(t),
            v_bar: leaf(v_bar),
            t_bar: leaf(t_bar),
            lengths,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    /// Valid token rows of item `i`: `[L_i, d]`.
    pub fn tokens(&self, g: &mut Graph, i: usize) -> Result<Var> {
        let ti = g.select(self.t, 0, i)?;
        Ok(g.slice(ti, 0, 0, self.lengths[i])?)
    }

    /// Patch rows of item `i`: `[P, d]`.
    pub fn patches(&self, g: &mut Graph, i: usize) -> Result<Var> {
        Ok(g.select(self.v, 0, i)?)
    }
}

/// Embedding values outside any graph, e.g. for evaluating an objective on
/// synthetic embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct RawEmbeddings {
    pub v: Tensor,
    pub t: Tensor,
    pub v_bar: Tensor,
    pub t_bar: Tensor,
    pub lengths: Vec<usize>,
}

impl RawEmbeddings {
    /// Standard normal entries; token rows past each length are zero.
    pub fn random(
        b: usize,
        l_max: usize,
        p: usize,
        d: usize,
        lengths: &[usize],
        seed: u64,
    ) -> Self {
        assert_eq!(lengths.len(), b, "one length per item");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |shape: Vec<usize>| {
            let n = shape.iter().product();
            let data = (0..n)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            Tensor::new(shape, data).expect("shape and data agree")
        };
        let v = normal(vec![b, p, d]);
        let mut t = normal(vec![b, l_max, d]);
        for (i, &len) in lengths.iter().enumerate() {
            for x in &mut t.data_mut()[(i * l_max + len) * d..(i + 1) * l_max * d] {
                *x = 0.0;
            }
        }
        let v_bar = normal(vec![b, d]);
        let t_bar = normal(vec![b, d]);
        Self {
            v,
            t,
            v_bar,
            t_bar,
            lengths: lengths.to_vec(),
        }
    }

    /// Every embedding vector equal to `value`.
    pub fn constant(b: usize, l: usize, p: usize, d: usize, value: f64) -> Self {
        Self {
            v: Tensor::full(vec![b, p, d], value),
            t: Tensor::full(vec![b, l, d], value),
            v_bar: Tensor::full(vec![b, d], value),
            t_bar: Tensor::full(vec![b, d], value),
            lengths: vec![l; b],
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<EmbeddingSet> {
        EmbeddingSet::from_tensors(
            g,
            self.v.clone(),
            self.t.clone(),
            self.v_bar.clone(),
            self.t_bar.clone(),
            self.lengths.clone(),
            trainable,
        )
    }

    pub fn from_graph(g: &Graph, e: &EmbeddingSet) -> Self {
        Self {
            v: g.value(e.v).clone(),
            t: g.value(e.t).clone(),
            v_bar: g.value(e.v_bar).clone(),
            t_bar: g.value(e.t_bar).clone(),
            lengths: e.lengths.clone(),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    /// Items at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let pick = |x: &Tensor| {
            let rows: Vec<Tensor> = indices.iter().map(|&i| x.index_first(i)).collect();
            let mut shape = rows[0].shape().to_vec();
            shape.insert(0, indices.len());
            Tensor::new(
                shape,
                rows.into_iter().flat_map(Tensor::into_data).collect(),
            )
            .expect("stacked rows")
        };
        Self {
            v: pick(&self.v),
            t: pick(&self.t),
            v_bar: pick(&self.v_bar),
            t_bar: pick(&self.t_bar),
            lengths: indices.iter().map(|&i| self.lengths[i]).collect(),
        }
    }
}

// ---- initialization ------------------------------------------------------

/// Normal samples truncated to ±2 standard deviations, rescaled so the
/// resulting standard deviation is `std`.
pub(crate) fn truncated_normal(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z * std / TRUNC_STD;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn truncated(&mut self, shape: Vec<usize>, std: f64) -> Tensor {
        truncated_normal(&mut self.rng, shape, std)
    }

    fn linear(&mut self, store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) {
        let w = self.truncated(vec![fan_in, fan_out], 1.0 / (fan_in as f64).sqrt());
        store.insert(format!("{name}.w"), w);
        store.insert(format!("{name}.b"), Tensor::zeros(vec![fan_out]));
    }

    fn layer_norm(&mut self, store: &mut ParamStore, name: &str, width: usize) {
        store.insert(format!("{name}.gamma"), Tensor::ones(vec![width]));
        store.insert(format!("{name}.beta"), Tensor::zeros(vec![width]));
    }

    fn block(&mut self, store: &mut ParamStore, name: &str, w: usize) {
        self.layer_norm(store, &format!("{name}.ln1"), w);
        for proj in ["q", "k", "v", "o"] {
            self.linear(store, &format!("{name}.attn.{proj}"), w, w);
        }
        self.layer_norm(store, &format!("{name}.ln2"), w);
        self.linear(store, &format!("{name}.mlp.fc1"), w, MLP_RATIO * w);
        self.linear(store, &format!("{name}.mlp.fc2"), MLP_RATIO * w, w);
    }
}

/// Deterministic parameter initialization. Weights of linear layers are
/// truncated normal with standard deviation `1/sqrt(fan_in)`; biases are zero.
pub fn init_params(cfg: &EncoderConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mut s = ParamStore::new();
    let (w, d) = (cfg.model_width, cfg.shared_dim);

    init.linear(&mut s, "vision.patch_proj", cfg.patch_dim, w);
    if cfg.positional {
        s.insert("vision.pos", init.truncated(vec![cfg.num_patches, w], 0.02));
    }
    for l in 0..cfg.num_layers {
        init.block(&mut s, &format!("vision.block{l}"), w);
    }
    if cfg.num_layers > 0 {
        init.layer_norm(&mut s, "vision.ln_final", w);
    }
    if cfg.global_head {
        init.linear(&mut s, "vision.global_head", w, w);
    }
    init.linear(&mut s, "vision.adapter", w, d);

    s.insert(
        "text.embed",
        init.truncated(vec![cfg.vocab_size, w], 1.0 / (w as f64).sqrt()),
    );
    if cfg.positional {
        s.insert("text.pos", init.truncated(vec![cfg.max_tokens, w], 0.02));
    }
    for l in 0..cfg.num_layers {
        init.block(&mut s, &format!("text.block{l}"), w);
    }
    if cfg.num_layers > 0 {
        init.layer_norm(&mut s, "text.ln_final", w);
    }
    init.linear(&mut s, "text.adapter", w, d);
    Ok(s)
}

// ---- forward -------------------------------------------------------------

fn linear(g: &mut Graph, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    Ok(g.add(y, b)?)
}

fn layer_norm(g: &mut Graph, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let gamma = p.get(&format!("{name}.gamma"))?;
    let beta = p.get(&format!("{name}.beta"))?;
    let y = g.layer_norm(x, LN_EPS)?;
    let y = g.mul(y, gamma)?;
    Ok(g.add(y, beta)?)
}

/// Multi-head self-attention core on `[n_seq, n, w]` projections; returns
/// `[n_seq * n, w]` before the output projection.
fn attention_core(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let shape = g.shape(q).to_vec();
    let (bs, n, w) = (shape[0], shape[1], shape[2]);
    let dh = w / heads;
    let split = |g: &mut Graph, x: Var| -> Result<Var> {
        let x = g.reshape(x, &[bs, n, heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        Ok(g.reshape(x, &[bs * heads, n, dh])?)
    };
    let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
    let kt = g.permute(k, &[0, 2, 1])?;
    let scores = g.bmm(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let att = g.softmax(scores, 2)?;
    let out = g.bmm(att, v)?;
    let out = g.reshape(out, &[bs, heads, n, dh])?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    Ok(g.reshape(out, &[bs * n, w])?)
}

/// Pre-norm transformer block on row-stacked sequences `[N, w]`. `attend`
/// maps the q/k/v projections (each `[N, w]`) to per-row attention outputs.
fn block(
    g: &mut Graph,
    p: &BoundParams,
    name: &str,
    x: Var,
    attend: &dyn Fn(&mut Graph, Var, Var, Var) -> Result<Var>,
) -> Result<Var> {
    let h = layer_norm(g, p, &format!("{name}.ln1"), x)?;
    let q = linear(g, p, &format!("{name}.attn.q"), h)?;
    let k = linear(g, p, &format!("{name}.attn.k"), h)?;
    let v = linear(g, p, &format!("{name}.attn.v"), h)?;
    let a = attend(g, q, k, v)?;
    let a = linear(g, p, &format!("{name}.attn.o"), a)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, p, &format!("{name}.ln2"), x)?;
    let h = linear(g, p, &format!("{name}.mlp.fc1"), h)?;
    let h = g.gelu(h)?;
    let h = linear(g, p, &format!("{name}.mlp.fc2"), h)?;
    Ok(g.add(x, h)?)
}

/// Returns `(v [B,P,d], v_bar [B,d])`.
pub fn encode_image(
    g: &mut Graph,
    cfg: &EncoderConfig,
    p: &BoundParams,
    patches: Var,
) -> Result<(Var, Var)> {
    let shape = g.shape(patches).to_vec();
    if shape.len() != 3 || shape[1] != cfg.num_patches || shape[2] != cfg.patch_dim {
        return Err(CoreError::Batch(format!(
            "patches shape {shape:?} does not match [B, {}, {}]",
            cfg.num_patches, cfg.patch_dim
        )));
    }
    let (b, np, w) = (shape[0], cfg.num_patches, cfg.model_width);
    let x = g.reshape(patches, &[b * np, cfg.patch_dim])?;
    let mut x = linear(g, p, "vision.patch_proj", x)?;
    if cfg.positional {
        let pos = p.get("vision.pos")?;
        let x3 = g.reshape(x, &[b, np, w])?;
        let x3 = g.add(x3, pos)?;
        x = g.reshape(x3, &[b * np, w])?;
    }
    let heads = cfg.num_heads;
    let attend = move |g: &mut Graph, q: Var, k: Var, v: Var| -> Result<Var> {
        let q = g.reshape(q, &[b, np, w])?;
        let k = g.reshape(k, &[b, np, w])?;
        let v = g.reshape(v, &[b, np, w])?;
        attention_core(g, q, k, v, heads)
    };
    for l in 0..cfg.num_layers {
        x = block(g, p, &format!("vision.block{l}"), x, &attend)?;
    }
    if cfg.num_layers > 0 {
        x = layer_norm(g, p, "vision.ln_final", x)?;
    }
    let v = linear(g, p, "vision.adapter", x)?;
    let v = g.reshape(v, &[b, np, cfg.shared_dim])?;

    let x3 = g.reshape(x, &[b, np, w])?;
    let pooled = g.mean(x3, 1, false)?;
    let h = if cfg.global_head {
        let h = linear(g, p, "vision.global_head", pooled)?;
        g.gelu(h)?
    } else {
        pooled
    };
    let v_bar = linear(g, p, "vision.adapter", h)?;
    Ok((v, v_bar))
}

/// Returns `(t [B,L_max,d], t_bar [B,d])`. Attention and pooling see only
/// each item's valid prefix; padded rows of `t` are zero.
pub fn encode_text(
    g: &mut Graph,
    cfg: &EncoderConfig,
    p: &BoundParams,
    token_ids: &[Vec<usize>],
    token_mask: &[Vec<bool>],
) -> Result<(Var, Var)> {
    let lengths = mask_lengths(token_mask)?;
    let b = token_ids.len();
    if b == 0 || token_mask.len() != b {
        return Err(CoreError::Batch(
            "token ids and mask disagree in batch size".into(),
        ));
    }
    let l_max = token_ids[0].len();
    if token_ids.iter().any(|r| r.len() != l_max) || token_mask.iter().any(|r| r.len() != l_max) {
        return Err(CoreError::Batch("ragged token matrix".into()));
    }
    if cfg.positional && l_max > cfg.max_tokens {
        return Err(CoreError::Batch(format!(
            "sequence length {l_max} exceeds max_tokens {}",
            cfg.max_tokens
        )));
    }
    let w = cfg.model_width;
    let mut flat = Vec::with_capacity(b * l_max);
    for (ids, &len) in token_ids.iter().zip(&lengths) {
        for (pos, &id) in ids.iter().enumerate() {
            if pos < len && id >= cfg.vocab_size {
                return Err(CoreError::TokenOutOfVocab {
                    id,
                    vocab: cfg.vocab_size,
                });
            }
            flat.push(if pos < len { id } else { 0 });
        }
    }
    let table = p.get("text.embed")?;
    let mut x = g.embedding(table, &flat)?;
    if cfg.positional {
        let pos = p.get("text.pos")?;
        let pos = g.slice(pos, 0, 0, l_max)?;
        let x3 = g.reshape(x, &[b, l_max, w])?;
        let x3 = g.add(x3, pos)?;
        x = g.reshape(x3, &[b * l_max, w])?;
    }
    let heads = cfg.num_heads;
    let lens = lengths.clone();
    let attend = move |g: &mut Graph, q: Var, k: Var, v: Var| -> Result<Var> {
        let mut rows = Vec::with_capacity(b);
        for (i, &len) in lens.iter().enumerate() {
            let mut take = |x: Var| -> Result<Var> {
                let s = g.slice(x, 0, i * l_max, len)?;
                Ok(g.reshape(s, &[1, len, w])?)
            };
            let (qi, ki, vi) = (take(q)?, take(k)?, take(v)?);
            let out = attention_core(g, qi, ki, vi, heads)?;
            rows.push(pad_rows(g, out, len, l_max, w)?);
        }
        Ok(g.concat(&rows, 0)?)
    };
    for l in 0..cfg.num_layers {
        x = block(g, p, &format!("text.block{l}"), x, &attend)?;
    }
    if cfg.num_layers > 0 {
        x = layer_norm(g, p, "text.ln_final", x)?;
    }

    let mut pooled = Vec::with_capacity(b);
    for (i, &len) in lengths.iter().enumerate() {
        let s = g.slice(x, 0, i * l_max, len)?;
        pooled.push(g.mean(s, 0, false)?);
    }
    let pooled = g.stack(&pooled)?;
    let t_bar = linear(g, p, "text.adapter", pooled)?;

    let t = linear(g, p, "text.adapter", x)?;
    let d = cfg.shared_dim;
    let mask: Vec<bool> = token_mask
        .iter()
        .flat_map(|row| row.iter().flat_map(|&m| std::iter::repeat(m).take(d)))
        .collect();
    let zeros = g.constant(Tensor::zeros(vec![b * l_max, d]));
    let t = g.where_(&mask, t, zeros)?;
    let t = g.reshape(t, &[b, l_max, d])?;
    Ok((t, t_bar))
}

fn pad_rows(g: &mut Graph, x: Var, len: usize, total: usize, w: usize) -> Result<Var> {
    if len == total {
        return Ok(x);
    }
    let zeros = g.constant(Tensor::zeros(vec![total - len, w]));
    Ok(g.concat(&[x, zeros], 0)?)
}

/// Encodes both modalities of a batch.
pub fn encode(
    g: &mut Graph,
    cfg: &EncoderConfig,
    p: &BoundParams,
    batch: &ImageTextBatch,
) -> Result<EmbeddingSet> {
    let patches = g.constant(batch.patches.clone());
    let (v, v_bar) = encode_image(g, cfg, p, patches)?;
    let (t, t_bar) = encode_text(g, cfg, p, &batch.token_ids, &batch.token_mask)?;
    Ok(EmbeddingSet {
        v,
        t,
        v_bar,
        t_bar,
        lengths: batch.lengths()?,
    })
}
