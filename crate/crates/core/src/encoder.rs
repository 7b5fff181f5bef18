//! Multi-modal entity encoder: five summed embedding channels and a pre-norm
//! transformer; entity features are the outputs at the `[ENT]` tokens.
//!
//! Sequence layout for a document with entities `e0..eN`:
//! `[ENT] e0-tokens [ENT] e1-tokens ... | vis(e0) ... vis(eN) | padding`.

use serde::{Deserialize, Serialize};

use crate::doc::{vocab, Document};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Binder, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const VIS: u32 = 3;
pub const TEXT_MODALITY: usize = 0;
pub const VISUAL_MODALITY: usize = 1;
const LAYOUT_FEATURES: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub max_seq_len: usize,
    /// Segment table size, i.e. the largest entity count.
    pub n_cap: usize,
    pub patch_side: usize,
    /// Half-width of the uniform init of embedding tables.
    pub embed_init: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { d: 64, layers: 2, heads: 4, ffn: 128, vocab: vocab::SIZE, max_seq_len: 512, n_cap: 32, patch_side: 8, embed_init: 0.1 }
    }
}

impl EncoderConfig {
    /// Gradient-check scale.
    pub fn tiny() -> Self {
        Self { d: 16, layers: 2, heads: 2, ffn: 32, vocab: vocab::SIZE, max_seq_len: 48, n_cap: 4, patch_side: 2, embed_init: 0.3 }
    }

    pub fn patch_len(&self) -> usize {
        3 * self.patch_side * self.patch_side
    }

    pub fn validate(&self, section: &str) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("d", self.d),
            ("heads", self.heads),
            ("ffn", self.ffn),
            ("max_seq_len", self.max_seq_len),
            ("n_cap", self.n_cap),
            ("patch_side", self.patch_side),
        ] {
            if v == 0 {
                errs.push(format!("{section}.{name} must be positive"));
            }
        }
        if self.heads > 0 && !self.d.is_multiple_of(self.heads) {
            errs.push(format!("{section}.d = {} is not divisible by heads = {}", self.d, self.heads));
        }
        if self.vocab < vocab::SIZE {
            errs.push(format!("{section}.vocab = {} is smaller than the token vocabulary ({})", self.vocab, vocab::SIZE));
        }
        if !(self.embed_init > 0.0) {
            errs.push(format!("{section}.embed_init must be positive"));
        }
        errs
    }

    /// Adds freshly initialised encoder weights under `enc.`.
    pub fn init(&self, store: &mut ParamStore, rng: &mut SplitMix64) {
        let (d, s) = (self.d, self.embed_init);
        store.insert_uniform("enc.tok", &[self.vocab, d], s, rng);
        store.insert_uniform("enc.pos", &[self.max_seq_len, d], s, rng);
        store.insert_uniform("enc.seg", &[self.n_cap, d], s, rng);
        store.insert_uniform("enc.mod", &[2, d], s, rng);
        store.insert_linear("enc.layout", LAYOUT_FEATURES, d, rng);
        store.insert_linear("enc.patch", self.patch_len(), d, rng);
        for l in 0..self.layers {
            let p = format!("enc.l{l}");
            for ln in ["ln1", "ln2"] {
                store.insert(format!("{p}.{ln}.g"), Tensor::ones(&[1, d]));
                store.insert(format!("{p}.{ln}.b"), Tensor::zeros(&[1, d]));
            }
            for m in ["q", "k", "v", "o"] {
                store.insert_linear(&format!("{p}.attn.{m}"), d, d, rng);
            }
            // a key bias only shifts each score row, which softmax ignores
            store.remove(&format!("{p}.attn.k.b"));
            store.insert_linear(&format!("{p}.ffn.fc1"), d, self.ffn, rng);
            store.insert_linear(&format!("{p}.ffn.fc2"), self.ffn, d, rng);
        }
    }
}

/// Flattened token sequence for one document.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub positions: Vec<usize>,
    pub layout: Vec<[f64; LAYOUT_FEATURES]>,
    pub segments: Vec<usize>,
    pub modality: Vec<usize>,
    /// `false` for padding.
    pub valid: Vec<bool>,
    /// Sequence index of each entity's `[ENT]` token.
    pub ent_positions: Vec<usize>,
    /// Sequence indices of plain text tokens (the MVLM candidates).
    pub text_positions: Vec<usize>,
    /// First visual token; visual tokens occupy `visual_start..visual_start+N`.
    pub visual_start: usize,
    /// One `P×P×3` patch per entity.
    pub patches: Vec<Vec<f64>>,
}

impl TokenSequence {
    pub fn build(doc: &Document, cfg: &EncoderConfig) -> Result<Self> {
        let n = doc.len();
        let len = n + doc.num_tokens() + n;
        if n > cfg.n_cap || len > cfg.max_seq_len {
            return Err(Error::Capacity(format!(
                "{} document with {n} entities needs {len} tokens (n_cap {}, max_seq_len {})",
                doc.kind.name(),
                cfg.n_cap,
                cfg.max_seq_len
            )));
        }
        let mut s = TokenSequence {
            tokens: Vec::with_capacity(len),
            positions: Vec::with_capacity(len),
            layout: Vec::with_capacity(len),
            segments: Vec::with_capacity(len),
            modality: Vec::with_capacity(len),
            valid: vec![true; len],
            ent_positions: Vec::with_capacity(n),
            text_positions: Vec::new(),
            visual_start: len - n,
            patches: Vec::with_capacity(n),
        };
        let push = |s: &mut TokenSequence, t: u32, i: usize, m: usize| {
            let b = doc.entities[i].bbox;
            let f = [b.x0, b.y0, b.x1, b.y1, b.width(), b.height()].map(|v| v as f64 / 1000.0);
            s.positions.push(s.tokens.len());
            s.tokens.push(t);
            s.layout.push(f);
            s.segments.push(i);
            s.modality.push(m);
        };
        for (i, e) in doc.entities.iter().enumerate() {
            s.ent_positions.push(s.tokens.len());
            push(&mut s, vocab::ENT, i, TEXT_MODALITY);
            for &t in &e.tokens {
                s.text_positions.push(s.tokens.len());
                push(&mut s, t, i, TEXT_MODALITY);
            }
        }
        for (i, e) in doc.entities.iter().enumerate() {
            if e.patch.len() != cfg.patch_len() {
                return Err(Error::dim(
                    "embed",
                    format!("entity {i} patch has {} values, encoder expects {}", e.patch.len(), cfg.patch_len()),
                ));
            }
            push(&mut s, VIS, i, VISUAL_MODALITY);
            s.patches.push(e.patch.clone());
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_entities(&self) -> usize {
        self.ent_positions.len()
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Extends the sequence to `len` with invisible padding tokens.
    pub fn padded(mut self, len: usize, cfg: &EncoderConfig) -> Result<Self> {
        if len > cfg.max_seq_len {
            return Err(Error::Capacity(format!("padding to {len} exceeds max_seq_len {}", cfg.max_seq_len)));
        }
        while self.tokens.len() < len {
            self.positions.push(self.tokens.len());
            self.tokens.push(vocab::PAD);
            self.layout.push([0.0; LAYOUT_FEATURES]);
            self.segments.push(0);
            self.modality.push(TEXT_MODALITY);
            self.valid.push(false);
        }
        Ok(self)
    }

    /// Copy with the text tokens at `positions` replaced by `[MASK]`.
    pub fn masked(&self, positions: &[usize]) -> Self {
        let mut s = self.clone();
        for &p in positions {
            s.tokens[p] = vocab::MASK;
        }
        s
    }
}

fn index_rows(idx: impl Iterator<Item = usize>) -> Vec<usize> {
    idx.collect()
}

/// Patch projection of every entity patch: `[N, d]`.
pub fn patch_embedding(b: &Binder, seq: &TokenSequence) -> Result<Var> {
    let g = b.graph();
    let n = seq.n_entities();
    let patches = Tensor::new(vec![n, seq.patches[0].len()], seq.patches.concat())?;
    b.linear("enc.patch", g.constant(patches))
}

/// Sum of token/patch, position, layout, segment and modality embeddings:
/// `[len, d]`.
pub fn embed(b: &Binder, seq: &TokenSequence) -> Result<Var> {
    let g = b.graph();
    let tok = b.get("enc.tok")?;
    let text_ids = index_rows(seq.tokens[..seq.visual_start].iter().map(|&t| t as usize));
    let mut parts = vec![g.gather_rows(tok, &text_ids)?, patch_embedding(b, seq)?];
    let vis_end = seq.visual_start + seq.n_entities();
    if vis_end < seq.len() {
        let pad_ids = index_rows(seq.tokens[vis_end..].iter().map(|&t| t as usize));
        parts.push(g.gather_rows(tok, &pad_ids)?);
    }
    let base = g.concat_rows(&parts)?;
    let pos = g.gather_rows(b.get("enc.pos")?, &seq.positions)?;
    let layout = Tensor::new(vec![seq.len(), LAYOUT_FEATURES], seq.layout.concat())?;
    let layout = b.linear("enc.layout", g.constant(layout))?;
    let seg = g.gather_rows(b.get("enc.seg")?, &seq.segments)?;
    let modality = g.gather_rows(b.get("enc.mod")?, &seq.modality)?;
    let x = g.add(base, pos)?;
    let x = g.add(x, layout)?;
    let x = g.add(x, seg)?;
    g.add(x, modality)
}

fn attention(b: &Binder, p: &str, h: Var, seq: &TokenSequence, cfg: &EncoderConfig) -> Result<Var> {
    let g = b.graph();
    let q = b.linear(&format!("{p}.q"), h)?;
    let k = g.matmul(h, b.get(&format!("{p}.k.w"))?)?;
    let v = b.linear(&format!("{p}.v"), h)?;
    let dh = cfg.d / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let qh = g.slice_cols(q, head * dh, dh)?;
        let kh = g.slice_cols(k, head * dh, dh)?;
        let vh = g.slice_cols(v, head * dh, dh)?;
        let scores = g.scale(g.matmul_t(qh, kh)?, scale);
        let att = g.softmax_rows_masked(scores, 1.0, Some(&seq.valid))?;
        outs.push(g.matmul(att, vh)?);
    }
    let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
    b.linear(&format!("{p}.o"), cat)
}

/// Pre-norm transformer stack; padding is excluded from every attention
/// key set. With zero layers the input is returned unchanged.
pub fn encode(b: &Binder, x: Var, seq: &TokenSequence, cfg: &EncoderConfig) -> Result<Var> {
    let g = b.graph();
    let mut x = x;
    for l in 0..cfg.layers {
        let p = format!("enc.l{l}");
        let h = g.layer_norm(x, b.get(&format!("{p}.ln1.g"))?, b.get(&format!("{p}.ln1.b"))?)?;
        x = g.add(x, attention(b, &format!("{p}.attn"), h, seq, cfg)?)?;
        let h = g.layer_norm(x, b.get(&format!("{p}.ln2.g"))?, b.get(&format!("{p}.ln2.b"))?)?;
        x = g.add(x, b.mlp(&format!("{p}.ffn"), h)?)?;
    }
    Ok(x)
}

/// Rows of `fused` at the `[ENT]` positions, in entity order: `[N, d]`.
pub fn extract_entity_features(g: &Graph, fused: Var, seq: &TokenSequence) -> Result<Var> {
    g.gather_rows(fused, &seq.ent_positions)
}

/// `embed → encode → extract` for one sequence.
pub fn entity_features(b: &Binder, seq: &TokenSequence, cfg: &EncoderConfig) -> Result<Var> {
    let x = embed(b, seq)?;
    let fused = encode(b, x, seq, cfg)?;
    extract_entity_features(b.graph(), fused, seq)
}

/// Entity features of one document as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityFeatures {
    pub m: Tensor,
    pub n_valid: usize,
}

impl EntityFeatures {
    pub fn compute(store: &ParamStore, doc: &Document, cfg: &EncoderConfig) -> Result<Self> {
        let g = Graph::new();
        let b = Binder::new(&g, store, false);
        let seq = TokenSequence::build(doc, cfg)?;
        let m = entity_features(&b, &seq, cfg)?;
        Ok(EntityFeatures { m: (*g.value(m)).clone(), n_valid: doc.len() })
    }
}

/// Stacks features into `[B, N_max, d]` with zero rows beyond each
/// document's `n_valid`, plus a `[B, N_max]` 0/1 validity mask.
pub fn pad_batch(items: &[EntityFeatures]) -> Result<(Tensor, Tensor)> {
    let first = items.first().ok_or_else(|| Error::Parameter("pad_batch of an empty list".into()))?;
    let d = first.m.cols();
    let n_max = items.iter().map(|f| f.n_valid).max().unwrap_or(0);
    if n_max == 0 {
        return Err(Error::Parameter("pad_batch of documents without entities".into()));
    }
    let mut data = vec![0.0; items.len() * n_max * d];
    let mut mask = vec![0.0; items.len() * n_max];
    for (bi, f) in items.iter().enumerate() {
        if f.m.cols() != d || f.m.rows() < f.n_valid {
            return Err(Error::dim("pad_batch", format!("item {bi} has shape {:?}", f.m.shape())));
        }
        for i in 0..f.n_valid {
            data[(bi * n_max + i) * d..(bi * n_max + i + 1) * d].copy_from_slice(f.m.row(i));
            mask[bi * n_max + i] = 1.0;
        }
    }
    Ok((Tensor::new(vec![items.len(), n_max, d], data)?, Tensor::new(vec![items.len(), n_max], mask)?))
}
