//! Seeded generator of synthetic tables, forms and multi-column paragraph
//! pages with exact ground truth.
//!
//! Every layout decision is an integer draw from [`SplitMix64`]; patch
//! values are `next_f64` draws combined with plain arithmetic, so corpora
//! are bit-reproducible across platforms.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::doc::{self, vocab, BBox, DocKind, Document, Entity, GroundTruth, GRID};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Shape limits every generated document must respect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenOptions {
    pub patch_side: usize,
    /// Upper bound on text tokens per entity (at least 1, at most 4).
    pub max_tokens: usize,
    /// Token budget of the encoder sequence (`[ENT]` + text + visual token
    /// per entity).
    pub max_seq_len: usize,
    /// Largest entity count the relation heads accept.
    pub n_cap: usize,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self { patch_side: 8, max_tokens: 3, max_seq_len: 512, n_cap: 32 }
    }
}

impl GenOptions {
    fn check_capacity(&self, n: usize, what: &str) -> Result<()> {
        if self.max_tokens == 0 || self.max_tokens > doc::MAX_TOKENS_PER_ENTITY || self.patch_side == 0 {
            return Err(Error::Parameter(format!("invalid generator options {self:?}")));
        }
        let worst = n * (self.max_tokens + 2);
        if n > self.n_cap || worst > self.max_seq_len {
            return Err(Error::Capacity(format!(
                "{what}: {n} entities need up to {worst} tokens (n_cap {}, max_seq_len {})",
                self.n_cap, self.max_seq_len
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Role {
    Key,
    Value,
    Cell,
    Text,
}

impl Role {
    fn tokens(self) -> Range<u32> {
        match self {
            Role::Key => vocab::KEY,
            Role::Value => vocab::VALUE,
            Role::Cell => vocab::CELL,
            Role::Text => vocab::TEXT,
        }
    }

    fn tint(self) -> [f64; 3] {
        match self {
            Role::Key => [0.25, 0.35, 0.80],
            Role::Value => [0.80, 0.30, 0.25],
            Role::Cell => [0.60, 0.60, 0.60],
            Role::Text => [0.30, 0.70, 0.35],
        }
    }
}

fn make_entity(rng: &mut SplitMix64, role: Role, bbox: BBox, opts: &GenOptions) -> Entity {
    let r = role.tokens();
    let n_tok = rng.range_usize(1, opts.max_tokens);
    let tokens = (0..n_tok).map(|_| rng.range_i64(r.start as i64, r.end as i64 - 1) as u32).collect();
    let tint = role.tint();
    let base: Vec<f64> = tint.iter().map(|&c| c + rng.uniform(-0.05, 0.05)).collect();
    let mut patch = Vec::with_capacity(opts.patch_side * opts.patch_side * 3);
    for _ in 0..opts.patch_side * opts.patch_side {
        for &b in &base {
            patch.push((b + rng.uniform(-0.1, 0.1)).clamp(0.0, 1.0));
        }
    }
    Entity { id: 0, tokens, bbox, patch }
}

fn finish(kind: DocKind, entities: Vec<Entity>, labels: GroundTruth) -> Document {
    let mut entities = entities;
    for (i, e) in entities.iter_mut().enumerate() {
        e.id = i;
    }
    doc::sort_entities(&Document { kind, entities, labels })
}

fn rand_i(rng: &mut SplitMix64, lo: i32, hi: i32) -> i32 {
    rng.range_i64(lo as i64, hi as i64) as i32
}

/// Lays out `count` intervals of length `[lo, hi]` separated by gaps of
/// `[gap_lo, gap_hi]`, starting after a random share of the leftover slack.
fn tracks(rng: &mut SplitMix64, count: usize, lo: i32, hi: i32, gap_lo: i32, gap_hi: i32, span: i32) -> Vec<(i32, i32)> {
    let sizes: Vec<i32> = (0..count).map(|_| rand_i(rng, lo, hi)).collect();
    let gaps: Vec<i32> = (1..count).map(|_| rand_i(rng, gap_lo, gap_hi)).collect();
    let used: i32 = sizes.iter().sum::<i32>() + gaps.iter().sum::<i32>();
    let mut pos = 20 + rand_i(rng, 0, (span - used).max(0));
    let mut out = Vec::with_capacity(count);
    for (i, &s) in sizes.iter().enumerate() {
        out.push((pos, pos + s));
        pos += s + gaps.get(i).copied().unwrap_or(0);
    }
    out
}

/// `rows × cols` grid of cells with jittered track sizes and insets.
/// Neighbouring cells are at least 24 units apart.
pub fn gen_table(rows: usize, cols: usize, seed: u64, opts: &GenOptions) -> Result<Document> {
    if !(2..=10).contains(&rows) || !(2..=10).contains(&cols) {
        return Err(Error::Parameter(format!("table {rows}x{cols} outside 2..=10")));
    }
    opts.check_capacity(rows * cols, "table")?;
    let mut rng = SplitMix64::new(seed);
    let span = GRID - 40;
    let max_w = 130.min((span - (cols as i32 - 1) * 32) / cols as i32);
    let xs = tracks(&mut rng, cols, 50, max_w, 24, 32, span);
    let ys = tracks(&mut rng, rows, 40, 60, 24, 32, span);
    let mut entities = Vec::with_capacity(rows * cols);
    let mut row_groups = vec![Vec::new(); rows];
    let mut col_groups = vec![Vec::new(); cols];
    for (r, &(y0, y1)) in ys.iter().enumerate() {
        for (c, &(x0, x1)) in xs.iter().enumerate() {
            let bbox = BBox::new(
                x0 + rand_i(&mut rng, 0, 6),
                y0 + rand_i(&mut rng, 0, 4),
                x1 - rand_i(&mut rng, 0, 6),
                y1 - rand_i(&mut rng, 0, 4),
            );
            row_groups[r].push(entities.len());
            col_groups[c].push(entities.len());
            entities.push(make_entity(&mut rng, Role::Cell, bbox, opts));
        }
    }
    let labels = GroundTruth { row_groups: Some(row_groups), col_groups: Some(col_groups), ..Default::default() };
    Ok(finish(DocKind::Table, entities, labels))
}

/// `n_pairs` key/value pairs, each either inline (key left of value) or
/// stacked (key above value), placed in separate blocks at least 60 units
/// apart so that every key's nearest value is its own.
pub fn gen_form(n_pairs: usize, seed: u64, opts: &GenOptions) -> Result<Document> {
    if !(1..=12).contains(&n_pairs) {
        return Err(Error::Parameter(format!("form with {n_pairs} pairs outside 1..=12")));
    }
    opts.check_capacity(2 * n_pairs, "form")?;
    let mut rng = SplitMix64::new(seed);
    let block_cols = match n_pairs {
        0..=3 => 1,
        4..=8 => 2,
        _ => 3,
    };
    let block_w = (GRID - 40) / block_cols;
    let pitch = 94 + 80;
    let mut entities = Vec::with_capacity(2 * n_pairs);
    let mut links = Vec::with_capacity(n_pairs);
    for p in 0..n_pairs {
        let (bc, br) = ((p as i32) % block_cols, (p as i32) / block_cols);
        let bx = 20 + bc * block_w + rand_i(&mut rng, 0, 20);
        let by = 20 + br * pitch + rand_i(&mut rng, 0, 20);
        let (hk, hv) = (rand_i(&mut rng, 24, 34), rand_i(&mut rng, 24, 34));
        let (wk, wv) = (rand_i(&mut rng, 50, 90), rand_i(&mut rng, 60, 110));
        let gap = rand_i(&mut rng, 20, 26);
        let (kb, vb) = if rng.coin() {
            let vy = by + rand_i(&mut rng, -3, 3);
            (BBox::new(bx, by, bx + wk, by + hk), BBox::new(bx + wk + gap, vy, bx + wk + gap + wv, vy + hv))
        } else {
            let vx = bx + rand_i(&mut rng, 0, 10);
            (BBox::new(bx, by, bx + wk, by + hk), BBox::new(vx, by + hk + gap, vx + wv, by + hk + gap + hv))
        };
        links.push((entities.len(), entities.len() + 1));
        entities.push(make_entity(&mut rng, Role::Key, kb, opts));
        entities.push(make_entity(&mut rng, Role::Value, vb, opts));
    }
    let labels = GroundTruth { kv_links: Some(links), ..Default::default() };
    Ok(finish(DocKind::Form, entities, labels))
}

/// Sentences in one or two columns, read column by column. In two-column
/// pages the right column starts slightly higher than the left, so a global
/// top-to-bottom sort interleaves the columns.
pub fn gen_paragraphs(n_sentences: usize, seed: u64, opts: &GenOptions) -> Result<Document> {
    if !(2..=20).contains(&n_sentences) {
        return Err(Error::Parameter(format!("{n_sentences} sentences outside 2..=20")));
    }
    opts.check_capacity(n_sentences, "paragraphs")?;
    let mut rng = SplitMix64::new(seed);
    let two = n_sentences > 12 || rng.coin();
    let left = if two { n_sentences.div_ceil(2) } else { n_sentences };
    let col_x = [40 + rand_i(&mut rng, 0, 40), 520 + rand_i(&mut rng, 0, 40)];
    let top = 40 + rand_i(&mut rng, 0, 40);
    let mut entities = Vec::with_capacity(n_sentences);
    for (c, count) in [left, n_sentences - left].into_iter().enumerate() {
        let mut y = if c == 0 { top } else { top - rand_i(&mut rng, 4, 20) };
        for _ in 0..count {
            let x0 = col_x[c] + rand_i(&mut rng, 0, 10);
            let w = rand_i(&mut rng, 100, 130);
            let h = rand_i(&mut rng, 24, 36);
            let bbox = BBox::new(x0, y, x0 + w, y + h);
            entities.push(make_entity(&mut rng, Role::Text, bbox, opts));
            y += h + rand_i(&mut rng, 24, 30);
        }
    }
    let labels = GroundTruth { reading_order: Some((0..n_sentences).collect()), ..Default::default() };
    Ok(finish(DocKind::Paragraphs, entities, labels))
}

/// Document counts and size ranges (inclusive) per kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub tables: usize,
    pub forms: usize,
    pub paragraphs: usize,
    pub table_rows: [usize; 2],
    pub table_cols: [usize; 2],
    pub form_pairs: [usize; 2],
    pub paragraph_sentences: [usize; 2],
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            tables: 300,
            forms: 300,
            paragraphs: 300,
            table_rows: [2, 5],
            table_cols: [2, 5],
            form_pairs: [2, 8],
            paragraph_sentences: [4, 16],
        }
    }
}

impl CorpusSpec {
    pub fn empty() -> Self {
        Self { tables: 0, forms: 0, paragraphs: 0, ..Self::default() }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, r, lo, hi) in [
            ("table_rows", self.table_rows, 2, 10),
            ("table_cols", self.table_cols, 2, 10),
            ("form_pairs", self.form_pairs, 1, 12),
            ("paragraph_sentences", self.paragraph_sentences, 2, 20),
        ] {
            if r[0] > r[1] || r[0] < lo || r[1] > hi {
                errs.push(format!("corpus.{name} = {r:?} must be an ordered range within {lo}..={hi}"));
            }
        }
        errs
    }
}

/// Generates the documents of one kind. Document `i` draws its size and
/// layout from its own derived stream, so documents are independent.
pub fn gen_documents(kind: DocKind, count: usize, spec: &CorpusSpec, seed: u64, opts: &GenOptions) -> Result<Vec<Document>> {
    (0..count)
        .map(|i| {
            let mut rng = SplitMix64::derive(seed, kind.name(), i as u64);
            let doc_seed = rng.next_u64();
            let draw = |rng: &mut SplitMix64, r: [usize; 2]| rng.range_usize(r[0], r[1]);
            match kind {
                DocKind::Table => {
                    let rows = draw(&mut rng, spec.table_rows);
                    let cols = draw(&mut rng, spec.table_cols);
                    gen_table(rows, cols, doc_seed, opts)
                }
                DocKind::Form => gen_form(draw(&mut rng, spec.form_pairs), doc_seed, opts),
                DocKind::Paragraphs => gen_paragraphs(draw(&mut rng, spec.paragraph_sentences), doc_seed, opts),
            }
        })
        .collect()
}

/// Tables, then forms, then paragraph pages.
pub fn gen_corpus(spec: &CorpusSpec, seed: u64, opts: &GenOptions) -> Result<Vec<Document>> {
    let errs = spec.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let mut docs = gen_documents(DocKind::Table, spec.tables, spec, seed, opts)?;
    docs.extend(gen_documents(DocKind::Form, spec.forms, spec, seed, opts)?);
    docs.extend(gen_documents(DocKind::Paragraphs, spec.paragraphs, spec, seed, opts)?);
    Ok(docs)
}
