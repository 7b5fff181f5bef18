//! Document data model, ground-truth relation matrices and layout-based
//! relation re-derivation.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Page coordinates live on `0..=GRID`.
pub const GRID: i32 = 1000;
pub const MAX_TOKENS_PER_ENTITY: usize = 4;

/// Token vocabulary shared by the generator and the encoder.
pub mod vocab {
    pub const PAD: u32 = 0;
    pub const ENT: u32 = 1;
    pub const MASK: u32 = 2;
    pub const FIRST_CONTENT: u32 = 4;
    pub const KEY: std::ops::Range<u32> = 4..36;
    pub const VALUE: std::ops::Range<u32> = 36..68;
    pub const CELL: std::ops::Range<u32> = 68..100;
    pub const TEXT: std::ops::Range<u32> = 100..128;
    pub const SIZE: usize = 128;

    /// Printable form of a content token, e.g. `k07` or `v12`.
    pub fn token_string(t: u32) -> String {
        let (p, base) = if KEY.contains(&t) {
            ('k', KEY.start)
        } else if VALUE.contains(&t) {
            ('v', VALUE.start)
        } else if CELL.contains(&t) {
            ('c', CELL.start)
        } else if TEXT.contains(&t) {
            ('w', TEXT.start)
        } else {
            return format!("<{t}>");
        };
        format!("{p}{:02}", t - base)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[i32; 4]", into = "[i32; 4]")]
pub struct BBox {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl From<[i32; 4]> for BBox {
    fn from(a: [i32; 4]) -> Self {
        BBox { x0: a[0], y0: a[1], x1: a[2], y1: a[3] }
    }
}

impl From<BBox> for [i32; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub fn new(x0: i32, y0: i32, x1: i32, y1: i32) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> i32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> i32 {
        self.y1 - self.y0
    }

    pub fn is_valid(&self) -> bool {
        0 <= self.x0 && self.x0 < self.x1 && self.x1 <= GRID && 0 <= self.y0 && self.y0 < self.y1 && self.y1 <= GRID
    }

    /// Positive-area intersection. Shared edges do not count.
    pub fn overlaps(&self, o: &BBox) -> bool {
        self.x0.max(o.x0) < self.x1.min(o.x1) && self.y0.max(o.y0) < self.y1.min(o.y1)
    }

    pub fn overlaps_x(&self, o: &BBox) -> bool {
        self.x0.max(o.x0) < self.x1.min(o.x1)
    }

    pub fn overlaps_y(&self, o: &BBox) -> bool {
        self.y0.max(o.y0) < self.y1.min(o.y1)
    }

    /// L1 distance between the two boxes' closest edges (0 when they touch
    /// or intersect).
    pub fn gap(&self, o: &BBox) -> i32 {
        let dx = (o.x0 - self.x1).max(self.x0 - o.x1).max(0);
        let dy = (o.y0 - self.y1).max(self.y0 - o.y1).max(0);
        dx + dy
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: usize,
    pub tokens: Vec<u32>,
    pub bbox: BBox,
    /// `P×P×3` RGB crop, row-major, channel-last, values in `[0, 1]`.
    pub patch: Vec<f64>,
}

impl Entity {
    pub fn patch_side(&self) -> Option<usize> {
        patch_side(self.patch.len())
    }
}

pub fn patch_side(len: usize) -> Option<usize> {
    if !len.is_multiple_of(3) {
        return None;
    }
    let sq = len / 3;
    let p = (sq as f64).sqrt().round() as usize;
    (p > 0 && p * p == sq).then_some(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DocKind {
    Table,
    Form,
    Paragraphs,
}

impl DocKind {
    pub fn relation_kinds(self) -> &'static [RelationKind] {
        match self {
            DocKind::Table => &[RelationKind::Row, RelationKind::Col],
            DocKind::Form => &[RelationKind::Kv],
            DocKind::Paragraphs => &[RelationKind::Order],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DocKind::Table => "table",
            DocKind::Form => "form",
            DocKind::Paragraphs => "paragraphs",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationKind {
    Row,
    Col,
    Kv,
    Order,
}

impl RelationKind {
    pub const ALL: [RelationKind; 4] = [RelationKind::Row, RelationKind::Col, RelationKind::Kv, RelationKind::Order];

    pub fn name(self) -> &'static str {
        match self {
            RelationKind::Row => "row",
            RelationKind::Col => "col",
            RelationKind::Kv => "kv",
            RelationKind::Order => "order",
        }
    }

    pub fn doc_kind(self) -> DocKind {
        match self {
            RelationKind::Row | RelationKind::Col => DocKind::Table,
            RelationKind::Kv => DocKind::Form,
            RelationKind::Order => DocKind::Paragraphs,
        }
    }
}

impl fmt::Display for RelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RelationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "row" => Ok(RelationKind::Row),
            "col" => Ok(RelationKind::Col),
            "kv" => Ok(RelationKind::Kv),
            "order" => Ok(RelationKind::Order),
            _ => Err(Error::Parameter(format!("unknown relation kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_groups: Option<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub col_groups: Option<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kv_links: Option<Vec<(usize, usize)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reading_order: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub kind: DocKind,
    pub entities: Vec<Entity>,
    pub labels: GroundTruth,
}

impl Document {
    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn num_tokens(&self) -> usize {
        self.entities.iter().map(|e| e.tokens.len()).sum()
    }

    /// Checks every structural invariant of the type.
    pub fn validate(&self) -> Result<()> {
        let n = self.entities.len();
        if n < 2 {
            return Err(Error::Document(format!("{n} entities; at least 2 required")));
        }
        let side = self.entities[0].patch_side();
        for (i, e) in self.entities.iter().enumerate() {
            let bad = |message: String| Error::Validation { entity: e.id, message };
            if e.id != i {
                return Err(bad(format!("id {} at position {i}", e.id)));
            }
            if !e.bbox.is_valid() {
                return Err(bad(format!("invalid bbox {:?}", <[i32; 4]>::from(e.bbox))));
            }
            if e.tokens.is_empty() || e.tokens.len() > MAX_TOKENS_PER_ENTITY {
                return Err(bad(format!("{} tokens (allowed 1..={MAX_TOKENS_PER_ENTITY})", e.tokens.len())));
            }
            if let Some(t) = e.tokens.iter().find(|&&t| t < vocab::FIRST_CONTENT || t as usize >= vocab::SIZE) {
                return Err(bad(format!("token {t} outside the content vocabulary")));
            }
            if e.patch_side().is_none() || e.patch_side() != side {
                return Err(bad(format!("patch of {} values is not a consistent P×P×3 crop", e.patch.len())));
            }
            if let Some(x) = e.patch.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                return Err(bad(format!("patch value {x} outside [0, 1]")));
            }
        }
        if let Some((i, j)) = first_overlap(&self.entities) {
            return Err(Error::Validation { entity: j, message: format!("bbox overlaps entity {i}") });
        }
        self.labels.validate(n)
    }
}

/// First pair `(i, j)`, `i < j`, of overlapping boxes.
pub fn first_overlap(entities: &[Entity]) -> Option<(usize, usize)> {
    for i in 0..entities.len() {
        for j in i + 1..entities.len() {
            if entities[i].bbox.overlaps(&entities[j].bbox) {
                return Some((i, j));
            }
        }
    }
    None
}

impl GroundTruth {
    pub fn validate(&self, n: usize) -> Result<()> {
        for (name, groups) in [("row_groups", &self.row_groups), ("col_groups", &self.col_groups)] {
            if let Some(g) = groups {
                check_partition(g, n).map_err(|m| Error::Document(format!("{name}: {m}")))?;
            }
        }
        if let Some(links) = &self.kv_links {
            let mut keys = BTreeSet::new();
            let mut values = BTreeSet::new();
            for &(k, v) in links {
                if k >= n || v >= n || k == v {
                    return Err(Error::Document(format!("kv link ({k}, {v}) invalid for {n} entities")));
                }
                if !keys.insert(k) {
                    return Err(Error::Document(format!("key {k} has more than one value")));
                }
                if !values.insert(v) {
                    return Err(Error::Document(format!("value {v} has more than one key")));
                }
            }
        }
        if let Some(order) = &self.reading_order {
            if !is_permutation(order, n) {
                return Err(Error::Document(format!("reading_order is not a permutation of 0..{n}")));
            }
        }
        Ok(())
    }
}

fn check_partition(groups: &[Vec<usize>], n: usize) -> std::result::Result<(), String> {
    let mut seen = vec![false; n];
    for g in groups {
        if g.is_empty() {
            return Err("empty group".into());
        }
        for &i in g {
            if i >= n {
                return Err(format!("id {i} out of range"));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(format!("id {i} appears twice"));
            }
        }
    }
    match seen.iter().position(|s| !s) {
        Some(i) => Err(format!("id {i} not covered")),
        None => Ok(()),
    }
}

pub fn is_permutation(p: &[usize], n: usize) -> bool {
    if p.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    p.iter().all(|&i| i < n && !std::mem::replace(&mut seen[i], true))
}

/// Canonical group form: members ascending, groups ordered by first member.
pub fn canonical_groups(mut groups: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    for g in &mut groups {
        g.sort_unstable();
    }
    groups.retain(|g| !g.is_empty());
    groups.sort();
    groups
}

/// Reorders entities top-left to bottom-right by `(y0, x0)`, reassigns ids
/// and remaps the labels onto the new ids.
pub fn sort_entities(doc: &Document) -> Document {
    let mut order: Vec<usize> = (0..doc.entities.len()).collect();
    order.sort_by_key(|&i| {
        let b = doc.entities[i].bbox;
        (b.y0, b.x0, i)
    });
    let mut new_id = vec![0; order.len()];
    for (pos, &old) in order.iter().enumerate() {
        new_id[old] = pos;
    }
    let entities = order.iter().enumerate().map(|(pos, &old)| Entity { id: pos, ..doc.entities[old].clone() }).collect();
    let remap_groups = |g: &Vec<Vec<usize>>| canonical_groups(g.iter().map(|grp| grp.iter().map(|&i| new_id[i]).collect()).collect());
    let labels = GroundTruth {
        row_groups: doc.labels.row_groups.as_ref().map(remap_groups),
        col_groups: doc.labels.col_groups.as_ref().map(remap_groups),
        kv_links: doc.labels.kv_links.as_ref().map(|l| {
            let mut v: Vec<_> = l.iter().map(|&(k, v)| (new_id[k], new_id[v])).collect();
            v.sort_unstable();
            v
        }),
        reading_order: doc.labels.reading_order.as_ref().map(|o| o.iter().map(|&i| new_id[i]).collect()),
    };
    Document { kind: doc.kind, entities, labels }
}

/// `n×n` relation matrix for one relation kind. Scores are probabilities;
/// `decisions[i][j] == scores[i][j] > threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationMatrix {
    pub n: usize,
    pub kind: RelationKind,
    pub threshold: f64,
    scores: Vec<f64>,
    decisions: Vec<bool>,
}

impl RelationMatrix {
    pub fn from_scores(kind: RelationKind, n: usize, scores: Vec<f64>, threshold: f64) -> Result<Self> {
        if scores.len() != n * n {
            return Err(Error::dim("relation_matrix", format!("{} scores for n={n}", scores.len())));
        }
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Parameter(format!("threshold {threshold} outside (0, 1)")));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Parameter(format!("score {s} outside [0, 1]")));
        }
        let decisions = scores.iter().map(|&s| s > threshold).collect();
        Ok(Self { n, kind, threshold, scores, decisions })
    }

    /// Hard 0/1 matrix with scores equal to the decisions.
    pub fn from_fn(kind: RelationKind, n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut scores = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                scores.push(if f(i, j) { 1.0 } else { 0.0 });
            }
        }
        Self::from_scores(kind, n, scores, 0.5).expect("0/1 scores are valid")
    }

    pub fn score(&self, i: usize, j: usize) -> f64 {
        self.scores[i * self.n + j]
    }

    pub fn decision(&self, i: usize, j: usize) -> bool {
        self.decisions[i * self.n + j]
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn decisions(&self) -> &[bool] {
        &self.decisions
    }

    /// Same scores under a different threshold.
    pub fn with_threshold(&self, threshold: f64) -> Result<Self> {
        Self::from_scores(self.kind, self.n, self.scores.clone(), threshold)
    }

    pub fn same_decisions(&self, other: &RelationMatrix) -> bool {
        self.n == other.n && self.kind == other.kind && self.decisions == other.decisions
    }
}

fn group_lookup(groups: &[Vec<usize>], n: usize) -> Vec<usize> {
    let mut of = vec![usize::MAX; n];
    for (g, members) in groups.iter().enumerate() {
        for &i in members {
            of[i] = g;
        }
    }
    of
}

/// Ground-truth relation matrix for `kind` from `doc`'s labels.
pub fn gt_relation_matrix(doc: &Document, kind: RelationKind) -> Result<RelationMatrix> {
    let n = doc.len();
    let missing = || Error::Label(format!("{} document has no labels for relation {kind}", doc.kind.name()));
    Ok(match kind {
        RelationKind::Row | RelationKind::Col => {
            let groups = if kind == RelationKind::Row { &doc.labels.row_groups } else { &doc.labels.col_groups };
            let of = group_lookup(groups.as_ref().ok_or_else(missing)?, n);
            RelationMatrix::from_fn(kind, n, |i, j| of[i] == of[j])
        }
        RelationKind::Kv => {
            let links: BTreeSet<_> = doc.labels.kv_links.as_ref().ok_or_else(missing)?.iter().copied().collect();
            RelationMatrix::from_fn(kind, n, |i, j| links.contains(&(i, j)))
        }
        RelationKind::Order => {
            let order = doc.labels.reading_order.as_ref().ok_or_else(missing)?;
            let mut rank = vec![0; n];
            for (r, &i) in order.iter().enumerate() {
                rank[i] = r;
            }
            RelationMatrix::from_fn(kind, n, |i, j| rank[i] < rank[j])
        }
    })
}

/// Connected components of an undirected graph given by `adjacent`.
pub(crate) fn components(n: usize, adjacent: impl Fn(usize, usize) -> bool) -> Vec<Vec<usize>> {
    let mut comp = vec![usize::MAX; n];
    let mut groups = Vec::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = groups.len();
        let mut stack = vec![start];
        comp[start] = id;
        let mut members = Vec::new();
        while let Some(i) = stack.pop() {
            members.push(i);
            for j in 0..n {
                if comp[j] == usize::MAX && adjacent(i, j) {
                    comp[j] = id;
                    stack.push(j);
                }
            }
        }
        members.sort_unstable();
        groups.push(members);
    }
    groups
}

/// Row/column bands: connected components of vertical (rows) or horizontal
/// (columns) interval overlap.
pub fn layout_groups(doc: &Document, kind: RelationKind) -> Vec<Vec<usize>> {
    let e = &doc.entities;
    match kind {
        RelationKind::Col => canonical_groups(components(e.len(), |i, j| e[i].bbox.overlaps_x(&e[j].bbox))),
        _ => canonical_groups(components(e.len(), |i, j| e[i].bbox.overlaps_y(&e[j].bbox))),
    }
}

/// Re-derives a relation from geometry alone (plus key/value token ranges
/// for `kv`). On generator output this reproduces the labels exactly; it is
/// the reference against which augmented views are audited.
pub fn layout_relation_matrix(doc: &Document, kind: RelationKind) -> RelationMatrix {
    let n = doc.len();
    let e = &doc.entities;
    match kind {
        RelationKind::Row | RelationKind::Col => {
            let of = group_lookup(&layout_groups(doc, kind), n);
            RelationMatrix::from_fn(kind, n, |i, j| of[i] == of[j])
        }
        RelationKind::Kv => {
            let is = |i: usize, r: &std::ops::Range<u32>| r.contains(&e[i].tokens[0]);
            let values: Vec<usize> = (0..n).filter(|&i| is(i, &vocab::VALUE)).collect();
            let mut links = BTreeSet::new();
            for k in (0..n).filter(|&i| is(i, &vocab::KEY)) {
                if let Some(&v) = values.iter().min_by_key(|&&v| (e[k].bbox.gap(&e[v].bbox), v)) {
                    links.insert((k, v));
                }
            }
            RelationMatrix::from_fn(kind, n, |i, j| links.contains(&(i, j)))
        }
        RelationKind::Order => {
            let order = layout_reading_order(doc);
            let mut rank = vec![0; n];
            for (r, &i) in order.iter().enumerate() {
                rank[i] = r;
            }
            RelationMatrix::from_fn(kind, n, |i, j| rank[i] < rank[j])
        }
    }
}

/// Column-major reading order: columns (horizontal-overlap components) left
/// to right, entities top to bottom within a column.
pub fn layout_reading_order(doc: &Document) -> Vec<usize> {
    let e = &doc.entities;
    let mut cols = layout_groups(doc, RelationKind::Col);
    cols.sort_by_key(|c| c.iter().map(|&i| e[i].bbox.x0).min());
    cols.into_iter()
        .flat_map(|mut c| {
            c.sort_by_key(|&i| (e[i].bbox.y0, e[i].bbox.x0, i));
            c
        })
        .collect()
}
