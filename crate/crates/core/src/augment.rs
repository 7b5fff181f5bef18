//! Relation-preserving positive views: colour/blur jitter of entity patches
//! and bounded per-entity box resizing with an exact overlap check.
//!
//! Entity order and ids are never changed, so entity `i` of a view is the
//! same physical entity as entity `i` of the source.

use serde::{Deserialize, Serialize};

use crate::doc::{self, layout_relation_matrix, BBox, Document, GRID};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const RATIO_RANGE: (f64, f64) = (0.85, 1.15);
pub const MAX_LAYOUT_ATTEMPTS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugOp {
    Visual,
    VisualLayout,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisualParams {
    /// Additive offset.
    pub brightness: f64,
    /// Scale about mid-gray.
    pub contrast: f64,
    /// Scale of the chroma component about each pixel's gray level.
    pub saturation: f64,
    /// Rotation about the gray axis, in turns.
    pub hue: f64,
    pub blur_sigma: f64,
}

impl VisualParams {
    pub const IDENTITY: VisualParams = VisualParams { brightness: 0.0, contrast: 1.0, saturation: 1.0, hue: 0.0, blur_sigma: 0.0 };

    pub fn sample(rng: &mut SplitMix64) -> Self {
        VisualParams {
            brightness: rng.uniform(-0.2, 0.2),
            contrast: rng.uniform(0.8, 1.2),
            saturation: rng.uniform(0.8, 1.2),
            hue: rng.uniform(-0.05, 0.05),
            blur_sigma: rng.uniform(0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Edge {
    Width,
    Height,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayoutParam {
    pub edge: Edge,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub op: AugOp,
    pub visual: VisualParams,
    /// One entry per entity for layout views, empty otherwise.
    pub layout: Vec<LayoutParam>,
    /// Layout draws attempted (0 for purely visual views).
    pub attempts: usize,
    /// A layout view was requested but every draw was rejected.
    pub fell_back: bool,
}

/// Applies `p` to one `P×P×3` patch.
pub fn transform_patch(patch: &[f64], side: usize, p: &VisualParams) -> Vec<f64> {
    let shift = 0.5 - 0.5 * p.contrast + p.brightness;
    let mut out: Vec<f64> = patch.iter().map(|&x| x * p.contrast + shift).collect();
    if p.saturation != 1.0 || p.hue != 0.0 {
        let m = colour_matrix(p.saturation, p.hue);
        for px in out.chunks_exact_mut(3) {
            let v = [px[0], px[1], px[2]];
            for (c, row) in m.iter().enumerate() {
                px[c] = row[0] * v[0] + row[1] * v[1] + row[2] * v[2];
            }
        }
    }
    if p.blur_sigma > 0.0 {
        out = blur(&out, side, p.blur_sigma);
    }
    for x in &mut out {
        *x = x.clamp(0.0, 1.0);
    }
    out
}

/// Hue rotation by `hue` turns about the gray axis followed by chroma
/// scaling. Both keep the per-pixel channel mean fixed.
fn colour_matrix(saturation: f64, hue: f64) -> [[f64; 3]; 3] {
    let theta = 2.0 * std::f64::consts::PI * hue;
    let (s, c) = theta.sin_cos();
    let a = (1.0 - c) / 3.0;
    let b = s / 3f64.sqrt();
    // Rodrigues rotation about (1,1,1)/sqrt(3)
    let rot = [[c + a, a - b, a + b], [a + b, c + a, a - b], [a - b, a + b, c + a]];
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let chroma = rot[i][j] - 1.0 / 3.0;
            m[i][j] = 1.0 / 3.0 + saturation * chroma;
        }
    }
    m
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-r..=r).map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Separable Gaussian blur with edge replication.
fn blur(img: &[f64], side: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let at = |i: i64| i.clamp(0, side as i64 - 1) as usize;
    let mut tmp = vec![0.0; img.len()];
    for y in 0..side {
        for x in 0..side {
            for ch in 0..3 {
                tmp[(y * side + x) * 3 + ch] =
                    k.iter().enumerate().map(|(t, w)| w * img[(y * side + at(x as i64 + t as i64 - r)) * 3 + ch]).sum();
            }
        }
    }
    let mut out = vec![0.0; img.len()];
    for y in 0..side {
        for x in 0..side {
            for ch in 0..3 {
                out[(y * side + x) * 3 + ch] =
                    k.iter().enumerate().map(|(t, w)| w * tmp[(at(y as i64 + t as i64 - r) * side + x) * 3 + ch]).sum();
            }
        }
    }
    out
}

pub fn apply_visual(doc: &Document, p: &VisualParams) -> Document {
    let mut out = doc.clone();
    for e in &mut out.entities {
        let side = e.patch_side().unwrap_or(1);
        e.patch = transform_patch(&e.patch, side, p);
    }
    out
}

pub fn augment_visual(doc: &Document, seed: u64) -> (Document, AugmentRecord) {
    let p = VisualParams::sample(&mut SplitMix64::derive(seed, "visual", 0));
    let record = AugmentRecord { op: AugOp::Visual, visual: p, layout: Vec::new(), attempts: 0, fell_back: false };
    (apply_visual(doc, &p), record)
}

/// Resizes one extent about its centre and clamps it to the page.
pub fn resize_interval(lo: i32, hi: i32, ratio: f64) -> (i32, i32) {
    let len = ((hi - lo) as f64 * ratio).round().max(1.0) as i32;
    let centre = (lo + hi) as f64 / 2.0;
    let mut a = (centre - len as f64 / 2.0).round() as i32;
    let mut b = a + len;
    if a < 0 {
        a = 0;
    }
    if b > GRID {
        b = GRID;
    }
    if b <= a {
        b = a + 1;
    }
    (a, b)
}

pub fn resize_bbox(b: BBox, p: LayoutParam) -> BBox {
    match p.edge {
        Edge::Width => {
            let (x0, x1) = resize_interval(b.x0, b.x1, p.ratio);
            BBox { x0, x1, ..b }
        }
        Edge::Height => {
            let (y0, y1) = resize_interval(b.y0, b.y1, p.ratio);
            BBox { y0, y1, ..b }
        }
    }
}

/// Bilinear resample of a patch after its box grew (`ratio > 1`) or shrank
/// along `edge`: the original content occupies the central `1/ratio` of the
/// new crop and the border is edge-replicated.
pub fn resample_patch(patch: &[f64], side: usize, p: LayoutParam) -> Vec<f64> {
    if p.ratio == 1.0 {
        return patch.to_vec();
    }
    let src = |k: usize| {
        let u = (k as f64 + 0.5) / side as f64;
        let s = (0.5 + (u - 0.5) * p.ratio) * side as f64 - 0.5;
        let s = s.clamp(0.0, (side - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(side - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = vec![0.0; patch.len()];
    for y in 0..side {
        for x in 0..side {
            for ch in 0..3 {
                out[(y * side + x) * 3 + ch] = match p.edge {
                    Edge::Width => {
                        let (a, b, t) = src(x);
                        (1.0 - t) * patch[(y * side + a) * 3 + ch] + t * patch[(y * side + b) * 3 + ch]
                    }
                    Edge::Height => {
                        let (a, b, t) = src(y);
                        (1.0 - t) * patch[(a * side + x) * 3 + ch] + t * patch[(b * side + x) * 3 + ch]
                    }
                };
            }
        }
    }
    out
}

/// Applies per-entity resize parameters. `None` if any two boxes overlap
/// afterwards.
pub fn apply_layout(doc: &Document, params: &[LayoutParam]) -> Option<Document> {
    let mut out = doc.clone();
    for (e, &p) in out.entities.iter_mut().zip(params) {
        e.bbox = resize_bbox(e.bbox, p);
        let side = e.patch_side().unwrap_or(1);
        e.patch = resample_patch(&e.patch, side, p);
    }
    doc::first_overlap(&out.entities).is_none().then_some(out)
}

fn sample_layout(rng: &mut SplitMix64, n: usize) -> Vec<LayoutParam> {
    (0..n)
        .map(|_| LayoutParam {
            edge: if rng.coin() { Edge::Width } else { Edge::Height },
            ratio: rng.uniform(RATIO_RANGE.0, RATIO_RANGE.1),
        })
        .collect()
}

/// Layout resize followed by visual jitter. Each rejected draw is retried
/// with the next derived stream.
pub fn augment_layout(doc: &Document, seed: u64) -> Result<(Document, AugmentRecord)> {
    for attempt in 0..MAX_LAYOUT_ATTEMPTS {
        let params = sample_layout(&mut SplitMix64::derive(seed, "layout", attempt as u64), doc.len());
        if let Some(resized) = apply_layout(doc, &params) {
            let (view, vis) = augment_visual(&resized, seed);
            let record = AugmentRecord { op: AugOp::VisualLayout, layout: params, attempts: attempt + 1, ..vis };
            return Ok((view, record));
        }
    }
    Err(Error::AugmentationFailed { attempts: MAX_LAYOUT_ATTEMPTS })
}

/// Fair coin between the two operations. A layout view whose draws are all
/// rejected falls back to a visual view.
pub fn sample_positive_view(doc: &Document, seed: u64) -> (Document, AugmentRecord) {
    let layout = SplitMix64::derive(seed, "op", 0).coin();
    if layout {
        match augment_layout(doc, seed) {
            Ok(v) => return v,
            Err(_) => {
                let (view, mut rec) = augment_visual(doc, seed);
                rec.attempts = MAX_LAYOUT_ATTEMPTS;
                rec.fell_back = true;
                return (view, rec);
            }
        }
    }
    augment_visual(doc, seed)
}

/// True iff `aug` carries the same labels as `orig`, has no overlapping
/// boxes, and its geometry re-derives every relation `orig` is labelled
/// with.
pub fn verify_relation_preserved(orig: &Document, aug: &Document) -> bool {
    if orig.len() != aug.len() || orig.labels != aug.labels || doc::first_overlap(&aug.entities).is_some() {
        return false;
    }
    orig.kind.relation_kinds().iter().all(|&k| match doc::gt_relation_matrix(orig, k) {
        Ok(gt) => layout_relation_matrix(aug, k).same_decisions(&gt),
        Err(_) => false,
    })
}
