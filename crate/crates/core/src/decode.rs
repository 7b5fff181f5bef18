//! Relation-matrix decoders (table groups, key-value links, reading order)
//! and the evaluation metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::doc::{self, vocab, Document, RelationKind, RelationMatrix};
use crate::error::{Error, Result};

fn expect_kind(rel: &RelationMatrix, allowed: &[RelationKind], op: &str) -> Result<()> {
    if allowed.contains(&rel.kind) {
        Ok(())
    } else {
        Err(Error::Parameter(format!("{op} cannot decode a {} matrix", rel.kind)))
    }
}

/// Connected components of the symmetrised off-diagonal decisions, in
/// canonical order.
pub fn decode_groups(rel: &RelationMatrix) -> Result<Vec<Vec<usize>>> {
    expect_kind(rel, &[RelationKind::Row, RelationKind::Col], "decode_groups")?;
    let groups = doc::components(rel.n, |i, j| i != j && (rel.decision(i, j) || rel.decision(j, i)));
    Ok(doc::canonical_groups(groups))
}

/// `2PR/(P+R)` from counts; both sets empty gives 1 and exactly one empty
/// gives 0.
pub fn f1_from_counts(tp: usize, n_pred: usize, n_gold: usize) -> f64 {
    match (n_pred, n_gold) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => 2.0 * tp as f64 / (n_pred + n_gold) as f64,
    }
}

fn check_pair(pred: &RelationMatrix, gt: &RelationMatrix) -> Result<()> {
    if pred.n != gt.n {
        return Err(Error::Parameter(format!("matrix sizes differ: {} vs {}", pred.n, gt.n)));
    }
    if pred.kind != gt.kind {
        return Err(Error::Parameter(format!("relation kinds differ: {} vs {}", pred.kind, gt.kind)));
    }
    Ok(())
}

fn f1_over(pred: &RelationMatrix, gt: &RelationMatrix, keep: impl Fn(usize, usize) -> bool) -> f64 {
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for i in 0..pred.n {
        for j in 0..pred.n {
            if !keep(i, j) {
                continue;
            }
            let (p, g) = (pred.decision(i, j), gt.decision(i, j));
            np += p as usize;
            ng += g as usize;
            tp += (p && g) as usize;
        }
    }
    f1_from_counts(tp, np, ng)
}

/// F1 over unordered linked pairs `i < j`.
pub fn group_f1(pred: &RelationMatrix, gt: &RelationMatrix) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(f1_over(pred, gt, |i, j| i < j))
}

/// Mean of the row and column [`group_f1`].
pub fn table_f1(pred_row: &RelationMatrix, pred_col: &RelationMatrix, gt_row: &RelationMatrix, gt_col: &RelationMatrix) -> Result<f64> {
    expect_kind(pred_row, &[RelationKind::Row], "table_f1")?;
    expect_kind(pred_col, &[RelationKind::Col], "table_f1")?;
    Ok(0.5 * (group_f1(pred_row, gt_row)? + group_f1(pred_col, gt_col)?))
}

/// F1 over ordered pairs `i ≠ j`.
pub fn pairwise_f1(pred: &RelationMatrix, gt: &RelationMatrix) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(f1_over(pred, gt, |i, j| i != j))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvLink {
    pub key: usize,
    pub value: usize,
    pub key_string: String,
    pub value_string: String,
}

fn entity_string(doc: &Document, i: usize) -> String {
    doc.entities[i].tokens.iter().map(|&t| vocab::token_string(t)).collect::<Vec<_>>().join(" ")
}

/// Accepted links `(key, value)`: positive off-diagonal decisions taken in
/// descending score order (ties by lower key, then lower value), skipping any
/// that would give a key a second value or a value a second key.
pub fn decode_kv_pairs(rel: &RelationMatrix) -> Result<Vec<(usize, usize)>> {
    expect_kind(rel, &[RelationKind::Kv], "decode_kv")?;
    let mut cand: Vec<(usize, usize)> =
        (0..rel.n).flat_map(|i| (0..rel.n).map(move |j| (i, j))).filter(|&(i, j)| i != j && rel.decision(i, j)).collect();
    cand.sort_by(|a, b| rel.score(b.0, b.1).total_cmp(&rel.score(a.0, a.1)).then(a.cmp(b)));
    let mut has_value = vec![false; rel.n];
    let mut has_key = vec![false; rel.n];
    let mut out = Vec::new();
    for (k, v) in cand {
        if !has_value[k] && !has_key[v] {
            has_value[k] = true;
            has_key[v] = true;
            out.push((k, v));
        }
    }
    out.sort_unstable();
    Ok(out)
}

pub fn decode_kv(rel: &RelationMatrix, doc: &Document) -> Result<Vec<KvLink>> {
    if rel.n != doc.len() {
        return Err(Error::Parameter(format!("{}×{} matrix for a {}-entity document", rel.n, rel.n, doc.len())));
    }
    Ok(decode_kv_pairs(rel)?
        .into_iter()
        .map(|(key, value)| KvLink { key, value, key_string: entity_string(doc, key), value_string: entity_string(doc, value) })
        .collect())
}

/// Repeatedly places the unplaced entity with the most "ahead of" wins
/// against the other unplaced entities; ties go to the higher mean score,
/// then the lower id.
pub fn decode_reading_order(rel: &RelationMatrix) -> Result<Vec<usize>> {
    expect_kind(rel, &[RelationKind::Order], "decode_reading_order")?;
    let mut left: Vec<usize> = (0..rel.n).collect();
    let mut order = Vec::with_capacity(rel.n);
    while !left.is_empty() {
        let key = |u: usize| {
            let others = left.iter().filter(|&&v| v != u);
            let wins = others.clone().filter(|&&v| rel.decision(u, v)).count();
            let k = left.len() - 1;
            let mean = if k == 0 { 0.0 } else { others.map(|&v| rel.score(u, v)).sum::<f64>() / k as f64 };
            (wins, mean)
        };
        let mut best = 0;
        let mut best_key = key(left[0]);
        for (pos, &u) in left.iter().enumerate().skip(1) {
            let k = key(u);
            if k.0 > best_key.0 || (k.0 == best_key.0 && k.1 > best_key.1) {
                best = pos;
                best_key = k;
            }
        }
        order.push(left.remove(best));
    }
    Ok(order)
}

fn ngram_counts(seq: &[usize], n: usize) -> BTreeMap<&[usize], usize> {
    let mut m = BTreeMap::new();
    for w in seq.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Sentence BLEU on id sequences: geometric mean of clipped n-gram
/// precisions for `n = 1..=min(max_n, |pred|, |ref|)` times the brevity
/// penalty. Any zero precision gives 0.
pub fn bleu(pred: &[usize], reference: &[usize], max_n: usize) -> Result<f64> {
    if pred.is_empty() || reference.is_empty() {
        return Err(Error::Parameter("bleu of an empty sequence".into()));
    }
    if max_n == 0 {
        return Err(Error::Parameter("bleu with max_n = 0".into()));
    }
    let order = max_n.min(pred.len()).min(reference.len());
    let mut log_sum = 0.0;
    for n in 1..=order {
        let refs = ngram_counts(reference, n);
        let matched: usize = ngram_counts(pred, n).into_iter().map(|(g, c)| c.min(refs.get(g).copied().unwrap_or(0))).sum();
        if matched == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / (pred.len() + 1 - n) as f64).ln();
    }
    let (c, r) = (pred.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok(bp * (log_sum / order as f64).exp())
}

pub fn average_bleu(pairs: &[(Vec<usize>, Vec<usize>)], max_n: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Parameter("average bleu over no documents".into()));
    }
    let mut s = 0.0;
    for (p, r) in pairs {
        s += bleu(p, r, max_n)?;
    }
    Ok(s / pairs.len() as f64)
}

/// Top-to-bottom, left-to-right order by `(y0, x0)`.
pub fn heuristic_order(doc: &Document) -> Vec<usize> {
    let mut order: Vec<usize> = (0..doc.len()).collect();
    order.sort_by_key(|&i| (doc.entities[i].bbox.y0, doc.entities[i].bbox.x0, i));
    order
}

/// Relation matrix of a decoded grouping.
pub fn groups_matrix(kind: RelationKind, n: usize, groups: &[Vec<usize>]) -> RelationMatrix {
    let mut of = vec![usize::MAX; n];
    for (g, members) in groups.iter().enumerate() {
        for &i in members {
            of[i] = g;
        }
    }
    RelationMatrix::from_fn(kind, n, |i, j| of[i] == of[j])
}

pub fn links_matrix(n: usize, links: &[(usize, usize)]) -> RelationMatrix {
    RelationMatrix::from_fn(RelationKind::Kv, n, |i, j| links.contains(&(i, j)))
}
