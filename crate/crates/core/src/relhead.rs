//! Pairwise relation heads: one binary classifier per relation kind over
//! aggregated entity pairs, fine-tuned jointly with the encoder.

use serde::{Deserialize, Serialize};

use crate::doc::{gt_relation_matrix, Document, RelationKind, RelationMatrix};
use crate::encoder::{entity_features, TokenSequence};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::Optimizer;
use crate::params::{accumulate, grad_norm, Binder, GradMap, ParamStore};
use crate::rcm::{init_aggregator, ModelConfig};
use crate::rng::SplitMix64;

pub fn head_prefix(kind: RelationKind) -> String {
    format!("head.{}", kind.name())
}

/// How the head's aggregator starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregatorInit {
    /// Copy of the pre-trained online aggregator.
    Pretrained,
    Random,
}

/// Adds `head.{kind}.agg.*` and a zero classifier `head.{kind}.cls` to
/// `store`. With `from` set, the aggregator is copied from its `agg.*`.
pub fn init_head(
    store: &mut ParamStore,
    kind: RelationKind,
    model: &ModelConfig,
    from: Option<&ParamStore>,
    rng: &mut SplitMix64,
) -> Result<()> {
    let p = head_prefix(kind);
    match from {
        Some(src) => {
            for layer in ["fc1", "fc2"] {
                for t in ["w", "b"] {
                    let name = format!("agg.{layer}.{t}");
                    let v = src.get(&name).ok_or_else(|| Error::State(format!("pre-trained weights lack {name}")))?;
                    store.insert(format!("{p}.{name}"), v.clone());
                }
            }
        }
        None => init_aggregator(store, &format!("{p}.agg"), model, rng),
    }
    store.insert_zero_linear(&format!("{p}.cls"), model.d_l, 1);
    Ok(())
}

fn require_head(store: &ParamStore, kind: RelationKind) -> Result<()> {
    let name = format!("{}.cls.w", head_prefix(kind));
    if store.contains(&name) {
        Ok(())
    } else {
        Err(Error::Parameter(format!("no relation head for kind {kind}")))
    }
}

/// All ordered pairs `(i, j)` in row-major order, optionally without the
/// diagonal.
pub fn pairs(n: usize, diagonal: bool) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|&(i, j)| diagonal || i != j).collect()
}

/// Logits `classifier(gelu(f(m[i] ⊕ m[j])))` as a `[pairs, 1]` column.
pub fn pair_logits(b: &Binder, kind: RelationKind, m: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    require_head(b.store(), kind)?;
    let g = b.graph();
    let p = head_prefix(kind);
    let left: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let right: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let cat = g.concat_cols(&[g.gather_rows(m, &left)?, g.gather_rows(m, &right)?])?;
    let h = g.gelu(b.mlp(&format!("{p}.agg"), cat)?);
    b.linear(&format!("{p}.cls"), h)
}

/// `N×N` row-major scores `σ(logit(i, j))`, diagonal included.
pub fn relation_logits(b: &Binder, kind: RelationKind, m: Var) -> Result<Var> {
    let g = b.graph();
    let n = g.shape(m)[0];
    let z = pair_logits(b, kind, m, &pairs(n, true))?;
    Ok(g.sigmoid(z))
}

pub fn relation_scores(store: &ParamStore, doc: &Document, kind: RelationKind, model: &ModelConfig) -> Result<Vec<f64>> {
    let enc = model.encoder();
    let g = Graph::new();
    let b = Binder::new(&g, store, false);
    let m = entity_features(&b, &TokenSequence::build(doc, &enc)?, &enc)?;
    let s = relation_logits(&b, kind, m)?;
    Ok(g.value(s).data().to_vec())
}

pub fn predict_relation_matrix(
    store: &ParamStore,
    doc: &Document,
    kind: RelationKind,
    model: &ModelConfig,
    threshold: f64,
) -> Result<RelationMatrix> {
    let scores = relation_scores(store, doc, kind, model)?;
    RelationMatrix::from_scores(kind, doc.len(), scores, threshold)
}

/// Targets and weights of the off-diagonal pairs of `gt`: positives weigh
/// `0.5/p` and negatives `0.5/(1−p)` for positive frequency `p`, so the
/// mean weight is 1. Single-class documents weigh every pair 1.
pub fn pair_targets(gt: &RelationMatrix) -> (Vec<(usize, usize)>, Vec<f64>, Vec<f64>) {
    let ps = pairs(gt.n, false);
    let y: Vec<f64> = ps.iter().map(|&(i, j)| if gt.decision(i, j) { 1.0 } else { 0.0 }).collect();
    let p = y.iter().sum::<f64>() / y.len().max(1) as f64;
    let w = y
        .iter()
        .map(|&t| match (p > 0.0 && p < 1.0, t > 0.5) {
            (false, _) => 1.0,
            (true, true) => 0.5 / p,
            (true, false) => 0.5 / (1.0 - p),
        })
        .collect();
    (ps, y, w)
}

/// Reweighted binary cross-entropy over the off-diagonal pairs of `doc`.
pub fn relation_loss(b: &Binder, doc: &Document, kind: RelationKind, model: &ModelConfig) -> Result<Var> {
    if doc.kind != kind.doc_kind() {
        return Err(Error::Label(format!("{} document carries no {kind} labels", doc.kind.name())));
    }
    let gt = gt_relation_matrix(doc, kind)?;
    let enc = model.encoder();
    let m = entity_features(b, &TokenSequence::build(doc, &enc)?, &enc)?;
    let (ps, y, w) = pair_targets(&gt);
    let z = pair_logits(b, kind, m, &ps)?;
    b.graph().bce_with_logits(z, &y, &w)
}

/// Loss and parameter gradients of one document.
pub fn relation_loss_grads(store: &ParamStore, doc: &Document, kind: RelationKind, model: &ModelConfig) -> Result<(f64, GradMap)> {
    let g = Graph::new();
    let b = Binder::new(&g, store, true);
    let l = relation_loss(&b, doc, kind, model)?;
    g.backward(l)?;
    Ok((g.value(l).item(), b.grads()))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneMetrics {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// One update of the encoder and the `kind` head on the mean batch loss.
pub fn finetune_step(
    batch: &[&Document],
    store: &mut ParamStore,
    kind: RelationKind,
    model: &ModelConfig,
    opt: &mut Optimizer,
) -> Result<FinetuneMetrics> {
    if batch.is_empty() {
        return Err(Error::Parameter("empty fine-tuning batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = GradMap::new();
    let mut m = FinetuneMetrics { step: opt.steps_taken(), lr: opt.current_lr(), ..Default::default() };
    for (k, doc) in batch.iter().enumerate() {
        let (l, g) = relation_loss_grads(store, doc, kind, model)?;
        if !l.is_finite() {
            return Err(Error::NonFinite { doc: k, detail: format!("fine-tuning loss {l} for {kind}") });
        }
        m.loss += l * scale;
        accumulate(&mut grads, &g, scale);
    }
    m.grad_norm = grad_norm(&grads);
    opt.step(store, &grads)?;
    Ok(m)
}
