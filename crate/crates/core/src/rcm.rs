//! Relational consistency pre-training: local (pairwise) and global
//! (similarity-distribution) consistency between an online network and its
//! EMA target across two positive views, plus masked visual-language
//! modelling.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::{sample_positive_view, AugOp};
use crate::doc::{vocab, Document};
use crate::encoder::{entity_features, EncoderConfig, TokenSequence};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::Optimizer;
use crate::params::{accumulate, grad_norm, Binder, GradMap, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Encoder and relation-head sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_seq_len: usize,
    pub n_cap: usize,
    pub patch_side: usize,
    pub embed_init: f64,
    /// Width of the pairwise relation representation.
    pub d_l: usize,
    /// Output width of the global projector.
    pub d_g: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let e = EncoderConfig::default();
        Self {
            d: e.d,
            layers: e.layers,
            heads: e.heads,
            ffn: e.ffn,
            max_seq_len: e.max_seq_len,
            n_cap: e.n_cap,
            patch_side: e.patch_side,
            embed_init: e.embed_init,
            d_l: e.d / 2,
            d_g: e.d / 2,
        }
    }
}

impl ModelConfig {
    pub fn tiny() -> Self {
        let e = EncoderConfig::tiny();
        Self {
            d: e.d,
            layers: e.layers,
            heads: e.heads,
            ffn: e.ffn,
            max_seq_len: e.max_seq_len,
            n_cap: e.n_cap,
            patch_side: e.patch_side,
            embed_init: e.embed_init,
            d_l: 8,
            d_g: 8,
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d: self.d,
            layers: self.layers,
            heads: self.heads,
            ffn: self.ffn,
            vocab: vocab::SIZE,
            max_seq_len: self.max_seq_len,
            n_cap: self.n_cap,
            patch_side: self.patch_side,
            embed_init: self.embed_init,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.encoder().validate("model");
        if self.d_l == 0 {
            errs.push("model.d_l must be positive".into());
        }
        if self.d_g == 0 {
            errs.push("model.d_g must be positive".into());
        }
        errs
    }
}

/// Which pre-training objectives are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TaskSet {
    pub mvlm: bool,
    pub lrcm: bool,
    pub grcm: bool,
}

impl TaskSet {
    pub const MVLM: TaskSet = TaskSet { mvlm: true, lrcm: false, grcm: false };
    pub const MVLM_LRCM: TaskSet = TaskSet { mvlm: true, lrcm: true, grcm: false };
    pub const FULL: TaskSet = TaskSet { mvlm: true, lrcm: true, grcm: true };

    pub fn uses_views(self) -> bool {
        self.lrcm || self.grcm
    }
}

impl fmt::Display for TaskSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> =
            [(self.mvlm, "mvlm"), (self.lrcm, "lrcm"), (self.grcm, "grcm")].into_iter().filter_map(|(on, n)| on.then_some(n)).collect();
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for TaskSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut t = TaskSet { mvlm: false, lrcm: false, grcm: false };
        for part in s.split('+').map(str::trim) {
            match part.to_ascii_lowercase().as_str() {
                "mvlm" => t.mvlm = true,
                "lrcm" => t.lrcm = true,
                "grcm" => t.grcm = true,
                _ => return Err(Error::Parameter(format!("unknown pre-training task {part:?} in {s:?}"))),
            }
        }
        Ok(t)
    }
}

impl TryFrom<String> for TaskSet {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TaskSet> for String {
    fn from(t: TaskSet) -> String {
        t.to_string()
    }
}

/// Objective hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RcmConfig {
    pub tasks: TaskSet,
    /// Softmax temperature of the global relation distribution.
    pub tau_g: f64,
    /// EMA coefficient of the target network.
    pub tau_ema: f64,
    /// Average the (v1→v2) and (v2→v1) directions.
    pub symmetric: bool,
    pub mask_rate: f64,
}

impl Default for RcmConfig {
    fn default() -> Self {
        Self { tasks: TaskSet::FULL, tau_g: 0.5, tau_ema: 0.99, symmetric: true, mask_rate: 0.15 }
    }
}

impl RcmConfig {
    pub fn validate(&self, section: &str) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.tau_g > 0.0) {
            errs.push(format!("{section}.tau_g = {} must be positive", self.tau_g));
        }
        if !(self.tau_ema > 0.0 && self.tau_ema <= 1.0) {
            errs.push(format!("{section}.tau_ema = {} must lie in (0, 1]", self.tau_ema));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            errs.push(format!("{section}.mask_rate = {} must lie in (0, 1)", self.mask_rate));
        }
        if !self.tasks.mvlm && !self.tasks.uses_views() {
            errs.push(format!("{section}.tasks selects no objective"));
        }
        errs
    }
}

/// Parameter prefixes shared by the online and target networks.
pub const TARGET_PREFIXES: [&str; 4] = ["enc.", "agg.", "proj_l.", "proj_g."];

/// Online network θ (encoder, aggregator, projectors, predictors, MVLM head)
/// and target network ξ (encoder, aggregator, projectors).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub model: ModelConfig,
    pub rcm: RcmConfig,
    pub online: ParamStore,
    pub target: ParamStore,
    pub step: usize,
}

fn insert_mlp(store: &mut ParamStore, p: &str, sizes: [usize; 3], rng: &mut SplitMix64) {
    store.insert_linear(&format!("{p}.fc1"), sizes[0], sizes[1], rng);
    store.insert_linear(&format!("{p}.fc2"), sizes[1], sizes[2], rng);
}

/// Residual MLP whose output layer starts at zero, i.e. the identity.
fn insert_predictor(store: &mut ParamStore, p: &str, width: usize, rng: &mut SplitMix64) {
    store.insert_linear(&format!("{p}.fc1"), width, width, rng);
    store.insert_zero_linear(&format!("{p}.fc2"), width, width);
}

/// Relation aggregator `f`: `2d → d_l → d_l`.
pub fn init_aggregator(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut SplitMix64) {
    insert_mlp(store, prefix, [2 * cfg.d, cfg.d_l, cfg.d_l], rng);
}

impl ModelState {
    pub fn init(model: ModelConfig, rcm: RcmConfig, seed: u64) -> Result<Self> {
        let mut errs = model.validate();
        errs.extend(rcm.validate("pretrain"));
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let mut rng = SplitMix64::derive(seed, "init", 0);
        let mut online = ParamStore::new();
        model.encoder().init(&mut online, &mut rng);
        init_aggregator(&mut online, "agg", &model, &mut rng);
        insert_mlp(&mut online, "proj_l", [model.d_l, model.d_l, model.d_l], &mut rng);
        insert_predictor(&mut online, "pred_l", model.d_l, &mut rng);
        insert_mlp(&mut online, "proj_g", [model.n_cap, model.d_g, model.d_g], &mut rng);
        insert_predictor(&mut online, "pred_g", model.d_g, &mut rng);
        online.insert_zero_linear("mvlm", model.d, vocab::SIZE);
        let target = online.subset(&TARGET_PREFIXES);
        Ok(Self { model, rcm, online, target, step: 0 })
    }

    /// Online encoder weights only: the exported pre-trained model.
    pub fn encoder_weights(&self) -> ParamStore {
        self.online.subset(&["enc."])
    }

    /// Target tensors must mirror an online tensor of the same shape.
    pub fn check_aligned(&self) -> Result<()> {
        for (name, t) in self.target.iter() {
            match self.online.get(name) {
                Some(o) if o.shape() == t.shape() => {}
                Some(o) => return Err(Error::State(format!("{name}: target {:?} vs online {:?}", t.shape(), o.shape()))),
                None => return Err(Error::State(format!("target tensor {name} has no online counterpart"))),
            }
        }
        Ok(())
    }
}

/// `ξ ← τ·ξ + (1 − τ)·θ` for every target tensor.
pub fn ema_update(state: &mut ModelState) -> Result<()> {
    state.check_aligned()?;
    let tau = state.rcm.tau_ema;
    for (name, xi) in state.target.iter_mut() {
        let theta = state.online.get(name).expect("aligned");
        for (x, &t) in xi.data_mut().iter_mut().zip(theta.data()) {
            *x = tau * *x + (1.0 - tau) * t;
        }
    }
    Ok(())
}

fn pair_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut a = Vec::with_capacity(n * n);
    let mut b = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            a.push(i);
            b.push(j);
        }
    }
    (a, b)
}

/// `R^L`: row `i·N + j` is `f(m[i] ⊕ m[j])` for the aggregator under
/// `prefix`. Diagonal pairs are included.
pub fn local_relation_repr(b: &Binder, prefix: &str, m: Var) -> Result<Var> {
    let g = b.graph();
    let n = g.shape(m)[0];
    let (ia, ib) = pair_indices(n);
    let left = g.gather_rows(m, &ia)?;
    let right = g.gather_rows(m, &ib)?;
    let cat = g.concat_cols(&[left, right])?;
    b.mlp(prefix, cat)
}

/// `R^G`: row-wise softmax of `m·mᵀ/τ_g` over the valid entities, with
/// padded rows set to zero.
pub fn global_relation_distribution(g: &Graph, m: Var, tau_g: f64, valid: &[bool]) -> Result<Var> {
    let n = g.shape(m)[0];
    if valid.len() != n {
        return Err(Error::dim("global_relation_distribution", format!("{} mask entries for {n} rows", valid.len())));
    }
    let sim = g.matmul_t(m, m)?;
    let r = g.softmax_rows_masked(sim, tau_g, Some(valid))?;
    if valid.iter().all(|&v| v) {
        return Ok(r);
    }
    let rows: Vec<f64> = valid.iter().flat_map(|&v| std::iter::repeat_n(if v { 1.0 } else { 0.0 }, n)).collect();
    g.mul_const(r, Tensor::new(vec![n, n], rows)?)
}

fn predictor(b: &Binder, prefix: &str, x: Var) -> Result<Var> {
    let h = b.mlp(prefix, x)?;
    b.graph().add(x, h)
}

fn row_mask(valid: &[bool], width: usize) -> Result<Tensor> {
    let data = valid.iter().flat_map(|&v| std::iter::repeat_n(if v { 1.0 } else { 0.0 }, width)).collect();
    Tensor::new(vec![valid.len(), width], data)
}

/// Entity features of the two views under both networks. Rows beyond the
/// valid entities (if any) are padding.
#[derive(Debug, Clone, Copy)]
pub struct ViewFeatures {
    pub online: [Var; 2],
    pub target: [Var; 2],
}

/// One direction of the local loss: online features `mo` of one view
/// against target features `mt` of the other.
pub fn lrcm_term(on: &Binder, tg: &Binder, mo: Var, mt: Var, valid: &[bool]) -> Result<Var> {
    let g = on.graph();
    let p = predictor(on, "pred_l", on.mlp("proj_l", local_relation_repr(on, "agg", mo)?)?)?;
    let z = g.stop_gradient(tg.mlp("proj_l", local_relation_repr(tg, "agg", mt)?)?);
    let pairs: Vec<bool> = valid.iter().flat_map(|&a| valid.iter().map(move |&b| a && b)).collect();
    let mask = row_mask(&pairs, g.shape(p)[1])?;
    g.masked_mse(p, z, &mask).map_err(|e| match e {
        Error::Degenerate(_) => Error::Degenerate("local consistency loss with zero valid pairs".into()),
        e => e,
    })
}

fn global_branch(b: &Binder, m: Var, tau_g: f64, n_cap: usize, valid: &[bool]) -> Result<Var> {
    let g = b.graph();
    if valid.len() > n_cap {
        return Err(Error::Capacity(format!("{} entities exceed n_cap {n_cap}", valid.len())));
    }
    let r = global_relation_distribution(g, m, tau_g, valid)?;
    let r = g.pad_cols(r, n_cap)?;
    b.mlp("proj_g", r)
}

/// One direction of the global loss.
pub fn grcm_term(on: &Binder, tg: &Binder, mo: Var, mt: Var, valid: &[bool], tau_g: f64, n_cap: usize) -> Result<Var> {
    let g = on.graph();
    let p = predictor(on, "pred_g", global_branch(on, mo, tau_g, n_cap, valid)?)?;
    let z = g.stop_gradient(global_branch(tg, mt, tau_g, n_cap, valid)?);
    let mask = row_mask(valid, g.shape(p)[1])?;
    g.masked_mse(p, z, &mask).map_err(|e| match e {
        Error::Degenerate(_) => Error::Degenerate("global consistency loss with zero valid entities".into()),
        e => e,
    })
}

fn symmetrise(g: &Graph, f: &ViewFeatures, symmetric: bool, term: impl Fn(Var, Var) -> Result<Var>) -> Result<Var> {
    let forward = term(f.online[0], f.target[1])?;
    if !symmetric {
        return Ok(forward);
    }
    let backward = term(f.online[1], f.target[0])?;
    Ok(g.scale(g.add(forward, backward)?, 0.5))
}

pub fn lrcm_loss(on: &Binder, tg: &Binder, f: &ViewFeatures, valid: &[bool], symmetric: bool) -> Result<Var> {
    symmetrise(on.graph(), f, symmetric, |mo, mt| lrcm_term(on, tg, mo, mt, valid))
}

pub fn grcm_loss(on: &Binder, tg: &Binder, f: &ViewFeatures, valid: &[bool], rcm: &RcmConfig, n_cap: usize) -> Result<Var> {
    symmetrise(on.graph(), f, rcm.symmetric, |mo, mt| grcm_term(on, tg, mo, mt, valid, rcm.tau_g, n_cap))
}

/// `L_LRCM + L_GRCM`.
pub fn rcm_loss(on: &Binder, tg: &Binder, f: &ViewFeatures, valid: &[bool], rcm: &RcmConfig, n_cap: usize) -> Result<Var> {
    let l = lrcm_loss(on, tg, f, valid, rcm.symmetric)?;
    let gl = grcm_loss(on, tg, f, valid, rcm, n_cap)?;
    on.graph().add(l, gl)
}

/// Entity features of a batch as padded `[B, N_max, d]` stacks: both views
/// under both networks, with the shared `[B, N_max]` validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedViews {
    pub online: [Tensor; 2],
    pub target: [Tensor; 2],
    pub mask: Tensor,
}

fn batch_slice(t: &Tensor, b: usize) -> Result<Tensor> {
    let &[_, n, d] = t.shape() else {
        return Err(Error::dim("padded batch", format!("expected [B, N, d], got {:?}", t.shape())));
    };
    Tensor::new(vec![n, d], t.data()[b * n * d..(b + 1) * n * d].to_vec())
}

/// `(L_LRCM, L_GRCM)` of a padded batch: the mean over documents of each
/// document's loss restricted to its valid entities.
pub fn padded_batch_losses(
    online: &ParamStore,
    target: &ParamStore,
    views: &PaddedViews,
    rcm: &RcmConfig,
    n_cap: usize,
) -> Result<(f64, f64)> {
    let &[batch, n] = views.mask.shape() else {
        return Err(Error::dim("padded batch", format!("mask shape {:?}", views.mask.shape())));
    };
    if batch == 0 {
        return Err(Error::Degenerate("empty padded batch".into()));
    }
    let (mut lrcm, mut grcm) = (0.0, 0.0);
    for b in 0..batch {
        let valid: Vec<bool> = views.mask.data()[b * n..(b + 1) * n].iter().map(|&v| v > 0.5).collect();
        let g = Graph::new();
        let on = Binder::new(&g, online, false);
        let tg = Binder::new(&g, target, false);
        let f = ViewFeatures {
            online: [g.constant(batch_slice(&views.online[0], b)?), g.constant(batch_slice(&views.online[1], b)?)],
            target: [g.constant(batch_slice(&views.target[0], b)?), g.constant(batch_slice(&views.target[1], b)?)],
        };
        lrcm += g.value(lrcm_loss(&on, &tg, &f, &valid, rcm.symmetric)?).item();
        grcm += g.value(grcm_loss(&on, &tg, &f, &valid, rcm, n_cap)?).item();
    }
    Ok((lrcm / batch as f64, grcm / batch as f64))
}

/// Encodes both views with both networks.
pub fn view_features(on: &Binder, tg: &Binder, views: [&TokenSequence; 2], enc: &EncoderConfig, symmetric: bool) -> Result<ViewFeatures> {
    let o0 = entity_features(on, views[0], enc)?;
    let t1 = entity_features(tg, views[1], enc)?;
    let (o1, t0) = if symmetric { (entity_features(on, views[1], enc)?, entity_features(tg, views[0], enc)?) } else { (o0, t1) };
    Ok(ViewFeatures { online: [o0, o1], target: [t0, t1] })
}

/// Picks MVLM positions among the text tokens at `rate`; one redraw if the
/// first draw selects nothing.
pub fn mvlm_positions(seq: &TokenSequence, rate: f64, rng: &mut SplitMix64) -> Result<Vec<usize>> {
    for _ in 0..2 {
        let picked: Vec<usize> = seq.text_positions.iter().copied().filter(|_| rng.bernoulli(rate)).collect();
        if !picked.is_empty() {
            return Ok(picked);
        }
    }
    Err(Error::Degenerate(format!("no token masked among {} after two draws at rate {rate}", seq.text_positions.len())))
}

/// Cross-entropy of the MVLM head at `positions` after replacing those
/// tokens by `[MASK]`.
pub fn mvlm_loss(b: &Binder, seq: &TokenSequence, positions: &[usize], enc: &EncoderConfig) -> Result<Var> {
    let g = b.graph();
    let masked = seq.masked(positions);
    let x = crate::encoder::embed(b, &masked)?;
    let fused = crate::encoder::encode(b, x, &masked, enc)?;
    let h = g.gather_rows(fused, positions)?;
    let logits = b.linear("mvlm", h)?;
    let targets: Vec<usize> = positions.iter().map(|&p| seq.tokens[p] as usize).collect();
    g.cross_entropy(logits, &targets)
}

/// Seeds per document of a step.
pub fn doc_seed(step_seed: u64, k: usize) -> u64 {
    SplitMix64::derive(step_seed, "doc", k as u64).next_u64()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub seed: u64,
    #[serde(rename = "L_LRCM")]
    pub lrcm: f64,
    #[serde(rename = "L_GRCM")]
    pub grcm: f64,
    #[serde(rename = "L_MVLM")]
    pub mvlm: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub target_grad_norm: f64,
    pub lr: f64,
    pub mvlm_skipped: usize,
    pub layout_views: usize,
    pub fallbacks: usize,
}

/// Per-document loss components and gradients.
pub struct DocPass {
    pub lrcm: f64,
    pub grcm: f64,
    pub mvlm: Option<f64>,
    pub online_grads: GradMap,
    pub target_grads: GradMap,
    pub layout_views: usize,
    pub fallbacks: usize,
}

/// The two networks and settings a document pass reads.
#[derive(Clone, Copy)]
pub struct Networks<'a> {
    pub online: &'a ParamStore,
    pub target: &'a ParamStore,
    pub model: &'a ModelConfig,
    pub rcm: &'a RcmConfig,
}

impl<'a> From<&'a ModelState> for Networks<'a> {
    fn from(s: &'a ModelState) -> Self {
        Networks { online: &s.online, target: &s.target, model: &s.model, rcm: &s.rcm }
    }
}

/// Loss and gradients of one document (no update).
pub fn document_pass(doc: &Document, nets: Networks, seed: u64, doc_index: usize) -> Result<DocPass> {
    run_document(doc, nets, seed, doc_index, true)
}

/// Total loss of one document, without a backward pass.
pub fn document_loss(doc: &Document, nets: Networks, seed: u64) -> Result<f64> {
    let p = run_document(doc, nets, seed, 0, false)?;
    Ok(p.lrcm + p.grcm + p.mvlm.unwrap_or(0.0))
}

fn run_document(doc: &Document, nets: Networks, seed: u64, doc_index: usize, backward: bool) -> Result<DocPass> {
    let enc = nets.model.encoder();
    let rcm = nets.rcm;
    let tasks = rcm.tasks;
    let g = Graph::new();
    let on = Binder::new(&g, nets.online, true);
    let tg = Binder::new(&g, nets.target, true);
    let mut terms = Vec::new();
    let (mut lrcm, mut grcm, mut mvlm) = (0.0, 0.0, None);
    let (mut layout_views, mut fallbacks) = (0, 0);
    if tasks.uses_views() {
        let (v1, r1) = sample_positive_view(doc, SplitMix64::derive(seed, "view", 1).next_u64());
        let (v2, r2) = sample_positive_view(doc, SplitMix64::derive(seed, "view", 2).next_u64());
        for r in [&r1, &r2] {
            layout_views += (r.op == AugOp::VisualLayout) as usize;
            fallbacks += r.fell_back as usize;
        }
        let s1 = TokenSequence::build(&v1, &enc)?;
        let s2 = TokenSequence::build(&v2, &enc)?;
        let f = view_features(&on, &tg, [&s1, &s2], &enc, rcm.symmetric)?;
        let valid = vec![true; doc.len()];
        if tasks.lrcm {
            let l = lrcm_loss(&on, &tg, &f, &valid, rcm.symmetric)?;
            lrcm = g.value(l).item();
            terms.push(l);
        }
        if tasks.grcm {
            let l = grcm_loss(&on, &tg, &f, &valid, rcm, nets.model.n_cap)?;
            grcm = g.value(l).item();
            terms.push(l);
        }
    }
    if tasks.mvlm {
        let seq = TokenSequence::build(doc, &enc)?;
        match mvlm_positions(&seq, rcm.mask_rate, &mut SplitMix64::derive(seed, "mask", 0)) {
            Ok(pos) => {
                let l = mvlm_loss(&on, &seq, &pos, &enc)?;
                mvlm = Some(g.value(l).item());
                terms.push(l);
            }
            Err(Error::Degenerate(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let mut pass = DocPass { lrcm, grcm, mvlm, online_grads: GradMap::new(), target_grads: GradMap::new(), layout_views, fallbacks };
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(pass);
    };
    let mut total = first;
    for &t in rest {
        total = g.add(total, t)?;
    }
    let value = g.value(total).item();
    if !value.is_finite() {
        return Err(Error::NonFinite { doc: doc_index, detail: format!("L_LRCM {lrcm}, L_GRCM {grcm}, L_MVLM {mvlm:?}") });
    }
    if backward {
        g.backward(total)?;
        pass.online_grads = on.grads();
        pass.target_grads = tg.grads();
    }
    Ok(pass)
}

/// One optimisation step over `batch`: the gradient of the mean
/// per-document loss updates θ, then ξ follows by EMA.
pub fn pretrain_step(
    batch: &[&Document],
    doc_ids: &[usize],
    state: &mut ModelState,
    opt: &mut Optimizer,
    step_seed: u64,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::Parameter("empty pre-training batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = GradMap::new();
    let mut target_grads = GradMap::new();
    let mut m = StepMetrics { step: state.step, seed: step_seed, lr: opt.current_lr(), ..Default::default() };
    let mut mvlm_count = 0;
    for (k, doc) in batch.iter().enumerate() {
        let id = doc_ids.get(k).copied().unwrap_or(k);
        let pass = document_pass(doc, Networks::from(&*state), doc_seed(step_seed, k), id)?;
        accumulate(&mut grads, &pass.online_grads, scale);
        accumulate(&mut target_grads, &pass.target_grads, scale);
        m.lrcm += pass.lrcm * scale;
        m.grcm += pass.grcm * scale;
        match pass.mvlm {
            Some(l) => {
                m.mvlm += l;
                mvlm_count += 1;
            }
            None if state.rcm.tasks.mvlm => m.mvlm_skipped += 1,
            None => {}
        }
        m.layout_views += pass.layout_views;
        m.fallbacks += pass.fallbacks;
    }
    if mvlm_count > 0 {
        m.mvlm /= mvlm_count as f64;
    }
    m.loss = m.lrcm + m.grcm + m.mvlm;
    m.grad_norm = grad_norm(&grads);
    m.target_grad_norm = grad_norm(&target_grads);
    opt.step(&mut state.online, &grads)?;
    ema_update(state)?;
    state.step += 1;
    Ok(m)
}
