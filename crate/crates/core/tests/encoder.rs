use relcon::doc::{vocab, BBox, DocKind, Document, Entity, GroundTruth};
use relcon::encoder::{embed, encode, entity_features, pad_batch, patch_embedding, EncoderConfig, EntityFeatures, TokenSequence, VIS};
use relcon::gradcheck;
use relcon::graph::Graph;
use relcon::params::{Binder, ParamStore};
use relcon::rng::SplitMix64;
use relcon::synth::{gen_form, gen_table, GenOptions};
use relcon::tensor::Tensor;
use relcon::Error;

fn tiny_opts() -> GenOptions {
    GenOptions { patch_side: 2, n_cap: 4, max_tokens: 2, max_seq_len: 48 }
}

fn weights(cfg: &EncoderConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    cfg.init(&mut store, &mut SplitMix64::new(seed));
    store
}

fn value_of(store: &ParamStore, f: impl Fn(&Binder) -> relcon::graph::Var) -> Tensor {
    let g = Graph::new();
    let b = Binder::new(&g, store, false);
    let v = f(&b);
    (*g.value(v)).clone()
}

fn two_entity_doc(side: usize) -> Document {
    let e = |id, x0, t| Entity { id, tokens: vec![t], bbox: BBox::new(x0, 10, x0 + 50, 40), patch: vec![0.5; 3 * side * side] };
    Document {
        kind: DocKind::Paragraphs,
        entities: vec![e(0, 10, 100), e(1, 200, 101)],
        labels: GroundTruth { reading_order: Some(vec![0, 1]), ..Default::default() },
    }
}

#[test]
fn sequence_layout() {
    let cfg = EncoderConfig::tiny();
    let s = TokenSequence::build(&two_entity_doc(2), &cfg).unwrap();
    assert_eq!(s.tokens, vec![vocab::ENT, 100, vocab::ENT, 101, VIS, VIS]);
    assert_eq!(s.segments, vec![0, 0, 1, 1, 0, 1]);
    assert_eq!(s.modality, vec![0, 0, 0, 0, 1, 1]);
    assert_eq!(s.ent_positions, vec![0, 2]);
    assert_eq!(s.text_positions, vec![1, 3]);
    assert_eq!(s.visual_start, 4);
}

#[test]
fn capacity_is_enforced() {
    let cfg = EncoderConfig::tiny();
    let d = gen_table(3, 3, 0, &GenOptions { patch_side: 2, ..GenOptions::default() }).unwrap();
    assert!(matches!(TokenSequence::build(&d, &cfg), Err(Error::Capacity(_))));
}

#[test]
fn zero_patch_embeds_to_bias() {
    let cfg = EncoderConfig::tiny();
    let store = weights(&cfg, 1);
    let mut d = two_entity_doc(2);
    d.entities[1].patch = vec![0.0; 12];
    let seq = TokenSequence::build(&d, &cfg).unwrap();
    let pe = value_of(&store, |b| patch_embedding(b, &seq).unwrap());
    assert_eq!(pe.row(1), store.get("enc.patch.b").unwrap().row(0));
    assert_ne!(pe.row(0), pe.row(1));
}

#[test]
fn bbox_change_only_moves_its_segment() {
    let cfg = EncoderConfig { n_cap: 8, max_seq_len: 64, ..EncoderConfig::tiny() };
    let store = weights(&cfg, 2);
    let opts = GenOptions { n_cap: 8, ..tiny_opts() };
    let d = gen_form(3, 4, &opts).unwrap();
    let mut moved = d.clone();
    moved.entities[3].bbox.x1 += 3;
    let s0 = TokenSequence::build(&d, &cfg).unwrap();
    let s1 = TokenSequence::build(&moved, &cfg).unwrap();
    let e0 = value_of(&store, |b| embed(b, &s0).unwrap());
    let e1 = value_of(&store, |b| embed(b, &s1).unwrap());
    for t in 0..s0.len() {
        assert_eq!(e0.row(t) != e1.row(t), s0.segments[t] == 3, "token {t}");
    }
}

#[test]
fn zero_layers_is_identity() {
    let cfg = EncoderConfig { layers: 0, ..EncoderConfig::tiny() };
    let store = weights(&cfg, 3);
    let seq = TokenSequence::build(&two_entity_doc(2), &cfg).unwrap();
    let g = Graph::new();
    let b = Binder::new(&g, &store, false);
    let x = embed(&b, &seq).unwrap();
    let y = encode(&b, x, &seq, &cfg).unwrap();
    assert_eq!(*g.value(x), *g.value(y));
}

#[test]
fn padding_is_invisible() {
    let cfg = EncoderConfig { n_cap: 8, max_seq_len: 64, ..EncoderConfig::tiny() };
    let store = weights(&cfg, 4);
    let d = gen_form(2, 5, &GenOptions { n_cap: 8, ..tiny_opts() }).unwrap();
    let seq = TokenSequence::build(&d, &cfg).unwrap();
    let n = seq.len();
    let plain = value_of(&store, |b| entity_features(b, &seq, &cfg).unwrap());
    let padded = seq.clone().padded(n + 6, &cfg).unwrap();
    let with_pad = value_of(&store, |b| entity_features(b, &padded, &cfg).unwrap());
    assert!(plain.max_abs_diff(&with_pad) < 1e-12);
    // permute and rewrite the padded positions
    let mut scrambled = padded.clone();
    scrambled.tokens[n] = 77;
    scrambled.tokens[n + 3] = 120;
    scrambled.layout.swap(n + 1, n + 4);
    scrambled.layout[n + 2] = [0.3, 0.1, 0.9, 0.8, 0.6, 0.7];
    scrambled.segments[n + 5] = 3;
    let s = value_of(&store, |b| {
        let x = embed(b, &scrambled).unwrap();
        encode(b, x, &scrambled, &cfg).unwrap()
    });
    let p = value_of(&store, |b| {
        let x = embed(b, &padded).unwrap();
        encode(b, x, &padded, &cfg).unwrap()
    });
    for t in 0..n {
        for c in 0..cfg.d {
            assert!((s.get(t, c) - p.get(t, c)).abs() < 1e-12);
        }
    }
    let longer = padded.clone().padded(n + 12, &cfg).unwrap();
    let f = value_of(&store, |b| entity_features(b, &longer, &cfg).unwrap());
    assert!(f.max_abs_diff(&with_pad) < 1e-12);
}

#[test]
fn features_follow_entity_order_and_tokens() {
    let cfg = EncoderConfig { n_cap: 8, max_seq_len: 64, ..EncoderConfig::tiny() };
    let store = weights(&cfg, 5);
    let d = gen_form(3, 6, &GenOptions { n_cap: 8, ..tiny_opts() }).unwrap();
    let f = EntityFeatures::compute(&store, &d, &cfg).unwrap();
    assert_eq!(f.m.shape(), &[6, cfg.d]);
    let mut other = d.clone();
    other.entities[2].tokens[0] = if other.entities[2].tokens[0] == 40 { 41 } else { 40 };
    let g = EntityFeatures::compute(&store, &other, &cfg).unwrap();
    assert_ne!(f.m.row(2), g.m.row(2));
}

#[test]
fn pooled_gradient_matches_finite_differences() {
    let cfg = EncoderConfig::tiny();
    let opts = tiny_opts();
    for seed in 0..3u64 {
        let store = weights(&cfg, 10 + seed);
        let d = gen_form(2, seed, &opts).unwrap();
        let seq = TokenSequence::build(&d, &cfg).unwrap();
        let w = Tensor::new(vec![d.len(), cfg.d], {
            let mut r = SplitMix64::new(seed);
            (0..d.len() * cfg.d).map(|_| r.uniform(-1.0, 1.0)).collect()
        })
        .unwrap();
        let loss = |s: &ParamStore| -> (f64, relcon::params::GradMap) {
            let g = Graph::new();
            let b = Binder::new(&g, s, true);
            let m = entity_features(&b, &seq, &cfg).unwrap();
            let l = g.sum(g.mul_const(m, w.clone()).unwrap());
            g.backward(l).unwrap();
            (g.value(l).item(), b.grads())
        };
        let (_, analytic) = loss(&store);
        let errs = gradcheck::compare(&store, &analytic, |s| loss(s).0);
        let (name, e) = gradcheck::worst(&errs);
        assert!(e < 1e-4, "seed {seed}: {name} rel err {e}");
    }
}

#[test]
fn pad_batch_shapes() {
    let f = |n: usize| EntityFeatures { m: Tensor::full(&[n, 3], 1.0), n_valid: n };
    let (b, m) = pad_batch(&[f(4)]).unwrap();
    assert_eq!(b.shape(), &[1, 4, 3]);
    assert!(m.data().iter().all(|&x| x == 1.0));
    let (b, m) = pad_batch(&[f(2), f(5)]).unwrap();
    assert_eq!(b.shape(), &[2, 5, 3]);
    assert_eq!(&m.data()[..5], &[1.0, 1.0, 0.0, 0.0, 0.0]);
    assert!(b.data()[6..15].iter().all(|&x| x == 0.0));
    assert!(matches!(pad_batch(&[]), Err(Error::Parameter(_))));
}
