use std::fs;
use std::path::Path;

use relcon::config::Config;
use relcon::doc::{DocKind, RelationKind};
use relcon::pipeline::{BatchOrder, Pipeline, StageManifest};

fn smoke() -> Config {
    let text = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")).unwrap();
    Config::parse(&text, &[]).unwrap()
}

#[test]
fn batch_order_walks_permutations() {
    let o = BatchOrder::new(5, 3, "t");
    let mut seen: Vec<usize> = (0..5).flat_map(|s| o.batch(s, 2)).collect();
    assert_eq!(seen.len(), 10);
    let (a, b) = seen.split_at_mut(5);
    a.sort_unstable();
    b.sort_unstable();
    assert_eq!(a, [0, 1, 2, 3, 4]);
    assert_eq!(b, [0, 1, 2, 3, 4]);
    assert_eq!(o.epoch_slice(1, 4, 3), vec![o.permutation(1)[4]]);
    assert_eq!(o.permutation(0), BatchOrder::new(5, 3, "t").permutation(0));
}

#[test]
fn corpus_splits_and_reuse() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(smoke(), dir.path());
    let s = p.gen().unwrap();
    assert!(!s.reused);
    let sizes: Vec<usize> = ["train", "val", "test"].iter().map(|n| Pipeline::split(&s, n).unwrap().len()).collect();
    assert_eq!(sizes, vec![18, 6, 6]);
    let test = Pipeline::split(&s, "test").unwrap();
    for k in [DocKind::Table, DocKind::Form, DocKind::Paragraphs] {
        assert_eq!(test.iter().filter(|d| d.kind == k).count(), 2);
    }
    let again = p.gen().unwrap();
    assert!(again.reused);
    assert_eq!(again.manifest, s.manifest);

    let mut c = smoke();
    c.corpus.tables = 0;
    c.corpus.train = 20;
    let empty = Pipeline::new(c, dir.path()).gen().unwrap();
    assert_ne!(empty.dir, s.dir);
    assert_eq!(Pipeline::split(&empty, "train").unwrap().len(), 20);
    assert_eq!(Pipeline::split(&empty, "test").unwrap().len(), 0);
}

#[test]
fn end_to_end_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (sa, ra) = Pipeline::new(smoke(), a.path()).eval(None).unwrap();
    let (sb, rb) = Pipeline::new(smoke(), b.path()).eval(None).unwrap();
    assert_eq!(ra, rb);
    for f in ["report.json", "records.jsonl", "summary.txt"] {
        assert_eq!(fs::read(sa.file(f)).unwrap(), fs::read(sb.file(f)).unwrap(), "{f}");
    }
    assert_eq!(ra.tasks.len(), 3);
    for t in &ra.tasks {
        assert_eq!(t.documents.len(), 2);
        assert!((0.0..=1.0).contains(&t.score));
    }
    assert!(ra.task(DocKind::Paragraphs).unwrap().heuristic.is_some());

    let text = fs::read_to_string(sa.file("manifest.json")).unwrap();
    let m: StageManifest = serde_json::from_str(&text).unwrap();
    assert_eq!(m.stage, "eval");
    assert!(m.inputs.contains_key("head.order"));

    let mut c = smoke();
    c.finetune.kinds = vec![RelationKind::Kv];
    let (_, only_kv) = Pipeline::new(c, a.path()).eval(None).unwrap();
    assert_eq!(only_kv.tasks.len(), 1);
    assert_eq!(only_kv.tasks[0].task, DocKind::Form);
    assert_eq!(only_kv.tasks[0], ra.tasks[1], "kv head reused from the first run");
}

#[test]
fn features_dump_rows_are_distributions() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(smoke(), dir.path());
    let s = p.dump_features(None).unwrap();
    let text = fs::read_to_string(s.file("features.jsonl")).unwrap();
    let rows: Vec<relcon::pipeline::FeatureRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 6);
    for r in rows {
        assert_eq!(r.m.len(), r.n);
        assert_eq!(r.rg.len(), r.n);
        for row in &r.rg {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn forced_rerun_rewrites_identically() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::new(smoke(), dir.path());
    let first = p.pretrain().unwrap();
    let log = fs::read(first.file("log.jsonl")).unwrap();
    p.force = true;
    let second = p.pretrain().unwrap();
    assert!(!second.reused);
    assert_eq!(second.manifest.files, first.manifest.files);
    assert_eq!(fs::read(second.file("log.jsonl")).unwrap(), log);
}
