use relcon::config::Config;
use relcon::doc::RelationKind;
use relcon::optim::OptimizerKind;
use relcon::rcm::TaskSet;
use relcon::Error;

fn errors(text: &str, overrides: &[&str]) -> Vec<String> {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    match Config::parse(text, &o) {
        Err(Error::Config(e)) => e,
        other => panic!("expected config errors, got {other:?}"),
    }
}

#[test]
fn empty_text_gives_defaults() {
    let c = Config::parse("", &[]).unwrap();
    assert_eq!(c, Config::default());
    assert_eq!(c.pretrain.tasks, TaskSet::FULL);
    assert_eq!(c.pretrain.optimizer, OptimizerKind::Sgd);
    assert_eq!(c.finetune.optimizer, OptimizerKind::Adam);
    assert_eq!(c.finetune.kinds, RelationKind::ALL.to_vec());
    assert_eq!((c.corpus.train, c.corpus.val), (240, 30));
}

#[test]
fn round_trips_through_toml() {
    let mut c = Config::default();
    c.seed = 17;
    c.pretrain.tasks = TaskSet::MVLM_LRCM;
    c.finetune.kinds = vec![RelationKind::Kv];
    let back = Config::parse(&c.to_toml(), &[]).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.hash(), c.hash());
}

#[test]
fn hash_tracks_content() {
    let a = Config::default();
    let b = Config::parse("seed = 1", &[]).unwrap();
    assert_eq!(a.hash(), Config::default().hash());
    assert_eq!(a.hash().len(), 64);
    assert_ne!(a.hash(), b.hash());
}

#[test]
fn overrides_apply_in_order() {
    let o = ["seed=5", "pretrain.tasks=mvlm", "pretrain.lr=1", "finetune.kinds=[\"row\",\"col\"]", "seed=6"].map(String::from);
    let c = Config::parse("seed = 3\n[pretrain]\nsteps = 7\n", &o).unwrap();
    assert_eq!(c.seed, 6);
    assert_eq!(c.pretrain.steps, 7);
    assert_eq!(c.pretrain.tasks, TaskSet::MVLM);
    assert_eq!(c.pretrain.lr, 1.0);
    assert_eq!(c.finetune.kinds, vec![RelationKind::Row, RelationKind::Col]);
}

#[test]
fn integers_promote_to_floats() {
    let c = Config::parse("[eval]\nthreshold = 0.25\n[pretrain]\ntau_g = 2\n", &[]).unwrap();
    assert_eq!(c.pretrain.tau_g, 2.0);
    assert_eq!(c.eval.threshold, 0.25);
}

#[test]
fn unknown_keys_and_type_clashes_are_all_reported() {
    let e = errors("colour = 1\n[model]\nd = \"big\"\nwidth = 3\n[pretrain]\nsymmetric = 1\n", &["eval.nope=1", "bare"]);
    let joined = e.join("\n");
    for needle in [
        "unknown key colour",
        "unknown key model.width",
        "model.d: expected integer, found string",
        "pretrain.symmetric: expected boolean",
        "unknown key eval.nope",
        "\"bare\"",
    ] {
        assert!(joined.contains(needle), "missing {needle:?} in\n{joined}");
    }
    assert_eq!(e.len(), 6, "{joined}");
}

#[test]
fn range_violations_are_all_reported() {
    let text = "[pretrain]\ntau_g = 0.0\ntau_ema = 1.5\nmask_rate = 1.0\nbatch = 0\nlr = -1.0\n\
                [finetune]\nepochs = 0\nkinds = [\"kv\", \"kv\"]\n[eval]\nthreshold = 1.0\nbleu_max_n = 0\n\
                [corpus]\ntable_rows = [5, 2]\nmax_tokens = 0\n";
    let e = errors(text, &[]);
    let joined = e.join("\n");
    for needle in [
        "tau_g",
        "tau_ema",
        "mask_rate",
        "pretrain.batch",
        "lr",
        "finetune.epochs",
        "twice",
        "eval.threshold",
        "bleu_max_n",
        "table_rows",
        "max_tokens",
    ] {
        assert!(joined.contains(needle), "missing {needle:?} in\n{joined}");
    }
    assert!(e.len() >= 11, "{joined}");
}

#[test]
fn capacity_is_checked_against_the_model() {
    let e = errors("[model]\nn_cap = 8\n", &[]);
    assert!(e.iter().any(|m| m.contains("paragraphs") && m.contains("n_cap")), "{e:?}");
    let e = errors("", &["model.max_seq_len=40"]);
    assert!(e.iter().any(|m| m.contains("tables")), "{e:?}");
}

#[test]
fn bad_task_names_and_toml_fail() {
    assert!(!errors("[pretrain]\ntasks = \"mvlm+nsp\"\n", &[]).is_empty());
    assert!(!errors("[pretrain]\ntasks = \"\"\n", &[]).is_empty());
    assert!(errors("seed = = 3", &[])[0].contains("invalid TOML"));
    assert!(!errors("", &["a..b=1"]).is_empty());
}
