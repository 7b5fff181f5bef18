//! Content-addressed experiment stages: corpus generation, pre-training,
//! per-kind fine-tuning, evaluation and feature dumps.
//!
//! Each stage writes into `<root>/<stage>-<hash16>/`, where the hash covers
//! the configuration the stage reads plus the hashes of its inputs. A stage
//! whose directory already holds a `manifest.json` is reused unless forced.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hash_json, Config};
use crate::corpus::{load_corpus, save_corpus};
use crate::decode::{bleu, decode_kv_pairs, decode_reading_order, heuristic_order, links_matrix, pairwise_f1, table_f1};
use crate::doc::{gt_relation_matrix, DocKind, Document, RelationKind};
use crate::encoder::EntityFeatures;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::optim::Optimizer;
use crate::params::ParamStore;
use crate::rcm::{global_relation_distribution, pretrain_step, ModelState};
use crate::relhead::{finetune_step, init_head, predict_relation_matrix, AggregatorInit};
use crate::rng::SplitMix64;
use crate::synth::gen_documents;

pub const MANIFEST: &str = "manifest.json";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub hash: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every file the stage wrote.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub dir: PathBuf,
    pub manifest: StageManifest,
    /// The stage was found complete on disk and not recomputed.
    pub reused: bool,
}

impl Stage {
    pub fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn file_hash(&self, name: &str) -> Result<&str> {
        self.manifest
            .files
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| Error::State(format!("stage {} has no file {name}", self.manifest.stage)))
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

fn write_lines<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(&item)?);
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

/// Runs stages under one output root.
pub struct Pipeline {
    pub cfg: Config,
    pub root: PathBuf,
    pub force: bool,
    pub verbose: bool,
}

impl Pipeline {
    pub fn new(cfg: Config, root: impl Into<PathBuf>) -> Self {
        Self { cfg, root: root.into(), force: false, verbose: false }
    }

    fn say(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    /// Reuses the stage directory for `key` or runs `body` into a fresh one.
    fn stage(
        &self,
        name: &str,
        key: &impl Serialize,
        inputs: BTreeMap<String, String>,
        body: impl FnOnce(&Path) -> Result<Vec<String>>,
    ) -> Result<Stage> {
        let hash = hash_json(&(name, key, &inputs));
        let dir = self.root.join(format!("{name}-{}", &hash[..16]));
        let manifest_path = dir.join(MANIFEST);
        if !self.force && manifest_path.exists() {
            let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
            let manifest: StageManifest = serde_json::from_str(&text)?;
            if manifest.hash == hash {
                self.say(format!("{name}: reusing {}", dir.display()));
                return Ok(Stage { dir, manifest, reused: true });
            }
        }
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        self.say(format!("{name}: writing {}", dir.display()));
        let written = body(&dir)?;
        let mut files = BTreeMap::new();
        for f in written {
            files.insert(f.clone(), sha256_file(&dir.join(&f))?);
        }
        let manifest = StageManifest { stage: name.to_string(), hash, config_hash: self.cfg.hash(), seed: self.cfg.seed, inputs, files };
        write_json(&manifest_path, &manifest)?;
        Ok(Stage { dir, manifest, reused: false })
    }

    pub fn gen(&self) -> Result<Stage> {
        let cfg = &self.cfg;
        let opts = cfg.corpus.gen_options(&cfg.model);
        let key = (cfg.seed, &cfg.corpus, opts);
        self.stage("corpus", &key, BTreeMap::new(), |dir| {
            let spec = cfg.corpus.spec();
            let mut splits: [Vec<Document>; 3] = Default::default();
            for (kind, count) in [(DocKind::Table, spec.tables), (DocKind::Form, spec.forms), (DocKind::Paragraphs, spec.paragraphs)] {
                let docs = gen_documents(kind, count, &spec, cfg.seed, &opts)?;
                let train = cfg.corpus.train.min(docs.len());
                let val = cfg.corpus.val.min(docs.len() - train);
                let mut it = docs.into_iter();
                splits[0].extend(it.by_ref().take(train));
                splits[1].extend(it.by_ref().take(val));
                splits[2].extend(it);
            }
            let mut files = Vec::new();
            for (name, docs) in SPLITS.iter().zip(&splits) {
                let f = format!("{name}.jsonl");
                save_corpus(docs, &dir.join(&f))?;
                files.push(f);
            }
            write_file(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
            files.push("config.toml".into());
            Ok(files)
        })
    }

    pub fn split(corpus: &Stage, name: &str) -> Result<Vec<Document>> {
        load_corpus(&corpus.file(&format!("{name}.jsonl")))
    }

    pub fn pretrain(&self) -> Result<Stage> {
        let corpus = self.gen()?;
        let cfg = &self.cfg;
        let key = (cfg.seed, &cfg.model, &cfg.pretrain);
        let inputs = BTreeMap::from([("corpus".to_string(), corpus.manifest.hash.clone())]);
        self.stage("pretrain", &key, inputs, |dir| {
            let docs = Self::split(&corpus, "train")?;
            if docs.is_empty() {
                return Err(Error::Parameter("pre-training needs a non-empty training split".into()));
            }
            let p = &cfg.pretrain;
            let mut state = ModelState::init(cfg.model.clone(), p.rcm(), cfg.seed)?;
            let mut opt = Optimizer::new(p.optimizer(), p.steps);
            let order = BatchOrder::new(docs.len(), cfg.seed, "pretrain.batch");
            let mut log = Vec::with_capacity(p.steps);
            for step in 0..p.steps {
                let ids = order.batch(step, p.batch);
                let batch: Vec<&Document> = ids.iter().map(|&i| &docs[i]).collect();
                let seed = SplitMix64::derive(cfg.seed, "pretrain.step", step as u64).next_u64();
                let m = pretrain_step(&batch, &ids, &mut state, &mut opt, seed)?;
                if (step + 1) % 100 == 0 || step + 1 == p.steps {
                    self.say(format!("pretrain step {:>5}  L_LRCM {:.5}  L_GRCM {:.6}  L_MVLM {:.4}", step + 1, m.lrcm, m.grcm, m.mvlm));
                }
                log.push(m);
            }
            let meta = BTreeMap::from([
                ("config_hash".to_string(), cfg.hash()),
                ("seed".to_string(), cfg.seed.to_string()),
                ("tasks".to_string(), p.tasks.to_string()),
                ("steps".to_string(), state.step.to_string()),
            ]);
            state.online.save(&dir.join("online.ckpt"), "online", &meta)?;
            state.target.save(&dir.join("target.ckpt"), "target", &meta)?;
            state.encoder_weights().save(&dir.join("encoder.ckpt"), "encoder", &meta)?;
            write_lines(&dir.join("log.jsonl"), &log)?;
            Ok(vec!["online.ckpt".into(), "target.ckpt".into(), "encoder.ckpt".into(), "log.jsonl".into()])
        })
    }

    /// Fine-tunes the `kind` head from the pre-training stage, or from
    /// `checkpoint` when given.
    pub fn finetune(&self, kind: RelationKind, checkpoint: Option<&Path>) -> Result<Stage> {
        let corpus = self.gen()?;
        let (init_path, init_hash) = match checkpoint {
            Some(p) => (p.to_path_buf(), sha256_file(p)?),
            None => {
                let pre = self.pretrain()?;
                let h = pre.file_hash("online.ckpt")?.to_string();
                (pre.file("online.ckpt"), h)
            }
        };
        let cfg = &self.cfg;
        let f = &cfg.finetune;
        let key = (cfg.seed, &cfg.model, f.epochs, f.batch, f.optimizer, f.lr, f.linear_decay, f.aggregator_init, kind);
        let inputs = BTreeMap::from([("corpus".to_string(), corpus.manifest.hash.clone()), ("init".to_string(), init_hash)]);
        let name = format!("finetune-{kind}");
        self.stage(&name, &key, inputs, |dir| {
            let docs: Vec<Document> = Self::split(&corpus, "train")?.into_iter().filter(|d| d.kind == kind.doc_kind()).collect();
            if docs.is_empty() {
                return Err(Error::Parameter(format!("no {} documents to fine-tune {kind} on", kind.doc_kind().name())));
            }
            let (pre, _) = ParamStore::load(&init_path)?;
            let mut store = pre.subset(&["enc."]);
            let mut rng = SplitMix64::derive(cfg.seed, &format!("finetune.{kind}.init"), 0);
            let from = (f.aggregator_init == AggregatorInit::Pretrained).then_some(&pre);
            init_head(&mut store, kind, &cfg.model, from, &mut rng)?;
            let steps_per_epoch = docs.len().div_ceil(f.batch);
            let mut opt = Optimizer::new(f.optimizer(), f.epochs * steps_per_epoch);
            let order = BatchOrder::new(docs.len(), cfg.seed, &format!("finetune.{kind}.batch"));
            let mut log = Vec::new();
            for epoch in 0..f.epochs {
                let mut total = 0.0;
                for b in 0..steps_per_epoch {
                    let ids = order.epoch_slice(epoch, b * f.batch, f.batch);
                    let batch: Vec<&Document> = ids.iter().map(|&i| &docs[i]).collect();
                    let m = finetune_step(&batch, &mut store, kind, &cfg.model, &mut opt)?;
                    total += m.loss;
                }
                let mean = total / steps_per_epoch as f64;
                if (epoch + 1) % 10 == 0 || epoch + 1 == f.epochs {
                    self.say(format!("finetune {kind} epoch {:>3}  loss {mean:.5}", epoch + 1));
                }
                log.push(EpochRecord { kind, epoch, loss: mean });
            }
            let meta = BTreeMap::from([
                ("config_hash".to_string(), cfg.hash()),
                ("seed".to_string(), cfg.seed.to_string()),
                ("kind".to_string(), kind.to_string()),
            ]);
            store.save(&dir.join("head.ckpt"), &format!("finetune.{kind}"), &meta)?;
            write_lines(&dir.join("log.jsonl"), &log)?;
            Ok(vec!["head.ckpt".into(), "log.jsonl".into()])
        })
    }

    /// Fine-tunes every configured kind and scores the test split.
    pub fn eval(&self, checkpoint: Option<&Path>) -> Result<(Stage, EvalReport)> {
        let corpus = self.gen()?;
        let cfg = &self.cfg;
        let mut heads = BTreeMap::new();
        for &kind in &cfg.finetune.kinds {
            heads.insert(kind, self.finetune(kind, checkpoint)?);
        }
        let mut inputs = BTreeMap::from([("corpus".to_string(), corpus.manifest.hash.clone())]);
        for (k, s) in &heads {
            inputs.insert(format!("head.{k}"), s.file_hash("head.ckpt")?.to_string());
        }
        let stage = self.stage("eval", &(cfg.seed, &cfg.model, &cfg.eval), inputs, |dir| {
            let test = Self::split(&corpus, "test")?;
            let report = evaluate(cfg, &test, &heads)?;
            write_json(&dir.join("report.json"), &report)?;
            write_lines(&dir.join("records.jsonl"), report.records())?;
            write_file(&dir.join("summary.txt"), report.summary().as_bytes())?;
            Ok(vec!["report.json".into(), "records.jsonl".into(), "summary.txt".into()])
        })?;
        let text = fs::read_to_string(stage.file("report.json")).map_err(|e| Error::io(stage.file("report.json"), e))?;
        Ok((stage, serde_json::from_str(&text)?))
    }

    /// Writes entity features and global relation distributions of the
    /// test split under the pre-trained (or given) encoder.
    pub fn dump_features(&self, checkpoint: Option<&Path>) -> Result<Stage> {
        let corpus = self.gen()?;
        let (path, hash) = match checkpoint {
            Some(p) => (p.to_path_buf(), sha256_file(p)?),
            None => {
                let pre = self.pretrain()?;
                let h = pre.file_hash("encoder.ckpt")?.to_string();
                (pre.file("encoder.ckpt"), h)
            }
        };
        let cfg = &self.cfg;
        let inputs = BTreeMap::from([("corpus".to_string(), corpus.manifest.hash.clone()), ("encoder".to_string(), hash)]);
        self.stage("features", &(&cfg.model, cfg.pretrain.tau_g), inputs, |dir| {
            let (store, _) = ParamStore::load(&path)?;
            let enc = cfg.model.encoder();
            let out = dir.join("features.jsonl");
            let mut file = fs::File::create(&out).map_err(|e| Error::io(&out, e))?;
            for (i, doc) in Self::split(&corpus, "test")?.iter().enumerate() {
                let f = EntityFeatures::compute(&store, doc, &enc)?;
                let g = Graph::new();
                let r = global_relation_distribution(&g, g.constant(f.m.clone()), cfg.pretrain.tau_g, &vec![true; doc.len()])?;
                let record = FeatureRecord {
                    doc: i,
                    kind: doc.kind,
                    n: doc.len(),
                    m: (0..f.m.rows()).map(|r| f.m.row(r).to_vec()).collect(),
                    rg: (0..doc.len()).map(|k| g.value(r).row(k).to_vec()).collect(),
                };
                writeln!(file, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(&out, e))?;
            }
            Ok(vec!["features.jsonl".into()])
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub doc: usize,
    pub kind: DocKind,
    pub n: usize,
    pub m: Vec<Vec<f64>>,
    pub rg: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub kind: RelationKind,
    pub epoch: usize,
    pub loss: f64,
}

/// Epoch-wise shuffled visiting order over `n` items.
pub struct BatchOrder {
    n: usize,
    seed: u64,
    tag: String,
}

impl BatchOrder {
    pub fn new(n: usize, seed: u64, tag: &str) -> Self {
        Self { n, seed, tag: tag.to_string() }
    }

    pub fn permutation(&self, epoch: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..self.n).collect();
        SplitMix64::derive(self.seed, &self.tag, epoch as u64).shuffle(&mut p);
        p
    }

    /// Items `start..start+len` of epoch `epoch` (truncated at the end).
    pub fn epoch_slice(&self, epoch: usize, start: usize, len: usize) -> Vec<usize> {
        let p = self.permutation(epoch);
        p[start.min(self.n)..(start + len).min(self.n)].to_vec()
    }

    /// Batch `step` of a stream that walks the epoch permutations back to
    /// back.
    pub fn batch(&self, step: usize, len: usize) -> Vec<usize> {
        (step * len..(step + 1) * len).map(|k| self.permutation(k / self.n)[k % self.n]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocScore {
    pub doc: usize,
    pub n: usize,
    pub score: f64,
    /// Reading-order BLEU of the `(y0, x0)` sort, paragraphs only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heuristic: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: DocKind,
    pub metric: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heuristic: Option<f64>,
    pub checkpoints: BTreeMap<RelationKind, String>,
    pub documents: Vec<DocScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub seed: u64,
    pub tasks: Vec<TaskReport>,
}

#[derive(Serialize)]
struct LineRecord<'a> {
    task: DocKind,
    metric: &'a str,
    #[serde(flatten)]
    doc: &'a DocScore,
}

impl EvalReport {
    pub fn task(&self, kind: DocKind) -> Option<&TaskReport> {
        self.tasks.iter().find(|t| t.task == kind)
    }

    pub fn score(&self, kind: DocKind) -> Option<f64> {
        self.task(kind).map(|t| t.score)
    }

    fn records(&self) -> Vec<LineRecord<'_>> {
        self.tasks.iter().flat_map(|t| t.documents.iter().map(move |d| LineRecord { task: t.task, metric: &t.metric, doc: d })).collect()
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:<10} {:>6} {:>8} {:>10}", "task", "metric", "docs", "score", "heuristic");
        for t in &self.tasks {
            let h = t.heuristic.map_or("-".to_string(), |h| format!("{h:.4}"));
            let _ = writeln!(s, "{:<12} {:<10} {:>6} {:>8.4} {:>10}", t.task.name(), t.metric, t.documents.len(), t.score, h);
        }
        let _ = writeln!(s, "config {}  seed {}", &self.config_hash[..16], self.seed);
        s
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Scores every task whose heads are all present in `heads`.
pub fn evaluate(cfg: &Config, test: &[Document], heads: &BTreeMap<RelationKind, Stage>) -> Result<EvalReport> {
    let mut loaded = BTreeMap::new();
    let mut hashes = BTreeMap::new();
    for (&k, s) in heads {
        loaded.insert(k, ParamStore::load(&s.file("head.ckpt"))?.0);
        hashes.insert(k, s.file_hash("head.ckpt")?.to_string());
    }
    let model = &cfg.model;
    let th = cfg.eval.threshold;
    let mut tasks = Vec::new();
    for (task, metric, kinds) in [
        (DocKind::Table, "table_f1", &[RelationKind::Row, RelationKind::Col][..]),
        (DocKind::Form, "kv_f1", &[RelationKind::Kv][..]),
        (DocKind::Paragraphs, "bleu", &[RelationKind::Order][..]),
    ] {
        if !kinds.iter().all(|k| loaded.contains_key(k)) {
            continue;
        }
        let mut documents = Vec::new();
        for (i, doc) in test.iter().enumerate().filter(|(_, d)| d.kind == task) {
            let predict = |k: RelationKind| predict_relation_matrix(&loaded[&k], doc, k, model, th);
            let gt = |k: RelationKind| gt_relation_matrix(doc, k);
            let (score, heuristic) = match task {
                DocKind::Table => (
                    table_f1(&predict(RelationKind::Row)?, &predict(RelationKind::Col)?, &gt(RelationKind::Row)?, &gt(RelationKind::Col)?)?,
                    None,
                ),
                DocKind::Form => {
                    let links = decode_kv_pairs(&predict(RelationKind::Kv)?)?;
                    (pairwise_f1(&links_matrix(doc.len(), &links), &gt(RelationKind::Kv)?)?, None)
                }
                DocKind::Paragraphs => {
                    let reference =
                        doc.labels.reading_order.as_ref().ok_or_else(|| Error::Label(format!("test document {i} has no reading order")))?;
                    let order = decode_reading_order(&predict(RelationKind::Order)?)?;
                    (bleu(&order, reference, cfg.eval.bleu_max_n)?, Some(bleu(&heuristic_order(doc), reference, cfg.eval.bleu_max_n)?))
                }
            };
            documents.push(DocScore { doc: i, n: doc.len(), score, heuristic });
        }
        tasks.push(TaskReport {
            task,
            metric: metric.into(),
            score: mean(documents.iter().map(|d| d.score)),
            heuristic: (task == DocKind::Paragraphs).then(|| mean(documents.iter().filter_map(|d| d.heuristic))),
            checkpoints: kinds.iter().map(|k| (*k, hashes[k].clone())).collect(),
            documents,
        });
    }
    Ok(EvalReport { config_hash: cfg.hash(), seed: cfg.seed, tasks })
}

/// Default output root: `$RELCON_OUT`, else `./runs`.
pub fn default_root() -> PathBuf {
    std::env::var_os("RELCON_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}
