//! Run configuration: a TOML file with sections `[corpus]`, `[model]`,
//! `[pretrain]`, `[finetune]` and `[eval]`, plus dotted-path overrides.
//!
//! ```toml
//! seed = 0
//!
//! [corpus]
//! tables = 300
//! train = 240          # per kind; validation takes the next `val`
//! val = 30
//!
//! [pretrain]
//! tasks = "mvlm+lrcm+grcm"
//! steps = 2000
//!
//! [finetune]
//! kinds = ["row", "col", "kv", "order"]
//! ```
//!
//! Every key is optional. Unknown keys, mistyped values and out-of-range
//! values are all reported together.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Value;

use crate::doc::{RelationKind, MAX_TOKENS_PER_ENTITY};
use crate::error::{Error, Result};
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::rcm::{ModelConfig, RcmConfig, TaskSet};
use crate::relhead::AggregatorInit;
use crate::synth::{CorpusSpec, GenOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub tables: usize,
    pub forms: usize,
    pub paragraphs: usize,
    pub table_rows: [usize; 2],
    pub table_cols: [usize; 2],
    pub form_pairs: [usize; 2],
    pub paragraph_sentences: [usize; 2],
    /// Upper bound on text tokens per entity.
    pub max_tokens: usize,
    /// Training documents per kind; the next `val` are held out for
    /// validation and the rest for testing.
    pub train: usize,
    pub val: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let s = CorpusSpec::default();
        Self {
            tables: s.tables,
            forms: s.forms,
            paragraphs: s.paragraphs,
            table_rows: s.table_rows,
            table_cols: s.table_cols,
            form_pairs: s.form_pairs,
            paragraph_sentences: s.paragraph_sentences,
            max_tokens: GenOptions::default().max_tokens,
            train: 240,
            val: 30,
        }
    }
}

impl CorpusConfig {
    pub fn spec(&self) -> CorpusSpec {
        CorpusSpec {
            tables: self.tables,
            forms: self.forms,
            paragraphs: self.paragraphs,
            table_rows: self.table_rows,
            table_cols: self.table_cols,
            form_pairs: self.form_pairs,
            paragraph_sentences: self.paragraph_sentences,
        }
    }

    pub fn gen_options(&self, model: &ModelConfig) -> GenOptions {
        GenOptions { patch_side: model.patch_side, max_tokens: self.max_tokens, max_seq_len: model.max_seq_len, n_cap: model.n_cap }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub tasks: TaskSet,
    pub steps: usize,
    pub batch: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub linear_decay: bool,
    pub tau_g: f64,
    pub tau_ema: f64,
    pub symmetric: bool,
    pub mask_rate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        let r = RcmConfig::default();
        Self {
            tasks: r.tasks,
            steps: 2000,
            batch: 4,
            optimizer: OptimizerKind::Sgd,
            lr: 0.05,
            linear_decay: true,
            tau_g: r.tau_g,
            tau_ema: r.tau_ema,
            symmetric: r.symmetric,
            mask_rate: r.mask_rate,
        }
    }
}

impl PretrainConfig {
    pub fn rcm(&self) -> RcmConfig {
        RcmConfig { tasks: self.tasks, tau_g: self.tau_g, tau_ema: self.tau_ema, symmetric: self.symmetric, mask_rate: self.mask_rate }
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig { kind: self.optimizer, lr: self.lr, linear_decay: self.linear_decay }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub kinds: Vec<RelationKind>,
    pub epochs: usize,
    pub batch: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub linear_decay: bool,
    pub aggregator_init: AggregatorInit,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            kinds: RelationKind::ALL.to_vec(),
            epochs: 50,
            batch: 8,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            linear_decay: true,
            aggregator_init: AggregatorInit::Pretrained,
        }
    }
}

impl FinetuneConfig {
    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig { kind: self.optimizer, lr: self.lr, linear_decay: self.linear_decay }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub threshold: f64,
    pub bleu_max_n: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { threshold: 0.5, bleu_max_n: 4 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

/// Compares `given` against the shape of the defaults, promoting integers
/// where floats are expected, and records every unknown key or type clash.
fn check_shape(path: &str, given: &mut Value, schema: &Value, errs: &mut Vec<String>) {
    match (given, schema) {
        (Value::Table(g), Value::Table(s)) => {
            g.retain(|k, v| {
                let p = if path.is_empty() { k.to_string() } else { format!("{path}.{k}") };
                match s.get(k) {
                    Some(sv) => check_shape(&p, v, sv, errs),
                    None => errs.push(format!("unknown key {p}")),
                }
                s.contains_key(k)
            });
        }
        (g @ Value::Integer(_), Value::Float(_)) => {
            if let Value::Integer(i) = *g {
                *g = Value::Float(i as f64);
            }
        }
        (Value::Array(g), Value::Array(s)) => {
            if let Some(first) = s.first() {
                for (i, v) in g.iter_mut().enumerate() {
                    check_shape(&format!("{path}[{i}]"), v, first, errs);
                }
            }
        }
        (g, s) if type_name(g) != type_name(s) => {
            errs.push(format!("{path}: expected {}, found {}", type_name(s), type_name(g)));
            *g = s.clone();
        }
        _ => {}
    }
}

/// Parses the right-hand side of an override as a TOML value, falling
/// back to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, path: &str, value: Value) -> std::result::Result<(), String> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("malformed override key {path:?}"));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let table = cur.as_table_mut().ok_or_else(|| format!("override {path}: {p} is not a section"))?;
        cur = table.entry(p.to_string()).or_insert_with(|| Value::Table(toml::Table::new()));
    }
    let table = cur.as_table_mut().ok_or_else(|| format!("override {path}: parent is not a section"))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl Config {
    /// Parses TOML text and applies `key.path=value` overrides.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Config> {
        let mut errs = Vec::new();
        let mut root = match toml::from_str::<toml::Table>(text) {
            Ok(t) => Value::Table(t),
            Err(e) => return Err(Error::Config(vec![format!("invalid TOML: {}", e.message())])),
        };
        for o in overrides {
            match o.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = set_path(&mut root, k.trim(), parse_value(v.trim())) {
                        errs.push(e);
                    }
                }
                None => errs.push(format!("override {o:?} is not of the form key=value")),
            }
        }
        let schema = Value::try_from(Config::default()).expect("defaults serialise");
        // Offending keys are dropped or reset to their defaults so that the
        // range checks on everything else still run.
        check_shape("", &mut root, &schema, &mut errs);
        match root.try_into::<Config>() {
            Ok(cfg) => {
                errs.extend(cfg.validate());
                if errs.is_empty() {
                    return Ok(cfg);
                }
            }
            Err(e) => errs.push(e.message().to_string()),
        }
        Err(Error::Config(errs))
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let c = &self.corpus;
        errs.extend(c.spec().validate());
        if c.max_tokens == 0 || c.max_tokens > MAX_TOKENS_PER_ENTITY {
            errs.push(format!("corpus.max_tokens = {} must lie in 1..={MAX_TOKENS_PER_ENTITY}", c.max_tokens));
        }
        errs.extend(self.model.validate());
        let gen = c.gen_options(&self.model);
        let largest =
            [("tables", c.table_rows[1] * c.table_cols[1]), ("forms", 2 * c.form_pairs[1]), ("paragraphs", c.paragraph_sentences[1])];
        for (what, n) in largest {
            if n > gen.n_cap || n * (gen.max_tokens + 2) > gen.max_seq_len {
                errs.push(format!(
                    "corpus: {what} of up to {n} entities exceed model.n_cap = {} or model.max_seq_len = {}",
                    gen.n_cap, gen.max_seq_len
                ));
            }
        }
        let p = &self.pretrain;
        errs.extend(p.rcm().validate("pretrain"));
        errs.extend(p.optimizer().validate("pretrain"));
        if p.batch == 0 {
            errs.push("pretrain.batch must be positive".into());
        }
        let f = &self.finetune;
        errs.extend(f.optimizer().validate("finetune"));
        if f.batch == 0 {
            errs.push("finetune.batch must be positive".into());
        }
        if f.epochs == 0 {
            errs.push("finetune.epochs must be positive".into());
        }
        let mut kinds = f.kinds.clone();
        kinds.sort();
        kinds.dedup();
        if kinds.len() != f.kinds.len() {
            errs.push("finetune.kinds lists a kind twice".into());
        }
        let e = &self.eval;
        if !(e.threshold > 0.0 && e.threshold < 1.0) {
            errs.push(format!("eval.threshold = {} must lie in (0, 1)", e.threshold));
        }
        if e.bleu_max_n == 0 {
            errs.push("eval.bleu_max_n must be positive".into());
        }
        errs
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hash_json(self)
    }
}

pub fn hash_json<T: Serialize>(v: &T) -> String {
    let bytes = serde_json::to_vec(v).expect("serialisable");
    hex::encode(Sha256::digest(bytes))
}
