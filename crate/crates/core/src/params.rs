//! Named parameter sets, their binding onto a [`Graph`], and the checkpoint
//! container.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! b"RELTENS1"                 8-byte magic
//! u64                         manifest length L
//! L bytes                     UTF-8 JSON manifest {tag, meta, tensors:[{name, shape, offset}]}
//! f64 × Σ numel               raw tensor data in manifest order; offset counts f64s
//! ```

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub type GradMap = BTreeMap<String, Tensor>;

const MAGIC: &[u8; 8] = b"RELTENS1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    /// Uniform init in `[-bound, bound]`.
    pub fn insert_uniform(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut SplitMix64) {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
        self.insert(name, Tensor::from_parts(shape.to_vec(), data));
    }

    /// Weight `[fan_in, fan_out]` with Glorot-uniform init and a zero bias row.
    pub fn insert_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut SplitMix64) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.insert_uniform(&format!("{prefix}.w"), &[fan_in, fan_out], bound, rng);
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[1, fan_out]));
    }

    pub fn insert_zero_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.insert(format!("{prefix}.w"), Tensor::zeros(&[fan_in, fan_out]));
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[1, fan_out]));
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Parameters whose name starts with one of `prefixes`.
    pub fn subset(&self, prefixes: &[&str]) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Overwrites every tensor of `other` into `self` (shapes must agree when
    /// the name already exists).
    pub fn merge_from(&mut self, other: &ParamStore) -> Result<()> {
        for (k, v) in &other.tensors {
            if let Some(cur) = self.tensors.get(k) {
                if cur.shape() != v.shape() {
                    return Err(Error::State(format!("{k}: shape {:?} vs {:?}", cur.shape(), v.shape())));
                }
            }
            self.tensors.insert(k.clone(), v.clone());
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// SHA-256 over names, shapes and the raw little-endian data.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.tensors {
            h.update(k.as_bytes());
            for s in v.shape() {
                h.update((*s as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_bytes(&self, tag: &str, meta: &BTreeMap<String, String>) -> Vec<u8> {
        let mut offset = 0;
        let entries: Vec<ManifestEntry> = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let e = ManifestEntry { name: k.clone(), shape: v.shape().to_vec(), offset };
                offset += v.len();
                e
            })
            .collect();
        let manifest = Manifest { tag: tag.to_string(), meta: meta.clone(), tensors: entries };
        let json = serde_json::to_vec(&manifest).expect("manifest serialises");
        let mut out = Vec::with_capacity(16 + json.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.tensors.values() {
            for x in v.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<(ParamStore, Manifest), String> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err("bad magic".into());
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + mlen).ok_or("truncated manifest")?;
        let manifest: Manifest = serde_json::from_slice(body).map_err(|e| e.to_string())?;
        let data = &bytes[16 + mlen..];
        let mut store = ParamStore::new();
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset * 8;
            let raw = data.get(start..start + n * 8).ok_or_else(|| format!("tensor {} truncated", e.name))?;
            let vals = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(e.shape.clone(), vals).map_err(|err| err.to_string())?;
            store.insert(e.name.clone(), t);
        }
        Ok((store, manifest))
    }

    pub fn save(&self, path: &Path, tag: &str, meta: &BTreeMap<String, String>) -> Result<()> {
        fs::write(path, self.to_bytes(tag, meta)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(ParamStore, Manifest)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        ParamStore::from_bytes(&bytes).map_err(|message| Error::Checkpoint { path: path.to_path_buf(), message })
    }

    /// `self ← self − lr·grad` for every gradient present.
    pub fn sgd_update(&mut self, grads: &GradMap, lr: f64) {
        for (k, g) in grads {
            if let Some(p) = self.tensors.get_mut(k) {
                for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * d;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tag: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// Lazily places the tensors of a [`ParamStore`] on a graph as leaves.
pub struct Binder<'a> {
    graph: &'a Graph,
    store: &'a ParamStore,
    trainable: bool,
    vars: RefCell<BTreeMap<String, Var>>,
}

impl<'a> Binder<'a> {
    pub fn new(graph: &'a Graph, store: &'a ParamStore, trainable: bool) -> Self {
        Self { graph, store, trainable, vars: RefCell::new(BTreeMap::new()) }
    }

    pub fn graph(&self) -> &'a Graph {
        self.graph
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(*v);
        }
        let t = self.store.get(name).ok_or_else(|| Error::State(format!("missing parameter {name}")))?.clone();
        let v = if self.trainable { self.graph.param(t) } else { self.graph.constant(t) };
        self.vars.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// `x·W + b` with `{prefix}.w` and `{prefix}.b`.
    pub fn linear(&self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.get(&format!("{prefix}.w"))?;
        let b = self.get(&format!("{prefix}.b"))?;
        let xw = self.graph.matmul(x, w)?;
        self.graph.add_row(xw, b)
    }

    /// Two linear layers with a GELU in between.
    pub fn mlp(&self, prefix: &str, x: Var) -> Result<Var> {
        let h = self.linear(&format!("{prefix}.fc1"), x)?;
        let h = self.graph.gelu(h);
        self.linear(&format!("{prefix}.fc2"), h)
    }

    /// Gradients of every bound parameter after a backward pass; parameters
    /// the pass did not reach get explicit zeros.
    pub fn grads(&self) -> GradMap {
        self.vars
            .borrow()
            .iter()
            .map(|(k, v)| {
                let g = self.graph.grad(*v).unwrap_or_else(|| Tensor::zeros(self.graph.value(*v).shape()));
                (k.clone(), g)
            })
            .collect()
    }
}

pub fn grad_norm(grads: &GradMap) -> f64 {
    grads.values().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

/// Adds `src` into `dst`, scaling `src` by `scale`.
pub fn accumulate(dst: &mut GradMap, src: &GradMap, scale: f64) {
    for (k, g) in src {
        match dst.get_mut(k) {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += scale * b;
                }
            }
            None => {
                let mut t = g.clone();
                t.scale_assign(scale);
                dst.insert(k.clone(), t);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = SplitMix64::new(5);
        let mut s = ParamStore::new();
        s.insert_linear("enc.a", 3, 4, &mut rng);
        s.insert("x", Tensor::new(vec![2], vec![f64::MIN_POSITIVE, -1.0 / 3.0]).unwrap());
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "row".to_string());
        let bytes = s.to_bytes("online", &meta);
        let (back, manifest) = ParamStore::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(manifest.tag, "online");
        assert_eq!(manifest.meta["kind"], "row");
        assert_eq!(back.content_hash(), s.content_hash());
        assert_eq!(back.to_bytes("online", &meta), bytes);
    }

    #[test]
    fn corrupt_checkpoint_rejected() {
        assert!(ParamStore::from_bytes(b"nonsense").is_err());
        let s = ParamStore::new();
        let mut bytes = s.to_bytes("t", &BTreeMap::new());
        bytes[0] = b'X';
        assert!(ParamStore::from_bytes(&bytes).is_err());
    }

    #[test]
    fn binder_reports_zero_for_unreached() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::ones(&[1, 2]));
        s.insert("b", Tensor::ones(&[1, 2]));
        let g = Graph::new();
        let bind = Binder::new(&g, &s, true);
        let a = bind.get("a").unwrap();
        let _b = bind.get("b").unwrap();
        let l = g.sum(a);
        g.backward(l).unwrap();
        let grads = bind.grads();
        assert_eq!(grads["a"].data(), &[1.0, 1.0]);
        assert_eq!(grads["b"].data(), &[0.0, 0.0]);
        assert!(bind.get("missing").is_err());
    }
}
