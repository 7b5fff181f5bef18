//! Independent oracles shared by the test targets.
#![allow(dead_code)]

use relcon::doc::{RelationKind, RelationMatrix};
use relcon::params::ParamStore;
use relcon::rng::SplitMix64;
use relcon::tensor::Tensor;

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

pub fn partitions(n: usize) -> Vec<Vec<Vec<usize>>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in partitions(n - 1) {
        for g in 0..p.len() {
            let mut q = p.clone();
            q[g].push(n - 1);
            out.push(q);
        }
        let mut q = p.clone();
        q.push(vec![n - 1]);
        out.push(q);
    }
    out
}

/// Link sets with at most one value per key and one key per value.
pub fn matchings(n: usize) -> Vec<Vec<(usize, usize)>> {
    fn go(i: usize, n: usize, used: &mut Vec<bool>, cur: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
        if i == n {
            out.push(cur.clone());
            return;
        }
        go(i + 1, n, used, cur, out);
        for j in 0..n {
            if j != i && !used[j] {
                used[j] = true;
                cur.push((i, j));
                go(i + 1, n, used, cur, out);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(0, n, &mut vec![false; n], &mut Vec::new(), &mut out);
    out
}

pub fn order_matrix(order: &[usize]) -> RelationMatrix {
    let mut rank = vec![0; order.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    RelationMatrix::from_fn(RelationKind::Order, order.len(), |i, j| rank[i] < rank[j])
}

/// Clipped n-gram matches by marking reference positions as used.
pub fn bleu_oracle(pred: &[usize], reference: &[usize], max_n: usize) -> f64 {
    let order = max_n.min(pred.len()).min(reference.len());
    let mut logp = 0.0;
    for n in 1..=order {
        let mut used = vec![false; reference.len() + 1 - n];
        let mut matched = 0;
        for i in 0..=pred.len() - n {
            if let Some(k) = (0..used.len()).find(|&k| !used[k] && reference[k..k + n] == pred[i..i + n]) {
                used[k] = true;
                matched += 1;
            }
        }
        if matched == 0 {
            return 0.0;
        }
        logp += (matched as f64 / (pred.len() - n + 1) as f64).ln() / order as f64;
    }
    let bp = if pred.len() > reference.len() { 1.0 } else { (1.0 - reference.len() as f64 / pred.len() as f64).exp() };
    bp * logp.exp()
}

/// Repeatedly accepts the highest-scoring positive link compatible with
/// those already accepted.
pub fn greedy_oracle(rel: &RelationMatrix) -> Vec<(usize, usize)> {
    let mut taken: Vec<(usize, usize)> = Vec::new();
    loop {
        let mut best: Option<(usize, usize)> = None;
        for i in 0..rel.n {
            for j in 0..rel.n {
                if i == j || !rel.decision(i, j) || taken.iter().any(|&(k, v)| k == i || v == j) {
                    continue;
                }
                if best.is_none_or(|(a, b)| rel.score(i, j) > rel.score(a, b)) {
                    best = Some((i, j));
                }
            }
        }
        match best {
            Some(l) => taken.push(l),
            None => break,
        }
    }
    taken.sort_unstable();
    taken
}

/// Moves every tensor away from its initial value so that online and target
/// differ and the zero-initialised layers carry signal.
pub fn perturb(store: &mut ParamStore, scale: f64, seed: u64) {
    let mut rng = SplitMix64::new(seed);
    for (_, t) in store.iter_mut() {
        for x in t.data_mut() {
            *x += rng.uniform(-scale, scale);
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn dense(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    (0..w.cols()).map(|o| b.data()[o] + x.iter().enumerate().map(|(i, xi)| xi * w.get(i, o)).sum::<f64>()).collect()
}

pub fn mlp_oracle(store: &ParamStore, p: &str, x: &[f64]) -> Vec<f64> {
    let t = |n: &str| store.get(&format!("{p}.{n}")).unwrap();
    let h: Vec<f64> = dense(x, t("fc1.w"), t("fc1.b")).into_iter().map(gelu).collect();
    dense(&h, t("fc2.w"), t("fc2.b"))
}

pub fn softmax_oracle(m: &Tensor, tau: f64, valid: &[bool]) -> Vec<Vec<f64>> {
    let n = m.rows();
    (0..n)
        .map(|i| {
            if !valid[i] {
                return vec![0.0; n];
            }
            let dot = |j: usize| m.row(i).iter().zip(m.row(j)).map(|(a, b)| a * b).sum::<f64>() / tau;
            let mx = (0..n).filter(|&j| valid[j]).map(dot).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = (0..n).map(|j| if valid[j] { (dot(j) - mx).exp() } else { 0.0 }).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|x| x / z).collect()
        })
        .collect()
}
