//! Central finite-difference checks of analytic parameter gradients.

use crate::params::{GradMap, ParamStore};
use crate::rng::SplitMix64;

pub const STEP: f64 = 1e-5;

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖, 1e-12)` for one tensor.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}

/// Numeric gradient of `loss` with respect to every scalar of `names`
/// (all tensors when `names` is empty).
pub fn numeric_grads(store: &ParamStore, names: &[String], loss: impl Fn(&ParamStore) -> f64) -> GradMap {
    let names: Vec<String> = if names.is_empty() { store.names().map(str::to_string).collect() } else { names.to_vec() };
    let mut work = store.clone();
    let mut out = GradMap::new();
    for name in names {
        let len = work.get(&name).map_or(0, |t| t.len());
        let mut g = vec![0.0; len];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = work.get(&name).unwrap().data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + STEP;
            let up = loss(&work);
            work.get_mut(&name).unwrap().data_mut()[i] = orig - STEP;
            let down = loss(&work);
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            *gi = (up - down) / (2.0 * STEP);
        }
        let shape = store.get(&name).unwrap().shape().to_vec();
        out.insert(name, crate::tensor::Tensor::new(shape, g).expect("shape of an existing tensor"));
    }
    out
}

/// Per-tensor relative errors between `analytic` and finite differences
/// of `loss`. Tensors absent from `analytic` are compared against zero.
pub fn compare(store: &ParamStore, analytic: &GradMap, loss: impl Fn(&ParamStore) -> f64) -> Vec<(String, f64)> {
    let numeric = numeric_grads(store, &[], loss);
    numeric
        .iter()
        .map(|(name, n)| {
            let a = analytic.get(name).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n.len()]);
            (name.clone(), relative_error(&a, n.data()))
        })
        .collect()
}

/// Largest entry of [`compare`].
pub fn worst(errors: &[(String, f64)]) -> (String, f64) {
    errors.iter().cloned().fold((String::new(), 0.0), |acc, e| if e.1 > acc.1 { e } else { acc })
}

/// Element indices checked for a tensor of `len` scalars: all of them up to
/// `2·k`, otherwise the `k` largest analytic magnitudes plus `k` others
/// drawn uniformly.
pub fn sample_indices(analytic: &[f64], len: usize, k: usize, rng: &mut SplitMix64) -> Vec<usize> {
    if len <= 2 * k {
        return (0..len).collect();
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by(|&a, &b| {
        let ga = analytic.get(a).map_or(0.0, |v| v.abs());
        let gb = analytic.get(b).map_or(0.0, |v| v.abs());
        gb.total_cmp(&ga).then(a.cmp(&b))
    });
    let (top, rest) = order.split_at_mut(k);
    rng.shuffle(rest);
    let mut picked: Vec<usize> = top.iter().chain(rest[..k].iter()).copied().collect();
    picked.sort_unstable();
    picked
}

/// [`compare`] restricted to the tensors in `names` (all when empty) and to
/// [`sample_indices`] within each tensor.
pub fn compare_sampled(
    store: &ParamStore,
    analytic: &GradMap,
    names: &[String],
    k: usize,
    seed: u64,
    loss: impl Fn(&ParamStore) -> f64,
) -> Vec<(String, f64)> {
    let names: Vec<String> = if names.is_empty() { store.names().map(str::to_string).collect() } else { names.to_vec() };
    let mut work = store.clone();
    let mut out = Vec::with_capacity(names.len());
    for (t, name) in names.iter().enumerate() {
        let Some(len) = work.get(name).map(|x| x.len()) else { continue };
        let a_full = analytic.get(name).map(|x| x.data().to_vec()).unwrap_or_else(|| vec![0.0; len]);
        let idx = sample_indices(&a_full, len, k, &mut SplitMix64::derive(seed, name, t as u64));
        let mut a = Vec::with_capacity(idx.len());
        let mut n = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = work.get(name).unwrap().data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + STEP;
            let up = loss(&work);
            work.get_mut(name).unwrap().data_mut()[i] = orig - STEP;
            let down = loss(&work);
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            a.push(a_full[i]);
            n.push((up - down) / (2.0 * STEP));
        }
        out.push((name.clone(), relative_error(&a, &n)));
    }
    out
}
