//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a dynamic tape: every operation appends a node holding its
//! forward value and enough context to run its backward rule. Graphs are
//! rebuilt for every training step and are confined to one thread.
//!
//! ```
//! use relcon::graph::Graph;
//! use relcon::tensor::Tensor;
//!
//! let g = Graph::new();
//! let x = g.param(Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0]);
//! ```
//!
//! Leaf gradients accumulate across repeated [`Graph::backward`] calls until
//! [`Graph::zero_grad`] is called.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Layout, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Rc<Tensor>),
    Gelu(Var),
    Sigmoid(Var),
    Softmax { x: Var, inv_temp: f64 },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor, inv_std: Vec<f64> },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    PadCols(Var),
    PairSum(Var, Var),
    Sum(Var),
    Mean(Var),
    MaskedMse { pred: Var, target: Var, mask: Rc<Tensor>, denom: f64 },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor },
    BceLogits { logits: Var, targets: Vec<f64>, weights: Vec<f64>, denom: f64 },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    leaf_grads: RefCell<Vec<Option<Tensor>>>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn rg_any(&self, vs: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vs.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.leaf_grads.borrow().get(v.0).cloned().flatten()
    }

    pub fn zero_grad(&self) {
        self.leaf_grads.borrow_mut().clear();
    }

    fn mat(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if !t.is_matrix() {
            return Err(Error::dim(op, format!("expected a matrix, got {:?}", t.shape())));
        }
        Ok((t.rows(), t.cols()))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul")?;
        let (k2, n) = self.mat(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), Layout::N, self.value(b).data(), Layout::N, &mut out, 0.0);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), self.rg_any(&[a, b])))
    }

    /// `a × bᵀ`.
    pub fn matmul_t(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul_t")?;
        let (n, k2) = self.mat(b, "matmul_t")?;
        if k != k2 {
            return Err(Error::dim("matmul_t", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), Layout::N, self.value(b).data(), Layout::T, &mut out, 0.0);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulT(a, b), self.rg_any(&[a, b])))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(&self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), self.rg_any(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(&self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), self.rg_any(&[a, b])))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(&self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), self.rg_any(&[a, b])))
    }

    /// Adds a `[1, n]` row to every row of an `[m, n]` matrix.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.mat(a, "add_row")?;
        let r = self.value(row);
        if r.len() != n {
            return Err(Error::dim("add_row", format!("[{m},{n}] + {:?}", r.shape())));
        }
        let mut v = (*self.value(a)).clone();
        for chunk in v.data_mut().chunks_mut(n) {
            for (x, b) in chunk.iter_mut().zip(r.data()) {
                *x += b;
            }
        }
        Ok(self.push(v, Op::AddRow(a, row), self.rg_any(&[a, row])))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// Elementwise product with a constant tensor (e.g. a 0/1 mask).
    pub fn mul_const(&self, a: Var, c: Tensor) -> Result<Var> {
        let v = self.value(a);
        if v.shape() != c.shape() {
            return Err(Error::dim("mul_const", format!("{:?} vs {:?}", v.shape(), c.shape())));
        }
        let out = v.zip_map(&c, |x, m| if m == 0.0 { 0.0 } else { x * m });
        let rg = self.rg(a);
        Ok(self.push(out, Op::MulConst(a, Rc::new(c)), rg))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        let v = self.value(a).map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()));
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    /// Row-wise softmax of `x / temperature`.
    pub fn softmax_rows(&self, x: Var, temperature: f64) -> Result<Var> {
        self.softmax_rows_masked(x, temperature, None)
    }

    /// Row-wise softmax restricted to the columns where `col_mask` is true.
    /// Masked columns receive exactly zero probability and zero gradient.
    pub fn softmax_rows_masked(&self, x: Var, temperature: f64, col_mask: Option<&[bool]>) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Parameter(format!("softmax temperature must be > 0, got {temperature}")));
        }
        let (m, n) = self.mat(x, "softmax_rows")?;
        if let Some(mask) = col_mask {
            if mask.len() != n {
                return Err(Error::dim("softmax_rows", format!("mask of {} for {n} columns", mask.len())));
            }
            if !mask.iter().any(|&b| b) {
                return Err(Error::Degenerate("softmax over zero valid columns".into()));
            }
        }
        let inv_temp = 1.0 / temperature;
        let xv = self.value(x);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = xv.row(r);
            let keep = |j: usize| col_mask.is_none_or(|mk| mk[j]);
            let mx = (0..n).filter(|&j| keep(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[r * n..(r + 1) * n];
            let mut z = 0.0;
            for j in 0..n {
                if keep(j) {
                    o[j] = ((row[j] - mx) * inv_temp).exp();
                    z += o[j];
                }
            }
            o.iter_mut().for_each(|p| *p /= z);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::Softmax { x, inv_temp }, rg))
    }

    /// Layer normalisation over each row with `[1, n]` gain and bias.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.mat(x, "layer_norm")?;
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.len() != n || bv.len() != n {
            return Err(Error::dim("layer_norm", format!("gain/bias width vs {n}")));
        }
        let xv = self.value(x);
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = Vec::with_capacity(m);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let rg = self.rg_any(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::LayerNorm { x, gain, bias, xhat: Tensor::from_parts(vec![m, n], xhat), inv_std },
            rg,
        ))
    }

    /// Selects rows `idx` (repeats allowed), e.g. an embedding lookup.
    pub fn gather_rows(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.mat(x, "gather_rows")?;
        if idx.is_empty() {
            return Err(Error::dim("gather_rows", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::dim("gather_rows", format!("row {bad} out of {m}")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(xv.row(i));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![idx.len(), n], out), Op::GatherRows { x, idx: idx.to_vec() }, rg))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        let n = self.mat(first, "concat_rows")?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (m, c) = self.mat(p, "concat_rows")?;
            if c != n {
                return Err(Error::dim("concat_rows", format!("width {c} vs {n}")));
            }
            rows += m;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg_any(parts);
        Ok(self.push(Tensor::from_parts(vec![rows, n], out), Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        let m = self.mat(first, "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.mat(p, "concat_cols")?;
            if r != m {
                return Err(Error::dim("concat_cols", format!("height {r} vs {m}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for v in &vals {
                out.extend_from_slice(v.row(r));
            }
        }
        let rg = self.rg_any(parts);
        Ok(self.push(Tensor::from_parts(vec![m, total], out), Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.mat(x, "slice_cols")?;
        if width == 0 || start + width > n {
            return Err(Error::dim("slice_cols", format!("{start}..{} of {n}", start + width)));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m * width);
        for r in 0..m {
            out.extend_from_slice(&xv.row(r)[start..start + width]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![m, width], out), Op::SliceCols { x, start }, rg))
    }

    /// Right-pads every row with zeros up to `width` columns.
    pub fn pad_cols(&self, x: Var, width: usize) -> Result<Var> {
        let (m, n) = self.mat(x, "pad_cols")?;
        if width < n {
            return Err(Error::dim("pad_cols", format!("cannot pad {n} columns to {width}")));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; m * width];
        for r in 0..m {
            out[r * width..r * width + n].copy_from_slice(xv.row(r));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![m, width], out), Op::PadCols(x), rg))
    }

    /// For `a: [p, h]` and `b: [q, h]`, row `i·q + j` of the `[p·q, h]` result
    /// is `a[i] + b[j]`.
    pub fn pair_sum(&self, a: Var, b: Var) -> Result<Var> {
        let (p, h) = self.mat(a, "pair_sum")?;
        let (q, h2) = self.mat(b, "pair_sum")?;
        if h != h2 {
            return Err(Error::dim("pair_sum", format!("width {h} vs {h2}")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(p * q * h);
        for i in 0..p {
            let ai = av.row(i);
            for j in 0..q {
                out.extend(ai.iter().zip(bv.row(j)).map(|(x, y)| x + y));
            }
        }
        let rg = self.rg_any(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![p * q, h], out), Op::PairSum(a, b), rg))
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / v.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Value and gradient pass through `x` in the forward direction only; the
    /// backward pass sends exactly zero through this node.
    pub fn stop_gradient(&self, x: Var) -> Var {
        let v = self.value(x);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: v, op: Op::Leaf, requires_grad: false });
        Var(nodes.len() - 1)
    }

    /// `Σ mask⊙(pred − target)² / (unmasked rows × row width)`.
    ///
    /// Entries where the mask is zero are skipped outright, so whatever they
    /// hold never reaches the value or the gradient.
    pub fn masked_mse(&self, pred: Var, target: Var, mask: &Tensor) -> Result<Var> {
        self.same_shape(pred, target, "masked_mse")?;
        let (m, n) = self.mat(pred, "masked_mse")?;
        if mask.shape() != [m, n] {
            return Err(Error::dim("masked_mse", format!("mask {:?} vs [{m},{n}]", mask.shape())));
        }
        if mask.data().iter().any(|&x| x != 0.0 && x != 1.0) {
            return Err(Error::Parameter("mask entries must be 0 or 1".into()));
        }
        let rows = (0..m).filter(|&r| mask.row(r).iter().any(|&x| x != 0.0)).count();
        if rows == 0 {
            return Err(Error::Degenerate("masked_mse with an all-zero mask".into()));
        }
        let denom = (rows * n) as f64;
        let (pv, tv) = (self.value(pred), self.value(target));
        let mut s = 0.0;
        for ((&p, &t), &w) in pv.data().iter().zip(tv.data()).zip(mask.data()) {
            if w != 0.0 {
                s += (p - t) * (p - t);
            }
        }
        let rg = self.rg_any(&[pred, target]);
        Ok(self.push(Tensor::scalar(s / denom), Op::MaskedMse { pred, target, mask: Rc::new(mask.clone()), denom }, rg))
    }

    /// Mean cross-entropy of row-wise softmax(`logits`) against class ids.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.mat(logits, "cross_entropy")?;
        if targets.len() != m {
            return Err(Error::dim("cross_entropy", format!("{} targets for {m} rows", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::dim("cross_entropy", format!("class {t} of {n}")));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; m * n];
        let mut loss = 0.0;
        for r in 0..m {
            let row = lv.row(r);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            for j in 0..n {
                probs[r * n + j] = (row[j] - mx).exp() / z;
            }
            loss += z.ln() + mx - row[targets[r]];
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / m as f64),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs: Tensor::from_parts(vec![m, n], probs) },
            rg,
        ))
    }

    /// Weighted binary cross-entropy on logits:
    /// `Σ wᵢ·(softplus(zᵢ) − yᵢ·zᵢ) / count`.
    pub fn bce_with_logits(&self, logits: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        if targets.len() != lv.len() || weights.len() != lv.len() {
            return Err(Error::dim("bce_with_logits", "targets/weights length"));
        }
        let mut s = 0.0;
        for ((&z, &y), &w) in lv.data().iter().zip(targets).zip(weights) {
            s += w * (softplus(z) - y * z);
        }
        let denom = lv.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(s / denom), Op::BceLogits { logits, targets: targets.to_vec(), weights: weights.to_vec(), denom }, rg))
    }

    /// Reverse pass from a scalar `loss`; gradients accumulate on leaves.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        if !nodes[loss.0].value.is_scalar() {
            return Err(Error::dim("backward", format!("loss must be scalar, got {:?}", nodes[loss.0].value.shape())));
        }
        let mut adj: Vec<Option<Tensor>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape()));
        let mut leaf_grads = self.leaf_grads.borrow_mut();
        if leaf_grads.len() < nodes.len() {
            leaf_grads.resize_with(nodes.len(), || None);
        }

        for i in (0..=loss.0).rev() {
            let Some(gout) = adj[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let val = |v: Var| Rc::clone(&nodes[v.0].value);
            let mut send = |v: Var, g: Tensor| {
                if nodes[v.0].requires_grad {
                    match &mut adj[v.0] {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
            };
            match &node.op {
                Op::Leaf => match &mut leaf_grads[i] {
                    Some(acc) => acc.add_assign(&gout),
                    slot => *slot = Some(gout),
                },
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gout.data(), Layout::N, bv.data(), Layout::T, &mut da, 0.0);
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), Layout::T, gout.data(), Layout::N, &mut db, 0.0);
                    send(*a, Tensor::from_parts(vec![m, k], da));
                    send(*b, Tensor::from_parts(vec![k, n], db));
                }
                Op::MatMulT(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gout.data(), Layout::N, bv.data(), Layout::N, &mut da, 0.0);
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, gout.data(), Layout::T, av.data(), Layout::N, &mut db, 0.0);
                    send(*a, Tensor::from_parts(vec![m, k], da));
                    send(*b, Tensor::from_parts(vec![n, k], db));
                }
                Op::Add(a, b) => {
                    send(*a, gout.clone());
                    send(*b, gout);
                }
                Op::Sub(a, b) => {
                    send(*b, gout.map(|x| -x));
                    send(*a, gout);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    send(*a, gout.zip_map(&bv, |g, y| g * y));
                    send(*b, gout.zip_map(&av, |g, x| g * x));
                }
                Op::AddRow(a, row) => {
                    let rv = val(*row);
                    let n = gout.cols();
                    let mut dr = vec![0.0; n];
                    for chunk in gout.data().chunks(n) {
                        for (d, g) in dr.iter_mut().zip(chunk) {
                            *d += g;
                        }
                    }
                    send(*row, Tensor::from_parts(rv.shape().to_vec(), dr));
                    send(*a, gout);
                }
                Op::Scale(a, s) => send(*a, gout.map(|g| g * s)),
                Op::MulConst(a, c) => send(*a, gout.zip_map(c, |g, m| if m == 0.0 { 0.0 } else { g * m })),
                Op::Gelu(a) => {
                    let av = val(*a);
                    send(*a, gout.zip_map(&av, |g, x| g * gelu_grad(x)));
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    send(*a, gout.zip_map(y, |g, s| g * s * (1.0 - s)));
                }
                Op::Softmax { x, inv_temp } => {
                    let y = &node.value;
                    let n = y.cols();
                    let mut dx = vec![0.0; y.len()];
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), gout.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dx[r * n + j] = yr[j] * (gr[j] - dot) * inv_temp;
                        }
                    }
                    send(*x, Tensor::from_parts(y.shape().to_vec(), dx));
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let gv = val(*gain);
                    let (m, n) = (xhat.rows(), xhat.cols());
                    let mut dgain = vec![0.0; n];
                    let mut dbias = vec![0.0; n];
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        let (gr, hr) = (gout.row(r), xhat.row(r));
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..n {
                            dgain[j] += gr[j] * hr[j];
                            dbias[j] += gr[j];
                            let dh = gr[j] * gv.data()[j];
                            mean_d += dh;
                            mean_dh += dh * hr[j];
                        }
                        mean_d /= n as f64;
                        mean_dh /= n as f64;
                        for j in 0..n {
                            let dh = gr[j] * gv.data()[j];
                            dx[r * n + j] = inv_std[r] * (dh - mean_d - hr[j] * mean_dh);
                        }
                    }
                    send(*gain, Tensor::from_parts(gv.shape().to_vec(), dgain));
                    send(*bias, Tensor::from_parts(val(*bias).shape().to_vec(), dbias));
                    send(*x, Tensor::from_parts(vec![m, n], dx));
                }
                Op::GatherRows { x, idx } => {
                    let xv = val(*x);
                    let n = xv.cols();
                    let mut dx = Tensor::zeros(xv.shape());
                    for (r, &i) in idx.iter().enumerate() {
                        let dst = &mut dx.data_mut()[i * n..(i + 1) * n];
                        for (d, g) in dst.iter_mut().zip(gout.row(r)) {
                            *d += g;
                        }
                    }
                    send(*x, dx);
                }
                Op::ConcatRows(parts) => {
                    let n = gout.cols();
                    let mut off = 0;
                    for &p in parts {
                        let m = nodes[p.0].value.rows();
                        let chunk = gout.data()[off * n..(off + m) * n].to_vec();
                        send(p, Tensor::from_parts(vec![m, n], chunk));
                        off += m;
                    }
                }
                Op::ConcatCols(parts) => {
                    let m = gout.rows();
                    let mut off = 0;
                    for &p in parts {
                        let w = nodes[p.0].value.cols();
                        let mut chunk = Vec::with_capacity(m * w);
                        for r in 0..m {
                            chunk.extend_from_slice(&gout.row(r)[off..off + w]);
                        }
                        send(p, Tensor::from_parts(vec![m, w], chunk));
                        off += w;
                    }
                }
                Op::SliceCols { x, start } => {
                    let xv = val(*x);
                    let (n, w) = (xv.cols(), gout.cols());
                    let mut dx = Tensor::zeros(xv.shape());
                    for r in 0..gout.rows() {
                        dx.data_mut()[r * n + start..r * n + start + w].copy_from_slice(gout.row(r));
                    }
                    send(*x, dx);
                }
                Op::PadCols(x) => {
                    let xv = val(*x);
                    let n = xv.cols();
                    let mut dx = Vec::with_capacity(xv.len());
                    for r in 0..gout.rows() {
                        dx.extend_from_slice(&gout.row(r)[..n]);
                    }
                    send(*x, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
                Op::PairSum(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (p, q, h) = (av.rows(), bv.rows(), av.cols());
                    let mut da = vec![0.0; p * h];
                    let mut db = vec![0.0; q * h];
                    for i in 0..p {
                        for j in 0..q {
                            let g = gout.row(i * q + j);
                            for k in 0..h {
                                da[i * h + k] += g[k];
                                db[j * h + k] += g[k];
                            }
                        }
                    }
                    send(*a, Tensor::from_parts(vec![p, h], da));
                    send(*b, Tensor::from_parts(vec![q, h], db));
                }
                Op::Sum(x) => {
                    let shape = nodes[x.0].value.shape().to_vec();
                    send(*x, Tensor::full(&shape, gout.item()));
                }
                Op::Mean(x) => {
                    let xv = val(*x);
                    send(*x, Tensor::full(xv.shape(), gout.item() / xv.len() as f64));
                }
                Op::MaskedMse { pred, target, mask, denom } => {
                    let (pv, tv) = (val(*pred), val(*target));
                    let s = 2.0 * gout.item() / denom;
                    let d: Vec<f64> = pv
                        .data()
                        .iter()
                        .zip(tv.data())
                        .zip(mask.data())
                        .map(|((&p, &t), &w)| if w != 0.0 { s * (p - t) } else { 0.0 })
                        .collect();
                    let dp = Tensor::from_parts(pv.shape().to_vec(), d);
                    send(*target, dp.map(|x| -x));
                    send(*pred, dp);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let (m, n) = (probs.rows(), probs.cols());
                    let s = gout.item() / m as f64;
                    let mut d = probs.data().to_vec();
                    for (r, &t) in targets.iter().enumerate() {
                        d[r * n + t] -= 1.0;
                    }
                    d.iter_mut().for_each(|x| *x *= s);
                    send(*logits, Tensor::from_parts(vec![m, n], d));
                }
                Op::BceLogits { logits, targets, weights, denom } => {
                    let lv = val(*logits);
                    let s = gout.item() / denom;
                    let d: Vec<f64> = lv.data().iter().zip(targets).zip(weights).map(|((&z, &y), &w)| s * w * (sigmoid(z) - y)).collect();
                    send(*logits, Tensor::from_parts(lv.shape().to_vec(), d));
                }
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn rand_tensor(rng: &mut SplitMix64, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    /// Central differences of `f` at `x`, step `1e-5`.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-5;
        let mut out = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        let diff = a.zip_map(b, |x, y| x - y).norm();
        diff / a.norm().max(b.norm()).max(1e-12)
    }

    /// Checks d(loss)/d(input) for a unary graph builder.
    fn check_unary(shape: &[usize], seed: u64, build: impl Fn(&Graph, Var) -> Var) {
        let mut rng = SplitMix64::new(seed);
        let x = rand_tensor(&mut rng, shape);
        let g = Graph::new();
        let v = g.param(x.clone());
        let loss = build(&g, v);
        g.backward(loss).unwrap();
        let analytic = g.grad(v).unwrap();
        let numeric = numeric_grad(&x, |xx| {
            let g = Graph::new();
            let v = g.param(xx.clone());
            g.value(build(&g, v)).item()
        });
        let e = rel_err(&analytic, &numeric);
        assert!(e < 1e-6, "rel err {e}");
    }

    /// Weighted sum so every output element carries a distinct cotangent.
    fn weighted_sum(g: &Graph, y: Var, seed: u64) -> Var {
        let shape = g.shape(y);
        let mut rng = SplitMix64::new(seed ^ 0xabcdef);
        let w = g.constant(rand_tensor(&mut rng, &shape));
        let p = g.mul(y, w).unwrap();
        g.sum(p)
    }

    #[test]
    fn matmul_gradient_matches_closed_form_and_fd() {
        let mut rng = SplitMix64::new(1);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let g = Graph::new();
        let (va, vb) = (g.param(a.clone()), g.param(b.clone()));
        let c = g.matmul(va, vb).unwrap();
        let loss = g.sum(c);
        g.backward(loss).unwrap();
        let expected = Tensor::ones(&[3, 2]).matmul(&b.transpose()).unwrap();
        assert!(g.grad(va).unwrap().max_abs_diff(&expected) < 1e-12);
        let numeric = numeric_grad(&a, |aa| aa.matmul(&b).unwrap().sum());
        assert!(rel_err(&g.grad(va).unwrap(), &numeric) < 1e-6);
    }

    #[test]
    fn matmul_shape_error() {
        let g = Graph::new();
        let a = g.param(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, a), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_examples() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.0, 0.0, 0.0], vec![0.0, 3f64.ln(), -1.0]]).unwrap());
        let y = g.value(g.softmax_rows(x, 1.0).unwrap());
        for j in 0..3 {
            assert!((y.get(0, j) - 1.0 / 3.0).abs() < 1e-15);
        }
        let x2 = g.constant(Tensor::from_rows(&[vec![0.0, 3f64.ln()]]).unwrap());
        let y2 = g.value(g.softmax_rows(x2, 1.0).unwrap());
        assert!((y2.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((y2.get(0, 1) - 0.75).abs() < 1e-15);
        assert!(matches!(g.softmax_rows(x, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(g.softmax_rows(x, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn softmax_large_inputs_stay_finite() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1000.0, 999.0, -1000.0]]).unwrap());
        let y = g.value(g.softmax_rows(x, 0.1).unwrap());
        assert!(y.is_finite());
        assert!((y.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unary_gradients() {
        for seed in 0..5 {
            check_unary(&[4, 4], seed, |g, x| {
                let y = g.softmax_rows(x, 0.7).unwrap();
                weighted_sum(g, y, seed)
            });
            check_unary(&[3, 5], seed, |g, x| weighted_sum(g, g.gelu(x), seed));
            check_unary(&[3, 5], seed, |g, x| weighted_sum(g, g.sigmoid(x), seed));
            check_unary(&[4, 3], seed, |g, x| {
                let y = g.softmax_rows_masked(x, 1.3, Some(&[true, false, true])).unwrap();
                weighted_sum(g, y, seed)
            });
            check_unary(&[3, 6], seed, |g, x| {
                let gain = g.constant(Tensor::from_rows(&[vec![0.5, 1.0, 1.5, -1.0, 2.0, 0.1]]).unwrap());
                let bias = g.constant(Tensor::zeros(&[1, 6]));
                weighted_sum(g, g.layer_norm(x, gain, bias).unwrap(), seed)
            });
            check_unary(&[3, 2], seed, |g, x| {
                let y = g.pair_sum(x, x).unwrap();
                weighted_sum(g, y, seed)
            });
            check_unary(&[4, 3], seed, |g, x| {
                let y = g.gather_rows(x, &[2, 0, 2, 3]).unwrap();
                weighted_sum(g, y, seed)
            });
            check_unary(&[3, 5], seed, |g, x| {
                let a = g.slice_cols(x, 1, 3).unwrap();
                let b = g.slice_cols(x, 0, 2).unwrap();
                let c = g.concat_cols(&[a, b]).unwrap();
                let d = g.concat_rows(&[c, c]).unwrap();
                let e = g.pad_cols(d, 7).unwrap();
                weighted_sum(g, e, seed)
            });
            check_unary(&[3, 4], seed, |g, x| {
                let y = g.matmul_t(x, x).unwrap();
                weighted_sum(g, y, seed)
            });
            check_unary(&[5, 4], seed, |g, x| g.cross_entropy(x, &[0, 3, 1, 1, 2]).unwrap());
            check_unary(&[2, 3], seed, |g, x| {
                g.bce_with_logits(x, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0], &[0.5, 2.0, 1.0, 1.0, 3.0, 0.2]).unwrap()
            });
        }
    }

    #[test]
    fn stop_gradient_contract() {
        let g = Graph::new();
        let x = g.param(Tensor::from_rows(&[vec![1.5, -2.0, 3.0]]).unwrap());
        let s = g.stop_gradient(x);
        assert_eq!(*g.value(s), *g.value(x));
        let l = g.sum(s);
        g.backward(l).unwrap();
        assert!(g.grad(x).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));

        let g = Graph::new();
        let x = g.param(Tensor::from_rows(&[vec![1.5, -2.0, 3.0]]).unwrap());
        let s = g.stop_gradient(x);
        let p = g.mul(x, s).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), g.value(x).data());
    }

    #[test]
    fn backward_sum_and_square() {
        let g = Graph::new();
        let x = g.param(Tensor::new(vec![2, 3], vec![1.0, 2.0, -3.0, 0.5, 0.0, 4.0]).unwrap());
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), Tensor::ones(&[2, 3]));
        g.zero_grad();
        let sq = g.mul(x, x).unwrap();
        let l2 = g.sum(sq);
        g.backward(l2).unwrap();
        assert_eq!(g.grad(x).unwrap(), g.value(x).map(|v| 2.0 * v));
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let g = Graph::new();
        let x = g.param(Tensor::ones(&[1, 2]));
        let l = g.sum(x);
        g.backward(l).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::new();
        let x = g.param(Tensor::ones(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::Dimension { .. })));
    }

    /// Scalar-loop reference for the masked mean squared error.
    fn masked_mse_loop(p: &Tensor, t: &Tensor, m: &Tensor) -> f64 {
        let (rows, cols) = (p.rows(), p.cols());
        let mut s = 0.0;
        let mut used = 0;
        for r in 0..rows {
            let mut any = false;
            for c in 0..cols {
                if m.get(r, c) == 1.0 {
                    any = true;
                    let d = p.get(r, c) - t.get(r, c);
                    s += d * d;
                }
            }
            if any {
                used += 1;
            }
        }
        s / (used * cols) as f64
    }

    #[test]
    fn masked_mse_examples() {
        let g = Graph::new();
        let p = g.param(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let t = g.constant(Tensor::zeros(&[1, 2]));
        let same = g.masked_mse(p, p, &Tensor::ones(&[1, 2])).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let masked = g.masked_mse(p, t, &Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap()).unwrap();
        assert_eq!(g.value(masked).item(), 0.0);
        g.backward(masked).unwrap();
        assert_eq!(g.grad(p).unwrap().data(), &[0.0, 0.0]);
        assert!(matches!(g.masked_mse(p, t, &Tensor::zeros(&[1, 2])), Err(Error::Degenerate(_))));

        for seed in 0..20 {
            let mut rng = SplitMix64::new(seed);
            let a = rand_tensor(&mut rng, &[5, 3]);
            let b = rand_tensor(&mut rng, &[5, 3]);
            let mut row_mask: Vec<f64> = (0..5).map(|_| if rng.coin() { 1.0 } else { 0.0 }).collect();
            row_mask[0] = 1.0;
            let m = Tensor::new(vec![5, 3], row_mask.iter().flat_map(|&v| [v; 3]).collect()).unwrap();
            let g = Graph::new();
            let (va, vb) = (g.param(a.clone()), g.constant(b.clone()));
            let l = g.masked_mse(va, vb, &m).unwrap();
            assert!((g.value(l).item() - masked_mse_loop(&a, &b, &m)).abs() < 1e-12);
            g.backward(l).unwrap();
            let numeric = numeric_grad(&a, |aa| masked_mse_loop(aa, &b, &m));
            assert!(rel_err(&g.grad(va).unwrap(), &numeric) < 1e-6);
        }
    }
}
