//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse once and returns a
//! [`Gradients`] set; [`Graph::backward_into`] additionally adds the
//! parameter gradients into a [`ParamStore`], so repeated calls accumulate
//! until the store's grads are zeroed.
//!
//! Parameters may enter a graph either tracked ([`Graph::param`]) or as
//! borrowed constants ([`Graph::constant`]); frozen modules use the latter and
//! therefore never receive gradient.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};

use super::params::{ParamId, ParamStore};
use super::tensor::{kernels, log_sum_exp, softmax_in_place, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        allowed: Arc<Vec<bool>>,
        probs: Vec<f64>,
    },
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        scale: f64,
        probs: Vec<f64>,
    },
    Kl {
        logits: Var,
        rows: Vec<usize>,
        temperature: f64,
        scale: f64,
        teacher: Vec<f64>,
        student: Vec<f64>,
    },
    WeightedSum(Vec<(Var, f64)>),
    Sum(Var),
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    tracked: bool,
    param: Option<ParamId>,
}

/// One forward pass worth of recorded operations.
///
/// A graph is driven by a single thread; independent graphs over the same
/// borrowed parameters can be built concurrently.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    param_vars: HashMap<ParamId, Var>,
    // Address of the store that supplied tracked parameters; compared only.
    tracked_store: Option<usize>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            param_vars: HashMap::new(),
            tracked_store: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite forward value");
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            tracked,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Untracked leaf owning its data.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Tracked leaf owning its data; its gradient is available through
    /// [`Gradients::wrt`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Untracked leaf borrowing its data.
    pub fn constant(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(t),
            op: Op::Leaf,
            tracked: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Tracked leaf for a stored parameter. Repeated calls return the same
    /// node. All tracked parameters in one graph must come from one store.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        let addr = store as *const ParamStore as usize;
        match self.tracked_store {
            None => self.tracked_store = Some(addr),
            Some(a) => assert_eq!(a, addr, "tracked parameters from two stores in one graph"),
        }
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: Value::Borrowed(&p.value),
            op: Op::Leaf,
            tracked: p.requires_grad,
            param: Some(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Parameter leaf that is tracked only when `track` is set.
    pub fn param_or_const(&mut self, store: &'a ParamStore, id: ParamId, track: bool) -> Var {
        if track {
            self.param(store, id)
        } else {
            self.constant(store.value(id))
        }
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn any_tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::InvalidShape(format!(
                "matmul {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out = ta.matmul(tb)?;
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), tracked))
    }

    /// `[m, n] + [n]`, broadcasting the row vector over all rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.len() != ta.cols() {
            return Err(Error::InvalidShape(format!(
                "add_row {:?} + {:?}",
                ta.shape(),
                tr.shape()
            )));
        }
        let mut out = ta.clone();
        let n = ta.cols();
        for r in out.data_mut().chunks_mut(n) {
            for (x, b) in r.iter_mut().zip(tr.data()) {
                *x += b;
            }
        }
        let tracked = self.any_tracked(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::InvalidShape(format!(
                "mul {:?} * {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), tracked))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * factor).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let tracked = self.any_tracked(&[a]);
        self.push(out, Op::Scale(a, factor), tracked)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| gelu(x)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let tracked = self.any_tracked(&[a]);
        self.push(out, Op::Gelu(a), tracked)
    }

    /// Row-wise `x / sqrt(mean(x²) + eps) * gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let n = tx.cols();
        if tg.len() != n {
            return Err(Error::InvalidShape(format!(
                "rms_norm gain {:?} for input {:?}",
                tg.shape(),
                tx.shape()
            )));
        }
        let mut out = tx.clone();
        let mut inv_rms = Vec::with_capacity(tx.rows());
        for r in out.data_mut().chunks_mut(n) {
            let ms = r.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            for (v, g) in r.iter_mut().zip(tg.data()) {
                *v *= inv * g;
            }
        }
        let tracked = self.any_tracked(&[x, gain]);
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, tracked))
    }

    /// Gathers rows of `table` (`[V, d]`) by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let d = tt.cols();
        let v = tt.rows();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::InvalidShape(format!("id {id} outside table of {v} rows")));
            }
            data.extend_from_slice(tt.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let tracked = self.any_tracked(&[table]);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            tracked,
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims2(a);
        let (rb, cb) = self.dims2(b);
        if ra != rb {
            return Err(Error::InvalidShape(format!("concat rows {ra} vs {rb}")));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let out = Tensor::new(vec![ra, ca + cb], data)?;
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(out, Op::ConcatCols(a, b), tracked))
    }

    /// Multi-head scaled dot-product attention over `[L, d]` projections.
    /// `allowed[q * L + k]` gates whether query `q` may attend to key `k`;
    /// every query must be allowed at least one key.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        allowed: Arc<Vec<bool>>,
    ) -> Result<Var> {
        let (l, d) = self.dims2(q);
        if self.dims2(k) != (l, d) || self.dims2(v) != (l, d) {
            return Err(Error::InvalidShape("attention q/k/v shapes differ".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidShape(format!("{d} not divisible by {heads} heads")));
        }
        if allowed.len() != l * l {
            return Err(Error::InvalidShape(format!(
                "mask has {} entries for length {l}",
                allowed.len()
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (tq, tk, tv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; heads * l * l];
        let mut out = vec![0.0; l * d];
        let mut scores = vec![0.0; l];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..l {
                let qi = &tq[i * d + off..i * d + off + dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..l {
                    if allowed[i * l + j] {
                        let s = kernels::dot(qi, &tk[j * d + off..j * d + off + dh]) * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                }
                if max == f64::NEG_INFINITY {
                    return Err(Error::InvalidShape(format!("query {i} may attend to nothing")));
                }
                let p = &mut probs[(h * l + i) * l..(h * l + i + 1) * l];
                let mut sum = 0.0;
                for j in 0..l {
                    if allowed[i * l + j] {
                        p[j] = (scores[j] - max).exp();
                        sum += p[j];
                    }
                }
                let oi = &mut out[i * d + off..i * d + off + dh];
                for j in 0..l {
                    if allowed[i * l + j] {
                        p[j] /= sum;
                        let vj = &tv[j * d + off..j * d + off + dh];
                        for (o, &x) in oi.iter_mut().zip(vj) {
                            *o += p[j] * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![l, d], out)?;
        let tracked = self.any_tracked(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                allowed,
                probs,
            },
            tracked,
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = super::tensor::softmax_rows(self.value(a))?;
        let tracked = self.any_tracked(&[a]);
        Ok(self.push(out, Op::SoftmaxRows(a), tracked))
    }

    /// `scale · Σ −log softmax(logits[row])[target]` over `(row, target)`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)], scale: f64) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, v) = (tl.rows(), tl.cols());
        let mut probs = Vec::with_capacity(targets.len() * v);
        let mut loss = 0.0;
        for &(r, t) in targets {
            if r >= rows || t >= v {
                return Err(Error::InvalidShape(format!("target ({r}, {t}) outside {rows}x{v}")));
            }
            let row = tl.row(r);
            loss -= row[t] - log_sum_exp(row);
            let mut p = row.to_vec();
            softmax_in_place(&mut p);
            probs.extend_from_slice(&p);
        }
        let out = Tensor::scalar(scale * loss);
        let tracked = self.any_tracked(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                scale,
                probs,
            },
            tracked,
        ))
    }

    /// `scale · Σ_rows KL(teacher_row ‖ softmax(logits_row / T))`.
    ///
    /// `teacher` holds one distribution per entry of `rows`, concatenated.
    pub fn kl_to_logits(
        &mut self,
        logits: Var,
        rows: &[usize],
        teacher: Vec<f64>,
        temperature: f64,
        scale: f64,
    ) -> Result<Var> {
        let tl = self.value(logits);
        let v = tl.cols();
        if teacher.len() != rows.len() * v {
            return Err(Error::InvalidShape(format!(
                "teacher has {} values for {} rows of width {v}",
                teacher.len(),
                rows.len()
            )));
        }
        if temperature <= 0.0 {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        let mut student = Vec::with_capacity(rows.len() * v);
        let mut loss = 0.0;
        for (ri, &r) in rows.iter().enumerate() {
            if r >= tl.rows() {
                return Err(Error::InvalidShape(format!("row {r} outside logits")));
            }
            let z: Vec<f64> = tl.row(r).iter().map(|x| x / temperature).collect();
            let lse = log_sum_exp(&z);
            let p = &teacher[ri * v..(ri + 1) * v];
            for (&pv, &zv) in p.iter().zip(&z) {
                if pv > 0.0 {
                    loss += pv * (pv.ln() - (zv - lse));
                }
            }
            student.extend(z.iter().map(|zv| (zv - lse).exp()));
        }
        let out = Tensor::scalar(scale * loss);
        let tracked = self.any_tracked(&[logits]);
        Ok(self.push(
            out,
            Op::Kl {
                logits,
                rows: rows.to_vec(),
                temperature,
                scale,
                teacher,
                student,
            },
            tracked,
        ))
    }

    /// `Σ w_i · s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            total += w * self.value(v).item()?;
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let tracked = self.any_tracked(&vars);
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), tracked))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let tracked = self.any_tracked(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), tracked)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidShape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }

        let mut params: Vec<(ParamId, usize)> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.tracked)
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        params.sort();
        Ok(Gradients {
            sizes: self.nodes.iter().map(|n| n.value.get().len()).collect(),
            grads,
            params,
        })
    }

    /// Backward, then adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let g = self.backward(loss)?;
        store.accumulate(&g)?;
        Ok(g)
    }

    fn propagate(&self, op: &Op, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let tracked = |v: Var| self.nodes[v.0].tracked;
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].tracked {
                return;
            }
            let n = self.value(v).len();
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(g);
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                acc(grads, *a, &|g| kernels::matmul_nt_acc(gout, tb.data(), g, m, n, k));
                acc(grads, *b, &|g| kernels::matmul_tn_acc(ta.data(), gout, g, m, k, n));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(grads, v, &|g| {
                        for (x, y) in g.iter_mut().zip(gout) {
                            *x += y;
                        }
                    });
                }
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, &|g| {
                    for (x, y) in g.iter_mut().zip(gout) {
                        *x += y;
                    }
                });
                let n = self.value(*row).len();
                acc(grads, *row, &|g| {
                    for r in gout.chunks(n) {
                        for (x, y) in g.iter_mut().zip(r) {
                            *x += y;
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                acc(grads, *a, &|g| {
                    for ((x, go), y) in g.iter_mut().zip(gout).zip(tb) {
                        *x += go * y;
                    }
                });
                acc(grads, *b, &|g| {
                    for ((x, go), y) in g.iter_mut().zip(gout).zip(ta) {
                        *x += go * y;
                    }
                });
            }
            Op::Scale(a, f) => {
                acc(grads, *a, &|g| {
                    for (x, y) in g.iter_mut().zip(gout) {
                        *x += f * y;
                    }
                });
            }
            Op::Gelu(a) => {
                let ta = self.value(*a).data();
                acc(grads, *a, &|g| {
                    for ((x, go), &xin) in g.iter_mut().zip(gout).zip(ta) {
                        *x += go * gelu_grad(xin);
                    }
                });
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let tx = self.value(*x);
                let tg = self.value(*gain).data();
                let n = tx.cols();
                acc(grads, *x, &|g| {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let xr = tx.row(r);
                        let gr = &gout[r * n..(r + 1) * n];
                        // d/dx of x·inv·gain
                        let dot: f64 = xr.iter().zip(gr).zip(tg).map(|((a, b), c)| a * b * c).sum();
                        let coef = inv * inv * inv * dot / n as f64;
                        for j in 0..n {
                            g[r * n + j] += gr[j] * tg[j] * inv - xr[j] * coef;
                        }
                    }
                });
                acc(grads, *gain, &|g| {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let xr = tx.row(r);
                        for j in 0..n {
                            g[j] += gout[r * n + j] * xr[j] * inv;
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).cols();
                acc(grads, *table, &|g| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            g[id * d + j] += gout[r * d + j];
                        }
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let w = ca + cb;
                acc(grads, *a, &|g| {
                    for (r, chunk) in g.chunks_mut(ca).enumerate() {
                        for (x, y) in chunk.iter_mut().zip(&gout[r * w..r * w + ca]) {
                            *x += y;
                        }
                    }
                });
                acc(grads, *b, &|g| {
                    for (r, chunk) in g.chunks_mut(cb).enumerate() {
                        for (x, y) in chunk.iter_mut().zip(&gout[r * w + ca..(r + 1) * w]) {
                            *x += y;
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                allowed,
                probs,
            } => {
                let (l, d) = self.dims2(*q);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (tq, tk, tv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![0.0; l * d];
                let mut dk = vec![0.0; l * d];
                let mut dv = vec![0.0; l * d];
                let mut dp = vec![0.0; l];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..l {
                        let p = &probs[(h * l + i) * l..(h * l + i + 1) * l];
                        let goi = &gout[i * d + off..i * d + off + dh];
                        let mut row_dot = 0.0;
                        for j in 0..l {
                            if !allowed[i * l + j] {
                                continue;
                            }
                            let vj = &tv[j * d + off..j * d + off + dh];
                            dp[j] = kernels::dot(goi, vj);
                            row_dot += p[j] * dp[j];
                            let dvj = &mut dv[j * d + off..j * d + off + dh];
                            for (x, y) in dvj.iter_mut().zip(goi) {
                                *x += p[j] * y;
                            }
                        }
                        let qi = &tq[i * d + off..i * d + off + dh];
                        for j in 0..l {
                            if !allowed[i * l + j] {
                                continue;
                            }
                            let ds = p[j] * (dp[j] - row_dot) * scale;
                            let kj = &tk[j * d + off..j * d + off + dh];
                            let dqi = &mut dq[i * d + off..i * d + off + dh];
                            for (x, y) in dqi.iter_mut().zip(kj) {
                                *x += ds * y;
                            }
                            let dkj = &mut dk[j * d + off..j * d + off + dh];
                            for (x, y) in dkj.iter_mut().zip(qi) {
                                *x += ds * y;
                            }
                        }
                    }
                }
                for (var, src) in [(*q, &dq), (*k, &dk), (*v, &dv)] {
                    acc(grads, var, &|g| {
                        for (x, y) in g.iter_mut().zip(src.iter()) {
                            *x += y;
                        }
                    });
                }
            }
            Op::SoftmaxRows(a) => {
                let out = self.nodes[idx].value.get();
                let n = out.cols();
                acc(grads, *a, &|g| {
                    for r in 0..out.rows() {
                        let y = out.row(r);
                        let gr = &gout[r * n..(r + 1) * n];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            g[r * n + j] += y[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                scale,
                probs,
            } => {
                let v = self.value(*logits).cols();
                let s = scale * gout[0];
                acc(grads, *logits, &|g| {
                    for (ti, &(r, t)) in targets.iter().enumerate() {
                        let p = &probs[ti * v..(ti + 1) * v];
                        for j in 0..v {
                            g[r * v + j] += s * p[j];
                        }
                        g[r * v + t] -= s;
                    }
                });
            }
            Op::Kl {
                logits,
                rows,
                temperature,
                scale,
                teacher,
                student,
            } => {
                let v = self.value(*logits).cols();
                let s = scale * gout[0] / temperature;
                acc(grads, *logits, &|g| {
                    for (ri, &r) in rows.iter().enumerate() {
                        for j in 0..v {
                            g[r * v + j] += s * (student[ri * v + j] - teacher[ri * v + j]);
                        }
                    }
                });
            }
            Op::WeightedSum(terms) => {
                for &(var, w) in terms {
                    if tracked(var) {
                        acc(grads, var, &|g| g[0] += w * gout[0]);
                    }
                }
            }
            Op::Sum(a) => {
                acc(grads, *a, &|g| {
                    for x in g.iter_mut() {
                        *x += gout[0];
                    }
                });
            }
        }
    }
}

/// Result of one reverse sweep.
pub struct Gradients {
    sizes: Vec<usize>,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to a tracked node; `None` for untracked nodes
    /// and for tracked nodes the loss does not reach.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::wrt`] but yields zeros for unreachable nodes.
    pub fn wrt_or_zero(&self, v: Var) -> Vec<f64> {
        self.wrt(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.sizes[v.0]])
    }

    /// `(param, grad)` for every tracked parameter leaf, in id order.
    /// Parameters off the loss path report zeros.
    pub fn params(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.params
            .iter()
            .map(|&(id, node)| (id, self.wrt_or_zero(Var(node))))
            .collect()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
