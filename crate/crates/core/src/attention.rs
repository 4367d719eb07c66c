//! Attention variants over field-identified token sets.
//!
//! Conventions: tokens are rows, projections act on the right (`q = h · W`),
//! and head `h` owns columns `h·d_h .. (h+1)·d_h` of every `d × d`
//! projection. Scores are tempered by `√d` (model width, not head width).
//!
//! * [`forward_standard`]: shared `W_Q, W_K, W_V`.
//! * [`forward_decomposed`]: per-field projections plus a per-head scalar
//!   `w[h][f_i][f_j]` that multiplies the content score.
//! * [`forward_naive_pair`]: projections specialized per ordered field pair;
//!   quadratic in `F` and guarded by a parameter budget.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, FatError, Result};
use crate::fields::{TokenBatch, TokenSample};
use crate::numerics::{
    dot, outer_acc, softmax_backward, softmax_in_place, vec_mat_acc, vec_mat_t_acc, Matrix,
};

/// Default cap on naïve pair-attention parameters per layer.
pub const DEFAULT_NAIVE_BUDGET: u128 = 100_000_000;

/// Std of the field-pair modulation initializer.
pub const MODULATION_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecomposedAttnParams {
    pub wq: Vec<Matrix>,
    pub wk: Vec<Matrix>,
    pub wv: Vec<Matrix>,
    /// `H × F²`; entry `(h, f_i·F + f_j)` is `w^{(h)}_{f_i,f_j}`.
    pub modulation: Matrix,
    pub wo: Matrix,
    pub heads: usize,
}

impl DecomposedAttnParams {
    /// Projections from N(0, 1/d); modulation from N(0, 0.01²).
    pub fn init<R: Rng + ?Sized>(fields: usize, d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        check_heads(d, heads)?;
        let std = 1.0 / (d as f64).sqrt();
        let mut per_field = || -> Vec<Matrix> {
            (0..fields).map(|_| Matrix::random_normal(d, d, std, rng)).collect()
        };
        let (wq, wk, wv) = (per_field(), per_field(), per_field());
        Ok(DecomposedAttnParams {
            wq,
            wk,
            wv,
            modulation: Matrix::random_normal(heads, fields * fields, MODULATION_INIT_STD, rng),
            wo: Matrix::random_normal(d, d, std, rng),
            heads,
        })
    }

    pub fn field_count(&self) -> usize {
        self.wq.len()
    }

    pub fn dim(&self) -> usize {
        self.wo.rows()
    }

    pub fn w(&self, head: usize, from: usize, to: usize) -> f64 {
        self.modulation.get(head, from * self.field_count() + to)
    }

    pub fn set_w(&mut self, head: usize, from: usize, to: usize, value: f64) {
        let f = self.field_count();
        self.modulation.set(head, from * f + to, value);
    }

    pub(crate) fn view(&self) -> AttnView<'_> {
        AttnView {
            wq: &self.wq,
            wk: &self.wk,
            wv: &self.wv,
            modulation: Some(&self.modulation),
            wo: &self.wo,
            heads: self.heads,
            field_count: self.field_count(),
        }
    }

    fn validate(&self) -> Result<()> {
        let f = self.field_count();
        let d = self.dim();
        check_heads(d, self.heads)?;
        if f == 0 || self.wk.len() != f || self.wv.len() != f {
            return config("decomposed attention needs exactly F matrices per role");
        }
        if self.modulation.shape() != (self.heads, f * f) {
            return config("modulation tensor must be H x F^2");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardAttnParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub heads: usize,
}

impl StandardAttnParams {
    pub fn init<R: Rng + ?Sized>(d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        check_heads(d, heads)?;
        let std = 1.0 / (d as f64).sqrt();
        Ok(StandardAttnParams {
            wq: Matrix::random_normal(d, d, std, rng),
            wk: Matrix::random_normal(d, d, std, rng),
            wv: Matrix::random_normal(d, d, std, rng),
            wo: Matrix::random_normal(d, d, std, rng),
            heads,
        })
    }
}

/// Pair-specialized projections. Matrix `(h, f_i, f_j)` of each role is
/// `d × d_h` and lives at index `(h·F + f_i)·F + f_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaivePairAttnParams {
    pub wq: Vec<Matrix>,
    pub wk: Vec<Matrix>,
    pub wv: Vec<Matrix>,
    pub wo: Matrix,
    pub heads: usize,
    pub field_count: usize,
}

impl NaivePairAttnParams {
    /// Scalars held by the pair projections: `3 · H · F² · d · d_h = 3F²d²`.
    pub fn required_scalars(fields: usize, d: usize) -> u128 {
        3 * (fields as u128).pow(2) * (d as u128).pow(2)
    }

    pub fn check_budget(fields: usize, d: usize, budget: u128) -> Result<()> {
        let count = Self::required_scalars(fields, d);
        if count > budget {
            return Err(FatError::Resource {
                what: format!("naive field-pair attention with F={fields}, d={d}"),
                count,
                limit: budget,
            });
        }
        Ok(())
    }

    pub fn init<R: Rng + ?Sized>(
        fields: usize,
        d: usize,
        heads: usize,
        budget: u128,
        rng: &mut R,
    ) -> Result<Self> {
        check_heads(d, heads)?;
        Self::check_budget(fields, d, budget)?;
        let dh = d / heads;
        let std = 1.0 / (d as f64).sqrt();
        let n = heads * fields * fields;
        let mut role = || -> Vec<Matrix> {
            (0..n).map(|_| Matrix::random_normal(d, dh, std, rng)).collect()
        };
        let (wq, wk, wv) = (role(), role(), role());
        Ok(NaivePairAttnParams {
            wq,
            wk,
            wv,
            wo: Matrix::random_normal(d, d, std, rng),
            heads,
            field_count: fields,
        })
    }

    /// The instantiation under which pair attention reproduces decomposed
    /// attention: `W_Q^{(i,j)} = w_{ij} · W_Q^{(i)}`, `W_K^{(i,j)} = W_K^{(j)}`,
    /// `W_V^{(i,j)} = W_V^{(j)}`, each restricted to the head's columns.
    pub fn from_decomposed(p: &DecomposedAttnParams, budget: u128) -> Result<Self> {
        p.validate()?;
        let (f, d, heads) = (p.field_count(), p.dim(), p.heads);
        Self::check_budget(f, d, budget)?;
        let dh = d / heads;
        let n = heads * f * f;
        let (mut wq, mut wk, mut wv) = (
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
        );
        for h in 0..heads {
            for fi in 0..f {
                for fj in 0..f {
                    let w = p.w(h, fi, fj);
                    wq.push(Matrix::from_fn(d, dh, |r, c| w * p.wq[fi].get(r, h * dh + c)));
                    wk.push(column_block(&p.wk[fj], h * dh, dh));
                    wv.push(column_block(&p.wv[fj], h * dh, dh));
                }
            }
        }
        Ok(NaivePairAttnParams {
            wq,
            wk,
            wv,
            wo: p.wo.clone(),
            heads,
            field_count: f,
        })
    }

    /// Every pair shares the standard projections.
    pub fn from_standard(p: &StandardAttnParams, fields: usize, budget: u128) -> Result<Self> {
        let d = p.wo.rows();
        check_heads(d, p.heads)?;
        Self::check_budget(fields, d, budget)?;
        let dh = d / p.heads;
        let (mut wq, mut wk, mut wv) = (Vec::new(), Vec::new(), Vec::new());
        for h in 0..p.heads {
            for _ in 0..fields * fields {
                wq.push(column_block(&p.wq, h * dh, dh));
                wk.push(column_block(&p.wk, h * dh, dh));
                wv.push(column_block(&p.wv, h * dh, dh));
            }
        }
        Ok(NaivePairAttnParams {
            wq,
            wk,
            wv,
            wo: p.wo.clone(),
            heads: p.heads,
            field_count: fields,
        })
    }

    #[inline]
    pub fn index(&self, head: usize, from: usize, to: usize) -> usize {
        (head * self.field_count + from) * self.field_count + to
    }

    pub fn dim(&self) -> usize {
        self.wo.rows()
    }

    pub(crate) fn view(&self) -> NaiveView<'_> {
        NaiveView {
            wq: &self.wq,
            wk: &self.wk,
            wv: &self.wv,
            wo: &self.wo,
            heads: self.heads,
            field_count: self.field_count,
        }
    }
}

/// Borrowed pair-projection set used by the naïve kernel.
#[derive(Debug, Clone, Copy)]
pub(crate) struct NaiveView<'a> {
    pub wq: &'a [Matrix],
    pub wk: &'a [Matrix],
    pub wv: &'a [Matrix],
    pub wo: &'a Matrix,
    pub heads: usize,
    pub field_count: usize,
}

impl NaiveView<'_> {
    #[inline]
    fn index(&self, head: usize, from: usize, to: usize) -> usize {
        (head * self.field_count + from) * self.field_count + to
    }

    pub fn grads(&self) -> AttnGrads {
        let z = |m: &[Matrix]| m.iter().map(|x| Matrix::zeros(x.rows(), x.cols())).collect();
        AttnGrads {
            wq: z(self.wq),
            wk: z(self.wk),
            wv: z(self.wv),
            modulation: None,
            wo: Matrix::zeros(self.wo.rows(), self.wo.cols()),
        }
    }
}

fn column_block(m: &Matrix, start: usize, width: usize) -> Matrix {
    Matrix::from_fn(m.rows(), width, |r, c| m.get(r, start + c))
}

fn check_heads(d: usize, heads: usize) -> Result<()> {
    if heads == 0 || d == 0 || d % heads != 0 {
        return config(format!("model width {d} must be a positive multiple of head count {heads}"));
    }
    Ok(())
}

/// Per-head score and attention matrices of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnTrace {
    /// `s_h(i, j)` before the `1/√d` temperature.
    pub scores: Vec<Matrix>,
    /// `α_h(i, j)`; every row sums to one.
    pub weights: Vec<Matrix>,
}

/// Output tokens and trace of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnOutput {
    pub output: Matrix,
    pub trace: AttnTrace,
}

/// Borrowed projection set used by the decomposed kernel. A role slice of
/// length 1 is shared by every field; otherwise it is indexed by field id.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnView<'a> {
    pub wq: &'a [Matrix],
    pub wk: &'a [Matrix],
    pub wv: &'a [Matrix],
    /// `None` means `w ≡ 1`.
    pub modulation: Option<&'a Matrix>,
    pub wo: &'a Matrix,
    pub heads: usize,
    pub field_count: usize,
}

#[inline]
fn slot(mats: &[Matrix], field: usize) -> usize {
    if mats.len() == 1 {
        0
    } else {
        field
    }
}

impl AttnView<'_> {
    #[inline]
    fn w(&self, head: usize, from: usize, to: usize) -> f64 {
        match self.modulation {
            Some(m) => m.get(head, from * self.field_count + to),
            None => 1.0,
        }
    }

    fn check_sample(&self, sample: &TokenSample) -> Result<()> {
        let d = self.wo.rows();
        if sample.tokens.cols() != d {
            return config(format!("token width {} != model width {d}", sample.tokens.cols()));
        }
        for &f in &sample.fields {
            if f >= self.field_count
                || (self.wq.len() != 1 && f >= self.wq.len())
                || (self.wk.len() != 1 && f >= self.wk.len())
                || (self.wv.len() != 1 && f >= self.wv.len())
            {
                return Err(FatError::Internal(format!("field {f} has no projection matrix")));
            }
        }
        Ok(())
    }
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct AttnCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    concat: Matrix,
    /// Raw content alignment `q_{i,h} · k_{j,h}` per head.
    raw: Vec<Matrix>,
    probs: Vec<Matrix>,
}

impl AttnCache {
    pub fn trace(&self, view: &AttnView<'_>, fields: &[usize]) -> AttnTrace {
        let scores = self
            .raw
            .iter()
            .enumerate()
            .map(|(h, raw)| {
                Matrix::from_fn(raw.rows(), raw.cols(), |i, j| {
                    raw.get(i, j) * view.w(h, fields[i], fields[j])
                })
            })
            .collect();
        AttnTrace {
            scores,
            weights: self.probs.clone(),
        }
    }
}

pub(crate) fn decomposed_forward(
    view: &AttnView<'_>,
    x: &Matrix,
    fields: &[usize],
) -> (Matrix, AttnCache) {
    let n = x.rows();
    let d = x.cols();
    let dh = d / view.heads;
    let temp = 1.0 / (d as f64).sqrt();
    let mut q = Matrix::zeros(n, d);
    let mut k = Matrix::zeros(n, d);
    let mut v = Matrix::zeros(n, d);
    for (i, &f) in fields.iter().enumerate() {
        let xi = x.row(i);
        vec_mat_acc(xi, &view.wq[slot(view.wq, f)], q.row_mut(i));
        vec_mat_acc(xi, &view.wk[slot(view.wk, f)], k.row_mut(i));
        vec_mat_acc(xi, &view.wv[slot(view.wv, f)], v.row_mut(i));
    }
    let mut concat = Matrix::zeros(n, d);
    let mut raw = Vec::with_capacity(view.heads);
    let mut probs = Vec::with_capacity(view.heads);
    let mut logits = vec![0.0; n];
    for h in 0..view.heads {
        let cols = h * dh..(h + 1) * dh;
        let mut raw_h = Matrix::zeros(n, n);
        let mut prob_h = Matrix::zeros(n, n);
        for i in 0..n {
            let qi = &q.row(i)[cols.clone()];
            for j in 0..n {
                let r = dot(qi, &k.row(j)[cols.clone()]);
                raw_h.set(i, j, r);
                logits[j] = r * view.w(h, fields[i], fields[j]) * temp;
            }
            softmax_in_place(&mut logits);
            prob_h.row_mut(i).copy_from_slice(&logits);
            let out = &mut concat.row_mut(i)[cols.clone()];
            for (j, &a) in logits.iter().enumerate() {
                for (o, &vv) in out.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *o += a * vv;
                }
            }
        }
        raw.push(raw_h);
        probs.push(prob_h);
    }
    let mut out = Matrix::zeros(n, d);
    for i in 0..n {
        vec_mat_acc(concat.row(i), view.wo, out.row_mut(i));
    }
    (
        out,
        AttnCache {
            q,
            k,
            v,
            concat,
            raw,
            probs,
        },
    )
}

/// Gradient buffers matching an [`AttnView`].
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct AttnGrads {
    pub wq: Vec<Matrix>,
    pub wk: Vec<Matrix>,
    pub wv: Vec<Matrix>,
    pub modulation: Option<Matrix>,
    pub wo: Matrix,
}

impl AttnGrads {
    pub fn zeros_like(view: &AttnView<'_>) -> Self {
        let z = |m: &[Matrix]| m.iter().map(|x| Matrix::zeros(x.rows(), x.cols())).collect();
        AttnGrads {
            wq: z(view.wq),
            wk: z(view.wk),
            wv: z(view.wv),
            modulation: view.modulation.map(|m| Matrix::zeros(m.rows(), m.cols())),
            wo: Matrix::zeros(view.wo.rows(), view.wo.cols()),
        }
    }
}

/// Accumulates parameter gradients into `grads` and returns `∂L/∂x`.
pub(crate) fn decomposed_backward(
    view: &AttnView<'_>,
    x: &Matrix,
    fields: &[usize],
    cache: &AttnCache,
    dout: &Matrix,
    grads: &mut AttnGrads,
) -> Matrix {
    let n = x.rows();
    let d = x.cols();
    let dh = d / view.heads;
    let temp = 1.0 / (d as f64).sqrt();
    let mut dconcat = Matrix::zeros(n, d);
    for i in 0..n {
        outer_acc(cache.concat.row(i), dout.row(i), &mut grads.wo);
        vec_mat_t_acc(dout.row(i), view.wo, dconcat.row_mut(i));
    }
    let mut dq = Matrix::zeros(n, d);
    let mut dk = Matrix::zeros(n, d);
    let mut dv = Matrix::zeros(n, d);
    let mut dprob = vec![0.0; n];
    let mut dlogit = vec![0.0; n];
    for h in 0..view.heads {
        let cols = h * dh..(h + 1) * dh;
        let probs = &cache.probs[h];
        let raw = &cache.raw[h];
        for i in 0..n {
            let dc = &dconcat.row(i)[cols.clone()];
            for j in 0..n {
                let a = probs.get(i, j);
                dprob[j] = dot(dc, &cache.v.row(j)[cols.clone()]);
                for (g, &c) in dv.row_mut(j)[cols.clone()].iter_mut().zip(dc) {
                    *g += a * c;
                }
            }
            softmax_backward(probs.row(i), &dprob, &mut dlogit);
            for j in 0..n {
                let ds = dlogit[j] * temp;
                let (fi, fj) = (fields[i], fields[j]);
                if let Some(gm) = grads.modulation.as_mut() {
                    let idx = fi * view.field_count + fj;
                    gm.set(h, idx, gm.get(h, idx) + ds * raw.get(i, j));
                }
                let draw = ds * view.w(h, fi, fj);
                if draw == 0.0 {
                    continue;
                }
                for c in cols.clone() {
                    let kj = cache.k.get(j, c);
                    let qi = cache.q.get(i, c);
                    dq.set(i, c, dq.get(i, c) + draw * kj);
                    dk.set(j, c, dk.get(j, c) + draw * qi);
                }
            }
        }
    }
    let mut dx = Matrix::zeros(n, d);
    for (i, &f) in fields.iter().enumerate() {
        let xi = x.row(i);
        let (sq, sk, sv) = (slot(view.wq, f), slot(view.wk, f), slot(view.wv, f));
        outer_acc(xi, dq.row(i), &mut grads.wq[sq]);
        outer_acc(xi, dk.row(i), &mut grads.wk[sk]);
        outer_acc(xi, dv.row(i), &mut grads.wv[sv]);
        let dxi = dx.row_mut(i);
        vec_mat_t_acc(dq.row(i), &view.wq[sq], dxi);
        vec_mat_t_acc(dk.row(i), &view.wk[sk], dxi);
        vec_mat_t_acc(dv.row(i), &view.wv[sv], dxi);
    }
    dx
}

/// Decomposed score matrix `s_h(i, j) = (q_{i,h} · k_{j,h}) · w^{(h)}_{f_i,f_j}`
/// for one sample and head.
pub fn score_decomposed(
    sample: &TokenSample,
    params: &DecomposedAttnParams,
    head: usize,
) -> Result<Matrix> {
    params.validate()?;
    if head >= params.heads {
        return config(format!("head {head} out of range {}", params.heads));
    }
    let view = params.view();
    view.check_sample(sample)?;
    let (_, cache) = decomposed_forward(&view, &sample.tokens, &sample.fields);
    Ok(cache.trace(&view, &sample.fields).scores.swap_remove(head))
}

pub fn forward_decomposed(batch: &TokenBatch, params: &DecomposedAttnParams) -> Result<Vec<AttnOutput>> {
    params.validate()?;
    let view = params.view();
    batch
        .samples
        .iter()
        .map(|s| {
            view.check_sample(s)?;
            let (output, cache) = decomposed_forward(&view, &s.tokens, &s.fields);
            Ok(AttnOutput {
                output,
                trace: cache.trace(&view, &s.fields),
            })
        })
        .collect()
}

/// Classic scaled dot-product multi-head attention with shared projections.
pub fn forward_standard(batch: &TokenBatch, params: &StandardAttnParams) -> Result<Vec<AttnOutput>> {
    let d = params.wo.rows();
    check_heads(d, params.heads)?;
    let dh = d / params.heads;
    let temp = 1.0 / (d as f64).sqrt();
    batch
        .samples
        .iter()
        .map(|s| {
            let x = &s.tokens;
            let n = x.rows();
            let q = x.matmul(&params.wq)?;
            let k = x.matmul(&params.wk)?;
            let v = x.matmul(&params.wv)?;
            let mut concat = Matrix::zeros(n, d);
            let mut scores = Vec::new();
            let mut weights = Vec::new();
            for h in 0..params.heads {
                let qh = column_block(&q, h * dh, dh);
                let kh = column_block(&k, h * dh, dh);
                let vh = column_block(&v, h * dh, dh);
                let sh = qh.matmul(&kh.transpose())?;
                let mut ah = Matrix::zeros(n, n);
                for i in 0..n {
                    let logits: Vec<f64> = sh.row(i).iter().map(|v| v * temp).collect();
                    ah.row_mut(i)
                        .copy_from_slice(&crate::numerics::softmax_row(&logits)?);
                }
                let oh = ah.matmul(&vh)?;
                for i in 0..n {
                    concat.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(oh.row(i));
                }
                scores.push(sh);
                weights.push(ah);
            }
            Ok(AttnOutput {
                output: concat.matmul(&params.wo)?,
                trace: AttnTrace { scores, weights },
            })
        })
        .collect()
}

pub(crate) struct NaiveCache {
    /// Per head, `q_{ij}`, `k_{ij}`, `v_{ij}` stacked at row `i·N + j`.
    q: Vec<Matrix>,
    k: Vec<Matrix>,
    v: Vec<Matrix>,
    raw: Vec<Matrix>,
    probs: Vec<Matrix>,
    concat: Matrix,
}

impl NaiveCache {
    pub fn trace(&self) -> AttnTrace {
        AttnTrace {
            scores: self.raw.clone(),
            weights: self.probs.clone(),
        }
    }
}

pub(crate) fn naive_forward(
    p: &NaiveView<'_>,
    x: &Matrix,
    fields: &[usize],
) -> (Matrix, NaiveCache) {
    let n = x.rows();
    let d = x.cols();
    let dh = d / p.heads;
    let temp = 1.0 / (d as f64).sqrt();
    let mut concat = Matrix::zeros(n, d);
    let mut cache_q = Vec::new();
    let mut cache_k = Vec::new();
    let mut cache_v = Vec::new();
    let mut raws = Vec::new();
    let mut probs = Vec::new();
    let mut logits = vec![0.0; n];
    for h in 0..p.heads {
        let mut qm = Matrix::zeros(n * n, dh);
        let mut km = Matrix::zeros(n * n, dh);
        let mut vm = Matrix::zeros(n * n, dh);
        let mut raw = Matrix::zeros(n, n);
        let mut prob = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let idx = p.index(h, fields[i], fields[j]);
                let row = i * n + j;
                vec_mat_acc(x.row(i), &p.wq[idx], qm.row_mut(row));
                vec_mat_acc(x.row(j), &p.wk[idx], km.row_mut(row));
                vec_mat_acc(x.row(j), &p.wv[idx], vm.row_mut(row));
                let r = dot(qm.row(row), km.row(row));
                raw.set(i, j, r);
                logits[j] = r * temp;
            }
            softmax_in_place(&mut logits);
            prob.row_mut(i).copy_from_slice(&logits);
            let out = &mut concat.row_mut(i)[h * dh..(h + 1) * dh];
            for (j, &a) in logits.iter().enumerate() {
                for (o, &vv) in out.iter_mut().zip(vm.row(i * n + j)) {
                    *o += a * vv;
                }
            }
        }
        cache_q.push(qm);
        cache_k.push(km);
        cache_v.push(vm);
        raws.push(raw);
        probs.push(prob);
    }
    let mut out = Matrix::zeros(n, d);
    for i in 0..n {
        vec_mat_acc(concat.row(i), p.wo, out.row_mut(i));
    }
    (
        out,
        NaiveCache {
            q: cache_q,
            k: cache_k,
            v: cache_v,
            raw: raws,
            probs,
            concat,
        },
    )
}

pub(crate) fn naive_backward(
    p: &NaiveView<'_>,
    x: &Matrix,
    fields: &[usize],
    cache: &NaiveCache,
    dout: &Matrix,
    grads: &mut AttnGrads,
) -> Matrix {
    let n = x.rows();
    let d = x.cols();
    let dh = d / p.heads;
    let temp = 1.0 / (d as f64).sqrt();
    let mut dconcat = Matrix::zeros(n, d);
    for i in 0..n {
        outer_acc(cache.concat.row(i), dout.row(i), &mut grads.wo);
        vec_mat_t_acc(dout.row(i), p.wo, dconcat.row_mut(i));
    }
    let mut dx = Matrix::zeros(n, d);
    let mut dprob = vec![0.0; n];
    let mut dlogit = vec![0.0; n];
    let mut tmp = vec![0.0; dh];
    for h in 0..p.heads {
        let probs = &cache.probs[h];
        for i in 0..n {
            let dc = &dconcat.row(i)[h * dh..(h + 1) * dh];
            for j in 0..n {
                dprob[j] = dot(dc, cache.v[h].row(i * n + j));
            }
            softmax_backward(probs.row(i), &dprob, &mut dlogit);
            for j in 0..n {
                let idx = p.index(h, fields[i], fields[j]);
                let row = i * n + j;
                let a = probs.get(i, j);
                // values
                for (t, &c) in tmp.iter_mut().zip(dc) {
                    *t = a * c;
                }
                outer_acc(x.row(j), &tmp, &mut grads.wv[idx]);
                vec_mat_t_acc(&tmp, &p.wv[idx], dx.row_mut(j));
                // queries and keys
                let ds = dlogit[j] * temp;
                for (t, &kv) in tmp.iter_mut().zip(cache.k[h].row(row)) {
                    *t = ds * kv;
                }
                outer_acc(x.row(i), &tmp, &mut grads.wq[idx]);
                vec_mat_t_acc(&tmp, &p.wq[idx], dx.row_mut(i));
                for (t, &qv) in tmp.iter_mut().zip(cache.q[h].row(row)) {
                    *t = ds * qv;
                }
                outer_acc(x.row(j), &tmp, &mut grads.wk[idx]);
                vec_mat_t_acc(&tmp, &p.wk[idx], dx.row_mut(j));
            }
        }
    }
    dx
}

impl NaivePairAttnParams {
    fn check_sample(&self, s: &TokenSample) -> Result<()> {
        if s.tokens.cols() != self.dim() {
            return config("token width does not match model width");
        }
        if let Some(&f) = s.fields.iter().find(|&&f| f >= self.field_count) {
            return Err(FatError::Internal(format!("field {f} has no pair projections")));
        }
        Ok(())
    }
}

/// Pair-specialized attention: `s(i, j) = q_{ij} · k_{ij} / √d` with
/// `q_{ij} = h_i W_Q^{(f_i,f_j)}`, `k_{ij} = h_j W_K^{(f_i,f_j)}` and values
/// `h_j W_V^{(f_i,f_j)}`.
pub fn forward_naive_pair(batch: &TokenBatch, params: &NaivePairAttnParams) -> Result<Vec<AttnOutput>> {
    check_heads(params.dim(), params.heads)?;
    batch
        .samples
        .iter()
        .map(|s| {
            params.check_sample(s)?;
            let (output, cache) = naive_forward(&params.view(), &s.tokens, &s.fields);
            Ok(AttnOutput {
                output,
                trace: AttnTrace {
                    scores: cache.raw,
                    weights: cache.probs,
                },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, group_relative_error, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_sample(n: usize, d: usize, rng: &mut ChaCha8Rng) -> TokenSample {
        TokenSample::new(Matrix::random_normal(n, d, 1.0, rng), (0..n).collect(), n).unwrap()
    }

    fn batch_of(s: TokenSample) -> TokenBatch {
        TokenBatch { samples: vec![s] }
    }

    fn rows_sum_to_one(trace: &AttnTrace) -> bool {
        trace
            .weights
            .iter()
            .all(|w| (0..w.rows()).all(|i| (w.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12))
    }

    #[test]
    fn score_scales_with_modulation() {
        let d = 4;
        let mut p = DecomposedAttnParams::init(2, d, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for m in p.wq.iter_mut().chain(p.wk.iter_mut()) {
            *m = Matrix::identity(d);
        }
        p.modulation.fill(2.0);
        let mut tokens = Matrix::zeros(2, d);
        tokens.set(0, 0, 1.0);
        tokens.set(1, 0, 1.0);
        let s = TokenSample::new(tokens, vec![0, 1], 2).unwrap();
        let scores = score_decomposed(&s, &p, 0).unwrap();
        assert!(scores.as_slice().iter().all(|&v| v == 2.0));

        p.modulation.fill(0.0);
        let scores = score_decomposed(&s, &p, 0).unwrap();
        assert!(scores.as_slice().iter().all(|&v| v == 0.0));
        assert!(score_decomposed(&s, &p, 1).is_err());
    }

    #[test]
    fn asymmetric_modulation_gives_asymmetric_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 4;
        let mut p = DecomposedAttnParams::init(2, d, 1, &mut rng).unwrap();
        p.set_w(0, 0, 1, 1.5);
        p.set_w(0, 1, 0, -0.5);
        let row = Matrix::random_normal(1, d, 1.0, &mut rng);
        let tokens = Matrix::from_fn(2, d, |_, c| row.get(0, c));
        let s = TokenSample::new(tokens, vec![0, 1], 2).unwrap();
        let scores = score_decomposed(&s, &p, 0).unwrap();
        assert!((scores.get(0, 1) - scores.get(1, 0)).abs() > 1e-6);
        let out = forward_decomposed(&batch_of(s), &p).unwrap();
        let a = &out[0].trace.weights[0];
        assert!((a.get(0, 1) - a.get(1, 0)).abs() > 1e-9);
    }

    #[test]
    fn single_token_output_ignores_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 6;
        let p = DecomposedAttnParams::init(3, d, 2, &mut rng).unwrap();
        let tokens = Matrix::random_normal(1, d, 1.0, &mut rng);
        let s = TokenSample::new(tokens.clone(), vec![2], 3).unwrap();
        let out = forward_decomposed(&batch_of(s), &p).unwrap();
        let expected = tokens.matmul(&p.wv[2]).unwrap().matmul(&p.wo).unwrap();
        assert!(out[0].output.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn decomposed_reduces_to_standard_with_shared_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (f, d, h) = (4, 8, 2);
        let std = StandardAttnParams::init(d, h, &mut rng).unwrap();
        let mut dec = DecomposedAttnParams::init(f, d, h, &mut rng).unwrap();
        dec.wq = vec![std.wq.clone(); f];
        dec.wk = vec![std.wk.clone(); f];
        dec.wv = vec![std.wv.clone(); f];
        dec.wo = std.wo.clone();
        dec.modulation.fill(1.0);
        let batch = batch_of(random_sample(f, d, &mut rng));
        let a = forward_decomposed(&batch, &dec).unwrap();
        let b = forward_standard(&batch, &std).unwrap();
        assert!(a[0].output.max_abs_diff(&b[0].output) <= 1e-12);
        assert!(rows_sum_to_one(&a[0].trace) && rows_sum_to_one(&b[0].trace));
    }

    #[test]
    fn naive_matches_decomposed_under_instantiation() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (f, d, h) = (4, 8, 2);
        let mut dec = DecomposedAttnParams::init(f, d, h, &mut rng).unwrap();
        dec.modulation = Matrix::random_normal(h, f * f, 1.0, &mut rng);
        let naive = NaivePairAttnParams::from_decomposed(&dec, DEFAULT_NAIVE_BUDGET).unwrap();
        let batch = batch_of(random_sample(f, d, &mut rng));
        let a = forward_decomposed(&batch, &dec).unwrap();
        let b = forward_naive_pair(&batch, &naive).unwrap();
        assert!(a[0].output.max_abs_diff(&b[0].output) <= 1e-12);
        for hd in 0..h {
            assert!(a[0].trace.scores[hd].max_abs_diff(&b[0].trace.scores[hd]) <= 1e-12);
        }
        assert!(rows_sum_to_one(&b[0].trace));
    }

    #[test]
    fn naive_with_identical_pairs_matches_standard() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (f, d, h) = (3, 4, 2);
        let std = StandardAttnParams::init(d, h, &mut rng).unwrap();
        let naive = NaivePairAttnParams::from_standard(&std, f, DEFAULT_NAIVE_BUDGET).unwrap();
        let batch = batch_of(random_sample(f, d, &mut rng));
        let a = forward_standard(&batch, &std).unwrap();
        let b = forward_naive_pair(&batch, &naive).unwrap();
        assert!(a[0].output.max_abs_diff(&b[0].output) <= 1e-12);
    }

    #[test]
    fn naive_differs_from_independent_decomposed() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (f, d, h) = (3, 4, 1);
        let naive = NaivePairAttnParams::init(f, d, h, DEFAULT_NAIVE_BUDGET, &mut rng).unwrap();
        let dec = DecomposedAttnParams::init(f, d, h, &mut rng).unwrap();
        let batch = batch_of(random_sample(f, d, &mut rng));
        let a = forward_decomposed(&batch, &dec).unwrap();
        let b = forward_naive_pair(&batch, &naive).unwrap();
        assert!(a[0].output.max_abs_diff(&b[0].output) > 1e-6);
    }

    #[test]
    fn naive_budget_guard_reports_count() {
        let err = NaivePairAttnParams::check_budget(1000, 128, DEFAULT_NAIVE_BUDGET).unwrap_err();
        match err {
            FatError::Resource { count, limit, .. } => {
                assert_eq!(count, 3 * 1000u128.pow(2) * 128u128.pow(2));
                assert_eq!(limit, DEFAULT_NAIVE_BUDGET);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn standard_identical_tokens_and_zero_query_give_uniform_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let (n, d) = (5, 4);
        let mut p = StandardAttnParams::init(d, 2, &mut rng).unwrap();
        let row = Matrix::random_normal(1, d, 1.0, &mut rng);
        let same = TokenSample::new(Matrix::from_fn(n, d, |_, c| row.get(0, c)), (0..n).collect(), n)
            .unwrap();
        let out = forward_standard(&batch_of(same), &p).unwrap();
        for w in &out[0].trace.weights {
            assert!(w.as_slice().iter().all(|&a| (a - 0.2).abs() < 1e-15));
        }
        p.wq = Matrix::zeros(d, d);
        let out = forward_standard(&batch_of(random_sample(n, d, &mut rng)), &p).unwrap();
        for w in &out[0].trace.weights {
            assert!(w.as_slice().iter().all(|&a| (a - 0.2).abs() < 1e-15));
        }
    }

    #[test]
    fn decomposed_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (f, d) = (4, 8);
        let p = DecomposedAttnParams::init(f, d, 2, &mut rng).unwrap();
        let s = random_sample(f, d, &mut rng);
        let perm = [2, 0, 3, 1];
        let a = forward_decomposed(&batch_of(s.clone()), &p).unwrap();
        let b = forward_decomposed(&batch_of(s.permuted(&perm)), &p).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            for c in 0..d {
                assert!((b[0].output.get(new, c) - a[0].output.get(old, c)).abs() <= 1e-12);
            }
        }
    }

    /// Loss `Σ out ⊙ U` through the decomposed kernel; checks every group.
    #[test]
    fn decomposed_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let (f, d, h) = (3, 4, 2);
        let mut p = DecomposedAttnParams::init(f, d, h, &mut rng).unwrap();
        p.modulation = Matrix::random_normal(h, f * f, 1.0, &mut rng);
        let s = random_sample(f, d, &mut rng);
        let upstream = Matrix::random_normal(f, d, 1.0, &mut rng);

        let view = p.view();
        let (_, cache) = decomposed_forward(&view, &s.tokens, &s.fields);
        let mut grads = AttnGrads::zeros_like(&view);
        let dx = decomposed_backward(&view, &s.tokens, &s.fields, &cache, &upstream, &mut grads);

        let loss = |p: &DecomposedAttnParams, x: &Matrix| {
            let (out, _) = decomposed_forward(&p.view(), x, &s.fields);
            out.dot(&upstream)
        };
        let check = |analytic: &Matrix, perturb: &dyn Fn(&mut DecomposedAttnParams) -> &mut Matrix| {
            let base = {
                let mut q = p.clone();
                perturb(&mut q).as_slice().to_vec()
            };
            let fd = finite_diff_grad(
                |vals| {
                    let mut q = p.clone();
                    perturb(&mut q).as_mut_slice().copy_from_slice(vals);
                    loss(&q, &s.tokens)
                },
                &base,
                1e-5,
            )
            .unwrap();
            let err = group_relative_error(analytic.as_slice(), &fd);
            assert!(err < 1e-6, "relative error {err}");
        };
        for fi in 0..f {
            check(&grads.wq[fi], &|q| &mut q.wq[fi]);
            check(&grads.wk[fi], &|q| &mut q.wk[fi]);
            check(&grads.wv[fi], &|q| &mut q.wv[fi]);
        }
        check(grads.modulation.as_ref().unwrap(), &|q| &mut q.modulation);
        check(&grads.wo, &|q| &mut q.wo);

        let fd = finite_diff_grad(
            |vals| loss(&p, &Matrix::new(f, d, vals.to_vec()).unwrap()),
            s.tokens.as_slice(),
            1e-5,
        )
        .unwrap();
        for (a, b) in dx.as_slice().iter().zip(&fd) {
            assert!(relative_error(*a, *b, 1e-6) < 1e-5);
        }
    }

    #[test]
    fn naive_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (f, d, h) = (2, 4, 2);
        let p = NaivePairAttnParams::init(f, d, h, DEFAULT_NAIVE_BUDGET, &mut rng).unwrap();
        let s = random_sample(f, d, &mut rng);
        let upstream = Matrix::random_normal(f, d, 1.0, &mut rng);
        let view = p.view();
        let (_, cache) = naive_forward(&view, &s.tokens, &s.fields);
        let mut grads = view.grads();
        let dx = naive_backward(&view, &s.tokens, &s.fields, &cache, &upstream, &mut grads);
        let loss = |p: &NaivePairAttnParams, x: &Matrix| {
            naive_forward(&p.view(), x, &s.fields).0.dot(&upstream)
        };

        fn role_mut(q: &mut NaivePairAttnParams, role: usize, idx: usize) -> &mut Matrix {
            match role {
                0 => &mut q.wq[idx],
                1 => &mut q.wk[idx],
                _ => &mut q.wv[idx],
            }
        }
        fn grad_mut(q: &mut AttnGrads, role: usize, idx: usize) -> &mut Matrix {
            match role {
                0 => &mut q.wq[idx],
                1 => &mut q.wk[idx],
                _ => &mut q.wv[idx],
            }
        }
        for idx in 0..p.wq.len() {
            for role in 0..3 {
                let base = role_mut(&mut p.clone(), role, idx).as_slice().to_vec();
                let fd = finite_diff_grad(
                    |vals| {
                        let mut q = p.clone();
                        role_mut(&mut q, role, idx).as_mut_slice().copy_from_slice(vals);
                        loss(&q, &s.tokens)
                    },
                    &base,
                    1e-5,
                )
                .unwrap();
                let analytic = grad_mut(&mut grads, role, idx);
                for (a, b) in analytic.as_slice().iter().zip(&fd) {
                    assert!(relative_error(*a, *b, 1e-6) < 1e-5, "{a} vs {b}");
                }
            }
        }
        let fd = finite_diff_grad(
            |vals| loss(&p, &Matrix::new(f, d, vals.to_vec()).unwrap()),
            s.tokens.as_slice(),
            1e-5,
        )
        .unwrap();
        for (a, b) in dx.as_slice().iter().zip(&fd) {
            assert!(relative_error(*a, *b, 1e-6) < 1e-5);
        }
    }
}
