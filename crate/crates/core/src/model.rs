//! The full stack: `L` blocks of `Z ← FFN(LayerNorm(Attn(Z))) + Z` over the
//! field tokens, a sum-pooled sigmoid head, clamped BCE, analytic gradients
//! for every parameter group, parameter accounting and checkpoints.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{
    decomposed_backward, decomposed_forward, naive_backward, naive_forward, AttnCache, AttnGrads,
    AttnTrace, AttnView, NaiveCache, NaivePairAttnParams, NaiveView, DEFAULT_NAIVE_BUDGET,
    MODULATION_INIT_STD,
};
use crate::error::{config, FatError, Result};
use crate::fields::{
    embed_batch_with, embedding_backward, FieldEmbeddingParams, FieldSchema, RawSample, TokenBatch,
    TokenSample,
};
use crate::hypernet::{compose_all, compose_backward, HypernetLayer, Role, Selection};
use crate::hypernet::{read_f64, read_u64};
use crate::numerics::{
    adam_step, dot, layer_norm_backward, layer_norm_forward, outer_acc, sigmoid, vec_mat_acc, vec_mat_t_acc,
    AdamState, Matrix,
};

/// Lower/upper clamp applied to probabilities inside the BCE loss.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Per-field projections stored explicitly.
    Decomposed,
    /// Per-field projections generated from shared bases.
    DecomposedHypernet,
    /// Shared projections, no modulation.
    Standard,
    /// Projections specialized per ordered field pair.
    NaivePair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    pub field_bias: bool,
    /// When off, `w ≡ 1`.
    pub modulation: bool,
    /// When off, one `W_Q` is shared across fields.
    pub field_alignment: bool,
}

impl Default for Ablations {
    fn default() -> Self {
        Ablations {
            field_bias: true,
            modulation: true,
            field_alignment: true,
        }
    }
}

fn default_ln_eps() -> f64 {
    1e-5
}

fn default_budget() -> u128 {
    DEFAULT_NAIVE_BUDGET
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FatConfig {
    pub fields: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Basis count `M` (hypernetwork only).
    pub bases: usize,
    /// Top-K width (hypernetwork only).
    pub top_k: usize,
    pub meta_dim: usize,
    pub ffn_hidden: usize,
    pub variant: Variant,
    #[serde(default)]
    pub ablations: Ablations,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    #[serde(default = "default_budget")]
    pub naive_budget: u128,
}

impl FatConfig {
    /// Decomposed model with `H = 2`, `L = 2`, `M = 4`, `K = 2`, FFN width `4d`.
    pub fn for_schema(schema: &FieldSchema) -> Self {
        let d = schema.embed_dim();
        FatConfig {
            fields: schema.field_count(),
            dim: d,
            heads: if d % 2 == 0 { 2 } else { 1 },
            layers: 2,
            bases: 4,
            top_k: 2,
            meta_dim: schema.meta_dim().max(1),
            ffn_hidden: 4 * d,
            variant: Variant::Decomposed,
            ablations: Ablations::default(),
            ln_eps: default_ln_eps(),
            naive_budget: DEFAULT_NAIVE_BUDGET,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fields == 0 || self.layers == 0 {
            return config("fields and layers must be at least 1");
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return config(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.ffn_hidden < self.dim {
            return config(format!("ffn_hidden {} must be at least dim {}", self.ffn_hidden, self.dim));
        }
        if self.variant == Variant::DecomposedHypernet {
            if self.top_k == 0 || self.top_k > self.bases {
                return config(format!("top_k {} must satisfy 1 <= K <= M = {}", self.top_k, self.bases));
            }
            if self.meta_dim == 0 {
                return config("meta_dim must be at least 1 for the hypernetwork");
            }
        }
        if !(self.ln_eps > 0.0) {
            return config("ln_eps must be positive");
        }
        Ok(())
    }

    fn uses_modulation(&self) -> bool {
        self.ablations.modulation
            && matches!(self.variant, Variant::Decomposed | Variant::DecomposedHypernet)
    }

    /// One `W_Q` for every field.
    fn shared_q(&self) -> bool {
        self.variant == Variant::Standard
            || (!self.ablations.field_alignment
                && matches!(self.variant, Variant::Decomposed | Variant::DecomposedHypernet))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// Explicit projections: one per field, one shared, or pair matrices for
    /// the naïve variant. Empty when the hypernetwork generates the role.
    pub wq: Vec<Matrix>,
    pub wk: Vec<Matrix>,
    pub wv: Vec<Matrix>,
    pub hypernet: Option<HypernetLayer>,
    /// `H × F²`, absent when modulation is off.
    pub modulation: Option<Matrix>,
    pub wo: Matrix,
    pub ln_gain: Matrix,
    pub ln_shift: Matrix,
    pub ffn_w1: Matrix,
    pub ffn_b1: Matrix,
    pub ffn_w2: Matrix,
    pub ffn_b2: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FatParams {
    pub config: FatConfig,
    pub schema: FieldSchema,
    pub embeddings: FieldEmbeddingParams,
    /// Meta-embeddings `φ_f` shared by every hypernetwork layer.
    pub meta: Option<Matrix>,
    pub layers: Vec<LayerParams>,
    /// `1 × d` head vector.
    pub head: Matrix,
}

impl FatParams {
    pub fn init<R: Rng + ?Sized>(cfg: &FatConfig, schema: &FieldSchema, rng: &mut R) -> Result<Self> {
        let config = cfg;
        config.validate()?;
        if schema.field_count() != config.fields {
            return Err(FatError::Config(format!(
                "config declares {} fields but schema has {}",
                config.fields,
                schema.field_count()
            )));
        }
        let (f, d, h) = (config.fields, config.dim, config.heads);
        if config.variant == Variant::NaivePair {
            NaivePairAttnParams::check_budget(f, d, config.naive_budget)?;
        }
        let std = 1.0 / (d as f64).sqrt();
        let mut embeddings = FieldEmbeddingParams {
            tables: schema
                .fields()
                .iter()
                .map(|fd| Matrix::random_normal(fd.vocab_size, d, std, rng))
                .collect(),
            biases: Matrix::random_normal(f, d, 0.01, rng),
        };
        if !config.ablations.field_bias {
            embeddings.biases.fill(0.0);
        }
        let meta = (config.variant == Variant::DecomposedHypernet)
            .then(|| Matrix::random_normal(f, config.meta_dim, 1.0, rng));
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let mut mats = |count: usize, cols: usize| -> Vec<Matrix> {
                (0..count).map(|_| Matrix::random_normal(d, cols, std, rng)).collect()
            };
            let (wq, wk, wv, hypernet) = match config.variant {
                Variant::Decomposed => {
                    let q = if config.shared_q() { 1 } else { f };
                    (mats(q, d), mats(f, d), mats(f, d), None)
                }
                Variant::Standard => (mats(1, d), mats(1, d), mats(1, d), None),
                Variant::NaivePair => {
                    let n = h * f * f;
                    (mats(n, d / h), mats(n, d / h), mats(n, d / h), None)
                }
                Variant::DecomposedHypernet => {
                    let wq = if config.shared_q() { mats(1, d) } else { Vec::new() };
                    let hyper = HypernetLayer::init(d, config.bases, config.meta_dim, rng);
                    (wq, Vec::new(), Vec::new(), Some(hyper))
                }
            };
            let modulation = config
                .uses_modulation()
                .then(|| Matrix::random_normal(h, f * f, MODULATION_INIT_STD, rng));
            let hidden = config.ffn_hidden;
            layers.push(LayerParams {
                wq,
                wk,
                wv,
                hypernet,
                modulation,
                wo: Matrix::random_normal(d, d, std, rng),
                ln_gain: Matrix::filled(1, d, 1.0),
                ln_shift: Matrix::zeros(1, d),
                ffn_w1: Matrix::random_normal(d, hidden, (2.0 / d as f64).sqrt(), rng),
                ffn_b1: Matrix::zeros(1, hidden),
                ffn_w2: Matrix::random_normal(hidden, d, 1.0 / (hidden as f64).sqrt(), rng),
                ffn_b2: Matrix::zeros(1, d),
            });
        }
        let head = Matrix::random_normal(1, d, 1.0 / d as f64, rng);
        Ok(FatParams {
            config: config.clone(),
            schema: schema.clone(),
            embeddings,
            meta,
            layers,
            head,
        })
    }

    /// [`init`](Self::init) from a ChaCha8 stream seeded with `seed`.
    pub fn seeded(config: &FatConfig, schema: &FieldSchema, seed: u64) -> Result<Self> {
        Self::init(config, schema, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
    }

    /// Same structure, every entry zero; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.fill(0.0);
        }
        out.embeddings.biases.fill(0.0);
        out
    }

    /// Every learnable tensor with a stable name, in declared order.
    /// Groups disabled by the configuration are absent.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (f, t) in self.embeddings.tables.iter().enumerate() {
            out.push((format!("embed.table.{f}"), t));
        }
        if self.config.ablations.field_bias {
            out.push(("embed.bias".to_string(), &self.embeddings.biases));
        }
        if let Some(m) = &self.meta {
            out.push(("meta".to_string(), m));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            for (role, mats) in [("wq", &layer.wq), ("wk", &layer.wk), ("wv", &layer.wv)] {
                for (i, m) in mats.iter().enumerate() {
                    out.push((format!("layer{l}.{role}.{i}"), m));
                }
            }
            if let Some(h) = &layer.hypernet {
                for role in Role::ALL {
                    let r = role.index();
                    for (m, b) in h.bases[r].iter().enumerate() {
                        out.push((format!("layer{l}.hyper.{}.basis.{m}", role.name()), b));
                    }
                    let s = &h.scorers[r];
                    for (name, t) in [("w1", &s.w1), ("b1", &s.b1), ("w2", &s.w2), ("b2", &s.b2)] {
                        out.push((format!("layer{l}.hyper.{}.scorer.{name}", role.name()), t));
                    }
                }
            }
            if let Some(m) = &layer.modulation {
                out.push((format!("layer{l}.modulation"), m));
            }
            for (name, t) in [
                ("wo", &layer.wo),
                ("ln_gain", &layer.ln_gain),
                ("ln_shift", &layer.ln_shift),
                ("ffn_w1", &layer.ffn_w1),
                ("ffn_b1", &layer.ffn_b1),
                ("ffn_w2", &layer.ffn_w2),
                ("ffn_b2", &layer.ffn_b2),
            ] {
                out.push((format!("layer{l}.{name}"), t));
            }
        }
        out.push(("head".to_string(), &self.head));
        out
    }

    /// Mutable counterpart of [`named_tensors`](Self::named_tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        out.extend(self.embeddings.tables.iter_mut());
        if self.config.ablations.field_bias {
            out.push(&mut self.embeddings.biases);
        }
        if let Some(m) = self.meta.as_mut() {
            out.push(m);
        }
        for layer in self.layers.iter_mut() {
            out.extend(layer.wq.iter_mut());
            out.extend(layer.wk.iter_mut());
            out.extend(layer.wv.iter_mut());
            if let Some(h) = layer.hypernet.as_mut() {
                for (bases, s) in h.bases.iter_mut().zip(h.scorers.iter_mut()) {
                    out.extend(bases.iter_mut());
                    out.push(&mut s.w1);
                    out.push(&mut s.b1);
                    out.push(&mut s.w2);
                    out.push(&mut s.b2);
                }
            }
            if let Some(m) = layer.modulation.as_mut() {
                out.push(m);
            }
            out.push(&mut layer.wo);
            out.push(&mut layer.ln_gain);
            out.push(&mut layer.ln_shift);
            out.push(&mut layer.ffn_w1);
            out.push(&mut layer.ffn_b1);
            out.push(&mut layer.ffn_w2);
            out.push(&mut layer.ffn_b2);
        }
        out.push(&mut self.head);
        out
    }

    pub fn scalar_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Composed hypernetwork projections for every layer (empty for other
    /// variants).
    pub(crate) fn compose_layers(&self) -> Result<Vec<Option<Composed>>> {
        self.layers
            .iter()
            .map(|layer| match (&layer.hypernet, &self.meta) {
                (Some(h), Some(meta)) => {
                    let (mats, sels) = compose_all(h, meta, self.config.top_k)?;
                    Ok(Some(Composed { mats, sels }))
                }
                _ => Ok(None),
            })
            .collect()
    }

    /// Per-field projection matrices actually used by layer `l` for `role`
    /// (explicit, shared, or composed).
    pub fn layer_projections(&self, l: usize, role: Role) -> Result<Vec<Matrix>> {
        let layer = &self.layers[l];
        let explicit = match role {
            Role::Q => &layer.wq,
            Role::K => &layer.wk,
            Role::V => &layer.wv,
        };
        if !explicit.is_empty() {
            return Ok(explicit.clone());
        }
        let composed = self.compose_layers()?;
        let c = composed[l]
            .as_ref()
            .ok_or_else(|| FatError::Internal("role has neither explicit nor generated projections".into()))?;
        Ok(c.mats[role.index()].clone())
    }

    /// Per-head modulation `w` of layer `l` as `H` matrices of `F × F`;
    /// all ones when modulation is off.
    pub fn modulation_matrices(&self, l: usize) -> Vec<Matrix> {
        let (h, f) = (self.config.heads, self.config.fields);
        match &self.layers[l].modulation {
            Some(m) => (0..h)
                .map(|hd| Matrix::from_fn(f, f, |i, j| m.get(hd, i * f + j)))
                .collect(),
            None => vec![Matrix::filled(f, f, 1.0); h],
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Composed {
    /// `[role][field]`
    mats: Vec<Vec<Matrix>>,
    sels: Vec<Vec<Selection>>,
}

enum Kernel<'a> {
    Decomposed(AttnView<'a>),
    Naive(NaiveView<'a>),
}

enum KernelCache {
    Decomposed(AttnCache),
    Naive(NaiveCache),
}

fn kernel<'a>(params: &'a FatParams, l: usize, composed: Option<&'a Composed>) -> Kernel<'a> {
    let layer = &params.layers[l];
    let cfg = &params.config;
    if cfg.variant == Variant::NaivePair {
        return Kernel::Naive(NaiveView {
            wq: &layer.wq,
            wk: &layer.wk,
            wv: &layer.wv,
            wo: &layer.wo,
            heads: cfg.heads,
            field_count: cfg.fields,
        });
    }
    let pick = |explicit: &'a [Matrix], role: Role| -> &'a [Matrix] {
        if explicit.is_empty() {
            &composed.expect("hypernetwork layer without composition").mats[role.index()]
        } else {
            explicit
        }
    };
    Kernel::Decomposed(AttnView {
        wq: pick(&layer.wq, Role::Q),
        wk: pick(&layer.wk, Role::K),
        wv: pick(&layer.wv, Role::V),
        modulation: layer.modulation.as_ref(),
        wo: &layer.wo,
        heads: cfg.heads,
        field_count: cfg.fields,
    })
}

struct LayerCache {
    input: Matrix,
    attn: KernelCache,
    xhat: Matrix,
    inv_std: Vec<f64>,
    normed: Matrix,
    hidden_pre: Matrix,
}

struct SampleCache {
    layers: Vec<LayerCache>,
    pooled: Vec<f64>,
}

fn forward_sample(
    params: &FatParams,
    composed: &[Option<Composed>],
    sample: &TokenSample,
    keep_trace: bool,
) -> (f64, SampleCache, Vec<AttnTrace>) {
    let cfg = &params.config;
    let (n, d, hidden) = (sample.len(), cfg.dim, cfg.ffn_hidden);
    let mut z = sample.tokens.clone();
    let mut caches = Vec::with_capacity(cfg.layers);
    let mut traces = Vec::new();
    for (l, layer) in params.layers.iter().enumerate() {
        let (attn_out, attn_cache) = match kernel(params, l, composed[l].as_ref()) {
            Kernel::Decomposed(view) => {
                let (out, cache) = decomposed_forward(&view, &z, &sample.fields);
                if keep_trace {
                    traces.push(cache.trace(&view, &sample.fields));
                }
                (out, KernelCache::Decomposed(cache))
            }
            Kernel::Naive(view) => {
                let (out, cache) = naive_forward(&view, &z, &sample.fields);
                if keep_trace {
                    traces.push(cache.trace());
                }
                (out, KernelCache::Naive(cache))
            }
        };
        let mut xhat = Matrix::zeros(n, d);
        let mut normed = Matrix::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            inv_std.push(layer_norm_forward(
                attn_out.row(i),
                layer.ln_gain.as_slice(),
                layer.ln_shift.as_slice(),
                cfg.ln_eps,
                xhat.row_mut(i),
                normed.row_mut(i),
            ));
        }
        let mut hidden_pre = Matrix::zeros(n, hidden);
        let mut next = z.clone();
        let mut act = vec![0.0; hidden];
        for i in 0..n {
            let hp = hidden_pre.row_mut(i);
            hp.copy_from_slice(layer.ffn_b1.as_slice());
            vec_mat_acc(normed.row(i), &layer.ffn_w1, hp);
            for (a, &p) in act.iter_mut().zip(hp.iter()) {
                *a = p.max(0.0);
            }
            let out = next.row_mut(i);
            for (o, b) in out.iter_mut().zip(layer.ffn_b2.as_slice()) {
                *o += b;
            }
            vec_mat_acc(&act, &layer.ffn_w2, out);
        }
        caches.push(LayerCache {
            input: std::mem::replace(&mut z, next),
            attn: attn_cache,
            xhat,
            inv_std,
            normed,
            hidden_pre,
        });
    }
    let mut pooled = vec![0.0; d];
    for i in 0..n {
        for (p, v) in pooled.iter_mut().zip(z.row(i)) {
            *p += v;
        }
    }
    let logit = dot(params.head.as_slice(), &pooled);
    (
        logit,
        SampleCache {
            layers: caches,
            pooled,
        },
        traces,
    )
}

struct LayerGrads {
    attn: AttnGrads,
    ln_gain: Vec<f64>,
    ln_shift: Vec<f64>,
    ffn_w1: Matrix,
    ffn_b1: Vec<f64>,
    ffn_w2: Matrix,
    ffn_b2: Vec<f64>,
}

/// Gradient accumulator for a shard of samples. Attention gradients are
/// held w.r.t. the matrices the kernel saw (composed ones for hypernetwork
/// roles) and chained into the hypernetwork after reduction.
struct Accum {
    embeddings: FieldEmbeddingParams,
    layers: Vec<LayerGrads>,
    head: Vec<f64>,
    loss: f64,
    clamped: usize,
}

impl Accum {
    fn new(params: &FatParams, composed: &[Option<Composed>]) -> Self {
        let layers = (0..params.layers.len())
            .map(|l| {
                let layer = &params.layers[l];
                let attn = match kernel(params, l, composed[l].as_ref()) {
                    Kernel::Decomposed(view) => AttnGrads::zeros_like(&view),
                    Kernel::Naive(view) => view.grads(),
                };
                LayerGrads {
                    attn,
                    ln_gain: vec![0.0; layer.ln_gain.len()],
                    ln_shift: vec![0.0; layer.ln_shift.len()],
                    ffn_w1: Matrix::zeros(layer.ffn_w1.rows(), layer.ffn_w1.cols()),
                    ffn_b1: vec![0.0; layer.ffn_b1.len()],
                    ffn_w2: Matrix::zeros(layer.ffn_w2.rows(), layer.ffn_w2.cols()),
                    ffn_b2: vec![0.0; layer.ffn_b2.len()],
                }
            })
            .collect();
        Accum {
            embeddings: FieldEmbeddingParams {
                tables: params
                    .embeddings
                    .tables
                    .iter()
                    .map(|t| Matrix::zeros(t.rows(), t.cols()))
                    .collect(),
                biases: Matrix::zeros(params.embeddings.biases.rows(), params.embeddings.biases.cols()),
            },
            layers,
            head: vec![0.0; params.head.len()],
            loss: 0.0,
            clamped: 0,
        }
    }

    fn merge(&mut self, other: Accum) {
        fn add(a: &mut [f64], b: &[f64]) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        fn add_all(a: &mut [Matrix], b: &[Matrix]) {
            a.iter_mut().zip(b).for_each(|(x, y)| x.add_scaled(y, 1.0));
        }
        add_all(&mut self.embeddings.tables, &other.embeddings.tables);
        self.embeddings.biases.add_scaled(&other.embeddings.biases, 1.0);
        for (a, b) in self.layers.iter_mut().zip(other.layers) {
            add_all(&mut a.attn.wq, &b.attn.wq);
            add_all(&mut a.attn.wk, &b.attn.wk);
            add_all(&mut a.attn.wv, &b.attn.wv);
            if let (Some(x), Some(y)) = (a.attn.modulation.as_mut(), b.attn.modulation.as_ref()) {
                x.add_scaled(y, 1.0);
            }
            a.attn.wo.add_scaled(&b.attn.wo, 1.0);
            add(&mut a.ln_gain, &b.ln_gain);
            add(&mut a.ln_shift, &b.ln_shift);
            a.ffn_w1.add_scaled(&b.ffn_w1, 1.0);
            add(&mut a.ffn_b1, &b.ffn_b1);
            a.ffn_w2.add_scaled(&b.ffn_w2, 1.0);
            add(&mut a.ffn_b2, &b.ffn_b2);
        }
        add(&mut self.head, &other.head);
        self.loss += other.loss;
        self.clamped += other.clamped;
    }
}

fn backward_sample(
    params: &FatParams,
    composed: &[Option<Composed>],
    sample: &TokenSample,
    cache: &SampleCache,
    dlogit: f64,
    acc: &mut Accum,
) -> Matrix {
    let cfg = &params.config;
    let (n, d, hidden) = (sample.len(), cfg.dim, cfg.ffn_hidden);
    for (g, p) in acc.head.iter_mut().zip(&cache.pooled) {
        *g += dlogit * p;
    }
    let mut dz = Matrix::zeros(n, d);
    for i in 0..n {
        for (g, h) in dz.row_mut(i).iter_mut().zip(params.head.as_slice()) {
            *g = dlogit * h;
        }
    }
    let mut dact = vec![0.0; hidden];
    let mut dnormed = vec![0.0; d];
    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let lc = &cache.layers[l];
        let lg = &mut acc.layers[l];
        let mut dattn = Matrix::zeros(n, d);
        for i in 0..n {
            let dout = dz.row(i);
            for (g, v) in lg.ffn_b2.iter_mut().zip(dout) {
                *g += v;
            }
            let pre = lc.hidden_pre.row(i);
            let act: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
            outer_acc(&act, dout, &mut lg.ffn_w2);
            dact.iter_mut().for_each(|v| *v = 0.0);
            vec_mat_t_acc(dout, &layer.ffn_w2, &mut dact);
            for (da, &p) in dact.iter_mut().zip(pre) {
                if p <= 0.0 {
                    *da = 0.0;
                }
            }
            for (g, v) in lg.ffn_b1.iter_mut().zip(&dact) {
                *g += v;
            }
            outer_acc(lc.normed.row(i), &dact, &mut lg.ffn_w1);
            dnormed.iter_mut().for_each(|v| *v = 0.0);
            vec_mat_t_acc(&dact, &layer.ffn_w1, &mut dnormed);
            layer_norm_backward(
                &dnormed,
                lc.xhat.row(i),
                lc.inv_std[i],
                layer.ln_gain.as_slice(),
                &mut lg.ln_gain,
                &mut lg.ln_shift,
                dattn.row_mut(i),
            );
        }
        let dinput = match (kernel(params, l, composed[l].as_ref()), &lc.attn) {
            (Kernel::Decomposed(view), KernelCache::Decomposed(c)) => {
                decomposed_backward(&view, &lc.input, &sample.fields, c, &dattn, &mut lg.attn)
            }
            (Kernel::Naive(view), KernelCache::Naive(c)) => {
                naive_backward(&view, &lc.input, &sample.fields, c, &dattn, &mut lg.attn)
            }
            _ => unreachable!("kernel and cache variants always agree"),
        };
        // residual path
        dz.add_scaled(&dinput, 1.0);
    }
    dz
}

/// Mean clamped binary cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BceLoss {
    pub value: f64,
    /// Probabilities that fell outside `[1e-12, 1 − 1e-12]` and were clamped.
    pub clamped: usize,
}

fn bce_term(p: f64, y: f64) -> (f64, bool) {
    let clamped = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let term = -(y * clamped.ln() + (1.0 - y) * (1.0 - clamped).ln());
    (term, clamped != p)
}

pub fn loss_bce(probs: &[f64], labels: &[f64]) -> Result<BceLoss> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(FatError::Domain(format!(
            "loss needs equal, non-zero lengths (probs {}, labels {})",
            probs.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    let mut clamped = 0;
    for (&p, &y) in probs.iter().zip(labels) {
        if p.is_nan() {
            return Err(FatError::Domain("probability is NaN".into()));
        }
        let (t, c) = bce_term(p, y);
        total += t;
        clamped += c as usize;
    }
    Ok(BceLoss {
        value: total / probs.len() as f64,
        clamped,
    })
}

/// Predictions for a tokenized batch, with optional per-layer traces.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub logits: Vec<f64>,
    /// `traces[sample][layer]` when requested.
    pub traces: Option<Vec<Vec<AttnTrace>>>,
}

fn check_tokens(params: &FatParams, batch: &TokenBatch) -> Result<()> {
    let cfg = &params.config;
    for (s, sample) in batch.samples.iter().enumerate() {
        if sample.tokens.cols() != cfg.dim {
            return config(format!("sample {s}: token width {} != dim {}", sample.tokens.cols(), cfg.dim));
        }
        if sample.len() != cfg.fields {
            return config(format!("sample {s}: {} tokens for {} fields", sample.len(), cfg.fields));
        }
        if sample.fields.iter().any(|&f| f >= cfg.fields) {
            return config(format!("sample {s}: field id out of range"));
        }
    }
    Ok(())
}

/// `p = σ(w_head · Σ_i Z_i^{(L)})` for every sample.
pub fn forward(batch: &TokenBatch, params: &FatParams, with_traces: bool) -> Result<Prediction> {
    check_tokens(params, batch)?;
    let composed = params.compose_layers()?;
    let results: Vec<(f64, Vec<AttnTrace>)> = batch
        .samples
        .par_iter()
        .map(|s| {
            let (logit, _, traces) = forward_sample(params, &composed, s, with_traces);
            (logit, traces)
        })
        .collect();
    let logits: Vec<f64> = results.iter().map(|r| r.0).collect();
    Ok(Prediction {
        probs: logits.iter().map(|&z| sigmoid(z)).collect(),
        logits,
        traces: with_traces.then(|| results.into_iter().map(|r| r.1).collect()),
    })
}

/// Embeds raw samples with this model's tables and biases.
pub fn embed(params: &FatParams, raw: &[RawSample]) -> Result<TokenBatch> {
    embed_batch_with(&params.schema, raw, &params.embeddings, params.config.ablations.field_bias)
}

/// Predicted click probabilities for raw samples.
pub fn predict(params: &FatParams, raw: &[RawSample]) -> Result<Vec<f64>> {
    Ok(forward(&embed(params, raw)?, params, false)?.probs)
}

/// Loss value and gradients of every enabled parameter group.
#[derive(Debug, Clone)]
pub struct GradOutput {
    pub loss: BceLoss,
    /// Same layout as the parameters.
    pub grads: FatParams,
}

/// Samples per gradient shard. Shards are reduced in index order so results
/// do not depend on the worker count.
pub const SHARD_SIZE: usize = 16;

/// Full gradient of `loss_bce ∘ forward` over a batch of raw samples.
pub fn grad(params: &FatParams, raw: &[RawSample], labels: &[f64]) -> Result<GradOutput> {
    if raw.len() != labels.len() || raw.is_empty() {
        return Err(FatError::Domain(format!(
            "batch has {} samples and {} labels",
            raw.len(),
            labels.len()
        )));
    }
    let batch = embed(params, raw)?;
    check_tokens(params, &batch)?;
    let composed = params.compose_layers()?;
    let scale = 1.0 / raw.len() as f64;
    let use_bias = params.config.ablations.field_bias;
    let shards: Vec<Accum> = (0..raw.len())
        .collect::<Vec<_>>()
        .par_chunks(SHARD_SIZE)
        .map(|idx| {
            let mut acc = Accum::new(params, &composed);
            for &s in idx {
                let sample = &batch.samples[s];
                let (logit, cache, _) = forward_sample(params, &composed, sample, false);
                let p = sigmoid(logit);
                let (term, clamped) = bce_term(p, labels[s]);
                acc.loss += term;
                acc.clamped += clamped as usize;
                let dtokens =
                    backward_sample(params, &composed, sample, &cache, (p - labels[s]) * scale, &mut acc);
                embedding_backward(&raw[s], &dtokens, use_bias, &mut acc.embeddings);
            }
            acc
        })
        .collect();
    let mut shards = shards.into_iter();
    let mut total = shards.next().expect("non-empty batch");
    for s in shards {
        total.merge(s);
    }
    let grads = finish_grads(params, &composed, total.embeddings, total.layers, total.head)?;
    Ok(GradOutput {
        loss: BceLoss {
            value: total.loss * scale,
            clamped: total.clamped,
        },
        grads,
    })
}

fn finish_grads(
    params: &FatParams,
    composed: &[Option<Composed>],
    embeddings: FieldEmbeddingParams,
    layers: Vec<LayerGrads>,
    head: Vec<f64>,
) -> Result<FatParams> {
    let mut out = params.zeros_like();
    out.embeddings = embeddings;
    if !params.config.ablations.field_bias {
        out.embeddings.biases.fill(0.0);
    }
    let mut dmeta = params.meta.as_ref().map(|m| Matrix::zeros(m.rows(), m.cols()));
    for (l, lg) in layers.into_iter().enumerate() {
        let src = &params.layers[l];
        let dst = &mut out.layers[l];
        let attn = lg.attn;
        if !src.wq.is_empty() {
            dst.wq = attn.wq.clone();
        }
        if !src.wk.is_empty() {
            dst.wk = attn.wk.clone();
        }
        if !src.wv.is_empty() {
            dst.wv = attn.wv.clone();
        }
        if let (Some(h), Some(c), Some(meta), Some(dm)) =
            (&src.hypernet, composed[l].as_ref(), &params.meta, dmeta.as_mut())
        {
            let generated: Vec<Option<&[Matrix]>> = [
                (&src.wq, &attn.wq),
                (&src.wk, &attn.wk),
                (&src.wv, &attn.wv),
            ]
            .iter()
            .map(|(explicit, g)| explicit.is_empty().then_some(g.as_slice()))
            .collect();
            let hg = dst.hypernet.as_mut().expect("gradient layout mirrors params");
            compose_backward(h, meta, &c.sels, &generated, hg, dm);
        }
        dst.modulation = attn.modulation;
        dst.wo = attn.wo;
        dst.ln_gain = Matrix::row_vector(lg.ln_gain);
        dst.ln_shift = Matrix::row_vector(lg.ln_shift);
        dst.ffn_w1 = lg.ffn_w1;
        dst.ffn_b1 = Matrix::row_vector(lg.ffn_b1);
        dst.ffn_w2 = lg.ffn_w2;
        dst.ffn_b2 = Matrix::row_vector(lg.ffn_b2);
    }
    out.meta = dmeta;
    out.head = Matrix::row_vector(head);
    Ok(out)
}

/// Mean BCE of the model on a batch, without gradients.
pub fn loss(params: &FatParams, raw: &[RawSample], labels: &[f64]) -> Result<BceLoss> {
    let probs = predict(params, raw)?;
    loss_bce(&probs, labels)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCount {
    /// Q/K/V projection parameters (explicit, pair-specialized, or the
    /// hypernetwork's bases and scorers).
    pub projections: u128,
    pub modulation: u128,
    /// `projections + modulation`.
    pub interaction: u128,
    pub output_projection: u128,
    pub layer_norm: u128,
    pub ffn: u128,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub per_layer: LayerCount,
    pub layers: usize,
    pub embeddings: u128,
    pub field_bias: u128,
    /// `F · k`, shared across layers.
    pub meta_embeddings: u128,
    pub head: u128,
    pub total: u128,
    /// `total` minus embedding tables and field biases.
    pub non_embedding: u128,
}

/// Scorer MLP size for one role: `k → 2k → M` with biases.
pub fn scorer_size(meta_dim: usize, bases: usize) -> u128 {
    let (k, m) = (meta_dim as u128, bases as u128);
    k * 2 * k + 2 * k + 2 * k * m + m
}

/// Per-layer parameter count of the hypernetwork path:
/// `3Md² + F·k + 3 · scorer`.
pub fn hypernet_path_count(config: &FatConfig) -> u128 {
    let d = config.dim as u128;
    3 * config.bases as u128 * d * d
        + config.fields as u128 * config.meta_dim as u128
        + 3 * scorer_size(config.meta_dim, config.bases)
}

/// Closed-form parameter counts; `total_vocab` (`n`) only enters the
/// embedding tables.
pub fn count_params(config: &FatConfig, total_vocab: usize) -> ParamCount {
    let (f, d, h) = (config.fields as u128, config.dim as u128, config.heads as u128);
    let hidden = config.ffn_hidden as u128;
    let shared_q = config.shared_q();
    let projections = match config.variant {
        Variant::Decomposed if shared_q => d * d + 2 * f * d * d,
        Variant::Decomposed => 3 * f * d * d,
        Variant::Standard => 3 * d * d,
        Variant::NaivePair => 3 * f * f * d * d,
        Variant::DecomposedHypernet => {
            let bank = 3 * config.bases as u128 * d * d + 3 * scorer_size(config.meta_dim, config.bases);
            if shared_q {
                bank + d * d
            } else {
                bank
            }
        }
    };
    let modulation = if config.uses_modulation() { h * f * f } else { 0 };
    let per_layer = LayerCount {
        projections,
        modulation,
        interaction: projections + modulation,
        output_projection: d * d,
        layer_norm: 2 * d,
        ffn: d * hidden + hidden + hidden * d + d,
    };
    let per_layer_total = per_layer.interaction
        + per_layer.output_projection
        + per_layer.layer_norm
        + per_layer.ffn;
    let embeddings = total_vocab as u128 * d;
    let field_bias = if config.ablations.field_bias { f * d } else { 0 };
    let meta_embeddings = if config.variant == Variant::DecomposedHypernet {
        f * config.meta_dim as u128
    } else {
        0
    };
    let head = d;
    let total = embeddings
        + field_bias
        + meta_embeddings
        + head
        + config.layers as u128 * per_layer_total;
    ParamCount {
        per_layer,
        layers: config.layers,
        embeddings,
        field_bias,
        meta_embeddings,
        head,
        total,
        non_embedding: total - embeddings - field_bias,
    }
}

/// Adam hyper-parameters shared by every tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Independent Adam state for every tensor of a model.
#[derive(Debug, Clone)]
pub struct Optimizer {
    states: Vec<AdamState>,
}

impl Optimizer {
    pub fn new(params: &FatParams, cfg: &AdamConfig) -> Result<Self> {
        if !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) || !(cfg.eps > 0.0) {
            return config(format!("invalid Adam settings {cfg:?}"));
        }
        let states = params
            .named_tensors()
            .iter()
            .map(|(_, t)| AdamState::new(t.rows(), t.cols(), cfg.lr).with_betas(cfg.beta1, cfg.beta2, cfg.eps))
            .collect();
        Ok(Optimizer { states })
    }

    pub fn steps(&self) -> u64 {
        self.states.first().map_or(0, |s| s.step)
    }

    pub fn step(&mut self, params: &mut FatParams, grads: &FatParams) -> Result<()> {
        let gs: Vec<&Matrix> = grads.named_tensors().into_iter().map(|(_, t)| t).collect();
        let ps = params.tensors_mut();
        if ps.len() != gs.len() || ps.len() != self.states.len() {
            return Err(FatError::Internal("gradient layout does not match parameters".into()));
        }
        for ((p, g), st) in ps.into_iter().zip(gs).zip(self.states.iter_mut()) {
            adam_step(p, g, st)?;
        }
        Ok(())
    }
}

const CKPT_MAGIC: &[u8; 8] = b"FATCKPT1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: FatConfig,
    schema: crate::fields::SchemaSpec,
    tensors: Vec<(String, usize, usize)>,
}

impl FatParams {
    /// Layout: magic, u64 header length, JSON header (config, schema,
    /// tensor manifest), then every tensor as little-endian f64 in declared
    /// order.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let tensors = self.named_tensors();
        let header = CheckpointHeader {
            config: self.config.clone(),
            schema: self.schema.to_spec(),
            tensors: tensors
                .iter()
                .map(|(n, t)| (n.clone(), t.rows(), t.cols()))
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for (_, t) in tensors {
            for v in t.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(FatError::Data("not a model checkpoint".into()));
        }
        let len = read_u64(&mut r)? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        let header: CheckpointHeader = serde_json::from_slice(&buf)?;
        let schema = crate::fields::build_schema(&header.schema)?;
        // structure only; every value is overwritten below
        let mut rng = rand_chacha::ChaCha8Rng::from_seed([0; 32]);
        let mut params = FatParams::init(&header.config, &schema, &mut rng)?;
        let expected: Vec<(String, usize, usize)> = params
            .named_tensors()
            .iter()
            .map(|(n, t)| (n.clone(), t.rows(), t.cols()))
            .collect();
        if expected != header.tensors {
            return Err(FatError::Data("checkpoint tensor manifest does not match its config".into()));
        }
        for t in params.tensors_mut() {
            for v in t.as_mut_slice() {
                *v = read_f64(&mut r)?;
            }
            if !t.is_finite() {
                return Err(FatError::Data("checkpoint holds non-finite values".into()));
            }
        }
        if !params.config.ablations.field_bias {
            params.embeddings.biases.fill(0.0);
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{forward_standard, StandardAttnParams};
    use crate::fields::{build_schema, FieldKind, FieldSpec, FieldValue, SchemaSpec};
    use rand_chacha::ChaCha8Rng;

    fn schema(f: usize, vocab: usize, d: usize) -> FieldSchema {
        build_schema(&SchemaSpec {
            fields: (0..f)
                .map(|i| FieldSpec {
                    name: format!("f{i}"),
                    kind: FieldKind::Categorical,
                    cardinality: Some(vocab),
                    bins: None,
                    edges: None,
                    max_seq_len: None,
                })
                .collect(),
            embed_dim: d,
            meta_dim: 3,
        })
        .unwrap()
    }

    fn cfg(f: usize, d: usize, h: usize, l: usize, variant: Variant) -> FatConfig {
        FatConfig {
            fields: f,
            dim: d,
            heads: h,
            layers: l,
            bases: 4,
            top_k: 2,
            meta_dim: 3,
            ffn_hidden: 4 * d,
            variant,
            ablations: Ablations::default(),
            ln_eps: 1e-5,
            naive_budget: DEFAULT_NAIVE_BUDGET,
        }
    }

    fn raw_batch(f: usize, vocab: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<RawSample> {
        (0..n)
            .map(|_| (0..f).map(|_| FieldValue::Id(rng.random_range(0..vocab))).collect())
            .collect()
    }

    #[test]
    fn zero_head_predicts_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = schema(3, 5, 4);
        let mut p = FatParams::init(&cfg(3, 4, 2, 2, Variant::Decomposed), &s, &mut rng).unwrap();
        p.head.fill(0.0);
        let probs = predict(&p, &raw_batch(3, 5, 6, &mut rng)).unwrap();
        assert!(probs.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn bce_examples() {
        let l = loss_bce(&[0.5], &[1.0]).unwrap();
        assert!((l.value - 2f64.ln()).abs() < 1e-15 && l.clamped == 0);
        let l = loss_bce(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(l.value < 1e-11 && l.clamped == 2);
        let l = loss_bce(&[0.5, 0.5], &[0.0, 1.0]).unwrap();
        assert!((l.value - 2f64.ln()).abs() < 1e-15);
        assert!(loss_bce(&[0.5], &[]).is_err());
    }

    /// L = 1, one field, d = 2, identity-like parameters: the block reduces to
    /// `p = σ(w · (FFN(LN(W_O W_V h)) + h))`, evaluated by hand below.
    #[test]
    fn single_token_single_layer_hand_evaluation() {
        let s = schema(1, 1, 2);
        let mut c = cfg(1, 2, 1, 1, Variant::Decomposed);
        c.ffn_hidden = 2;
        c.ln_eps = 1e-12;
        let mut p = FatParams::init(&c, &s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        p.embeddings.tables[0] = Matrix::new(1, 2, vec![3.0, 1.0]).unwrap();
        p.embeddings.biases.fill(0.0);
        let layer = &mut p.layers[0];
        layer.wv[0] = Matrix::identity(2);
        layer.wo = Matrix::identity(2);
        layer.ffn_w1 = Matrix::identity(2);
        layer.ffn_w2 = Matrix::new(2, 2, vec![2.0, 0.0, 0.0, 1.0]).unwrap();
        p.head = Matrix::row_vector(vec![0.5, -0.25]);
        // attention output = h = [3, 1]; LN → [1, −1]; relu → [1, 0];
        // W2 → [2, 0]; residual → [5, 1]; logit = 2.5 − 0.25 = 2.25
        let probs = predict(&p, &[vec![FieldValue::Id(0)]]).unwrap();
        assert!((probs[0] - sigmoid(2.25)).abs() < 1e-10, "{}", probs[0]);
    }

    #[test]
    fn prediction_is_permutation_invariant_for_all_variants() {
        for variant in [
            Variant::Decomposed,
            Variant::DecomposedHypernet,
            Variant::Standard,
            Variant::NaivePair,
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let s = schema(4, 6, 8);
            let p = FatParams::init(&cfg(4, 8, 2, 2, variant), &s, &mut rng).unwrap();
            let batch = embed(&p, &raw_batch(4, 6, 3, &mut rng)).unwrap();
            let base = forward(&batch, &p, false).unwrap().probs;
            let permuted = TokenBatch {
                samples: batch.samples.iter().map(|t| t.permuted(&[3, 1, 0, 2])).collect(),
            };
            let other = forward(&permuted, &p, false).unwrap().probs;
            for (a, b) in base.iter().zip(&other) {
                assert!((a - b).abs() <= 1e-12, "{variant:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn ablated_decomposed_equals_standard_variant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = schema(3, 4, 4);
        let mut ac = cfg(3, 4, 2, 2, Variant::Decomposed);
        ac.ablations.field_alignment = false;
        ac.ablations.modulation = false;
        let mut abl = FatParams::init(&ac, &s, &mut rng).unwrap();
        let std = FatParams::init(&cfg(3, 4, 2, 2, Variant::Standard), &s, &mut rng).unwrap();
        abl.embeddings = std.embeddings.clone();
        abl.head = std.head.clone();
        for (a, b) in abl.layers.iter_mut().zip(&std.layers) {
            assert_eq!((a.wq.len(), a.wk.len(), a.wv.len()), (1, 3, 3));
            a.wq[0] = b.wq[0].clone();
            a.wk.iter_mut().for_each(|m| *m = b.wk[0].clone());
            a.wv.iter_mut().for_each(|m| *m = b.wv[0].clone());
            a.wo = b.wo.clone();
            a.ffn_w1 = b.ffn_w1.clone();
            a.ffn_w2 = b.ffn_w2.clone();
        }
        let raw = raw_batch(3, 4, 5, &mut rng);
        assert_eq!(predict(&abl, &raw).unwrap(), predict(&std, &raw).unwrap());
    }

    #[test]
    fn standard_variant_layer_matches_reference_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = schema(3, 4, 4);
        let p = FatParams::init(&cfg(3, 4, 2, 1, Variant::Standard), &s, &mut rng).unwrap();
        let batch = embed(&p, &raw_batch(3, 4, 2, &mut rng)).unwrap();
        let l = &p.layers[0];
        let reference = StandardAttnParams {
            wq: l.wq[0].clone(),
            wk: l.wk[0].clone(),
            wv: l.wv[0].clone(),
            wo: l.wo.clone(),
            heads: 2,
        };
        let composed = p.compose_layers().unwrap();
        let expected = forward_standard(&batch, &reference).unwrap();
        for (s, e) in batch.samples.iter().zip(&expected) {
            let (_, _, traces) = forward_sample(&p, &composed, s, true);
            for (a, b) in traces[0].weights.iter().zip(&e.trace.weights) {
                assert!(a.max_abs_diff(b) <= 1e-12);
            }
        }
    }

    #[test]
    fn head_gradient_for_zero_labels_at_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = schema(3, 5, 4);
        let mut p = FatParams::init(&cfg(3, 4, 2, 1, Variant::Decomposed), &s, &mut rng).unwrap();
        p.head.fill(0.0);
        let raw = raw_batch(3, 5, 4, &mut rng);
        let out = grad(&p, &raw, &[0.0; 4]).unwrap();
        // dL/dw = mean_s (p − y) · pooled_s = 0.5 · mean pooled
        let batch = embed(&p, &raw).unwrap();
        let composed = p.compose_layers().unwrap();
        let mut mean = vec![0.0; 4];
        for sample in &batch.samples {
            let (_, cache, _) = forward_sample(&p, &composed, sample, false);
            for (m, v) in mean.iter_mut().zip(&cache.pooled) {
                *m += v / 4.0;
            }
        }
        for (g, m) in out.grads.head.as_slice().iter().zip(&mean) {
            assert!((g - 0.5 * m).abs() < 1e-14);
        }
    }

    #[test]
    fn ablated_groups_are_absent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = schema(3, 5, 4);
        let mut c = cfg(3, 4, 2, 1, Variant::Decomposed);
        c.ablations.modulation = false;
        c.ablations.field_bias = false;
        let p = FatParams::init(&c, &s, &mut rng).unwrap();
        let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert!(!names.iter().any(|n| n.contains("modulation") || n == "embed.bias"));
        let out = grad(&p, &raw_batch(3, 5, 4, &mut rng), &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(out.grads.layers[0].modulation.is_none());
        assert!(out.grads.embeddings.biases.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parameter_count_formulas() {
        let mut c = cfg(2, 4, 2, 1, Variant::Decomposed);
        assert_eq!(count_params(&c, 10).per_layer.interaction, 104);
        c.variant = Variant::NaivePair;
        assert_eq!(count_params(&c, 10).per_layer.interaction, 192);
        for variant in [Variant::Decomposed, Variant::DecomposedHypernet, Variant::NaivePair, Variant::Standard] {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut c = cfg(3, 4, 2, 2, variant);
            c.ablations.field_alignment = variant != Variant::Decomposed;
            let s = schema(3, 7, 4);
            let p = FatParams::init(&c, &s, &mut rng).unwrap();
            let counted = count_params(&c, s.total_vocab());
            assert_eq!(counted.total, p.scalar_count() as u128, "{variant:?}");
        }
    }

    #[test]
    fn vocabulary_only_changes_embedding_counts() {
        let c = cfg(4, 8, 2, 2, Variant::DecomposedHypernet);
        let a = count_params(&c, 100);
        let b = count_params(&c, 1_000_000);
        assert_eq!(a.per_layer, b.per_layer);
        assert_eq!(a.non_embedding, b.non_embedding);
        assert_ne!(a.embeddings, b.embeddings);
        assert_eq!(
            hypernet_path_count(&c),
            a.per_layer.projections + a.meta_embeddings
        );
    }

    #[test]
    fn naive_variant_respects_budget() {
        let s = schema(1000, 1, 128);
        let mut c = cfg(1000, 128, 8, 1, Variant::NaivePair);
        c.ffn_hidden = 128;
        let err = FatParams::init(&c, &s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, FatError::Resource { count, .. } if count > 100_000_000));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        for variant in [Variant::Decomposed, Variant::DecomposedHypernet] {
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let s = schema(3, 5, 4);
            let p = FatParams::init(&cfg(3, 4, 2, 2, variant), &s, &mut rng).unwrap();
            let mut buf = Vec::new();
            p.write_checkpoint(&mut buf).unwrap();
            let q = FatParams::read_checkpoint(buf.as_slice()).unwrap();
            assert_eq!(p, q);
            let mut buf2 = Vec::new();
            q.write_checkpoint(&mut buf2).unwrap();
            assert_eq!(buf, buf2);
        }
    }

    /// Central differences on a sample of coordinates from every tensor,
    /// compared norm-wise per tensor. Coordinates whose estimate moves with
    /// the step size are skipped.
    fn check_gradients(c: &FatConfig, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = schema(c.fields, 5, c.dim);
        let p = FatParams::init(c, &s, &mut rng).unwrap();
        let raw = raw_batch(c.fields, 5, 6, &mut rng);
        let labels = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let analytic = grad(&p, &raw, &labels).unwrap();
        let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
        let grads: Vec<Vec<f64>> = analytic
            .grads
            .named_tensors()
            .iter()
            .map(|(_, t)| t.as_slice().to_vec())
            .collect();
        let h = 1e-5;
        for (ti, name) in names.iter().enumerate() {
            let len = grads[ti].len();
            let coords: Vec<usize> = (0..len.min(8)).map(|_| rng.random_range(0..len)).collect();
            let mut a = Vec::new();
            let mut b = Vec::new();
            for &ci in &coords {
                let eval = |delta: f64| {
                    let mut q = p.clone();
                    q.tensors_mut()[ti].as_mut_slice()[ci] += delta;
                    loss(&q, &raw, &labels).unwrap().value
                };
                let coarse = (eval(h) - eval(-h)) / (2.0 * h);
                let fine = (eval(h / 4.0) - eval(-h / 4.0)) / (h / 2.0);
                // a ReLU kink inside the step makes the estimate meaningless
                if (coarse - fine).abs() > 1e-6 * (1.0 + coarse.abs()) {
                    continue;
                }
                a.push(grads[ti][ci]);
                b.push(coarse);
            }
            let err = crate::numerics::group_relative_error(&a, &b);
            let scale = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(err < 1e-5 || scale < 1e-9, "{:?} {name}: rel {err} ({a:?} vs {b:?})", c.variant);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for variant in [
            Variant::Decomposed,
            Variant::DecomposedHypernet,
            Variant::Standard,
            Variant::NaivePair,
        ] {
            check_gradients(&cfg(4, 8, 2, 2, variant), 11);
        }
        let mut c = cfg(4, 8, 2, 2, Variant::DecomposedHypernet);
        c.ablations = Ablations {
            field_bias: false,
            modulation: false,
            field_alignment: false,
        };
        check_gradients(&c, 12);
    }

    #[test]
    fn gradient_is_independent_of_thread_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = schema(4, 5, 8);
        let p = FatParams::init(&cfg(4, 8, 2, 2, Variant::DecomposedHypernet), &s, &mut rng).unwrap();
        let raw = raw_batch(4, 5, 70, &mut rng);
        let labels: Vec<f64> = (0..70).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| grad(&p, &raw, &labels).unwrap())
        };
        let (one, four) = (run(1), run(4));
        assert_eq!(one.loss, four.loss);
        assert_eq!(one.grads, four.grads);
    }

    #[test]
    fn adam_training_reduces_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let s = schema(3, 4, 4);
        let mut p = FatParams::init(&cfg(3, 4, 2, 1, Variant::DecomposedHypernet), &s, &mut rng).unwrap();
        let raw = raw_batch(3, 4, 32, &mut rng);
        let labels: Vec<f64> = raw.iter().map(|r| (r[0].ids()[0] == r[1].ids()[0]) as u8 as f64).collect();
        let mut opt = Optimizer::new(&p, &AdamConfig { lr: 0.02, ..AdamConfig::default() }).unwrap();
        let start = loss(&p, &raw, &labels).unwrap().value;
        for _ in 0..60 {
            let g = grad(&p, &raw, &labels).unwrap();
            opt.step(&mut p, &g.grads).unwrap();
        }
        assert_eq!(opt.steps(), 60);
        assert!(loss(&p, &raw, &labels).unwrap().value < 0.5 * start);
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(3, 6, 4, 1, Variant::Decomposed);
        assert!(c.validate().is_err());
        c.heads = 3;
        c.ffn_hidden = 2;
        assert!(c.validate().is_err());
        let mut c = cfg(3, 4, 2, 1, Variant::DecomposedHypernet);
        c.top_k = 5;
        assert!(c.validate().is_err());
    }
}
