//! Experiment plumbing: power-law fits, the generalization-bound calculator,
//! interaction-matrix export, gradient checks, seeded training runs and
//! width sweeps.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{auc, generate_synthetic, read_dataset, LabeledDataset, SyntheticSpec};
use crate::error::{config, domain, FatError, Result};
use crate::fields::{build_schema, FieldSchema, RawSample, SchemaSpec};
use crate::hypernet::selections;
use crate::model::{
    count_params, grad, loss, predict, Ablations, AdamConfig, FatConfig, FatParams, Optimizer,
    ParamCount, Variant,
};
use crate::numerics::Matrix;

/// One `(N_params, ΔAUC)` observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub n_params: f64,
    pub delta_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub a: f64,
    pub beta: f64,
    pub r2: f64,
    pub used: usize,
    /// Points dropped because their ΔAUC was not positive.
    pub warnings: Vec<String>,
}

/// Least-squares fit of `ΔAUC = a · N^β` on `(ln N, ln ΔAUC)`.
pub fn fit_power_law(points: &[ScalingPoint]) -> Result<PowerLawFit> {
    let mut warnings = Vec::new();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, p) in points.iter().enumerate() {
        if !(p.n_params > 0.0) || !p.n_params.is_finite() {
            return domain(format!("point {i}: n_params must be positive and finite"));
        }
        if !(p.delta_auc > 0.0) || !p.delta_auc.is_finite() {
            warnings.push(format!(
                "point {i} (N = {}) excluded: delta_auc {} is not positive",
                p.n_params, p.delta_auc
            ));
            continue;
        }
        xs.push(p.n_params.ln());
        ys.push(p.delta_auc.ln());
    }
    if xs.len() < 3 {
        return domain(format!("power-law fit needs 3 usable points, got {}", xs.len()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return domain("power-law fit needs at least two distinct parameter counts");
    }
    let beta = sxy / sxx;
    let intercept = my - beta * mx;
    let sse: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let r = y - (intercept + beta * x);
            r * r
        })
        .sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    Ok(PowerLawFit {
        a: intercept.exp(),
        beta,
        r2,
        used: xs.len(),
        warnings,
    })
}

/// Inputs of the single-layer generalization bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub fields: usize,
    pub dim: usize,
    pub samples: u64,
    /// Embedding norm bound `R`.
    pub r: f64,
    pub b_q: f64,
    pub b_k: f64,
    pub b_v: f64,
    pub b_w: f64,
    pub delta: f64,
    pub c_lead: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundResult {
    pub gap: f64,
    pub complexity_term: f64,
    pub confidence_term: f64,
}

/// `c · √(Fd² + F²)/√m · (R² B_Q B_K B_w √d + R B_V B_w) + √(ln(1/δ)/m)`.
/// The vocabulary size does not appear.
pub fn eval_bound(x: &BoundInputs) -> Result<BoundResult> {
    if x.fields == 0 || x.dim == 0 || x.samples == 0 {
        return domain("F, d and m must be positive");
    }
    for (name, v) in [
        ("R", x.r),
        ("B_Q", x.b_q),
        ("B_K", x.b_k),
        ("B_V", x.b_v),
        ("B_w", x.b_w),
        ("c_lead", x.c_lead),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return domain(format!("{name} must be positive and finite, got {v}"));
        }
    }
    if !(x.delta > 0.0 && x.delta < 1.0) {
        return domain(format!("delta must lie in (0, 1), got {}", x.delta));
    }
    let (f, d, m) = (x.fields as f64, x.dim as f64, x.samples as f64);
    let capacity = (f * d * d + f * f).sqrt() / m.sqrt();
    let norms = x.r * x.r * x.b_q * x.b_k * x.b_w * d.sqrt() + x.r * x.b_v * x.b_w;
    let complexity_term = x.c_lead * capacity * norms;
    let confidence_term = ((1.0 / x.delta).ln() / m).sqrt();
    Ok(BoundResult {
        gap: complexity_term + confidence_term,
        complexity_term,
        confidence_term,
    })
}

/// Per-head `w` of one layer plus the head mean.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionMatrix {
    pub field_names: Vec<String>,
    pub heads: Vec<Matrix>,
    pub mean: Matrix,
}

pub fn export_interaction_matrix(params: &FatParams, layer: usize) -> Result<InteractionMatrix> {
    if !matches!(
        params.config.variant,
        Variant::Decomposed | Variant::DecomposedHypernet
    ) {
        return domain(format!(
            "{:?} attention has no field-pair modulation to export",
            params.config.variant
        ));
    }
    if layer >= params.layers.len() {
        return domain(format!("layer {layer} out of range (model has {})", params.layers.len()));
    }
    let heads = params.modulation_matrices(layer);
    let f = params.config.fields;
    let h = heads.len() as f64;
    let mean = Matrix::from_fn(f, f, |i, j| heads.iter().map(|m| m.get(i, j)).sum::<f64>() / h);
    Ok(InteractionMatrix {
        field_names: params.schema.names(),
        heads,
        mean,
    })
}

impl InteractionMatrix {
    /// Long format: `matrix,from,to,value` where `matrix` is `head<h>` or
    /// `mean`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv_to(std::fs::File::create(path)?)
    }

    pub fn write_csv_to<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["matrix", "from", "to", "value"])?;
        let named = self
            .heads
            .iter()
            .enumerate()
            .map(|(h, m)| (format!("head{h}"), m))
            .chain(std::iter::once(("mean".to_string(), &self.mean)));
        for (label, m) in named {
            for (i, from) in self.field_names.iter().enumerate() {
                for (j, to) in self.field_names.iter().enumerate() {
                    w.write_record([label.as_str(), from, to, &m.get(i, j).to_string()])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path)?;
        let mut entries: Vec<(String, String, String, f64)> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != 4 {
                return Err(FatError::Data(format!("{} line {line}: expected 4 cells", path.display())));
            }
            let v: f64 = rec[3].parse().map_err(|_| {
                FatError::Data(format!("{} line {line}: '{}' is not a number", path.display(), &rec[3]))
            })?;
            entries.push((rec[0].to_string(), rec[1].to_string(), rec[2].to_string(), v));
        }
        let mut names: Vec<String> = Vec::new();
        for (_, from, _, _) in &entries {
            if !names.contains(from) {
                names.push(from.clone());
            }
        }
        let f = names.len();
        if f == 0 || entries.len() % (f * f) != 0 {
            return Err(FatError::Data(format!("{}: not a square interaction export", path.display())));
        }
        let blocks = entries.len() / (f * f);
        let mut mats: Vec<Matrix> = Vec::with_capacity(blocks);
        for b in 0..blocks {
            let data = entries[b * f * f..(b + 1) * f * f].iter().map(|e| e.3).collect();
            mats.push(Matrix::new(f, f, data)?);
        }
        let mean = mats
            .pop()
            .filter(|_| entries[entries.len() - 1].0 == "mean")
            .ok_or_else(|| FatError::Data(format!("{}: missing mean block", path.display())))?;
        Ok(InteractionMatrix {
            field_names: names,
            heads: mats,
            mean,
        })
    }

    /// Mean `|w̄|` over `pairs` and over every other off-diagonal pair whose
    /// reverse is not listed either.
    pub fn planted_contrast(&self, pairs: &[(usize, usize)]) -> (f64, f64) {
        let f = self.mean.rows();
        let listed = |i: usize, j: usize| pairs.iter().any(|&(a, b)| (a, b) == (i, j) || (a, b) == (j, i));
        let planted: Vec<f64> = pairs.iter().map(|&(i, j)| self.mean.get(i, j).abs()).collect();
        let mut other = Vec::new();
        for i in 0..f {
            for j in 0..f {
                if i != j && !listed(i, j) {
                    other.push(self.mean.get(i, j).abs());
                }
            }
        }
        let avg = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        (avg(&planted), avg(&other))
    }
}

/// Finite-difference agreement of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub name: String,
    pub coordinates: usize,
    /// Probes skipped because the step moved a Top-K selection.
    pub excluded: usize,
    pub relative_error: f64,
}

/// Norms below this are compared on an absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-7;

/// Compares analytic gradients with central differences of step `h`,
/// tensor by tensor, as `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖, floor)`. At most
/// `max_coords` coordinates per tensor are probed (all when `None`), chosen
/// by `seed`.
pub fn gradient_check(
    params: &FatParams,
    raw: &[RawSample],
    labels: &[f64],
    h: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<Vec<GroupCheck>> {
    let analytic = grad(params, raw, labels)?;
    let grads: Vec<Vec<f64>> = analytic
        .grads
        .named_tensors()
        .into_iter()
        .map(|(_, t)| t.as_slice().to_vec())
        .collect();
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let base_sel = all_selections(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(names.len());
    for (ti, name) in names.into_iter().enumerate() {
        let len = grads[ti].len();
        let mut coords: Vec<usize> = (0..len).collect();
        if let Some(k) = max_coords.filter(|&k| k < len) {
            coords.shuffle(&mut rng);
            coords.truncate(k);
            coords.sort_unstable();
        }
        let mut a = Vec::with_capacity(coords.len());
        let mut b = Vec::with_capacity(coords.len());
        let mut excluded = 0;
        for &ci in &coords {
            let orig = probe.tensors_mut()[ti].as_slice()[ci];
            probe.tensors_mut()[ti].as_mut_slice()[ci] = orig + h;
            let up = loss(&probe, raw, labels)?.value;
            let crossed_up = all_selections(&probe)? != base_sel;
            probe.tensors_mut()[ti].as_mut_slice()[ci] = orig - h;
            let down = loss(&probe, raw, labels)?.value;
            let crossed = crossed_up || all_selections(&probe)? != base_sel;
            probe.tensors_mut()[ti].as_mut_slice()[ci] = orig;
            if crossed {
                excluded += 1;
                continue;
            }
            a.push(grads[ti][ci]);
            b.push((up - down) / (2.0 * h));
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let rel = norm(&diff) / norm(&a).max(norm(&b)).max(GRAD_CHECK_FLOOR);
        out.push(GroupCheck {
            name,
            coordinates: a.len(),
            excluded,
            relative_error: rel,
        });
    }
    Ok(out)
}

fn default_true() -> bool {
    true
}

/// Model section of a run configuration; unset sizes follow the schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_bases")]
    pub bases: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub meta_dim: Option<usize>,
    /// Defaults to `4d`.
    #[serde(default)]
    pub ffn_hidden: Option<usize>,
    #[serde(default)]
    pub ablations: Ablations,
    #[serde(default)]
    pub ln_eps: Option<f64>,
    #[serde(default)]
    pub naive_budget: Option<u128>,
}

fn default_variant() -> Variant {
    Variant::Decomposed
}
fn default_heads() -> usize {
    2
}
fn default_layers() -> usize {
    2
}
fn default_bases() -> usize {
    4
}
fn default_top_k() -> usize {
    2
}

impl Default for ModelSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all model fields have defaults")
    }
}

impl ModelSpec {
    pub fn resolve(&self, schema: &FieldSchema) -> FatConfig {
        let mut c = FatConfig::for_schema(schema);
        let d = self.dim.unwrap_or(schema.embed_dim());
        c.dim = d;
        c.variant = self.variant;
        c.heads = self.heads;
        c.layers = self.layers;
        c.bases = self.bases;
        c.top_k = self.top_k;
        c.meta_dim = self.meta_dim.unwrap_or(c.meta_dim);
        c.ffn_hidden = self.ffn_hidden.unwrap_or(4 * d);
        c.ablations = self.ablations;
        if let Some(eps) = self.ln_eps {
            c.ln_eps = eps;
        }
        if let Some(b) = self.naive_budget {
            c.naive_budget = b;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Csv {
        schema: PathBuf,
        train: PathBuf,
        /// Held-out file; when absent the tail of `train` is split off.
        #[serde(default)]
        test: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSpec {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Caps the total number of updates.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_batch() -> usize {
    256
}
fn default_epochs() -> usize {
    1
}

impl Default for OptimSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all optimizer fields have defaults")
    }
}

impl OptimSpec {
    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

fn default_test_fraction() -> f64 {
    0.2
}
fn default_log_every() -> usize {
    50
}
fn default_eval_rows() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub model: ModelSpec,
    pub data: DataSource,
    #[serde(default)]
    pub optim: OptimSpec,
    #[serde(default)]
    pub seed: u64,
    /// Thread count; results do not depend on it.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Training rows used for the initial/final loss and train AUC.
    #[serde(default = "default_eval_rows")]
    pub eval_rows: usize,
    #[serde(default = "default_true")]
    pub write_checkpoint: bool,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl TrainConfig {
    /// Parses a config file; relative paths resolve against its directory.
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg: TrainConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DataSource::Csv { schema, train, test } = &mut cfg.data {
            fix(schema);
            fix(train);
            if let Some(t) = test {
                fix(t);
            }
        }
        if let Some(o) = cfg.out_dir.as_mut() {
            fix(o);
        }
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.optim.batch_size == 0 {
            return config("batch_size must be at least 1");
        }
        if self.log_every == 0 {
            return config("log_every must be at least 1");
        }
        if self.workers == Some(0) {
            return config("workers must be at least 1");
        }
        Ok(())
    }
}

/// Train and test splits plus the schema they share.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

/// The schema a run will use, without loading any rows.
pub fn schema_of(cfg: &TrainConfig) -> Result<FieldSchema> {
    match &cfg.data {
        DataSource::Synthetic(spec) => build_schema(&spec.schema),
        DataSource::Csv { schema, .. } => FieldSchema::from_json_file(schema),
    }
}

pub fn load_data(cfg: &TrainConfig) -> Result<Splits> {
    match &cfg.data {
        DataSource::Synthetic(spec) => {
            let all = generate_synthetic(spec)?;
            let (train, test) = all.split(cfg.test_fraction)?;
            Ok(Splits { train, test })
        }
        DataSource::Csv { schema, train, test } => {
            let spec: SchemaSpec = serde_json::from_str(&std::fs::read_to_string(schema)?)?;
            let schema = build_schema(&spec)?;
            let all = read_dataset(train, &schema)?;
            match test {
                Some(t) => Ok(Splits {
                    train: all,
                    test: read_dataset(t, &schema)?,
                }),
                None => {
                    let (train, test) = all.split(cfg.test_fraction)?;
                    Ok(Splits { train, test })
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// Mean minibatch loss since the previous point.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedRecovery {
    /// Mean `|w̄|` of the first layer over planted pairs.
    pub planted_mean_abs_w: f64,
    pub other_mean_abs_w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: FatConfig,
    pub seed: u64,
    pub train_rows: usize,
    pub test_rows: usize,
    pub steps: usize,
    pub param_count: ParamCount,
    pub loss_curve: Vec<CurvePoint>,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub train_auc: Option<f64>,
    pub test_auc: Option<f64>,
    pub oracle_test_auc: Option<f64>,
    /// Probabilities clamped inside the loss over the whole run.
    pub clamped_probabilities: usize,
    /// Hypernetwork selections that changed between consecutive log points.
    pub selection_churn: Vec<usize>,
    pub planted_recovery: Option<PlantedRecovery>,
    pub diverged: Option<Divergence>,
}

/// Result of a run: the report and the trained parameters.
pub struct RunOutput {
    pub report: RunReport,
    pub params: FatParams,
}

fn auc_or_none(scores: &[f64], labels: &[u8]) -> Option<f64> {
    auc(scores, labels).ok()
}

fn all_selections(params: &FatParams) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    if let Some(meta) = &params.meta {
        for layer in &params.layers {
            if let Some(h) = &layer.hypernet {
                out.extend(selections(h, meta, params.config.top_k)?);
            }
        }
    }
    Ok(out)
}

/// Seeded minibatch Adam training on prepared splits.
pub fn train_on(cfg: &TrainConfig, data: &Splits) -> Result<RunOutput> {
    cfg.validate()?;
    let schema = &data.train.schema;
    let model_cfg = cfg.model.resolve(schema);
    let mut params = FatParams::seeded(&model_cfg, schema, cfg.seed)?;
    let mut opt = Optimizer::new(&params, &cfg.optim.adam())?;
    let labels = data.train.labels_f64();
    let n = data.train.len();
    if n == 0 {
        return domain("training set is empty");
    }
    let eval_n = cfg.eval_rows.clamp(1, n);
    let eval_rows = &data.train.rows[..eval_n];
    let eval_labels = &labels[..eval_n];
    let initial_train_loss = loss(&params, eval_rows, eval_labels)?.value;

    let batches_per_epoch = n.div_ceil(cfg.optim.batch_size);
    let planned = batches_per_epoch * cfg.optim.epochs;
    let total = cfg.optim.max_steps.map_or(planned, |m| m.min(planned));
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::new();
    let mut window = (0.0, 0usize);
    let mut clamped = 0;
    let mut churn = Vec::new();
    let mut last_sel = all_selections(&params)?;
    let mut diverged = None;
    let mut step = 0;
    'outer: for epoch in 0.. {
        if step >= total {
            break;
        }
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x5348_5546u64 << 16) ^ epoch as u64);
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.optim.batch_size) {
            if step >= total {
                break 'outer;
            }
            let raw: Vec<RawSample> = chunk.iter().map(|&i| data.train.rows[i].clone()).collect();
            let y: Vec<f64> = chunk.iter().map(|&i| labels[i]).collect();
            let out = grad(&params, &raw, &y)?;
            step += 1;
            if !out.loss.value.is_finite() || !out.grads.is_finite() {
                diverged = Some(Divergence {
                    step,
                    reason: format!("non-finite loss or gradient (loss = {})", out.loss.value),
                });
                break 'outer;
            }
            clamped += out.loss.clamped;
            opt.step(&mut params, &out.grads)?;
            if !params.is_finite() {
                diverged = Some(Divergence {
                    step,
                    reason: "parameters became non-finite".into(),
                });
                break 'outer;
            }
            window.0 += out.loss.value;
            window.1 += 1;
            if step % cfg.log_every == 0 || step == total {
                curve.push(CurvePoint {
                    step,
                    loss: window.0 / window.1 as f64,
                });
                window = (0.0, 0);
                let sel = all_selections(&params)?;
                churn.push(sel.iter().zip(&last_sel).filter(|(a, b)| a != b).count());
                last_sel = sel;
            }
        }
    }

    let final_train_loss = if diverged.is_none() {
        loss(&params, eval_rows, eval_labels)?.value
    } else {
        f64::NAN
    };
    let (train_auc, test_auc) = if diverged.is_none() {
        let train_scores = predict(&params, eval_rows)?;
        let test_scores = predict(&params, &data.test.rows)?;
        (
            auc_or_none(&train_scores, &data.train.labels[..eval_n]),
            auc_or_none(&test_scores, &data.test.labels),
        )
    } else {
        (None, None)
    };
    let planted_recovery = match (&cfg.data, diverged.is_none()) {
        (DataSource::Synthetic(spec), true) if params.layers[0].modulation.is_some() => {
            let w = export_interaction_matrix(&params, 0)?;
            let pairs: Vec<(usize, usize)> = spec.planted_pairs.iter().map(|p| (p.from, p.to)).collect();
            let (planted, other) = w.planted_contrast(&pairs);
            Some(PlantedRecovery {
                planted_mean_abs_w: planted,
                other_mean_abs_w: other,
            })
        }
        _ => None,
    };
    let report = RunReport {
        param_count: count_params(&model_cfg, schema.total_vocab()),
        model: model_cfg,
        seed: cfg.seed,
        train_rows: n,
        test_rows: data.test.len(),
        steps: step,
        loss_curve: curve,
        initial_train_loss,
        final_train_loss,
        train_auc,
        test_auc,
        oracle_test_auc: data.test.oracle_auc().ok(),
        clamped_probabilities: clamped,
        selection_churn: churn,
        planted_recovery,
        diverged,
    };
    Ok(RunOutput { report, params })
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match workers {
        None => f(),
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| FatError::Internal(format!("thread pool: {e}")))?
            .install(f),
    }
}

/// Loads data, trains, and (when `out_dir` is set) writes `report.json`,
/// `loss_curve.csv` and `model.ckpt`.
pub fn run_training(cfg: &TrainConfig) -> Result<RunOutput> {
    with_workers(cfg.workers, || {
        let data = load_data(cfg)?;
        let out = train_on(cfg, &data)?;
        if let Some(dir) = &cfg.out_dir {
            write_run(dir, &out, cfg.write_checkpoint)?;
        }
        Ok(out)
    })
}

pub fn write_run(dir: &Path, out: &RunOutput, checkpoint: bool) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&out.report)?)?;
    let mut w = csv::Writer::from_path(dir.join("loss_curve.csv"))?;
    w.write_record(["step", "loss"])?;
    for p in &out.report.loss_curve {
        w.write_record([p.step.to_string(), p.loss.to_string()])?;
    }
    w.flush()?;
    if checkpoint && out.report.diverged.is_none() {
        out.params.save(dir.join("model.ckpt"))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Median AUC of the smallest width.
    Smallest,
    /// Median AUC of standard attention at the smallest width.
    Standard,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub dim: usize,
    pub total_params: u128,
    pub non_embedding_params: u128,
    pub test_aucs: Vec<f64>,
    pub median_test_auc: f64,
    pub delta_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub seeds: Vec<u64>,
    pub baseline: Baseline,
    pub baseline_auc: f64,
    pub points: Vec<SweepPoint>,
    /// Whether median test AUC never decreases with width.
    pub monotone: bool,
    /// Fit on non-embedding parameter counts.
    pub fit: Option<PowerLawFit>,
    pub fit_error: Option<String>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn median_auc(base: &TrainConfig, data: &Splits, model: ModelSpec, seeds: &[u64]) -> Result<Vec<f64>> {
    seeds
        .iter()
        .map(|&seed| {
            let cfg = TrainConfig {
                model: model.clone(),
                seed,
                out_dir: None,
                ..base.clone()
            };
            let out = train_on(&cfg, data)?;
            if let Some(d) = &out.report.diverged {
                return Err(FatError::Diverged {
                    step: d.step,
                    reason: d.reason.clone(),
                });
            }
            out.report
                .test_auc
                .ok_or_else(|| FatError::Domain("test split has a single class".into()))
        })
        .collect()
}

/// Trains every width on the same data for every seed and fits
/// `ΔAUC ∝ N^β` on non-embedding parameter counts.
pub fn run_scaling_sweep(base: &TrainConfig, widths: &[usize], seeds: &[u64], baseline: Baseline) -> Result<SweepReport> {
    let mut distinct = widths.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 3 || distinct.len() != widths.len() {
        return domain(format!("sweep needs at least 3 distinct widths, got {widths:?}"));
    }
    if seeds.is_empty() {
        return domain("sweep needs at least one seed");
    }
    with_workers(base.workers, || {
        let data = load_data(base)?;
        let schema = &data.train.schema;
        let mut points = Vec::with_capacity(widths.len());
        for &d in widths {
            let model = ModelSpec {
                dim: Some(d),
                ffn_hidden: None,
                ..base.model.clone()
            };
            let counts = count_params(&model.resolve(schema), schema.total_vocab());
            let aucs = median_auc(base, &data, model, seeds)?;
            points.push(SweepPoint {
                dim: d,
                total_params: counts.total,
                non_embedding_params: counts.non_embedding,
                median_test_auc: median(&aucs),
                test_aucs: aucs,
                delta_auc: 0.0,
            });
        }
        let smallest = widths.iter().copied().min().expect("non-empty");
        let baseline_auc = match baseline {
            Baseline::Fixed(v) => v,
            Baseline::Smallest => points.iter().find(|p| p.dim == smallest).expect("swept").median_test_auc,
            Baseline::Standard => {
                let model = ModelSpec {
                    variant: Variant::Standard,
                    dim: Some(smallest),
                    ffn_hidden: None,
                    ..base.model.clone()
                };
                median(&median_auc(base, &data, model, seeds)?)
            }
        };
        for p in points.iter_mut() {
            p.delta_auc = p.median_test_auc - baseline_auc;
        }
        let mut by_width: Vec<&SweepPoint> = points.iter().collect();
        by_width.sort_by_key(|p| p.dim);
        let monotone = by_width.windows(2).all(|w| w[1].median_test_auc >= w[0].median_test_auc);
        let scaling: Vec<ScalingPoint> = points
            .iter()
            .map(|p| ScalingPoint {
                n_params: p.non_embedding_params as f64,
                delta_auc: p.delta_auc,
            })
            .collect();
        let (fit, fit_error) = match fit_power_law(&scaling) {
            Ok(f) => (Some(f), None),
            Err(e) => (None, Some(e.to_string())),
        };
        Ok(SweepReport {
            seeds: seeds.to_vec(),
            baseline,
            baseline_auc,
            points,
            monotone,
            fit,
            fit_error,
        })
    })
}
