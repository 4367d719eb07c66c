//! Synthetic click logs with planted cross-field interactions, the AUC
//! metric, and dataset CSV I/O.
//!
//! The Bayes logit of a row is `bias + Σ θ_ij · r(seed, i, j, v_i, v_j)` with
//! `r ∈ {−1, +1}` drawn from a hash, so the planted signal is invisible to
//! any model that looks at one field at a time.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, domain, FatError, Result};
use crate::fields::{build_schema, FieldKind, FieldSchema, FieldSpec, FieldValue, RawSample, SchemaSpec};
use crate::numerics::sigmoid;

/// Rows per generation shard; each shard draws from its own derived stream.
pub const SHARD_ROWS: usize = 4096;

/// Rows used to calibrate the bias when a target base rate is requested.
const CALIBRATION_ROWS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedPair {
    pub from: usize,
    pub to: usize,
    pub strength: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BiasSpec {
    Fixed(f64),
    /// Solve for the bias whose expected positive rate matches the target.
    Target { target_base_rate: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ValueDistribution {
    Uniform,
    Zipf { exponent: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub schema: SchemaSpec,
    pub planted_pairs: Vec<PlantedPair>,
    pub bias: BiasSpec,
    pub distribution: ValueDistribution,
    pub sample_count: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Eight fields of 50 values, four planted pairs of strength 1.5, a
    /// base rate of about 0.3 and Zipf(1.1) value frequencies.
    pub fn default_benchmark(sample_count: usize, seed: u64) -> Self {
        let fields = (0..8)
            .map(|i| FieldSpec {
                name: format!("f{i}"),
                kind: FieldKind::Categorical,
                cardinality: Some(50),
                bins: None,
                edges: None,
                max_seq_len: None,
            })
            .collect();
        SyntheticSpec {
            schema: SchemaSpec {
                fields,
                embed_dim: 32,
                meta_dim: 8,
            },
            planted_pairs: [(0, 1), (2, 3), (4, 5), (6, 7)]
                .into_iter()
                .map(|(from, to)| PlantedPair {
                    from,
                    to,
                    strength: 1.5,
                })
                .collect(),
            bias: BiasSpec::Target {
                target_base_rate: 0.3,
            },
            distribution: ValueDistribution::Zipf { exponent: 1.1 },
            sample_count,
            seed,
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    fn validate(&self, schema: &FieldSchema) -> Result<()> {
        if self.sample_count == 0 {
            return config("sample_count must be at least 1");
        }
        let f = schema.field_count();
        for p in &self.planted_pairs {
            if p.from >= f || p.to >= f || p.from == p.to {
                return config(format!(
                    "planted pair ({}, {}) must name two distinct fields below {f}",
                    p.from, p.to
                ));
            }
            if !p.strength.is_finite() {
                return config("planted strength must be finite");
            }
        }
        for def in schema.fields() {
            if def.edges.is_some() {
                return config(format!(
                    "field '{}': synthetic numeric fields must use bin ids, not edges",
                    def.name
                ));
            }
        }
        match self.bias {
            BiasSpec::Fixed(b) if !b.is_finite() => config("bias must be finite"),
            BiasSpec::Target { target_base_rate: t } if !(t > 0.0 && t < 1.0) => {
                config("target_base_rate must lie in (0, 1)")
            }
            _ => Ok(()),
        }?;
        if let ValueDistribution::Zipf { exponent } = self.distribution {
            if !(exponent > 0.0) {
                return config("zipf exponent must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub schema: FieldSchema,
    pub rows: Vec<RawSample>,
    pub labels: Vec<u8>,
    /// Bayes logits, when known.
    pub oracle_logits: Option<Vec<f64>>,
    pub seed: Option<u64>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn labels_f64(&self) -> Vec<f64> {
        self.labels.iter().map(|&y| y as f64).collect()
    }

    pub fn positive_rate(&self) -> f64 {
        self.labels.iter().map(|&y| y as f64).sum::<f64>() / self.len().max(1) as f64
    }

    /// AUC of the stored Bayes logits.
    pub fn oracle_auc(&self) -> Result<f64> {
        match &self.oracle_logits {
            Some(l) => auc(l, &self.labels),
            None => Err(FatError::Data("dataset has no oracle logits".into())),
        }
    }

    /// Splits off the last `ceil(fraction · n)` rows as a test set.
    pub fn split(&self, test_fraction: f64) -> Result<(LabeledDataset, LabeledDataset)> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return config("test_fraction must lie in (0, 1)");
        }
        let test = ((self.len() as f64) * test_fraction).ceil() as usize;
        if test == 0 || test >= self.len() {
            return domain(format!("cannot split {} rows with fraction {test_fraction}", self.len()));
        }
        let cut = self.len() - test;
        Ok((self.slice(0..cut), self.slice(cut..self.len())))
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> LabeledDataset {
        LabeledDataset {
            schema: self.schema.clone(),
            rows: self.rows[range.clone()].to_vec(),
            labels: self.labels[range.clone()].to_vec(),
            oracle_logits: self.oracle_logits.as_ref().map(|l| l[range].to_vec()),
            seed: self.seed,
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic interaction sign for values `v_i`, `v_j` of fields `i`, `j`.
pub fn interaction_sign(seed: u64, i: usize, j: usize, vi: usize, vj: usize) -> f64 {
    let mut h = splitmix(seed);
    for part in [i, j, vi, vj] {
        h = splitmix(h ^ part as u64);
    }
    if h >> 63 == 0 {
        1.0
    } else {
        -1.0
    }
}

fn planted_sum(spec: &SyntheticSpec, ids: &[usize]) -> f64 {
    spec.planted_pairs
        .iter()
        .map(|p| p.strength * interaction_sign(spec.seed, p.from, p.to, ids[p.from], ids[p.to]))
        .sum()
}

struct ValueSampler {
    zipf: Vec<Option<Zipf<f64>>>,
    vocab: Vec<usize>,
}

impl ValueSampler {
    fn new(spec: &SyntheticSpec, schema: &FieldSchema) -> Result<Self> {
        let vocab = schema.vocab_sizes();
        let zipf = vocab
            .iter()
            .map(|&n| match spec.distribution {
                ValueDistribution::Uniform => Ok(None),
                ValueDistribution::Zipf { exponent } => Zipf::new(n as f64, exponent)
                    .map(Some)
                    .map_err(|e| FatError::Config(format!("zipf: {e}"))),
            })
            .collect::<Result<_>>()?;
        Ok(ValueSampler { zipf, vocab })
    }

    fn draw(&self, rng: &mut ChaCha8Rng, out: &mut [usize]) {
        for (f, slot) in out.iter_mut().enumerate() {
            *slot = match &self.zipf[f] {
                None => rng.random_range(0..self.vocab[f]),
                // rank 1 is the most frequent value
                Some(z) => (z.sample(rng) as usize).clamp(1, self.vocab[f]) - 1,
            };
        }
    }
}

fn shard_rng(seed: u64, stream: u64, shard: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed ^ stream) ^ shard as u64))
}

const STREAM_ROWS: u64 = 0x524f_5753;
const STREAM_CALIBRATION: u64 = 0x4341_4c49;

/// Bias whose mean `σ(bias + x)` over the calibration draws equals `target`.
fn solve_bias(spec: &SyntheticSpec, sampler: &ValueSampler, field_count: usize, target: f64) -> f64 {
    let shards = CALIBRATION_ROWS.div_ceil(SHARD_ROWS);
    let sums: Vec<f64> = (0..shards)
        .into_par_iter()
        .flat_map_iter(|s| {
            let mut rng = shard_rng(spec.seed, STREAM_CALIBRATION, s);
            let rows = SHARD_ROWS.min(CALIBRATION_ROWS - s * SHARD_ROWS);
            let mut ids = vec![0; field_count];
            (0..rows)
                .map(|_| {
                    sampler.draw(&mut rng, &mut ids);
                    planted_sum(spec, &ids)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let rate = |b: f64| sums.iter().map(|&x| sigmoid(b + x)).sum::<f64>() / sums.len() as f64;
    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Resolved bias for a spec (solving for it when a target rate is given).
pub fn resolve_bias(spec: &SyntheticSpec) -> Result<f64> {
    let schema = build_schema(&spec.schema)?;
    spec.validate(&schema)?;
    let sampler = ValueSampler::new(spec, &schema)?;
    Ok(match spec.bias {
        BiasSpec::Fixed(b) => b,
        BiasSpec::Target { target_base_rate } => {
            solve_bias(spec, &sampler, schema.field_count(), target_base_rate)
        }
    })
}

/// Draws `sample_count` rows; output is identical for any worker count.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    let schema = build_schema(&spec.schema)?;
    spec.validate(&schema)?;
    let sampler = ValueSampler::new(spec, &schema)?;
    let f = schema.field_count();
    let bias = match spec.bias {
        BiasSpec::Fixed(b) => b,
        BiasSpec::Target { target_base_rate } => solve_bias(spec, &sampler, f, target_base_rate),
    };
    let kinds: Vec<FieldKind> = schema.fields().iter().map(|d| d.kind).collect();
    let shards = spec.sample_count.div_ceil(SHARD_ROWS);
    let generated: Vec<Vec<(RawSample, u8, f64)>> = (0..shards)
        .into_par_iter()
        .map(|s| {
            let mut rng = shard_rng(spec.seed, STREAM_ROWS, s);
            let rows = SHARD_ROWS.min(spec.sample_count - s * SHARD_ROWS);
            let mut ids = vec![0; f];
            (0..rows)
                .map(|_| {
                    sampler.draw(&mut rng, &mut ids);
                    let logit = bias + planted_sum(spec, &ids);
                    let label = (rng.random::<f64>() < sigmoid(logit)) as u8;
                    let row = ids
                        .iter()
                        .zip(&kinds)
                        .map(|(&v, k)| match k {
                            FieldKind::Sequence => FieldValue::Seq(vec![v]),
                            _ => FieldValue::Id(v),
                        })
                        .collect();
                    (row, label, logit)
                })
                .collect()
        })
        .collect();
    let mut rows = Vec::with_capacity(spec.sample_count);
    let mut labels = Vec::with_capacity(spec.sample_count);
    let mut logits = Vec::with_capacity(spec.sample_count);
    for (row, label, logit) in generated.into_iter().flatten() {
        rows.push(row);
        labels.push(label);
        logits.push(logit);
    }
    Ok(LabeledDataset {
        schema,
        rows,
        labels,
        oracle_logits: Some(logits),
        seed: Some(spec.seed),
    })
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed exactly from tie-averaged ranks.
pub fn auc<S: AsRef<[f64]> + ?Sized>(scores: &S, labels: &[u8]) -> Result<f64> {
    let scores = scores.as_ref();
    if scores.len() != labels.len() {
        return domain(format!("{} scores for {} labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return domain("scores contain NaN");
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return domain("auc needs at least one positive and one negative label");
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum over positives of (# negatives below + ½ # negatives tied)
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let group = &order[start..end];
        let group_pos = group.iter().filter(|&&i| labels[i] == 1).count();
        let group_neg = group.len() - group_pos;
        wins += group_pos as f64 * (neg_below as f64 + 0.5 * group_neg as f64);
        neg_below += group_neg;
        start = end;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Sidecar path holding oracle logits: `<path>.oracle`.
pub fn oracle_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".oracle");
    PathBuf::from(s)
}

/// Writes `label,<field names…>` rows and, when present, the oracle sidecar.
pub fn write_dataset(path: impl AsRef<Path>, data: &LabeledDataset) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["label".to_string()];
    header.extend(data.schema.names());
    w.write_record(&header)?;
    for (row, label) in data.rows.iter().zip(&data.labels) {
        let mut rec = vec![label.to_string()];
        rec.extend(row.iter().map(FieldValue::to_cell));
        w.write_record(&rec)?;
    }
    w.flush()?;
    let side = oracle_path(path);
    match &data.oracle_logits {
        Some(logits) => {
            let mut w = csv::Writer::from_path(&side)?;
            w.write_record(["oracle_logit"])?;
            if let Some(seed) = data.seed {
                w.write_record([format!("#seed={seed}")])?;
            }
            for l in logits {
                w.write_record([l.to_string()])?;
            }
            w.flush()?;
        }
        None if side.exists() => std::fs::remove_file(side)?,
        None => {}
    }
    Ok(())
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

/// Reads a dataset written by [`write_dataset`] (or any CSV with the same
/// header). A missing sidecar leaves `oracle_logits` empty.
pub fn read_dataset(path: impl AsRef<Path>, schema: &FieldSchema) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let mut expected = vec!["label".to_string()];
    expected.extend(schema.names());
    if header != expected {
        return Err(FatError::Data(format!(
            "{}: header {:?} does not match schema {:?}",
            path.display(),
            header,
            expected
        )));
    }
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            FatError::Data(format!("{} line {line}: {e}", path.display()))
        })?;
        let line = line_of(&rec);
        let bad = |msg: String| FatError::Data(format!("{} line {line}: {msg}", path.display()));
        if rec.len() != expected.len() {
            return Err(bad(format!("{} cells, expected {}", rec.len(), expected.len())));
        }
        let label = match rec[0].trim() {
            "0" => 0u8,
            "1" => 1u8,
            other => return Err(bad(format!("label '{other}' is not 0 or 1"))),
        };
        let row = (0..schema.field_count())
            .map(|f| {
                let v = schema.parse_cell(f, &rec[f + 1]).map_err(|e| bad(e.to_string()))?;
                let vocab = schema.field(f).vocab_size;
                if let Some(&id) = v.ids().iter().find(|&&id| id >= vocab) {
                    return Err(bad(format!(
                        "field '{}': id {id} outside vocabulary of {vocab}",
                        schema.field(f).name
                    )));
                }
                Ok(v)
            })
            .collect::<Result<RawSample>>()?;
        rows.push(row);
        labels.push(label);
    }
    let (oracle_logits, seed) = read_sidecar(&oracle_path(path), rows.len())?;
    Ok(LabeledDataset {
        schema: schema.clone(),
        rows,
        labels,
        oracle_logits,
        seed,
    })
}

fn read_sidecar(side: &Path, expected: usize) -> Result<(Option<Vec<f64>>, Option<u64>)> {
    if !side.exists() {
        return Ok((None, None));
    }
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_path(side)?;
    let mut seed = None;
    let mut logits = Vec::with_capacity(expected);
    for rec in r.records() {
        let rec = rec?;
        let cell = rec.get(0).unwrap_or("").trim();
        if let Some(s) = cell.strip_prefix("#seed=") {
            seed = Some(s.parse().map_err(|_| {
                FatError::Data(format!("{} line {}: bad seed '{s}'", side.display(), line_of(&rec)))
            })?);
            continue;
        }
        let v: f64 = cell.parse().map_err(|_| {
            FatError::Data(format!("{} line {}: '{cell}' is not a number", side.display(), line_of(&rec)))
        })?;
        logits.push(v);
    }
    if logits.len() != expected {
        return Err(FatError::Data(format!(
            "{}: {} oracle logits for {expected} rows",
            side.display(),
            logits.len()
        )));
    }
    Ok((Some(logits), seed))
}
