//! Field schema, numeric discretization and structured tokenization.
//!
//! Every sample becomes one token per field: `h = e + b_f`, where `e` is the
//! embedding-table row for the field's value (mean of rows for sequence
//! fields) and `b_f` is a learnable per-field bias.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, FatError, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Categorical,
    Numeric,
    Sequence,
}

/// One entry of a schema file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cardinality: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
    /// Quantile edges for numeric fields whose cells carry raw values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_seq_len: Option<usize>,
}

/// The schema file: `{fields: [...], embed_dim, meta_dim}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaSpec {
    pub fields: Vec<FieldSpec>,
    pub embed_dim: usize,
    pub meta_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldDef {
    pub name: String,
    pub kind: FieldKind,
    pub vocab_size: usize,
    pub edges: Option<Vec<f64>>,
    pub max_seq_len: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSchema {
    fields: Vec<FieldDef>,
    total_vocab: usize,
    embed_dim: usize,
    meta_dim: usize,
}

impl FieldSchema {
    pub fn field_count(&self) -> usize {
        self.fields.len()
    }

    /// `n = Σ |V_f|`.
    pub fn total_vocab(&self) -> usize {
        self.total_vocab
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn meta_dim(&self) -> usize {
        self.meta_dim
    }

    pub fn fields(&self) -> &[FieldDef] {
        &self.fields
    }

    pub fn field(&self, id: usize) -> &FieldDef {
        &self.fields[id]
    }

    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.fields.iter().map(|f| f.vocab_size).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.fields.iter().map(|f| f.name.clone()).collect()
    }

    pub fn to_spec(&self) -> SchemaSpec {
        SchemaSpec {
            fields: self
                .fields
                .iter()
                .map(|f| FieldSpec {
                    name: f.name.clone(),
                    kind: f.kind,
                    cardinality: (f.kind != FieldKind::Numeric).then_some(f.vocab_size),
                    bins: (f.kind == FieldKind::Numeric).then_some(f.vocab_size),
                    edges: f.edges.clone(),
                    max_seq_len: f.max_seq_len,
                })
                .collect(),
            embed_dim: self.embed_dim,
            meta_dim: self.meta_dim,
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: SchemaSpec = serde_json::from_str(&text)?;
        build_schema(&spec)
    }

    /// Parses one CSV cell of field `field` into a value id (or ids).
    pub fn parse_cell(&self, field: usize, cell: &str) -> Result<FieldValue> {
        let def = &self.fields[field];
        let cell = cell.trim();
        let parse_id = |s: &str| -> Result<usize> {
            s.trim().parse::<usize>().map_err(|_| {
                FatError::Data(format!("field '{}': '{}' is not an integer id", def.name, s))
            })
        };
        match def.kind {
            FieldKind::Categorical => Ok(FieldValue::Id(parse_id(cell)?)),
            FieldKind::Numeric => match &def.edges {
                Some(edges) => {
                    let v: f64 = cell.parse().map_err(|_| {
                        FatError::Data(format!("field '{}': '{}' is not a number", def.name, cell))
                    })?;
                    Ok(FieldValue::Id(discretize_numeric(v, edges)?))
                }
                None => Ok(FieldValue::Id(parse_id(cell)?)),
            },
            FieldKind::Sequence => {
                if cell.is_empty() {
                    return Err(FatError::Data(format!(
                        "field '{}': empty sequence cell",
                        def.name
                    )));
                }
                let ids = cell.split('|').map(parse_id).collect::<Result<Vec<_>>>()?;
                Ok(FieldValue::Seq(ids))
            }
        }
    }
}

/// Validates a schema description and computes `n`.
pub fn build_schema(spec: &SchemaSpec) -> Result<FieldSchema> {
    if spec.fields.is_empty() {
        return config("schema must declare at least one field");
    }
    if spec.embed_dim == 0 {
        return config("embed_dim must be at least 1");
    }
    let mut seen = HashSet::new();
    let mut fields = Vec::with_capacity(spec.fields.len());
    for fs in &spec.fields {
        if !seen.insert(fs.name.as_str()) {
            return config(format!("duplicate field name '{}'", fs.name));
        }
        let vocab_size = match fs.kind {
            FieldKind::Categorical | FieldKind::Sequence => fs.cardinality.ok_or_else(|| {
                FatError::Config(format!("field '{}' needs a cardinality", fs.name))
            })?,
            FieldKind::Numeric => {
                let from_edges = match &fs.edges {
                    Some(edges) => {
                        check_edges(edges)?;
                        Some(edges.len() - 1)
                    }
                    None => None,
                };
                match (fs.bins, from_edges) {
                    (Some(b), Some(e)) if b != e => {
                        return config(format!(
                            "field '{}': bins={b} disagrees with {} edges",
                            fs.name,
                            e + 1
                        ))
                    }
                    (Some(b), _) => b,
                    (None, Some(e)) => e,
                    (None, None) => {
                        return config(format!("numeric field '{}' needs bins or edges", fs.name))
                    }
                }
            }
        };
        if vocab_size == 0 {
            return config(format!("field '{}' has zero cardinality", fs.name));
        }
        if fs.max_seq_len == Some(0) {
            return config(format!("field '{}' has max_seq_len 0", fs.name));
        }
        fields.push(FieldDef {
            name: fs.name.clone(),
            kind: fs.kind,
            vocab_size,
            edges: fs.edges.clone(),
            max_seq_len: fs.max_seq_len,
        });
    }
    let total_vocab = fields.iter().map(|f| f.vocab_size).sum();
    Ok(FieldSchema {
        fields,
        total_vocab,
        embed_dim: spec.embed_dim,
        meta_dim: spec.meta_dim,
    })
}

fn check_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2 {
        return config("discretization needs at least two edges");
    }
    if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
        return config("discretization edges must be finite and strictly ascending");
    }
    Ok(())
}

/// Bucket `i` with `edges[i] ≤ value < edges[i+1]`, clamped to the first and
/// last bucket outside the edge range.
pub fn discretize_numeric(value: f64, edges: &[f64]) -> Result<usize> {
    check_edges(edges)?;
    if value.is_nan() {
        return Err(FatError::Data("cannot discretize NaN".into()));
    }
    let buckets = edges.len() - 1;
    // number of edges ≤ value
    let above = edges.partition_point(|&e| e <= value);
    Ok(above.saturating_sub(1).min(buckets - 1))
}

/// A raw field value: a single id, or the member ids of a sequence field.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FieldValue {
    Id(usize),
    Seq(Vec<usize>),
}

impl FieldValue {
    pub fn ids(&self) -> &[usize] {
        match self {
            FieldValue::Id(id) => std::slice::from_ref(id),
            FieldValue::Seq(ids) => ids,
        }
    }

    pub fn to_cell(&self) -> String {
        match self {
            FieldValue::Id(id) => id.to_string(),
            FieldValue::Seq(ids) => ids
                .iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join("|"),
        }
    }
}

/// One raw sample: a value for every field in schema order.
pub type RawSample = Vec<FieldValue>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldEmbeddingParams {
    /// One `|V_f| × d` table per field.
    pub tables: Vec<Matrix>,
    /// Row `f` is the bias `b_f`.
    pub biases: Matrix,
}

impl FieldEmbeddingParams {
    /// Tables drawn from N(0, 1/d), biases from N(0, 0.01²).
    pub fn init<R: Rng + ?Sized>(schema: &FieldSchema, rng: &mut R) -> Self {
        let d = schema.embed_dim();
        let std = 1.0 / (d as f64).sqrt();
        let tables = schema
            .fields()
            .iter()
            .map(|f| Matrix::random_normal(f.vocab_size, d, std, rng))
            .collect();
        let biases = Matrix::random_normal(schema.field_count(), d, 0.01, rng);
        FieldEmbeddingParams { tables, biases }
    }

    pub fn zeros(schema: &FieldSchema) -> Self {
        let d = schema.embed_dim();
        FieldEmbeddingParams {
            tables: schema
                .fields()
                .iter()
                .map(|f| Matrix::zeros(f.vocab_size, d))
                .collect(),
            biases: Matrix::zeros(schema.field_count(), d),
        }
    }

    pub fn dim(&self) -> usize {
        self.biases.cols()
    }

    pub fn field_count(&self) -> usize {
        self.tables.len()
    }
}

/// Tokens of one sample: row `i` of `tokens` belongs to field `fields[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSample {
    pub tokens: Matrix,
    pub fields: Vec<usize>,
}

impl TokenSample {
    pub fn new(tokens: Matrix, fields: Vec<usize>, field_count: usize) -> Result<Self> {
        if tokens.rows() != fields.len() {
            return Err(FatError::Data(format!(
                "{} tokens but {} field ids",
                tokens.rows(),
                fields.len()
            )));
        }
        let mut seen = vec![false; field_count];
        for &f in &fields {
            if f >= field_count {
                return Err(FatError::Data(format!("field id {f} out of range {field_count}")));
            }
            if std::mem::replace(&mut seen[f], true) {
                return Err(FatError::Data(format!("field id {f} appears twice in a sample")));
            }
        }
        if !tokens.is_finite() {
            return Err(FatError::Data("token matrix has non-finite entries".into()));
        }
        Ok(TokenSample { tokens, fields })
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    /// Reorders tokens so that new position `k` holds old position `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> TokenSample {
        let d = self.tokens.cols();
        let tokens = Matrix::from_fn(perm.len(), d, |r, c| self.tokens.get(perm[r], c));
        let fields = perm.iter().map(|&p| self.fields[p]).collect();
        TokenSample { tokens, fields }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub samples: Vec<TokenSample>,
}

impl TokenBatch {
    pub fn batch_size(&self) -> usize {
        self.samples.len()
    }
}

/// Embeds the `(field, value)` entries of one sample in the order given.
pub fn embed_entries(
    schema: &FieldSchema,
    params: &FieldEmbeddingParams,
    entries: &[(usize, &FieldValue)],
    use_bias: bool,
    sample_index: usize,
) -> Result<TokenSample> {
    let d = params.dim();
    let mut tokens = Matrix::zeros(entries.len(), d);
    let mut fields = Vec::with_capacity(entries.len());
    for (row, &(field, value)) in entries.iter().enumerate() {
        if field >= schema.field_count() {
            return Err(FatError::Data(format!(
                "sample {sample_index}: field id {field} out of range"
            )));
        }
        let def = schema.field(field);
        let ids = value.ids();
        if ids.is_empty() {
            return Err(FatError::Data(format!(
                "sample {sample_index}, field '{}': no value ids",
                def.name
            )));
        }
        if let Some(max) = def.max_seq_len {
            if ids.len() > max {
                return Err(FatError::Data(format!(
                    "sample {sample_index}, field '{}': sequence length {} exceeds {max}",
                    def.name,
                    ids.len()
                )));
            }
        }
        let out = tokens.row_mut(row);
        let scale = 1.0 / ids.len() as f64;
        for &id in ids {
            if id >= def.vocab_size {
                return Err(FatError::Data(format!(
                    "sample {sample_index}, field '{}': id {id} outside vocabulary of size {}",
                    def.name, def.vocab_size
                )));
            }
            for (o, e) in out.iter_mut().zip(params.tables[field].row(id)) {
                *o += scale * e;
            }
        }
        if use_bias {
            for (o, b) in out.iter_mut().zip(params.biases.row(field)) {
                *o += b;
            }
        }
        fields.push(field);
    }
    TokenSample::new(tokens, fields, schema.field_count())
}

/// Tokenizes a batch of raw samples given in schema order.
pub fn embed_batch(
    schema: &FieldSchema,
    raw: &[RawSample],
    params: &FieldEmbeddingParams,
) -> Result<TokenBatch> {
    embed_batch_with(schema, raw, params, true)
}

pub(crate) fn embed_batch_with(
    schema: &FieldSchema,
    raw: &[RawSample],
    params: &FieldEmbeddingParams,
    use_bias: bool,
) -> Result<TokenBatch> {
    let samples = raw
        .iter()
        .enumerate()
        .map(|(s, sample)| {
            if sample.len() != schema.field_count() {
                return Err(FatError::Data(format!(
                    "sample {s}: {} values for {} fields",
                    sample.len(),
                    schema.field_count()
                )));
            }
            let entries: Vec<(usize, &FieldValue)> = sample.iter().enumerate().collect();
            embed_entries(schema, params, &entries, use_bias, s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TokenBatch { samples })
}

/// Scatters token gradients back into embedding rows and field biases.
pub(crate) fn embedding_backward(
    raw: &RawSample,
    token_grads: &Matrix,
    use_bias: bool,
    grads: &mut FieldEmbeddingParams,
) {
    for (field, value) in raw.iter().enumerate() {
        let dh = token_grads.row(field);
        let ids = value.ids();
        let scale = 1.0 / ids.len() as f64;
        for &id in ids {
            for (g, &v) in grads.tables[field].row_mut(id).iter_mut().zip(dh) {
                *g += scale * v;
            }
        }
        if use_bias {
            for (g, &v) in grads.biases.row_mut(field).iter_mut().zip(dh) {
                *g += v;
            }
        }
    }
}
