//! Basis-composed hypernetwork.
//!
//! Each role (Q, K, V) owns `M` basis matrices and a one-hidden-layer scorer
//! MLP. A field's meta-embedding `φ_f` is scored into `M` logits, the top `K`
//! are kept and softmax-normalized among themselves, and the field's
//! projection is the resulting convex combination of the selected bases.
//! After training the composed matrices are materialized into a cache so
//! serving never evaluates the scorer.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, FatError, Result};
use crate::fields::FieldSchema;
use crate::numerics::{outer_acc, softmax_backward, softmax_in_place, vec_mat_acc, vec_mat_t_acc, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Q,
    K,
    V,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Q, Role::K, Role::V];

    pub fn index(self) -> usize {
        match self {
            Role::Q => 0,
            Role::K => 1,
            Role::V => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Q => "Q",
            Role::K => "K",
            Role::V => "V",
        }
    }
}

/// `s = W2ᵀ relu(W1ᵀ φ + b1) + b2`, stored as row-vector maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scorer {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl Scorer {
    pub fn init<R: Rng + ?Sized>(meta_dim: usize, hidden: usize, bases: usize, rng: &mut R) -> Self {
        Scorer {
            w1: Matrix::random_normal(meta_dim, hidden, 1.0 / (meta_dim as f64).sqrt(), rng),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::random_normal(hidden, bases, 1.0 / (hidden as f64).sqrt(), rng),
            b2: Matrix::random_normal(1, bases, 0.1, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Scorer {
            w1: Matrix::zeros(self.w1.rows(), self.w1.cols()),
            b1: Matrix::zeros(1, self.b1.cols()),
            w2: Matrix::zeros(self.w2.rows(), self.w2.cols()),
            b2: Matrix::zeros(1, self.b2.cols()),
        }
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Returns `(scores, hidden pre-activation)`.
    fn forward(&self, phi: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut pre = self.b1.as_slice().to_vec();
        vec_mat_acc(phi, &self.w1, &mut pre);
        let act: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
        let mut out = self.b2.as_slice().to_vec();
        vec_mat_acc(&act, &self.w2, &mut out);
        (out, pre)
    }

    fn backward(&self, phi: &[f64], pre: &[f64], dscores: &[f64], grads: &mut Scorer, dphi: &mut [f64]) {
        let act: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
        outer_acc(&act, dscores, &mut grads.w2);
        for (g, d) in grads.b2.as_mut_slice().iter_mut().zip(dscores) {
            *g += d;
        }
        let mut dact = vec![0.0; act.len()];
        vec_mat_t_acc(dscores, &self.w2, &mut dact);
        for (da, &p) in dact.iter_mut().zip(pre) {
            if p <= 0.0 {
                *da = 0.0;
            }
        }
        outer_acc(phi, &dact, &mut grads.w1);
        for (g, d) in grads.b1.as_mut_slice().iter_mut().zip(&dact) {
            *g += d;
        }
        vec_mat_t_acc(&dact, &self.w1, dphi);
    }
}

/// Learnable per-layer part of the hypernetwork: one basis set and one
/// scorer per role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypernetLayer {
    /// `bases[role][m]` is `d × d`.
    pub bases: Vec<Vec<Matrix>>,
    pub scorers: Vec<Scorer>,
}

impl HypernetLayer {
    /// Bases from N(0, 1/d); scorer hidden width `2k`.
    pub fn init<R: Rng + ?Sized>(d: usize, bases: usize, meta_dim: usize, rng: &mut R) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        let basis_sets = (0..3)
            .map(|_| (0..bases).map(|_| Matrix::random_normal(d, d, std, rng)).collect())
            .collect();
        let scorers = (0..3)
            .map(|_| Scorer::init(meta_dim, 2 * meta_dim, bases, rng))
            .collect();
        HypernetLayer {
            bases: basis_sets,
            scorers,
        }
    }

    pub fn zeros_like(&self) -> Self {
        HypernetLayer {
            bases: self
                .bases
                .iter()
                .map(|set| set.iter().map(|b| Matrix::zeros(b.rows(), b.cols())).collect())
                .collect(),
            scorers: self.scorers.iter().map(Scorer::zeros_like).collect(),
        }
    }

    pub fn basis_count(&self) -> usize {
        self.bases[0].len()
    }

    pub fn dim(&self) -> usize {
        self.bases[0][0].rows()
    }
}

/// A complete hypernetwork: per-layer state, meta-embeddings (rows are
/// `φ_f`) and the sparsity `K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypernetState {
    pub layer: HypernetLayer,
    pub meta: Matrix,
    pub top_k: usize,
}

impl HypernetState {
    pub fn init<R: Rng + ?Sized>(
        fields: usize,
        d: usize,
        bases: usize,
        top_k: usize,
        meta_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_top_k(top_k, bases)?;
        let layer = HypernetLayer::init(d, bases, meta_dim, rng);
        let meta = Matrix::random_normal(fields, meta_dim, 1.0, rng);
        Ok(HypernetState { layer, meta, top_k })
    }

    pub fn field_count(&self) -> usize {
        self.meta.rows()
    }

    pub fn validate(&self) -> Result<()> {
        check_top_k(self.top_k, self.layer.basis_count())?;
        if self.layer.bases.len() != 3 || self.layer.scorers.len() != 3 {
            return config("hypernetwork needs one basis set and scorer per role");
        }
        Ok(())
    }
}

fn check_top_k(k: usize, m: usize) -> Result<()> {
    if k == 0 || k > m {
        return config(format!("top-K width {k} must satisfy 1 <= K <= M = {m}"));
    }
    Ok(())
}

/// Selected basis indices and their mixture weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Ordered by descending score, ties toward the lower index.
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

pub(crate) fn score_with(layer: &HypernetLayer, meta: &Matrix, field: usize, role: Role) -> Vec<f64> {
    layer.scorers[role.index()].forward(meta.row(field)).0
}

/// `s^{(f)} = g_ψ(φ_f)` for one role.
pub fn score_fields(state: &HypernetState, field: usize, role: Role) -> Result<Vec<f64>> {
    state.validate()?;
    if field >= state.field_count() {
        return config(format!("field {field} out of range {}", state.field_count()));
    }
    Ok(score_with(&state.layer, &state.meta, field, role))
}

/// Keeps the `k` largest scores (ties toward the lower index) and
/// softmax-normalizes over the kept ones.
pub fn topk_select(scores: &[f64], k: usize) -> Result<Selection> {
    check_top_k(k, scores.len())?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(FatError::Domain("non-finite basis score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    let mut weights: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
    softmax_in_place(&mut weights);
    Ok(Selection {
        indices: order,
        weights,
    })
}

pub(crate) fn compose(bases: &[Matrix], sel: &Selection) -> Matrix {
    let mut out = Matrix::zeros(bases[0].rows(), bases[0].cols());
    for (&m, &a) in sel.indices.iter().zip(&sel.weights) {
        out.add_scaled(&bases[m], a);
    }
    out
}

pub(crate) fn select_with(
    layer: &HypernetLayer,
    meta: &Matrix,
    top_k: usize,
    field: usize,
    role: Role,
) -> Result<Selection> {
    topk_select(&score_with(layer, meta, field, role), top_k)
}

/// `W^{(f)} = Σ_{m∈π_f} α_m^{(f)} B_m` for the given role.
pub fn compose_projection(state: &HypernetState, field: usize, role: Role) -> Result<Matrix> {
    let scores = score_fields(state, field, role)?;
    let sel = topk_select(&scores, state.top_k)?;
    Ok(compose(&state.layer.bases[role.index()], &sel))
}

/// Composed projections of every field for all three roles, indexed
/// `[role][field]`, plus the selections that produced them.
pub(crate) fn compose_all(
    layer: &HypernetLayer,
    meta: &Matrix,
    top_k: usize,
) -> Result<(Vec<Vec<Matrix>>, Vec<Vec<Selection>>)> {
    let mut mats = Vec::with_capacity(3);
    let mut sels = Vec::with_capacity(3);
    for role in Role::ALL {
        let mut role_mats = Vec::with_capacity(meta.rows());
        let mut role_sels = Vec::with_capacity(meta.rows());
        for f in 0..meta.rows() {
            let sel = select_with(layer, meta, top_k, f, role)?;
            role_mats.push(compose(&layer.bases[role.index()], &sel));
            role_sels.push(sel);
        }
        mats.push(role_mats);
        sels.push(role_sels);
    }
    Ok((mats, sels))
}

/// Chains gradients w.r.t. composed matrices (`dmats[role][field]`) into the
/// bases, scorers and meta-embeddings. Selections are held fixed; only the
/// selected scores receive gradient.
pub(crate) fn compose_backward(
    layer: &HypernetLayer,
    meta: &Matrix,
    sels: &[Vec<Selection>],
    dmats: &[Option<&[Matrix]>],
    grads: &mut HypernetLayer,
    dmeta: &mut Matrix,
) {
    let m_count = layer.basis_count();
    for role in Role::ALL {
        let r = role.index();
        let Some(dm) = dmats[r] else { continue };
        for (f, dw) in dm.iter().enumerate() {
            let sel = &sels[r][f];
            let mut dalpha = vec![0.0; sel.indices.len()];
            for (slot, (&m, &a)) in sel.indices.iter().zip(&sel.weights).enumerate() {
                grads.bases[r][m].add_scaled(dw, a);
                dalpha[slot] = dw.dot(&layer.bases[r][m]);
            }
            let mut dsel = vec![0.0; sel.indices.len()];
            softmax_backward(&sel.weights, &dalpha, &mut dsel);
            let mut dscores = vec![0.0; m_count];
            for (&m, &g) in sel.indices.iter().zip(&dsel) {
                dscores[m] = g;
            }
            let phi = meta.row(f);
            let (_, pre) = layer.scorers[r].forward(phi);
            let mut dphi = vec![0.0; phi.len()];
            layer.scorers[r].backward(phi, &pre, &dscores, &mut grads.scorers[r], &mut dphi);
            for (g, d) in dmeta.row_mut(f).iter_mut().zip(&dphi) {
                *g += d;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub matrix: Matrix,
    pub selection: Selection,
}

/// Composed projections for every field and role, with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterializedCache {
    pub field_count: usize,
    pub dim: usize,
    pub basis_count: usize,
    pub top_k: usize,
    /// Field-major, then roles in Q, K, V order.
    pub entries: Vec<CacheEntry>,
}

const CACHE_MAGIC: &[u8; 8] = b"FATHNC01";

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    field_count: usize,
    dim: usize,
    basis_count: usize,
    top_k: usize,
    role_order: Vec<String>,
}

impl MaterializedCache {
    pub fn get(&self, field: usize, role: Role) -> &Matrix {
        &self.entries[field * 3 + role.index()].matrix
    }

    pub fn selection(&self, field: usize, role: Role) -> &Selection {
        &self.entries[field * 3 + role.index()].selection
    }

    /// Per-role field matrices, indexed `[role][field]`.
    pub fn role_matrices(&self, role: Role) -> Vec<Matrix> {
        (0..self.field_count).map(|f| self.get(f, role).clone()).collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.matrix.len()).sum()
    }

    /// Binary layout: magic, u64 header length, JSON header, then per entry
    /// K u64 indices, K f64 weights and d² f64 matrix entries, all little endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = CacheHeader {
            field_count: self.field_count,
            dim: self.dim,
            basis_count: self.basis_count,
            top_k: self.top_k,
            role_order: Role::ALL.iter().map(|r| r.name().to_string()).collect(),
        };
        let header = serde_json::to_vec(&header)?;
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for e in &self.entries {
            for &i in &e.selection.indices {
                w.write_all(&(i as u64).to_le_bytes())?;
            }
            for &a in &e.selection.weights {
                w.write_all(&a.to_le_bytes())?;
            }
            for &v in e.matrix.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(FatError::Data("not a hypernetwork cache file".into()));
        }
        let len = read_u64(&mut r)? as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: CacheHeader = serde_json::from_slice(&header)?;
        if header.role_order != ["Q", "K", "V"] {
            return Err(FatError::Data(format!("unsupported role order {:?}", header.role_order)));
        }
        let (d, k) = (header.dim, header.top_k);
        let mut entries = Vec::with_capacity(header.field_count * 3);
        for _ in 0..header.field_count * 3 {
            let indices = (0..k)
                .map(|_| read_u64(&mut r).map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            let weights = (0..k).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
            let data = (0..d * d).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
            entries.push(CacheEntry {
                matrix: Matrix::new(d, d, data)?,
                selection: Selection { indices, weights },
            });
        }
        Ok(MaterializedCache {
            field_count: header.field_count,
            dim: d,
            basis_count: header.basis_count,
            top_k: k,
            entries,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn materialize_with(layer: &HypernetLayer, meta: &Matrix, top_k: usize) -> Result<MaterializedCache> {
    let (mats, sels) = compose_all(layer, meta, top_k)?;
    let mut entries = Vec::with_capacity(meta.rows() * 3);
    for f in 0..meta.rows() {
        for role in Role::ALL {
            let r = role.index();
            entries.push(CacheEntry {
                matrix: mats[r][f].clone(),
                selection: sels[r][f].clone(),
            });
        }
    }
    Ok(MaterializedCache {
        field_count: meta.rows(),
        dim: layer.dim(),
        basis_count: layer.basis_count(),
        top_k,
        entries,
    })
}

/// Composes and stores all `3F` projections.
pub fn materialize_cache(state: &HypernetState, schema: &FieldSchema) -> Result<MaterializedCache> {
    state.validate()?;
    if schema.field_count() != state.field_count() {
        return config(format!(
            "schema has {} fields but the hypernetwork has {} meta-embeddings",
            schema.field_count(),
            state.field_count()
        ));
    }
    materialize_with(&state.layer, &state.meta, state.top_k)
}

/// Basis indices selected for every `(role, field)`; used to measure
/// selection churn between epochs.
pub fn selections(layer: &HypernetLayer, meta: &Matrix, top_k: usize) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    for role in Role::ALL {
        for f in 0..meta.rows() {
            let mut idx = select_with(layer, meta, top_k, f, role)?.indices;
            idx.sort_unstable();
            out.push(idx);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(f: usize, d: usize, m: usize, k: usize, seed: u64) -> HypernetState {
        HypernetState::init(f, d, m, k, 3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn topk_examples() {
        let sel = topk_select(&[0.1, 2.0, -1.0, 0.5], 2).unwrap();
        assert_eq!(sel.indices, vec![1, 3]);
        // e^2 / (e^2 + e^0.5) and its complement
        let a = 1.0 / (1.0 + (-1.5f64).exp());
        assert!((sel.weights[0] - a).abs() < 1e-15);
        assert!((sel.weights[0] - 0.8176).abs() < 1e-4 && (sel.weights[1] - 0.1824).abs() < 1e-4);

        let scores = [0.3, -0.2, 1.1];
        let sel = topk_select(&scores, 3).unwrap();
        let full = crate::numerics::softmax_row(&scores).unwrap();
        for (&i, &w) in sel.indices.iter().zip(&sel.weights) {
            assert!((w - full[i]).abs() < 1e-15);
        }

        let sel = topk_select(&[0.7; 4], 2).unwrap();
        assert_eq!(sel.indices, vec![0, 1]);
        assert_eq!(sel.weights, vec![0.5, 0.5]);

        assert!(matches!(topk_select(&[1.0, 2.0], 3), Err(FatError::Config(_))));
    }

    #[test]
    fn zero_meta_and_biases_give_zero_scores() {
        let mut s = state(2, 4, 3, 2, 1);
        s.meta.fill(0.0);
        for scorer in &mut s.layer.scorers {
            scorer.b2.fill(0.0);
        }
        let scores = score_fields(&s, 0, Role::Q).unwrap();
        assert!(scores.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_meta_gives_identical_scores() {
        let mut s = state(3, 4, 5, 2, 2);
        let row = s.meta.row(0).to_vec();
        s.meta.row_mut(2).copy_from_slice(&row);
        for role in Role::ALL {
            assert_eq!(score_fields(&s, 0, role).unwrap(), score_fields(&s, 2, role).unwrap());
        }
    }

    #[test]
    fn seeded_scores_are_reproducible() {
        let a = score_fields(&state(2, 4, 4, 2, 42), 0, Role::Q).unwrap();
        let b = score_fields(&state(2, 4, 4, 2, 42), 0, Role::Q).unwrap();
        assert_eq!(a, b);
        // Golden values recorded from the first verified run (ChaCha8, seed 42).
        let golden = GOLDEN_SCORES;
        for (x, g) in a.iter().zip(golden) {
            assert!((x - g).abs() < 1e-14, "{x} vs {g}");
        }
    }

    const GOLDEN_SCORES: [f64; 4] = [
        -0.3024991831105998,
        -0.44808658938335044,
        0.13226451024162955,
        -0.051314108132216596,
    ];

    #[test]
    fn single_basis_composes_exactly() {
        let s = state(3, 4, 1, 1, 5);
        for f in 0..3 {
            for role in Role::ALL {
                let w = compose_projection(&s, f, role).unwrap();
                assert_eq!(w, s.layer.bases[role.index()][0]);
            }
        }
    }

    #[test]
    fn equal_bases_compose_to_that_basis() {
        let mut s = state(2, 3, 4, 3, 6);
        let b = s.layer.bases[1][0].clone();
        for m in s.layer.bases[1].iter_mut() {
            *m = b.clone();
        }
        let w = compose_projection(&s, 1, Role::K).unwrap();
        assert!(w.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn cache_matches_live_composition_bitwise() {
        let s = state(4, 4, 6, 2, 8);
        let schema = crate::fields::build_schema(&crate::fields::SchemaSpec {
            fields: (0..4)
                .map(|i| crate::fields::FieldSpec {
                    name: format!("f{i}"),
                    kind: crate::fields::FieldKind::Categorical,
                    cardinality: Some(3),
                    bins: None,
                    edges: None,
                    max_seq_len: None,
                })
                .collect(),
            embed_dim: 4,
            meta_dim: 3,
        })
        .unwrap();
        let cache = materialize_cache(&s, &schema).unwrap();
        assert_eq!(cache.scalar_count(), 3 * 4 * 16);
        for f in 0..4 {
            for role in Role::ALL {
                let live = compose_projection(&s, f, role).unwrap();
                let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(cache.get(f, role)), bits(&live));
            }
        }
        let mut buf = Vec::new();
        cache.write_to(&mut buf).unwrap();
        let back = MaterializedCache::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, cache);
        let mut buf2 = Vec::new();
        back.write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    /// Loss `Σ_roles Σ_f <compose(f, role), U_{role,f}>` differentiated
    /// w.r.t. meta-embeddings, bases and scorer weights.
    #[test]
    fn compose_backward_matches_finite_differences() {
        let (f, d, m, k) = (3, 3, 5, 2);
        let s = state(f, d, m, k, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let up: Vec<Vec<Matrix>> = (0..3)
            .map(|_| (0..f).map(|_| Matrix::random_normal(d, d, 1.0, &mut rng)).collect())
            .collect();
        let (_, sels) = compose_all(&s.layer, &s.meta, k).unwrap();
        let loss = |layer: &HypernetLayer, meta: &Matrix| -> f64 {
            let mut total = 0.0;
            for role in Role::ALL {
                for fi in 0..f {
                    // hold the selection fixed across perturbations
                    let mut sel = sels[role.index()][fi].clone();
                    let scores = score_with(layer, meta, fi, role);
                    let mut w: Vec<f64> = sel.indices.iter().map(|&i| scores[i]).collect();
                    softmax_in_place(&mut w);
                    sel.weights = w;
                    total += compose(&layer.bases[role.index()], &sel).dot(&up[role.index()][fi]);
                }
            }
            total
        };
        let mut grads = s.layer.zeros_like();
        let mut dmeta = Matrix::zeros(f, 3);
        let dm: Vec<Option<&[Matrix]>> = up.iter().map(|u| Some(u.as_slice())).collect();
        compose_backward(&s.layer, &s.meta, &sels, &dm, &mut grads, &mut dmeta);

        let fd = finite_diff_grad(
            |v| loss(&s.layer, &Matrix::new(f, 3, v.to_vec()).unwrap()),
            s.meta.as_slice(),
            1e-5,
        )
        .unwrap();
        for (a, b) in dmeta.as_slice().iter().zip(&fd) {
            assert!(relative_error(*a, *b, 1e-6) <= 1e-4, "{a} vs {b}");
        }
        let fd = finite_diff_grad(
            |v| {
                let mut l = s.layer.clone();
                l.scorers[1].w1.as_mut_slice().copy_from_slice(v);
                loss(&l, &s.meta)
            },
            s.layer.scorers[1].w1.as_slice(),
            1e-5,
        )
        .unwrap();
        for (a, b) in grads.scorers[1].w1.as_slice().iter().zip(&fd) {
            assert!(relative_error(*a, *b, 1e-6) <= 1e-4, "{a} vs {b}");
        }
        let fd = finite_diff_grad(
            |v| {
                let mut l = s.layer.clone();
                l.bases[2][3].as_mut_slice().copy_from_slice(v);
                loss(&l, &s.meta)
            },
            s.layer.bases[2][3].as_slice(),
            1e-5,
        )
        .unwrap();
        for (a, b) in grads.bases[2][3].as_slice().iter().zip(&fd) {
            assert!(relative_error(*a, *b, 1e-6) <= 1e-4, "{a} vs {b}");
        }
    }

    proptest! {
        #[test]
        fn mixture_weights_are_a_sparse_probability_vector(
            scores in prop::collection::vec(-20.0f64..20.0, 1..12),
            k_frac in 0.0f64..1.0,
        ) {
            let k = 1 + ((scores.len() - 1) as f64 * k_frac) as usize;
            let sel = topk_select(&scores, k).unwrap();
            prop_assert_eq!(sel.indices.len(), k);
            prop_assert!(sel.weights.iter().all(|&w| w > 0.0));
            prop_assert!((sel.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let min_kept = sel.indices.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
            for (i, s) in scores.iter().enumerate() {
                if !sel.indices.contains(&i) {
                    prop_assert!(*s <= min_kept);
                }
            }
        }

        #[test]
        fn composition_is_norm_bounded(seed in any::<u64>()) {
            let s = state(2, 3, 5, 3, seed);
            let max_norm = s.layer.bases[0].iter().map(Matrix::frobenius_norm).fold(0.0, f64::max);
            let w = compose_projection(&s, 1, Role::Q).unwrap();
            prop_assert!(w.frobenius_norm() <= max_norm * (1.0 + 1e-12));
        }
    }
}
