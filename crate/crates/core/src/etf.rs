//! Simplex equiangular tight frames.
//!
//! A simplex ETF is a set of `K` vectors in `R^d` (`d >= K - 1`) with equal
//! squared norm `E_W` and every pairwise inner product equal to
//! `-E_W / (K - 1)`. It is built as
//!
//! ```text
//! M = sqrt(E_W) * sqrt(K / (K - 1)) * U (I_K - 11^T / K)
//! ```
//!
//! where `U` is a `d x K` partial orthonormal basis drawn from a seeded
//! Gaussian matrix. The frame is what ACPG freezes as its action head.

// Negated comparisons below are deliberate: a NaN must fail the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for the structural frame invariants.
pub const STRUCTURE_TOL: f64 = 1e-10;

const MAX_DRAWS: usize = 16;
const PIVOT_TOL: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum EtfError {
    #[error("simplex ETF needs at least 2 vectors, got k = {0}")]
    TooFewVectors(usize),
    #[error("dimension d = {d} is too small for k = {k} vectors (need d >= k - 1)")]
    Dimension { k: usize, d: usize },
    #[error("energy must be positive and finite, got {0}")]
    Energy(f64),
    #[error("orthonormalization hit a near-zero pivot on {draws} consecutive draws")]
    Degenerate { draws: usize },
    #[error("frame document is malformed: {0}")]
    Malformed(String),
    #[error("frame violates the simplex ETF structure: {0}")]
    Structure(String),
}

/// A `K`-vector simplex ETF living in `R^d`, stored as a `d x K` matrix whose
/// columns are the frame vectors `w_1..w_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct EtfMatrix {
    vectors: DMatrix<f64>,
    energy: f64,
    seed: u64,
}

impl EtfMatrix {
    pub fn generate(k: usize, d: usize, energy: f64, seed: u64) -> Result<Self, EtfError> {
        generate_etf(k, d, energy, seed)
    }

    pub fn k(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn d(&self) -> usize {
        self.vectors.nrows()
    }

    /// Squared norm budget `E_W` shared by every column.
    pub fn energy(&self) -> f64 {
        self.energy
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The `d x K` frame matrix.
    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn column(&self, k: usize) -> DVector<f64> {
        self.vectors.column(k).into_owned()
    }

    /// The frame as an action head: a `K x d` matrix with `w_k` as row `k`.
    pub fn as_head(&self) -> DMatrix<f64> {
        self.vectors.transpose()
    }

    pub fn gram(&self) -> DMatrix<f64> {
        gram(self)
    }

    pub fn verify_zero_sum(&self) -> f64 {
        verify_zero_sum(self)
    }

    /// Largest deviation of the Gram matrix from its ideal form
    /// (`E_W` on the diagonal, `-E_W/(K-1)` elsewhere).
    pub fn structure_error(&self) -> f64 {
        let k = self.k();
        let g = self.gram();
        let off = -self.energy / (k as f64 - 1.0);
        let mut worst = 0.0f64;
        for i in 0..k {
            for j in 0..k {
                let target = if i == j { self.energy } else { off };
                worst = worst.max((g[(i, j)] - target).abs());
            }
        }
        worst
    }

    fn check_structure(&self) -> Result<(), EtfError> {
        let gram_err = self.structure_error();
        if !(gram_err <= STRUCTURE_TOL * self.energy.max(1.0)) {
            return Err(EtfError::Structure(format!("gram deviation {gram_err:e}")));
        }
        let residual = self.verify_zero_sum();
        if !(residual <= STRUCTURE_TOL * self.energy.sqrt().max(1.0)) {
            return Err(EtfError::Structure(format!("column sum norm {residual:e}")));
        }
        Ok(())
    }

    pub fn to_document(&self) -> EtfDocument {
        let (d, k) = (self.d(), self.k());
        let mut columns = Vec::with_capacity(d * k);
        for c in 0..k {
            columns.extend(self.vectors.column(c).iter().copied());
        }
        EtfDocument {
            k,
            d,
            energy: self.energy,
            seed: self.seed,
            columns,
        }
    }

    /// Rebuilds a frame from its document form, rejecting anything that is
    /// not a simplex ETF within [`STRUCTURE_TOL`].
    pub fn from_document(doc: &EtfDocument) -> Result<Self, EtfError> {
        if doc.k < 2 {
            return Err(EtfError::TooFewVectors(doc.k));
        }
        if doc.d + 1 < doc.k {
            return Err(EtfError::Dimension { k: doc.k, d: doc.d });
        }
        if !(doc.energy > 0.0 && doc.energy.is_finite()) {
            return Err(EtfError::Energy(doc.energy));
        }
        if doc.columns.len() != doc.k * doc.d {
            return Err(EtfError::Malformed(format!(
                "expected {} entries, found {}",
                doc.k * doc.d,
                doc.columns.len()
            )));
        }
        // Each run of `d` values is one frame vector, i.e. the column-major
        // layout of the d x K matrix.
        let vectors = DMatrix::from_column_slice(doc.d, doc.k, &doc.columns);
        let etf = EtfMatrix {
            vectors,
            energy: doc.energy,
            seed: doc.seed,
        };
        etf.check_structure()?;
        Ok(etf)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("frame document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EtfError> {
        let doc: EtfDocument =
            serde_json::from_str(text).map_err(|e| EtfError::Malformed(e.to_string()))?;
        Self::from_document(&doc)
    }
}

/// On-disk form of a frame. `columns` holds the frame row-major as a `K x d`
/// head: entries `[k*d, (k+1)*d)` are the vector `w_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EtfDocument {
    pub k: usize,
    pub d: usize,
    pub energy: f64,
    pub seed: u64,
    pub columns: Vec<f64>,
}

/// Builds a randomly oriented simplex ETF with `k` vectors of squared norm
/// `energy` in `R^d`.
///
/// The orientation comes from a seeded Gaussian matrix orthonormalized with
/// modified Gram-Schmidt; the same arguments always give the same frame.
pub fn generate_etf(k: usize, d: usize, energy: f64, seed: u64) -> Result<EtfMatrix, EtfError> {
    if k < 2 {
        return Err(EtfError::TooFewVectors(k));
    }
    if d + 1 < k {
        return Err(EtfError::Dimension { k, d });
    }
    if !(energy > 0.0 && energy.is_finite()) {
        return Err(EtfError::Energy(energy));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // U needs K orthonormal columns, which requires an ambient dimension of
    // at least K. For the tight case d = K - 1 we build in R^K and rotate the
    // (K-1)-dimensional span of the frame down to R^{K-1} afterwards.
    let ambient = d.max(k);
    let u = draw_orthonormal(ambient, k, &mut rng)?;

    let kf = k as f64;
    let centering = DMatrix::<f64>::identity(k, k) - DMatrix::from_element(k, k, 1.0 / kf);
    let scale = (kf / (kf - 1.0)).sqrt() * energy.sqrt();
    let mut vectors = (u * centering) * scale;

    if ambient != d {
        let basis = orthonormal_span(&vectors, d)?;
        vectors = basis.transpose() * vectors;
    }

    Ok(EtfMatrix {
        vectors,
        energy,
        seed,
    })
}

/// `M^T M`, the `K x K` Gram matrix of the frame.
pub fn gram(m: &EtfMatrix) -> DMatrix<f64> {
    m.vectors.transpose() * &m.vectors
}

/// Euclidean norm of the column sum `M 1`.
pub fn verify_zero_sum(m: &EtfMatrix) -> f64 {
    column_sum_norm(&m.vectors)
}

pub(crate) fn column_sum_norm(m: &DMatrix<f64>) -> f64 {
    m.column_sum().norm()
}

fn draw_orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>, EtfError> {
    for _ in 0..MAX_DRAWS {
        let draw = DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng));
        if let Some(q) = modified_gram_schmidt(&draw) {
            return Ok(q);
        }
    }
    Err(EtfError::Degenerate { draws: MAX_DRAWS })
}

/// Orthonormalizes the columns of `a` in place order. Returns `None` when a
/// column loses all but a `PIVOT_TOL` fraction of its norm to the earlier
/// columns.
pub(crate) fn modified_gram_schmidt(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let mut q = a.clone();
    for j in 0..q.ncols() {
        let original = q.column(j).norm();
        for i in 0..j {
            let proj = q.column(i).dot(&q.column(j));
            let qi = q.column(i).into_owned();
            q.column_mut(j).axpy(-proj, &qi, 1.0);
        }
        let norm = q.column(j).norm();
        if !(norm > PIVOT_TOL * original.max(f64::MIN_POSITIVE)) || !norm.is_finite() {
            return None;
        }
        q.column_mut(j).scale_mut(1.0 / norm);
    }
    Some(q)
}

/// Orthonormal basis (as `ambient x dim` columns) of the span of the first
/// `dim` columns of `m`.
fn orthonormal_span(m: &DMatrix<f64>, dim: usize) -> Result<DMatrix<f64>, EtfError> {
    let leading = m.columns(0, dim).into_owned();
    modified_gram_schmidt(&leading).ok_or(EtfError::Degenerate { draws: 1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_cos(m: &DMatrix<f64>) -> f64 {
        let k = m.ncols();
        let mut worst = f64::NEG_INFINITY;
        for i in 0..k {
            for j in (i + 1)..k {
                let c = m.column(i).dot(&m.column(j)) / (m.column(i).norm() * m.column(j).norm());
                worst = worst.max(c);
            }
        }
        worst
    }

    #[test]
    fn four_vectors_in_eight_dims_have_cosine_minus_third() {
        for seed in 0..5 {
            let etf = generate_etf(4, 8, 1.0, seed).unwrap();
            for i in 0..4 {
                assert!((etf.column(i).norm() - 1.0).abs() < 1e-10);
                for j in 0..4 {
                    if i != j {
                        let c = etf.column(i).dot(&etf.column(j));
                        assert!((c + 1.0 / 3.0).abs() < 1e-10, "cos = {c}");
                    }
                }
            }
        }
    }

    #[test]
    fn two_vectors_are_antipodal() {
        let etf = generate_etf(2, 2, 1.0, 11).unwrap();
        let (a, b) = (etf.column(0), etf.column(1));
        assert!((a.dot(&b) + 1.0).abs() < 1e-10);
        assert!((&a + &b).norm() < 1e-10);
    }

    #[test]
    fn tight_frame_in_k_minus_one_dims() {
        let etf = generate_etf(5, 4, 2.0, 3).unwrap();
        assert_eq!(etf.d(), 4);
        assert!(etf.verify_zero_sum() < 1e-10);
        // Brute-force Gram check, independent of `gram`.
        for i in 0..5 {
            for j in 0..5 {
                let mut s = 0.0;
                for r in 0..4 {
                    s += etf.vectors()[(r, i)] * etf.vectors()[(r, j)];
                }
                let target = if i == j { 2.0 } else { -0.5 };
                assert!((s - target).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gram_entries() {
        let g = generate_etf(3, 5, 1.0, 0).unwrap().gram();
        for i in 0..3 {
            for j in 0..3 {
                let t = if i == j { 1.0 } else { -0.5 };
                assert!((g[(i, j)] - t).abs() < 1e-10);
            }
        }
        let g = generate_etf(2, 3, 1.0, 0).unwrap().gram();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        assert!((g - expected).amax() < 1e-10);
        let g = generate_etf(4, 4, 3.0, 9).unwrap().gram();
        for i in 0..4 {
            for j in 0..4 {
                let t = if i == j { 3.0 } else { -1.0 };
                assert!((g[(i, j)] - t).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn perturbed_column_sum_residual_is_linear() {
        let etf = generate_etf(4, 6, 1.0, 21).unwrap();
        let mut m = etf.vectors().clone();
        let eps = 3e-3;
        m[(0, 2)] += eps;
        assert!((column_sum_norm(&m) - eps).abs() < 1e-12);
    }

    #[test]
    fn gaussian_matrix_has_nonzero_column_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = DMatrix::from_fn(6, 4, |_, _| StandardNormal.sample(&mut rng));
        let r: f64 = column_sum_norm(&m);
        assert!(r > 1e-3);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert_eq!(generate_etf(5, 3, 1.0, 0), Err(EtfError::Dimension { k: 5, d: 3 }));
        assert_eq!(generate_etf(1, 3, 1.0, 0), Err(EtfError::TooFewVectors(1)));
        assert_eq!(generate_etf(3, 3, 0.0, 0), Err(EtfError::Energy(0.0)));
        assert!(generate_etf(3, 3, f64::NAN, 0).is_err());
    }

    #[test]
    fn seeds_change_orientation_not_gram() {
        let a = generate_etf(6, 10, 1.5, 1).unwrap();
        let b = generate_etf(6, 10, 1.5, 2).unwrap();
        assert!((a.vectors() - b.vectors()).amax() > 1e-3);
        assert!((a.gram() - b.gram()).amax() < 1e-10);
        assert_eq!(a, generate_etf(6, 10, 1.5, 1).unwrap());
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let etf = generate_etf(5, 7, 0.75, 42).unwrap();
        let text = etf.to_json();
        let back = EtfMatrix::from_json(&text).unwrap();
        assert_eq!(etf.vectors().as_slice(), back.vectors().as_slice());
        assert_eq!(back.energy(), 0.75);
        assert_eq!(back.seed(), 42);
    }

    #[test]
    fn json_with_broken_structure_is_rejected() {
        let mut doc = generate_etf(3, 3, 1.0, 0).unwrap().to_document();
        doc.columns[0] += 1e-3;
        assert!(matches!(EtfMatrix::from_document(&doc), Err(EtfError::Structure(_))));
        doc.columns.pop();
        assert!(matches!(EtfMatrix::from_document(&doc), Err(EtfError::Malformed(_))));
    }

    #[test]
    fn head_rows_are_frame_vectors() {
        let etf = generate_etf(3, 4, 1.0, 8).unwrap();
        let head = etf.as_head();
        assert_eq!(head.shape(), (3, 4));
        assert_eq!(head.row(1).transpose(), etf.column(1));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn random_unit_vectors_never_beat_simplex_separation(
                k in 2usize..9,
                extra in 0usize..6,
                seed in any::<u64>(),
            ) {
                let d = k - 1 + extra;
                let d = d.max(1);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let m = DMatrix::from_fn(d, k, |_, _| StandardNormal.sample(&mut rng));
                let bound = -1.0 / (k as f64 - 1.0);
                prop_assert!(max_cos(&m) >= bound - 1e-9);
            }

            #[test]
            fn generated_frames_satisfy_invariants(
                k in 2usize..12,
                extra in 0usize..10,
                energy in 0.1f64..10.0,
                seed in any::<u64>(),
            ) {
                let etf = generate_etf(k, k - 1 + extra, energy, seed).unwrap();
                prop_assert!(etf.structure_error() < 1e-10 * energy.max(1.0));
                prop_assert!(etf.verify_zero_sum() < 1e-10 * energy.sqrt().max(1.0));
            }
        }
    }
}
