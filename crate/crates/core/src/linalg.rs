//! Dense symmetric linear algebra and seeded random streams.
//!
//! Every solve against an SPD system goes through a Cholesky factor. Explicit
//! inverses are only formed by [`resolvent`], where the matrix itself is the
//! quantity being estimated.

use std::fmt;
use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Symmetric positive (semi)definite matrix with a lazily computed Cholesky
/// factor.
///
/// Symmetry is enforced on construction as `(M + Mᵀ)/2`, so
/// `entries[i][j] == entries[j][i]` holds bitwise.
pub struct SpdMatrix {
    entries: DMatrix<f64>,
    factor: OnceLock<Option<Cholesky<f64, Dyn>>>,
}

impl SpdMatrix {
    /// Builds from a square matrix, symmetrizing it. Rejects non-finite input.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "expected a square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("SPD matrix entries"));
        }
        Ok(Self::from_symmetric_unchecked(symmetrize(m)))
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_symmetric_unchecked(DMatrix::identity(dim, dim))
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    /// `XᵀX · scale` for a data block `X` (rows are samples).
    pub fn gram(x: &DMatrix<f64>, scale: f64) -> Result<Self> {
        Self::new(x.tr_mul(x) * scale)
    }

    fn from_symmetric_unchecked(entries: DMatrix<f64>) -> Self {
        Self {
            entries,
            factor: OnceLock::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.entries
    }

    /// `self + shift·I`.
    pub fn shifted(&self, shift: f64) -> Self {
        let mut m = self.entries.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += shift;
        }
        Self::from_symmetric_unchecked(m)
    }

    /// `scale·self + shift·I`.
    pub fn scaled_shifted(&self, scale: f64, shift: f64) -> Self {
        let mut m = &self.entries * scale;
        for i in 0..m.nrows() {
            m[(i, i)] += shift;
        }
        Self::from_symmetric_unchecked(m)
    }

    /// Cholesky factor, computed at most once.
    pub fn cholesky(&self) -> Result<&Cholesky<f64, Dyn>> {
        self.factor
            .get_or_init(|| Cholesky::new(self.entries.clone()))
            .as_ref()
            .ok_or(Error::NotPositiveDefinite)
    }

    pub fn solve_vector(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_rows(rhs.nrows())?;
        Ok(self.cholesky()?.solve(rhs))
    }

    pub fn solve(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_rows(rhs.nrows())?;
        Ok(self.cholesky()?.solve(rhs))
    }

    /// Ascending eigenvalues.
    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        let mut ev: Vec<f64> = self.entries.symmetric_eigenvalues().iter().copied().collect();
        if ev.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("eigenvalues"));
        }
        ev.sort_by(f64::total_cmp);
        Ok(ev)
    }

    pub fn trace(&self) -> f64 {
        self.entries.trace()
    }

    fn check_rows(&self, rows: usize) -> Result<()> {
        if rows != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "right-hand side has {rows} rows, matrix is {}x{}",
                self.dim(),
                self.dim()
            )));
        }
        Ok(())
    }
}

impl Clone for SpdMatrix {
    fn clone(&self) -> Self {
        Self {
            entries: self.entries.clone(),
            factor: self.factor.clone(),
        }
    }
}

impl PartialEq for SpdMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl fmt::Debug for SpdMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpdMatrix")
            .field("dim", &self.dim())
            .field("factored", &self.factor.get().is_some())
            .field("entries", &self.entries)
            .finish()
    }
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut out = m;
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (out[(i, j)] + out[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "regularizer must be positive and finite, got {lambda}"
        )));
    }
    Ok(())
}

/// `(S + λI)^{-1}`, formed by solving against the identity.
pub fn resolvent(s: &SpdMatrix, lambda: f64) -> Result<SpdMatrix> {
    check_lambda(lambda)?;
    shifted_inverse(s, 1.0, lambda)
}

/// `(scale·S + shift·I)^{-1}`.
pub(crate) fn shifted_inverse(s: &SpdMatrix, scale: f64, shift: f64) -> Result<SpdMatrix> {
    let system = s.scaled_shifted(scale, shift);
    let inv = system.cholesky()?.inverse();
    SpdMatrix::new(inv)
}

/// `tr(S(S + λI)^{-1}) = Σ σᵢ/(σᵢ + λ)`.
///
/// Eigenvalues that round to slightly negative values (PSD input) are
/// treated as zero.
pub fn effective_dimension(s: &SpdMatrix, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    let ev = s.eigenvalues()?;
    Ok(effective_dimension_from_eigenvalues(&ev, lambda))
}

pub fn effective_dimension_from_eigenvalues(eigenvalues: &[f64], lambda: f64) -> f64 {
    eigenvalues
        .iter()
        .map(|&s| {
            let s = s.max(0.0);
            s / (s + lambda)
        })
        .sum()
}

/// Largest singular value. Symmetric inputs use the symmetric eigensolver,
/// everything else a full SVD.
pub fn spectral_norm(m: &DMatrix<f64>) -> Result<f64> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spectral_norm input"));
    }
    if m.is_empty() {
        return Ok(0.0);
    }
    let symmetric = m.is_square() && (0..m.nrows()).all(|i| (0..i).all(|j| m[(i, j)] == m[(j, i)]));
    let norm = if symmetric {
        m.symmetric_eigenvalues()
            .iter()
            .fold(0.0_f64, |acc, v| acc.max(v.abs()))
    } else {
        m.singular_values().iter().fold(0.0_f64, |acc, v| acc.max(*v))
    };
    Ok(norm)
}

/// `log det S = 2 Σ log Lᵢᵢ`.
pub fn log_det_spd(s: &SpdMatrix) -> Result<f64> {
    let chol = s.cholesky()?;
    let l = chol.l_dirty();
    Ok(2.0 * (0..s.dim()).map(|i| l[(i, i)].ln()).sum::<f64>())
}

/// Counter-based random stream.
///
/// The output is a pure function of `(seed, stream_id, counter)`: the seed
/// keys a ChaCha8 generator, `stream_id` selects one of its 2⁶⁴ disjoint
/// streams and `counter` is the word position inside that stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
    pub counter: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self {
            seed,
            stream_id,
            counter: 0,
        }
    }

    pub fn with_counter(self, counter: u64) -> Self {
        Self { counter, ..self }
    }

    /// Child stream for a labelled sub-task (trial, worker, sketch...).
    pub fn derive(&self, label: u64) -> Self {
        let id = splitmix64(splitmix64(self.stream_id) ^ label.wrapping_mul(0xD1B5_4A32_D192_ED03));
        Self::new(self.seed, id)
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng.set_word_pos(u128::from(self.counter));
        rng
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `rows × cols` matrix of i.i.d. `Normal(0, scale²)` entries, drawn in
/// row-major order from `stream`.
pub fn gaussian_matrix(rows: usize, cols: usize, scale: f64, stream: &RngStream) -> DMatrix<f64> {
    let mut rng = stream.rng();
    DMatrix::from_row_iterator(
        rows,
        cols,
        (0..rows * cols).map(|_| scale * rng.sample::<f64, _>(StandardNormal)),
    )
}

/// Uniform `[0, 1)` matrix in row-major draw order.
pub fn uniform_matrix(rows: usize, cols: usize, stream: &RngStream) -> DMatrix<f64> {
    let mut rng = stream.rng();
    DMatrix::from_row_iterator(rows, cols, (0..rows * cols).map(|_| rng.random::<f64>()))
}

/// Euclidean/Frobenius inner product.
pub fn dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.dot(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
    }

    fn random_spd(d: usize, seed: u64) -> SpdMatrix {
        let x = gaussian_matrix(d + 3, d, 1.0, &RngStream::new(seed, 0));
        SpdMatrix::gram(&x, 1.0 / (d + 3) as f64).unwrap()
    }

    fn diag(v: &[f64]) -> SpdMatrix {
        SpdMatrix::from_diagonal(v).unwrap()
    }

    #[test]
    fn construction_symmetrizes() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 3.0]);
        let s = SpdMatrix::new(m).unwrap();
        assert_eq!(s.as_matrix()[(0, 1)], 1.0);
        assert_eq!(s.as_matrix()[(1, 0)], 1.0);
    }

    #[test]
    fn rejects_non_square_and_nan() {
        assert!(matches!(
            SpdMatrix::new(DMatrix::zeros(2, 3)),
            Err(Error::ShapeMismatch(_))
        ));
        let mut m = DMatrix::identity(2, 2);
        m[(0, 0)] = f64::NAN;
        assert!(SpdMatrix::new(m).is_err());
    }

    #[test]
    fn cholesky_reconstructs() {
        let s = random_spd(8, 1);
        let l = s.cholesky().unwrap().l();
        let err = (&l * l.transpose() - s.as_matrix()).norm() / s.as_matrix().norm();
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn resolvent_identity_and_diagonal() {
        let r = resolvent(&SpdMatrix::identity(3), 1.0).unwrap();
        assert!((r.as_matrix() - DMatrix::identity(3, 3) * 0.5).norm() < 1e-15);
        let r = resolvent(&diag(&[3.0, 1.0]), 1.0).unwrap();
        assert!((r.as_matrix()[(0, 0)] - 0.25).abs() < 1e-15);
        assert!((r.as_matrix()[(1, 1)] - 0.5).abs() < 1e-15);
        assert_eq!(r.as_matrix()[(0, 1)], 0.0);
    }

    #[test]
    fn resolvent_two_by_two_matches_direct_inverse() {
        // [[2.5, 1], [1, 2.5]]^{-1} = [[2.5, -1], [-1, 2.5]] / 5.25
        let s = SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        let r = resolvent(&s, 0.5).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[2.5, -1.0, -1.0, 2.5]) / 5.25;
        assert!((r.as_matrix() - &expected).norm() < 1e-15);
        let prod = r.as_matrix() * s.shifted(0.5).as_matrix();
        assert!((prod - DMatrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn resolvent_rejects_indefinite_and_bad_lambda() {
        let s = diag(&[-5.0, 1.0]);
        assert_eq!(resolvent(&s, 1.0).unwrap_err(), Error::NotPositiveDefinite);
        assert!(matches!(
            resolvent(&SpdMatrix::identity(2), 0.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn effective_dimension_examples() {
        let d = effective_dimension(&SpdMatrix::identity(10), 1.0).unwrap();
        assert!((d - 5.0).abs() < 1e-14);
        let d = effective_dimension(&diag(&[2.0, 1.0]), 1.0).unwrap();
        assert!((d - 7.0 / 6.0).abs() < 1e-14);
    }

    #[test]
    fn effective_dimension_decreases_in_lambda() {
        let s = random_spd(5, 7);
        let vals: Vec<f64> = [0.01, 0.1, 1.0, 10.0]
            .iter()
            .map(|&l| effective_dimension(&s, l).unwrap())
            .collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]), "{vals:?}");
        assert!(effective_dimension(&s, 1e12).unwrap() < 1e-9);
    }

    #[test]
    fn effective_dimension_matches_trace_formula() {
        let s = random_spd(6, 3);
        let r = resolvent(&s, 0.3).unwrap();
        let trace = (s.as_matrix() * r.as_matrix()).trace();
        assert!(rel_close(effective_dimension(&s, 0.3).unwrap(), trace, 1e-12));
    }

    #[test]
    fn spectral_norm_examples() {
        assert_eq!(spectral_norm(&DMatrix::zeros(3, 3)).unwrap(), 0.0);
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, -5.0]));
        assert!((spectral_norm(&m).unwrap() - 5.0).abs() < 1e-14);
        let mut bad = DMatrix::zeros(2, 2);
        bad[(1, 0)] = f64::INFINITY;
        assert!(spectral_norm(&bad).is_err());
    }

    #[test]
    fn spectral_norm_symmetric_matches_eigendecomposition() {
        let g = gaussian_matrix(4, 4, 1.0, &RngStream::new(11, 0));
        let m = &g + g.transpose();
        let eig = nalgebra::SymmetricEigen::new(m.clone());
        let expected = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        assert!(rel_close(spectral_norm(&m).unwrap(), expected, 1e-10));
    }

    #[test]
    fn spectral_norm_rectangular_matches_gram_eigenvalue() {
        let g = gaussian_matrix(5, 3, 1.0, &RngStream::new(12, 0));
        let gram = SpdMatrix::gram(&g, 1.0).unwrap();
        let top = *gram.eigenvalues().unwrap().last().unwrap();
        assert!(rel_close(spectral_norm(&g).unwrap(), top.sqrt(), 1e-10));
    }

    #[test]
    fn log_det_examples() {
        assert_eq!(log_det_spd(&SpdMatrix::identity(4)).unwrap(), 0.0);
        let e = std::f64::consts::E;
        assert!((log_det_spd(&diag(&[e, e * e])).unwrap() - 3.0).abs() < 1e-14);
        let s = random_spd(3, 5);
        let expected: f64 = s.eigenvalues().unwrap().iter().map(|v| v.ln()).sum();
        assert!((log_det_spd(&s).unwrap() - expected).abs() < 1e-10);
        assert!(log_det_spd(&diag(&[1.0, -1.0])).is_err());
    }

    #[test]
    fn gaussian_matrix_moments_and_determinism() {
        assert_eq!(gaussian_matrix(0, 4, 1.0, &RngStream::new(1, 0)).len(), 0);
        let stream = RngStream::new(2024, 3);
        let g = gaussian_matrix(1000, 100, 1.0, &stream);
        let n = g.len() as f64;
        let mean = g.sum() / n;
        let var = g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "{mean}");
        assert!((var - 1.0).abs() < 0.02, "{var}");
        let again = gaussian_matrix(1000, 100, 1.0, &stream);
        assert!(g.iter().zip(again.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn streams_are_distinct_and_counter_addressable() {
        let a = gaussian_matrix(1, 8, 1.0, &RngStream::new(9, 0));
        let b = gaussian_matrix(1, 8, 1.0, &RngStream::new(9, 1));
        assert_ne!(a, b);
        let base = RngStream::new(9, 4);
        let mut rng = base.rng();
        let _skip: u32 = rng.random();
        let next: u32 = rng.random();
        let direct: u32 = base.with_counter(1).rng().random();
        assert_eq!(next, direct);
        assert_ne!(base.derive(0), base.derive(1));
    }
}
