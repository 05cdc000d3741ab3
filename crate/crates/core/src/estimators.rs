//! Estimators of the covariance resolvent `(Σ + λI)^{-1}` from `m` local
//! empirical covariances.
//!
//! With local blocks `Σ̂ᵢ = (m/n)·AᵢᵀAᵢ`:
//!
//! | estimator      | local term                                      |
//! |----------------|-------------------------------------------------|
//! | average        | `(Σ̂ᵢ + λI)^{-1}`                                |
//! | shrinkage      | `(γ·Σ̂ᵢ + λI)^{-1}`, `γ = 1/(1 − m·d_λ/n)`        |
//! | small-reg      | shrinkage with `d_λ := d`                       |
//! | determinantal  | `det(Σ̂ᵢ + λI)`-weighted `(Σ̂ᵢ + λI)^{-1}`        |
//!
//! Local terms are computed in parallel but always summed in ascending agent
//! order, so results do not depend on the thread count.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{log_det_spd, shifted_inverse, spectral_norm, SpdMatrix};

/// Local empirical covariances of `m` agents, each scaled by `m/n`.
#[derive(Debug, Clone)]
pub struct LocalCovariances {
    blocks: Vec<SpdMatrix>,
    n_total: usize,
    dim: usize,
}

impl LocalCovariances {
    /// Takes already-scaled blocks `(m/n)·AᵢᵀAᵢ`. The split must be even.
    pub fn new(blocks: Vec<SpdMatrix>, n_total: usize) -> Result<Self> {
        let first = blocks.first().ok_or(Error::Empty("local covariance blocks"))?;
        let dim = first.dim();
        if let Some(bad) = blocks.iter().position(|b| b.dim() != dim) {
            return Err(Error::ShapeMismatch(format!(
                "block {bad} has dimension {}, expected {dim}",
                blocks[bad].dim()
            )));
        }
        if n_total == 0 || !n_total.is_multiple_of(blocks.len()) {
            return Err(Error::InvalidArgument(format!(
                "{n_total} samples cannot be split evenly across {} agents",
                blocks.len()
            )));
        }
        Ok(Self { blocks, n_total, dim })
    }

    /// Builds `(m/n)·AᵢᵀAᵢ` from raw equal-size data blocks.
    pub fn from_data_blocks(blocks: &[DMatrix<f64>]) -> Result<Self> {
        let m = blocks.len();
        if m == 0 {
            return Err(Error::Empty("data blocks"));
        }
        let rows = blocks[0].nrows();
        if let Some(bad) = blocks.iter().position(|b| b.nrows() != rows) {
            return Err(Error::ShapeMismatch(format!(
                "block {bad} has {} rows, expected {rows}",
                blocks[bad].nrows()
            )));
        }
        let n = rows * m;
        let scale = m as f64 / n as f64;
        let covs = blocks
            .par_iter()
            .map(|a| SpdMatrix::gram(a, scale))
            .collect::<Result<Vec<_>>>()?;
        Self::new(covs, n)
    }

    pub fn agents(&self) -> usize {
        self.blocks.len()
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn samples_per_agent(&self) -> usize {
        self.n_total / self.blocks.len()
    }

    pub fn blocks(&self) -> &[SpdMatrix] {
        &self.blocks
    }

    /// Same covariances with agents reordered as `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            blocks: order.iter().map(|&i| self.blocks[i].clone()).collect(),
            ..self.clone()
        }
    }
}

/// `γ = 1/(1 − d_λ/samples)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShrinkageCoefficient {
    pub gamma: f64,
    pub d_lambda_used: f64,
    pub samples_used: usize,
}

/// Shrinkage coefficient for `samples` local samples. Errors when
/// `d_lambda ≥ samples`.
pub fn shrinkage_gamma(d_lambda: f64, samples: usize) -> Result<ShrinkageCoefficient> {
    if !(d_lambda >= 0.0) || !d_lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "effective dimension must be finite and non-negative, got {d_lambda}"
        )));
    }
    if samples == 0 || d_lambda >= samples as f64 {
        return Err(Error::BudgetExceeded {
            d_lambda,
            samples,
            agent: None,
        });
    }
    Ok(ShrinkageCoefficient {
        gamma: 1.0 / (1.0 - d_lambda / samples as f64),
        d_lambda_used: d_lambda,
        samples_used: samples,
    })
}

/// Like [`shrinkage_gamma`] but caps `γ` at `gamma_max` instead of failing.
/// Not used by any default path.
pub fn shrinkage_gamma_clamped(d_lambda: f64, samples: usize, gamma_max: f64) -> Result<ShrinkageCoefficient> {
    match shrinkage_gamma(d_lambda, samples) {
        Ok(c) if c.gamma <= gamma_max => Ok(c),
        Ok(_) | Err(Error::BudgetExceeded { .. }) => Ok(ShrinkageCoefficient {
            gamma: gamma_max,
            d_lambda_used: d_lambda,
            samples_used: samples,
        }),
        Err(e) => Err(e),
    }
}

fn local_resolvents(locals: &LocalCovariances, gamma: f64, lambda: f64) -> Result<Vec<SpdMatrix>> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "regularizer must be positive, got {lambda}"
        )));
    }
    locals
        .blocks
        .par_iter()
        .map(|b| shifted_inverse(b, gamma, lambda))
        .collect()
}

fn ordered_mean(terms: &[SpdMatrix]) -> Result<SpdMatrix> {
    let mut acc = DMatrix::zeros(terms[0].dim(), terms[0].dim());
    for t in terms {
        acc += t.as_matrix();
    }
    SpdMatrix::new(acc / terms.len() as f64)
}

/// `(1/m) Σ (Σ̂ᵢ + λI)^{-1}`.
pub fn estimate_resolvent_average(locals: &LocalCovariances, lambda: f64) -> Result<SpdMatrix> {
    ordered_mean(&local_resolvents(locals, 1.0, lambda)?)
}

/// `(1/m) Σ (γ·Σ̂ᵢ + λI)^{-1}` with `γ = 1/(1 − m·d_λ/n)`.
///
/// `d_lambda` is supplied by the caller: the exact population value, a local
/// empirical estimate or a sketched one.
pub fn estimate_resolvent_shrinkage(locals: &LocalCovariances, lambda: f64, d_lambda: f64) -> Result<SpdMatrix> {
    let coeff = shrinkage_gamma(d_lambda, locals.samples_per_agent())?;
    ordered_mean(&local_resolvents(locals, coeff.gamma, lambda)?)
}

/// Shrinkage estimator with `d` in place of `d_λ`, for vanishing
/// regularizers.
pub fn estimate_resolvent_small_reg(locals: &LocalCovariances, epsilon: f64) -> Result<SpdMatrix> {
    estimate_resolvent_shrinkage(locals, epsilon, locals.dim() as f64)
}

/// Normalization of determinant-weighted averaging.
#[derive(Debug, Clone, Copy)]
pub enum DeterminantalMode<'a> {
    /// `Σ det(Hᵢ) Hᵢ^{-1} / Σ det(Hᵢ)`.
    SelfNormalized,
    /// `Σ det(Hᵢ) Hᵢ^{-1} / (m·det(Σ + λI))` for a known covariance `Σ`.
    GlobalDet { reference: &'a SpdMatrix },
}

/// Weights `exp(log det Hᵢ − max_j log det H_j)` for `Hᵢ = Σ̂ᵢ + λI`.
pub fn determinantal_weights(log_dets: &[f64]) -> Vec<f64> {
    let max = log_dets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    log_dets.iter().map(|l| (l - max).exp()).collect()
}

pub fn estimate_resolvent_determinantal(
    locals: &LocalCovariances,
    lambda: f64,
    mode: DeterminantalMode<'_>,
) -> Result<SpdMatrix> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "regularizer must be positive, got {lambda}"
        )));
    }
    let terms = locals
        .blocks
        .par_iter()
        .map(|b| {
            let h = b.shifted(lambda);
            let log_det = log_det_spd(&h)?;
            let inv = h.cholesky()?.inverse();
            Ok((log_det, inv))
        })
        .collect::<Result<Vec<_>>>()?;
    let log_dets: Vec<f64> = terms.iter().map(|t| t.0).collect();
    let weights = determinantal_weights(&log_dets);
    let d = locals.dim();
    let mut acc = DMatrix::zeros(d, d);
    for ((_, inv), w) in terms.iter().zip(&weights) {
        acc += inv * *w;
    }
    let max_log_det = log_dets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scale = match mode {
        DeterminantalMode::SelfNormalized => 1.0 / weights.iter().sum::<f64>(),
        DeterminantalMode::GlobalDet { reference } => {
            if reference.dim() != d {
                return Err(Error::ShapeMismatch(format!(
                    "reference covariance is {}x{}, expected {d}x{d}",
                    reference.dim(),
                    reference.dim()
                )));
            }
            let ref_log_det = log_det_spd(&reference.shifted(lambda))?;
            (max_log_det - ref_log_det).exp() / locals.agents() as f64
        }
    };
    let out = acc * scale;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("determinantal estimate"));
    }
    SpdMatrix::new(out)
}

/// `‖estimate − reference‖₂ / ‖reference‖₂`.
pub fn resolvent_relative_error(estimate: &SpdMatrix, reference: &SpdMatrix) -> Result<f64> {
    relative_spectral_error(estimate.as_matrix(), reference.as_matrix())
}

pub fn relative_spectral_error(estimate: &DMatrix<f64>, reference: &DMatrix<f64>) -> Result<f64> {
    if estimate.shape() != reference.shape() {
        return Err(Error::ShapeMismatch(format!(
            "estimate {:?} vs reference {:?}",
            estimate.shape(),
            reference.shape()
        )));
    }
    let denom = spectral_norm(reference)?;
    if denom == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok(spectral_norm(&(estimate - reference))? / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_matrix, resolvent, RngStream};

    fn gaussian_locals(m: usize, k: usize, d: usize, stream: &RngStream) -> LocalCovariances {
        let blocks: Vec<_> = (0..m)
            .map(|i| gaussian_matrix(k, d, 1.0, &stream.derive(i as u64)))
            .collect();
        LocalCovariances::from_data_blocks(&blocks).unwrap()
    }

    #[test]
    fn gamma_examples() {
        assert_eq!(shrinkage_gamma(0.0, 10).unwrap().gamma, 1.0);
        assert_eq!(shrinkage_gamma(5.0, 10).unwrap().gamma, 2.0);
        // Isotropic Figure-1 parameters: d = 150, λ = 0.01, n = 30000.
        let d_lambda = 150.0 / 1.01;
        let c = shrinkage_gamma(d_lambda, 30_000).unwrap();
        assert!((d_lambda - 148.514_851_485_148_5).abs() < 1e-9);
        assert!((c.gamma - 1.004_975_124_378_109_5).abs() < 1e-12, "{}", c.gamma);
        assert_eq!(c.samples_used, 30_000);
    }

    #[test]
    fn gamma_budget_violation_is_an_error() {
        let err = shrinkage_gamma(10.0, 10).unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded { samples: 10, .. }));
        assert!(err
            .to_string()
            .contains("effective dimension exceeds local sample budget"));
        let clamped = shrinkage_gamma_clamped(10.0, 10, 50.0).unwrap();
        assert_eq!(clamped.gamma, 50.0);
    }

    #[test]
    fn average_single_agent_and_identical_blocks() {
        let s = SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])).unwrap();
        let one = LocalCovariances::new(vec![s.clone()], 4).unwrap();
        let r = resolvent(&s, 0.3).unwrap();
        assert!((estimate_resolvent_average(&one, 0.3).unwrap().as_matrix() - r.as_matrix()).norm() < 1e-15);
        let many = LocalCovariances::new(vec![s.clone(); 5], 20).unwrap();
        assert!((estimate_resolvent_average(&many, 0.3).unwrap().as_matrix() - r.as_matrix()).norm() < 1e-14);
    }

    #[test]
    fn shrinkage_with_zero_d_lambda_is_average() {
        let locals = gaussian_locals(4, 12, 3, &RngStream::new(5, 0));
        let a = estimate_resolvent_average(&locals, 0.2).unwrap();
        let s = estimate_resolvent_shrinkage(&locals, 0.2, 0.0).unwrap();
        assert_eq!(a, s);
    }

    #[test]
    fn shrinkage_budget_uses_samples_per_agent() {
        let locals = gaussian_locals(4, 12, 3, &RngStream::new(5, 0));
        assert!(estimate_resolvent_shrinkage(&locals, 0.2, 12.0).is_err());
        assert!(estimate_resolvent_shrinkage(&locals, 0.2, 2.9).is_ok());
    }

    #[test]
    fn small_reg_needs_dim_below_local_samples() {
        let locals = gaussian_locals(3, 4, 4, &RngStream::new(6, 0));
        assert!(matches!(
            estimate_resolvent_small_reg(&locals, 1e-3),
            Err(Error::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn small_reg_coefficient_exceeds_exact_one() {
        // d_λ < d for every λ > 0, so the d/n coefficient is always larger.
        let locals = gaussian_locals(2, 40, 5, &RngStream::new(8, 0));
        let sigma = SpdMatrix::identity(5);
        for lambda in [1e-3, 0.1, 1.0, 100.0] {
            let dl = crate::linalg::effective_dimension(&sigma, lambda).unwrap();
            let exact = shrinkage_gamma(dl, locals.samples_per_agent()).unwrap().gamma;
            let small = shrinkage_gamma(5.0, locals.samples_per_agent()).unwrap().gamma;
            assert!(small > exact);
        }
    }

    #[test]
    fn determinantal_trivial_cases() {
        let s = SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0])).unwrap();
        let r = resolvent(&s, 0.5).unwrap();
        let same = LocalCovariances::new(vec![s.clone(); 3], 9).unwrap();
        let est = estimate_resolvent_determinantal(&same, 0.5, DeterminantalMode::SelfNormalized).unwrap();
        assert!((est.as_matrix() - r.as_matrix()).norm() < 1e-14);
        let single = LocalCovariances::new(vec![s.scaled_shifted(1e3, 0.0)], 2).unwrap();
        let est = estimate_resolvent_determinantal(&single, 0.5, DeterminantalMode::SelfNormalized).unwrap();
        let expected = resolvent(&single.blocks()[0], 0.5).unwrap();
        assert!((est.as_matrix() - expected.as_matrix()).norm() < 1e-15);
    }

    #[test]
    fn determinantal_global_det_with_exact_reference() {
        // With every block equal to Σ the global normalization is exact.
        let s = SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0])).unwrap();
        let locals = LocalCovariances::new(vec![s.clone(); 4], 8).unwrap();
        let est =
            estimate_resolvent_determinantal(&locals, 0.5, DeterminantalMode::GlobalDet { reference: &s }).unwrap();
        let r = resolvent(&s, 0.5).unwrap();
        assert!((est.as_matrix() - r.as_matrix()).norm() < 1e-13);
    }

    #[test]
    fn determinantal_is_overflow_free() {
        // det ≈ e^{2000}: naive weights overflow, log-domain weights do not.
        let big = SpdMatrix::identity(200).scaled_shifted(2.0f64.powi(14), 0.0);
        let locals = LocalCovariances::new(vec![big.clone(), big.scaled_shifted(0.5, 0.0)], 2).unwrap();
        let est = estimate_resolvent_determinantal(&locals, 1.0, DeterminantalMode::SelfNormalized).unwrap();
        assert!(est.as_matrix().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn determinantal_weights_are_permutation_equivariant() {
        let locals = gaussian_locals(6, 8, 3, &RngStream::new(21, 0));
        let a = estimate_resolvent_determinantal(&locals, 0.1, DeterminantalMode::SelfNormalized).unwrap();
        let perm = [3, 0, 5, 1, 4, 2];
        let b =
            estimate_resolvent_determinantal(&locals.permuted(&perm), 0.1, DeterminantalMode::SelfNormalized).unwrap();
        assert!((a.as_matrix() - b.as_matrix()).norm() < 1e-12 * a.as_matrix().norm());
    }

    #[test]
    fn relative_error_examples() {
        let r = SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])).unwrap();
        assert_eq!(resolvent_relative_error(&r, &r).unwrap(), 0.0);
        let twice = r.scaled_shifted(2.0, 0.0);
        assert!((resolvent_relative_error(&twice, &r).unwrap() - 1.0).abs() < 1e-14);
        // Perturbation along an eigenvector of R with known norm.
        let diag_r = SpdMatrix::from_diagonal(&[4.0, 1.0]).unwrap();
        let pert = SpdMatrix::from_diagonal(&[4.0, 1.5]).unwrap();
        assert!((resolvent_relative_error(&pert, &diag_r).unwrap() - 0.125).abs() < 1e-15);
        let zero = SpdMatrix::new(DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(resolvent_relative_error(&r, &zero).unwrap_err(), Error::ZeroReference);
    }
}
