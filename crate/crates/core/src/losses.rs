//! Ridge and logistic losses.
//!
//! [`DataLoss`] is the unregularized mean loss over a block of rows; it is
//! what a worker holds. [`Problem`] adds `λ‖x‖²/2` on top and is what the
//! coordinator optimizes. Iterates are `d × c` matrices: `c > 1` only for
//! multi-output (one-hot) ridge, logistic always has `c = 1`.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::SpdMatrix;

pub trait DataLoss: Send + Sync {
    fn rows(&self) -> usize;
    fn dim(&self) -> usize;
    /// Number of iterate columns.
    fn outputs(&self) -> usize;
    /// Hessian independent of the iterate.
    fn is_quadratic(&self) -> bool;
    fn value(&self, x: &DMatrix<f64>) -> Result<f64>;
    fn gradient(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>>;
    /// Unregularized Hessian, shared by all iterate columns.
    fn hessian(&self, x: &DMatrix<f64>) -> Result<SpdMatrix>;
    /// `∇²f(x)·v` without forming the Hessian.
    fn hessian_vector(&self, x: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>>;
    /// The same loss restricted to a contiguous row range.
    fn row_window(&self, rows: Range<usize>) -> Self
    where
        Self: Sized;

    fn check_iterate(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.shape() != (self.dim(), self.outputs()) {
            return Err(Error::ShapeMismatch(format!(
                "iterate is {}x{}, expected {}x{}",
                x.nrows(),
                x.ncols(),
                self.dim(),
                self.outputs()
            )));
        }
        Ok(())
    }
}

/// `‖Ax − b‖²_F / (2n)`.
#[derive(Debug, Clone)]
pub struct RidgeData {
    features: DMatrix<f64>,
    targets: DMatrix<f64>,
}

impl RidgeData {
    pub fn new(features: DMatrix<f64>, targets: DMatrix<f64>) -> Result<Self> {
        if features.nrows() != targets.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature rows vs {} target rows",
                features.nrows(),
                targets.nrows()
            )));
        }
        if targets.ncols() == 0 {
            return Err(Error::ShapeMismatch("targets need at least one column".into()));
        }
        Ok(Self { features, targets })
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn targets(&self) -> &DMatrix<f64> {
        &self.targets
    }

    fn residual(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        &self.features * x - &self.targets
    }
}

impl DataLoss for RidgeData {
    fn rows(&self) -> usize {
        self.features.nrows()
    }

    fn dim(&self) -> usize {
        self.features.ncols()
    }

    fn outputs(&self) -> usize {
        self.targets.ncols()
    }

    fn is_quadratic(&self) -> bool {
        true
    }

    fn value(&self, x: &DMatrix<f64>) -> Result<f64> {
        self.check_iterate(x)?;
        Ok(self.residual(x).norm_squared() / (2.0 * self.rows() as f64))
    }

    fn gradient(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_iterate(x)?;
        Ok(self.features.tr_mul(&self.residual(x)) / self.rows() as f64)
    }

    fn hessian(&self, _x: &DMatrix<f64>) -> Result<SpdMatrix> {
        SpdMatrix::gram(&self.features, 1.0 / self.rows() as f64)
    }

    fn hessian_vector(&self, _x: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_iterate(v)?;
        Ok(self.features.tr_mul(&(&self.features * v)) / self.rows() as f64)
    }

    fn row_window(&self, rows: Range<usize>) -> Self {
        let len = rows.len();
        Self {
            features: self.features.rows(rows.start, len).into_owned(),
            targets: self.targets.rows(rows.start, len).into_owned(),
        }
    }
}

/// `(1/n) Σ log(1 + exp(−yᵢ·aᵢᵀx))` with labels in `{−1, +1}`.
#[derive(Debug, Clone)]
pub struct LogisticData {
    features: DMatrix<f64>,
    labels: DVector<f64>,
}

impl LogisticData {
    pub fn new(features: DMatrix<f64>, labels: DVector<f64>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature rows vs {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 1.0 && y != -1.0) {
            return Err(Error::InvalidArgument(format!(
                "logistic labels must be ±1, found {bad}"
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> &DVector<f64> {
        &self.labels
    }

    fn margins(&self, x: &DMatrix<f64>) -> DVector<f64> {
        let ax = &self.features * x.column(0);
        ax.component_mul(&self.labels)
    }

    /// `σ(m)(1 − σ(m))` per row.
    fn curvature(&self, x: &DMatrix<f64>) -> DVector<f64> {
        let ax = &self.features * x.column(0);
        ax.map(|m| {
            let s = sigmoid(m);
            s * (1.0 - s)
        })
    }
}

/// `log(1 + e^{−m})` without overflow.
pub fn softplus_neg(m: f64) -> f64 {
    if m > 0.0 {
        (-m).exp().ln_1p()
    } else {
        -m + m.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl DataLoss for LogisticData {
    fn rows(&self) -> usize {
        self.features.nrows()
    }

    fn dim(&self) -> usize {
        self.features.ncols()
    }

    fn outputs(&self) -> usize {
        1
    }

    fn is_quadratic(&self) -> bool {
        false
    }

    fn value(&self, x: &DMatrix<f64>) -> Result<f64> {
        self.check_iterate(x)?;
        let total: f64 = self.margins(x).iter().map(|&m| softplus_neg(m)).sum();
        Ok(total / self.rows() as f64)
    }

    fn gradient(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_iterate(x)?;
        // d/dm log(1 + e^{−y m}) = −y σ(−y m)
        let coeff = self.margins(x).zip_map(&self.labels, |m, y| -y * sigmoid(-m));
        let g = self.features.tr_mul(&coeff) / self.rows() as f64;
        Ok(DMatrix::from_column_slice(self.dim(), 1, g.as_slice()))
    }

    fn hessian(&self, x: &DMatrix<f64>) -> Result<SpdMatrix> {
        self.check_iterate(x)?;
        let w = self.curvature(x);
        let mut scaled = self.features.clone();
        for (mut row, wi) in scaled.row_iter_mut().zip(w.iter()) {
            row *= wi.sqrt();
        }
        SpdMatrix::gram(&scaled, 1.0 / self.rows() as f64)
    }

    fn hessian_vector(&self, x: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_iterate(x)?;
        self.check_iterate(v)?;
        let w = self.curvature(x);
        let av = (&self.features * v.column(0)).component_mul(&w);
        let hv = self.features.tr_mul(&av) / self.rows() as f64;
        Ok(DMatrix::from_column_slice(self.dim(), 1, hv.as_slice()))
    }

    fn row_window(&self, rows: Range<usize>) -> Self {
        let len = rows.len();
        Self {
            features: self.features.rows(rows.start, len).into_owned(),
            labels: self.labels.rows(rows.start, len).into_owned(),
        }
    }
}

/// `f(x) = data(x) + λ‖x‖²_F / 2`.
#[derive(Debug, Clone)]
pub struct Problem<L> {
    pub data: L,
    pub lambda: f64,
}

pub type RidgeProblem = Problem<RidgeData>;
pub type LogisticProblem = Problem<LogisticData>;

impl RidgeProblem {
    pub fn ridge(features: DMatrix<f64>, targets: DMatrix<f64>, lambda: f64) -> Result<Self> {
        Problem::new(RidgeData::new(features, targets)?, lambda)
    }
}

impl LogisticProblem {
    pub fn logistic(features: DMatrix<f64>, labels: DVector<f64>, lambda: f64) -> Result<Self> {
        Problem::new(LogisticData::new(features, labels)?, lambda)
    }
}

/// Minimizer and minimum of a [`Problem`].
#[derive(Debug, Clone)]
pub struct Optimum {
    pub x: DMatrix<f64>,
    pub value: f64,
}

/// Stopping rule of the reference Newton solver.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceSolver {
    pub grad_tol: f64,
    pub max_iterations: usize,
}

impl Default for ReferenceSolver {
    fn default() -> Self {
        Self {
            grad_tol: 1e-13,
            max_iterations: 200,
        }
    }
}

impl<L: DataLoss> Problem<L> {
    pub fn new(data: L, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "regularizer must be positive, got {lambda}"
            )));
        }
        Ok(Self { data, lambda })
    }

    pub fn dim(&self) -> usize {
        self.data.dim()
    }

    pub fn outputs(&self) -> usize {
        self.data.outputs()
    }

    pub fn zero_iterate(&self) -> DMatrix<f64> {
        DMatrix::zeros(self.dim(), self.outputs())
    }

    pub fn objective(&self, x: &DMatrix<f64>) -> Result<f64> {
        Ok(self.data.value(x)? + 0.5 * self.lambda * x.norm_squared())
    }

    pub fn gradient(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.data.gradient(x)? + x * self.lambda)
    }

    pub fn hessian(&self, x: &DMatrix<f64>) -> Result<SpdMatrix> {
        Ok(self.data.hessian(x)?.shifted(self.lambda))
    }

    pub fn hessian_vector(&self, x: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.data.hessian_vector(x, v)? + v * self.lambda)
    }

    /// Closed-form solve for quadratics, damped Newton with the exact Hessian
    /// otherwise.
    pub fn reference_optimum(&self) -> Result<Optimum> {
        self.reference_optimum_with(ReferenceSolver::default())
    }

    pub fn reference_optimum_with(&self, solver: ReferenceSolver) -> Result<Optimum> {
        let mut x = self.zero_iterate();
        if self.data.is_quadratic() {
            let h = self.hessian(&x)?;
            x = -h.solve(&self.gradient(&x)?)?;
            let value = self.objective(&x)?;
            return Ok(Optimum { x, value });
        }
        let mut f = self.objective(&x)?;
        for it in 0..solver.max_iterations {
            let g = self.gradient(&x)?;
            if g.norm() < solver.grad_tol {
                return Ok(Optimum { x, value: f });
            }
            let step = self.hessian(&x)?.solve(&g)?;
            let slope = g.dot(&step);
            let mut eta = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let trial = &x - &step * eta;
                let ft = self.objective(&trial)?;
                if ft <= f - 1e-4 * eta * slope {
                    x = trial;
                    f = ft;
                    accepted = true;
                    break;
                }
                eta *= 0.5;
            }
            if !accepted {
                // No representable decrease left: accept if the Newton
                // decrement is at rounding level.
                if slope <= 1e-28 * (1.0 + f.abs()) {
                    return Ok(Optimum { x, value: f });
                }
                return Err(Error::NonConvergence {
                    grad_norm: g.norm(),
                    iterations: it,
                });
            }
        }
        let g = self.gradient(&x)?;
        if g.norm() < solver.grad_tol {
            return Ok(Optimum { x, value: f });
        }
        Err(Error::NonConvergence {
            grad_norm: g.norm(),
            iterations: solver.max_iterations,
        })
    }

    /// `f(x) − f*`. Quadratics use `½⟨x − x*, H(x − x*)⟩`, which avoids the
    /// cancellation of subtracting two nearly equal objective values.
    pub fn optimality_gap(&self, x: &DMatrix<f64>, opt: &Optimum) -> Result<f64> {
        if self.data.is_quadratic() {
            let e = x - &opt.x;
            let he = self.hessian_vector(x, &e)?;
            Ok(0.5 * e.dot(&he))
        } else {
            Ok(self.objective(x)? - opt.value)
        }
    }
}
