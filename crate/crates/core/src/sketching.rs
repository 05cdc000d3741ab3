//! Gaussian sketching and the Iterative Hessian Sketch, optionally with the
//! shrinkage correction of the sketched Hessian.

use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimators::shrinkage_gamma;
use crate::linalg::{effective_dimension, gaussian_matrix, RngStream, SpdMatrix};
use crate::losses::{DataLoss, Optimum, RidgeProblem};
use crate::trajectory::{
    armijo_backtracking, log10_gap, LineSearchConfig, RoundRecord, StopReason, StoppingRule, Trajectory,
};

/// `S·A` with `S` an `m×n` matrix of i.i.d. `N(0, 1/m)` entries.
pub fn sketch(a: &DMatrix<f64>, sketch_size: usize, stream: &RngStream) -> Result<DMatrix<f64>> {
    if sketch_size == 0 {
        return Err(Error::InvalidArgument("sketch size must be at least 1".into()));
    }
    let s = gaussian_matrix(sketch_size, a.nrows(), 1.0 / (sketch_size as f64).sqrt(), stream);
    Ok(s * a)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IhsVariant {
    /// `H_S = (SA)ᵀSA/n + λI`.
    Plain,
    /// `γ(H_S − λI) + λI` with `γ` from the full-data effective dimension.
    ShrinkageExact,
    /// As above with the effective dimension estimated from the sketch.
    ShrinkageApprox,
}

impl IhsVariant {
    pub fn name(self) -> &'static str {
        match self {
            IhsVariant::Plain => "plain",
            IhsVariant::ShrinkageExact => "shrinkage-exact",
            IhsVariant::ShrinkageApprox => "shrinkage-approx",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "plain" => IhsVariant::Plain,
            "shrinkage-exact" => IhsVariant::ShrinkageExact,
            "shrinkage-approx" => IhsVariant::ShrinkageApprox,
            _ => return None,
        })
    }
}

/// `d̃_λ`: effective dimension of `(SA)ᵀSA/n`, scaled by the original row
/// count.
pub fn sketched_effective_dimension(sketched: &DMatrix<f64>, n_rows: usize, lambda: f64) -> Result<f64> {
    effective_dimension(&SpdMatrix::gram(sketched, 1.0 / n_rows as f64)?, lambda)
}

/// Factored sketched Hessian for one sketch.
#[derive(Debug, Clone)]
pub struct SketchedSystem {
    sketched_features: DMatrix<f64>,
    lambda: f64,
    sketch_size: usize,
    variant: IhsVariant,
    d_lambda: Option<f64>,
    d_lambda_tilde: Option<f64>,
    gamma: f64,
    /// `(SA)ᵀSA/n`, without the shift.
    gram: SpdMatrix,
    system: SpdMatrix,
}

impl SketchedSystem {
    /// `d_lambda` is the full-data effective dimension and is required by
    /// [`IhsVariant::ShrinkageExact`].
    pub fn new(
        sketched: DMatrix<f64>,
        n_rows: usize,
        lambda: f64,
        variant: IhsVariant,
        d_lambda: Option<f64>,
    ) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "regularizer must be positive, got {lambda}"
            )));
        }
        let sketch_size = sketched.nrows();
        let gram = SpdMatrix::gram(&sketched, 1.0 / n_rows as f64)?;
        let (gamma, d_lambda, d_lambda_tilde) = match variant {
            IhsVariant::Plain => (1.0, d_lambda, None),
            IhsVariant::ShrinkageExact => {
                let d = d_lambda.ok_or_else(|| {
                    Error::InvalidArgument("shrinkage-exact needs the full-data effective dimension".into())
                })?;
                (shrinkage_gamma(d, sketch_size)?.gamma, Some(d), None)
            }
            IhsVariant::ShrinkageApprox => {
                let dt = effective_dimension(&gram, lambda)?;
                (shrinkage_gamma(dt, sketch_size)?.gamma, d_lambda, Some(dt))
            }
        };
        let system = gram.scaled_shifted(gamma, lambda);
        system.cholesky()?;
        Ok(Self {
            sketched_features: sketched,
            lambda,
            sketch_size,
            variant,
            d_lambda,
            d_lambda_tilde,
            gamma,
            gram,
            system,
        })
    }

    pub fn sketched_features(&self) -> &DMatrix<f64> {
        &self.sketched_features
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn sketch_size(&self) -> usize {
        self.sketch_size
    }

    pub fn variant(&self) -> IhsVariant {
        self.variant
    }

    pub fn d_lambda(&self) -> Option<f64> {
        self.d_lambda
    }

    pub fn d_lambda_tilde(&self) -> Option<f64> {
        self.d_lambda_tilde
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// `H_S − λI`.
    pub fn sketched_gram(&self) -> &SpdMatrix {
        &self.gram
    }

    /// The matrix actually solved against: `γ(H_S − λI) + λI`.
    pub fn system(&self) -> &SpdMatrix {
        &self.system
    }
}

/// Solves the (shrunk) sketched system against `g`.
pub fn ihs_direction(sys: &SketchedSystem, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    sys.system.solve(g)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IhsConfig {
    pub sketch_size: usize,
    pub variant: IhsVariant,
    pub line_search: LineSearchConfig,
    pub stopping: StoppingRule,
    /// Draw a new sketch every iteration instead of once per trial.
    pub refresh_sketch: bool,
}

/// One IHS trajectory per trial, trial `t` sketching with `stream.derive(t)`.
pub fn run_ihs(
    problem: &RidgeProblem,
    optimum: &Optimum,
    config: &IhsConfig,
    trials: usize,
    stream: &RngStream,
) -> Result<Vec<Trajectory>> {
    config.line_search.validate()?;
    let d_lambda = match config.variant {
        IhsVariant::ShrinkageExact => Some(effective_dimension(
            &problem.data.hessian(&problem.zero_iterate())?,
            problem.lambda,
        )?),
        _ => None,
    };
    let runs: Vec<Result<Trajectory>> = (0..trials)
        .into_par_iter()
        .map(|t| run_ihs_trial(problem, optimum, config, d_lambda, &stream.derive(t as u64)))
        .collect();
    runs.into_iter().collect()
}

fn run_ihs_trial(
    problem: &RidgeProblem,
    optimum: &Optimum,
    config: &IhsConfig,
    d_lambda: Option<f64>,
    stream: &RngStream,
) -> Result<Trajectory> {
    let a = problem.data.features();
    let n = a.nrows();
    let make_system = |s: &RngStream| {
        SketchedSystem::new(
            sketch(a, config.sketch_size, s)?,
            n,
            problem.lambda,
            config.variant,
            d_lambda,
        )
    };
    let mut sys = make_system(stream)?;
    let start = Instant::now();
    let mut x = problem.zero_iterate();
    let mut f = problem.objective(&x)?;
    let mut last_distance = (&x - &optimum.x).norm();
    let record = |x: &DMatrix<f64>,
                  f: f64,
                  it: usize,
                  eta: f64,
                  failed: bool,
                  contraction: Option<f64>|
     -> Result<RoundRecord> {
        let gap = problem.optimality_gap(x, optimum)?;
        Ok(RoundRecord {
            iteration: it,
            communication_rounds: 0,
            objective: f,
            gap,
            log10_gap: log10_gap(gap),
            grad_norm: problem.gradient(x)?.norm(),
            step_size: eta,
            iterate_norm: x.norm(),
            distance_to_optimum: (x - &optimum.x).norm(),
            contraction,
            line_search_failed: failed,
            inner_iterations: None,
            elapsed_secs: start.elapsed().as_secs_f64(),
        })
    };
    let mut rounds = vec![record(&x, f, 0, 0.0, false, None)?];
    if rounds[0].gap <= config.stopping.gap_tol {
        return Ok(Trajectory {
            rounds,
            converged: true,
            stop_reason: StopReason::GapReached,
        });
    }
    for it in 1..=config.stopping.max_rounds {
        if config.refresh_sketch && it > 1 {
            sys = make_system(&stream.derive(it as u64))?;
        }
        let g = problem.gradient(&x)?;
        let dir = ihs_direction(&sys, &g)?;
        let ls = armijo_backtracking(f, g.dot(&dir), &config.line_search, |eta| {
            problem.objective(&(&x - &dir * eta))
        })?;
        if !ls.failed {
            x -= &dir * ls.eta;
            f = ls.value;
        }
        let distance = (&x - &optimum.x).norm();
        let rec = record(&x, f, it, ls.eta, ls.failed, Some(distance / last_distance))?;
        last_distance = distance;
        let gap = rec.gap;
        rounds.push(rec);
        if gap <= config.stopping.gap_tol {
            return Ok(Trajectory {
                rounds,
                converged: true,
                stop_reason: StopReason::GapReached,
            });
        }
        if ls.failed {
            return Ok(Trajectory {
                rounds,
                converged: false,
                stop_reason: StopReason::LineSearchFailed,
            });
        }
    }
    Ok(Trajectory {
        rounds,
        converged: false,
        stop_reason: StopReason::MaxRounds,
    })
}
