//! Multi-trial experiment runs.
//!
//! Random streams: everything drawn for trial `t` comes from
//! `RngStream::new(seed, 0).derive(t)`, so results do not depend on how
//! trials are scheduled. A synthetic covariance is drawn once per config.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use shrinkage_core::data::{self, Dataset};
use shrinkage_core::distributed::{run_inexact_newton, run_newton, EstimatorKind, NewtonConfig, ShardedProblem};
use shrinkage_core::estimators::{
    estimate_resolvent_average, estimate_resolvent_determinantal, estimate_resolvent_shrinkage,
    estimate_resolvent_small_reg, resolvent_relative_error, DeterminantalMode, LocalCovariances,
};
use shrinkage_core::linalg::{effective_dimension, resolvent};
use shrinkage_core::losses::{DataLoss, LogisticProblem, Problem, RidgeProblem};
use shrinkage_core::sketching::{run_ihs, IhsConfig};
use shrinkage_core::trajectory::Trajectory;
use shrinkage_core::{RngStream, SpdMatrix};

use crate::aggregate::{aggregate, AggregatedSeries, Curve, TrialOutcome};
use crate::config::{DLambdaChoice, DataSource, ExperimentConfig, ExperimentKind, LossKind, MethodSpec};
use crate::HarnessError;

const COVARIANCE_LABEL: u64 = u64::MAX;
const DATA_LABEL: u64 = 0;
const TARGET_LABEL: u64 = 1;
const SKETCH_LABEL: u64 = 2;

/// Everything one trial produced, one entry per configured method.
type TrialResults = Vec<(TrialOutcome, Option<Trajectory>)>;

/// Aggregated series plus everything each trial produced.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub series: AggregatedSeries,
    /// One entry per (trial, estimator), in that order.
    pub outcomes: Vec<TrialOutcome>,
    /// Full optimization traces, aligned with `outcomes`. `None` for
    /// resolvent experiments and skipped trials.
    pub trajectories: Vec<Option<Trajectory>>,
}

/// Where the rows come from: a fixed file or a per-trial Gaussian draw.
enum Source {
    File(Dataset),
    Gaussian { sigma: SpdMatrix, n: usize, noise: f64 },
}

impl Source {
    fn load(config: &ExperimentConfig) -> Result<Self, HarnessError> {
        match &config.data {
            DataSource::Libsvm(path) => {
                let ds = data::read_libsvm(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
                let ds = if config.standardize {
                    data::standardize(&ds)?
                } else {
                    ds
                };
                Ok(Source::File(ds))
            }
            DataSource::Synthetic(s) => {
                let root = RngStream::new(config.seed, 0);
                let sigma = s.covariance_spec().materialize(s.d, &root.derive(COVARIANCE_LABEL))?;
                Ok(Source::Gaussian {
                    sigma,
                    n: s.n,
                    noise: s.noise,
                })
            }
        }
    }

    /// The covariance the resolvent is measured against: the population
    /// matrix, or `AᵀA/n` of the whole file.
    fn covariance(&self) -> Result<SpdMatrix, HarnessError> {
        Ok(match self {
            Source::Gaussian { sigma, .. } => sigma.clone(),
            Source::File(ds) => SpdMatrix::gram(&ds.features, 1.0 / ds.rows() as f64)?,
        })
    }

    /// `rows` rows for one resolvent draw.
    fn rows(&self, rows: usize, stream: &RngStream) -> Result<DMatrix<f64>, HarnessError> {
        match self {
            Source::Gaussian { sigma, .. } => Ok(data::synth_gaussian(rows, sigma, stream)?.features),
            Source::File(ds) => {
                let permuted = data::permute_rows(ds, stream);
                Ok(permuted.features.rows(0, rows).into_owned())
            }
        }
    }

    /// Labelled dataset for one optimization trial.
    fn dataset(&self, stream: &RngStream) -> Result<Dataset, HarnessError> {
        match self {
            Source::File(ds) => Ok(data::permute_rows(ds, &stream.derive(DATA_LABEL))),
            Source::Gaussian { sigma, n, noise } => {
                let mut ds = data::synth_gaussian(*n, sigma, &stream.derive(DATA_LABEL))?;
                data::plant_linear_targets(&mut ds, *noise, &stream.derive(TARGET_LABEL));
                Ok(ds)
            }
        }
    }
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput, HarnessError> {
    let source = Source::load(config)?;
    let names: Vec<String> = config.method_names().iter().map(|s| s.to_string()).collect();
    let root = RngStream::new(config.seed, 0);

    let per_trial: Vec<Result<TrialResults, HarnessError>> = match config.experiment {
        ExperimentKind::Resolvent => {
            check_resolvent_budget(config, &source)?;
            let sigma = source.covariance()?;
            let reference = resolvent(&sigma, config.lambda)?;
            let d_lambda = effective_dimension(&sigma, config.lambda)?;
            (0..config.trials)
                .into_par_iter()
                .map(|t| resolvent_trial(config, &source, &sigma, &reference, d_lambda, t, &root.derive(t as u64)))
                .collect()
        }
        _ => (0..config.trials)
            .into_par_iter()
            .map(|t| optimization_trial(config, &source, t, &root.derive(t as u64)))
            .collect(),
    };
    let mut outcomes = Vec::new();
    let mut trajectories = Vec::new();
    for trial in per_trial {
        for (o, traj) in trial? {
            outcomes.push(o);
            trajectories.push(traj);
        }
    }
    let (x_label, y_label) = match config.experiment {
        ExperimentKind::Resolvent => ("local samples per agent", "relative spectral error"),
        ExperimentKind::Newton | ExperimentKind::InexactNewton => ("communication rounds", "log10 gap"),
        ExperimentKind::Ihs => ("iterations", "log10 gap"),
    };
    let series = aggregate(&outcomes, &names, x_label, y_label, config.experiment.plots_gap());
    Ok(ExperimentOutput {
        series,
        outcomes,
        trajectories,
    })
}

fn check_resolvent_budget(config: &ExperimentConfig, source: &Source) -> Result<(), HarnessError> {
    if let Source::File(ds) = source {
        let largest = config.local_samples.iter().max().copied().unwrap_or(0);
        if config.agents * largest > ds.rows() {
            return Err(HarnessError::Config(format!(
                "local-samples: {} agents × {largest} rows exceeds the {} rows in the file",
                config.agents,
                ds.rows()
            )));
        }
    }
    Ok(())
}

fn resolvent_trial(
    config: &ExperimentConfig,
    source: &Source,
    sigma: &SpdMatrix,
    reference: &SpdMatrix,
    exact_d_lambda: f64,
    trial: usize,
    stream: &RngStream,
) -> Result<TrialResults, HarnessError> {
    let lambda = config.lambda;
    let m = config.agents;
    let mut points: Vec<Vec<(f64, Option<f64>)>> = vec![Vec::new(); config.methods.len()];
    for &k in &config.local_samples {
        let a = source.rows(m * k, &stream.derive(DATA_LABEL).derive(k as u64))?;
        let blocks: Vec<DMatrix<f64>> = (0..m).map(|i| a.rows(i * k, k).into_owned()).collect();
        let locals = LocalCovariances::from_data_blocks(&blocks)?;
        for (j, method) in config.methods.iter().enumerate() {
            let MethodSpec::Distributed(kind) = *method else {
                unreachable!("resolvent methods are validated")
            };
            let estimate = match kind {
                EstimatorKind::Shrinkage => {
                    let d_lambda = match config.d_lambda {
                        DLambdaChoice::Fixed(v) => v,
                        _ => exact_d_lambda,
                    };
                    estimate_resolvent_shrinkage(&locals, lambda, d_lambda)
                }
                EstimatorKind::Average => estimate_resolvent_average(&locals, lambda),
                EstimatorKind::SmallReg => estimate_resolvent_small_reg(&locals, lambda),
                EstimatorKind::Determinantal => {
                    let mode = if config.determinantal_global {
                        DeterminantalMode::GlobalDet { reference: sigma }
                    } else {
                        DeterminantalMode::SelfNormalized
                    };
                    estimate_resolvent_determinantal(&locals, lambda, mode)
                }
                EstimatorKind::FirstAgent | EstimatorKind::Identity => unreachable!("resolvent methods are validated"),
            };
            let value = match estimate.and_then(|e| resolvent_relative_error(&e, reference)) {
                Ok(v) => Some(v),
                Err(e) if e.is_skippable() => {
                    log::debug!("trial {trial}, k={k}: {} skipped: {e}", kind.name());
                    None
                }
                Err(e) => return Err(e.into()),
            };
            points[j].push((k as f64, value));
        }
    }
    Ok(config
        .methods
        .iter()
        .zip(points)
        .map(|(method, pts)| {
            (
                TrialOutcome {
                    estimator: method.name().to_string(),
                    trial,
                    curve: Ok(Curve::new(pts)),
                },
                None,
            )
        })
        .collect())
}

/// `±1` labels for logistic loss from any two-valued label column.
fn sign_labels(labels: &[f64]) -> Result<DVector<f64>, HarnessError> {
    let mut classes = labels.to_vec();
    classes.sort_by(f64::total_cmp);
    classes.dedup();
    match classes.as_slice() {
        [lo, _] => Ok(DVector::from_iterator(
            labels.len(),
            labels.iter().map(|l| if l == lo { -1.0 } else { 1.0 }),
        )),
        _ => Err(HarnessError::Config(format!(
            "loss: logistic loss needs exactly two label values, found {}",
            classes.len()
        ))),
    }
}

fn optimization_trial(
    config: &ExperimentConfig,
    source: &Source,
    trial: usize,
    stream: &RngStream,
) -> Result<TrialResults, HarnessError> {
    let ds = source.dataset(stream)?;
    let lambda = config.lambda;
    let population_d_lambda = match source {
        Source::Gaussian { sigma, .. } => Some(effective_dimension(sigma, lambda)?),
        Source::File(_) => None,
    };
    let results = match (config.experiment, config.loss) {
        (ExperimentKind::Ihs, _) => {
            let problem = ridge_problem(config, &ds)?;
            let optimum = problem.reference_optimum()?;
            config
                .methods
                .iter()
                .map(|method| {
                    let MethodSpec::Ihs(variant) = *method else {
                        unreachable!("ihs methods are validated")
                    };
                    let ihs = IhsConfig {
                        sketch_size: config.sketch_size,
                        variant,
                        line_search: config.line_search,
                        stopping: config.stopping,
                        refresh_sketch: config.refresh_sketch,
                    };
                    run_ihs(&problem, &optimum, &ihs, 1, &stream.derive(SKETCH_LABEL)).map(|mut v| v.remove(0))
                })
                .collect()
        }
        (_, LossKind::Ridge) => distributed_runs(config, &ridge_problem(config, &ds)?, population_d_lambda)?,
        (_, LossKind::Logistic) => {
            let problem = LogisticProblem::logistic(ds.features.clone(), sign_labels(&ds.labels)?, lambda)?;
            distributed_runs(config, &problem, population_d_lambda)?
        }
    };
    let mut out = Vec::with_capacity(results.len());
    for (method, result) in config.methods.iter().zip(results) {
        let (curve, traj) = match result {
            Ok(traj) => {
                let pts = traj
                    .rounds
                    .iter()
                    .map(|r| {
                        let x = match config.experiment {
                            ExperimentKind::Ihs => r.iteration as f64,
                            _ => r.communication_rounds as f64,
                        };
                        (x, Some(r.log10_gap))
                    })
                    .collect();
                (Ok(Curve::new(pts)), Some(traj))
            }
            Err(e) if e.is_skippable() => {
                log::debug!("trial {trial}: {} skipped: {e}", method.name());
                (Err(e.to_string()), None)
            }
            Err(e) => return Err(e.into()),
        };
        out.push((
            TrialOutcome {
                estimator: method.name().to_string(),
                trial,
                curve,
            },
            traj,
        ));
    }
    Ok(out)
}

fn ridge_problem(config: &ExperimentConfig, ds: &Dataset) -> Result<RidgeProblem, HarnessError> {
    let targets = if config.one_hot {
        data::one_hot(&ds.labels)?.0
    } else {
        ds.target_column()
    };
    Ok(RidgeProblem::ridge(ds.features.clone(), targets, config.lambda)?)
}

/// Runs every configured estimator on one sharded problem. The exact
/// effective dimension comes from the population covariance when known,
/// otherwise from the pooled Hessian at zero.
fn distributed_runs<L: DataLoss + Clone>(
    config: &ExperimentConfig,
    problem: &Problem<L>,
    population_d_lambda: Option<f64>,
) -> Result<Vec<shrinkage_core::Result<Trajectory>>, HarnessError> {
    let sharded =
        ShardedProblem::split(problem, config.agents).map_err(|e| HarnessError::Config(format!("agents: {e}")))?;
    let pooled = sharded.pooled();
    let optimum = pooled.reference_optimum()?;
    let exact = match (config.d_lambda, population_d_lambda) {
        (DLambdaChoice::Exact, Some(v)) => Some(v),
        (DLambdaChoice::Exact, None) => Some(effective_dimension(
            &pooled.data.hessian(&pooled.zero_iterate())?,
            pooled.lambda,
        )?),
        _ => None,
    };
    let newton = NewtonConfig {
        line_search: config.line_search,
        stopping: config.stopping,
        fresh_batches: config.fresh_batches,
    };
    Ok(config
        .methods
        .iter()
        .map(|method| {
            let MethodSpec::Distributed(kind) = *method else {
                unreachable!("distributed methods are validated")
            };
            let spec = config.estimator_spec(kind, exact);
            match config.experiment {
                ExperimentKind::InexactNewton => run_inexact_newton(&sharded, &optimum, &spec, &config.pcg, &newton),
                _ => run_newton(&sharded, &optimum, &spec, &newton),
            }
        })
        .collect())
}
