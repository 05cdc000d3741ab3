//! Simulated coordinator/worker execution of distributed Newton and
//! distributed preconditioned conjugate gradient.
//!
//! Each [`Worker`] owns its rows privately. The coordinator only ever sees
//! what workers send back: `d×c` blocks (gradients, local solutions,
//! Hessian-vector products) and scalars (objective values, log-dets). Every
//! exchange is charged to a [`CommLog`].

use std::ops::Range;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimators::{determinantal_weights, shrinkage_gamma};
use crate::linalg::{effective_dimension, log_det_spd, SpdMatrix};
use crate::losses::{DataLoss, Optimum, Problem};
use crate::trajectory::{
    armijo_backtracking, log10_gap, LineSearchConfig, LineSearchOutcome, RoundRecord, StopReason, StoppingRule,
    Trajectory,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    Shrinkage,
    Average,
    Determinantal,
    /// Shrinkage with the ambient dimension in place of `d_λ`.
    SmallReg,
    /// `(∇²f₁ + λI)^{-1}`; PCG only.
    FirstAgent,
    /// No preconditioning (plain CG); PCG only.
    Identity,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Shrinkage => "shrinkage",
            EstimatorKind::Average => "average",
            EstimatorKind::Determinantal => "determinantal",
            EstimatorKind::SmallReg => "small-reg",
            EstimatorKind::FirstAgent => "first-agent",
            EstimatorKind::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "shrinkage" => EstimatorKind::Shrinkage,
            "average" => EstimatorKind::Average,
            "determinantal" => EstimatorKind::Determinantal,
            "small-reg" => EstimatorKind::SmallReg,
            "first-agent" => EstimatorKind::FirstAgent,
            "identity" | "none" => EstimatorKind::Identity,
            _ => return None,
        })
    }
}

/// Where an agent gets the effective dimension that sets its shrinkage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DLambdaSource {
    /// A value known in advance, e.g. from the population covariance.
    Exact(f64),
    /// Each agent uses the effective dimension of its own local Hessian.
    LocalEmpirical,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    pub d_lambda_source: DLambdaSource,
}

impl EstimatorSpec {
    pub fn shrinkage(source: DLambdaSource) -> Self {
        Self {
            kind: EstimatorKind::Shrinkage,
            d_lambda_source: source,
        }
    }

    fn plain(kind: EstimatorKind) -> Self {
        Self {
            kind,
            d_lambda_source: DLambdaSource::LocalEmpirical,
        }
    }

    pub fn average() -> Self {
        Self::plain(EstimatorKind::Average)
    }

    pub fn determinantal() -> Self {
        Self::plain(EstimatorKind::Determinantal)
    }

    pub fn small_reg() -> Self {
        Self::plain(EstimatorKind::SmallReg)
    }

    pub fn first_agent() -> Self {
        Self::plain(EstimatorKind::FirstAgent)
    }

    pub fn identity() -> Self {
        Self::plain(EstimatorKind::Identity)
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    fn validate(&self) -> Result<()> {
        match self.d_lambda_source {
            DLambdaSource::Exact(v) | DLambdaSource::Fixed(v) if !(v >= 0.0 && v.is_finite()) => Err(
                Error::InvalidArgument(format!("effective dimension must be finite and non-negative, got {v}")),
            ),
            _ => Ok(()),
        }
    }

    fn validate_for_newton(&self) -> Result<()> {
        self.validate()?;
        match self.kind {
            EstimatorKind::FirstAgent | EstimatorKind::Identity => Err(Error::InvalidArgument(format!(
                "{} is only valid as a PCG preconditioner",
                self.name()
            ))),
            _ => Ok(()),
        }
    }
}

/// Communication counters. A round is one broadcast or one gather.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommLog {
    pub rounds: u64,
    /// Total words moved in either direction, summed over agents.
    pub words: u64,
    /// Largest single message seen.
    pub max_message_words: usize,
}

impl CommLog {
    fn exchange(&mut self, agents: usize, words_per_agent: usize) {
        self.rounds += 1;
        self.words += (agents * words_per_agent) as u64;
        self.max_message_words = self.max_message_words.max(words_per_agent);
    }

    /// One round carrying a trial step out and a scalar back.
    fn probe(&mut self, agents: usize, words_out: usize) {
        self.rounds += 1;
        self.words += (agents * (words_out + 1)) as u64;
        self.max_message_words = self.max_message_words.max(words_out);
    }
}

/// One agent holding a private shard.
#[derive(Debug, Clone)]
pub struct Worker<L> {
    id: usize,
    data: L,
}

impl<L: DataLoss> Worker<L> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn rows(&self) -> usize {
        self.data.rows()
    }

    fn window(&self, rows: Range<usize>) -> Self {
        Self {
            id: self.id,
            data: self.data.row_window(rows),
        }
    }

    fn prepare(&self, x: &DMatrix<f64>, lambda: f64, spec: &EstimatorSpec) -> Result<Option<LocalSystem>> {
        let wrap_budget = |e: Error| match e {
            Error::BudgetExceeded { d_lambda, samples, .. } => Error::BudgetExceeded {
                d_lambda,
                samples,
                agent: Some(self.id),
            },
            other => other,
        };
        let samples = self.rows();
        let hessian = self.data.hessian(x)?;
        let (gamma, d_lambda) = match spec.kind {
            EstimatorKind::Identity => return Ok(None),
            EstimatorKind::FirstAgent if self.id != 0 => return Ok(None),
            EstimatorKind::Average | EstimatorKind::Determinantal | EstimatorKind::FirstAgent => (1.0, None),
            EstimatorKind::SmallReg => {
                let d = self.data.dim() as f64;
                (shrinkage_gamma(d, samples).map_err(wrap_budget)?.gamma, Some(d))
            }
            EstimatorKind::Shrinkage => {
                let d = match spec.d_lambda_source {
                    DLambdaSource::Exact(v) | DLambdaSource::Fixed(v) => v,
                    DLambdaSource::LocalEmpirical => effective_dimension(&hessian, lambda)?,
                };
                (shrinkage_gamma(d, samples).map_err(wrap_budget)?.gamma, Some(d))
            }
        };
        let system = hessian.scaled_shifted(gamma, lambda);
        system.cholesky()?;
        let log_det = if spec.kind == EstimatorKind::Determinantal {
            Some(log_det_spd(&system)?)
        } else {
            None
        };
        Ok(Some(LocalSystem {
            system,
            gamma,
            d_lambda,
            log_det,
        }))
    }
}

/// Factored local system `γᵢ∇²fᵢ + λI` kept by an agent between solves.
#[derive(Debug, Clone)]
struct LocalSystem {
    system: SpdMatrix,
    gamma: f64,
    d_lambda: Option<f64>,
    log_det: Option<f64>,
}

/// `d_{λ,i}` of the shard's unregularized Hessian at `x`.
pub fn local_effective_dimension<L: DataLoss>(shard: &L, x: &DMatrix<f64>, lambda: f64) -> Result<f64> {
    effective_dimension(&shard.hessian(x)?, lambda)
}

/// The agents plus the regularizer: everything the coordinator can talk to.
#[derive(Debug, Clone)]
struct Cluster<L> {
    workers: Vec<Worker<L>>,
    lambda: f64,
    dim: usize,
    outputs: usize,
}

impl<L: DataLoss> Cluster<L> {
    fn agents(&self) -> usize {
        self.workers.len()
    }

    fn block_words(&self) -> usize {
        self.dim * self.outputs
    }

    fn broadcast(&self, comm: &mut CommLog) {
        comm.exchange(self.agents(), self.block_words());
    }

    fn window(&self, rows: Range<usize>) -> Self {
        Self {
            workers: self.workers.iter().map(|w| w.window(rows.clone())).collect(),
            lambda: self.lambda,
            dim: self.dim,
            outputs: self.outputs,
        }
    }

    /// Broadcast `x`, gather local gradients and objective values.
    fn gradient_and_value(&self, x: &DMatrix<f64>, comm: &mut CommLog) -> Result<(DMatrix<f64>, f64)> {
        self.broadcast(comm);
        let locals: Vec<Result<(DMatrix<f64>, f64)>> = self
            .workers
            .par_iter()
            .map(|w| Ok((w.data.gradient(x)?, w.data.value(x)?)))
            .collect();
        comm.exchange(self.agents(), self.block_words() + 1);
        let m = self.agents() as f64;
        let mut g = DMatrix::zeros(self.dim, self.outputs);
        let mut f = 0.0;
        for local in locals {
            let (gi, fi) = local?;
            g += gi;
            f += fi;
        }
        Ok((g / m + x * self.lambda, f / m + 0.5 * self.lambda * x.norm_squared()))
    }

    /// One round: agents evaluate their objective at a trial point.
    fn objective_probe(&self, x: &DMatrix<f64>, comm: &mut CommLog) -> Result<f64> {
        comm.probe(self.agents(), self.block_words() + 1);
        let values: Vec<Result<f64>> = self.workers.par_iter().map(|w| w.data.value(x)).collect();
        let mut f = 0.0;
        for v in values {
            f += v?;
        }
        Ok(f / self.agents() as f64 + 0.5 * self.lambda * x.norm_squared())
    }

    /// Broadcast `p`, gather `∇²fᵢ(x)p`; returns `(1/m)Σ∇²fᵢ(x)p + λp`.
    fn hessian_vector(&self, x: &DMatrix<f64>, p: &DMatrix<f64>, comm: &mut CommLog) -> Result<DMatrix<f64>> {
        self.broadcast(comm);
        let locals: Vec<Result<DMatrix<f64>>> = self.workers.par_iter().map(|w| w.data.hessian_vector(x, p)).collect();
        comm.exchange(self.agents(), self.block_words());
        let mut acc = DMatrix::zeros(self.dim, self.outputs);
        for local in locals {
            acc += local?;
        }
        Ok(acc / self.agents() as f64 + p * self.lambda)
    }

    /// Local factorizations only; no communication.
    fn prepare(&self, x: &DMatrix<f64>, spec: &EstimatorSpec) -> Result<Preconditioner> {
        spec.validate()?;
        let systems: Vec<Result<Option<LocalSystem>>> = self
            .workers
            .par_iter()
            .map(|w| w.prepare(x, self.lambda, spec))
            .collect();
        let systems = systems.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(Preconditioner {
            kind: spec.kind,
            systems,
        })
    }

    /// Broadcast `r`, agents solve their local system, gather the solutions
    /// (and log-dets for determinantal weighting), combine.
    fn apply(&self, pre: &Preconditioner, r: &DMatrix<f64>, comm: &mut CommLog) -> Result<DMatrix<f64>> {
        if pre.kind == EstimatorKind::Identity {
            return Ok(r.clone());
        }
        self.broadcast(comm);
        let solutions: Vec<Result<Option<DMatrix<f64>>>> = pre
            .systems
            .par_iter()
            .map(|s| s.as_ref().map(|s| s.system.solve(r)).transpose())
            .collect();
        let responders = pre.systems.iter().filter(|s| s.is_some()).count();
        let extra = usize::from(pre.kind == EstimatorKind::Determinantal);
        comm.exchange(responders, self.block_words() + extra);
        let solutions = solutions.into_iter().collect::<Result<Vec<_>>>()?;
        let mut acc = DMatrix::zeros(self.dim, self.outputs);
        match pre.kind {
            EstimatorKind::Determinantal => {
                let log_dets: Vec<f64> = pre.systems.iter().flatten().map(|s| s.log_det.unwrap_or(0.0)).collect();
                let weights = determinantal_weights(&log_dets);
                let total: f64 = weights.iter().sum();
                for (z, w) in solutions.iter().flatten().zip(&weights) {
                    acc += z * *w;
                }
                acc /= total;
            }
            _ => {
                for z in solutions.iter().flatten() {
                    acc += z;
                }
                acc /= responders as f64;
            }
        }
        if acc.iter().all(|v| v.is_finite()) {
            Ok(acc)
        } else {
            Err(Error::NonFinite("preconditioned direction"))
        }
    }
}

/// Prepared distributed preconditioner: one factored system per responding
/// agent.
#[derive(Debug, Clone)]
pub struct Preconditioner {
    kind: EstimatorKind,
    systems: Vec<Option<LocalSystem>>,
}

impl Preconditioner {
    pub fn kind(&self) -> EstimatorKind {
        self.kind
    }

    /// Shrinkage coefficient used by each agent (`None` for idle agents).
    pub fn gammas(&self) -> Vec<Option<f64>> {
        self.systems.iter().map(|s| s.as_ref().map(|s| s.gamma)).collect()
    }

    /// Effective dimension used by each agent, where one was needed.
    pub fn d_lambdas(&self) -> Vec<Option<f64>> {
        self.systems
            .iter()
            .map(|s| s.as_ref().and_then(|s| s.d_lambda))
            .collect()
    }
}

/// Data split evenly across `m` agents, plus the pooled problem used for
/// reporting only.
#[derive(Debug, Clone)]
pub struct ShardedProblem<L> {
    cluster: Cluster<L>,
    pooled: Problem<L>,
}

impl<L: DataLoss + Clone> ShardedProblem<L> {
    /// Keeps the first `m·⌊n/m⌋` rows of `problem` and gives agent `i` rows
    /// `[i·k, (i+1)·k)`.
    pub fn split(problem: &Problem<L>, agents: usize) -> Result<Self> {
        if agents == 0 {
            return Err(Error::InvalidArgument("at least one agent is required".into()));
        }
        let k = problem.data.rows() / agents;
        if k == 0 {
            return Err(Error::InvalidArgument(format!(
                "{} rows cannot be split across {agents} agents",
                problem.data.rows()
            )));
        }
        let pooled = Problem::new(problem.data.row_window(0..agents * k), problem.lambda)?;
        let workers = (0..agents)
            .map(|id| Worker {
                id,
                data: problem.data.row_window(id * k..(id + 1) * k),
            })
            .collect();
        Ok(Self {
            cluster: Cluster {
                workers,
                lambda: problem.lambda,
                dim: problem.dim(),
                outputs: problem.outputs(),
            },
            pooled,
        })
    }
}

impl<L: DataLoss> ShardedProblem<L> {
    pub fn agents(&self) -> usize {
        self.cluster.agents()
    }

    pub fn rows_per_agent(&self) -> usize {
        self.cluster.workers[0].rows()
    }

    pub fn n_total(&self) -> usize {
        self.agents() * self.rows_per_agent()
    }

    pub fn dim(&self) -> usize {
        self.cluster.dim
    }

    pub fn lambda(&self) -> f64 {
        self.cluster.lambda
    }

    pub fn workers(&self) -> &[Worker<L>] {
        &self.cluster.workers
    }

    /// The union of all shards as one problem. For evaluation only.
    pub fn pooled(&self) -> &Problem<L> {
        &self.pooled
    }

    /// Builds the distributed preconditioner at `x` (local work only).
    pub fn preconditioner(&self, x: &DMatrix<f64>, spec: &EstimatorSpec) -> Result<Preconditioner> {
        self.cluster.prepare(x, spec)
    }

    /// Applies a prepared preconditioner to `r`, charging its two rounds.
    pub fn apply_preconditioner(
        &self,
        pre: &Preconditioner,
        r: &DMatrix<f64>,
        comm: &mut CommLog,
    ) -> Result<DMatrix<f64>> {
        self.cluster.apply(pre, r, comm)
    }

    /// `(1/m)Σ∇fᵢ(x) + λx`, charging two rounds.
    pub fn gradient(&self, x: &DMatrix<f64>, comm: &mut CommLog) -> Result<DMatrix<f64>> {
        Ok(self.cluster.gradient_and_value(x, comm)?.0)
    }
}

/// Result of one Newton round.
#[derive(Debug, Clone)]
pub struct NewtonStep {
    pub x_next: DMatrix<f64>,
    pub direction: DMatrix<f64>,
    pub gradient: DMatrix<f64>,
    pub objective: f64,
    pub line_search: LineSearchOutcome,
}

/// Armijo search along `−direction`, one communication round per probe.
pub fn backtracking_line_search<L: DataLoss>(
    problem: &ShardedProblem<L>,
    x: &DMatrix<f64>,
    direction: &DMatrix<f64>,
    gradient: &DMatrix<f64>,
    objective: f64,
    config: &LineSearchConfig,
    comm: &mut CommLog,
) -> Result<LineSearchOutcome> {
    line_search(&problem.cluster, x, direction, gradient, objective, config, comm)
}

fn line_search<L: DataLoss>(
    cluster: &Cluster<L>,
    x: &DMatrix<f64>,
    direction: &DMatrix<f64>,
    gradient: &DMatrix<f64>,
    objective: f64,
    config: &LineSearchConfig,
    comm: &mut CommLog,
) -> Result<LineSearchOutcome> {
    config.validate()?;
    let slope = gradient.dot(direction);
    armijo_backtracking(objective, slope, config, |eta| {
        cluster.objective_probe(&(x - direction * eta), comm)
    })
}

/// One round of distributed Newton: gather gradients, broadcast the global
/// gradient, gather the agents' (shrunk) local Newton directions, combine,
/// line search.
pub fn newton_round<L: DataLoss>(
    problem: &ShardedProblem<L>,
    x: &DMatrix<f64>,
    spec: &EstimatorSpec,
    config: &LineSearchConfig,
    comm: &mut CommLog,
) -> Result<NewtonStep> {
    spec.validate_for_newton()?;
    let pre = problem.cluster.prepare(x, spec)?;
    newton_round_with(&problem.cluster, x, &pre, config, comm)
}

fn newton_round_with<L: DataLoss>(
    cluster: &Cluster<L>,
    x: &DMatrix<f64>,
    pre: &Preconditioner,
    config: &LineSearchConfig,
    comm: &mut CommLog,
) -> Result<NewtonStep> {
    let (gradient, objective) = cluster.gradient_and_value(x, comm)?;
    let direction = cluster.apply(pre, &gradient, comm)?;
    let ls = line_search(cluster, x, &direction, &gradient, objective, config, comm)?;
    let x_next = if ls.failed { x.clone() } else { x - &direction * ls.eta };
    Ok(NewtonStep {
        x_next,
        direction,
        gradient,
        objective,
        line_search: ls,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcgConfig {
    pub tol: f64,
    pub max_iterations: usize,
}

impl Default for PcgConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iterations: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PcgOutcome {
    /// Approximate solution of `∇²f(v)·step = ∇f(v)`.
    pub step: DMatrix<f64>,
    pub iterations: usize,
    /// `‖r‖/‖b‖` before the first iteration and after each one.
    pub residual_history: Vec<f64>,
    pub gradient: DMatrix<f64>,
    pub objective: f64,
}

/// Distributed PCG on `∇²f(v)·s = ∇f(v)`.
pub fn distributed_pcg<L: DataLoss>(
    problem: &ShardedProblem<L>,
    v: &DMatrix<f64>,
    spec: &EstimatorSpec,
    config: &PcgConfig,
    comm: &mut CommLog,
) -> Result<PcgOutcome> {
    let pre = problem.cluster.prepare(v, spec)?;
    pcg_with(&problem.cluster, v, &pre, config, comm)
}

fn pcg_with<L: DataLoss>(
    cluster: &Cluster<L>,
    v: &DMatrix<f64>,
    pre: &Preconditioner,
    config: &PcgConfig,
    comm: &mut CommLog,
) -> Result<PcgOutcome> {
    let (b, objective) = cluster.gradient_and_value(v, comm)?;
    let b_norm = b.norm();
    let mut step = DMatrix::zeros(b.nrows(), b.ncols());
    if b_norm == 0.0 {
        return Ok(PcgOutcome {
            step,
            iterations: 0,
            residual_history: vec![0.0],
            gradient: b,
            objective,
        });
    }
    let mut r = b.clone();
    let mut z = cluster.apply(pre, &r, comm)?;
    let mut p = z.clone();
    let mut rho = r.dot(&z);
    let mut history = vec![1.0];
    let mut iterations = 0;
    while iterations < config.max_iterations && *history.last().unwrap() > config.tol {
        let omega = cluster.hessian_vector(v, &p, comm)?;
        let curvature = omega.dot(&p);
        if !(curvature > 0.0) {
            return Err(Error::PcgBreakdown {
                curvature,
                iteration: iterations,
            });
        }
        let alpha = rho / curvature;
        step += &p * alpha;
        r -= &omega * alpha;
        iterations += 1;
        history.push(r.norm() / b_norm);
        if *history.last().unwrap() <= config.tol || iterations == config.max_iterations {
            break;
        }
        z = cluster.apply(pre, &r, comm)?;
        let rho_next = r.dot(&z);
        p = &z + &p * (rho_next / rho);
        rho = rho_next;
    }
    Ok(PcgOutcome {
        step,
        iterations,
        residual_history: history,
        gradient: b,
        objective,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NewtonConfig {
    pub line_search: LineSearchConfig,
    pub stopping: StoppingRule,
    /// Each round uses a fresh, disjoint batch of `⌊k / max_rounds⌋` local
    /// rows for gradients, Hessians and the line search. Batches are never
    /// reused; the run stops when they are used up.
    pub fresh_batches: bool,
}

struct Recorder<'a, L> {
    pooled: &'a Problem<L>,
    optimum: &'a Optimum,
    start: Instant,
    rounds: Vec<RoundRecord>,
    last_distance: f64,
}

impl<'a, L: DataLoss> Recorder<'a, L> {
    fn new(pooled: &'a Problem<L>, optimum: &'a Optimum, x0: &DMatrix<f64>) -> Result<Self> {
        let mut rec = Self {
            pooled,
            optimum,
            start: Instant::now(),
            rounds: Vec::new(),
            last_distance: f64::NAN,
        };
        rec.push(x0, 0, 0.0, false, None)?;
        Ok(rec)
    }

    fn push(
        &mut self,
        x: &DMatrix<f64>,
        comm_rounds: u64,
        step_size: f64,
        line_search_failed: bool,
        inner: Option<usize>,
    ) -> Result<f64> {
        let gap = self.pooled.optimality_gap(x, self.optimum)?;
        let distance = (x - &self.optimum.x).norm();
        let contraction = if self.rounds.is_empty() {
            None
        } else {
            Some(distance / self.last_distance)
        };
        self.last_distance = distance;
        self.rounds.push(RoundRecord {
            iteration: self.rounds.len(),
            communication_rounds: comm_rounds,
            objective: self.pooled.objective(x)?,
            gap,
            log10_gap: log10_gap(gap),
            grad_norm: self.pooled.gradient(x)?.norm(),
            step_size,
            iterate_norm: x.norm(),
            distance_to_optimum: distance,
            contraction,
            line_search_failed,
            inner_iterations: inner,
            elapsed_secs: self.start.elapsed().as_secs_f64(),
        });
        Ok(gap)
    }

    fn finish(self, converged: bool, stop_reason: StopReason) -> Trajectory {
        Trajectory {
            rounds: self.rounds,
            converged,
            stop_reason,
        }
    }
}

enum Solver<'a> {
    Newton,
    Pcg(&'a PcgConfig),
}

/// Distributed Newton from `x = 0` until the gap reaches `gap_tol` or
/// `max_rounds` iterations have run.
pub fn run_newton<L: DataLoss>(
    problem: &ShardedProblem<L>,
    optimum: &Optimum,
    spec: &EstimatorSpec,
    config: &NewtonConfig,
) -> Result<Trajectory> {
    spec.validate_for_newton()?;
    drive(problem, optimum, spec, config, Solver::Newton)
}

/// Inexact Newton: each step solves the Newton system by distributed PCG.
pub fn run_inexact_newton<L: DataLoss>(
    problem: &ShardedProblem<L>,
    optimum: &Optimum,
    spec: &EstimatorSpec,
    pcg: &PcgConfig,
    config: &NewtonConfig,
) -> Result<Trajectory> {
    spec.validate()?;
    drive(problem, optimum, spec, config, Solver::Pcg(pcg))
}

fn drive<L: DataLoss>(
    problem: &ShardedProblem<L>,
    optimum: &Optimum,
    spec: &EstimatorSpec,
    config: &NewtonConfig,
    solver: Solver<'_>,
) -> Result<Trajectory> {
    config.line_search.validate()?;
    let stopping = config.stopping;
    let batch = if config.fresh_batches {
        let b = problem.rows_per_agent() / stopping.max_rounds.max(1);
        if b == 0 {
            return Err(Error::InvalidArgument(format!(
                "fresh batches of {} local rows over {} rounds are empty",
                problem.rows_per_agent(),
                stopping.max_rounds
            )));
        }
        Some(b)
    } else {
        None
    };

    let mut x = problem.pooled.zero_iterate();
    let mut comm = CommLog::default();
    let mut rec = Recorder::new(&problem.pooled, optimum, &x)?;
    if rec.rounds[0].gap <= stopping.gap_tol {
        return Ok(rec.finish(true, StopReason::GapReached));
    }
    // Constant Hessians: factor the local systems once.
    let cached = if batch.is_none() && problem.pooled.data.is_quadratic() {
        Some(problem.cluster.prepare(&x, spec)?)
    } else {
        None
    };

    for t in 0..stopping.max_rounds {
        let windowed;
        let cluster = match batch {
            Some(b) => {
                windowed = problem.cluster.window(t * b..(t + 1) * b);
                &windowed
            }
            None => &problem.cluster,
        };
        let fresh;
        let pre = match &cached {
            Some(p) => p,
            None => {
                fresh = cluster.prepare(&x, spec)?;
                &fresh
            }
        };
        let (ls, inner) = match solver {
            Solver::Newton => {
                let step = newton_round_with(cluster, &x, pre, &config.line_search, &mut comm)?;
                x = step.x_next;
                (step.line_search, None)
            }
            Solver::Pcg(pcg) => {
                let out = pcg_with(cluster, &x, pre, pcg, &mut comm)?;
                let ls = line_search(
                    cluster,
                    &x,
                    &out.step,
                    &out.gradient,
                    out.objective,
                    &config.line_search,
                    &mut comm,
                )?;
                if !ls.failed {
                    x -= &out.step * ls.eta;
                }
                (ls, Some(out.iterations))
            }
        };
        let gap = rec.push(&x, comm.rounds, ls.eta, ls.failed, inner)?;
        if gap <= stopping.gap_tol {
            return Ok(rec.finish(true, StopReason::GapReached));
        }
        if ls.failed {
            return Ok(rec.finish(false, StopReason::LineSearchFailed));
        }
    }
    let reason = if batch.is_some() {
        StopReason::BatchesExhausted
    } else {
        StopReason::MaxRounds
    };
    Ok(rec.finish(false, reason))
}
