//! Per-round optimization records and the Armijo line search shared by the
//! Newton, PCG and sketching drivers.

use crate::error::{Error, Result};

/// Armijo backtracking parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchConfig {
    pub c1: f64,
    pub shrink: f64,
    pub max_halvings: u32,
    pub eta0: f64,
}

impl Default for LineSearchConfig {
    fn default() -> Self {
        Self {
            c1: 1e-4,
            shrink: 0.5,
            max_halvings: 30,
            eta0: 1.0,
        }
    }
}

impl LineSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > 0.0 && self.c1 < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "c1 must lie in (0, 1), got {}",
                self.c1
            )));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "shrink factor must lie in (0, 1), got {}",
                self.shrink
            )));
        }
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "eta0 must be positive, got {}",
                self.eta0
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchOutcome {
    pub eta: f64,
    /// Objective evaluations performed.
    pub probes: u32,
    /// No trial step satisfied the Armijo condition; `eta` is the smallest
    /// step tried.
    pub failed: bool,
    /// Objective at the accepted step (last probe when `failed`).
    pub value: f64,
}

/// Largest `η = eta0·shrinkᵏ`, `k ≤ max_halvings`, with
/// `f(x − ηΔ) ≤ f(x) − c1·η·⟨∇f, Δ⟩`.
///
/// `objective_at(η)` evaluates `f(x − ηΔ)`; `slope` is `⟨∇f(x), Δ⟩`.
pub fn armijo_backtracking<F>(
    f0: f64,
    slope: f64,
    config: &LineSearchConfig,
    mut objective_at: F,
) -> Result<LineSearchOutcome>
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut eta = config.eta0;
    let mut probes = 0;
    let mut value = f0;
    for k in 0..=config.max_halvings {
        if k > 0 {
            eta *= config.shrink;
        }
        value = objective_at(eta)?;
        probes += 1;
        if value.is_finite() && value <= f0 - config.c1 * eta * slope {
            return Ok(LineSearchOutcome {
                eta,
                probes,
                failed: false,
                value,
            });
        }
    }
    log::warn!("Armijo line search failed after {probes} probes (slope {slope:e})");
    Ok(LineSearchOutcome {
        eta,
        probes,
        failed: true,
        value,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    GapReached,
    MaxRounds,
    /// Fresh-batch schedule used up all local data.
    BatchesExhausted,
    /// Line search found no decrease; the iterate was left unchanged.
    LineSearchFailed,
}

/// Stop once the optimality gap is at most `gap_tol` or after `max_rounds`
/// iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StoppingRule {
    pub gap_tol: f64,
    pub max_rounds: usize,
}

impl Default for StoppingRule {
    fn default() -> Self {
        Self {
            gap_tol: 1e-10,
            max_rounds: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub iteration: usize,
    /// Cumulative communication rounds (always 0 for sketching).
    pub communication_rounds: u64,
    pub objective: f64,
    pub gap: f64,
    pub log10_gap: f64,
    pub grad_norm: f64,
    pub step_size: f64,
    pub iterate_norm: f64,
    pub distance_to_optimum: f64,
    /// `‖x_{t+1} − x*‖ / ‖x_t − x*‖`; absent on the initial record.
    pub contraction: Option<f64>,
    pub line_search_failed: bool,
    /// Inner PCG iterations spent on this round.
    pub inner_iterations: Option<usize>,
    /// Wall time since the run started. Excluded from determinism checks.
    pub elapsed_secs: f64,
}

impl RoundRecord {
    /// Equality on every field except wall time.
    pub fn same_numerics(&self, other: &Self) -> bool {
        let bits = |a: f64, b: f64| a.to_bits() == b.to_bits();
        self.iteration == other.iteration
            && self.communication_rounds == other.communication_rounds
            && bits(self.objective, other.objective)
            && bits(self.gap, other.gap)
            && bits(self.log10_gap, other.log10_gap)
            && bits(self.grad_norm, other.grad_norm)
            && bits(self.step_size, other.step_size)
            && bits(self.iterate_norm, other.iterate_norm)
            && bits(self.distance_to_optimum, other.distance_to_optimum)
            && match (self.contraction, other.contraction) {
                (Some(a), Some(b)) => bits(a, b),
                (None, None) => true,
                _ => false,
            }
            && self.line_search_failed == other.line_search_failed
            && self.inner_iterations == other.inner_iterations
    }
}

/// `log10` of a gap, floored at the smallest normal double so exact zeros
/// and rounding-level negatives stay finite.
pub fn log10_gap(gap: f64) -> f64 {
    gap.max(f64::MIN_POSITIVE).log10()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub rounds: Vec<RoundRecord>,
    pub converged: bool,
    pub stop_reason: StopReason,
}

impl Trajectory {
    pub fn last(&self) -> &RoundRecord {
        self.rounds.last().expect("trajectory always holds the initial record")
    }

    /// Communication rounds at the first record with `log10_gap ≤ target`.
    pub fn rounds_to_log10_gap(&self, target: f64) -> Option<u64> {
        self.rounds
            .iter()
            .find(|r| r.log10_gap <= target)
            .map(|r| r.communication_rounds)
    }

    /// Iteration index at the first record with `log10_gap ≤ target`.
    pub fn iterations_to_log10_gap(&self, target: f64) -> Option<usize> {
        self.rounds.iter().find(|r| r.log10_gap <= target).map(|r| r.iteration)
    }

    pub fn contractions(&self) -> Vec<f64> {
        self.rounds.iter().filter_map(|r| r.contraction).collect()
    }

    pub fn same_numerics(&self, other: &Self) -> bool {
        self.converged == other.converged
            && self.stop_reason == other.stop_reason
            && self.rounds.len() == other.rounds.len()
            && self.rounds.iter().zip(&other.rounds).all(|(a, b)| a.same_numerics(b))
    }
}
