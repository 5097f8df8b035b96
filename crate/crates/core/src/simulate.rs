//! Monte Carlo audits of Bernoulli streams: anytime coverage, decision
//! frequencies and time-to-epsilon.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::digest::Digest;
use crate::statistics::{self, ConfidenceInterval, EvidenceCounter, PropertyState, StatsError};

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("p_true must be in [0, 1], got {0}")]
    BadRate(f64),
    #[error("{0} must be at least 1")]
    Zero(&'static str),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationConfig {
    pub p_true: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub runs: u64,
    pub max_t: u64,
    /// Root of every run's random stream.
    pub seed: Digest,
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), SimulationError> {
        if !(0.0..=1.0).contains(&self.p_true) {
            return Err(SimulationError::BadRate(self.p_true));
        }
        statistics::CoverageParams::new(self.epsilon, self.delta)?;
        if self.runs == 0 {
            return Err(SimulationError::Zero("runs"));
        }
        if self.max_t == 0 {
            return Err(SimulationError::Zero("max_t"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RunOutcome {
    /// First terminal state reached, or PENDING if none by `max_t`.
    pub decision: PropertyState,
    pub decided_at: Option<u64>,
    /// First t with `U_t <= epsilon`, when the run decided CLEAN.
    pub t2epsilon: Option<u64>,
    /// First t at which `p_true` fell outside `[L_t, U_t]`.
    pub first_miss: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub run: u64,
    pub t: u64,
    pub violations: u64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationSummary {
    pub config: SimulationConfig,
    pub clean: u64,
    pub dirty: u64,
    pub pending: u64,
    pub coverage_failures: u64,
    pub coverage_failure_rate: f64,
    pub t2epsilon_q10: Option<f64>,
    pub t2epsilon_median: Option<f64>,
    pub t2epsilon_q90: Option<f64>,
    pub outcomes: Vec<RunOutcome>,
}

impl SimulationSummary {
    pub fn fraction(&self, state: PropertyState) -> f64 {
        let n = match state {
            PropertyState::Clean => self.clean,
            PropertyState::Dirty => self.dirty,
            PropertyState::Pending => self.pending,
        };
        n as f64 / self.config.runs as f64
    }
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

fn run_rng(seed: &Digest, run: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::from_seed(*seed.as_bytes());
    rng.set_stream(run);
    rng
}

type Memo = HashMap<(u64, u64), ConfidenceInterval>;

fn interval(memo: &mut Memo, t: u64, s: u64, delta: f64) -> ConfidenceInterval {
    *memo.entry((t, s)).or_insert_with(|| {
        EvidenceCounter::from_counts(t, s)
            .and_then(|c| c.interval(delta))
            .expect("validated parameters")
    })
}

/// One audit of a Bernoulli(p_true) stream, observed at every t up to max_t.
fn run_once(config: &SimulationConfig, run: u64, memo: &mut Memo, mut trace: Option<&mut Vec<TrajectoryPoint>>) -> RunOutcome {
    let mut rng = run_rng(&config.seed, run);
    let mut out = RunOutcome { decision: PropertyState::Pending, decided_at: None, t2epsilon: None, first_miss: None };
    let mut s = 0u64;
    for t in 1..=config.max_t {
        if rng.gen_bool(config.p_true) {
            s += 1;
        }
        let ci = interval(memo, t, s, config.delta);
        if out.first_miss.is_none() && !ci.contains(config.p_true) {
            out.first_miss = Some(t);
        }
        if out.decided_at.is_none() {
            let state = statistics::property_state(&ci, config.epsilon);
            if state.is_terminal() {
                out.decision = state;
                out.decided_at = Some(t);
                if state == PropertyState::Clean {
                    out.t2epsilon = Some(t);
                }
            }
        }
        if let Some(trace) = trace.as_deref_mut() {
            trace.push(TrajectoryPoint { run, t, violations: s, lower: ci.lower, upper: ci.upper });
        }
    }
    out
}

/// Run `config.runs` independent audits. Each run draws from its own
/// ChaCha20 stream of `config.seed`, so results do not depend on thread
/// scheduling. Trajectories of the first `trace_runs` runs are returned.
pub fn simulate(
    config: &SimulationConfig,
    trace_runs: u64,
) -> Result<(SimulationSummary, Vec<TrajectoryPoint>), SimulationError> {
    config.validate()?;
    let results: Vec<(RunOutcome, Vec<TrajectoryPoint>)> = (0..config.runs)
        .into_par_iter()
        .map_init(Memo::new, |memo, run| {
            let mut trace = Vec::new();
            let outcome = run_once(config, run, memo, (run < trace_runs).then_some(&mut trace));
            (outcome, trace)
        })
        .collect();
    let mut outcomes = Vec::with_capacity(results.len());
    let mut traces = Vec::new();
    for (o, t) in results {
        outcomes.push(o);
        traces.extend(t);
    }
    let count = |s| outcomes.iter().filter(|o| o.decision == s).count() as u64;
    let coverage_failures = outcomes.iter().filter(|o| o.first_miss.is_some()).count() as u64;
    let mut t2: Vec<f64> = outcomes.iter().filter_map(|o| o.t2epsilon).map(|t| t as f64).collect();
    t2.sort_by(f64::total_cmp);
    let summary = SimulationSummary {
        config: config.clone(),
        clean: count(PropertyState::Clean),
        dirty: count(PropertyState::Dirty),
        pending: count(PropertyState::Pending),
        coverage_failures,
        coverage_failure_rate: coverage_failures as f64 / config.runs as f64,
        t2epsilon_q10: quantile(&t2, 0.1),
        t2epsilon_median: quantile(&t2, 0.5),
        t2epsilon_q90: quantile(&t2, 0.9),
        outcomes,
    };
    Ok((summary, traces))
}
