//! Time-uniform confidence sequences for a Bernoulli violation rate.
//!
//! The interval at sample count `t` inverts the binary KL divergence against
//! the anytime penalty `ln(2 log2(2t) / delta)`, which buys simultaneous
//! coverage over every `t >= 1`. All functions here are pure.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance on the interval endpoints.
pub const ROOT_TOLERANCE: f64 = 1e-12;
/// Bisection iteration cap.
pub const MAX_BISECTION_STEPS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("{name} = {value} is outside [0, 1]")]
    NotAProbability { name: &'static str, value: f64 },
    #[error("delta = {0} must lie strictly between 0 and 1")]
    BadDelta(f64),
    #[error("epsilon = {0} must lie strictly between 0 and 1")]
    BadEpsilon(f64),
    #[error("sample count must be at least 1")]
    ZeroSamples,
    #[error("violations ({violations}) exceed sample count ({t})")]
    CountMismatch { t: u64, violations: u64 },
    #[error("no property states to aggregate")]
    NoProperties,
}

/// Decision for one property, or for a whole audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PropertyState {
    Clean,
    Dirty,
    Pending,
}

impl PropertyState {
    pub fn is_terminal(self) -> bool {
        !matches!(self, PropertyState::Pending)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PropertyState::Clean => "CLEAN",
            PropertyState::Dirty => "DIRTY",
            PropertyState::Pending => "PENDING",
        }
    }
}

impl fmt::Display for PropertyState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Running tally of distinct items checked and violations seen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceCounter {
    t: u64,
    violations: u64,
}

impl EvidenceCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_counts(t: u64, violations: u64) -> Result<Self, StatsError> {
        if violations > t {
            return Err(StatsError::CountMismatch { t, violations });
        }
        Ok(EvidenceCounter { t, violations })
    }

    /// Account for one more item; `violated` is its oracle bit.
    pub fn record(&mut self, violated: bool) {
        self.t += 1;
        self.violations += u64::from(violated);
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn violations(&self) -> u64 {
        self.violations
    }

    /// `S_t / t`, or `None` before any evidence.
    pub fn p_hat(&self) -> Option<f64> {
        (self.t > 0).then(|| self.violations as f64 / self.t as f64)
    }

    /// Interval at the current count; `[0, 1]` when no item has been seen.
    pub fn interval(&self, delta: f64) -> Result<ConfidenceInterval, StatsError> {
        if self.t == 0 {
            check_delta(delta)?;
            return Ok(ConfidenceInterval::VACUOUS);
        }
        confidence_interval(self, delta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
}

impl ConfidenceInterval {
    pub const VACUOUS: ConfidenceInterval = ConfidenceInterval { lower: 0.0, upper: 1.0 };

    pub fn new(lower: f64, upper: f64) -> Result<Self, StatsError> {
        check_probability("lower", lower)?;
        check_probability("upper", upper)?;
        if lower > upper {
            return Err(StatsError::NotAProbability { name: "lower (above upper)", value: lower });
        }
        Ok(ConfidenceInterval { lower, upper })
    }

    pub fn contains(&self, p: f64) -> bool {
        self.lower <= p && p <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Tolerance and error probability for one certified property.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageParams {
    epsilon: f64,
    delta: f64,
}

impl CoverageParams {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self, StatsError> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(StatsError::BadEpsilon(epsilon));
        }
        check_delta(delta)?;
        Ok(CoverageParams { epsilon, delta })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

fn check_probability(name: &'static str, value: f64) -> Result<(), StatsError> {
    if value.is_finite() && (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(StatsError::NotAProbability { name, value })
    }
}

fn check_delta(delta: f64) -> Result<(), StatsError> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(StatsError::BadDelta(delta))
    }
}

/// Binary KL divergence `d(a || b)` in nats.
///
/// Uses `0 ln(0/x) = 0`; infinite when `b` sits on a boundary that `a` does not.
pub fn kl_divergence(a: f64, b: f64) -> Result<f64, StatsError> {
    check_probability("a", a)?;
    check_probability("b", b)?;
    Ok(kl_unchecked(a, b))
}

#[inline]
fn kl_unchecked(a: f64, b: f64) -> f64 {
    let head = if a == 0.0 {
        0.0
    } else if b == 0.0 {
        return f64::INFINITY;
    } else {
        a * (a / b).ln()
    };
    let tail = if a == 1.0 {
        0.0
    } else if b == 1.0 {
        return f64::INFINITY;
    } else {
        (1.0 - a) * ((1.0 - a) / (1.0 - b)).ln()
    };
    // Rounding can push the sum a hair below zero when a ~ b.
    (head + tail).max(0.0)
}

/// `ln(2 * log2(2t) / delta)`.
pub fn anytime_penalty(t: u64, delta: f64) -> Result<f64, StatsError> {
    if t == 0 {
        return Err(StatsError::ZeroSamples);
    }
    check_delta(delta)?;
    Ok(penalty_unchecked(t, delta))
}

#[inline]
fn penalty_unchecked(t: u64, delta: f64) -> f64 {
    (2.0 * (2.0 * t as f64).log2() / delta).ln()
}

/// The confidence interval `[L_t, U_t]` for the counter's violation rate.
///
/// `U_t` is the smallest `u >= p_hat` with `t d(p_hat || u) >= psi_t(delta)`,
/// `L_t` the largest `l <= p_hat` with the same property. Each side is found by
/// bisection; the returned endpoint is always on the satisfying side of the
/// root, so the interval is never narrower than the exact one by more than
/// [`ROOT_TOLERANCE`]. Empty sets resolve to `U_t = 1` and `L_t = 0`.
pub fn confidence_interval(
    counter: &EvidenceCounter,
    delta: f64,
) -> Result<ConfidenceInterval, StatsError> {
    let t = counter.t();
    if t == 0 {
        return Err(StatsError::ZeroSamples);
    }
    check_delta(delta)?;
    let p_hat = counter.violations() as f64 / t as f64;
    let threshold = penalty_unchecked(t, delta);
    let n = t as f64;
    let reached = |x: f64| n * kl_unchecked(p_hat, x) >= threshold;

    let upper = if p_hat >= 1.0 {
        1.0
    } else {
        let (mut miss, mut hit) = (p_hat, 1.0);
        for _ in 0..MAX_BISECTION_STEPS {
            if hit - miss <= ROOT_TOLERANCE {
                break;
            }
            let mid = 0.5 * (miss + hit);
            if reached(mid) {
                hit = mid;
            } else {
                miss = mid;
            }
        }
        hit
    };

    let lower = if p_hat <= 0.0 {
        0.0
    } else {
        let (mut hit, mut miss) = (0.0, p_hat);
        for _ in 0..MAX_BISECTION_STEPS {
            if miss - hit <= ROOT_TOLERANCE {
                break;
            }
            let mid = 0.5 * (hit + miss);
            if reached(mid) {
                hit = mid;
            } else {
                miss = mid;
            }
        }
        hit
    };

    Ok(ConfidenceInterval { lower, upper })
}

/// Reading rule for one property. Ties (`lower = upper = epsilon`) go to DIRTY.
pub fn property_state(interval: &ConfidenceInterval, epsilon: f64) -> PropertyState {
    if interval.lower >= epsilon {
        PropertyState::Dirty
    } else if interval.upper <= epsilon {
        PropertyState::Clean
    } else {
        PropertyState::Pending
    }
}

/// Stopping rule across properties: any DIRTY wins, then all-CLEAN, else PENDING.
pub fn audit_state(states: &[PropertyState]) -> Result<PropertyState, StatsError> {
    if states.is_empty() {
        return Err(StatsError::NoProperties);
    }
    if states.contains(&PropertyState::Dirty) {
        Ok(PropertyState::Dirty)
    } else if states.iter().all(|s| *s == PropertyState::Clean) {
        Ok(PropertyState::Clean)
    } else {
        Ok(PropertyState::Pending)
    }
}

/// Certified lower bound on the clean fraction, `1 - U_t`.
pub fn cleanliness_lower_bound(interval: &ConfidenceInterval) -> f64 {
    1.0 - interval.upper
}
