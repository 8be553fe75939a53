//! Device-side signal construction and the server-side model update.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::Vector;

/// Norms below this are treated as a zero gradient.
pub const ZERO_NORM: f64 = 1e-12;

/// Strategy names as they appear in configs and on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Normalized,
    RawConservative,
    Standardized,
    Ideal,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::Normalized,
        StrategyKind::RawConservative,
        StrategyKind::Standardized,
        StrategyKind::Ideal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Normalized => "normalized",
            StrategyKind::RawConservative => "raw_conservative",
            StrategyKind::Standardized => "standardized",
            StrategyKind::Ideal => "ideal",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim())
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown strategy '{s}' (expected normalized | raw_conservative | standardized | ideal)"
                ))
            })
    }
}

/// How each device turns its local gradient into a transmit signal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AggregationStrategy {
    /// `g / ||g||`
    NormalizedGradient,
    /// `g / G` with `G` the assumed global bound on local gradient norms.
    RawGradientConservative { grad_bound: f64 },
    /// `(g - mean(g)) / std(g)` elementwise, population std.
    Standardized,
    /// Exact weighted average of local gradients, no channel.
    IdealNoiseless,
}

impl AggregationStrategy {
    pub fn from_kind(kind: StrategyKind, grad_bound: f64) -> Result<Self> {
        Ok(match kind {
            StrategyKind::Normalized => AggregationStrategy::NormalizedGradient,
            StrategyKind::RawConservative => {
                if !(grad_bound > 0.0) || !grad_bound.is_finite() {
                    return invalid(format!("raw_conservative requires G > 0, got {grad_bound}"));
                }
                AggregationStrategy::RawGradientConservative { grad_bound }
            }
            StrategyKind::Standardized => AggregationStrategy::Standardized,
            StrategyKind::Ideal => AggregationStrategy::IdealNoiseless,
        })
    }

    pub fn kind(&self) -> StrategyKind {
        match self {
            AggregationStrategy::NormalizedGradient => StrategyKind::Normalized,
            AggregationStrategy::RawGradientConservative { .. } => StrategyKind::RawConservative,
            AggregationStrategy::Standardized => StrategyKind::Standardized,
            AggregationStrategy::IdealNoiseless => StrategyKind::Ideal,
        }
    }

    /// Factor applied to the planned device gains so every strategy spends
    /// the same per-round transmit energy as a unit-norm signal. Standardized
    /// signals have squared norm N.
    pub fn gain_scale(&self, dim: usize) -> f64 {
        match self {
            AggregationStrategy::Standardized => 1.0 / (dim as f64).sqrt(),
            _ => 1.0,
        }
    }
}

/// Encodes a local gradient into the signal a device transmits.
pub fn encode(strategy: &AggregationStrategy, g: &Vector) -> Result<Vector> {
    if !g.is_finite() {
        return invalid("encode: non-finite gradient");
    }
    Ok(match *strategy {
        AggregationStrategy::NormalizedGradient => {
            let n = g.norm();
            if n < ZERO_NORM {
                Vector::zeros(g.len())
            } else {
                g.scaled(1.0 / n)
            }
        }
        AggregationStrategy::RawGradientConservative { grad_bound } => g.scaled(1.0 / grad_bound),
        AggregationStrategy::Standardized => {
            let sd = g.population_std();
            if sd < ZERO_NORM {
                Vector::zeros(g.len())
            } else {
                let m = g.mean();
                Vector::from_raw(g.iter().map(|x| (x - m) / sd).collect())
            }
        }
        AggregationStrategy::IdealNoiseless => g.clone(),
    })
}

/// Shared model parameters and the index of the round about to run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub w: Vector,
    pub round: usize,
}

impl ModelState {
    pub fn new(w: Vector) -> Self {
        ModelState { w, round: 1 }
    }
}

/// `w <- w - eta * y`, where `y` already carries the server gain.
pub fn server_update(state: &ModelState, y: &Vector, eta: f64) -> Result<ModelState> {
    if !(eta > 0.0) || !eta.is_finite() {
        return invalid(format!("server_update: eta must be positive, got {eta}"));
    }
    y.check_len(state.w.len(), "server_update")?;
    let mut w = state.w.clone();
    w.axpy(-eta, y);
    Ok(ModelState {
        w,
        round: state.round + 1,
    })
}
