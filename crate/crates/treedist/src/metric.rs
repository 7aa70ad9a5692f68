//! Stagewise scenario metrics.
//!
//! Distances between scenarios decompose stage by stage: each stage `t` has
//! a ground metric `d_t` on outcome space and a positive weight `w_t`, and
//! the order `p` couples them into `d^p(a, b) = sum_t w_t * d_t(a_t, b_t)^p`.

use thiserror::Error;

use crate::tree::ScenarioPath;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("order p must be finite and at least 1, got {p}")]
    InvalidOrder { p: f64 },
    #[error("metric needs at least one stage weight")]
    NoWeights,
    #[error("stage {stage} weight {weight} must be positive and finite")]
    BadWeight { stage: usize, weight: f64 },
    #[error("{got} ground metrics supplied for {stages} stages")]
    GroundCount { stages: usize, got: usize },
    #[error("stage {stage} out of range 1..={stages}")]
    StageRange { stage: usize, stages: usize },
    #[error("outcomes have dimensions {a} and {b}")]
    DimensionMismatch { a: usize, b: usize },
    #[error("scenario has {got} stages, metric covers {expected}")]
    PathLength { expected: usize, got: usize },
}

/// Per-stage ground metric on outcome vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ground {
    /// Euclidean norm of the difference.
    Euclidean,
    /// Sum of absolute coordinate differences.
    Abs,
}

impl Ground {
    pub fn as_str(self) -> &'static str {
        match self {
            Ground::Euclidean => "euclidean",
            Ground::Abs => "abs",
        }
    }
}

/// Order, stage weights, and per-stage ground metrics for trees of a fixed
/// depth. The number of weights is the number of stages covered.
#[derive(Debug, Clone, PartialEq)]
pub struct StagewiseMetric {
    p: f64,
    weights: Vec<f64>,
    grounds: Vec<Ground>,
}

impl StagewiseMetric {
    /// One ground metric for every stage.
    pub fn new(p: f64, weights: Vec<f64>, ground: Ground) -> Result<Self, MetricError> {
        let grounds = vec![ground; weights.len()];
        Self::with_grounds(p, weights, grounds)
    }

    pub fn with_grounds(
        p: f64,
        weights: Vec<f64>,
        grounds: Vec<Ground>,
    ) -> Result<Self, MetricError> {
        if !p.is_finite() || p < 1.0 {
            return Err(MetricError::InvalidOrder { p });
        }
        if weights.is_empty() {
            return Err(MetricError::NoWeights);
        }
        for (i, &w) in weights.iter().enumerate() {
            if !w.is_finite() || w <= 0.0 {
                return Err(MetricError::BadWeight { stage: i + 1, weight: w });
            }
        }
        if grounds.len() != weights.len() {
            return Err(MetricError::GroundCount {
                stages: weights.len(),
                got: grounds.len(),
            });
        }
        Ok(StagewiseMetric { p, weights, grounds })
    }

    /// Order 2, unit weights, Euclidean ground on every stage.
    pub fn default_for(stages: usize) -> Result<Self, MetricError> {
        Self::new(2.0, vec![1.0; stages.max(1)], Ground::Euclidean)
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn stages(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, t: usize) -> f64 {
        self.weights[t - 1]
    }

    pub fn ground(&self, t: usize) -> Ground {
        self.grounds[t - 1]
    }

    /// `d_t(x, y)^p` for stage `t` (1-based).
    pub fn ground_distance_p(&self, t: usize, x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
        if t == 0 || t > self.weights.len() {
            return Err(MetricError::StageRange {
                stage: t,
                stages: self.weights.len(),
            });
        }
        if x.len() != y.len() {
            return Err(MetricError::DimensionMismatch { a: x.len(), b: y.len() });
        }
        Ok(match self.grounds[t - 1] {
            Ground::Euclidean => {
                let sumsq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                if self.p == 2.0 {
                    sumsq
                } else if self.p == 1.0 {
                    sumsq.sqrt()
                } else {
                    sumsq.powf(self.p / 2.0)
                }
            }
            Ground::Abs => {
                let s: f64 = x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum();
                if self.p == 1.0 {
                    s
                } else if self.p == 2.0 {
                    s * s
                } else {
                    s.powf(self.p)
                }
            }
        })
    }

    /// `sum_t w_t * d_t(a_t, b_t)^p` over full outcome sequences.
    pub fn path_distance_p(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, MetricError> {
        if a.len() != self.weights.len() {
            return Err(MetricError::PathLength {
                expected: self.weights.len(),
                got: a.len(),
            });
        }
        if b.len() != self.weights.len() {
            return Err(MetricError::PathLength {
                expected: self.weights.len(),
                got: b.len(),
            });
        }
        let mut total = 0.0;
        for t in 1..=self.weights.len() {
            total += self.weights[t - 1] * self.ground_distance_p(t, &a[t - 1], &b[t - 1])?;
        }
        Ok(total)
    }

    /// Weighted `p`-th power distance between two scenarios.
    pub fn scenario_distance_p(
        &self,
        a: &ScenarioPath,
        b: &ScenarioPath,
    ) -> Result<f64, MetricError> {
        self.path_distance_p(&a.outcomes, &b.outcomes)
    }

    /// `p`-th root of a `p`-power value, clamping small negative noise.
    pub fn root_of(&self, value_p: f64) -> f64 {
        let v = value_p.max(0.0);
        if self.p == 1.0 {
            v
        } else if self.p == 2.0 {
            v.sqrt()
        } else {
            v.powf(1.0 / self.p)
        }
    }
}
