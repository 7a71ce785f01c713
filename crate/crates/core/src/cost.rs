//! Step-tracking costs over a finite horizon.
//!
//! All integrals use the trapezoid rule over the samples with `0 <= t <= T`;
//! the reference is the unit step.

use serde::{Deserialize, Serialize};

use crate::sim::Trajectory;

/// Cost assigned to candidates whose simulation diverges.
pub const DEFAULT_PENALTY: f64 = 1e9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CostError {
    #[error("trajectory has fewer than two samples in [0, T]")]
    EmptyTrajectory,
    #[error("trajectory ends at t = {actual} but the cost horizon is {expected}")]
    HorizonMismatch { expected: f64, actual: f64 },
    #[error("invalid cost weights: {0}")]
    InvalidWeights(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub lambda_itae: f64,
    pub lambda_iso: f64,
    /// Integration horizon `T` in seconds.
    pub horizon: f64,
}

impl CostWeights {
    /// Reduced form `J = ITAE + alpha * ISO`.
    pub fn new(alpha: f64, horizon: f64) -> Result<Self, CostError> {
        Self::weighted(1.0, alpha, horizon)
    }

    pub fn weighted(lambda_itae: f64, lambda_iso: f64, horizon: f64) -> Result<Self, CostError> {
        if !(lambda_itae >= 0.0 && lambda_iso >= 0.0 && lambda_itae.is_finite() && lambda_iso.is_finite()) {
            return Err(CostError::InvalidWeights("weights must be finite and nonnegative".into()));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(CostError::InvalidWeights(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self {
            lambda_itae,
            lambda_iso,
            horizon,
        })
    }

    /// Overshoot weight relative to ITAE.
    pub fn alpha(&self) -> f64 {
        if self.lambda_itae == 0.0 {
            f64::INFINITY
        } else {
            self.lambda_iso / self.lambda_itae
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub itae: f64,
    pub iso: f64,
    pub alpha: f64,
    pub j: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub dt: f64,
    /// Set when `j` is the divergence penalty rather than a computed cost.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub diverged: bool,
}

impl CostReport {
    /// Report for a diverged candidate; the penalty is booked as ITAE.
    pub fn penalty(weights: &CostWeights, dt: f64, penalty: f64) -> Self {
        Self {
            itae: penalty,
            iso: 0.0,
            alpha: weights.alpha(),
            j: penalty,
            horizon: weights.horizon,
            dt,
            diverged: true,
        }
    }
}

fn step_reference(t: f64) -> f64 {
    if t >= 0.0 {
        1.0
    } else {
        0.0
    }
}

fn trapezoid(traj: &Trajectory, horizon: f64, g: impl Fn(f64, f64) -> f64) -> Result<f64, CostError> {
    let tol = 1e-9 * horizon.max(1.0);
    let pts: Vec<(f64, f64)> = traj
        .times
        .iter()
        .zip(&traj.y)
        .filter(|(t, _)| **t >= -tol && **t <= horizon + tol)
        .map(|(&t, &y)| (t.max(0.0), g(t.max(0.0), y)))
        .collect();
    if pts.len() < 2 {
        return Err(CostError::EmptyTrajectory);
    }
    Ok(pts
        .windows(2)
        .map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1))
        .sum())
}

/// `int_0^T t |r(t) - y(t)| dt`.
pub fn itae(traj: &Trajectory, horizon: f64) -> Result<f64, CostError> {
    trapezoid(traj, horizon, |t, y| t * (step_reference(t) - y).abs())
}

/// `int_0^T max(0, y(t) - r(t))^2 dt`.
pub fn iso(traj: &Trajectory, horizon: f64) -> Result<f64, CostError> {
    trapezoid(traj, horizon, |t, y| (y - step_reference(t)).max(0.0).powi(2))
}

/// Weighted objective; the trajectory must reach the cost horizon.
pub fn combined(traj: &Trajectory, weights: &CostWeights) -> Result<CostReport, CostError> {
    let end = traj.end_time();
    if end < weights.horizon - 1e-9 * weights.horizon.max(1.0) {
        return Err(CostError::HorizonMismatch {
            expected: weights.horizon,
            actual: end,
        });
    }
    let itae = itae(traj, weights.horizon)?;
    let iso = iso(traj, weights.horizon)?;
    let j = if weights.lambda_itae == 1.0 {
        itae + weights.lambda_iso * iso
    } else {
        weights.lambda_itae * itae + weights.lambda_iso * iso
    };
    Ok(CostReport {
        itae,
        iso,
        alpha: weights.alpha(),
        j,
        horizon: weights.horizon,
        dt: traj.dt,
        diverged: false,
    })
}
