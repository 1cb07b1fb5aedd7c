//! Analytic toy rewards over 2D samples, bounded in [0, 1].
//!
//! Conditions index into the mode list, so per-condition buffer
//! uniqueness is exercised by construction. Tight bandwidths make the
//! task "hard" (near-zero rewards, frequent degenerate groups).

use serde::{Deserialize, Serialize};

use crate::flow::Condition;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardSpec {
    /// exp(-||z - center(c)||^2 / bandwidth^2), center chosen by condition id.
    ModeProximity { centers: Vec<[f64; 2]>, bandwidth: f64 },
    /// max over centers of the proximity kernel (condition-independent).
    MultiModeCoverage { centers: Vec<[f64; 2]>, bandwidth: f64 },
    /// exp(-(||z|| - radius)^2 / bandwidth^2).
    RingDistance { radius: f64, bandwidth: f64 },
}

impl RewardSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Reward(msg.into()));
        match self {
            RewardSpec::ModeProximity { centers, bandwidth }
            | RewardSpec::MultiModeCoverage { centers, bandwidth } => {
                if centers.is_empty() {
                    return bad("empty mode list");
                }
                if *bandwidth <= 0.0 {
                    return bad("non-positive bandwidth");
                }
            }
            RewardSpec::RingDistance { radius, bandwidth } => {
                if *radius <= 0.0 || *bandwidth <= 0.0 {
                    return bad("non-positive radius or bandwidth");
                }
            }
        }
        Ok(())
    }

    /// Number of distinct conditions this task distinguishes.
    pub fn num_conditions(&self) -> usize {
        match self {
            RewardSpec::ModeProximity { centers, .. } => centers.len(),
            // coverage and ring rewards ignore the condition, but keeping a
            // handful of condition ids exercises the buffer's uniqueness rule
            RewardSpec::MultiModeCoverage { centers, .. } => centers.len(),
            RewardSpec::RingDistance { .. } => 4,
        }
    }
}

fn proximity(z: &[f64], center: &[f64; 2], bandwidth: f64) -> f64 {
    let dx = z[0] - center[0];
    let dy = z[1] - center[1];
    (-(dx * dx + dy * dy) / (bandwidth * bandwidth)).exp()
}

/// Deterministic reward in [0, 1] for a generated sample.
pub fn reward(sample: &[f64], c: &Condition, spec: &RewardSpec) -> Result<f64> {
    if sample.len() != 2 {
        return Err(Error::Reward(format!("expected 2D sample, got {}D", sample.len())));
    }
    let r = match spec {
        RewardSpec::ModeProximity { centers, bandwidth } => {
            let center = &centers[c.id % centers.len()];
            proximity(sample, center, *bandwidth)
        }
        RewardSpec::MultiModeCoverage { centers, bandwidth } => centers
            .iter()
            .map(|ctr| proximity(sample, ctr, *bandwidth))
            .fold(0.0, f64::max),
        RewardSpec::RingDistance { radius, bandwidth } => {
            let norm = (sample[0] * sample[0] + sample[1] * sample[1]).sqrt();
            let d = norm - radius;
            (-(d * d) / (bandwidth * bandwidth)).exp()
        }
    };
    debug_assert!((0.0..=1.0).contains(&r));
    Ok(r)
}
