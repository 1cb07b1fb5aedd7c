//! Independent verification oracles.
//!
//! Everything here is deliberately naive and shares no code with the
//! modules it checks (beyond raw arithmetic): a straight-line Gaussian
//! log-pdf, a brute-force replay of the buffer rules, a central
//! finite-difference gradient, and a Monte-Carlo importance-sampling
//! unbiasedness check.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Straight-line log N(x; mean, std^2) used to cross-check the sampler's
/// transition log-probs.
pub fn reference_gaussian_logpdf(x: f64, mean: f64, std: f64) -> Result<f64> {
    if std <= 0.0 {
        return Err(Error::Flow(format!("non-positive std {std}")));
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let z = (x - mean) / std;
    Ok(-0.5 * z * z - std.ln() - 0.5 * two_pi.ln())
}

// ---------------------------------------------------------------------------
// Brute-force buffer reference

/// Offer a whole rollout group (rewards listed in member order) or apply
/// one decay sweep.
#[derive(Debug, Clone)]
pub enum BufferEvent {
    Offer { condition_id: usize, rewards: Vec<f64> },
    Decay,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceEntry {
    pub condition_id: usize,
    pub reward: f64,
    pub retention: f64,
}

/// O(n^2) replay of the buffer rules: best-of-group candidate, same-
/// condition comparison against the (decayed) retention score, otherwise
/// insert below capacity or replace the global minimum-retention entry.
pub fn reference_buffer_replay(
    events: &[BufferEvent],
    capacity: usize,
    gamma: f64,
) -> Vec<ReferenceEntry> {
    let mut entries: Vec<ReferenceEntry> = Vec::new();
    for ev in events {
        match ev {
            BufferEvent::Decay => {
                for e in &mut entries {
                    e.retention *= gamma;
                }
            }
            BufferEvent::Offer { condition_id, rewards } => {
                if rewards.is_empty() {
                    continue;
                }
                // argmax with lowest-index tie-break
                let mut best = 0;
                for (i, r) in rewards.iter().enumerate() {
                    if *r > rewards[best] {
                        best = i;
                    }
                }
                let cand = rewards[best];
                if let Some(pos) = entries.iter().position(|e| e.condition_id == *condition_id) {
                    if cand > entries[pos].retention {
                        entries[pos] =
                            ReferenceEntry { condition_id: *condition_id, reward: cand, retention: cand };
                    }
                } else if entries.len() < capacity {
                    entries.push(ReferenceEntry {
                        condition_id: *condition_id,
                        reward: cand,
                        retention: cand,
                    });
                } else {
                    let mut min_pos = 0;
                    for (i, e) in entries.iter().enumerate() {
                        if e.retention < entries[min_pos].retention {
                            min_pos = i;
                        }
                    }
                    if cand > entries[min_pos].retention {
                        entries[min_pos] = ReferenceEntry {
                            condition_id: *condition_id,
                            reward: cand,
                            retention: cand,
                        };
                    }
                }
            }
        }
    }
    entries.sort_by_key(|e| e.condition_id);
    entries
}

// ---------------------------------------------------------------------------
// Finite differences

/// Central finite-difference gradient of a scalar function.
pub fn finite_difference_grad<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let up = f(&xp);
        xp[i] = orig - h;
        let down = f(&xp);
        xp[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Largest relative error between an analytic gradient and its central
/// finite-difference estimate, with an absolute floor for near-zero
/// entries.
pub fn max_relative_grad_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Importance-sampling unbiasedness

#[derive(Debug, Clone)]
pub struct UnbiasednessReport {
    pub mean_direct: f64,
    pub mean_weighted: f64,
    pub se_direct: f64,
    pub se_weighted: f64,
    pub pass: bool,
}

/// One-step, D=1 Monte-Carlo check: E_{p_old}[g] vs E_{p_off}[w g] with
/// w = p_old/p_off, p_old = N(0,1), p_off = N(0.5,1), g = 1{x > 0}.
/// Passes when the two estimates agree within 3 combined standard errors.
pub fn is_unbiasedness_check(num_samples: usize, seed: u64) -> UnbiasednessReport {
    let mu_off = 0.5;
    let mut rng = crate::rng::stream(seed, &[0x756e62]);
    let mut direct = Welford::default();
    let mut weighted = Welford::default();
    for _ in 0..num_samples {
        let x_old: f64 = rng.sample(StandardNormal);
        direct.push(if x_old > 0.0 { 1.0 } else { 0.0 });

        let x_off: f64 = mu_off + rng.sample::<f64, _>(StandardNormal);
        let log_w = reference_gaussian_logpdf(x_off, 0.0, 1.0).unwrap()
            - reference_gaussian_logpdf(x_off, mu_off, 1.0).unwrap();
        let g = if x_off > 0.0 { 1.0 } else { 0.0 };
        weighted.push(log_w.exp() * g);
    }
    let (mean_direct, se_direct) = direct.mean_se();
    let (mean_weighted, se_weighted) = weighted.mean_se();
    let combined = (se_direct * se_direct + se_weighted * se_weighted).sqrt();
    UnbiasednessReport {
        mean_direct,
        mean_weighted,
        se_direct,
        se_weighted,
        pass: (mean_direct - mean_weighted).abs() < 3.0 * combined,
    }
}

/// Pointwise importance weight w(x) = p_old(x)/p_off(x) for 1-D Gaussians,
/// used to validate the objective's correction weights independently.
pub fn reference_importance_weight(x: f64, mean_old: f64, mean_off: f64, std: f64) -> f64 {
    let lw = reference_gaussian_logpdf(x, mean_old, std).unwrap()
        - reference_gaussian_logpdf(x, mean_off, std).unwrap();
    lw.exp()
}

#[derive(Default)]
struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn mean_se(&self) -> (f64, f64) {
        let var = if self.n > 1 { self.m2 / (self.n - 1) as f64 } else { 0.0 };
        (self.mean, (var / self.n as f64).sqrt())
    }
}
