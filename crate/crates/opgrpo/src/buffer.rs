//! High-quality replay buffer: reward-based replacement, per-condition
//! uniqueness, and stepwise retention decay.
//!
//! Stored step log-probs are frozen at insertion — they define p_off for
//! the sequence-level correction and are never recomputed. Retention
//! scores decay each iteration so stale entries lose eviction contests to
//! fresh candidates; the trajectory's own reward is left untouched.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::flow::{Condition, Origin, Trajectory};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub trajectory: Trajectory,
    pub retention_score: f64,
    pub insert_iteration: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    pub capacity: usize,
    pub decay_rate: f64,
    entries: BTreeMap<usize, BufferEntry>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, decay_rate: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Buffer("capacity must be positive".into()));
        }
        if !(0.0 < decay_rate && decay_rate <= 1.0) {
            return Err(Error::Buffer(format!("decay rate {decay_rate} outside (0, 1]")));
        }
        Ok(Self { capacity, decay_rate, entries: BTreeMap::new() })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&usize, &BufferEntry)> {
        self.entries.iter()
    }

    pub fn mean_retention(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.values().map(|e| e.retention_score).sum::<f64>() / self.entries.len() as f64
    }

    pub fn min_retention(&self) -> Option<f64> {
        self.entries
            .values()
            .map(|e| e.retention_score)
            .fold(None, |acc, r| Some(acc.map_or(r, |a: f64| a.min(r))))
    }

    /// Offer a rollout group sharing one condition. The group's best
    /// trajectory (highest reward, lowest index on ties) becomes the
    /// candidate; it enters the buffer iff it wins the replacement rules.
    pub fn offer(&mut self, group: &[Trajectory], iteration: u64) -> Result<bool> {
        let first = group
            .first()
            .ok_or_else(|| Error::Buffer("empty group offered".into()))?;
        let cond_id = first.condition.id;
        if group.iter().any(|t| t.condition.id != cond_id) {
            return Err(Error::Buffer("mixed conditions in offered group".into()));
        }
        if group.iter().any(|t| !t.reward.is_finite()) {
            return Err(Error::Buffer("non-finite reward in offered group".into()));
        }
        let mut best = 0;
        for (i, t) in group.iter().enumerate() {
            if t.reward > group[best].reward {
                best = i;
            }
        }
        let candidate = &group[best];

        let accept = if let Some(existing) = self.entries.get(&cond_id) {
            candidate.reward > existing.retention_score
        } else if self.entries.len() < self.capacity {
            true
        } else {
            let (&min_id, min_entry) = self
                .entries
                .iter()
                .min_by(|a, b| a.1.retention_score.total_cmp(&b.1.retention_score))
                .expect("non-empty at capacity");
            if candidate.reward > min_entry.retention_score {
                self.entries.remove(&min_id);
                true
            } else {
                false
            }
        };
        if accept {
            self.entries.insert(
                cond_id,
                BufferEntry {
                    trajectory: candidate.clone(),
                    retention_score: candidate.reward,
                    insert_iteration: iteration,
                },
            );
        }
        Ok(accept)
    }

    /// One stepwise decay sweep: every retention score is multiplied by
    /// the decay rate. Stored rewards are unchanged.
    pub fn decay(&mut self) {
        for e in self.entries.values_mut() {
            e.retention_score *= self.decay_rate;
        }
    }

    /// Uniformly sample `count` distinct stored conditions.
    pub fn sample_conditions(&self, count: usize, rng: &mut impl Rng) -> Result<Vec<Condition>> {
        if count > self.entries.len() {
            return Err(Error::Buffer(format!(
                "requested {count} conditions from a buffer of {}",
                self.entries.len()
            )));
        }
        let mut pool: Vec<&BufferEntry> = self.entries.values().collect();
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let idx = rng.gen_range(0..pool.len());
            out.push(pool.swap_remove(idx).trajectory.condition.clone());
        }
        Ok(out)
    }

    /// Non-destructive retrieval: returns the stored trajectory tagged as
    /// buffer-origin, frozen p_off log-probs intact.
    pub fn retrieve(&self, c: &Condition) -> Result<Trajectory> {
        let entry = self
            .entries
            .get(&c.id)
            .ok_or_else(|| Error::Buffer(format!("condition {} not in buffer", c.id)))?;
        let mut traj = entry.trajectory.clone();
        traj.origin = Origin::Buffer;
        Ok(traj)
    }

    pub fn contains(&self, condition_id: usize) -> bool {
        self.entries.contains_key(&condition_id)
    }
}
