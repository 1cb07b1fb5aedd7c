//! Clipped GRPO surrogate with sequence-level off-policy correction.
//!
//! The per-step ratio always measures p_theta against p_old — including
//! the buffer-prefix steps of a mixed member — so clipping keeps bounding
//! the update relative to the rollout snapshot. The off-policy shift is
//! compensated by a sequence-level weight prod(p_old/p_off) over the
//! prefix steps, applied as a detached constant: no gradient flows
//! through it, both of its factors being frozen.
//!
//! Two diagnostic modes exist alongside the corrected objective: naive
//! substitution folds the shift into the per-step ratio (p_old cancels,
//! clipping then measures against a stale policy), and uncorrected drops
//! the weight entirely.

use serde::{Deserialize, Serialize};

use crate::flow::{transition_logprob, transition_logprob_tape, NoiseSchedule, Trajectory, VelocityField};
use crate::rollout::GroupBatch;
use crate::tensor::Tape;
use crate::{Error, Result};

/// Correction weights are clamped to e^{+-5}; unbounded products of
/// per-step ratios can overflow even after truncation.
pub const WEIGHT_LOG_CLAMP: f64 = 5.0;

/// Per-step log-ratios are clamped to +-50 before exponentiation so a
/// single ill-conditioned step stays finite; events are counted.
pub const RATIO_LOG_CLAMP: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    SequenceCorrected,
    NaiveSubstitution,
    Uncorrected,
}

#[derive(Debug, Clone, Copy)]
pub struct StepRatioRecord {
    pub step: usize,
    pub ratio: f64,
    pub clipped: bool,
    pub off_policy: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct CorrectionWeight {
    pub value: f64,
    pub log_value: f64,
    pub clamped: bool,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ClipStats {
    pub total_steps: usize,
    pub clipped_total: usize,
    pub on_steps: usize,
    pub on_clipped: usize,
    pub off_steps: usize,
    pub off_clipped: usize,
    pub ratio_clamp_events: usize,
    pub weight_clamp_events: usize,
    /// log correction weight of each buffer member seen.
    pub corr_log_weights: Vec<f64>,
}

impl ClipStats {
    pub fn merge(&mut self, other: &ClipStats) {
        self.total_steps += other.total_steps;
        self.clipped_total += other.clipped_total;
        self.on_steps += other.on_steps;
        self.on_clipped += other.on_clipped;
        self.off_steps += other.off_steps;
        self.off_clipped += other.off_clipped;
        self.ratio_clamp_events += other.ratio_clamp_events;
        self.weight_clamp_events += other.weight_clamp_events;
        self.corr_log_weights.extend_from_slice(&other.corr_log_weights);
    }

    fn record(&mut self, clipped: bool, off_policy: bool) {
        self.total_steps += 1;
        if off_policy {
            self.off_steps += 1;
        } else {
            self.on_steps += 1;
        }
        if clipped {
            self.clipped_total += 1;
            if off_policy {
                self.off_clipped += 1;
            } else {
                self.on_clipped += 1;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OriginFilter {
    All,
    OnPolicySteps,
    OffPolicySteps,
}

/// Fraction of (member, step) pairs whose clipped branch bound the loss.
pub fn clip_fraction(stats: &ClipStats, filter: OriginFilter) -> Result<f64> {
    let (clipped, total) = match filter {
        OriginFilter::All => (stats.clipped_total, stats.total_steps),
        OriginFilter::OnPolicySteps => (stats.on_clipped, stats.on_steps),
        OriginFilter::OffPolicySteps => (stats.off_clipped, stats.off_steps),
    };
    if total == 0 {
        return Err(Error::Objective("empty selection for clip fraction".into()));
    }
    Ok(clipped as f64 / total as f64)
}

/// Whether the clipped branch binds given the ratio and advantage sign.
fn clips(ratio: f64, advantage: f64, epsilon: f64) -> bool {
    (advantage > 0.0 && ratio > 1.0 + epsilon) || (advantage < 0.0 && ratio < 1.0 - epsilon)
}

/// Per-step importance ratios of a member under `vf_theta` vs `vf_old`
/// (or vs the frozen p_off record on off-policy steps when `naive`).
pub fn step_ratios(
    member: &Trajectory,
    vf_theta: &VelocityField,
    vf_old: &VelocityField,
    schedule: &NoiseSchedule,
    epsilon: f64,
    advantage: f64,
    naive: bool,
) -> Result<Vec<StepRatioRecord>> {
    let mut out = Vec::with_capacity(member.num_steps());
    for t in 1..=member.num_steps() {
        let score_theta = transition_logprob(
            &member.latents[t - 1],
            &member.latents[t],
            t,
            vf_theta,
            &member.condition,
            schedule,
        )?;
        let off = member.is_step_off_policy(t);
        let denom = if naive && off {
            member.step_logprobs[t - 1]
        } else {
            transition_logprob(
                &member.latents[t - 1],
                &member.latents[t],
                t,
                vf_old,
                &member.condition,
                schedule,
            )?
        };
        let log_r = (score_theta - denom).clamp(-RATIO_LOG_CLAMP, RATIO_LOG_CLAMP);
        let ratio = log_r.exp();
        if !ratio.is_finite() || ratio <= 0.0 {
            return Err(Error::Objective(format!("non-finite ratio at step {t}")));
        }
        out.push(StepRatioRecord { step: t, ratio, clipped: clips(ratio, advantage, epsilon), off_policy: off });
    }
    Ok(out)
}

/// Sequence-level correction weight prod_{off steps} p_old/p_off,
/// computed in log space and clamped. Exactly 1.0 for fully on-policy
/// members. Both factors are frozen, so the weight is a constant.
pub fn correction_weight(
    member: &Trajectory,
    vf_old: &VelocityField,
    schedule: &NoiseSchedule,
) -> Result<CorrectionWeight> {
    let t_total = member.num_steps();
    if member.off_policy_above >= t_total {
        return Ok(CorrectionWeight { value: 1.0, log_value: 0.0, clamped: false });
    }
    let mut log_w = 0.0;
    for t in (member.off_policy_above + 1)..=t_total {
        let score_old = transition_logprob(
            &member.latents[t - 1],
            &member.latents[t],
            t,
            vf_old,
            &member.condition,
            schedule,
        )?;
        // step_logprobs on off-policy steps are the frozen p_off record
        log_w += score_old - member.step_logprobs[t - 1];
    }
    if !log_w.is_finite() {
        return Err(Error::Objective("non-finite correction log-weight".into()));
    }
    let clamped = log_w.abs() > WEIGHT_LOG_CLAMP;
    let log_value = log_w.clamp(-WEIGHT_LOG_CLAMP, WEIGHT_LOG_CLAMP);
    Ok(CorrectionWeight { value: log_value.exp(), log_value, clamped })
}

/// Fill the group's correction-weight slots (1.0 for on-policy members).
pub fn populate_correction_weights(
    group: &mut GroupBatch,
    vf_old: &VelocityField,
    schedule: &NoiseSchedule,
    stats: &mut ClipStats,
) -> Result<()> {
    for (i, member) in group.members.iter().enumerate() {
        let w = correction_weight(member, vf_old, schedule)?;
        group.correction_weights[i] = w.value;
        if member.off_policy_above < member.num_steps() {
            stats.corr_log_weights.push(w.log_value);
            if w.clamped {
                stats.weight_clamp_events += 1;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    /// d(loss)/d(theta) in `param_vector` order; empty when gradients
    /// were not requested.
    pub grad: Vec<f64>,
    pub stats: ClipStats,
}

/// Negative clipped surrogate over one group (descent on this loss is
/// ascent on the objective). Degenerate groups contribute exactly zero.
pub fn surrogate_loss(
    group: &GroupBatch,
    vf_theta: &VelocityField,
    vf_old: &VelocityField,
    schedule: &NoiseSchedule,
    epsilon: f64,
    mode: LossMode,
    compute_grad: bool,
) -> Result<LossOutput> {
    if group.members.is_empty() {
        return Err(Error::Objective("empty group".into()));
    }
    if group.degenerate {
        return Ok(LossOutput {
            loss: 0.0,
            grad: if compute_grad { vec![0.0; vf_theta.param_count()] } else { Vec::new() },
            stats: ClipStats::default(),
        });
    }
    let g = group.members.len() as f64;
    let t_total = schedule.num_steps as f64;
    let mut stats = ClipStats::default();
    let mut tape = Tape::new();
    let bound = vf_theta.bind(&mut tape, compute_grad)?;
    let mut total = None;
    for (i, member) in group.members.iter().enumerate() {
        let advantage = group.advantages[i];
        let mut step_sum = None;
        for t in 1..=member.num_steps() {
            let score_theta = transition_logprob_tape(
                &mut tape,
                &bound,
                &member.latents[t - 1],
                &member.latents[t],
                t,
                vf_theta,
                &member.condition,
                schedule,
            )?;
            let off = member.is_step_off_policy(t);
            let denom = if mode == LossMode::NaiveSubstitution && off {
                member.step_logprobs[t - 1]
            } else {
                transition_logprob(
                    &member.latents[t - 1],
                    &member.latents[t],
                    t,
                    vf_old,
                    &member.condition,
                    schedule,
                )?
            };
            let log_r = tape.add_scalar(score_theta, -denom)?;
            if tape.value(log_r).abs() > RATIO_LOG_CLAMP {
                stats.ratio_clamp_events += 1;
            }
            let log_r = tape.clamp(log_r, -RATIO_LOG_CLAMP, RATIO_LOG_CLAMP)?;
            let ratio = tape.exp(log_r)?;
            let r_val = tape.value(ratio);
            stats.record(clips(r_val, advantage, epsilon), off);
            let unclipped = tape.mul_scalar(ratio, advantage)?;
            let clipped_ratio = tape.clamp(ratio, 1.0 - epsilon, 1.0 + epsilon)?;
            let clipped = tape.mul_scalar(clipped_ratio, advantage)?;
            let term = tape.min(unclipped, clipped)?;
            step_sum = Some(match step_sum {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let member_mean = tape.mul_scalar(step_sum.expect("at least one step"), 1.0 / t_total)?;
        let weight = match mode {
            LossMode::SequenceCorrected => group.correction_weights[i],
            LossMode::NaiveSubstitution | LossMode::Uncorrected => 1.0,
        };
        // detached constant multiplier: no gradient flows through it
        let contrib = tape.mul_scalar(member_mean, weight)?;
        total = Some(match total {
            None => contrib,
            Some(acc) => tape.add(acc, contrib)?,
        });
    }
    let loss = tape.mul_scalar(total.expect("non-empty group"), -1.0 / g)?;
    let loss_val = tape.value(loss);
    let grad = if compute_grad {
        tape.backward(loss)?;
        vf_theta.grad_vector(&tape, &bound)
    } else {
        Vec::new()
    };
    Ok(LossOutput { loss: loss_val, grad, stats })
}

/// Reference on-policy GRPO loss: plain clipped surrogate with every
/// denominator taken from the rollout snapshot, no correction machinery.
pub fn on_policy_reference_loss(
    group: &GroupBatch,
    vf_theta: &VelocityField,
    vf_old: &VelocityField,
    schedule: &NoiseSchedule,
    epsilon: f64,
    compute_grad: bool,
) -> Result<LossOutput> {
    if group.members.is_empty() {
        return Err(Error::Objective("empty group".into()));
    }
    if group.degenerate {
        return Ok(LossOutput {
            loss: 0.0,
            grad: if compute_grad { vec![0.0; vf_theta.param_count()] } else { Vec::new() },
            stats: ClipStats::default(),
        });
    }
    let g = group.members.len() as f64;
    let t_total = schedule.num_steps as f64;
    let mut stats = ClipStats::default();
    let mut tape = Tape::new();
    let bound = vf_theta.bind(&mut tape, compute_grad)?;
    let mut total = None;
    for (i, member) in group.members.iter().enumerate() {
        let advantage = group.advantages[i];
        let mut step_sum = None;
        for t in 1..=member.num_steps() {
            let score_theta = transition_logprob_tape(
                &mut tape,
                &bound,
                &member.latents[t - 1],
                &member.latents[t],
                t,
                vf_theta,
                &member.condition,
                schedule,
            )?;
            let score_old = transition_logprob(
                &member.latents[t - 1],
                &member.latents[t],
                t,
                vf_old,
                &member.condition,
                schedule,
            )?;
            let log_r = tape.add_scalar(score_theta, -score_old)?;
            if tape.value(log_r).abs() > RATIO_LOG_CLAMP {
                stats.ratio_clamp_events += 1;
            }
            let log_r = tape.clamp(log_r, -RATIO_LOG_CLAMP, RATIO_LOG_CLAMP)?;
            let ratio = tape.exp(log_r)?;
            stats.record(clips(tape.value(ratio), advantage, epsilon), false);
            let unclipped = tape.mul_scalar(ratio, advantage)?;
            let clipped_ratio = tape.clamp(ratio, 1.0 - epsilon, 1.0 + epsilon)?;
            let clipped = tape.mul_scalar(clipped_ratio, advantage)?;
            let term = tape.min(unclipped, clipped)?;
            step_sum = Some(match step_sum {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let member_mean = tape.mul_scalar(step_sum.expect("at least one step"), 1.0 / t_total)?;
        let contrib = tape.mul_scalar(member_mean, 1.0)?;
        total = Some(match total {
            None => contrib,
            Some(acc) => tape.add(acc, contrib)?,
        });
    }
    let loss = tape.mul_scalar(total.expect("non-empty group"), -1.0 / g)?;
    let loss_val = tape.value(loss);
    let grad = if compute_grad {
        tape.backward(loss)?;
        vf_theta.grad_vector(&tape, &bound)
    } else {
        Vec::new()
    };
    Ok(LossOutput { loss: loss_val, grad, stats })
}
