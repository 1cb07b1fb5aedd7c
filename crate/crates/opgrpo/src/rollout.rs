//! Hybrid group construction: G-1 fresh rollouts plus (optionally) one
//! buffer trajectory, truncated and regenerated at late steps, shuffled,
//! with group-normalized advantages.

use rand::Rng;

use crate::buffer::ReplayBuffer;
use crate::flow::{rollout_trajectory, Condition, NoiseSchedule, Origin, Trajectory, VelocityField};
use crate::rewards::{reward, RewardSpec};
use crate::{Error, Result};

/// Groups with reward spread below this floor are degenerate: advantages
/// are zeroed so micro-variance cannot explode them.
pub const STD_FLOOR: f64 = 1e-6;

const TAG_MEMBER: u64 = 0x6d656d62;
const TAG_SHUFFLE: u64 = 0x73687566;

#[derive(Debug, Clone)]
pub struct GroupBatch {
    pub condition: Condition,
    pub members: Vec<Trajectory>,
    pub advantages: Vec<f64>,
    /// Sequence-level correction weights, 1.0 for on-policy members.
    /// Populated by the objective before the loss is taken.
    pub correction_weights: Vec<f64>,
    pub contains_buffer_member: bool,
    pub degenerate: bool,
}

impl GroupBatch {
    pub fn group_size(&self) -> usize {
        self.members.len()
    }
}

/// Group-normalized advantages: (R_i - mean) / max(pop_std, floor).
/// A spread below the floor marks the group degenerate and zeroes all
/// advantages (the group contributes no gradient).
pub fn compute_advantages(rewards: &[f64]) -> Result<(Vec<f64>, bool)> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::Rollout(format!("group size {g} < 2")));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::Rollout("non-finite reward".into()));
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / g as f64;
    let std = var.sqrt();
    if std < STD_FLOOR {
        return Ok((vec![0.0; g], true));
    }
    Ok((rewards.iter().map(|r| (r - mean) / std).collect(), false))
}

/// Reuse a buffer trajectory's early (high-noise) steps and regenerate
/// the final `t_off` denoising steps with the current policy. The prefix
/// portion keeps its frozen p_off log-probs; the marker on the result
/// records which steps those are.
pub fn truncate_and_regenerate(
    prefix: &Trajectory,
    t_off: usize,
    vf_current: &VelocityField,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
    iteration: u64,
) -> Result<Trajectory> {
    if t_off > schedule.num_steps {
        return Err(Error::Rollout(format!(
            "t_off {t_off} out of range 0..={}",
            schedule.num_steps
        )));
    }
    let mut traj =
        rollout_trajectory(vf_current, &prefix.condition, schedule, rng, Some((prefix, t_off)), iteration)?;
    traj.origin = Origin::Buffer;
    traj.birth_iteration = prefix.birth_iteration;
    traj.reward = prefix.reward;
    Ok(traj)
}

/// Assemble one training group for condition `c` against the frozen
/// rollout snapshot. Member RNG streams are keyed by (iteration,
/// condition, member index) so rollout order cannot matter.
#[allow(clippy::too_many_arguments)]
pub fn build_group(
    c: &Condition,
    vf_old: &VelocityField,
    buffer: &ReplayBuffer,
    schedule: &NoiseSchedule,
    reward_spec: &RewardSpec,
    group_size: usize,
    t_off: usize,
    use_buffer: bool,
    master_seed: u64,
    iteration: u64,
) -> Result<GroupBatch> {
    if group_size < 2 {
        return Err(Error::Rollout(format!("group size {group_size} < 2")));
    }
    let fresh_count = if use_buffer { group_size - 1 } else { group_size };
    let mut members = Vec::with_capacity(group_size);
    for m in 0..fresh_count {
        let mut rng = crate::rng::stream(master_seed, &[TAG_MEMBER, iteration, c.id as u64, m as u64]);
        members.push(rollout_trajectory(vf_old, c, schedule, &mut rng, None, iteration)?);
    }
    if use_buffer {
        let prefix = buffer.retrieve(c)?;
        let m = group_size - 1;
        let mut rng = crate::rng::stream(master_seed, &[TAG_MEMBER, iteration, c.id as u64, m as u64]);
        members.push(truncate_and_regenerate(&prefix, t_off, vf_old, schedule, &mut rng, iteration)?);
    }
    for t in &mut members {
        t.reward = reward(t.sample(), c, reward_spec)?;
    }
    // Fisher-Yates with a keyed stream; advantages are computed after the
    // shuffle so (member, reward, advantage) stay paired by index.
    let mut rng = crate::rng::stream(master_seed, &[TAG_SHUFFLE, iteration, c.id as u64]);
    for i in (1..members.len()).rev() {
        let j = rng.gen_range(0..=i);
        members.swap(i, j);
    }
    let rewards: Vec<f64> = members.iter().map(|t| t.reward).collect();
    let (advantages, degenerate) = compute_advantages(&rewards)?;
    Ok(GroupBatch {
        condition: c.clone(),
        correction_weights: vec![1.0; members.len()],
        contains_buffer_member: use_buffer,
        members,
        advantages,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{VelocityField, VfConfig};

    fn setup() -> (VelocityField, NoiseSchedule, RewardSpec, ReplayBuffer) {
        let cfg = VfConfig { hidden_dim: 8, ..VfConfig::default() };
        let vf = VelocityField::new(cfg, 3);
        let sched = NoiseSchedule::linear(cfg.num_steps, 0.01, 1.0).unwrap();
        let spec = RewardSpec::ModeProximity {
            centers: vec![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]],
            bandwidth: 0.8,
        };
        let buf = ReplayBuffer::new(4, 0.98).unwrap();
        (vf, sched, spec, buf)
    }

    #[test]
    fn advantages_degenerate_group() {
        let (a, degen) = compute_advantages(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(degen);
        assert_eq!(a, vec![0.0; 4]);
    }

    #[test]
    fn advantages_two_point() {
        let (a, degen) = compute_advantages(&[0.0, 1.0]).unwrap();
        assert!(!degen);
        assert!((a[0] + 1.0).abs() < 1e-12 && (a[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn advantages_three_point_hand_case() {
        // population std of (0.2, 0.5, 0.8) = 0.2449...
        let (a, _) = compute_advantages(&[0.2, 0.5, 0.8]).unwrap();
        assert!((a[0] + 1.2247).abs() < 1e-4);
        assert!(a[1].abs() < 1e-12);
        assert!((a[2] - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn advantages_four_point_hand_case() {
        // mean 0.45, population std sqrt(0.0825) = 0.28723
        let (a, _) = compute_advantages(&[0.1, 0.4, 0.4, 0.9]).unwrap();
        let expect = [-1.2185, -0.1741, -0.1741, 1.5667];
        for (x, e) in a.iter().zip(expect) {
            assert!((x - e).abs() < 1e-4, "{a:?}");
        }
    }

    #[test]
    fn advantages_reject_small_group() {
        assert!(compute_advantages(&[0.5]).is_err());
    }

    #[test]
    fn advantage_normalization_property() {
        let mut rng = crate::rng::stream(1, &[1]);
        for _ in 0..200 {
            let g = rng.gen_range(2..10);
            let rewards: Vec<f64> = (0..g).map(|_| rng.gen::<f64>()).collect();
            let (a, degen) = compute_advantages(&rewards).unwrap();
            if degen {
                continue;
            }
            let sum: f64 = a.iter().sum();
            let sumsq: f64 = a.iter().map(|x| x * x).sum();
            assert!(sum.abs() < 1e-9);
            assert!((sumsq - g as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn on_policy_group_shape() {
        let (vf, sched, spec, buf) = setup();
        let c = Condition::new(0, 4);
        let g = build_group(&c, &vf, &buf, &sched, &spec, 4, 2, false, 7, 0).unwrap();
        assert_eq!(g.members.len(), 4);
        assert!(g.members.iter().all(|m| m.origin == Origin::OnPolicy));
        assert!(!g.contains_buffer_member);
        if !g.degenerate {
            let sum: f64 = g.advantages.iter().sum();
            assert!(sum.abs() < 1e-9);
        }
    }

    #[test]
    fn buffer_group_has_exactly_one_buffer_member() {
        let (vf, sched, spec, mut buf) = setup();
        let c = Condition::new(1, 4);
        let seed_group = build_group(&c, &vf, &buf, &sched, &spec, 4, 2, false, 7, 0).unwrap();
        buf.offer(&seed_group.members, 0).unwrap();
        let g = build_group(&c, &vf, &buf, &sched, &spec, 4, 2, true, 7, 1).unwrap();
        let buffer_members: Vec<&Trajectory> =
            g.members.iter().filter(|m| m.origin == Origin::Buffer).collect();
        assert_eq!(buffer_members.len(), 1);
        let mixed = buffer_members[0];
        assert_eq!(mixed.off_policy_above, 2);
        // prefix log-probs bit-equal the stored entry's
        let stored = buf.retrieve(&c).unwrap();
        for t in 3..=10 {
            assert_eq!(mixed.step_logprobs[t - 1].to_bits(), stored.step_logprobs[t - 1].to_bits());
        }
    }

    #[test]
    fn buffer_miss_is_error() {
        let (vf, sched, spec, buf) = setup();
        let c = Condition::new(3, 4);
        assert!(build_group(&c, &vf, &buf, &sched, &spec, 4, 2, true, 7, 0).is_err());
    }

    #[test]
    fn truncate_t_off_zero_reproduces_prefix() {
        let (vf, sched, _spec, _) = setup();
        let c = Condition::new(0, 4);
        let mut rng = crate::rng::stream(1, &[9]);
        let prefix = rollout_trajectory(&vf, &c, &sched, &mut rng, None, 0).unwrap();
        let mut rng2 = crate::rng::stream(2, &[10]);
        let out = truncate_and_regenerate(&prefix, 0, &vf, &sched, &mut rng2, 5).unwrap();
        assert_eq!(out.latents, prefix.latents);
        assert_eq!(out.step_logprobs, prefix.step_logprobs);
        assert_eq!(out.off_policy_above, 0);
    }

    #[test]
    fn truncate_t_off_full_is_fresh() {
        let (vf, sched, _spec, _) = setup();
        let c = Condition::new(0, 4);
        let mut rng = crate::rng::stream(1, &[11]);
        let prefix = rollout_trajectory(&vf, &c, &sched, &mut rng, None, 0).unwrap();
        let mut rng2 = crate::rng::stream(2, &[12]);
        let out = truncate_and_regenerate(&prefix, 10, &vf, &sched, &mut rng2, 5).unwrap();
        assert_eq!(out.off_policy_above, 10);
        assert!(out.latents[0] != prefix.latents[0]);
    }

    #[test]
    fn truncate_half_mixes() {
        let (vf, sched, _spec, _) = setup();
        let c = Condition::new(0, 4);
        let mut rng = crate::rng::stream(1, &[13]);
        let prefix = rollout_trajectory(&vf, &c, &sched, &mut rng, None, 0).unwrap();
        let mut rng2 = crate::rng::stream(2, &[14]);
        let out = truncate_and_regenerate(&prefix, 5, &vf, &sched, &mut rng2, 5).unwrap();
        for t in 6..=10 {
            assert_eq!(out.step_logprobs[t - 1].to_bits(), prefix.step_logprobs[t - 1].to_bits());
        }
        assert!((1..=5).any(|t| out.step_logprobs[t - 1] != prefix.step_logprobs[t - 1]));
        // mixed-trajectory total is prefix-portion plus fresh-portion
        let sum: f64 = out.step_logprobs.iter().sum();
        assert!((sum - out.total_logprob).abs() < 1e-9);
    }

    #[test]
    fn truncate_out_of_range() {
        let (vf, sched, _spec, _) = setup();
        let c = Condition::new(0, 4);
        let mut rng = crate::rng::stream(1, &[15]);
        let prefix = rollout_trajectory(&vf, &c, &sched, &mut rng, None, 0).unwrap();
        assert!(truncate_and_regenerate(&prefix, 11, &vf, &sched, &mut rng, 0).is_err());
    }

    #[test]
    fn shuffle_preserves_reward_advantage_pairing() {
        let (vf, sched, spec, buf) = setup();
        let c = Condition::new(2, 4);
        let g = build_group(&c, &vf, &buf, &sched, &spec, 8, 2, false, 21, 3).unwrap();
        if g.degenerate {
            return;
        }
        let rewards: Vec<f64> = g.members.iter().map(|m| m.reward).collect();
        let (expect, _) = compute_advantages(&rewards).unwrap();
        for (a, e) in g.advantages.iter().zip(&expect) {
            assert_eq!(a.to_bits(), e.to_bits());
        }
    }
}
