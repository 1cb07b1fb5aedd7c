//! The full training loop: frozen-snapshot rollouts, buffer offers and
//! decay, surrogate loss, Adam updates, per-iteration metrics, and
//! bit-exact checkpoint/resume.
//!
//! Determinism contract: every random draw comes from a stream keyed by
//! (seed, iteration, slot/condition/member), so a fixed seed reproduces a
//! run byte-for-byte and a checkpoint needs only the iteration counter —
//! no RNG state — to resume exactly.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::ReplayBuffer;
use crate::flow::{Condition, NoiseSchedule, VelocityField, VfConfig};
use crate::objective::{
    clip_fraction, on_policy_reference_loss, populate_correction_weights, surrogate_loss, ClipStats,
    LossMode, LossOutput, OriginFilter,
};
use crate::rewards::RewardSpec;
use crate::rollout::{build_group, GroupBatch};
use crate::{Error, Result};

const TAG_SLOT: u64 = 0x736c6f74; // per-slot condition choice
const TAG_SLOT_SEED: u64 = 0x67727073; // per-slot rollout seed family

pub const CHECKPOINT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    SequenceCorrected,
    NaiveSubstitution,
    Uncorrected,
    OnPolicyBaseline,
}

impl TrainMode {
    /// Loss-mode mapping for the off-policy-capable modes; the baseline
    /// bypasses the corrected objective entirely.
    fn loss_mode(self) -> Option<LossMode> {
        match self {
            TrainMode::SequenceCorrected => Some(LossMode::SequenceCorrected),
            TrainMode::NaiveSubstitution => Some(LossMode::NaiveSubstitution),
            TrainMode::Uncorrected => Some(LossMode::Uncorrected),
            TrainMode::OnPolicyBaseline => None,
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequence_corrected" => Ok(TrainMode::SequenceCorrected),
            "naive_substitution" => Ok(TrainMode::NaiveSubstitution),
            "uncorrected" => Ok(TrainMode::Uncorrected),
            "on_policy_baseline" => Ok(TrainMode::OnPolicyBaseline),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TrainMode::SequenceCorrected => "sequence_corrected",
            TrainMode::NaiveSubstitution => "naive_substitution",
            TrainMode::Uncorrected => "uncorrected",
            TrainMode::OnPolicyBaseline => "on_policy_baseline",
        };
        f.write_str(s)
    }
}

fn default_reward() -> RewardSpec {
    RewardSpec::ModeProximity {
        centers: vec![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]],
        bandwidth: 0.8,
    }
}

/// Every knob of a training run. TOML-serializable; unspecified fields
/// take these defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub group_size: usize,
    pub groups_per_iteration: usize,
    /// Probability that a group slot draws its condition from the buffer
    /// and includes the buffer trajectory (hybrid group).
    pub off_policy_fraction: f64,
    pub epsilon: f64,
    /// Truncation point: buffer prefixes keep steps T..t_off+1, the final
    /// t_off steps are regenerated. 0 disables truncation.
    pub t_off: usize,
    pub buffer_capacity: usize,
    pub buffer_decay: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub total_iterations: usize,
    pub inner_epochs: usize,
    pub checkpoint_interval: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub reward: RewardSpec,
    pub num_steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub num_hidden: usize,
    pub time_embed_dim: usize,
    pub cond_embed_dim: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            groups_per_iteration: 16,
            off_policy_fraction: 0.15,
            epsilon: 0.2,
            t_off: 2,
            buffer_capacity: 8,
            buffer_decay: 0.98,
            learning_rate: 1e-2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            total_iterations: 600,
            inner_epochs: 1,
            checkpoint_interval: 50,
            seed: 0,
            mode: TrainMode::SequenceCorrected,
            reward: default_reward(),
            num_steps: 10,
            sigma_min: 0.01,
            sigma_max: 1.0,
            latent_dim: 2,
            hidden_dim: 32,
            num_hidden: 2,
            time_embed_dim: 4,
            cond_embed_dim: 4,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.group_size < 2 {
            return err(format!("group_size {} < 2", self.group_size));
        }
        if self.groups_per_iteration == 0 {
            return err("groups_per_iteration must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.off_policy_fraction) {
            return err(format!("off_policy_fraction {} outside [0, 1]", self.off_policy_fraction));
        }
        if self.epsilon <= 0.0 || self.epsilon >= 1.0 {
            return err(format!("epsilon {} outside (0, 1)", self.epsilon));
        }
        if self.t_off > self.num_steps {
            return err(format!("t_off {} > num_steps {}", self.t_off, self.num_steps));
        }
        if self.buffer_capacity == 0 {
            return err("buffer_capacity must be positive".into());
        }
        if !(self.buffer_decay > 0.0 && self.buffer_decay <= 1.0) {
            return err(format!("buffer_decay {} outside (0, 1]", self.buffer_decay));
        }
        if self.learning_rate <= 0.0 {
            return err(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return err("adam betas must lie in [0, 1)".into());
        }
        if self.adam_eps <= 0.0 {
            return err("adam_eps must be positive".into());
        }
        if self.total_iterations == 0 || self.inner_epochs == 0 || self.checkpoint_interval == 0 {
            return err("total_iterations, inner_epochs, checkpoint_interval must be positive".into());
        }
        if self.num_steps == 0 {
            return err("num_steps must be positive".into());
        }
        if self.sigma_min <= 0.0 || self.sigma_max <= self.sigma_min {
            return err(format!(
                "invalid sigma range [{}, {}]",
                self.sigma_min, self.sigma_max
            ));
        }
        if self.latent_dim == 0 || self.hidden_dim == 0 || self.time_embed_dim == 0 || self.cond_embed_dim == 0 {
            return err("model dimensions must be positive".into());
        }
        self.reward.validate()?;
        if self.latent_dim != 2 {
            // reward functions are defined on the plane
            return err(format!("latent_dim {} unsupported (rewards are 2-D)", self.latent_dim));
        }
        Ok(())
    }

    pub fn vf_config(&self) -> VfConfig {
        VfConfig {
            latent_dim: self.latent_dim,
            hidden_dim: self.hidden_dim,
            num_hidden: self.num_hidden,
            time_embed_dim: self.time_embed_dim,
            cond_embed_dim: self.cond_embed_dim,
            num_steps: self.num_steps,
        }
    }

    /// The baseline never samples the buffer regardless of the fraction.
    pub fn effective_fraction(&self) -> f64 {
        if self.mode == TrainMode::OnPolicyBaseline {
            0.0
        } else {
            self.off_policy_fraction
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainerConfig =
            toml::from_str(s).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config serialize error: {e}")))
    }
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// Standard Adam update with bias correction.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::Config(format!(
            "adam shape mismatch: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged("non-finite gradient in adam_step".into()));
    }
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for i in 0..params.len() {
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grads[i];
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Metrics

/// One row of the per-iteration metrics log. Wall time is tracked in the
/// struct but deliberately excluded from the CSV row so fixed-seed reruns
/// stay byte-identical; it surfaces in the run summary instead.
#[derive(Debug, Clone, Serialize)]
pub struct IterationMetrics {
    pub iteration: u64,
    pub mean_reward: f64,
    pub max_reward: f64,
    pub loss: f64,
    pub degenerate_groups: usize,
    pub clip_frac_all: f64,
    pub clip_frac_on: f64,
    pub clip_frac_off: f64,
    pub corr_weight_count: usize,
    pub corr_log_weight_mean: f64,
    pub corr_log_weight_min: f64,
    pub corr_log_weight_max: f64,
    pub weight_clamp_events: usize,
    pub ratio_clamp_events: usize,
    pub buffer_len: usize,
    pub buffer_mean_retention: f64,
    /// Mean |log-prob| per step t = 1..=T over all members.
    pub logprob_abs_profile: Vec<f64>,
    pub wall_time_ms: f64,
}

impl IterationMetrics {
    pub fn csv_header(num_steps: usize) -> String {
        let mut cols: Vec<String> = [
            "iteration",
            "mean_reward",
            "max_reward",
            "loss",
            "degenerate_groups",
            "clip_frac_all",
            "clip_frac_on",
            "clip_frac_off",
            "corr_weight_count",
            "corr_log_weight_mean",
            "corr_log_weight_min",
            "corr_log_weight_max",
            "weight_clamp_events",
            "ratio_clamp_events",
            "buffer_len",
            "buffer_mean_retention",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for t in 1..=num_steps {
            cols.push(format!("logprob_abs_{t}"));
        }
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.iteration.to_string(),
            self.mean_reward.to_string(),
            self.max_reward.to_string(),
            self.loss.to_string(),
            self.degenerate_groups.to_string(),
            self.clip_frac_all.to_string(),
            self.clip_frac_on.to_string(),
            self.clip_frac_off.to_string(),
            self.corr_weight_count.to_string(),
            self.corr_log_weight_mean.to_string(),
            self.corr_log_weight_min.to_string(),
            self.corr_log_weight_max.to_string(),
            self.weight_clamp_events.to_string(),
            self.ratio_clamp_events.to_string(),
            self.buffer_len.to_string(),
            self.buffer_mean_retention.to_string(),
        ];
        for v in &self.logprob_abs_profile {
            cols.push(v.to_string());
        }
        cols.join(",")
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainerConfig,
    /// Completed iterations at save time.
    pub iteration: u64,
    pub vf: VelocityField,
    pub adam: AdamState,
    pub buffer: ReplayBuffer,
}

// ---------------------------------------------------------------------------
// Trainer

pub struct Trainer {
    pub config: TrainerConfig,
    pub vf: VelocityField,
    pub adam: AdamState,
    pub buffer: ReplayBuffer,
    /// Completed iterations (0-based count; metrics rows are 1-based).
    pub iteration: u64,
    pub schedule: NoiseSchedule,
    conditions: Vec<Condition>,
}

impl Trainer {
    pub fn new(config: TrainerConfig) -> Result<Self> {
        config.validate()?;
        let vf = VelocityField::new(config.vf_config(), config.seed);
        let schedule = NoiseSchedule::linear(config.num_steps, config.sigma_min, config.sigma_max)?;
        let buffer = ReplayBuffer::new(config.buffer_capacity, config.buffer_decay)?;
        let conditions = (0..config.reward.num_conditions())
            .map(|id| Condition::new(id, config.cond_embed_dim))
            .collect();
        let adam = AdamState::new(vf.param_count());
        Ok(Self { config, vf, adam, buffer, iteration: 0, schedule, conditions })
    }

    pub fn from_checkpoint_file(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        let ckpt: Checkpoint = serde_json::from_str(&raw)
            .map_err(|e| Error::Checkpoint(format!("corrupt checkpoint {}: {e}", path.display())))?;
        Self::from_checkpoint(ckpt)
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {} != {CHECKPOINT_VERSION}",
                ckpt.version
            )));
        }
        ckpt.config.validate()?;
        if ckpt.vf.cfg != ckpt.config.vf_config() {
            return Err(Error::Checkpoint(format!(
                "model config mismatch: checkpoint model has latent_dim {}, config expects {}",
                ckpt.vf.cfg.latent_dim,
                ckpt.config.latent_dim
            )));
        }
        if ckpt.adam.m.len() != ckpt.vf.param_count() {
            return Err(Error::Checkpoint("optimizer state size mismatch".into()));
        }
        let schedule =
            NoiseSchedule::linear(ckpt.config.num_steps, ckpt.config.sigma_min, ckpt.config.sigma_max)?;
        let conditions = (0..ckpt.config.reward.num_conditions())
            .map(|id| Condition::new(id, ckpt.config.cond_embed_dim))
            .collect();
        Ok(Self {
            vf: ckpt.vf,
            adam: ckpt.adam,
            buffer: ckpt.buffer,
            iteration: ckpt.iteration,
            schedule,
            conditions,
            config: ckpt.config,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            iteration: self.iteration,
            vf: self.vf.clone(),
            adam: self.adam.clone(),
            buffer: self.buffer.clone(),
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.checkpoint())
            .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
        fs::write(path, json)?;
        Ok(())
    }

    /// Build this iteration's groups against a frozen snapshot. Exposed so
    /// diagnostics can replay the exact rollout phase of an iteration.
    pub fn build_iteration_groups(&self, vf_old: &VelocityField, iter: u64) -> Result<Vec<GroupBatch>> {
        let cfg = &self.config;
        let fraction = cfg.effective_fraction();
        let n_task = self.conditions.len();
        let mut groups = Vec::with_capacity(cfg.groups_per_iteration);
        for slot in 0..cfg.groups_per_iteration {
            let mut rng = crate::rng::stream(cfg.seed, &[TAG_SLOT, iter, slot as u64]);
            let use_buffer = fraction > 0.0 && !self.buffer.is_empty() && rng.gen::<f64>() < fraction;
            let c = if use_buffer {
                self.buffer.sample_conditions(1, &mut rng)?.pop().expect("one condition")
            } else {
                self.conditions[rng.gen_range(0..n_task)].clone()
            };
            // per-slot sub-seed so two slots sharing a condition still get
            // independent rollouts
            let slot_seed = crate::rng::derive_seed(cfg.seed, &[TAG_SLOT_SEED, slot as u64]);
            groups.push(build_group(
                &c,
                vf_old,
                &self.buffer,
                &self.schedule,
                &cfg.reward,
                cfg.group_size,
                cfg.t_off,
                use_buffer,
                slot_seed,
                iter,
            )?);
        }
        Ok(groups)
    }

    fn group_loss(
        &self,
        group: &GroupBatch,
        vf_theta: &VelocityField,
        vf_old: &VelocityField,
        compute_grad: bool,
    ) -> Result<LossOutput> {
        match self.config.mode.loss_mode() {
            None => on_policy_reference_loss(
                group,
                vf_theta,
                vf_old,
                &self.schedule,
                self.config.epsilon,
                compute_grad,
            ),
            Some(mode) => surrogate_loss(
                group,
                vf_theta,
                vf_old,
                &self.schedule,
                self.config.epsilon,
                mode,
                compute_grad,
            ),
        }
    }

    fn divergence_dump(group: &GroupBatch, cause: &Error) -> Error {
        let rewards: Vec<f64> = group.members.iter().map(|m| m.reward).collect();
        Error::Diverged(format!(
            "non-finite loss on condition {}: {cause}; rewards {:?}, advantages {:?}, \
             correction_weights {:?}, contains_buffer_member {}",
            group.condition.id, rewards, group.advantages, group.correction_weights,
            group.contains_buffer_member
        ))
    }

    /// Run one full iteration: rollout under the frozen snapshot, buffer
    /// offer-then-decay, inner-epoch updates, metrics.
    pub fn run_iteration(&mut self) -> Result<IterationMetrics> {
        let start = std::time::Instant::now();
        let cfg = self.config.clone();
        let iter = self.iteration;
        let vf_old = self.vf.clone(); // frozen rollout snapshot

        // rollout phase (reads the pre-offer buffer)
        let mut groups = self.build_iteration_groups(&vf_old, iter)?;

        // buffer maintenance: offers compete against un-decayed incumbents.
        // Only freshly collected rollouts are candidates — re-offering a
        // replayed member would keep re-introducing an ever-older prefix
        // under a fresh retention score.
        for group in &groups {
            let fresh: Vec<_> = group
                .members
                .iter()
                .filter(|m| m.origin == crate::flow::Origin::OnPolicy)
                .cloned()
                .collect();
            self.buffer.offer(&fresh, iter)?;
        }
        self.buffer.decay();

        // correction weights are a function of (trajectories, vf_old) only
        let mut stats = ClipStats::default();
        if cfg.mode == TrainMode::SequenceCorrected {
            for group in groups.iter_mut() {
                populate_correction_weights(group, &vf_old, &self.schedule, &mut stats)?;
            }
        }

        let n_params = self.vf.param_count();
        let n_groups = groups.len() as f64;
        let mut first_epoch_loss = 0.0;
        for epoch in 0..cfg.inner_epochs {
            let mut grad = vec![0.0f64; n_params];
            let mut loss_sum = 0.0;
            for group in &groups {
                let out = self
                    .group_loss(group, &self.vf, &vf_old, true)
                    .map_err(|e| Self::divergence_dump(group, &e))?;
                loss_sum += out.loss;
                for (g, d) in grad.iter_mut().zip(&out.grad) {
                    *g += d / n_groups;
                }
                if epoch == 0 {
                    stats.merge(&out.stats);
                }
            }
            if epoch == 0 {
                first_epoch_loss = loss_sum / n_groups;
            }
            if !first_epoch_loss.is_finite() {
                return Err(Error::Diverged(format!("non-finite mean loss {first_epoch_loss}")));
            }
            let mut params = self.vf.param_vector();
            adam_step(
                &mut params,
                &grad,
                &mut self.adam,
                cfg.learning_rate,
                cfg.adam_beta1,
                cfg.adam_beta2,
                cfg.adam_eps,
            )?;
            self.vf.set_param_vector(&params)?;
        }

        self.iteration += 1;
        Ok(self.collect_metrics(&groups, &stats, first_epoch_loss, start.elapsed().as_secs_f64() * 1e3))
    }

    fn collect_metrics(
        &self,
        groups: &[GroupBatch],
        stats: &ClipStats,
        loss: f64,
        wall_time_ms: f64,
    ) -> IterationMetrics {
        let t_total = self.config.num_steps;
        let mut reward_sum = 0.0;
        let mut reward_max = f64::NEG_INFINITY;
        let mut n_members = 0usize;
        let mut profile = vec![0.0f64; t_total];
        for group in groups {
            for m in &group.members {
                reward_sum += m.reward;
                reward_max = reward_max.max(m.reward);
                n_members += 1;
                for t in 1..=t_total {
                    profile[t - 1] += m.step_logprobs[t - 1].abs();
                }
            }
        }
        for v in profile.iter_mut() {
            *v /= n_members as f64;
        }
        let (lw_mean, lw_min, lw_max) = if stats.corr_log_weights.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            let n = stats.corr_log_weights.len() as f64;
            let sum: f64 = stats.corr_log_weights.iter().sum();
            let min = stats.corr_log_weights.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = stats.corr_log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (sum / n, min, max)
        };
        IterationMetrics {
            iteration: self.iteration,
            mean_reward: reward_sum / n_members as f64,
            max_reward: reward_max,
            loss,
            degenerate_groups: groups.iter().filter(|g| g.degenerate).count(),
            clip_frac_all: clip_fraction(stats, OriginFilter::All).unwrap_or(f64::NAN),
            clip_frac_on: clip_fraction(stats, OriginFilter::OnPolicySteps).unwrap_or(f64::NAN),
            clip_frac_off: clip_fraction(stats, OriginFilter::OffPolicySteps).unwrap_or(f64::NAN),
            corr_weight_count: stats.corr_log_weights.len(),
            corr_log_weight_mean: lw_mean,
            corr_log_weight_min: lw_min,
            corr_log_weight_max: lw_max,
            weight_clamp_events: stats.weight_clamp_events,
            ratio_clamp_events: stats.ratio_clamp_events,
            buffer_len: self.buffer.len(),
            buffer_mean_retention: self.buffer.mean_retention(),
            logprob_abs_profile: profile,
            wall_time_ms,
        }
    }

    /// Run until `target` completed iterations, feeding each metrics row
    /// to the sink.
    pub fn run_to(
        &mut self,
        target: u64,
        mut sink: impl FnMut(&IterationMetrics) -> Result<()>,
    ) -> Result<()> {
        while self.iteration < target {
            let row = self.run_iteration()?;
            sink(&row)?;
        }
        Ok(())
    }
}

/// Convenience wrapper: fresh trainer, full run, collected metrics.
pub fn train(config: TrainerConfig) -> Result<(Trainer, Vec<IterationMetrics>)> {
    let mut trainer = Trainer::new(config)?;
    let total = trainer.config.total_iterations as u64;
    let mut rows = Vec::with_capacity(total as usize);
    trainer.run_to(total, |row| {
        rows.push(row.clone());
        Ok(())
    })?;
    Ok((trainer, rows))
}
