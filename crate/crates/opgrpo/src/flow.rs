//! Velocity-field MLP, noise schedule, and SDE/ODE samplers.
//!
//! The deterministic sampler is an explicit Euler step in sigma. The
//! stochastic sampler draws Gaussian transitions
//! `z' ~ N(z + v_theta * d_sigma, sigma_step^2 I)` with
//! `sigma_step^2 = sigma_lo^2 * (sigma_hi - sigma_lo)`, and returns the
//! exact transition log-density. Because sigma_step^2 shrinks toward
//! zero at late denoising steps, per-step log-probs blow up there — that
//! ill-conditioning is deliberate and must stay observable.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tensor::{Tape, TensorId};
use crate::{Error, Result};

/// Log-prob values are clamped to this magnitude before they are ever
/// exponentiated downstream; clamping increments [`logprob_clamp_count`]
/// so explosions stay observable without being fatal.
pub const LOGPROB_CLAMP: f64 = 1e6;

static LOGPROB_CLAMP_EVENTS: AtomicU64 = AtomicU64::new(0);

pub fn logprob_clamp_count() -> u64 {
    LOGPROB_CLAMP_EVENTS.load(Ordering::Relaxed)
}

pub fn reset_logprob_clamp_count() {
    LOGPROB_CLAMP_EVENTS.store(0, Ordering::Relaxed);
}

fn clamp_logprob(lp: f64) -> f64 {
    if lp.abs() > LOGPROB_CLAMP {
        LOGPROB_CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed);
        lp.clamp(-LOGPROB_CLAMP, LOGPROB_CLAMP)
    } else {
        lp
    }
}

const LN_2PI: f64 = 1.8378770664093453; // ln(2*pi)

// ---------------------------------------------------------------------------
// Conditions

/// A conditioning input. The embedding is a fixed sinusoidal code derived
/// from the id, so the id uniquely determines it within (and across) runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub id: usize,
    pub embedding: Vec<f64>,
}

impl Condition {
    pub fn new(id: usize, embed_dim: usize) -> Self {
        // golden-angle multi-frequency code; distinct and well-spread per id
        let phi = 0.6180339887498949;
        let base = 2.0 * std::f64::consts::PI * ((id as f64 * phi).fract());
        let embedding = (0..embed_dim)
            .map(|k| {
                let freq = (k / 2 + 1) as f64;
                if k % 2 == 0 {
                    (base * freq).cos()
                } else {
                    (base * freq).sin()
                }
            })
            .collect();
        Self { id, embedding }
    }
}

// ---------------------------------------------------------------------------
// Noise schedule

/// Per-step noise levels sigma(t), t = 0..=T, strictly decreasing along
/// the denoising direction T -> 0 (so `sigmas[t]` increases with index).
/// Every one of the T transitions is stochastic: sigma(0) = sigma_min > 0,
/// which keeps a finite log-prob on the final step while preserving the
/// late-step variance collapse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub num_steps: usize,
    pub sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(num_steps: usize, sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if num_steps == 0 || sigma_min <= 0.0 || sigma_max <= sigma_min {
            return Err(Error::Flow(format!(
                "invalid schedule: T={num_steps}, sigma_min={sigma_min}, sigma_max={sigma_max}"
            )));
        }
        let t = num_steps as f64;
        let sigmas = (0..=num_steps)
            .map(|i| sigma_min + (sigma_max - sigma_min) * i as f64 / t)
            .collect();
        Ok(Self { num_steps, sigmas })
    }

    /// Per-step sigma decrement (positive): sigma(t) - sigma(t-1).
    pub fn delta_sigma(&self, t: usize) -> f64 {
        self.sigmas[t] - self.sigmas[t - 1]
    }

    /// Transition variance at step t: sigma_lo^2 * (sigma_hi - sigma_lo),
    /// where sigma_hi is the preceding (noisier) level.
    pub fn step_variance(&self, t: usize) -> f64 {
        let lo = self.sigmas[t - 1];
        lo * lo * self.delta_sigma(t)
    }

    pub fn step_std(&self, t: usize) -> f64 {
        self.step_variance(t).sqrt()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps {
            return Err(Error::Flow(format!("step index {t} out of range 1..={}", self.num_steps)));
        }
        if self.step_variance(t) <= 0.0 {
            return Err(Error::Flow(format!("non-positive variance at step {t}")));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Velocity field

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VfConfig {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub num_hidden: usize,
    pub time_embed_dim: usize,
    pub cond_embed_dim: usize,
    pub num_steps: usize,
}

impl Default for VfConfig {
    fn default() -> Self {
        Self {
            latent_dim: 2,
            hidden_dim: 32,
            num_hidden: 2,
            time_embed_dim: 4,
            cond_embed_dim: 4,
            num_steps: 10,
        }
    }
}

/// MLP velocity field v_theta(z, t, c).
///
/// Input is `z ++ time_embed[t] ++ c.embedding`; hidden layers use tanh;
/// the output head is linear with latent_dim units. Time embeddings are
/// learned per-step parameters; the condition code is fixed (see
/// [`Condition`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityField {
    pub cfg: VfConfig,
    pub params: Vec<Param>,
    time_base: usize,
    layers_base: usize,
}

impl VelocityField {
    pub fn new(cfg: VfConfig, seed: u64) -> Self {
        let mut params = Vec::new();
        let mut rng = crate::rng::stream(seed, &[0x696e6974]);
        let mut normal = |n: usize, scale: f64| -> Vec<f64> {
            (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()
        };
        let time_base = params.len();
        for t in 1..=cfg.num_steps {
            params.push(Param {
                name: format!("time_embed_{t}"),
                shape: vec![1, cfg.time_embed_dim],
                data: normal(cfg.time_embed_dim, 0.1),
            });
        }
        let layers_base = params.len();
        let input_dim = cfg.latent_dim + cfg.time_embed_dim + cfg.cond_embed_dim;
        let mut fan_in = input_dim;
        for l in 0..cfg.num_hidden {
            let scale = (1.0 / fan_in as f64).sqrt();
            params.push(Param {
                name: format!("layer{l}_w"),
                shape: vec![fan_in, cfg.hidden_dim],
                data: normal(fan_in * cfg.hidden_dim, scale),
            });
            params.push(Param {
                name: format!("layer{l}_b"),
                shape: vec![1, cfg.hidden_dim],
                data: vec![0.0; cfg.hidden_dim],
            });
            fan_in = cfg.hidden_dim;
        }
        // small output head so the initial field is near zero
        params.push(Param {
            name: "out_w".into(),
            shape: vec![fan_in, cfg.latent_dim],
            data: normal(fan_in * cfg.latent_dim, 0.01 * (1.0 / fan_in as f64).sqrt()),
        });
        params.push(Param {
            name: "out_b".into(),
            shape: vec![1, cfg.latent_dim],
            data: vec![0.0; cfg.latent_dim],
        });
        Self { cfg, params, time_base, layers_base }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn param_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for p in &self.params {
            v.extend_from_slice(&p.data);
        }
        v
    }

    pub fn set_param_vector(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.param_count() {
            return Err(Error::Flow(format!(
                "parameter vector length {} != {}",
                v.len(),
                self.param_count()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Flow("non-finite parameter value".into()));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.data.len();
            p.data.copy_from_slice(&v[off..off + n]);
            off += n;
        }
        Ok(())
    }

    fn check_inputs(&self, z: &[f64], t: usize, c: &Condition) -> Result<()> {
        if z.len() != self.cfg.latent_dim {
            return Err(Error::Flow(format!(
                "latent dim {} != {}",
                z.len(),
                self.cfg.latent_dim
            )));
        }
        if t == 0 || t > self.cfg.num_steps {
            return Err(Error::Flow(format!("time index {t} out of range")));
        }
        if c.embedding.len() != self.cfg.cond_embed_dim {
            return Err(Error::Flow(format!(
                "condition embedding dim {} != {}",
                c.embedding.len(),
                self.cfg.cond_embed_dim
            )));
        }
        Ok(())
    }

    /// Plain (non-differentiable) forward pass.
    pub fn forward(&self, z: &[f64], t: usize, c: &Condition) -> Result<Vec<f64>> {
        self.check_inputs(z, t, c)?;
        let mut x: Vec<f64> = Vec::new();
        x.extend_from_slice(z);
        x.extend_from_slice(&self.params[self.time_base + t - 1].data);
        x.extend_from_slice(&c.embedding);
        for l in 0..self.cfg.num_hidden {
            let w = &self.params[self.layers_base + 2 * l];
            let b = &self.params[self.layers_base + 2 * l + 1];
            x = affine(&x, w, b).into_iter().map(f64::tanh).collect();
        }
        let w = &self.params[self.layers_base + 2 * self.cfg.num_hidden];
        let b = &self.params[self.layers_base + 2 * self.cfg.num_hidden + 1];
        let out = affine(&x, w, b);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Flow("non-finite velocity output".into()));
        }
        Ok(out)
    }

    /// Register all parameters as tape leaves; returns one id per param.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Result<Vec<TensorId>> {
        self.params
            .iter()
            .map(|p| Ok(tape.leaf(p.shape.clone(), p.data.clone(), requires_grad)?))
            .collect()
    }

    /// Differentiable forward pass against parameters bound by [`bind`].
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        bound: &[TensorId],
        z: &[f64],
        t: usize,
        c: &Condition,
    ) -> Result<TensorId> {
        self.check_inputs(z, t, c)?;
        let zl = tape.leaf(vec![1, z.len()], z.to_vec(), false)?;
        let cl = tape.leaf(vec![1, c.embedding.len()], c.embedding.clone(), false)?;
        let te = bound[self.time_base + t - 1];
        let mut x = tape.concat(&[zl, te, cl])?;
        for l in 0..self.cfg.num_hidden {
            let w = bound[self.layers_base + 2 * l];
            let b = bound[self.layers_base + 2 * l + 1];
            let h = tape.matmul(x, w)?;
            let h = tape.add(h, b)?;
            x = tape.tanh(h)?;
        }
        let w = bound[self.layers_base + 2 * self.cfg.num_hidden];
        let b = bound[self.layers_base + 2 * self.cfg.num_hidden + 1];
        let h = tape.matmul(x, w)?;
        Ok(tape.add(h, b)?)
    }

    /// Collect per-parameter gradients (after backward) into a flat vector
    /// matching [`param_vector`] order.
    pub fn grad_vector(&self, tape: &Tape, bound: &[TensorId]) -> Vec<f64> {
        let mut g = Vec::with_capacity(self.param_count());
        for &id in bound {
            g.extend_from_slice(tape.grad(id));
        }
        g
    }
}

fn affine(x: &[f64], w: &Param, b: &Param) -> Vec<f64> {
    let (k, n) = (w.shape[0], w.shape[1]);
    debug_assert_eq!(x.len(), k);
    let mut out = b.data.clone();
    for p in 0..k {
        let xv = x[p];
        if xv == 0.0 {
            continue;
        }
        for j in 0..n {
            out[j] += xv * w.data[p * n + j];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Trajectories

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    OnPolicy,
    Buffer,
}

/// One latent sequence z_T..z_0 with per-step transition log-probs under
/// its generating policy. `latents[t]` is z_t, so `latents[num_steps]` is
/// the initial noise and `latents[0]` the sample. Step t is the transition
/// z_t -> z_{t-1}; its log-prob sits at `step_logprobs[t-1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub condition: Condition,
    pub latents: Vec<Vec<f64>>,
    pub step_logprobs: Vec<f64>,
    pub total_logprob: f64,
    pub reward: f64,
    pub origin: Origin,
    pub birth_iteration: u64,
    /// Steps with t > this marker were generated by an older policy and
    /// carry frozen p_off log-probs. Equal to num_steps for fully
    /// on-policy trajectories; the truncation step t_off for mixed ones.
    pub off_policy_above: usize,
}

impl Trajectory {
    pub fn num_steps(&self) -> usize {
        self.step_logprobs.len()
    }

    pub fn sample(&self) -> &[f64] {
        &self.latents[0]
    }

    pub fn is_step_off_policy(&self, t: usize) -> bool {
        t > self.off_policy_above
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.num_steps();
        if self.latents.len() != t + 1 {
            return Err(Error::Flow(format!(
                "{} latents for {} steps",
                self.latents.len(),
                t
            )));
        }
        let sum: f64 = self.step_logprobs.iter().sum();
        if (sum - self.total_logprob).abs() > 1e-9 {
            return Err(Error::Flow("total_logprob != sum(step_logprobs)".into()));
        }
        if self.step_logprobs.iter().any(|lp| !lp.is_finite()) {
            return Err(Error::Flow("non-finite step logprob".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Samplers

/// Deterministic Euler step: z' = z + d_sigma * v_theta(z, t, c).
pub fn euler_step(
    z: &[f64],
    t: usize,
    vf: &VelocityField,
    c: &Condition,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if t == 0 || t > schedule.num_steps {
        return Err(Error::Flow(format!("step index {t} out of range")));
    }
    let v = vf.forward(z, t, c)?;
    let ds = schedule.delta_sigma(t);
    Ok(z.iter().zip(&v).map(|(zi, vi)| zi + ds * vi).collect())
}

fn gaussian_logprob(z_next: &[f64], mu: &[f64], std: f64) -> f64 {
    let d = z_next.len() as f64;
    let quad: f64 = z_next
        .iter()
        .zip(mu)
        .map(|(x, m)| {
            let e = x - m;
            e * e
        })
        .sum();
    clamp_logprob(-quad / (2.0 * std * std) - d * std.ln() - 0.5 * d * LN_2PI)
}

/// Stochastic step: draws z' ~ N(z + v*d_sigma, sigma_step^2 I) and
/// returns the exact Gaussian log-density of the drawn point.
pub fn sde_step(
    z: &[f64],
    t: usize,
    vf: &VelocityField,
    c: &Condition,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, f64)> {
    schedule.check_step(t)?;
    let v = vf.forward(z, t, c)?;
    let ds = schedule.delta_sigma(t);
    let std = schedule.step_std(t);
    let mu: Vec<f64> = z.iter().zip(&v).map(|(zi, vi)| zi + ds * vi).collect();
    let z_next: Vec<f64> = mu
        .iter()
        .map(|m| m + std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let lp = gaussian_logprob(&z_next, &mu, std);
    Ok((z_next, lp))
}

/// Exact log N(z_next; z + v*d_sigma, sigma_step^2 I) for step t.
pub fn transition_logprob(
    z_next: &[f64],
    z: &[f64],
    t: usize,
    vf: &VelocityField,
    c: &Condition,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    schedule.check_step(t)?;
    let v = vf.forward(z, t, c)?;
    let ds = schedule.delta_sigma(t);
    let std = schedule.step_std(t);
    let mu: Vec<f64> = z.iter().zip(&v).map(|(zi, vi)| zi + ds * vi).collect();
    Ok(gaussian_logprob(z_next, &mu, std))
}

/// Differentiable transition log-prob: the mean depends on v_theta, so
/// gradients flow into the bound parameters.
pub fn transition_logprob_tape(
    tape: &mut Tape,
    bound: &[TensorId],
    z_next: &[f64],
    z: &[f64],
    t: usize,
    vf: &VelocityField,
    c: &Condition,
    schedule: &NoiseSchedule,
) -> Result<TensorId> {
    schedule.check_step(t)?;
    let v = vf.forward_tape(tape, bound, z, t, c)?;
    let ds = schedule.delta_sigma(t);
    let var = schedule.step_variance(t);
    let std = var.sqrt();
    let d = z.len() as f64;
    let zl = tape.leaf(vec![1, z.len()], z.to_vec(), false)?;
    let znl = tape.leaf(vec![1, z_next.len()], z_next.to_vec(), false)?;
    let drift = tape.mul_scalar(v, ds)?;
    let mu = tape.add(zl, drift)?;
    let diff = tape.sub(znl, mu)?;
    let sq = tape.square(diff)?;
    let quad = tape.sum(sq)?;
    let scaled = tape.mul_scalar(quad, -1.0 / (2.0 * var))?;
    let lp = tape.add_scalar(scaled, -d * std.ln() - 0.5 * d * LN_2PI)?;
    tape.clamp(lp, -LOGPROB_CLAMP, LOGPROB_CLAMP).map_err(Into::into)
}

/// Sample a full trajectory. With a prefix, steps T..t_off+1 (latents and
/// frozen step log-probs) are copied from it and steps t_off..1 are
/// regenerated with the current policy via the SDE sampler.
pub fn rollout_trajectory(
    vf: &VelocityField,
    c: &Condition,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
    prefix: Option<(&Trajectory, usize)>,
    birth_iteration: u64,
) -> Result<Trajectory> {
    let t_total = schedule.num_steps;
    let mut latents: Vec<Vec<f64>> = vec![Vec::new(); t_total + 1];
    let mut step_logprobs = vec![0.0f64; t_total];
    let (start_step, off_policy_above) = match prefix {
        Some((p, t_off)) => {
            if t_off > t_total {
                return Err(Error::Rollout(format!("t_off {t_off} > T {t_total}")));
            }
            if p.num_steps() != t_total {
                return Err(Error::Rollout(format!(
                    "prefix has {} steps, schedule has {t_total}",
                    p.num_steps()
                )));
            }
            for t in t_off..=t_total {
                latents[t] = p.latents[t].clone();
            }
            for t in (t_off + 1)..=t_total {
                step_logprobs[t - 1] = p.step_logprobs[t - 1];
            }
            (t_off, t_off)
        }
        None => {
            // z_T ~ N(0, sigma_max^2 I)
            let sigma_max = schedule.sigmas[t_total];
            latents[t_total] = (0..vf.cfg.latent_dim)
                .map(|_| sigma_max * rng.sample::<f64, _>(StandardNormal))
                .collect();
            (t_total, t_total)
        }
    };
    for t in (1..=start_step).rev() {
        let z = latents[t].clone();
        let (z_next, lp) = sde_step(&z, t, vf, c, schedule, rng)?;
        latents[t - 1] = z_next;
        step_logprobs[t - 1] = lp;
    }
    let total_logprob = step_logprobs.iter().sum();
    let traj = Trajectory {
        condition: c.clone(),
        latents,
        step_logprobs,
        total_logprob,
        reward: 0.0,
        origin: Origin::OnPolicy,
        birth_iteration,
        off_policy_above,
    };
    traj.validate()?;
    Ok(traj)
}

/// Per-step transition log-probs of a stored trajectory under `vf`.
pub fn score_trajectory(traj: &Trajectory, vf: &VelocityField, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    let t_total = traj.num_steps();
    if t_total != schedule.num_steps {
        return Err(Error::Flow("trajectory/schedule step mismatch".into()));
    }
    (1..=t_total)
        .map(|t| {
            transition_logprob(
                &traj.latents[t - 1],
                &traj.latents[t],
                t,
                vf,
                &traj.condition,
                schedule,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::reference_gaussian_logpdf;

    fn toy_vf(seed: u64) -> (VelocityField, NoiseSchedule, Condition) {
        let cfg = VfConfig { hidden_dim: 8, ..VfConfig::default() };
        let vf = VelocityField::new(cfg, seed);
        let sched = NoiseSchedule::linear(10, 0.01, 1.0).unwrap();
        let c = Condition::new(0, cfg.cond_embed_dim);
        (vf, sched, c)
    }

    #[test]
    fn euler_zero_velocity_is_identity() {
        let (mut vf, sched, c) = toy_vf(1);
        let n = vf.param_count();
        vf.set_param_vector(&vec![0.0; n]).unwrap();
        let z = vec![0.3, -0.7];
        let z2 = euler_step(&z, 5, &vf, &c, &sched).unwrap();
        assert_eq!(z2, z);
    }

    #[test]
    fn euler_constant_velocity() {
        // out_b alone makes v_theta a constant (all other params zero)
        let (mut vf, sched, c) = toy_vf(1);
        let mut v = vec![0.0; vf.param_count()];
        let n = v.len();
        v[n - 2] = 2.0;
        v[n - 1] = -1.0;
        vf.set_param_vector(&v).unwrap();
        let z = vec![0.0, 0.0];
        let t = 5;
        let ds = sched.delta_sigma(t);
        let z2 = euler_step(&z, t, &vf, &c, &sched).unwrap();
        assert!((z2[0] - 2.0 * ds).abs() < 1e-15);
        assert!((z2[1] + ds).abs() < 1e-15);
    }

    #[test]
    fn euler_is_deterministic() {
        let (vf, sched, c) = toy_vf(7);
        let z = vec![0.4, 0.2];
        let a = euler_step(&z, 3, &vf, &c, &sched).unwrap();
        let b = euler_step(&z, 3, &vf, &c, &sched).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sde_logprob_matches_reference_pdf() {
        // D=1 analytic cases, cross-checked with the independent pdf routine
        let lp = gaussian_logprob(&[0.0], &[0.0], 1.0);
        assert!((lp - (-0.9189385)).abs() < 1e-6);
        assert!((lp - reference_gaussian_logpdf(0.0, 0.0, 1.0).unwrap()).abs() < 1e-12);

        let lp = gaussian_logprob(&[0.0], &[0.0], 0.1);
        assert!((lp - (-0.9189385 + 10f64.ln())).abs() < 1e-6);
        assert!((lp - reference_gaussian_logpdf(0.0, 0.0, 0.1).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn logprob_at_mean_drops_quadratic_term() {
        let (vf, sched, c) = toy_vf(3);
        let z = vec![0.1, 0.2];
        let t = 6;
        let v = vf.forward(&z, t, &c).unwrap();
        let ds = sched.delta_sigma(t);
        let mu: Vec<f64> = z.iter().zip(&v).map(|(a, b)| a + b * ds).collect();
        let lp = transition_logprob(&mu, &z, t, &vf, &c, &sched).unwrap();
        let std = sched.step_std(t);
        let expect = -2.0 * std.ln() - LN_2PI;
        assert!((lp - expect).abs() < 1e-12);
    }

    #[test]
    fn transition_logprob_two_dim_hand_case() {
        // D=2, mu=(0,0), sigma=0.5, z_next=(0.5, 0):
        // -0.25/(2*0.25) - 2 ln 0.5 - ln 2pi = -0.9516
        let lp = gaussian_logprob(&[0.5, 0.0], &[0.0, 0.0], 0.5);
        let expect: f64 = reference_gaussian_logpdf(0.5, 0.0, 0.5).unwrap()
            + reference_gaussian_logpdf(0.0, 0.0, 0.5).unwrap();
        assert!((lp - expect).abs() < 1e-12);
        assert!((expect - (-0.9516)).abs() < 1e-3);
    }

    #[test]
    fn sde_step_self_consistent_with_transition_logprob() {
        let (vf, sched, c) = toy_vf(5);
        let mut rng = crate::rng::stream(42, &[1]);
        let z = vec![0.5, -0.3];
        let (z2, lp) = sde_step(&z, 8, &vf, &c, &sched, &mut rng).unwrap();
        let lp2 = transition_logprob(&z2, &z, 8, &vf, &c, &sched).unwrap();
        assert!((lp - lp2).abs() < 1e-12);
    }

    #[test]
    fn transition_logprob_maximal_at_mean() {
        let (vf, sched, c) = toy_vf(9);
        let z = vec![0.2, 0.1];
        let t = 4;
        let v = vf.forward(&z, t, &c).unwrap();
        let ds = sched.delta_sigma(t);
        let mu: Vec<f64> = z.iter().zip(&v).map(|(a, b)| a + b * ds).collect();
        let at_mean = transition_logprob(&mu, &z, t, &vf, &c, &sched).unwrap();
        let mut rng = crate::rng::stream(11, &[2]);
        for _ in 0..50 {
            let cand: Vec<f64> = mu
                .iter()
                .map(|m| m + rng.sample::<f64, _>(StandardNormal))
                .collect();
            let lp = transition_logprob(&cand, &z, t, &vf, &c, &sched).unwrap();
            assert!(lp <= at_mean + 1e-12);
        }
    }

    #[test]
    fn rollout_bookkeeping() {
        let (vf, sched, c) = toy_vf(2);
        let mut rng = crate::rng::stream(1, &[3]);
        let traj = rollout_trajectory(&vf, &c, &sched, &mut rng, None, 0).unwrap();
        assert_eq!(traj.latents.len(), 11);
        assert_eq!(traj.step_logprobs.len(), 10);
        let sum: f64 = traj.step_logprobs.iter().sum();
        assert!((sum - traj.total_logprob).abs() < 1e-12);
        assert_eq!(traj.off_policy_above, 10);
    }

    #[test]
    fn rollout_full_prefix_reuse() {
        let (vf, sched, c) = toy_vf(2);
        let mut rng = crate::rng::stream(1, &[4]);
        let base = rollout_trajectory(&vf, &c, &sched, &mut rng, None, 0).unwrap();
        let mut rng2 = crate::rng::stream(1, &[5]);
        let reused =
            rollout_trajectory(&vf, &c, &sched, &mut rng2, Some((&base, 0)), 1).unwrap();
        assert_eq!(reused.latents, base.latents);
        assert_eq!(reused.step_logprobs, base.step_logprobs);
        assert_eq!(reused.off_policy_above, 0);
    }

    #[test]
    fn rollout_full_truncation_ignores_prefix() {
        let (vf, sched, c) = toy_vf(2);
        let mut rng = crate::rng::stream(1, &[6]);
        let base = rollout_trajectory(&vf, &c, &sched, &mut rng, None, 0).unwrap();
        let mut rng2 = crate::rng::stream(99, &[7]);
        let fresh =
            rollout_trajectory(&vf, &c, &sched, &mut rng2, Some((&base, 10)), 1).unwrap();
        assert_eq!(fresh.off_policy_above, 10);
        // initial noise comes from the prefix but every step is resampled
        assert_eq!(fresh.latents[10], base.latents[10]);
        assert_ne!(fresh.latents[0], base.latents[0]);
    }

    #[test]
    fn self_scoring_identity() {
        let (vf, sched, c) = toy_vf(4);
        let mut rng = crate::rng::stream(8, &[9]);
        let traj = rollout_trajectory(&vf, &c, &sched, &mut rng, None, 0).unwrap();
        let scores = score_trajectory(&traj, &vf, &sched).unwrap();
        for (s, lp) in scores.iter().zip(&traj.step_logprobs) {
            assert!((s - lp).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_params_identical_scores() {
        let (vf, sched, c) = toy_vf(4);
        let vf2 = vf.clone();
        let mut rng = crate::rng::stream(8, &[10]);
        let traj = rollout_trajectory(&vf, &c, &sched, &mut rng, None, 0).unwrap();
        assert_eq!(
            score_trajectory(&traj, &vf, &sched).unwrap(),
            score_trajectory(&traj, &vf2, &sched).unwrap()
        );
    }

    #[test]
    fn tape_forward_matches_plain() {
        let (vf, sched, c) = toy_vf(6);
        let z = vec![0.3, -0.2];
        let t = 7;
        let plain = vf.forward(&z, t, &c).unwrap();
        let mut tape = Tape::new();
        let bound = vf.bind(&mut tape, false).unwrap();
        let out = vf.forward_tape(&mut tape, &bound, &z, t, &c).unwrap();
        for (a, b) in tape.data(out).iter().zip(&plain) {
            assert!((a - b).abs() < 1e-12);
        }
        let zn = euler_step(&z, t, &vf, &c, &sched).unwrap();
        let lp_plain = transition_logprob(&zn, &z, t, &vf, &c, &sched).unwrap();
        let mut tape = Tape::new();
        let bound = vf.bind(&mut tape, false).unwrap();
        let lp_t =
            transition_logprob_tape(&mut tape, &bound, &zn, &z, t, &vf, &c, &sched).unwrap();
        assert!((tape.value(lp_t) - lp_plain).abs() < 1e-12);
    }

    #[test]
    fn schedule_validation() {
        assert!(NoiseSchedule::linear(0, 0.01, 1.0).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 1.0).is_err());
        assert!(NoiseSchedule::linear(10, 0.5, 0.5).is_err());
        let s = NoiseSchedule::linear(10, 0.01, 1.0).unwrap();
        for t in 1..=10 {
            assert!(s.step_variance(t) > 0.0);
        }
        // variance collapses toward the final denoising step
        assert!(s.step_variance(1) < s.step_variance(10) / 100.0);
    }
}
