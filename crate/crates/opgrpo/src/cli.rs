//! Command-line front end: training runs, ablation presets, diagnostic
//! profiles, and plot-data export.
//!
//! Exit codes: 0 success, 1 runtime divergence/failure, 2 configuration
//! error. Output CSVs are byte-identical across reruns of the same
//! (config, seed); wall-clock timestamps live only in the run manifest.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::flow::{rollout_trajectory, score_trajectory, NoiseSchedule};
use crate::trainer::{IterationMetrics, Trainer, TrainerConfig, TrainMode};
use crate::{Error, Result};

const TAG_PROFILE: u64 = 0x70726f66;

/// Environment variable naming the root directory for run outputs.
pub const OUT_ROOT_ENV: &str = "OPGRPO_OUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "opgrpo", version, about = "Off-policy GRPO laboratory for 2-D flow models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run one training run and write metrics, checkpoints, and a manifest.
    Train(TrainArgs),
    /// Run an ablation preset across seeds and emit a comparison table.
    Ablation(AblationArgs),
    /// Per-step log-prob profile of on-policy vs buffered off-policy samples.
    LogprobProfile(LogprobProfileArgs),
    /// Merge metrics CSVs into long-format (run_id, iteration, metric, value).
    PlotData(PlotDataArgs),
    /// Dump the replay buffer of a checkpoint as JSON.
    InspectBuffer(InspectBufferArgs),
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// TOML config file; defaults apply for missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output root directory (overrides OPGRPO_OUT_ROOT; default ./runs).
    #[arg(long)]
    pub out_root: Option<PathBuf>,
    /// Run directory name (default: derived from mode, seed, config hash).
    #[arg(long)]
    pub run_id: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// sequence_corrected | naive_substitution | uncorrected | on_policy_baseline
    #[arg(long)]
    pub mode: Option<TrainMode>,
    #[arg(long)]
    pub off_policy_fraction: Option<f64>,
    #[arg(long)]
    pub t_off: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct AblationArgs {
    /// wo_corr | wo_trun | frac_sweep | baseline_vs_opgrpo
    #[arg(long)]
    pub preset: String,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',', required = true)]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_root: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Reward threshold for iterations-to-threshold; default is 95% of the
    /// baseline's final trailing-10 mean when the preset includes a baseline.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct LogprobProfileArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub num_trajectories: usize,
    /// Output CSV path (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct PlotDataArgs {
    /// Input metrics CSV files (at least one).
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct InspectBufferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
}

// ---------------------------------------------------------------------------
// Manifest & summary

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub version: String,
    pub start_unix_s: f64,
    pub end_unix_s: f64,
    pub config_path: String,
    pub metrics_path: String,
    pub summary_path: String,
    pub final_checkpoint_path: String,
}

#[derive(Debug, Serialize)]
struct RunSummary {
    run_id: String,
    config_hash: String,
    iterations: u64,
    final_mean_reward: f64,
    trailing10_mean_reward: f64,
    total_wall_time_ms: f64,
    logprob_clamp_events: u64,
    diverged: bool,
}

pub fn config_hash(config: &TrainerConfig) -> Result<String> {
    let toml = config.to_toml_string()?;
    let mut h = Sha256::new();
    h.update(toml.as_bytes());
    Ok(format!("{:x}", h.finalize()))
}

fn now_unix_s() -> f64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Mean of the last `window` rows' mean rewards.
pub fn trailing_mean_reward(rows: &[IterationMetrics], window: usize) -> f64 {
    if rows.is_empty() {
        return f64::NAN;
    }
    let tail = &rows[rows.len().saturating_sub(window)..];
    tail.iter().map(|r| r.mean_reward).sum::<f64>() / tail.len() as f64
}

/// First 1-based iteration whose trailing-`window` mean reward reaches the
/// threshold; None if never.
pub fn iterations_to_threshold(rows: &[IterationMetrics], window: usize, threshold: f64) -> Option<u64> {
    for i in 0..rows.len() {
        let lo = (i + 1).saturating_sub(window);
        let mean =
            rows[lo..=i].iter().map(|r| r.mean_reward).sum::<f64>() / (i - lo + 1) as f64;
        if mean >= threshold {
            return Some(rows[i].iteration);
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Entry point

pub fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Checkpoint(_) => 2,
        _ => 1,
    }
}

/// Parse argv, dispatch, and return the process exit code.
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(args) => cmd_train(&args).map(|_| ()),
        Command::Ablation(args) => cmd_ablation(&args),
        Command::LogprobProfile(args) => cmd_logprob_profile(&args),
        Command::PlotData(args) => cmd_plot_data(&args),
        Command::InspectBuffer(args) => cmd_inspect_buffer(&args),
    }
}

fn out_root(flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .or_else(|| std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn load_config(path: &Option<PathBuf>) -> Result<TrainerConfig> {
    match path {
        None => Ok(TrainerConfig::default()),
        Some(p) => {
            let raw = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            TrainerConfig::from_toml_str(&raw)
        }
    }
}

fn apply_overrides(mut cfg: TrainerConfig, args: &TrainArgs) -> Result<TrainerConfig> {
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(i) = args.iterations {
        cfg.total_iterations = i;
    }
    if let Some(m) = args.mode {
        cfg.mode = m;
    }
    if let Some(f) = args.off_policy_fraction {
        cfg.off_policy_fraction = f;
    }
    if let Some(t) = args.t_off {
        cfg.t_off = t;
    }
    if let Some(lr) = args.learning_rate {
        cfg.learning_rate = lr;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn unique_run_dir(root: &Path, base: &str) -> Result<(String, PathBuf)> {
    fs::create_dir_all(root)?;
    let mut name = base.to_string();
    let mut k = 1;
    loop {
        let dir = root.join(&name);
        if !dir.exists() {
            fs::create_dir(&dir)?;
            return Ok((name, dir));
        }
        k += 1;
        name = format!("{base}-{k}");
    }
}

/// Execute a training run into its own directory; returns the directory.
pub fn cmd_train(args: &TrainArgs) -> Result<PathBuf> {
    let cfg = apply_overrides(load_config(&args.config)?, args)?;
    let hash = config_hash(&cfg)?;
    let base = args
        .run_id
        .clone()
        .unwrap_or_else(|| format!("{}-s{}-{}", cfg.mode, cfg.seed, &hash[..8]));
    let root = out_root(&args.out_root);
    let (run_id, dir) = unique_run_dir(&root, &base)?;
    let start = now_unix_s();

    fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;

    crate::flow::reset_logprob_clamp_count();
    let mut trainer = Trainer::new(cfg.clone())?;
    let metrics_path = dir.join("metrics.csv");
    let mut csv = fs::File::create(&metrics_path)?;
    writeln!(csv, "{}", IterationMetrics::csv_header(cfg.num_steps))?;
    let total = cfg.total_iterations as u64;
    let mut rows: Vec<IterationMetrics> = Vec::with_capacity(cfg.total_iterations);
    let mut run_error: Option<Error> = None;
    while trainer.iteration < total {
        match trainer.run_iteration() {
            Ok(row) => {
                writeln!(csv, "{}", row.csv_row())?;
                rows.push(row);
                if trainer.iteration % cfg.checkpoint_interval as u64 == 0 {
                    trainer.save_checkpoint(&dir.join(format!("ckpt_{:05}.json", trainer.iteration)))?;
                }
            }
            Err(e) => {
                run_error = Some(e);
                break;
            }
        }
    }
    csv.flush()?;
    let final_ckpt = dir.join("ckpt_final.json");
    trainer.save_checkpoint(&final_ckpt)?;

    let summary = RunSummary {
        run_id: run_id.clone(),
        config_hash: hash.clone(),
        iterations: trainer.iteration,
        final_mean_reward: rows.last().map(|r| r.mean_reward).unwrap_or(f64::NAN),
        trailing10_mean_reward: trailing_mean_reward(&rows, 10),
        total_wall_time_ms: rows.iter().map(|r| r.wall_time_ms).sum(),
        logprob_clamp_events: crate::flow::logprob_clamp_count(),
        diverged: run_error.is_some(),
    };
    let summary_path = dir.join("summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&summary).expect("serializable"))?;

    let manifest = RunManifest {
        run_id,
        config_hash: hash,
        version: env!("CARGO_PKG_VERSION").to_string(),
        start_unix_s: start,
        end_unix_s: now_unix_s(),
        config_path: dir.join("config.toml").display().to_string(),
        metrics_path: metrics_path.display().to_string(),
        summary_path: summary_path.display().to_string(),
        final_checkpoint_path: final_ckpt.display().to_string(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("serializable"))?;

    match run_error {
        Some(e) => Err(Error::Diverged(format!("run aborted at iteration {}: {e}", trainer.iteration))),
        None => Ok(dir),
    }
}

// ---------------------------------------------------------------------------
// Ablation

#[derive(Debug, Clone, Serialize)]
pub struct AblationCell {
    pub label: String,
    pub seed: u64,
    pub diverged: bool,
    pub final_trailing10_reward: f64,
    pub iterations_to_threshold: Option<u64>,
    pub final_clip_frac_all: f64,
    pub final_clip_frac_off: f64,
    pub weight_clamp_events: usize,
    pub off_policy_members: usize,
}

fn preset_variants(preset: &str, base: &TrainerConfig) -> Result<Vec<(String, TrainerConfig)>> {
    let mut variants = Vec::new();
    match preset {
        "wo_corr" => {
            for mode in [TrainMode::SequenceCorrected, TrainMode::Uncorrected] {
                variants.push((mode.to_string(), TrainerConfig { mode, ..base.clone() }));
            }
        }
        "wo_trun" => {
            variants.push((format!("t_off_{}", base.t_off), base.clone()));
            variants.push(("t_off_0".to_string(), TrainerConfig { t_off: 0, ..base.clone() }));
        }
        "frac_sweep" => {
            for f in [0.05, 0.15, 0.25] {
                variants.push((
                    format!("frac_{f}"),
                    TrainerConfig { off_policy_fraction: f, ..base.clone() },
                ));
            }
        }
        "baseline_vs_opgrpo" => {
            variants.push((
                "on_policy_baseline".to_string(),
                TrainerConfig { mode: TrainMode::OnPolicyBaseline, ..base.clone() },
            ));
            variants.push((
                "opgrpo".to_string(),
                TrainerConfig { mode: TrainMode::SequenceCorrected, ..base.clone() },
            ));
        }
        other => return Err(Error::Config(format!("unknown ablation preset '{other}'"))),
    }
    Ok(variants)
}

/// Run one config to completion in memory; never panics the matrix. The
/// threshold-dependent column is filled in later, once the threshold is
/// known, from the returned rows.
fn run_cell(label: &str, cfg: TrainerConfig) -> (AblationCell, Vec<IterationMetrics>) {
    let seed = cfg.seed;
    match crate::trainer::train(cfg) {
        Err(_) => (
            AblationCell {
                label: label.to_string(),
                seed,
                diverged: true,
                final_trailing10_reward: f64::NAN,
                iterations_to_threshold: None,
                final_clip_frac_all: f64::NAN,
                final_clip_frac_off: f64::NAN,
                weight_clamp_events: 0,
                off_policy_members: 0,
            },
            Vec::new(),
        ),
        Ok((_, rows)) => {
            let last = rows.last();
            let cell = AblationCell {
                label: label.to_string(),
                seed,
                diverged: false,
                final_trailing10_reward: trailing_mean_reward(&rows, 10),
                iterations_to_threshold: None,
                final_clip_frac_all: last.map(|r| r.clip_frac_all).unwrap_or(f64::NAN),
                final_clip_frac_off: last.map(|r| r.clip_frac_off).unwrap_or(f64::NAN),
                weight_clamp_events: rows.iter().map(|r| r.weight_clamp_events).sum(),
                off_policy_members: rows.iter().map(|r| r.corr_weight_count).sum(),
            };
            (cell, rows)
        }
    }
}

pub fn cmd_ablation(args: &AblationArgs) -> Result<()> {
    let mut base = load_config(&args.config)?;
    if let Some(i) = args.iterations {
        base.total_iterations = i;
    }
    base.validate()?;
    let variants = preset_variants(&args.preset, &base)?;
    let root = out_root(&args.out_root);
    let (_, dir) = unique_run_dir(&root, &format!("ablation-{}", args.preset))?;

    // Baseline cells run first so the default threshold can be derived
    // from their final trailing-10 mean rewards.
    let mut results: Vec<(AblationCell, Vec<IterationMetrics>)> = Vec::new();
    let mut baseline_final: Vec<f64> = Vec::new();
    for pass in 0..2 {
        for (label, cfg) in &variants {
            let is_baseline = cfg.mode == TrainMode::OnPolicyBaseline;
            if (pass == 0) != is_baseline {
                continue;
            }
            for &seed in &args.seeds {
                let result = run_cell(label, TrainerConfig { seed, ..cfg.clone() });
                if is_baseline && !result.0.diverged {
                    baseline_final.push(result.0.final_trailing10_reward);
                }
                results.push(result);
            }
        }
    }
    let threshold = args.threshold.or_else(|| {
        if baseline_final.is_empty() {
            None
        } else {
            Some(0.95 * baseline_final.iter().sum::<f64>() / baseline_final.len() as f64)
        }
    });
    let mut cells: Vec<AblationCell> = Vec::new();
    for (mut cell, rows) in results {
        if let Some(t) = threshold {
            cell.iterations_to_threshold = iterations_to_threshold(&rows, 10, t);
        }
        cells.push(cell);
    }

    let mut table = String::from(
        "label,seed,diverged,final_trailing10_reward,iterations_to_threshold,final_clip_frac_all,final_clip_frac_off,weight_clamp_events,off_policy_members\n",
    );
    for c in &cells {
        let itt = c.iterations_to_threshold.map(|v| v.to_string()).unwrap_or_default();
        table.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            c.label,
            c.seed,
            c.diverged,
            c.final_trailing10_reward,
            itt,
            c.final_clip_frac_all,
            c.final_clip_frac_off,
            c.weight_clamp_events,
            c.off_policy_members,
        ));
    }
    fs::write(dir.join("ablation_table.csv"), &table)?;
    if let Some(t) = threshold {
        fs::write(dir.join("threshold.txt"), format!("{t}\n"))?;
    }
    print!("{table}");
    Ok(())
}

// ---------------------------------------------------------------------------
// Log-prob profile

pub fn cmd_logprob_profile(args: &LogprobProfileArgs) -> Result<()> {
    if args.num_trajectories == 0 {
        return Err(Error::Config("num_trajectories must be positive".into()));
    }
    let trainer = Trainer::from_checkpoint_file(&args.checkpoint)?;
    let cfg = &trainer.config;
    let schedule = NoiseSchedule::linear(cfg.num_steps, cfg.sigma_min, cfg.sigma_max)?;
    let t_total = cfg.num_steps;

    // on-policy population: fresh rollouts under the current policy
    let mut on: Vec<Vec<f64>> = vec![Vec::new(); t_total];
    for i in 0..args.num_trajectories {
        let c = crate::flow::Condition::new(i % cfg.reward.num_conditions(), cfg.cond_embed_dim);
        let mut rng = crate::rng::stream(cfg.seed, &[TAG_PROFILE, i as u64]);
        let traj = rollout_trajectory(&trainer.vf, &c, &schedule, &mut rng, None, trainer.iteration)?;
        for t in 1..=t_total {
            on[t - 1].push(traj.step_logprobs[t - 1]);
        }
    }

    // off-policy population: buffer trajectories scored under the current
    // policy (the replay scenario the correction exists for)
    let mut off: Vec<Vec<f64>> = vec![Vec::new(); t_total];
    if trainer.buffer.is_empty() {
        eprintln!("warning: checkpoint buffer is empty; emitting on-policy profile only");
    } else {
        for (_, entry) in trainer.buffer.entries() {
            let scores = score_trajectory(&entry.trajectory, &trainer.vf, &schedule)?;
            for t in 1..=t_total {
                off[t - 1].push(scores[t - 1]);
            }
        }
    }

    let mean_std = |xs: &[f64]| -> (f64, f64) {
        if xs.is_empty() {
            return (f64::NAN, f64::NAN);
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    };

    let mut out = String::from("step,on_mean,on_std,off_mean,off_std\n");
    for t in 1..=t_total {
        let (om, os) = mean_std(&on[t - 1]);
        let (fm, fs) = mean_std(&off[t - 1]);
        out.push_str(&format!("{t},{om},{os},{fm},{fs}\n"));
    }
    match &args.out {
        Some(p) => fs::write(p, out)?,
        None => print!("{out}"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Plot data

pub fn cmd_plot_data(args: &PlotDataArgs) -> Result<()> {
    let mut out = String::from("run_id,iteration,metric,value\n");
    let mut schema: Option<Vec<String>> = None;
    for input in &args.inputs {
        let raw = fs::read_to_string(input)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", input.display())))?;
        let mut lines = raw.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Config(format!("{}: empty file", input.display())))?
            .split(',')
            .map(str::to_string)
            .collect();
        if header.first().map(String::as_str) != Some("iteration") {
            return Err(Error::Config(format!(
                "{}: first column must be 'iteration'",
                input.display()
            )));
        }
        match &schema {
            None => schema = Some(header.clone()),
            Some(s) if *s != header => {
                return Err(Error::Config(format!("{}: schema mismatch", input.display())))
            }
            _ => {}
        }
        let run_id = input
            .parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| {
                input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
            });
        for (lineno, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != header.len() {
                return Err(Error::Config(format!(
                    "{}: row {} has {} fields, expected {}",
                    input.display(),
                    lineno + 2,
                    fields.len(),
                    header.len()
                )));
            }
            let iteration = fields[0];
            for (name, value) in header.iter().zip(&fields).skip(1) {
                out.push_str(&format!("{run_id},{iteration},{name},{value}\n"));
            }
        }
    }
    match &args.out {
        Some(p) => fs::write(p, out)?,
        None => print!("{out}"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Buffer inspection

pub fn cmd_inspect_buffer(args: &InspectBufferArgs) -> Result<()> {
    let trainer = Trainer::from_checkpoint_file(&args.checkpoint)?;
    #[derive(Serialize)]
    struct EntryView {
        condition_id: usize,
        reward: f64,
        retention_score: f64,
        insert_iteration: u64,
        birth_iteration: u64,
        sample: Vec<f64>,
    }
    let views: Vec<EntryView> = trainer
        .buffer
        .entries()
        .map(|(id, e)| EntryView {
            condition_id: *id,
            reward: e.trajectory.reward,
            retention_score: e.retention_score,
            insert_iteration: e.insert_iteration,
            birth_iteration: e.trajectory.birth_iteration,
            sample: e.trajectory.sample().to_vec(),
        })
        .collect();
    println!("{}", serde_json::to_string_pretty(&views).expect("serializable"));
    Ok(())
}
