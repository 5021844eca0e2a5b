//! Operator entry points: author guidelines, run trajectory optimization,
//! train, evaluate, and export traces for plotting.
//!
//! Every command writes a run manifest into its output directory before any
//! long-running work, containing enough to reproduce the run. Exit codes:
//! 0 success, 1 usage error, 2 non-convergence or training fault.

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use linelab::dynamics::{PlanarBikeParams, RandomizationConfig};
use linelab::env::{CommandConfig, Env, EnvConfig, Mode};
use linelab::geometry::{sample_dense, HermiteSegment, Vec3};
use linelab::guideline::{GuidelineFile, KeyOrientationSet};
use linelab::presets::{
    benchmark_train_config, build_preset, env_config as preset_env_config, PresetError,
    StuntPreset,
};
use linelab::rl::{evaluate, read_checkpoint, train, ForwardCache};
use linelab::trace::EpisodeTrace;
use linelab::trajopt::{
    build_backflip_problem, build_flight_problem, build_rest_problem, constraint_report,
    dynamics_defects, export_guideline, solve, TrajOptSolution,
};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "linelab", version, about = "Planar bike stunt lab: guidelines, trajectory optimization, training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Author a guideline from a preset or a Hermite control-point file.
    Guideline(GuidelineArgs),
    /// Solve a trajectory-optimization preset and export its guideline.
    Trajopt(TrajoptArgs),
    /// Train a policy on a guideline task.
    Train(TrainArgs),
    /// Evaluate a checkpoint over seeded episodes.
    Eval(EvalArgs),
    /// Replay a checkpoint for one episode and export the per-step trace.
    Trace(TraceArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Output directory for artifacts and the run manifest.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GuidelineArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Preset name (mini-hop, mini-hop-nokey, large-hop, line, ...).
    #[arg(long, conflicts_with = "curve")]
    preset: Option<String>,
    /// JSON file with Hermite segments: [{x0:[..],x1:[..],m0:[..],m1:[..]}].
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Waypoint count when building from a curve file.
    #[arg(long, default_value_t = 10)]
    waypoints: usize,
    /// Reach margin in meters.
    #[arg(long, default_value_t = 0.3)]
    margin: f64,
}

#[derive(Args)]
struct TrajoptArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Problem preset: backflip, rest, or flight.
    #[arg(long, default_value = "backflip")]
    preset: String,
    /// Waypoint count for the exported guideline.
    #[arg(long, default_value_t = 12)]
    waypoints: usize,
    #[arg(long, default_value_t = 0.3)]
    margin: f64,
    /// Outer iteration budget.
    #[arg(long, default_value_t = 60)]
    max_iters: usize,
    /// Flight preset: horizontal span (m).
    #[arg(long, default_value_t = 1.2)]
    flight_span: f64,
    /// Flight preset: fixed duration (s).
    #[arg(long, default_value_t = 0.8)]
    flight_duration: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Task preset name, or use --guideline for a file.
    #[arg(long, conflicts_with = "guideline")]
    preset: Option<String>,
    /// Guideline file authored by the guideline or trajopt commands.
    #[arg(long)]
    guideline: Option<PathBuf>,
    /// Environment configuration overrides (TOML).
    #[arg(long)]
    env_config: Option<PathBuf>,
    /// Total environment steps.
    #[arg(long, default_value_t = 3_000_000)]
    steps: usize,
    /// Parallel environments.
    #[arg(long)]
    envs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, conflicts_with = "guideline")]
    preset: Option<String>,
    #[arg(long)]
    guideline: Option<PathBuf>,
    #[arg(long)]
    env_config: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
}

#[derive(Args)]
struct TraceArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, conflicts_with = "guideline")]
    preset: Option<String>,
    #[arg(long)]
    guideline: Option<PathBuf>,
    #[arg(long)]
    env_config: Option<PathBuf>,
}

/// Reproducibility record written before any long-running work.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    args: Vec<String>,
    seed: u64,
    out_dir: String,
    package_version: String,
    guideline_schema_version: u32,
    checkpoint_version: u32,
}

fn write_manifest(common: &CommonArgs, command: &str) -> Result<()> {
    std::fs::create_dir_all(&common.out)
        .with_context(|| format!("creating {}", common.out.display()))?;
    let manifest = RunManifest {
        command: command.to_string(),
        args: std::env::args().skip(1).collect(),
        seed: common.seed,
        out_dir: common.out.display().to_string(),
        package_version: env!("CARGO_PKG_VERSION").to_string(),
        guideline_schema_version: linelab::guideline::GUIDELINE_SCHEMA_VERSION,
        checkpoint_version: 1,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(common.out.join("manifest.json"), text)?;
    Ok(())
}

/// Optional TOML overrides for the environment.
#[derive(Debug, Clone, Default, Deserialize)]
struct EnvFileConfig {
    episode_seconds: Option<f64>,
    randomization: Option<bool>,
    t_switch_range: Option<[f64; 2]>,
    commands: Option<CommandConfig>,
    params: Option<PlanarBikeParams>,
}

impl EnvFileConfig {
    fn apply(&self, config: &mut EnvConfig) {
        if let Some(s) = self.episode_seconds {
            config.episode_seconds = s;
        }
        if let Some(false) = self.randomization {
            config.randomization = RandomizationConfig::disabled();
        }
        if let Some([lo, hi]) = self.t_switch_range {
            config.t_switch_range = (lo, hi);
        }
        if let Some(c) = &self.commands {
            config.commands = c.clone();
        }
        if let Some(p) = &self.params {
            config.params = p.clone();
        }
    }
}

fn load_task(
    preset: &Option<String>,
    guideline: &Option<PathBuf>,
    env_file: &Option<PathBuf>,
) -> Result<(String, EnvConfig)> {
    let (name, mut config) = match (preset, guideline) {
        (Some(name), None) => {
            let preset = StuntPreset::parse(name).map_err(usage)?;
            let built = build_preset(preset).map_err(usage)?;
            (built.name.to_string(), preset_env_config(&built))
        }
        (None, Some(path)) => {
            let file = GuidelineFile::load(path)
                .with_context(|| format!("reading guideline {}", path.display()))?;
            let (gl, keys) = file.into_parts()?;
            (file.name.clone(), EnvConfig::new(gl, keys))
        }
        _ => return Err(usage(anyhow!("exactly one of --preset or --guideline is required"))),
    };
    if let Some(path) = env_file {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading env config {}", path.display()))?;
        let overrides: EnvFileConfig = toml::from_str(&text)?;
        overrides.apply(&mut config);
    }
    Ok((name, config))
}

/// Marker for usage-class failures (exit code 1 instead of 2).
#[derive(Debug)]
struct UsageError(anyhow::Error);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl std::error::Error for UsageError {}

fn usage(err: impl Into<anyhow::Error>) -> anyhow::Error {
    anyhow::Error::new(UsageError(err.into()))
}

#[derive(Debug)]
struct NonConvergence(String);

impl std::fmt::Display for NonConvergence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for NonConvergence {}

fn cmd_guideline(args: &GuidelineArgs) -> Result<()> {
    write_manifest(&args.common, "guideline")?;
    let (name, guideline, keys) = if let Some(preset_name) = &args.preset {
        let preset = StuntPreset::parse(preset_name).map_err(usage)?;
        let built = build_preset(preset).map_err(|e| match e {
            PresetError::UnsupportedInPlanarPlant(_) | PresetError::Unknown(_) => usage(e),
            other => anyhow::Error::new(other),
        })?;
        (built.name.to_string(), built.guideline, built.keys)
    } else if let Some(curve_path) = &args.curve {
        #[derive(Deserialize)]
        struct SegmentRecord {
            x0: [f64; 3],
            x1: [f64; 3],
            m0: [f64; 3],
            m1: [f64; 3],
        }
        let text = std::fs::read_to_string(curve_path)
            .with_context(|| format!("reading {}", curve_path.display()))?;
        let records: Vec<SegmentRecord> = serde_json::from_str(&text).map_err(usage)?;
        if records.is_empty() {
            return Err(usage(anyhow!("curve file has no segments")));
        }
        let chain: Vec<HermiteSegment> = records
            .iter()
            .map(|r| {
                HermiteSegment::new(
                    Vec3::new(r.x0[0], r.x0[1], r.x0[2]),
                    Vec3::new(r.x1[0], r.x1[1], r.x1[2]),
                    Vec3::new(r.m0[0], r.m0[1], r.m0[2]),
                    Vec3::new(r.m1[0], r.m1[1], r.m1[2]),
                )
            })
            .collect();
        let dense = sample_dense(&chain, 1000).map_err(usage)?;
        let guideline = linelab::guideline::build_guideline(&dense, args.waypoints, args.margin)
            .map_err(usage)?;
        ("custom".to_string(), guideline, KeyOrientationSet::default())
    } else {
        return Err(usage(anyhow!("one of --preset or --curve is required")));
    };

    let file = GuidelineFile::from_parts(&name, &guideline, &keys);
    let path = args.common.out.join("guideline.json");
    file.save(&path)?;
    println!(
        "guideline '{name}' with {} waypoints (margin {} m):",
        guideline.len(),
        guideline.margin
    );
    println!("{:>4} {:>10} {:>10} {:>10} {:>10}", "i", "x", "y", "z", "d");
    for (i, w) in guideline.waypoints.iter().enumerate() {
        println!("{i:>4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}", w.p.x, w.p.y, w.p.z, w.d);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn solution_csv(solution: &TrajOptSolution) -> String {
    let mut out =
        String::from("t,x_com,z_com,vx_com,vz_com,phi,phidot,h,hdot,hddot,tau,reaction\n");
    for phase in &solution.phases {
        for (k, x) in phase.states.iter().enumerate() {
            let u = if k < phase.controls.len() {
                phase.controls[k]
            } else if !phase.controls.is_empty() {
                phase.controls[phase.controls.len() - 1]
            } else {
                [0.0; 3]
            };
            out.push_str(&format!(
                "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                phase.times[k], x[0], x[1], x[2], x[3], x[4], x[5], x[6], x[7], u[0], u[1], u[2],
            ));
        }
    }
    out
}

fn cmd_trajopt(args: &TrajoptArgs) -> Result<()> {
    write_manifest(&args.common, "trajopt")?;
    let params = PlanarBikeParams::default();
    let problem = match args.preset.as_str() {
        "backflip" => build_backflip_problem(&params, 0.8),
        "rest" => build_rest_problem(&params),
        "flight" => build_flight_problem(
            &params,
            [0.0, 1.0],
            [args.flight_span, 1.0],
            args.flight_duration,
            15,
        ),
        other => return Err(usage(anyhow!("unknown trajopt preset '{other}'"))),
    };
    println!("solving '{}' ({} phases)...", problem.name, problem.phases.len());
    let solution = solve(&problem, None, args.max_iters)?;
    std::fs::write(args.common.out.join("solution.csv"), solution_csv(&solution))?;
    let defects = dynamics_defects(&solution, &problem)?;
    let mut report = format!(
        "converged: {}\nmax defect: {:.3e}\nconstraint violation: {:.3e}\nstationarity: {:.3e}\nobjective: {:.6}\nouter iterations: {}\n",
        solution.converged,
        defects.iter().fold(0.0f64, |a, d| a.max(d.abs())),
        solution.max_constraint_violation,
        solution.stationarity,
        solution.objective,
        solution.outer_iters,
    );
    for (group, value) in constraint_report(&solution, &problem)? {
        report.push_str(&format!("{group}: {value:.3e}\n"));
    }
    std::fs::write(args.common.out.join("defect_report.txt"), &report)?;
    print!("{report}");

    match export_guideline(&solution, &params, args.waypoints, args.margin) {
        Ok((guideline, sequence)) => {
            let mut keys = KeyOrientationSet::default();
            keys.sequences.push(sequence);
            let file = GuidelineFile::from_parts(&problem.name, &guideline, &keys);
            let path = args.common.out.join("guideline.json");
            file.save(&path)?;
            println!("wrote {}", path.display());
        }
        Err(e) if solution.converged => return Err(e.into()),
        Err(_) => {}
    }
    if !solution.converged {
        return Err(anyhow::Error::new(NonConvergence(format!(
            "solver did not converge (violation {:.3e}); best iterate written",
            solution.max_constraint_violation
        ))));
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    write_manifest(&args.common, "train")?;
    let (name, env_cfg) = load_task(&args.preset, &args.guideline, &args.env_config)?;
    let mut config = benchmark_train_config(args.common.seed, args.steps);
    if let Some(envs) = args.envs {
        config.ppo.n_envs = envs;
    }
    config.out_dir = Some(args.common.out.clone());
    config.checkpoint_every_iters = 100;
    println!(
        "training '{name}' for up to {} steps ({} envs, horizon {})",
        args.steps, config.ppo.n_envs, config.ppo.horizon
    );
    let result = train(&env_cfg, &config).map_err(|e| anyhow!("training fault: {e}"))?;
    let last = result.metrics.last();
    println!(
        "done: {} env steps, {} iterations, last return {:.2}, early stop {}",
        result.env_steps,
        result.metrics.len(),
        last.map(|m| m.episode_return_mean).unwrap_or(0.0),
        result.stopped_early,
    );
    println!("checkpoint: {}", args.common.out.join("checkpoint_final.bin").display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    write_manifest(&args.common, "eval")?;
    if !args.checkpoint.exists() {
        return Err(usage(anyhow!("checkpoint {} not found", args.checkpoint.display())));
    }
    let (policy, normalizer) = read_checkpoint(&args.checkpoint)?;
    let (name, env_cfg) = load_task(&args.preset, &args.guideline, &args.env_config)?;
    let metrics = evaluate(&policy, &normalizer, &env_cfg, args.episodes, args.common.seed)?;
    println!("evaluation of '{name}' over {} episodes:", metrics.episodes);
    println!("  stunts attempted:   {}", metrics.stunts_attempted);
    println!("  stunts completed:   {}", metrics.stunts_completed);
    println!("  success rate:       {:.3}", metrics.success_rate);
    println!("  stunts/episode:     {:.2}", metrics.completed_per_episode);
    println!("  mean track error:   {:.3} m", metrics.mean_tracking_error);
    println!("  episode return:     {:.2}", metrics.episode_return_mean);
    println!(
        "  terminations:       guideline {} key {} seq {} fall {} timeout {}",
        metrics.terminations.guideline,
        metrics.terminations.key_orientation,
        metrics.terminations.sequence,
        metrics.terminations.fall,
        metrics.terminations.timeout
    );
    let target: Vec<String> = env_cfg
        .keys
        .position_keys
        .iter()
        .map(|k| {
            let angle = 2.0 * k.q.w.clamp(-1.0, 1.0).acos().to_degrees();
            let sign = if k.q.y < 0.0 { -1.0 } else { 1.0 };
            format!("{:+.1}", sign * angle)
        })
        .collect();
    println!("landing pitch (deg): target [{}]", target.join(", "));
    match metrics.median_landing_pitch_deg {
        Some(median) => {
            println!(
                "                     realized median {median:+.1} over {} landings",
                metrics.landing_pitch_deg.len()
            );
        }
        None => println!("                     no stunt landings recorded"),
    }
    let mut text = serde_json::to_string_pretty(&metrics)?;
    text.push('\n');
    std::fs::write(args.common.out.join("eval.json"), text)?;
    Ok(())
}

fn cmd_trace(args: &TraceArgs) -> Result<()> {
    write_manifest(&args.common, "trace")?;
    if !args.checkpoint.exists() {
        return Err(usage(anyhow!("checkpoint {} not found", args.checkpoint.display())));
    }
    let (policy, normalizer) = read_checkpoint(&args.checkpoint)?;
    let (name, env_cfg) = load_task(&args.preset, &args.guideline, &args.env_config)?;
    let file = GuidelineFile::from_parts(&name, &env_cfg.guideline, &env_cfg.keys);
    file.save(&args.common.out.join("guideline.json"))?;

    let mut env = Env::new(env_cfg.clone(), args.common.seed);
    let mut obs = env.reset(args.common.seed).to_array();
    let mut cache = ForwardCache::default();
    let mut obs_norm = vec![0.0; linelab::env::OBS_DIM];
    let mut trace = EpisodeTrace::new();
    loop {
        normalizer.normalize(&obs, &mut obs_norm);
        let mean = policy.mean_action(&obs_norm, &mut cache);
        let (next, _, done, info) = env.step(&[mean[0], mean[1], mean[2]])?;
        trace.push(
            env.elapsed(),
            env.state(),
            info.mode.unwrap_or(Mode::Driving),
            &info.reward_terms,
            info.base_pos,
        );
        if done {
            break;
        }
        obs = next.to_array();
    }
    let steps = trace.len();
    let path = args.common.out.join("trace.csv");
    std::fs::write(&path, trace.into_csv())?;
    println!("wrote {} ({steps} steps)", path.display());
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::try_parse().map_err(|e| {
        // Help and version displays are success, not usage failures.
        if e.kind() == clap::error::ErrorKind::DisplayHelp
            || e.kind() == clap::error::ErrorKind::DisplayVersion
        {
            e.print().ok();
            std::process::exit(0);
        }
        usage(e)
    })?;
    match &cli.command {
        Command::Guideline(args) => cmd_guideline(args),
        Command::Trajopt(args) => cmd_trajopt(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Trace(args) => cmd_trace(args),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.chain().any(|e| e.is::<UsageError>()) {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
