//! Command-line front-end: dataset synthesis, estimation runs, metric
//! evaluation, and batch execution over a run matrix.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 solver
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gvio::config::Config;
use gvio::eval::PoseSample;
use gvio::pipeline::{
    compute_metrics, match_groundtruth, read_estimate, run_from_dir, run_pipeline, run_metrics,
    synthesize_dataset, write_run_artifacts, Metrics, PipelineError, RunOutput,
};
use gvio::sim::{read_groundtruth_file, write_dataset};

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_SOLVER: u8 = 4;

#[derive(Parser)]
#[command(name = "gvio", version, about = "Monocular VIO with online camera-ground calibration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset directory (imu.csv, features.csv, groundtruth.csv,
    /// cg_truth.csv, config.txt) from a config file.
    Simulate {
        /// Config file (sectioned key = value text).
        #[arg(long)]
        config: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the estimator on a dataset directory and emit estimate.csv,
    /// metrics.json and plots/.
    Run {
        /// Config file controlling the estimator (sim section is ignored;
        /// the dataset's own config supplies truth values).
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory produced by `simulate`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for run artifacts.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score an existing estimate.csv against a groundtruth.csv.
    Evaluate {
        /// Estimate file (estimate.csv schema).
        #[arg(long)]
        est: PathBuf,
        /// Ground-truth file (groundtruth.csv schema).
        #[arg(long)]
        gt: PathBuf,
        /// Output directory for metrics.json and plots/.
        #[arg(long)]
        out: PathBuf,
    },
    /// Execute a matrix of (name, config, seed) runs concurrently.
    /// Matrix file lines: `name config_path seed` (# starts a comment).
    Batch {
        /// Run-matrix file.
        #[arg(long)]
        matrix: PathBuf,
        /// Root directory for per-run artifact directories (default:
        /// alongside the matrix file).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Configuration helpers.
    Config {
        /// Print the built-in defaults as a parseable config file.
        #[arg(long)]
        print_defaults: bool,
    },
}

fn exit_for(err: &PipelineError) -> u8 {
    match err {
        PipelineError::Config(_) | PipelineError::Sim(_) => EXIT_CONFIG,
        PipelineError::Data(_) | PipelineError::Imu(_) | PipelineError::Io(..) => EXIT_DATA,
    }
}

fn fail(err: &PipelineError) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(exit_for(err))
}

fn load_config(path: &Path) -> Result<Config, PipelineError> {
    Ok(Config::from_file(path)?)
}

fn cmd_simulate(config: &Path, out: &Path) -> ExitCode {
    let cfg = match load_config(config) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    let ds = match synthesize_dataset(&cfg) {
        Ok(d) => d,
        Err(e) => return fail(&e),
    };
    if let Err(e) = write_dataset(out, &ds) {
        return fail(&PipelineError::Data(e));
    }
    println!(
        "wrote dataset: {} imu samples, {} frames, {:.1} s -> {}",
        ds.imu.len(),
        ds.frames.len(),
        cfg.sim.duration_s,
        out.display()
    );
    ExitCode::SUCCESS
}

fn report_run(name: &str, run: &RunOutput, metrics: &Metrics) {
    let cg = metrics
        .cg_final
        .map(|(h, th, al)| format!("cg=({h:.4} m, {th:.3} deg, {al:.3} deg)"))
        .unwrap_or_else(|| "cg inactive".into());
    let rel = metrics
        .relative
        .as_ref()
        .map(|r| format!("t_rel={:.3}% r_rel={:.4} deg/100m", r.t_rel_pct, r.r_rel_deg_per_100m))
        .unwrap_or_else(|| "no relative errors".into());
    println!(
        "{name}: {} poses over {:.1} m, {rel}, {cg}{}",
        metrics.n_poses,
        metrics.path_length_m,
        run.failure.as_deref().map(|f| format!(" [FAILED: {f}]")).unwrap_or_default()
    );
}

fn cmd_run(config: &Path, data: &Path, out: &Path) -> ExitCode {
    let cfg = match load_config(config) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    match run_from_dir(&cfg, data, out) {
        Ok((run, metrics)) => {
            report_run("run", &run, &metrics);
            if run.aborted || run.failure.is_some() {
                ExitCode::from(EXIT_SOLVER)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => fail(&e),
    }
}

fn path_length(poses: &[PoseSample]) -> f64 {
    poses.windows(2).map(|w| (w[1].p - w[0].p).norm()).sum()
}

fn cmd_evaluate(est_path: &Path, gt_path: &Path, out: &Path) -> ExitCode {
    let est = match read_estimate(est_path) {
        Ok(e) => e,
        Err(e) => return fail(&e),
    };
    let gt_records = match read_groundtruth_file(gt_path) {
        Ok(g) => g,
        Err(e) => return fail(&PipelineError::Data(e)),
    };
    let Some(gt) = match_groundtruth(&gt_records, &est) else {
        eprintln!(
            "error: {}: no ground-truth record matches every estimate timestamp in {}",
            gt_path.display(),
            est_path.display()
        );
        return ExitCode::from(EXIT_DATA);
    };
    let eval_cfg = Config::default().eval;
    let (relative, relative_note, ate, _) = compute_metrics(&est, Some(&gt), None, &eval_cfg);
    let duration = match (est.poses.first(), est.poses.last()) {
        (Some(a), Some(b)) => b.t - a.t,
        _ => 0.0,
    };
    let metrics = Metrics {
        mode: "evaluate".into(),
        n_poses: est.poses.len(),
        duration_s: duration,
        path_length_m: path_length(&est.poses),
        aborted: false,
        failure: None,
        relative,
        relative_note,
        ate,
        init_t: None,
        cg_activation_t: None,
        cg_final: est
            .cg_series
            .last()
            .map(|(_, cg, _)| (cg.h, cg.theta.to_degrees(), cg.alpha.to_degrees())),
        cg_convergence: None,
        cg_attempts: 0,
        cg_last_status: None,
        solver_total_iterations: 0,
        solver_frames: 0,
        dropped_observations: 0,
        disabled_depth_factors: 0,
        gated_cg_factors: 0,
        marginalization_regularized: 0,
        covariance_failures: 0,
    };
    if let Err(e) = write_run_artifacts(out, &est, &metrics, &[], Some(&gt), None) {
        return fail(&e);
    }
    let rel = metrics
        .relative
        .as_ref()
        .map(|r| format!("t_rel={:.3}% r_rel={:.4} deg/100m", r.t_rel_pct, r.r_rel_deg_per_100m))
        .unwrap_or_else(|| {
            metrics.relative_note.clone().unwrap_or_else(|| "no relative errors".into())
        });
    let ate = metrics
        .ate
        .as_ref()
        .map(|a| format!("ate={:.4} m", a.rmse_m))
        .unwrap_or_else(|| "no ate".into());
    println!("evaluate: {} poses, {rel}, {ate} -> {}", metrics.n_poses, out.display());
    ExitCode::SUCCESS
}

struct BatchEntry {
    name: String,
    config: PathBuf,
    seed: u64,
}

fn parse_matrix(path: &Path) -> Result<Vec<BatchEntry>, String> {
    let text =
        std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(format!(
                "{}:{}: expected `name config_path seed`, got {} fields",
                path.display(),
                i + 1,
                fields.len()
            ));
        }
        let seed: u64 = fields[2].parse().map_err(|e| {
            format!("{}:{}: bad seed {:?}: {e}", path.display(), i + 1, fields[2])
        })?;
        let config = base.join(fields[1]);
        entries.push(BatchEntry { name: fields[0].to_string(), config, seed });
    }
    if entries.is_empty() {
        return Err(format!("{}: no runs in matrix", path.display()));
    }
    let mut names: Vec<&str> = entries.iter().map(|e| e.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(format!("{}: duplicate run names", path.display()));
    }
    Ok(entries)
}

fn batch_one(entry: &BatchEntry, out_root: &Path) -> Result<(RunOutput, Metrics), PipelineError> {
    let mut cfg = Config::from_file(&entry.config)?;
    cfg.sim.seed = entry.seed;
    let ds = synthesize_dataset(&cfg)?;
    let run = run_pipeline(&cfg, &ds)?;
    let gt = match_groundtruth(&ds.groundtruth, &run.estimate);
    let cg_truth = cfg.sim.cg_true();
    let metrics = run_metrics(&cfg, &run, gt.as_deref(), Some(&cg_truth));
    write_run_artifacts(
        &out_root.join(&entry.name),
        &run.estimate,
        &metrics,
        &run.frame_log,
        gt.as_deref(),
        Some(&cg_truth),
    )?;
    Ok((run, metrics))
}

fn cmd_batch(matrix: &Path, out: Option<&Path>) -> ExitCode {
    let entries = match parse_matrix(matrix) {
        Ok(e) => e,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let out_root = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| matrix.parent().unwrap_or_else(|| Path::new(".")).join("batch_out"));
    let n_workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut results: Vec<Option<Result<(RunOutput, Metrics), PipelineError>>> = Vec::new();
    results.resize_with(entries.len(), || None);
    let results = std::sync::Mutex::new(results);
    std::thread::scope(|scope| {
        for _ in 0..n_workers.min(entries.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some(entry) = entries.get(i) else { break };
                let res = batch_one(entry, &out_root);
                results.lock().unwrap()[i] = Some(res);
            });
        }
    });
    let results = results.into_inner().unwrap();
    let mut worst: u8 = 0;
    for (entry, res) in entries.iter().zip(results) {
        match res.expect("worker filled every slot") {
            Ok((run, metrics)) => {
                report_run(&entry.name, &run, &metrics);
                if run.aborted || run.failure.is_some() {
                    worst = worst.max(EXIT_SOLVER);
                }
            }
            Err(e) => {
                eprintln!("{}: error: {e}", entry.name);
                worst = worst.max(exit_for(&e));
            }
        }
    }
    if worst == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(worst)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate { config, out } => cmd_simulate(&config, &out),
        Command::Run { config, data, out } => cmd_run(&config, &data, &out),
        Command::Evaluate { est, gt, out } => cmd_evaluate(&est, &gt, &out),
        Command::Batch { matrix, out } => cmd_batch(&matrix, out.as_deref()),
        Command::Config { print_defaults } => {
            if print_defaults {
                print!("{}", Config::default().to_text());
                ExitCode::SUCCESS
            } else {
                eprintln!("error: `config` requires --print-defaults");
                ExitCode::from(EXIT_CONFIG)
            }
        }
    }
}
