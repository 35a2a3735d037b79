//! Command-line driver. Every subcommand reads one TOML config (defaults
//! apply when omitted) plus dotted `--set key=value` overrides; `--seed`
//! is shorthand for `--set run.seed=N`. Exit code 0 on success; failures
//! print one structured `error: ...` line on stderr and exit nonzero.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ctrldiff::config::Config;
use ctrldiff::data::run_gen_data;
use ctrldiff::eval::{run_ablate, run_evaluate, run_study};
use ctrldiff::plot::run_plot;
use ctrldiff::training::{run_finetune, run_train_base, run_train_controlnet, run_train_probe};

#[derive(Parser)]
#[command(name = "ctrldiff", about = "Desk-scale controllable diffusion lab", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. --set train.lr=1e-4 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for --set run.seed=N.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic train/eval datasets.
    GenData(Common),
    /// Pretrain the base diffusion model.
    TrainBase(Common),
    /// Pretrain the control branch on a frozen base.
    TrainControlnet(Common),
    /// Train a readout probe on a frozen checkpoint.
    TrainProbe(Common),
    /// Fine-tune the control branch with reward + alignment losses.
    Finetune(Common),
    /// Evaluate a checkpoint: control metrics + toy fidelity.
    Evaluate(Common),
    /// Probe-vs-one-step control recovery across timesteps.
    StudyTimesteps(Common),
    /// Threshold ablation grid: finetune + evaluate per grid point.
    Ablate(Common),
    /// Render a CSV as an SVG line chart.
    Plot(Common),
}

fn load_config(common: &Common) -> ctrldiff::Result<Config> {
    let mut overrides: Vec<(String, String)> = Vec::new();
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| {
            ctrldiff::Error::Config(format!("--set expects KEY=VALUE, got '{kv}'"))
        })?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = common.seed {
        overrides.push(("run.seed".into(), seed.to_string()));
    }
    match &common.config {
        Some(path) => Config::load(path, &overrides),
        None => Config::from_toml_str("", &overrides),
    }
}

macro_rules! with_precision {
    ($cfg:expr, $fn:ident) => {
        match $cfg.run.precision.as_str() {
            "f64" => $fn::<f64>(&$cfg),
            _ => $fn::<f32>(&$cfg),
        }
    };
}

fn run(cmd: &Cmd) -> ctrldiff::Result<()> {
    match cmd {
        Cmd::GenData(c) => {
            let cfg = load_config(c)?;
            let (train, eval) = run_gen_data(&cfg)?;
            println!(
                "wrote {} ({} records) and {} ({} records)",
                train.display(),
                cfg.data.count,
                eval.display(),
                cfg.data.eval_count
            );
        }
        Cmd::TrainBase(c) => {
            let cfg = load_config(c)?;
            let out = with_precision!(cfg, run_train_base)?;
            println!("checkpoint: {}", out.final_ckpt.display());
            println!("log: {}", out.csv_path.display());
        }
        Cmd::TrainControlnet(c) => {
            let cfg = load_config(c)?;
            let out = with_precision!(cfg, run_train_controlnet)?;
            println!("checkpoint: {}", out.final_ckpt.display());
            println!("log: {}", out.csv_path.display());
        }
        Cmd::TrainProbe(c) => {
            let cfg = load_config(c)?;
            let out = with_precision!(cfg, run_train_probe)?;
            println!("probe checkpoint: {}", out.ckpt_dir.display());
            for b in &out.log.buckets {
                println!("bucket t in [{}, {}]: holdout rmse {:.6}", b.t_lo, b.t_hi, b.rmse);
            }
        }
        Cmd::Finetune(c) => {
            let cfg = load_config(c)?;
            let out = with_precision!(cfg, run_finetune)?;
            println!("checkpoint: {}", out.final_ckpt.display());
            println!("log: {}", out.csv_path.display());
        }
        Cmd::Evaluate(c) => {
            let cfg = load_config(c)?;
            let (report, dir) = with_precision!(cfg, run_evaluate)?;
            // depth RMSE is reported x100 for readability
            match report.metric_name.as_str() {
                "rmse" => println!(
                    "control rmse (x100): {:.4} over {} seeds",
                    report.metric * 100.0,
                    report.seeds.len()
                ),
                _ => println!(
                    "control ssim: {:.4} over {} seeds",
                    report.metric,
                    report.seeds.len()
                ),
            }
            println!("toy fidelity: {:.6}", report.toy_fidelity);
            println!("report: {}", dir.display());
        }
        Cmd::StudyTimesteps(c) => {
            let cfg = load_config(c)?;
            let (rows, dir) = with_precision!(cfg, run_study)?;
            println!("{} study rows written under {}", rows.len(), dir.display());
        }
        Cmd::Ablate(c) => {
            let cfg = load_config(c)?;
            let (rows, dir) = with_precision!(cfg, run_ablate)?;
            for r in &rows {
                println!(
                    "align {} / reward {}: {} = {:.6}, fidelity = {:.6}",
                    r.steps_align, r.steps_reward, r.metric_name, r.metric, r.toy_fidelity
                );
            }
            println!("table: {}", dir.join("ablation.csv").display());
        }
        Cmd::Plot(c) => {
            let cfg = load_config(c)?;
            let out = run_plot(&cfg)?;
            println!("plot: {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
