use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use zofl_core::config::ExperimentConfig;
use zofl_core::harness::{
    default_out_dir, export_plot, run_config, sweep_noise, verify_lemmas, write_outputs, write_sweep, NoiseLevel,
    OUT_DIR_ENV,
};

#[derive(Parser)]
#[command(name = "zofl", version, about = "One-point zero-order federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration (JSON).
    config: PathBuf,
    /// Override a configuration value, e.g. `--set channel.sigma_n=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, env = OUT_DIR_ENV)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let cfg = ExperimentConfig::load(&self.config, &self.overrides)
            .with_context(|| format!("invalid configuration {}", self.config.display()))?;
        for w in cfg.schedule_warnings() {
            eprintln!("warning: step-size schedule violates {w:?}");
        }
        Ok(cfg)
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(default_out_dir)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of an experiment and write metrics plus a summary.
    Run(ConfigArgs),
    /// Check the estimator's bias, second moment and martingale tail.
    VerifyLemmas(ConfigArgs),
    /// Rerun an experiment at several noise variances with retuned constants.
    SweepNoise {
        #[command(flatten)]
        base: ConfigArgs,
        /// Noise variances, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        noise_var: Vec<f64>,
        /// alpha0 per level, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        alpha0: Vec<f64>,
        /// gamma0 per level, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        gamma0: Vec<f64>,
    },
    /// Turn metrics CSVs into per-round mean and standard-deviation curves.
    ExportPlot {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, env = OUT_DIR_ENV)]
        out: Option<PathBuf>,
    },
}

fn run(args: &ConfigArgs) -> Result<ExitCode> {
    let cfg = args.load()?;
    let result = run_config(&cfg)?;
    let path = write_outputs(&result, &args.out_dir())?;
    println!("wrote {} ({} rows)", path.display(), result.rows().len());
    if let (Some(m), Some(s)) = (result.summary.final_mean_accuracy, result.summary.final_std_accuracy) {
        println!("final accuracy {m:.4} ± {s:.4} over {} seeds", cfg.seeds.len());
    }
    Ok(ExitCode::SUCCESS)
}

fn verify(args: &ConfigArgs) -> Result<ExitCode> {
    let cfg = args.load()?;
    let report = verify_lemmas(&cfg)?;
    let path = args.out_dir().join(format!("{}.verify.jsonl", cfg.name));
    report.write_jsonl(&path)?;
    let c = &report.constants;
    println!("c1 = {:.6e}  c2 = {:.6e}  c3 = {:.6e}", c.c1, c.c2, c.c3);
    for e in &report.entries {
        let mark = if e.passed { "PASS" } else { "FAIL" };
        println!("{mark} {:<28} measured {:.6e}  budget {:.6e}", e.check, e.measured, e.budget);
    }
    println!("wrote {}", path.display());
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn sweep(base: &ConfigArgs, noise: &[f64], alpha0: &[f64], gamma0: &[f64]) -> Result<ExitCode> {
    if noise.len() != alpha0.len() || noise.len() != gamma0.len() {
        bail!(
            "--noise-var, --alpha0 and --gamma0 need the same length (got {}, {}, {})",
            noise.len(),
            alpha0.len(),
            gamma0.len()
        );
    }
    let cfg = base.load()?;
    let levels: Vec<NoiseLevel> = noise
        .iter()
        .zip(alpha0)
        .zip(gamma0)
        .map(|((&sigma_n_sq, &alpha0), &gamma0)| NoiseLevel { sigma_n_sq, alpha0, gamma0 })
        .collect();
    let results = sweep_noise(&cfg, &levels)?;
    let path = write_sweep(&cfg, &results, &base.out_dir())?;
    for (level, r) in &results {
        match r.summary.final_mean_accuracy {
            Some(a) => println!("sigma_n^2 = {:<8} final accuracy {a:.4}", level.sigma_n_sq),
            None => println!("sigma_n^2 = {:<8} done", level.sigma_n_sq),
        }
    }
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn export(inputs: &[PathBuf], out: Option<&Path>) -> Result<ExitCode> {
    let dir = out.map(Path::to_path_buf).unwrap_or_else(default_out_dir);
    for path in export_plot(inputs, &dir)? {
        println!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(a) => run(a),
        Command::VerifyLemmas(a) => verify(a),
        Command::SweepNoise { base, noise_var, alpha0, gamma0 } => sweep(base, noise_var, alpha0, gamma0),
        Command::ExportPlot { inputs, out } => export(inputs, out.as_deref()),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
