use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use patchcanvas_cli::{cmd_bench, cmd_eval, cmd_sample, cmd_train, exit_code};
use patchcanvas_core::{Error, Result, RunConfig};

/// Random-patch diffusion sampling, cost model, training and evaluation.
#[derive(Parser)]
#[command(name = "patchcanvas", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads. Outputs do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate canvases (mask, sampling, tiled decode).
    Sample(Common),
    /// Write the denoiser-call and critical-path cost table.
    Bench(Common),
    /// Fidelity and memorization metrics of a generated set.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory of real `*.dinf` tensors.
        #[arg(long)]
        real: PathBuf,
        /// Directory of generated `*.dinf` tensors.
        #[arg(long)]
        gen: PathBuf,
    },
    /// Train the affine toy denoiser.
    Train(Common),
}

fn load(common: &Common) -> Result<(RunConfig, PathBuf, PathBuf)> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let base = common.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let out = match &common.out {
        Some(o) => o.clone(),
        None => base.join(&cfg.output_dir),
    };
    Ok((cfg, base, out))
}

fn run(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Command::Sample(c) | Command::Bench(c) | Command::Train(c) => c,
        Command::Eval { common, .. } => common,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(common.threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("--threads: {e}")))?;
    let (cfg, base, out) = load(common)?;
    let report = pool.install(|| -> Result<String> {
        Ok(match &cli.command {
            Command::Sample(_) => {
                let s = cmd_sample(&cfg, &out, &base)?;
                format!("wrote {} files to {}\n", s.files.len() + 1, out.display())
            }
            Command::Bench(_) => cmd_bench(&cfg, &out)?,
            Command::Train(_) => {
                let s = cmd_train(&cfg, &out)?;
                format!(
                    "final loss {:.6}, relative MSE against the analytic denoiser {:.4}\n",
                    s.final_loss, s.relative_oracle_mse
                )
            }
            Command::Eval { real, gen, .. } => {
                format!("{}\n", serde_json::to_string_pretty(&cmd_eval(&cfg, real, gen, &out)?)?)
            }
        })
    })?;
    // A closed pipe (`| head`) is not a failure: the outputs are on disk.
    match std::io::stdout().write_all(report.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PATCHCANVAS_LOG", "error")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
