//! `facesim`: seeded, reproducible experiments on adversarial face
//! patches. Subcommands cover each pipeline stage: `synth` (identity
//! assets), `render` (one condition), `fit` (inverse rendering), `attack`
//! (patch crafting), `protocol` (condition-sweep evaluation), and `bench`
//! (the full cross matrix). Outputs are bit-exact across reruns and
//! `--threads` settings.
//!
//! Exit codes: 0 success, 2 bad arguments or config, 3 runtime failure.

mod config;
mod runs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "facesim", version, about = "adversarial face patch simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Rayon worker threads; must not change any output bytes.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write identity parameters, base texture, and shape for a seed.
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Render one identity under an explicit condition.
    Render {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        yaw: f64,
        #[arg(long, default_value_t = 0.0)]
        pitch: f64,
        #[arg(long, default_value_t = 0.0)]
        azimuth: f64,
        #[arg(long, default_value_t = facesim_core::renderer::DEFAULT_AMBIENT)]
        ambient: f64,
        #[arg(long, default_value_t = 112)]
        size: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Fit face parameters to a target image (inverse rendering).
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Craft an adversarial patch texture.
    Attack {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate a texture across a testing-protocol sweep.
    Protocol {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the full craft-and-evaluate benchmark matrix.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn install_thread_pool(threads: Option<usize>) -> anyhow::Result<()> {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow::anyhow!("thread pool: {e}"))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { seed, out } => runs::cmd_synth(seed, &out),
        Command::Render {
            seed,
            yaw,
            pitch,
            azimuth,
            ambient,
            size,
            out,
        } => runs::cmd_render(seed, yaw, pitch, azimuth, ambient, size, &out),
        Command::Fit { config, common } => {
            if let Err(e) = install_thread_pool(common.threads) {
                return fail(e, 2);
            }
            runs::cmd_fit(&config, &common.out)
        }
        Command::Attack { config, common } => {
            if let Err(e) = install_thread_pool(common.threads) {
                return fail(e, 2);
            }
            runs::cmd_attack(&config, &common.out, common.seed)
        }
        Command::Protocol { config, common } => {
            if let Err(e) = install_thread_pool(common.threads) {
                return fail(e, 2);
            }
            runs::cmd_protocol(&config, &common.out, common.seed)
        }
        Command::Bench { config, common } => {
            if let Err(e) = install_thread_pool(common.threads) {
                return fail(e, 2);
            }
            runs::cmd_bench(&config, &common.out, common.seed)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = if err.is_config_error { 2 } else { 3 };
            eprintln!("error: {:#}", err.inner);
            ExitCode::from(code)
        }
    }
}

fn fail(err: anyhow::Error, code: u8) -> ExitCode {
    eprintln!("error: {err:#}");
    ExitCode::from(code)
}
