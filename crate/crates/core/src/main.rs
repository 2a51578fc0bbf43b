use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

/// Sector-masked latent diffusion workbench: phantom data, gamma-VAE,
/// SPADE diffusion, ODE samplers, downstream evaluation, and benchmarks.
#[derive(Parser)]
#[command(name = "gammaldm", version, about)]
struct Args {
    /// Subcommand: phantom-gen | fit-prior | train-vae | train-diffusion |
    /// generate | train-downstream | eval | bench | order-probe | report
    command: String,

    /// Path to a key=value config file
    #[arg(long)]
    config: Option<PathBuf>,

    /// Global seed (overrides the config's `seed`)
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,

    /// Repeatable key=value config override
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let code = gammaldm::cli::cli(
        &args.command,
        args.config.as_deref(),
        &args.overrides,
        args.seed,
        args.out.as_deref(),
    );
    ExitCode::from(code as u8)
}
