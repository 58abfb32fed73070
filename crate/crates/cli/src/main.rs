use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dscp::verify::Level;
use dscp_cli::{CliError, CliResult, RunConfig, EXIT_OK};

#[derive(Parser)]
#[command(name = "dscp", version, about = "Distributed coupled-policy gradient experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VerifyLevel {
    Quick,
    Full,
}

#[derive(clap::Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// `key.path=value` override; the value is parsed as JSON when possible.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Replace the configured seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> CliResult<RunConfig> {
        let mut cfg = dscp_cli::load_config(&self.config, &self.overrides)?;
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per seed.
    Train {
        #[command(flatten)]
        args: ConfigArgs,
        /// Write every rollout as JSON lines to `rollouts_seed<k>.jsonl`.
        #[arg(long)]
        dump_rollouts: bool,
    },
    /// Run the oracle-backed self-checks.
    Verify {
        #[arg(value_enum, default_value = "quick")]
        level: VerifyLevel,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train every seed for each policy radius in the list.
    Sweep {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long = "kappa-p", value_delimiter = ',', allow_negative_numbers = true, required = true)]
        kappa_p: Vec<i64>,
    },
    /// Evaluate a saved checkpoint.
    Eval {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
    },
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { args, dump_rollouts } => {
            let cfg = args.load()?;
            let summary = dscp_cli::train(&cfg, &cfg.out_dir, dump_rollouts)?;
            print_json(&summary.runs);
        }
        Command::Verify { level, seed } => {
            let level = match level {
                VerifyLevel::Quick => Level::Quick,
                VerifyLevel::Full => Level::Full,
            };
            let report = dscp_cli::run_verify(level, seed);
            print_json(&report);
            if !report.passed {
                return Err(CliError::VerifyFailed);
            }
        }
        Command::Sweep { args, kappa_p } => {
            let kappas = dscp_cli::parse_kappa_list(&kappa_p)?;
            let cfg = args.load()?;
            let summary = dscp_cli::sweep(&cfg, &kappas, &cfg.out_dir)?;
            print_json(&summary);
        }
        Command::Eval { args, checkpoint, episodes } => {
            let cfg = args.load()?;
            let e = dscp_cli::eval(&cfg, &checkpoint, episodes, cfg.seeds[0])?;
            print_json(&serde_json::json!({ "J": e.mean, "se": e.se, "episodes": e.episodes }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NMARL_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("dscp: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
