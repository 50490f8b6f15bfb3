use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use patchwise_cli::{cmd_generate, load_config, Overrides};

#[derive(Parser)]
#[command(
    name = "patchwise",
    version,
    about = "Patch-based cascaded diffusion sampling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a generation described by a config file.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let Command::Generate {
        config,
        seed,
        out,
        report,
    } = cli.command;
    let overrides = Overrides { seed, out, report };
    let result = load_config(&config, &overrides).and_then(|cfg| cmd_generate(&cfg));
    match result {
        Ok(done) => {
            for path in &done.images {
                println!("wrote {}", path.display());
            }
            println!("wrote {}", done.report_path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
