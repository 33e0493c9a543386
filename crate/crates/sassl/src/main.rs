use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sassl::commands;
use sassl::config::{RunConfig, OUT_ENV};
use sassl::{CliError, Run};

#[derive(Parser)]
#[command(
    name = "sassl",
    version,
    about = "Stain-adaptive self-supervised learning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; defaults to the `out` key, then $SASSL_OUT/<config stem>.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset to PPM/PGM files and a CSV index.
    Synth(Common),
    /// Pretrain the encoder, with or without the stain discriminator.
    Pretrain(Common),
    /// Fine-tune the dual encoder and a task head.
    Finetune(Common),
    /// Linear stain and content probes on held-out patches.
    Probe(Common),
    /// Score the fine-tuned model on held-out patches.
    Eval(Common),
    /// Compare finished runs.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run directories; adds to `[report] runs`.
        runs: Vec<PathBuf>,
    },
}

fn setup(c: &Common) -> Result<Run, CliError> {
    let mut config = RunConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        config.seed = seed;
    }
    let env = std::env::var_os(OUT_ENV).map(PathBuf::from);
    let out = config.resolve_out(c.out.as_deref(), env.as_deref(), &c.config)?;
    Ok(Run::new(config, out))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(c) => {
            let run = setup(&c)?;
            let index = commands::synth(&run)?;
            println!("wrote {}", index.display());
        }
        Command::Pretrain(c) => {
            let run = setup(&c)?;
            let ckpt = commands::pretrain(&run)?;
            println!(
                "pretrained {} steps, checkpoint in {}",
                ckpt.step,
                run.out.join(commands::PRETRAIN_DIR).display()
            );
        }
        Command::Finetune(c) => {
            let run = setup(&c)?;
            let ckpt = commands::finetune(&run)?;
            println!(
                "fine-tuned {} steps, checkpoint in {}",
                ckpt.step,
                run.out.join(commands::FINETUNE_DIR).display()
            );
        }
        Command::Probe(c) => {
            let run = setup(&c)?;
            let r = commands::probe(&run)?;
            println!(
                "stain probe {:.4} (chance {:.4}), content probe {:.4} (chance {:.4})",
                r.stain.accuracy, r.stain_chance, r.content.accuracy, r.content_chance
            );
        }
        Command::Eval(c) => {
            let run = setup(&c)?;
            print!("{}", commands::eval(&run)?.to_markdown());
        }
        Command::Report { common, runs } => {
            let run = setup(&common)?;
            let mut dirs = run.config.report.runs.clone();
            dirs.extend(runs);
            print!("{}", commands::report(&run, &dirs)?.to_markdown());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
