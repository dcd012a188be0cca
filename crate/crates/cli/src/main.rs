use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dfr_core::harness::{
    generate_synthetic, load_features, load_synthetic_spec, load_train_config, read_checkpoint, write_ablation,
    write_checkpoint, write_features, write_metrics,
};
use dfr_core::trainer::{ablation_suite, evaluate, train};
use dfr_core::{Error, Result};

#[derive(Parser)]
#[command(name = "dfr", version, about = "Feature-space domain adaptation by feature registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic source/target pair.
    Gen {
        /// Synthetic benchmark spec (`key = value` lines).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_source: PathBuf,
        #[arg(long)]
        out_target: PathBuf,
        /// Overrides the seed in the spec file.
        #[arg(long)]
        seed: u64,
    },
    /// Train on a labeled source and an unlabeled target.
    Train {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_metrics: PathBuf,
        #[arg(long)]
        out_checkpoint: PathBuf,
        #[arg(long)]
        disable_registration: bool,
        #[arg(long)]
        disable_histogram: bool,
        #[arg(long)]
        disable_pseudo: bool,
    },
    /// Report accuracy of a checkpoint on a labeled file, or print
    /// predictions for an unlabeled one.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train all eight loss-toggle variants and write their target accuracy.
    Ablate {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Data(_) => 3,
        Error::Numeric(_) => 4,
        Error::Io { .. } => 5,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen {
            spec,
            out_source,
            out_target,
            seed,
        } => {
            let mut spec = load_synthetic_spec(&spec)?;
            spec.seed = seed;
            let (source, target) = generate_synthetic(&spec)?;
            write_features(&source, &out_source)?;
            write_features(&target, &out_target)?;
            println!(
                "wrote {} source and {} target samples ({} classes, {} features)",
                source.len(),
                target.len(),
                spec.classes,
                spec.dim
            );
        }
        Command::Train {
            source,
            target,
            config,
            out_metrics,
            out_checkpoint,
            disable_registration,
            disable_histogram,
            disable_pseudo,
        } => {
            let base = load_train_config(&config)?;
            let cfg = base.with_toggles(
                base.enable_registration && !disable_registration,
                base.enable_histogram && !disable_histogram,
                base.enable_pseudo && !disable_pseudo,
            );
            let source = load_features(&source)?;
            let target = load_features(&target)?;
            let (params, history) = train(&cfg, &source, &target)?;
            write_metrics(&history, &out_metrics)?;
            write_checkpoint(&params, &out_checkpoint)?;
            match history.epochs.last().and_then(|r| r.target_accuracy) {
                Some(acc) => println!("trained {} epochs; target accuracy {acc:.4}", history.epochs.len()),
                None => println!("trained {} epochs", history.epochs.len()),
            }
        }
        Command::Eval { checkpoint, data } => {
            let params = read_checkpoint(&checkpoint)?;
            let data = load_features(&data)?;
            if data.labels.is_some() {
                let eval = evaluate(&params, &data)?;
                println!("accuracy {:.6}", eval.accuracy);
                for (c, acc) in eval.per_class.iter().enumerate() {
                    match acc {
                        Some(a) => println!("class {c} {a:.6}"),
                        None => println!("class {c} -"),
                    }
                }
            } else {
                let logits = params.predict(&data.features)?;
                println!("prediction");
                for r in 0..logits.rows() {
                    println!("{}", logits.row_argmax(r));
                }
            }
        }
        Command::Ablate {
            source,
            target,
            config,
            out,
        } => {
            let cfg = load_train_config(&config)?;
            let source = load_features(&source)?;
            let target = load_features(&target)?;
            let rows = ablation_suite(&cfg, &source, &target)?;
            write_ablation(&rows, &out)?;
            for r in &rows {
                println!("{:<10} {:.4}", r.variant, r.accuracy);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("dfr: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
