use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cotrain_cli::run;
use cotrain_cli::{CliResult, ExperimentConfig};
use cotrain_core::trainer::Method;

#[derive(Parser)]
#[command(name = "cotrain", version, about = "Deep co-training for semi-supervised segmentation")]
struct Cli {
    /// Configuration file; defaults apply to every key it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding `[experiment] out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Training seed, overriding `[train] seed` and the ablation seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Method tag, overriding `[train] method` and the ablation methods.
    #[arg(long, global = true)]
    method: Option<Method>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset to disk.
    GenData,
    /// Train one run and write records and checkpoints.
    Train,
    /// Score the final checkpoints and print a per-class CSV table.
    Evaluate,
    /// Train every cell of the ablation grid and summarize.
    Ablate,
    /// Run the diversity-only probe against a fully supervised reference.
    Probe,
    /// Summarize record files: mean and std per group, plus plot series.
    Summarize {
        #[arg(required = true)]
        records: Vec<PathBuf>,
    },
    /// Print the configuration with every key and its value.
    ShowConfig,
}

fn execute(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    run::apply_overrides(&mut cfg, cli.out, cli.seed, cli.method);
    cfg.validate()?;
    match cli.command {
        Command::GenData => {
            let dir = run::gen_data(&cfg)?;
            println!("{}", dir.display());
        }
        Command::Train => {
            let out = run::train_run(&cfg)?;
            if let Some(r) = out.records.last() {
                println!("epoch {} dsc_avg {} dsc_vote {}", r.epoch, r.dsc_avg_mean(), r.dsc_vote_mean());
            }
        }
        Command::Evaluate => print!("{}", run::evaluate_run(&cfg)?.1),
        Command::Ablate => {
            for g in run::ablate(&cfg)? {
                let (m, s) = g.stat("dsc_vote_mean").unwrap_or((f64::NAN, f64::NAN));
                println!("{}: dsc_vote {m:.2} ({s:.2}) over {} runs", g.group, g.runs);
            }
        }
        Command::Probe => {
            for c in run::probe(&cfg)? {
                println!("eps {}: reference {:.2}, final gap {:.2}", c.eps, c.reference_dsc, c.final_gap());
            }
        }
        Command::Summarize { records } => {
            for g in run::summarize(&cfg, &records)? {
                let (m, s) = g.stat("dsc_vote_mean").unwrap_or((f64::NAN, f64::NAN));
                println!("{}: dsc_vote {m:.2} ({s:.2}) over {} runs", g.group, g.runs);
            }
        }
        Command::ShowConfig => print!("{}", cfg.to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    cotrain_cli::tune_allocator();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
