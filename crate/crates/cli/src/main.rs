use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use learnprox_cli::checks::CheckKind;
use learnprox_cli::commands::{cmd_bench, cmd_check, cmd_solve, cmd_train};
use learnprox_cli::config::PriorKind;
use learnprox_cli::ExperimentConfig;

/// Train a learned projection prior and solve linear inverse problems with it.
#[derive(Debug, Parser)]
#[command(name = "learnprox", version)]
struct Cli {
    /// Experiment file (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed_data: Option<u64>,
    #[arg(long, global = true)]
    seed_operator: Option<u64>,
    #[arg(long, global = true)]
    seed_training: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the projector; writes model.prxa and metrics.csv.
    Train,
    /// Reconstruct one image; writes the image and trace.csv.
    Solve,
    /// Run every configured task and prior over the test images.
    Bench,
    /// Run a self-check suite: adjoint, gradient, wavelet, cg or admm.
    Check { kind: CheckKind },
}

fn run(cli: &Cli) -> learnprox::Result<bool> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed_data {
        cfg.seeds.data = s;
    }
    if let Some(s) = cli.seed_operator {
        cfg.seeds.operator = s;
    }
    if let Some(s) = cli.seed_training {
        cfg.seeds.training = s;
    }
    match &cli.command {
        Command::Train => {
            let r = cmd_train(&cfg, &cli.out, &mut |m| {
                if let Some(v) = m.val_loss {
                    eprintln!("iteration {:>5}  loss {:.4}  val {:.4}", m.iteration, m.projector_loss, v);
                }
            })?;
            println!("model: {}", r.model_path.display());
            println!("metrics: {}", r.metrics_path.display());
            if let (Some(it), Some(v)) = (r.outcome.best_iteration, r.outcome.best_val_loss) {
                println!("best validation loss {v:.6} at iteration {it}");
            }
        }
        Command::Solve => {
            let r = cmd_solve(&cfg, &cli.out)?;
            println!("reconstruction: {}", r.image_path.display());
            println!("trace: {}", r.trace_path.display());
            println!(
                "rho {} measurements {} iterations {} converged {}",
                r.rho, r.measurement_len, r.iterations, r.converged
            );
            if let Some(p) = r.psnr {
                println!("psnr {p:.4} dB");
            }
        }
        Command::Bench => {
            if cfg.bench.priors.contains(&PriorKind::Projector) && cfg.io.model.is_none() {
                eprintln!("warning: no io.model configured; projector rows will record errors");
            }
            let r = cmd_bench(&cfg, &cli.out)?;
            print!("{}", std::fs::read_to_string(&r.bench_path)?);
            println!("timing: {}", r.timing_path.display());
        }
        Command::Check { kind } => {
            let r = cmd_check(*kind, cfg.seeds.operator)?;
            print!("{}", r.render());
            return Ok(r.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
