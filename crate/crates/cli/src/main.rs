use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use neuralmd_cli::{cmd_baseline, cmd_convergence, cmd_diagnose, cmd_evaluate, cmd_reference, cmd_train, CliError, RunConfig, StageSel};

#[derive(Parser)]
#[command(name = "neuralmd", version, about = "Multiscale-decomposition network solver for the nonlinear Klein-Gordon equation")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding `[output] dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Root seed, overriding `[training] seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Verb {
    /// Pseudospectral NKGE, NLSW and NLSE snapshots.
    Reference,
    /// Train the amplitude and/or remainder networks.
    Train {
        #[arg(long, value_enum, default_value = "both")]
        stage: StageArg,
    },
    /// Score trained networks against the reference.
    Evaluate,
    /// Limit-model errors over a range of eps and their fitted orders.
    Convergence,
    /// Train and score the plain MLP baseline.
    Baseline,
    /// Gradient-correlation diagnostics on a trained network.
    Diagnose,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

fn load(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(o) = &cli.out {
        cfg.output.dir = o.to_string_lossy().into_owned();
    }
    if let Some(s) = cli.seed {
        cfg.training.seed = s;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = load(cli)?;
    match &cli.verb {
        Verb::Reference => {
            let r = cmd_reference(&cfg)?;
            if let Some(d) = r.energy_drift {
                println!("energy drift {d:e}");
            }
        }
        Verb::Train { stage } => {
            let sel = match stage {
                StageArg::One => StageSel::One,
                StageArg::Two => StageSel::Two,
                StageArg::Both => StageSel::Both,
            };
            let out = cmd_train(&cfg, sel)?;
            for (name, o) in [("stage 1", &out.stage1), ("stage 2", &out.stage2)] {
                if let Some(o) = o {
                    let last = o.report.rows.last().map_or(f64::NAN, |r| r.loss_total);
                    println!("{name}: {} iterations, final loss {last:.4e}", o.report.rows.len());
                }
            }
        }
        Verb::Evaluate => {
            let ev = cmd_evaluate(&cfg)?;
            println!("selected {:?}: rMAE {:.4e}, rRMSE {:.4e}", ev.selected, ev.selected_metrics.rmae, ev.selected_metrics.rrmse);
        }
        Verb::Convergence => {
            let c = cmd_convergence(&cfg)?;
            for (t, w, s) in &c.orders {
                println!("t = {t}: order {w:.3} (wave limit), {s:.3} (Schrodinger limit)");
            }
        }
        Verb::Baseline => {
            let (_, m) = cmd_baseline(&cfg)?;
            println!("baseline: rMAE {:.4e}, rRMSE {:.4e}", m.rmae, m.rrmse);
        }
        Verb::Diagnose => {
            let d = cmd_diagnose(&cfg)?;
            println!("time-average check: {}/{} conforming samples pass", d.check.passed, d.check.conforming);
        }
    }
    println!("outputs in {}", cfg.output.dir);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
