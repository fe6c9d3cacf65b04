//! `ees`: runs the convergence, training, stability and certification
//! experiments and writes CSV tables, raster grids and a JSON run report.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ees::experiments::{run, ExperimentConfig, ExperimentKind, RunOutput};
use ees::par::Execution;
use ees::stability::Axis;

/// Exit code when a training run records non-finite epochs under
/// `--fail-on-nonfinite`.
const EXIT_NONFINITE: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "ees", version, about = "Explicit effectively symmetric solvers for rough and stochastic differential equations")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration; flags override its values.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    /// Free parameter of EES(2,5;x).
    #[arg(long, global = true, allow_negative_numbers = true)]
    x: Option<f64>,
    /// `sequential` or `parallel`.
    #[arg(long, global = true, value_parser = parse_execution)]
    execution: Option<Execution>,
    /// Exit with status 3 when any training epoch was non-finite.
    #[arg(long, global = true)]
    fail_on_nonfinite: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Forward and backward-recovery error slopes under fBm.
    Convergence {
        #[arg(long)]
        solver: Option<String>,
        /// Comma-separated Hurst indices.
        #[arg(long, value_delimiter = ',')]
        hurst: Option<Vec<f64>>,
        #[arg(long)]
        realizations: Option<usize>,
        /// Comma-separated k with h = t_end 2^-k.
        #[arg(long, value_delimiter = ',')]
        log2_steps: Option<Vec<u32>>,
    },
    /// Latent Langevin SDE fitted to OU moments.
    Ou(Training),
    /// Neural SDE calibrated to GBM call prices.
    Gbm(Training),
    /// Mean-square stability rasters.
    Stability {
        #[arg(long, value_delimiter = ',')]
        tableaux: Option<Vec<String>>,
        /// Grid points per axis.
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Order and effective-symmetry certificates.
    Certify {
        #[arg(long, value_delimiter = ',')]
        tableaux: Option<Vec<String>>,
        #[arg(long)]
        max_order: Option<usize>,
    },
    /// Print the effective configuration as TOML and exit.
    ShowConfig {
        #[arg(default_value = "convergence")]
        experiment: String,
    },
}

#[derive(Args, Debug)]
struct Training {
    /// Comma-separated solver names.
    #[arg(long, value_delimiter = ',')]
    solvers: Option<Vec<String>>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

fn parse_execution(s: &str) -> std::result::Result<Execution, String> {
    match s {
        "sequential" => Ok(Execution::Sequential),
        "parallel" => Ok(Execution::Parallel),
        other => Err(format!("unknown execution policy {other:?}")),
    }
}

fn parse_kind(s: &str) -> Result<ExperimentKind> {
    Ok(match s {
        "convergence" => ExperimentKind::Convergence,
        "ou" => ExperimentKind::Ou,
        "gbm" => ExperimentKind::Gbm,
        "stability" => ExperimentKind::Stability,
        "certify" => ExperimentKind::Certify,
        other => bail!("unknown experiment {other:?}"),
    })
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.common.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    let c = &cli.common;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.output {
        cfg.output = out.clone();
    }
    if let Some(x) = c.x {
        cfg.x = x;
    }
    if let Some(e) = c.execution {
        cfg.execution = e;
    }
    match &cli.command {
        Command::Convergence {
            solver,
            hurst,
            realizations,
            log2_steps,
        } => {
            cfg.experiment = ExperimentKind::Convergence;
            set(&mut cfg.solver, solver);
            set(&mut cfg.convergence.hurst, hurst);
            set(&mut cfg.convergence.realizations, realizations);
            set(&mut cfg.convergence.log2_steps, log2_steps);
        }
        Command::Ou(t) => {
            cfg.experiment = ExperimentKind::Ou;
            set(&mut cfg.ou.solvers, &t.solvers);
            set(&mut cfg.ou.samples, &t.samples);
            set(&mut cfg.ou.epochs, &t.epochs);
            set(&mut cfg.ou.lr, &t.lr);
        }
        Command::Gbm(t) => {
            cfg.experiment = ExperimentKind::Gbm;
            set(&mut cfg.gbm.solvers, &t.solvers);
            set(&mut cfg.gbm.samples, &t.samples);
            set(&mut cfg.gbm.epochs, &t.epochs);
            set(&mut cfg.gbm.lr, &t.lr);
        }
        Command::Stability { tableaux, resolution } => {
            cfg.experiment = ExperimentKind::Stability;
            set(&mut cfg.stability.tableaux, tableaux);
            if let Some(n) = *resolution {
                cfg.stability.x = Axis { resolution: n, ..cfg.stability.x };
                cfg.stability.y = Axis { resolution: n, ..cfg.stability.y };
            }
        }
        Command::Certify { tableaux, max_order } => {
            cfg.experiment = ExperimentKind::Certify;
            set(&mut cfg.certify.tableaux, tableaux);
            set(&mut cfg.certify.max_order, max_order);
        }
        Command::ShowConfig { experiment } => cfg.experiment = parse_kind(experiment)?,
    }
    cfg.validate()?;
    Ok(cfg)
}

fn set<T: Clone>(slot: &mut T, value: &Option<T>) {
    if let Some(v) = value {
        *slot = v.clone();
    }
}

fn summarise(out: &RunOutput) {
    let r = &out.report;
    for t in &r.convergence {
        let fmt = |s: Option<(f64, f64)>| s.map_or("n/a".to_string(), |(a, b)| format!("{a:.3} ± {b:.3}"));
        println!(
            "{} H={}: forward slope {} (expected {:.2}), backward slope {} (expected {:.2})",
            t.scheme,
            t.hurst,
            fmt(t.forward_slope),
            t.expected_forward,
            fmt(t.backward_slope),
            t.expected_backward
        );
    }
    for c in &r.training {
        println!(
            "{}: {} epochs, final loss {:.6e}, non-finite epochs {}",
            c.solver,
            c.epochs.len(),
            c.final_loss(),
            c.nonfinite_epochs
        );
    }
    for s in &r.rasters {
        println!("{} [{}]: stable fraction {:.4}", s.tableau, s.section, s.stable_fraction);
    }
    for c in &r.certificates {
        println!("{}", c.text);
    }
    for t in &r.timings {
        println!("phase {}: {:.2}s", t.phase, t.seconds);
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match real_main(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main(cli: &Cli) -> Result<ExitCode> {
    let cfg = build_config(cli)?;
    if matches!(cli.command, Command::ShowConfig { .. }) {
        print!("{}", cfg.to_toml()?);
        return Ok(ExitCode::SUCCESS);
    }
    let out = run(&cfg).with_context(|| format!("{} run failed", cfg.experiment.name()))?;
    let files = out.write(&cfg.output).with_context(|| format!("writing {}", cfg.output.display()))?;
    summarise(&out);
    println!("wrote {} files to {}", files.len(), cfg.output.display());
    if cli.common.fail_on_nonfinite && out.any_nonfinite() {
        eprintln!("non-finite training epochs recorded");
        return Ok(ExitCode::from(EXIT_NONFINITE));
    }
    Ok(ExitCode::SUCCESS)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(args: &[&str]) -> Result<ExperimentConfig> {
        let cli = Cli::try_parse_from(std::iter::once("ees").chain(args.iter().copied()))?;
        build_config(&cli)
    }

    #[test]
    fn subcommand_sets_experiment_and_overrides() {
        let cfg = config(&["ou", "--samples", "12", "--solvers", "rk4", "--seed", "5", "--x", "-0.2"]).unwrap();
        assert_eq!(cfg.experiment, ExperimentKind::Ou);
        assert_eq!((cfg.ou.samples, cfg.seed, cfg.x), (12, 5, -0.2));
        assert_eq!(cfg.ou.solvers, vec!["rk4".to_string()]);
    }

    #[test]
    fn resolution_applies_to_both_axes() {
        let cfg = config(&["stability", "--resolution", "33"]).unwrap();
        assert_eq!((cfg.stability.x.resolution, cfg.stability.y.resolution), (33, 33));
    }

    #[test]
    fn overrides_are_validated() {
        assert!(config(&["convergence", "--solver", "alf", "--x", "0.5"]).is_err());
        assert!(config(&["gbm", "--solvers", "alf"]).is_err());
        assert!(parse_execution("parallel").is_ok() && parse_execution("both").is_err());
        assert!(parse_kind("certify").is_ok() && parse_kind("other").is_err());
    }
}
