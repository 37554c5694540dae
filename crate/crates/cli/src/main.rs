//! `kdv-mz`: command-line driver for the KdV Mori-Zwanzig experiments.
//!
//! Exit status: 0 success, 1 usage or configuration error, 2 numerical
//! failure (blow-up, singular fit), 3 I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kdv_mz::experiment::{
    cmd_compare, cmd_derive, cmd_fit, cmd_run_rom, cmd_scaling, cmd_solve_full, summarize_fit,
    CoefficientSource, ExperimentConfig, InitialCondition, ModelKind,
};
use kdv_mz::Error;

#[derive(Parser, Debug)]
#[command(
    name = "kdv-mz",
    version,
    about = "Renormalized Mori-Zwanzig reduced models for KdV"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Integrate the fully resolved model and write trajectories and a
    /// conservation report.
    SolveFull(Common),
    /// Fit renormalization coefficients on every (epsilon, N) and, with
    /// three or more points, the scaling laws.
    Fit(Common),
    /// Refit scaling laws from the coefficient database.
    Scaling(Common),
    /// Integrate one reduced model for every (epsilon, N).
    RunRom(Common),
    /// Compare reduced models against the full model.
    Compare(Common),
    /// Write the symbolic memory terms and the equivalence report.
    Derive(Common),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// TOML or JSON configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dispersion parameter(s), comma separated.
    #[arg(long, value_delimiter = ',')]
    epsilon: Vec<f64>,
    /// Resolved mode count(s) N, comma separated.
    #[arg(long, value_delimiter = ',')]
    n_resolved: Vec<usize>,
    /// Modes of the full model.
    #[arg(long)]
    m_full: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    t_end: Option<f64>,
    /// Fit window as `t_a,t_b`.
    #[arg(long, value_parser = parse_window)]
    window: Option<(f64, f64)>,
    /// Highest order: fitted orders for `fit`, model order for `run-rom`,
    /// derivation order for `derive`.
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `sin` or `k:re[:im],...`.
    #[arg(long)]
    ic: Option<String>,
    /// Models for `compare`, comma separated.
    #[arg(long, value_delimiter = ',')]
    models: Vec<String>,
    /// Use every n-th step in the fit window.
    #[arg(long)]
    stride: Option<usize>,
    /// `auto`, `fitted` or `scaling`.
    #[arg(long)]
    coefficients: Option<String>,
    /// Integrate the model without renormalization (`run-rom`).
    #[arg(long)]
    raw: bool,
    /// Write the per-mode mass-rate datasets (`fit`).
    #[arg(long)]
    export_datasets: bool,
    #[arg(long)]
    database: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

fn parse_window(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected `t_a,t_b`, got `{s}`"))?;
    let parse = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("`{x}`: {e}"));
    Ok((parse(a)?, parse(b)?))
}

enum Verb {
    Fit,
    RunRom,
    Derive,
    Other,
}

fn build_config(c: &Common, verb: Verb) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if !c.epsilon.is_empty() {
        cfg.epsilons = c.epsilon.clone();
    }
    if !c.n_resolved.is_empty() {
        cfg.n_grid = c.n_resolved.clone();
    }
    if let Some(m) = c.m_full {
        cfg.m_full = m;
    }
    if let Some(dt) = c.dt {
        cfg.dt = dt;
    }
    if let Some(t) = c.t_end {
        cfg.t_end = t;
    }
    if let Some(w) = c.window {
        cfg.window = w;
    }
    if let Some(out) = &c.out {
        cfg.out = out.clone();
    }
    if let Some(ic) = &c.ic {
        cfg.initial_condition = ic.parse::<InitialCondition>()?;
    }
    if !c.models.is_empty() {
        cfg.models = c
            .models
            .iter()
            .map(|m| m.parse::<ModelKind>())
            .collect::<Result<_, _>>()?;
    }
    if let Some(s) = c.stride {
        cfg.stride = s;
    }
    if let Some(s) = &c.coefficients {
        cfg.coefficient_source = s.parse::<CoefficientSource>()?;
    }
    if c.raw {
        cfg.renormalized = false;
    }
    if c.export_datasets {
        cfg.export_datasets = true;
    }
    if let Some(d) = &c.database {
        cfg.database = Some(d.clone());
    }
    if let Some(w) = c.workers {
        cfg.workers = w;
    }
    if let Some(order) = c.order {
        match verb {
            Verb::Fit => cfg.fit_orders = (1..=order).collect(),
            Verb::RunRom => cfg.rom_order = order,
            Verb::Derive => cfg.derive_order = order,
            Verb::Other => {}
        }
    }
    Ok(cfg)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::BlowUp { .. } | Error::SingularFit(_) | Error::SignInconsistency(_) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::SolveFull(c) => {
            let r = cmd_solve_full(&build_config(&c, Verb::Other)?)?;
            for run in &r.runs {
                println!(
                    "eps {}: {} steps, {} snapshots, max relative mass drift {:.3e}",
                    run.epsilon, run.steps, run.snapshots, run.max_mass_drift
                );
            }
            println!("config_hash {}", r.config_hash);
        }
        Command::Fit(c) => {
            let r = cmd_fit(&build_config(&c, Verb::Fit)?)?;
            print!("{}", summarize_fit(&r));
            println!(
                "{} new record(s) in {}; config_hash {}",
                r.new_records,
                r.database.display(),
                r.config_hash
            );
        }
        Command::Scaling(c) => {
            let r = cmd_scaling(&build_config(&c, Verb::Other)?)?;
            for l in &r.laws {
                match (&l.law, &l.error) {
                    (Some(law), _) => println!(
                        "{} order {}: a = {:.4}, b = {:.4}, c = {:.4}",
                        l.label, l.order, law.a, law.b, law.c
                    ),
                    (None, Some(e)) => println!("{} order {}: {e}", l.label, l.order),
                    _ => {}
                }
            }
        }
        Command::RunRom(c) => {
            let r = cmd_run_rom(&build_config(&c, Verb::RunRom)?)?;
            for run in &r.runs {
                println!(
                    "eps {} N {}: stable, alphas {:?} ({})",
                    run.epsilon, run.n, run.alphas, run.coefficient_source
                );
            }
        }
        Command::Compare(c) => {
            let reports = cmd_compare(&build_config(&c, Verb::Other)?)?;
            for r in &reports {
                println!(
                    "eps {} (exact mass drift {:.3e})",
                    r.epsilon, r.exact_mass_drift
                );
                for o in &r.outcomes {
                    let last = o.errors.last().copied().flatten();
                    let state = match o.blow_up_time {
                        Some(t) => format!("blow-up at t = {t:.3}"),
                        None => "stable".into(),
                    };
                    println!(
                        "  N {:>3} {:<9} {state}; error at t = {}: {}",
                        o.n,
                        o.model.name(),
                        r.error_times.last().map_or("-".into(), |t| t.to_string()),
                        last.map_or("n/a".into(), |e| format!("{e:.4e}"))
                    );
                }
            }
        }
        Command::Derive(c) => {
            let r = cmd_derive(&build_config(&c, Verb::Derive)?)?;
            for p in &r.polynomials {
                println!("{p}");
            }
            for e in &r.equivalence {
                println!(
                    "order {} eps {}: max relative difference {:.2e} ({})",
                    e.order,
                    e.epsilon,
                    e.max_relative_difference,
                    if e.passed { "ok" } else { "MISMATCH" }
                );
            }
        }
    }
    Ok(())
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
