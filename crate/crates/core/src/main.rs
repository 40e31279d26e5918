use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use extraction_nmpc::harness::{
    compute_metrics, emit_outputs, run_scenario, write_saturation_curve, Metrics, Scenario,
};
use extraction_nmpc::plant::{Plant, SteadyOptions};
use extraction_nmpc::Result;

#[derive(Parser)]
#[command(
    version,
    about = "PSO-based NMPC with MHE on a surrogate extraction cascade"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunFlags {
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (defaults to the scenario's, else out/<label>).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Disable the estimator.
    #[arg(long)]
    no_estimator: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario file.
    Run {
        scenario: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
        /// Exit nonzero if any raffinate or overshoot limit was violated.
        #[arg(long)]
        strict: bool,
    },
    /// Run several scenario files; each writes into <out-dir>/<label>.
    Sweep {
        #[arg(required = true, value_delimiter = ',')]
        scenarios: Vec<PathBuf>,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Steady output and raffinate against feed flow.
    SaturationCurve {
        /// Take plant parameters from this scenario file.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Solvent flow (L/h); defaults to the nominal flow.
        #[arg(long)]
        q: Option<f64>,
        #[arg(long, default_value_t = 0.0)]
        u_min: f64,
        #[arg(long, default_value_t = 1.5)]
        u_max: f64,
        #[arg(long, default_value_t = 61)]
        points: usize,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
}

fn prepare(path: &Path, flags: &RunFlags) -> Result<Scenario> {
    let mut s = Scenario::load(path)?;
    if let Some(seed) = flags.seed {
        s.seed = seed;
    }
    if flags.no_estimator {
        s.estimator.enabled = false;
    }
    Ok(s)
}

fn execute(s: &Scenario, out_dir: &Path) -> Result<Metrics> {
    let trace = run_scenario(s)?;
    let metrics = compute_metrics(&trace);
    let files = emit_outputs(&trace, &metrics, out_dir)?;
    if let Some(reason) = &trace.aborted {
        eprintln!("{}: aborted: {reason}", s.label);
    }
    println!(
        "{:<20} OS {:6.2}%  settling {:>8}  violations {:4}  hold {:5.1}%  evals {:8}  -> {}",
        metrics.label,
        metrics.max_overshoot_pct,
        metrics
            .settling_time_h
            .map_or("never".to_string(), |t| format!("{t:.1} h")),
        metrics.constraint_violations,
        100.0 * metrics.hold_fraction,
        metrics.solver_evaluations,
        files.trace.display(),
    );
    Ok(metrics)
}

fn default_dir(s: &Scenario, base: Option<&Path>) -> PathBuf {
    match (base, &s.output_dir) {
        (Some(b), _) => b.to_path_buf(),
        (None, Some(d)) => d.clone(),
        (None, None) => Path::new("out").join(&s.label),
    }
}

fn main_inner(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run {
            scenario,
            flags,
            strict,
        } => {
            let s = prepare(&scenario, &flags)?;
            let m = execute(&s, &default_dir(&s, flags.out_dir.as_deref()))?;
            if strict && (m.constraint_violations > 0 || m.aborted) {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Sweep { scenarios, flags } => {
            for path in &scenarios {
                let s = prepare(path, &flags)?;
                let dir = match &flags.out_dir {
                    Some(b) => b.join(&s.label),
                    None => default_dir(&s, None),
                };
                execute(&s, &dir)?;
            }
        }
        Command::SaturationCurve {
            scenario,
            q,
            u_min,
            u_max,
            points,
            out_dir,
        } => {
            let s = match scenario {
                Some(p) => Scenario::load(&p)?,
                None => Scenario::default(),
            };
            let plant = Plant::new(s.plant.clone())?;
            let q = q.unwrap_or(s.plant.nominal_solvent_flow);
            let n = points.max(2);
            let grid: Vec<f64> = (0..n)
                .map(|i| u_min + (u_max - u_min) * i as f64 / (n - 1) as f64)
                .collect();
            let opts = SteadyOptions::default();
            let curve = plant.saturation_curve(q, &grid, &opts)?;
            let path = out_dir.join("saturation.csv");
            write_saturation_curve(&curve, &path)?;
            let crit = plant.critical_point(q, s.critical_fraction, u_max, &opts)?;
            println!(
                "critical feed flow {:.4} L/h, steady output {:.4} mol/L -> {}",
                crit.feed_flow,
                crit.output,
                path.display()
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
