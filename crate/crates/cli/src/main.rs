use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use cdefuse::ablation::run_ablation_grid;
use cdefuse::data::{generate_synthetic_cohort, load_cohort, write_cohort, SyntheticConfig};
use cdefuse::diagnostics::gradient_suite;
use cdefuse::experiment::{emit_plot_data, load_run, run_experiment, save_run, ExperimentConfig, MetricsReport};

#[derive(Parser)]
#[command(name = "cdefuse", version, about = "Neural CDE and attention-fusion forecasting of irregular longitudinal data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort (measurements, manifest, PGM slices).
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
    },
    /// Train one model and write its run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute and print a run's metrics from its checkpoint.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        /// Cohort directory; defaults to the one recorded in the run.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the six-comparison ablation grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every op and the composed model graphs.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Write actual-vs-predicted and trajectory CSVs for a run.
    PlotData {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        patient: Vec<String>,
        /// Output directory; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn print_metrics(m: &MetricsReport) {
    println!("{:<6} {:>10} {:>10} {:>10} {:>6}", "split", "rmse", "mae", "r2", "n");
    for (name, split) in [("train", m.train), ("val", m.val), ("test", m.test)] {
        match split {
            Some(s) => println!(
                "{name:<6} {:>10.5} {:>10.5} {:>10} {:>6}",
                s.rmse,
                s.mae,
                s.r2.map_or_else(|| "-".to_string(), |r| format!("{r:.5}")),
                s.n
            ),
            None => println!("{name:<6} {:>10} {:>10} {:>10} {:>6}", "-", "-", "-", 0),
        }
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { n, seed, out, image_size } => {
            let cfg = SyntheticConfig {
                image_size,
                ..Default::default()
            };
            let cohort = generate_synthetic_cohort(n, seed, &cfg)?;
            write_cohort(&cohort, &out)?;
            println!("wrote {} patients to {}", cohort.len(), out.display());
        }
        Command::Train { config, data, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let cohort = load_cohort(&data)?;
            info!("training {} on {} patients", cfg.label(), cohort.len());
            let mut exp = run_experiment(&cfg, &cohort)?;
            exp.log.data = Some(absolute(&data));
            save_run(&exp, &out)?;
            print_metrics(&exp.log.metrics);
            println!("run written to {}", out.display());
        }
        Command::Evaluate { run, data } => {
            let exp = load_run(&run, data.as_deref())?;
            let now = MetricsReport::evaluate(&exp.model, &exp.store, &exp.data)?;
            print_metrics(&now);
            if now != exp.log.metrics {
                bail!("recomputed metrics differ from the run log in {}", run.display());
            }
        }
        Command::Ablate { config, data, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let cohort = load_cohort(&data)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let report = run_ablation_grid(&cfg, &cohort, Some(&out), Some(&absolute(&data)))?;
            print!("{}", report.render());
            println!("tables written to {}", out.display());
        }
        Command::Gradcheck { seed, trials } => {
            let mut ok = true;
            for r in gradient_suite(seed, trials)? {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                ok &= r.passed();
                println!("{:<22} max rel err {:.3e} (tol {:.0e})  {verdict}", r.name, r.max_rel_err, r.tolerance);
            }
            return Ok(ok);
        }
        Command::PlotData { run, patient, out, data } => {
            let exp = load_run(&run, data.as_deref())?;
            let ids: Vec<&str> = patient.iter().map(String::as_str).collect();
            for f in emit_plot_data(&exp, &ids, out.as_deref().unwrap_or(&run))? {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
