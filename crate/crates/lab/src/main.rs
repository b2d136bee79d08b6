use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cil_lab::compare::{compare, render_table};
use cil_lab::plot::{plot_files, render_svg, Series};
use cil_lab::{load_experiment, runner, LabError};

/// Class-incremental learning experiments.
#[derive(Parser)]
#[command(name = "cil", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one experiment (a TOML config or a manifest.json).
    Run {
        config: PathBuf,
        /// Write artifacts here instead of the configured output_dir.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Run or load several experiments on the same stream and rank them.
    Compare {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        /// Also draw all runs into this SVG file.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Draw accuracy curves from results.json files.
    Plot {
        #[arg(required = true)]
        results: Vec<PathBuf>,
        #[arg(short, long, default_value = "curves.svg")]
        output: PathBuf,
    },
    /// Check a config without training.
    Validate { config: PathBuf },
}

fn execute(cli: Cli) -> Result<(), LabError> {
    match cli.command {
        Command::Run { config, output_dir } => {
            let cfg = load_experiment(&config)?;
            let report = runner::run(&cfg, output_dir.as_deref())?;
            let dir = output_dir.unwrap_or(cfg.output_dir);
            println!(
                "{}: avg_acc={:.4} final_acc={:.4} stages={} dir={}",
                report.algorithm(),
                report.result.average,
                report.result.final_accuracy(),
                report.result.num_stages(),
                dir.display()
            );
        }
        Command::Compare { configs, plot } => {
            let cfgs = configs.iter().map(|p| load_experiment(p)).collect::<Result<Vec<_>, _>>()?;
            let cmp = compare(&cfgs)?;
            for (c, hit) in cfgs.iter().zip(&cmp.cached) {
                if *hit {
                    eprintln!("cached: {}", c.output_dir.display());
                }
            }
            print!("{}", render_table(&cmp.rows));
            if let Some(out) = plot {
                let series: Vec<Series> = cmp.reports.iter().map(Series::from).collect();
                let svg = render_svg(&series)?;
                std::fs::write(&out, svg).map_err(|e| LabError::Io { path: out, source: e })?;
            }
        }
        Command::Plot { results, output } => {
            plot_files(&results, &output)?;
            println!("wrote {}", output.display());
        }
        Command::Validate { config } => {
            let cfg = load_experiment(&config)?;
            let prepared = cfg.prepare()?;
            let stream = prepared.stream.config();
            println!(
                "ok: algorithm={} classes={} stages={} memory_size={} seed={} fingerprint={}",
                cfg.algorithm(),
                stream.total_classes,
                prepared.stream.num_tasks(),
                cfg.memory_size,
                cfg.seed,
                cfg.fingerprint()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error[{}]: {}", e.kind(), msg);
            ExitCode::from(match e {
                LabError::UnknownKey { .. } | LabError::MissingKey { .. } | LabError::Config { .. } => 2,
                _ => 1,
            })
        }
    }
}
