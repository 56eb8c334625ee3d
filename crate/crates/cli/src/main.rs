use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::error;

use tgcl::backbone::Snapshot;
use tgcl::dataset;
use tgcl::graph::{generate_synthetic, save_graph, SynthConfig};
use tgcl::harness::{self, Preset, RunOptions};
use tgcl::selector;
use tgcl::trainer::{run_strategy_on, Strategy};

#[derive(Parser)]
#[command(name = "tgcl", version, about = "Selective replay for continual learning on temporal graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a JSON config.
    Run {
        config: PathBuf,
        /// main, ablation, sensitivity or partition
        #[arg(long)]
        preset: Option<Preset>,
        /// Overrides the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Concurrent runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Skip runs whose completion marker matches their config.
        #[arg(long)]
        resume: bool,
    },
    /// Write a synthetic graph as nodes.csv, events.csv and periods.json.
    Gen {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build one period's replay buffer and print or save it as JSON.
    Select {
        config: PathBuf,
        #[arg(long)]
        period: usize,
        /// Model checkpoint from the previous period. Without it the
        /// configured training is run up to the previous period.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-render the summary table of an output directory.
    Report { dir: PathBuf },
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { config, preset, out, jobs, resume } => {
            let mut cfg = harness::load_config(&config)?;
            if let Some(p) = preset {
                cfg.apply_preset(p);
            }
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            let outcome = harness::run_experiment(&cfg, &RunOptions { out: out.clone(), jobs, resume })?;
            print!("{}", harness::render_table(&outcome.summary));
            println!("results written to {}", out.display());
            if !outcome.failed.is_empty() {
                for (key, err) in &outcome.failed {
                    eprintln!("failed: {key}: {err}");
                }
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Gen { config, out } => {
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let synth: SynthConfig =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", config.display()))?;
            let graph = generate_synthetic(&synth)?;
            save_graph(&graph, &out)?;
            println!(
                "{} nodes, {} events, {} periods written to {}",
                graph.nodes().len(),
                graph.events().len(),
                graph.num_periods(),
                out.display()
            );
        }
        Command::Select { config, period, checkpoint, seed, out } => {
            let cfg = harness::load_config(&config)?;
            cfg.sel.validate()?;
            if period < 2 {
                bail!("--period must be at least 2; the first period has no old classes");
            }
            let seed = seed.unwrap_or(cfg.seeds.first().copied().unwrap_or(0));
            let graph = harness::load_graph_for(&cfg.data, seed)?;
            if period > graph.num_periods() {
                bail!("--period {period} exceeds the graph's {} periods", graph.num_periods());
            }
            let data = dataset::build_all(&graph, seed)?;
            let prev = match checkpoint {
                Some(path) => Snapshot::from_json(
                    &fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?,
                )?,
                None => {
                    let mut train = cfg.train.clone();
                    train.seed = seed;
                    train.strategy = Strategy::Ltf;
                    let mut sel = cfg.sel.clone();
                    sel.seed = seed;
                    let run = run_strategy_on(&data[..period - 1], graph.feature_dim(), &sel, &train, None)?;
                    run.snapshots.last().cloned().context("no snapshot produced")?
                }
            };
            let mut sel = cfg.sel.clone();
            sel.seed = seed;
            let (buffer, report) = selector::select(&data[period - 1], &prev, &sel)?;
            let json = buffer.to_json()?;
            match out {
                Some(path) => {
                    fs::write(&path, &json)?;
                    eprintln!(
                        "{} replay and {} coverage nodes, selection took {:.1} ms",
                        buffer.sub.len(),
                        buffer.sim.len(),
                        report.total_ms
                    );
                }
                None => println!("{json}"),
            }
        }
        Command::Report { dir } => {
            let (_, table) = harness::report(&dir)?;
            print!("{table}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            error!("{e:#}");
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
