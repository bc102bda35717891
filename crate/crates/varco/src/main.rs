//! Thin command-line front end over the library: `synth`, `partition`,
//! `train`, `report`. Exit codes: 0 ok, 2 config error, 3 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use varco::harness::{
    cmd_partition, cmd_report, cmd_synth, cmd_train, PartitionMethod, TrainConfig,
};
use varco::io::load_graph_with_masks;
use varco::Error;

#[derive(Parser)]
#[command(
    name = "varco",
    about = "Distributed GNN training simulator with variable-rate activation compression"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a stochastic-block-model dataset on disk.
    Synth(SynthArgs),
    /// Partition a dataset directory and print cut statistics.
    Partition(PartitionArgs),
    /// Train one arm and write metrics.csv plus a checkpoint.
    Train(TrainArgs),
    /// Merge metrics CSVs into a comparison table and budget curves.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Directory for edges.txt, features.csv, labels.csv, masks.txt.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 0.04)]
    p_in: f64,
    #[arg(long, default_value_t = 0.004)]
    p_out: f64,
    #[arg(long, default_value_t = 16)]
    feat_dim: usize,
    #[arg(long, default_value_t = 1.5)]
    noise: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct PartitionArgs {
    /// Dataset directory as written by `synth`.
    #[arg(long)]
    data_dir: PathBuf,
    /// random | bfs | import
    #[arg(long, default_value = "random")]
    method: String,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Externally computed assignment file (for --method import).
    #[arg(long)]
    import_file: Option<PathBuf>,
    /// Output assignment file (default <data-dir>/partition.txt).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat key-value config file (dotted keys, see README).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set optimizer.eta=0.1 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Metrics CSVs, one per arm (the file stem names the arm).
    metrics: Vec<PathBuf>,
    /// Number of budget grid points.
    #[arg(long, default_value_t = 100)]
    grid: usize,
    /// Write the budget-grid curves to this CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> varco::Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let g = cmd_synth(
                &a.out_dir, a.n, a.classes, a.p_in, a.p_out, a.feat_dim, a.noise, a.seed,
            )?;
            println!(
                "wrote {} nodes, {} undirected edges, {} classes to {}",
                g.num_nodes(),
                g.num_directed_edges() / 2,
                g.num_classes(),
                a.out_dir.display()
            );
        }
        Command::Partition(a) => {
            let g = load_graph_with_masks(
                &a.data_dir.join("edges.txt"),
                &a.data_dir.join("features.csv"),
                &a.data_dir.join("labels.csv"),
                &a.data_dir.join("masks.txt"),
            )?;
            let method = PartitionMethod::parse(&a.method)?;
            let out = a.out.unwrap_or_else(|| a.data_dir.join("partition.txt"));
            let (p, stats) =
                cmd_partition(&g, method, a.workers, a.seed, a.import_file.as_deref(), &out)?;
            println!("workers self_edges cross_edges self_fraction cross_fraction");
            println!(
                "{} {} {} {:.4} {:.4}",
                p.num_workers(),
                stats.self_count,
                stats.cross_count,
                stats.self_fraction,
                stats.cross_fraction
            );
            println!("assignment written to {}", out.display());
        }
        Command::Train(a) => {
            let mut overrides = Vec::with_capacity(a.sets.len());
            for s in &a.sets {
                let (k, v) = s
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
                overrides.push((k.trim().to_string(), v.trim().to_string()));
            }
            let cfg = TrainConfig::resolve(a.config.as_deref(), &overrides)?;
            let outcome = cmd_train(&cfg)?;
            let last = outcome.records.last().expect("at least one epoch");
            println!(
                "arm={} epochs={} final_train_loss={:.6} val_acc={:.4} test_acc={:.4} total_floats={}",
                cfg.arm.name(),
                outcome.records.len(),
                last.train_loss,
                last.val_acc,
                last.test_acc,
                last.cum_floats
            );
            println!("metrics: {}", outcome.metrics_path.display());
            println!("checkpoint: {}", outcome.checkpoint_path.display());
        }
        Command::Report(a) => {
            let report = cmd_report(&a.metrics, a.grid, a.out.as_deref())?;
            println!("arm epochs final_train_loss val_acc test_acc total_floats");
            for s in &report.summaries {
                println!(
                    "{} {} {:.6} {:.4} {:.4} {}",
                    s.name,
                    s.epochs,
                    s.final_train_loss,
                    s.final_val_acc,
                    s.final_test_acc,
                    s.total_floats
                );
            }
            if report.summaries.len() > 1 {
                println!(
                    "budget-grid dominance (fraction of {} points):",
                    report.budgets.len()
                );
                for (i, a_s) in report.summaries.iter().enumerate() {
                    for (j, b_s) in report.summaries.iter().enumerate() {
                        if i != j {
                            println!(
                                "  {} >= {} at {:.1}% of budgets",
                                a_s.name,
                                b_s.name,
                                100.0 * report.dominance[i][j]
                            );
                        }
                    }
                }
            }
            if let Some(out) = &a.out {
                println!("curves: {}", out.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Numeric(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
