//! `fedec`: clustered federated averaging from the command line.
//!
//! Four subcommands: `gen` writes a scenario to disk, `run` executes one
//! experiment and drops its artifacts in a run directory, `join` asks a
//! finished run what a brand-new client would receive, `sweep` reruns the
//! same setup at several local-epoch counts on a fixed epoch budget.
//!
//! Exit codes: 0 success, 1 bad input (flags, config files, scenario
//! directories), 2 a run that started and then failed.

mod config;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use fedec_core::clustering::Label;
use fedec_core::datagen::{gen_scenario, save_scenario};
use fedec_core::experiment::{config_pairs, probe_join, run_experiment, run_sweep, write_run_dir};
use fedec_core::learner::eval_loss;
use fedec_core::server::Snapshot;

use config::{resolve, CommonArgs, Failure};

#[derive(Parser)]
#[command(
    name = "fedec",
    version,
    about = "Clustered federated averaging: generate scenarios, run experiments, probe joins, sweep epoch budgets"
)]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

#[derive(Subcommand)]
enum Commands {
    /// Run one experiment and write its artifacts to a run directory
    Run {
        #[command(flatten)]
        common: CommonArgs,
        /// Output directory (default runs/<mode>-seed<seed>)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report what a fresh client joining a finished run would receive
    Join {
        /// Run directory holding config.txt and snapshot.bin
        run_dir: PathBuf,
        /// Environment the joiner's data comes from
        #[arg(long)]
        env: usize,
        /// Which fresh client of that environment to draw
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Rerun the same setup at several local-epoch counts on a fixed budget
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated local-epoch counts, e.g. 1,5,10
        #[arg(long, value_delimiter = ',', required = true)]
        epochs: Vec<usize>,
        /// Total epoch budget per grid point (default rounds * epochs_per_round)
        #[arg(long)]
        total_epochs: Option<usize>,
        /// Mean loss every grid point must reach (default: the worst final
        /// loss on the grid, so every point can in principle reach it)
        #[arg(long)]
        target: Option<f64>,
        /// Also write the table to <OUT>/sweep.csv
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a scenario into a directory of columnar text files
    Gen {
        /// Config file supplying scenario keys
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Scenario seed
        #[arg(long)]
        seed: Option<u64>,
        /// Clients per environment, e.g. 3,3,1
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
    },
}

fn main() {
    std::process::exit(run_cli());
}

fn run_cli() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version land here and keep their success status;
            // anything else is bad input
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Commands::Run { common, out } => cmd_run(&common, out),
        Commands::Join {
            run_dir,
            env,
            index,
        } => cmd_join(&run_dir, env, index),
        Commands::Sweep {
            common,
            epochs,
            total_epochs,
            target,
            out,
        } => cmd_sweep(&common, &epochs, total_epochs, target, out),
        Commands::Gen {
            config,
            out,
            seed,
            counts,
        } => cmd_gen(config, &out, seed, counts),
    };
    match result {
        Ok(()) => 0,
        Err(failure) => {
            eprintln!("{}", failure);
            failure.exit_code()
        }
    }
}

fn cmd_run(common: &CommonArgs, out: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = resolve(common)?.cfg;
    let out_dir = out.unwrap_or_else(|| {
        PathBuf::from(format!("runs/{}-seed{}", cfg.mode, cfg.scenario.seed))
    });
    let output = run_experiment(&cfg)?;

    println!(
        "mode {}, {} clients in {} environments, transport {}",
        cfg.mode,
        cfg.scenario.num_clients(),
        cfg.scenario.num_envs(),
        cfg.transport,
    );
    for r in &output.rounds {
        if cfg.mode.is_federated() {
            println!(
                "round {}: k={}, mean val loss {:.6}",
                r.round,
                r.num_clusters,
                r.mean_val_loss()
            );
        } else {
            println!("round {}: mean val loss {:.6}", r.round, r.mean_val_loss());
        }
    }
    println!("final mean val loss {:.6}", output.final_mean_loss());
    if let Some(ipr) = output.ipr {
        println!(
            "improvement rate {:.1}% of clients beat their isolated baseline",
            ipr
        );
    }
    if cfg.mode.is_federated() {
        let total = output.comm.total();
        println!(
            "communication: {} up, {} down, {} overhead; shipping raw data would cost {} ({:.1}x)",
            fmt_bytes(output.comm.upload_bytes),
            fmt_bytes(output.comm.download_bytes),
            fmt_bytes(output.comm.overhead_bytes),
            fmt_bytes(output.raw_data_bytes),
            output.raw_data_bytes as f64 / total as f64,
        );
    } else if output.comm.total() > 0 {
        println!(
            "communication: {} up, {} down",
            fmt_bytes(output.comm.upload_bytes),
            fmt_bytes(output.comm.download_bytes),
        );
    }
    write_run_dir(&out_dir, &cfg, &output)?;
    println!("artifacts in {}", out_dir.display());
    Ok(())
}

fn cmd_join(run_dir: &Path, env: usize, index: usize) -> Result<(), Failure> {
    let config_path = run_dir.join("config.txt");
    if !config_path.is_file() {
        return Err(Failure::Config(format!(
            "{} is not a run directory (no config.txt)",
            run_dir.display()
        )));
    }
    let snapshot_path = run_dir.join("snapshot.bin");
    if !snapshot_path.is_file() {
        return Err(Failure::Config(format!(
            "{} has no snapshot.bin; join needs a completed federated run",
            run_dir.display()
        )));
    }
    let args = CommonArgs {
        config: Some(config_path),
        ..CommonArgs::default()
    };
    let cfg = resolve(&args)?.cfg;
    let snapshot = Snapshot::load(&snapshot_path)?;
    let probe = probe_join(&cfg, &snapshot, env, index)?;

    println!("joiner: environment {}, index {}", env, index);
    match (probe.label, &probe.served) {
        (Label::Noise, _) => {
            println!(
                "assignment: noise (no cluster within eps {}); local training required",
                snapshot.eps
            );
        }
        (Label::Cluster(c), Some(params)) => {
            let loss: f64 = eval_loss(params, &probe.validation)?;
            println!("assignment: cluster {}", c);
            println!("zero-shot validation loss {:.6}", loss);
        }
        (Label::Cluster(c), None) => {
            return Err(Failure::Runtime(format!(
                "snapshot stores no model for cluster {}",
                c
            )));
        }
    }
    Ok(())
}

fn cmd_sweep(
    common: &CommonArgs,
    grid: &[usize],
    total_epochs: Option<usize>,
    target: Option<f64>,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let resolved = resolve(common)?;
    let mut cfg = resolved.cfg;
    // the table is the whole report; skip the isolated-baseline pass
    cfg.compute_ipr = false;
    let total = total_epochs.unwrap_or(cfg.rounds * cfg.epochs_per_round);
    let target = target.or(resolved.target_loss);
    let points = run_sweep(&cfg, grid, total, target)?;
    // reproduce the default the sweep used so the header can show it
    let target = target.unwrap_or_else(|| {
        points
            .iter()
            .map(|p| p.final_mean_loss)
            .fold(f64::NEG_INFINITY, f64::max)
    });

    println!(
        "sweep: total budget {} epochs, target mean val loss {:.6}",
        total, target
    );
    println!(
        "{:>6}  {:>6}  {:>12}  {:>16}",
        "epochs", "rounds", "final_loss", "rounds_to_target"
    );
    for p in &points {
        let reached = match p.rounds_to_target {
            Some(r) => r.to_string(),
            None => "none".into(),
        };
        println!(
            "{:>6}  {:>6}  {:>12.6}  {:>16}",
            p.epochs_per_round, p.rounds_run, p.final_mean_loss, reached
        );
    }

    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)?;
        let mut csv = String::new();
        for (k, v) in config_pairs(&cfg) {
            csv.push_str(&format!("# {} = {}\n", k, v));
        }
        csv.push_str(&format!("# total_epochs = {}\n# target = {}\n", total, target));
        csv.push_str("epochs_per_round,rounds_run,final_mean_loss,rounds_to_target\n");
        for p in &points {
            let reached = match p.rounds_to_target {
                Some(r) => r.to_string(),
                None => "none".into(),
            };
            csv.push_str(&format!(
                "{},{},{},{}\n",
                p.epochs_per_round, p.rounds_run, p.final_mean_loss, reached
            ));
        }
        let path = dir.join("sweep.csv");
        std::fs::write(&path, csv)?;
        println!("table in {}", path.display());
    }
    Ok(())
}

fn cmd_gen(
    config: Option<PathBuf>,
    out: &Path,
    seed: Option<u64>,
    counts: Option<Vec<usize>>,
) -> Result<(), Failure> {
    let args = CommonArgs {
        config,
        seed,
        counts,
        ..CommonArgs::default()
    };
    let cfg = resolve(&args)?.cfg;
    let scenario = gen_scenario::<f64>(&cfg.scenario)?;
    save_scenario(&scenario, out)?;
    println!(
        "wrote {} clients across {} environments to {} (seed {})",
        scenario.clients.len(),
        scenario.envs.len(),
        out.display(),
        cfg.scenario.seed
    );
    Ok(())
}

fn fmt_bytes(n: u64) -> String {
    if n >= 1 << 20 {
        format!("{:.1} MiB", n as f64 / (1 << 20) as f64)
    } else if n >= 1 << 10 {
        format!("{:.1} KiB", n as f64 / 1024.0)
    } else {
        format!("{} B", n)
    }
}
