use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use dsrnet::dp::{PolicyTable, PriceVector, RewardVector};
use dsrnet::experiment::{run_experiment, ExperimentConfig};
use dsrnet::scenario::load_scenario;
use dsrnet::verify::{run_all, VerifyLimits};

/// Deadline-constrained broadcast over multi-hop wireless mesh networks
/// with delegated-set routing.
#[derive(Parser)]
#[command(name = "dsrnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and structurally check a scenario file.
    Validate { file: PathBuf },
    /// Run the self-check suite against brute-force ground truth.
    Verify {
        #[arg(long, default_value_t = 4)]
        max_nodes: usize,
        #[arg(long, default_value_t = 3)]
        max_horizon: u32,
        #[arg(long, default_value_t = 200)]
        instances: usize,
        #[arg(long, default_value_t = 0x5eed)]
        seed: u64,
    },
    /// Run the experiment sweep described by a TOML config.
    Run { config: PathBuf },
    /// Print one flow's full value table at given link prices.
    DumpPolicy {
        scenario: PathBuf,
        #[arg(long)]
        flow: usize,
        /// CSV of `link_id,price` lines; unlisted links price at 0.
        #[arg(long)]
        lambda_file: PathBuf,
    },
}

fn load_prices(path: &PathBuf, n_links: usize) -> Result<PriceVector> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("failed to read {}", path.display()))?;
    let mut prices = vec![0.0; n_links];
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, value) = line
            .split_once(',')
            .with_context(|| format!("line {}: expected `link_id,price`", i + 1))?;
        let id: usize = id
            .trim()
            .parse()
            .with_context(|| format!("line {}: bad link id {id:?}", i + 1))?;
        let value: f64 = value
            .trim()
            .parse()
            .with_context(|| format!("line {}: bad price {value:?}", i + 1))?;
        if id >= n_links {
            bail!("line {}: link id {id} out of range ({n_links} links)", i + 1);
        }
        if value < 0.0 {
            bail!("line {}: negative price {value}", i + 1);
        }
        prices[id] = value;
    }
    Ok(PriceVector(prices))
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { file } => {
            let topo = load_scenario(&file)?;
            println!(
                "ok: {} nodes, {} links ({} interconnect), {} flows, {} gateways",
                topo.n_nodes,
                topo.links.len(),
                topo.links.iter().filter(|l| l.interconnect).count(),
                topo.flows.len(),
                topo.gateways.len()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify {
            max_nodes,
            max_horizon,
            instances,
            seed,
        } => {
            let limits = VerifyLimits {
                max_nodes,
                max_horizon,
                instances,
                seed,
            };
            let outcomes = run_all(&limits);
            let mut failed = false;
            for o in &outcomes {
                println!("{o}");
                failed |= !o.passed();
            }
            Ok(if failed {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            })
        }
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (summary, trace) = run_experiment(&cfg)?;
            println!("wrote {}", summary.display());
            println!("wrote {}", trace.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::DumpPolicy {
            scenario,
            flow,
            lambda_file,
        } => {
            let topo = std::sync::Arc::new(load_scenario(&scenario)?);
            if flow >= topo.flows.len() {
                bail!("flow {flow} out of range ({} flows)", topo.flows.len());
            }
            let prices = load_prices(&lambda_file, topo.links.len())?;
            let rewards = RewardVector::uniform(topo.n_nodes, 1.0);
            let table = PolicyTable::solve_relaxed(
                &topo,
                flow,
                rewards,
                prices,
                topo.flows[flow].deadline,
            )?;
            print!("{}", table.dump());
            Ok(ExitCode::SUCCESS)
        }
    }
}
