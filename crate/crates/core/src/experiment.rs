//! TOML-driven experiment runner: sweeps (policy, deadline, seed) cells
//! over a scenario, runs each cell in isolation, and merges results into
//! `summary.csv` and `trace.csv` in a deterministic order.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dp::{CandidateCache, Variant, DEFAULT_MAX_STATES};
use crate::dual::{optimize, total_utility, DualError, DualReport, OptimizeOptions, UtilityKind};
use crate::net::Topology;
use crate::scenario::{load_scenario, ScenarioError};
use crate::sim::{run_baseline, BaselineKind, Metrics, SimError};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum PolicyKind {
    #[serde(rename = "dsr-relaxed")]
    DsrRelaxed,
    #[serde(rename = "index-dsr")]
    IndexDsr,
    #[serde(rename = "flood")]
    Flood,
    #[serde(rename = "random")]
    Random,
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(policy_name(*self))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Scenario file path, resolved relative to the config file.
    pub topology: PathBuf,
    pub policies: Vec<PolicyKind>,
    pub utility: UtilityKind,
    /// Deadline override applied to every flow; `None` keeps the
    /// scenario's deadlines and runs a single sweep point.
    pub deadlines: Option<Vec<u32>>,
    pub epochs: u64,
    pub epoch_len: u64,
    #[serde(default = "default_beta0")]
    pub beta0: f64,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
}

fn default_beta0() -> f64 {
    0.5
}

#[derive(Error, Debug)]
pub enum ExperimentError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Dual(#[from] DualError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg: ExperimentConfig = toml::from_str(&text)?;
        if let Some(dir) = path.parent() {
            if cfg.topology.is_relative() {
                cfg.topology = dir.join(&cfg.topology);
            }
            if cfg.output.is_relative() {
                cfg.output = dir.join(&cfg.output);
            }
        }
        Ok(cfg)
    }

    /// Structural checks that do not need the scenario loaded.
    fn check(&self, topo: &Topology) -> Result<(), ExperimentError> {
        if self.seeds.is_empty() {
            return Err(ExperimentError::BadConfig("seeds list is empty".into()));
        }
        if self.policies.is_empty() {
            return Err(ExperimentError::BadConfig("policies list is empty".into()));
        }
        if !(self.beta0 > 0.0 && self.beta0.is_finite()) {
            return Err(ExperimentError::BadConfig(format!(
                "beta0 {} must be positive",
                self.beta0
            )));
        }
        let max_deadline = match &self.deadlines {
            Some(ds) => {
                if ds.is_empty() {
                    return Err(ExperimentError::BadConfig("deadlines list is empty".into()));
                }
                if ds.contains(&0) {
                    return Err(ExperimentError::BadConfig("deadline 0 is invalid".into()));
                }
                *ds.iter().max().unwrap()
            }
            None => topo.flows.iter().map(|f| f.deadline).max().unwrap_or(1),
        };
        // Epochs must dominate packet lifetimes so carried-over packets
        // are a vanishing fraction of each epoch's measurement.
        if self.epoch_len < 50 * max_deadline as u64 {
            return Err(ExperimentError::BadConfig(format!(
                "epoch_len {} is below 50 x max deadline ({})",
                self.epoch_len,
                50 * max_deadline as u64
            )));
        }
        Ok(())
    }
}

/// One sweep point.
#[derive(Clone, Copy, Debug)]
struct Cell {
    policy: PolicyKind,
    deadline: Option<u32>,
    seed: u64,
}

/// Candidate caches shared across cells, one per prune mode.
struct Caches {
    pruned: Arc<CandidateCache>,
    unpruned: Arc<CandidateCache>,
}

struct CellResult {
    cell: Cell,
    total_utility: f64,
    mu: Vec<f64>,
    usage: Vec<f64>,
    report: Option<DualReport>,
}

fn policy_name(p: PolicyKind) -> &'static str {
    match p {
        PolicyKind::DsrRelaxed => "dsr-relaxed",
        PolicyKind::IndexDsr => "index-dsr",
        PolicyKind::Flood => "flood",
        PolicyKind::Random => "random",
    }
}

/// Column list for `summary.csv`; a pure function of the topology.
pub fn summary_header(topo: &Topology) -> String {
    let mut cols = vec![
        "policy".to_string(),
        "utility_kind".to_string(),
        "deadline".to_string(),
        "seed".to_string(),
        "total_utility".to_string(),
    ];
    for f in 0..topo.flows.len() {
        for n in 0..topo.n_nodes {
            cols.push(format!("mu_f{f}_n{n}"));
        }
    }
    for l in 0..topo.links.len() {
        cols.push(format!("use_l{l}"));
    }
    cols.join(",")
}

/// Column list for `trace.csv`; a pure function of the topology.
pub fn trace_header(topo: &Topology) -> String {
    let mut cols = vec![
        "policy".to_string(),
        "utility_kind".to_string(),
        "deadline".to_string(),
        "seed".to_string(),
        "epoch".to_string(),
        "total_utility".to_string(),
        "lagrangian".to_string(),
    ];
    for l in 0..topo.links.len() {
        cols.push(format!("lambda_l{l}"));
    }
    cols.join(",")
}

fn cell_topology(base: &Topology, cfg: &ExperimentConfig, deadline: Option<u32>) -> Arc<Topology> {
    let mut topo = base.clone();
    for flow in &mut topo.flows {
        flow.utility = cfg.utility;
        if let Some(d) = deadline {
            flow.deadline = d;
        }
    }
    Arc::new(topo)
}

fn run_cell(
    base: &Topology,
    cfg: &ExperimentConfig,
    cell: Cell,
    caches: &Caches,
) -> Result<CellResult, ExperimentError> {
    let topo = cell_topology(base, cfg, cell.deadline);
    let slots = cfg.epochs * cfg.epoch_len;
    match cell.policy {
        PolicyKind::DsrRelaxed | PolicyKind::IndexDsr => {
            let (variant, cache) = if cell.policy == PolicyKind::DsrRelaxed {
                (Variant::Relaxed, &caches.pruned)
            } else {
                (Variant::Index, &caches.unpruned)
            };
            let mut opts = OptimizeOptions::new(cfg.epochs, cfg.epoch_len, cfg.beta0, cell.seed)
                .with_variant(variant)
                .with_cache(Arc::clone(cache));
            opts.max_states = DEFAULT_MAX_STATES;
            let report = optimize(&topo, &opts)?;
            let usage = avg_usage_from_eps(&topo, &report.final_eps);
            Ok(CellResult {
                cell,
                total_utility: total_utility(&topo, &report.final_mu),
                mu: report.final_mu.clone(),
                usage,
                report: Some(report),
            })
        }
        PolicyKind::Flood | PolicyKind::Random => {
            let kind = if cell.policy == PolicyKind::Flood {
                BaselineKind::Flood
            } else {
                BaselineKind::Random
            };
            let metrics = run_baseline(&topo, kind, slots, cell.seed)?;
            let (mu, usage) = averages_from_metrics(&topo, &metrics, slots);
            Ok(CellResult {
                cell,
                total_utility: total_utility(&topo, &mu),
                mu,
                usage,
                report: None,
            })
        }
    }
}

fn avg_usage_from_eps(topo: &Topology, eps: &[f64]) -> Vec<f64> {
    (0..topo.links.len())
        .map(|l| (0..topo.flows.len()).map(|f| eps[topo.lf_index(l, f)]).sum())
        .collect()
}

fn averages_from_metrics(topo: &Topology, metrics: &Metrics, slots: u64) -> (Vec<f64>, Vec<f64>) {
    let len = slots.max(1) as f64;
    let mu = metrics.delivered.iter().map(|&c| c as f64 / len).collect();
    let usage = (0..topo.links.len())
        .map(|l| {
            (0..topo.flows.len())
                .map(|f| metrics.transmissions_at(l, f) as f64)
                .sum::<f64>()
                / len
        })
        .collect();
    (mu, usage)
}

fn fmt_row(fields: &[String]) -> String {
    fields.join(",")
}

/// Loads the scenario, runs all cells (in parallel), and writes
/// `summary.csv` and `trace.csv` under the configured output directory.
/// Returns the paths of the written files.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(PathBuf, PathBuf), ExperimentError> {
    let base = load_scenario(&cfg.topology)?;
    cfg.check(&base)?;

    // Fail on an unwritable output directory before any simulation runs.
    std::fs::create_dir_all(&cfg.output).map_err(|source| ExperimentError::Io {
        path: cfg.output.display().to_string(),
        source,
    })?;
    let summary_path = cfg.output.join("summary.csv");
    let trace_path = cfg.output.join("trace.csv");
    for p in [&summary_path, &trace_path] {
        std::fs::write(p, "").map_err(|source| ExperimentError::Io {
            path: p.display().to_string(),
            source,
        })?;
    }

    let deadlines: Vec<Option<u32>> = match &cfg.deadlines {
        Some(ds) => ds.iter().copied().map(Some).collect(),
        None => vec![None],
    };
    let mut cells = Vec::new();
    for &policy in &cfg.policies {
        for &deadline in &deadlines {
            for &seed in &cfg.seeds {
                cells.push(Cell {
                    policy,
                    deadline,
                    seed,
                });
            }
        }
    }

    let caches = Caches {
        pruned: Arc::new(CandidateCache::new(&base, true)),
        unpruned: Arc::new(CandidateCache::new(&base, false)),
    };
    let results: Result<Vec<CellResult>, ExperimentError> = if cfg.epochs == 0 {
        Ok(Vec::new())
    } else {
        cells
            .par_iter()
            .map(|&cell| run_cell(&base, cfg, cell, &caches))
            .collect()
    };
    let results = results?;

    let mut summary = String::new();
    summary.push_str(&summary_header(&base));
    summary.push('\n');
    let mut trace = String::new();
    trace.push_str(&trace_header(&base));
    trace.push('\n');

    for r in &results {
        let deadline = r
            .cell
            .deadline
            .map(|d| d.to_string())
            .unwrap_or_else(|| "scenario".to_string());
        let mut fields = vec![
            policy_name(r.cell.policy).to_string(),
            cfg.utility.to_string(),
            deadline.clone(),
            r.cell.seed.to_string(),
            r.total_utility.to_string(),
        ];
        fields.extend(r.mu.iter().map(|x| x.to_string()));
        fields.extend(r.usage.iter().map(|x| x.to_string()));
        summary.push_str(&fmt_row(&fields));
        summary.push('\n');

        if let Some(report) = &r.report {
            for e in 0..report.lambda_trace.len() {
                let mut fields = vec![
                    policy_name(r.cell.policy).to_string(),
                    cfg.utility.to_string(),
                    deadline.clone(),
                    r.cell.seed.to_string(),
                    (e + 1).to_string(),
                    report.utility_trace[e].to_string(),
                    report.lagrangian_trace[e].to_string(),
                ];
                fields.extend(report.lambda_trace[e].iter().map(|x| x.to_string()));
                trace.push_str(&fmt_row(&fields));
                trace.push('\n');
            }
        }
    }

    std::fs::write(&summary_path, summary).map_err(|source| ExperimentError::Io {
        path: summary_path.display().to_string(),
        source,
    })?;
    std::fs::write(&trace_path, trace).map_err(|source| ExperimentError::Io {
        path: trace_path.display().to_string(),
        source,
    })?;
    Ok((summary_path, trace_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NodeId as N;

    fn tiny_scenario() -> &'static str {
        "nodes 3\nlink 0 1 1 0.9\nlink 1 2 1 0.9\nflow 0 1 3\n"
    }

    fn write_setup(dir: &Path, epochs: u64) -> PathBuf {
        std::fs::write(dir.join("net.txt"), tiny_scenario()).unwrap();
        let cfg = format!(
            "topology = \"net.txt\"\npolicies = [\"dsr-relaxed\", \"random\"]\n\
             utility = \"linear\"\ndeadlines = [3]\nepochs = {epochs}\nepoch_len = 200\n\
             seeds = [7, 8]\noutput = \"out\"\n"
        );
        let path = dir.join("exp.toml");
        std::fs::write(&path, cfg).unwrap();
        path
    }

    #[test]
    fn header_is_a_function_of_topology() {
        let mut t = Topology::new(2);
        t.add_link(N(0), N(1), 1, 1.0);
        t.add_flow(N(0), 1.0, 2);
        assert_eq!(
            summary_header(&t),
            "policy,utility_kind,deadline,seed,total_utility,mu_f0_n0,mu_f0_n1,use_l0"
        );
        assert_eq!(
            trace_header(&t),
            "policy,utility_kind,deadline,seed,epoch,total_utility,lagrangian,lambda_l0"
        );
    }

    #[test]
    fn zero_epochs_write_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::load(write_setup(dir.path(), 0)).unwrap();
        let (summary, trace) = run_experiment(&cfg).unwrap();
        let s = std::fs::read_to_string(summary).unwrap();
        let t = std::fs::read_to_string(trace).unwrap();
        assert_eq!(s.lines().count(), 1);
        assert_eq!(t.lines().count(), 1);
        assert!(s.starts_with("policy,utility_kind,"));
    }

    #[test]
    fn repeat_runs_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::load(write_setup(dir.path(), 2)).unwrap();
        let (s1, t1) = run_experiment(&cfg).unwrap();
        let a = (std::fs::read(&s1).unwrap(), std::fs::read(&t1).unwrap());
        let (s2, t2) = run_experiment(&cfg).unwrap();
        let b = (std::fs::read(&s2).unwrap(), std::fs::read(&t2).unwrap());
        assert_eq!(a, b);
        // Summary has one row per (policy, deadline, seed) cell.
        let s = String::from_utf8(a.0).unwrap();
        assert_eq!(s.lines().count(), 1 + 4);
        // Trace rows come only from the DSR policy: 2 seeds x 2 epochs.
        let t = String::from_utf8(a.1).unwrap();
        assert_eq!(t.lines().count(), 1 + 4);
        assert!(t.lines().skip(1).all(|l| l.starts_with("dsr-relaxed,")));
    }

    #[test]
    fn short_epochs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("net.txt"), tiny_scenario()).unwrap();
        let cfg_path = dir.path().join("exp.toml");
        std::fs::write(
            &cfg_path,
            "topology = \"net.txt\"\npolicies = [\"random\"]\nutility = \"linear\"\n\
             deadlines = [10]\nepochs = 1\nepoch_len = 100\nseeds = [1]\noutput = \"out\"\n",
        )
        .unwrap();
        let cfg = ExperimentConfig::load(&cfg_path).unwrap();
        let err = run_experiment(&cfg).unwrap_err();
        assert!(err.to_string().contains("epoch_len"), "{err}");
    }

    #[test]
    fn empty_seed_list_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("net.txt"), tiny_scenario()).unwrap();
        let cfg_path = dir.path().join("exp.toml");
        std::fs::write(
            &cfg_path,
            "topology = \"net.txt\"\npolicies = [\"random\"]\nutility = \"linear\"\n\
             epochs = 1\nepoch_len = 200\nseeds = []\noutput = \"out\"\n",
        )
        .unwrap();
        let cfg = ExperimentConfig::load(&cfg_path).unwrap();
        let err = run_experiment(&cfg).unwrap_err();
        assert!(err.to_string().contains("seeds"), "{err}");
    }
}
