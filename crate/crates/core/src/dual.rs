//! Outer optimization loop: epoch-wise policy mixing, empirical estimation
//! of timely-throughputs and link usages, utility gradients, and projected
//! subgradient price updates.
//!
//! Epoch k re-plans the per-packet DP from the marginal utilities at the
//! current round-robin running averages, simulates one epoch under the new
//! tables (packets in flight keep running and are re-planned from their
//! current state), folds the epoch's measurements into the running
//! averages with weight 1/k, and takes one price step with step size
//! beta0 / k.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dp::{
    CandidateCache, DpError, PolicyTable, PriceVector, RewardVector, Variant, DEFAULT_MAX_STATES,
};
use crate::net::{NodeId, Topology};
use crate::sim::{Policy, SimError, SimOptions, Simulation};

/// Shape of the per-node utility of timely-throughput.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum UtilityKind {
    #[serde(rename = "linear")]
    Linear,
    #[serde(rename = "log")]
    Logarithmic,
}

impl UtilityKind {
    pub fn value(self, mu: f64) -> f64 {
        let mu = mu.max(0.0);
        match self {
            UtilityKind::Linear => mu,
            UtilityKind::Logarithmic => (mu + 1.0).ln(),
        }
    }

    pub fn derivative(self, mu: f64) -> f64 {
        let mu = mu.max(0.0);
        match self {
            UtilityKind::Linear => 1.0,
            UtilityKind::Logarithmic => 1.0 / (mu + 1.0),
        }
    }
}

impl std::fmt::Display for UtilityKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            UtilityKind::Linear => write!(f, "linear"),
            UtilityKind::Logarithmic => write!(f, "log"),
        }
    }
}

/// Running state of the epoch loop.
#[derive(Clone, Debug)]
pub struct EpochState {
    /// Epoch counter, starting at 1.
    pub k: u64,
    /// Running-average timely-throughput, indexed `f * n_nodes + n`.
    pub mu: Vec<f64>,
    /// Running-average link usage, indexed `f * n_links + l`.
    pub eps: Vec<f64>,
    /// Current link prices.
    pub lambda: Vec<f64>,
    pub beta0: f64,
    pub epoch_len: u64,
}

impl EpochState {
    pub fn new(topo: &Topology, beta0: f64, epoch_len: u64) -> Self {
        EpochState {
            k: 1,
            mu: vec![0.0; topo.n_nodes * topo.flows.len()],
            eps: vec![0.0; topo.links.len() * topo.flows.len()],
            lambda: vec![0.0; topo.links.len()],
            beta0,
            epoch_len,
        }
    }

    /// Harmonic step size; nonnegative, summing to infinity, vanishing.
    pub fn step_size(&self) -> f64 {
        self.beta0 / self.k as f64
    }

    /// Round-robin mixture: the newest epoch gets weight 1/k.
    pub fn fold_measurement(&mut self, meas: &EpochMeasurement) {
        let k = self.k as f64;
        for (avg, &x) in self.mu.iter_mut().zip(&meas.mu) {
            *avg += (x - *avg) / k;
        }
        for (avg, &x) in self.eps.iter_mut().zip(&meas.eps) {
            *avg += (x - *avg) / k;
        }
    }
}

/// Marginal utilities of one flow at the current running averages.
pub fn gradient_rewards(state: &EpochState, topo: &Topology, flow: usize) -> RewardVector {
    let util = topo.flows[flow].utility;
    let rewards = (0..topo.n_nodes)
        .map(|n| util.derivative(state.mu[topo.nf_index(NodeId(n as u8), flow)].max(0.0)))
        .collect();
    RewardVector(rewards)
}

/// Projected subgradient step on every link price:
/// `lambda <- max(0, lambda - beta_k * (T_l - usage_l))`.
pub fn update_prices(state: &mut EpochState, usage_per_link: &[f64], topo: &Topology) {
    let beta = state.step_size();
    for (l, link) in topo.links.iter().enumerate() {
        let g = link.capacity as f64 - usage_per_link[l];
        state.lambda[l] = (state.lambda[l] - beta * g).max(0.0);
    }
}

/// Per-epoch averages measured by the simulator.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMeasurement {
    /// Deliveries within deadline per slot, indexed `f * n_nodes + n`.
    pub mu: Vec<f64>,
    /// Transmissions per slot, indexed `f * n_links + l`.
    pub eps: Vec<f64>,
    /// Positive-value demand per slot (index policy), same indexing.
    pub demand: Vec<f64>,
}

/// Simulates `epoch_len` slots on an existing simulation and returns the
/// epoch's averages.
pub fn run_epoch(
    sim: &mut Simulation,
    policy: &mut Policy,
    epoch_len: u64,
) -> Result<EpochMeasurement, SimError> {
    let before = sim.metrics.clone();
    sim.run_slots(policy, epoch_len)?;
    let after = &sim.metrics;
    let len = epoch_len as f64;
    Ok(EpochMeasurement {
        mu: after
            .delivered
            .iter()
            .zip(&before.delivered)
            .map(|(&a, &b)| (a - b) as f64 / len)
            .collect(),
        eps: after
            .transmissions
            .iter()
            .zip(&before.transmissions)
            .map(|(&a, &b)| (a - b) as f64 / len)
            .collect(),
        demand: after
            .demand
            .iter()
            .zip(&before.demand)
            .map(|(&a, &b)| (a - b) as f64 / len)
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualReport {
    pub epochs: u64,
    /// Lagrangian at the running-average performance vector, per epoch.
    pub lagrangian_trace: Vec<f64>,
    /// Prices in effect during each epoch.
    pub lambda_trace: Vec<Vec<f64>>,
    /// Total utility at the running-average timely-throughputs, per epoch.
    pub utility_trace: Vec<f64>,
    pub final_mu: Vec<f64>,
    pub final_eps: Vec<f64>,
    pub final_lambda: Vec<f64>,
    /// Cumulative simulator counters over the whole run.
    pub metrics: crate::sim::Metrics,
}

#[derive(Clone)]
pub struct OptimizeOptions {
    pub epochs: u64,
    pub epoch_len: u64,
    pub beta0: f64,
    pub seed: u64,
    pub variant: Variant,
    /// When set, hold prices fixed for this many epochs per price step
    /// (the nested find-D-then-step variant); `None` interleaves one price
    /// update per epoch.
    pub nested_inner: Option<u64>,
    pub count_source_delivery: bool,
    pub max_states: usize,
    pub cache: Option<Arc<CandidateCache>>,
}

impl OptimizeOptions {
    pub fn new(epochs: u64, epoch_len: u64, beta0: f64, seed: u64) -> Self {
        OptimizeOptions {
            epochs,
            epoch_len,
            beta0,
            seed,
            variant: Variant::Relaxed,
            nested_inner: None,
            count_source_delivery: true,
            max_states: DEFAULT_MAX_STATES,
            cache: None,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_cache(mut self, cache: Arc<CandidateCache>) -> Self {
        self.cache = Some(cache);
        self
    }
}

#[derive(Error, Debug)]
pub enum DualError {
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("dual_value_exact requires constant marginal utilities; flow {flow} is {utility}")]
    NonConstantMarginal { flow: usize, utility: UtilityKind },
}

/// The full optimization loop.
pub fn optimize(topo: &Arc<Topology>, opts: &OptimizeOptions) -> Result<DualReport, DualError> {
    // The reachability prune is only sound for the relaxed recursion.
    let want_prune = opts.variant == Variant::Relaxed;
    let cache = match &opts.cache {
        Some(c) if c.pruned() == want_prune => Arc::clone(c),
        _ => Arc::new(CandidateCache::new(topo, want_prune)),
    };
    let mut sim = Simulation::new(Arc::clone(topo), {
        let mut o = SimOptions::new(opts.seed);
        o.count_source_delivery = opts.count_source_delivery;
        o
    });
    let mut state = EpochState::new(topo, opts.beta0, opts.epoch_len);
    let mut report = DualReport {
        epochs: opts.epochs,
        lagrangian_trace: Vec::new(),
        lambda_trace: Vec::new(),
        utility_trace: Vec::new(),
        final_mu: Vec::new(),
        final_eps: Vec::new(),
        final_lambda: Vec::new(),
        metrics: sim.metrics.clone(),
    };
    // With nesting, prices move once per block of inner epochs and the
    // step-size counter advances per block.
    let inner = opts.nested_inner.unwrap_or(1).max(1);
    let mut block_usage = vec![0.0; topo.links.len()];
    let mut block_pos = 0u64;
    let mut price_steps = 0u64;
    for k in 1..=opts.epochs {
        state.k = k;
        let mut tables = Vec::with_capacity(topo.flows.len());
        for f in 0..topo.flows.len() {
            let rewards = gradient_rewards(&state, topo, f);
            tables.push(PolicyTable::solve(
                topo,
                &cache,
                f,
                rewards,
                PriceVector(state.lambda.clone()),
                topo.flows[f].deadline,
                opts.variant,
                opts.max_states,
            )?);
        }
        let mut policy = Policy::Dsr {
            tables,
            variant: opts.variant,
        };
        let meas = run_epoch(&mut sim, &mut policy, opts.epoch_len)?;
        state.fold_measurement(&meas);

        report.lambda_trace.push(state.lambda.clone());
        let utility: f64 = topo
            .flows
            .iter()
            .map(|flow| {
                (0..topo.n_nodes)
                    .map(|n| {
                        flow.utility
                            .value(state.mu[topo.nf_index(NodeId(n as u8), flow.id)])
                    })
                    .sum::<f64>()
            })
            .sum();
        let overuse: f64 = topo
            .links
            .iter()
            .enumerate()
            .map(|(l, link)| {
                let used: f64 = (0..topo.flows.len())
                    .map(|f| state.eps[topo.lf_index(l, f)])
                    .sum();
                state.lambda[l] * (used - link.capacity as f64)
            })
            .sum();
        report.utility_trace.push(utility);
        report.lagrangian_trace.push(utility - overuse);

        // Price feed: realized transmissions for the relaxed regime,
        // uncapped positive-value demand for the index regime.
        let per_slot = match opts.variant {
            Variant::Relaxed => &meas.eps,
            Variant::Index => &meas.demand,
        };
        for l in 0..topo.links.len() {
            let used: f64 = (0..topo.flows.len())
                .map(|f| per_slot[topo.lf_index(l, f)])
                .sum();
            block_usage[l] += used;
        }
        block_pos += 1;
        if block_pos == inner {
            price_steps += 1;
            state.k = price_steps;
            for u in &mut block_usage {
                *u /= block_pos as f64;
            }
            update_prices(&mut state, &block_usage, topo);
            block_usage.iter_mut().for_each(|u| *u = 0.0);
            block_pos = 0;
        }
    }
    report.final_mu = state.mu;
    report.final_eps = state.eps;
    report.final_lambda = state.lambda;
    report.metrics = sim.metrics.clone();
    Ok(report)
}

/// Total utility of a report's final running averages.
pub fn total_utility(topo: &Topology, mu: &[f64]) -> f64 {
    topo.flows
        .iter()
        .map(|flow| {
            (0..topo.n_nodes)
                .map(|n| flow.utility.value(mu[topo.nf_index(NodeId(n as u8), flow.id)]))
                .sum::<f64>()
        })
        .sum()
}

/// Closed-form dual objective for constant per-node marginal utilities:
/// `D(lambda) = sum_f A_f * W_f(s_f, full, D_f) + sum_l lambda_l * T_l`.
///
/// Only valid when every flow's marginal utility is a constant (linear
/// utilities); rewards are the per-node constants.
pub fn dual_value_exact(
    topo: &Arc<Topology>,
    rewards: &RewardVector,
    prices: &PriceVector,
) -> Result<f64, DualError> {
    for flow in &topo.flows {
        if flow.utility != UtilityKind::Linear {
            return Err(DualError::NonConstantMarginal {
                flow: flow.id,
                utility: flow.utility,
            });
        }
    }
    let mut d: f64 = topo
        .links
        .iter()
        .enumerate()
        .map(|(l, link)| prices.0[l] * link.capacity as f64)
        .sum();
    for flow in &topo.flows {
        let mut table = PolicyTable::solve_relaxed(
            topo,
            flow.id,
            rewards.clone(),
            prices.clone(),
            flow.deadline,
        )?;
        d += flow.arrival_rate * table.root_value()?;
    }
    Ok(d)
}
