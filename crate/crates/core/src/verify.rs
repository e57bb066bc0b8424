//! Self-check suite: random small instances where the DP, the dual
//! objective, and the simulator can be compared against brute-force
//! ground truth.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::dp::{PolicyTable, PriceVector, RewardVector, Variant};
use crate::dual::{dual_value_exact, optimize, OptimizeOptions};
use crate::net::{NodeId, Topology};
use crate::oracle::{enumerate_exact, expected_usage};
use crate::sim::{simulate, Policy, SimOptions};

pub const VERIFY_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug)]
pub struct VerifyLimits {
    pub max_nodes: usize,
    pub max_horizon: u32,
    pub instances: usize,
    pub seed: u64,
}

impl Default for VerifyLimits {
    fn default() -> Self {
        VerifyLimits {
            max_nodes: 4,
            max_horizon: 3,
            instances: 200,
            seed: 0x5eed,
        }
    }
}

/// Result of one named check over many random instances.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub instances: usize,
    pub failures: usize,
    /// Serialized counterexamples, at most a handful.
    pub counterexamples: Vec<String>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} ({} instances, {} failures)",
            self.name,
            if self.passed() { "PASS" } else { "FAIL" },
            self.instances,
            self.failures
        )?;
        for c in &self.counterexamples {
            write!(f, "\n  counterexample:\n{c}")?;
        }
        Ok(())
    }
}

/// One randomly drawn test instance: a small topology with one linear
/// flow, per-node rewards, and per-link prices.
pub struct Instance {
    pub topo: Arc<Topology>,
    pub rewards: RewardVector,
    pub prices: PriceVector,
    pub horizon: u32,
    pub seed_tag: u64,
}

impl Instance {
    /// Serializes the instance so a failure can be replayed by hand.
    pub fn describe(&self) -> String {
        let t = &self.topo;
        let mut out = String::new();
        writeln!(out, "    instance tag {}", self.seed_tag).unwrap();
        writeln!(out, "    nodes {}", t.n_nodes).unwrap();
        for l in &t.links {
            writeln!(
                out,
                "    link {} {} {} {}",
                l.tx.0, l.rx.0, l.capacity, l.reliability
            )
            .unwrap();
        }
        for f in &t.flows {
            writeln!(out, "    flow {} {} {}", f.source.0, f.arrival_rate, f.deadline).unwrap();
        }
        writeln!(out, "    horizon {}", self.horizon).unwrap();
        writeln!(out, "    rewards {:?}", self.rewards.0).unwrap();
        writeln!(out, "    prices {:?}", self.prices.0).unwrap();
        out
    }
}

/// Draws a random instance inside the oracle's size limits.
pub fn random_instance(rng: &mut ChaCha12Rng, limits: &VerifyLimits, tag: u64) -> Instance {
    let n = rng.gen_range(2..=limits.max_nodes.clamp(2, 4));
    let mut topo = Topology::new(n);
    for a in 0..n {
        for b in 0..n {
            if a != b && rng.gen_bool(0.5) {
                let capacity = rng.gen_range(1..=5);
                let reliability = rng.gen_range(0.5..=1.0);
                topo.add_link(NodeId(a as u8), NodeId(b as u8), capacity, reliability);
            }
        }
    }
    let source = NodeId(rng.gen_range(0..n) as u8);
    let horizon = rng.gen_range(1..=limits.max_horizon.clamp(1, 3));
    let rate: f64 = rng.gen_range(0.5..=2.0);
    topo.add_flow(source, rate, horizon);
    let rewards = RewardVector((0..n).map(|_| rng.gen_range(0.0..=1.0)).collect());
    let prices = PriceVector((0..topo.links.len()).map(|_| rng.gen_range(0.0..=2.0)).collect());
    Instance {
        topo: Arc::new(topo),
        rewards,
        prices,
        horizon,
        seed_tag: tag,
    }
}

fn record_failure(outcome: &mut CheckOutcome, inst: &Instance, detail: String) {
    outcome.failures += 1;
    if outcome.counterexamples.len() < 3 {
        outcome.counterexamples.push(format!("{}    {detail}", inst.describe()));
    }
}

/// DP root value equals the exhaustive single-packet optimum, for both
/// recursion variants.
pub fn check_oracle_agreement(limits: &VerifyLimits) -> CheckOutcome {
    let mut rng = ChaCha12Rng::seed_from_u64(limits.seed ^ 0x0a1);
    let mut outcome = CheckOutcome {
        name: "oracle-agreement",
        instances: limits.instances,
        failures: 0,
        counterexamples: Vec::new(),
    };
    for i in 0..limits.instances {
        let inst = random_instance(&mut rng, limits, i as u64);
        for variant in [Variant::Relaxed, Variant::Index] {
            let dp = PolicyTable::solve_relaxed(
                &inst.topo,
                0,
                inst.rewards.clone(),
                inst.prices.clone(),
                inst.horizon,
            );
            let mut dp = match variant {
                Variant::Relaxed => dp,
                Variant::Index => PolicyTable::solve_index(
                    &inst.topo,
                    0,
                    inst.rewards.clone(),
                    inst.prices.clone(),
                    inst.horizon,
                ),
            }
            .expect("instances fit in the state budget");
            let dp_value = dp.root_value().unwrap();
            let oracle = enumerate_exact(
                &inst.topo,
                0,
                &inst.rewards,
                &inst.prices,
                inst.horizon,
                variant,
            )
            .unwrap();
            if (dp_value - oracle).abs() > VERIFY_TOL {
                record_failure(
                    &mut outcome,
                    &inst,
                    format!("{variant}: dp {dp_value} oracle {oracle}"),
                );
            }
        }
    }
    outcome
}

/// The first-order convexity inequality that certifies a subgradient:
/// `d_prime >= d + g . (lambda_prime - lambda) - tol`.
pub fn subgradient_holds(
    d: f64,
    d_prime: f64,
    g: &[f64],
    lambda: &[f64],
    lambda_prime: &[f64],
    tol: f64,
) -> bool {
    let linear: f64 = g
        .iter()
        .zip(lambda_prime.iter().zip(lambda))
        .map(|(gl, (lp, l))| gl * (lp - l))
        .sum();
    d_prime >= d + linear - tol
}

/// `T_l - sum_f A_f * usage_{f,l}` is a subgradient of the dual objective.
pub fn check_subgradient(limits: &VerifyLimits, pairs_per_instance: usize) -> CheckOutcome {
    let mut rng = ChaCha12Rng::seed_from_u64(limits.seed ^ 0x0b2);
    let mut outcome = CheckOutcome {
        name: "subgradient-inequality",
        instances: limits.instances,
        failures: 0,
        counterexamples: Vec::new(),
    };
    for i in 0..limits.instances {
        let inst = random_instance(&mut rng, limits, i as u64);
        let t = &inst.topo;
        let n_links = t.links.len();
        let rate = t.flows[0].arrival_rate;
        // Unit rewards: the dual closed form assumes constant marginal
        // utility, which for linear utility is 1 at every node.
        let rewards = RewardVector::uniform(t.n_nodes, 1.0);
        for _ in 0..pairs_per_instance {
            let lambda = PriceVector((0..n_links).map(|_| rng.gen_range(0.0..=2.0)).collect());
            let lambda_prime =
                PriceVector((0..n_links).map(|_| rng.gen_range(0.0..=2.0)).collect());
            let d = dual_value_exact(t, &rewards, &lambda).unwrap();
            let d_prime = dual_value_exact(t, &rewards, &lambda_prime).unwrap();
            let usage = expected_usage(t, 0, &rewards, &lambda, inst.horizon).unwrap();
            let g: Vec<f64> = t
                .links
                .iter()
                .enumerate()
                .map(|(l, link)| link.capacity as f64 - rate * usage[l])
                .collect();
            if !subgradient_holds(d, d_prime, &g, &lambda.0, &lambda_prime.0, VERIFY_TOL) {
                record_failure(
                    &mut outcome,
                    &inst,
                    format!(
                        "d {d} d' {d_prime} g {g:?} lambda {:?} lambda' {:?}",
                        lambda.0, lambda_prime.0
                    ),
                );
            }
        }
    }
    outcome
}

/// Replica delegated sets partition the node set in every slot; the
/// simulator checks this per slot and errors out on violation.
pub fn check_partition_invariant(limits: &VerifyLimits) -> CheckOutcome {
    let mut rng = ChaCha12Rng::seed_from_u64(limits.seed ^ 0x0c3);
    let mut outcome = CheckOutcome {
        name: "partition-invariant",
        instances: limits.instances,
        failures: 0,
        counterexamples: Vec::new(),
    };
    for i in 0..limits.instances {
        let inst = random_instance(&mut rng, limits, i as u64);
        for variant in [Variant::Relaxed, Variant::Index] {
            let table = match variant {
                Variant::Relaxed => PolicyTable::solve_relaxed(
                    &inst.topo,
                    0,
                    inst.rewards.clone(),
                    inst.prices.clone(),
                    inst.horizon,
                ),
                Variant::Index => PolicyTable::solve_index(
                    &inst.topo,
                    0,
                    inst.rewards.clone(),
                    inst.prices.clone(),
                    inst.horizon,
                ),
            }
            .unwrap();
            let mut policy = Policy::Dsr {
                tables: vec![table],
                variant,
            };
            let mut opts = SimOptions::new(limits.seed.wrapping_add(i as u64));
            opts.check_invariants = true;
            if let Err(e) = simulate(&inst.topo, &mut policy, 200, opts) {
                record_failure(&mut outcome, &inst, format!("{variant}: {e}"));
            }
        }
    }
    outcome
}

/// Projected price updates never go negative.
pub fn check_price_nonnegativity(limits: &VerifyLimits) -> CheckOutcome {
    let mut rng = ChaCha12Rng::seed_from_u64(limits.seed ^ 0x0d4);
    let instances = limits.instances.min(20);
    let mut outcome = CheckOutcome {
        name: "price-nonnegativity",
        instances,
        failures: 0,
        counterexamples: Vec::new(),
    };
    for i in 0..instances {
        let inst = random_instance(&mut rng, limits, i as u64);
        let opts = OptimizeOptions::new(10, 100, 1.0, limits.seed.wrapping_add(i as u64));
        let report = optimize(&inst.topo, &opts).unwrap();
        if report
            .lambda_trace
            .iter()
            .any(|lam| lam.iter().any(|&x| x < 0.0))
        {
            record_failure(&mut outcome, &inst, "negative price in trace".to_string());
        }
    }
    outcome
}

/// Runs every check; the CLI exits nonzero when any outcome fails.
pub fn run_all(limits: &VerifyLimits) -> Vec<CheckOutcome> {
    vec![
        check_oracle_agreement(limits),
        check_subgradient(limits, 20),
        check_partition_invariant(limits),
        check_price_nonnegativity(limits),
    ]
}
