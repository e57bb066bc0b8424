//! Exhaustive verifier for tiny instances.
//!
//! Enumerates every deterministic history-dependent single-packet strategy
//! over the full outcome tree: the joint state is the partition of the
//! node set among holders plus the remaining lifetime, every holder picks
//! an action each slot, and transmission outcomes branch with per-link
//! probabilities. Strictly richer than the per-state stationary actions of
//! the DP, so agreement also certifies that (holder, set, lifetime) is a
//! sufficient statistic.

use std::collections::HashMap;

use thiserror::Error;

use crate::dp::{PriceVector, RewardVector, Variant, VALUE_TIE_TOL};
use crate::net::Topology;

pub const ORACLE_MAX_NODES: usize = 4;
pub const ORACLE_MAX_HORIZON: u32 = 3;

#[derive(Error, Debug)]
pub enum OracleError {
    #[error("instance too large for exhaustive enumeration: {nodes} nodes, horizon {horizon} (limits {max_nodes}, {max_horizon})")]
    TooLarge {
        nodes: usize,
        horizon: u32,
        max_nodes: usize,
        max_horizon: u32,
    },
}

/// One replica's transmission choice inside a joint action.
#[derive(Clone, Copy, Debug)]
struct Act {
    link: usize,
    receiver: u8,
    subset: u64,
    reliability: f64,
    price: f64,
}

/// Partition state: (holder, delegated mask) pairs, sorted by holder.
type Parts = Vec<(u8, u64)>;

struct Solver<'a> {
    topo: &'a Topology,
    rewards: &'a [f64],
    prices: &'a [f64],
    variant: Variant,
    // Optimal value and chosen action per holder, keyed by (partition, tau).
    memo: HashMap<(Parts, u32), Committed>,
    usage_memo: HashMap<(Parts, u32), Vec<f64>>,
}

type Committed = (f64, Vec<Option<Act>>);

impl<'a> Solver<'a> {
    fn holder_options(&self, holder: u8, mask: u64) -> Vec<Option<Act>> {
        let mut cands = Vec::new();
        let others = mask & !(1u64 << holder);
        for l in self.topo.links.iter().filter(|l| l.tx.0 == holder) {
            let rx = l.rx.0;
            if others & (1u64 << rx) == 0 {
                continue;
            }
            let base = others & !(1u64 << rx);
            let mut sub = 0u64;
            loop {
                cands.push(Some(Act {
                    link: l.id,
                    receiver: rx,
                    subset: sub | (1u64 << rx),
                    reliability: l.reliability,
                    price: self.prices[l.id],
                }));
                if sub == base {
                    break;
                }
                sub = (sub.wrapping_sub(base)) & base;
            }
        }
        cands.sort_by_key(|a| {
            let a = a.unwrap();
            (a.receiver, a.subset.count_ones(), a.subset)
        });
        match self.variant {
            Variant::Relaxed => {
                let mut opts = vec![None];
                opts.extend(cands);
                opts
            }
            Variant::Index => {
                if cands.is_empty() {
                    vec![None]
                } else {
                    cands
                }
            }
        }
    }

    /// Expected future reward minus prices from `parts` with `tau` slots
    /// left; boundary rewards of already-reached holders are excluded
    /// (they are credited at delivery time by the caller).
    fn value(&mut self, parts: &Parts, tau: u32) -> f64 {
        if tau == 0 {
            return 0.0;
        }
        let key = (parts.clone(), tau);
        if let Some((v, _)) = self.memo.get(&key) {
            return *v;
        }
        let options: Vec<Vec<Option<Act>>> = parts
            .iter()
            .map(|&(h, m)| self.holder_options(h, m))
            .collect();
        let mut choice = vec![0usize; parts.len()];
        let mut best = f64::NEG_INFINITY;
        let mut best_action: Vec<Option<Act>> = Vec::new();
        loop {
            let joint: Vec<Option<Act>> = choice
                .iter()
                .enumerate()
                .map(|(i, &c)| options[i][c])
                .collect();
            let v = self.joint_value(parts, &joint, tau);
            if v > best + VALUE_TIE_TOL {
                best = v;
                best_action = joint;
            }
            // Odometer over the cartesian product of per-holder options.
            let mut i = 0;
            loop {
                if i == choice.len() {
                    break;
                }
                choice[i] += 1;
                if choice[i] < options[i].len() {
                    break;
                }
                choice[i] = 0;
                i += 1;
            }
            if i == choice.len() {
                break;
            }
        }
        self.memo.insert(key, (best, best_action));
        best
    }

    fn joint_value(&mut self, parts: &Parts, joint: &[Option<Act>], tau: u32) -> f64 {
        let attempts: Vec<(usize, Act)> = joint
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.map(|a| (i, a)))
            .collect();
        let cost: f64 = attempts.iter().map(|(_, a)| a.price).sum();
        let mut total = -cost;
        for outcome in 0u32..(1 << attempts.len()) {
            let mut prob = 1.0;
            let mut gain = 0.0;
            let mut next = parts.clone();
            for (bit, &(i, a)) in attempts.iter().enumerate() {
                if outcome & (1 << bit) != 0 {
                    prob *= a.reliability;
                    gain += self.rewards[a.receiver as usize];
                    next[i].1 &= !a.subset;
                    next.push((a.receiver, a.subset));
                } else {
                    prob *= 1.0 - a.reliability;
                }
            }
            if prob == 0.0 {
                continue;
            }
            next.sort_unstable();
            total += prob * (gain + self.value(&next, tau - 1));
        }
        total
    }

    /// Expected transmissions per link under the committed optimal policy.
    fn usage(&mut self, parts: &Parts, tau: u32) -> Vec<f64> {
        let n_links = self.topo.links.len();
        if tau == 0 {
            return vec![0.0; n_links];
        }
        let key = (parts.clone(), tau);
        if let Some(u) = self.usage_memo.get(&key) {
            return u.clone();
        }
        let joint = self.memo.get(&key).expect("value pass must run first").1.clone();
        let attempts: Vec<(usize, Act)> = joint
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.map(|a| (i, a)))
            .collect();
        let mut usage = vec![0.0; n_links];
        for (_, a) in &attempts {
            usage[a.link] += 1.0;
        }
        for outcome in 0u32..(1 << attempts.len()) {
            let mut prob = 1.0;
            let mut next = parts.clone();
            for (bit, &(i, a)) in attempts.iter().enumerate() {
                if outcome & (1 << bit) != 0 {
                    prob *= a.reliability;
                    next[i].1 &= !a.subset;
                    next.push((a.receiver, a.subset));
                } else {
                    prob *= 1.0 - a.reliability;
                }
            }
            if prob == 0.0 {
                continue;
            }
            next.sort_unstable();
            let child = self.usage(&next, tau - 1);
            for (u, c) in usage.iter_mut().zip(child) {
                *u += prob * c;
            }
        }
        self.usage_memo.insert(key, usage.clone());
        usage
    }
}

fn guard(topo: &Topology, horizon: u32) -> Result<(), OracleError> {
    if topo.n_nodes > ORACLE_MAX_NODES || horizon > ORACLE_MAX_HORIZON {
        return Err(OracleError::TooLarge {
            nodes: topo.n_nodes,
            horizon,
            max_nodes: ORACLE_MAX_NODES,
            max_horizon: ORACLE_MAX_HORIZON,
        });
    }
    Ok(())
}

/// Exact maximum of expected delivery rewards minus expected transmission
/// prices for a single packet of `flow`, over all history-dependent
/// strategies. The source's own reward is included.
pub fn enumerate_exact(
    topo: &Topology,
    flow: usize,
    rewards: &RewardVector,
    prices: &PriceVector,
    horizon: u32,
    variant: Variant,
) -> Result<f64, OracleError> {
    guard(topo, horizon)?;
    let mut solver = Solver {
        topo,
        rewards: &rewards.0,
        prices: &prices.0,
        variant,
        memo: HashMap::new(),
        usage_memo: HashMap::new(),
    };
    let source = topo.flows[flow].source;
    let root: Parts = vec![(source.0, topo.full_set().bits())];
    Ok(rewards.0[source.index()] + solver.value(&root, horizon))
}

/// Expected per-packet transmissions per link under the relaxed optimal
/// strategy (the argmax committed by `enumerate_exact`, same tie-break
/// order as the DP).
pub fn expected_usage(
    topo: &Topology,
    flow: usize,
    rewards: &RewardVector,
    prices: &PriceVector,
    horizon: u32,
) -> Result<Vec<f64>, OracleError> {
    guard(topo, horizon)?;
    let mut solver = Solver {
        topo,
        rewards: &rewards.0,
        prices: &prices.0,
        variant: Variant::Relaxed,
        memo: HashMap::new(),
        usage_memo: HashMap::new(),
    };
    let source = topo.flows[flow].source;
    let root: Parts = vec![(source.0, topo.full_set().bits())];
    solver.value(&root, horizon);
    Ok(solver.usage(&root, horizon))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{NodeId, Topology};

    #[test]
    fn singleton_network_is_just_the_reward() {
        let mut t = Topology::new(1);
        t.add_flow(NodeId(0), 1.0, 2);
        let v = enumerate_exact(
            &t,
            0,
            &RewardVector(vec![0.7]),
            &PriceVector::zeros(0),
            2,
            Variant::Relaxed,
        )
        .unwrap();
        assert_eq!(v, 0.7);
        let u = expected_usage(&t, 0, &RewardVector(vec![0.7]), &PriceVector::zeros(0), 2).unwrap();
        assert!(u.is_empty());
    }

    #[test]
    fn two_node_worked_example_matches_dp_numbers() {
        let mut t = Topology::new(2);
        t.add_link(NodeId(0), NodeId(1), 1, 0.5);
        t.add_flow(NodeId(0), 1.0, 1);
        let v = enumerate_exact(
            &t,
            0,
            &RewardVector::uniform(2, 1.0),
            &PriceVector(vec![0.3]),
            1,
            Variant::Relaxed,
        )
        .unwrap();
        assert!((v - 1.2).abs() < 1e-12);
        let vi = enumerate_exact(
            &t,
            0,
            &RewardVector::uniform(2, 1.0),
            &PriceVector(vec![2.0]),
            1,
            Variant::Index,
        )
        .unwrap();
        assert!((vi + 0.5).abs() < 1e-12);
    }

    #[test]
    fn huge_price_means_no_usage() {
        let mut t = Topology::new(3);
        t.add_link(NodeId(0), NodeId(1), 1, 0.9);
        t.add_link(NodeId(1), NodeId(2), 1, 0.9);
        t.add_flow(NodeId(0), 1.0, 3);
        let u = expected_usage(
            &t,
            0,
            &RewardVector::uniform(3, 1.0),
            &PriceVector(vec![100.0, 100.0]),
            3,
        )
        .unwrap();
        assert!(u.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn reliable_free_link_is_used_once() {
        let mut t = Topology::new(2);
        t.add_link(NodeId(0), NodeId(1), 1, 1.0);
        t.add_flow(NodeId(0), 1.0, 1);
        let u = expected_usage(
            &t,
            0,
            &RewardVector::uniform(2, 1.0),
            &PriceVector::zeros(1),
            1,
        )
        .unwrap();
        assert!((u[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn parallel_relays_prefer_the_cheaper_one() {
        // 0 -> 1 -> 3 and 0 -> 2 -> 3 with identical reliabilities; the
        // relay through 1 is cheaper on both hops.
        let mut t = Topology::new(4);
        t.add_link(NodeId(0), NodeId(1), 1, 0.9);
        t.add_link(NodeId(0), NodeId(2), 1, 0.9);
        t.add_link(NodeId(1), NodeId(3), 1, 0.9);
        t.add_link(NodeId(2), NodeId(3), 1, 0.9);
        t.add_flow(NodeId(0), 1.0, 2);
        let u = expected_usage(
            &t,
            0,
            &RewardVector(vec![0.0, 0.0, 0.0, 1.0]),
            &PriceVector(vec![0.01, 0.3, 0.01, 0.3]),
            2,
        )
        .unwrap();
        assert!(u[0] > 0.0 && u[2] > 0.0);
        assert_eq!(u[1], 0.0);
        assert_eq!(u[3], 0.0);
    }

    #[test]
    fn size_guard_refuses_large_instances() {
        let mut t = Topology::new(5);
        t.add_flow(NodeId(0), 1.0, 2);
        let err = enumerate_exact(
            &t,
            0,
            &RewardVector::uniform(5, 1.0),
            &PriceVector::zeros(0),
            2,
            Variant::Relaxed,
        )
        .unwrap_err();
        assert!(matches!(err, OracleError::TooLarge { .. }));
    }
}
