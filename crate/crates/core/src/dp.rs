//! Per-packet value function W(n, pi, tau) and its argmax action.
//!
//! The value of a packet held by node `n` with delegated set `pi` and
//! `tau` slots of remaining lifetime is the maximum expected sum of
//! per-node delivery rewards collectable inside `pi`, minus link prices
//! paid per transmission attempt. Two variants:
//!
//! - relaxed: the holder may also do nothing in a slot;
//! - index: the holder is forced to transmit whenever a link into its
//!   delegated set exists, so values can go negative and become sortable
//!   per-link priorities.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::net::{NodeId, NodeSet, PacketReplica, Topology};

/// Absolute tolerance applied before tie-breaking in the argmax.
pub const VALUE_TIE_TOL: f64 = 1e-12;

/// Default cap on table size, counted in (state, tau) value slots.
pub const DEFAULT_MAX_STATES: usize = 8_000_000;

/// Marginal utility of delivering one more packet to each node.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardVector(pub Vec<f64>);

impl RewardVector {
    pub fn uniform(n_nodes: usize, value: f64) -> Self {
        RewardVector(vec![value; n_nodes])
    }
}

/// Lagrange multiplier per link.
#[derive(Clone, Debug, PartialEq)]
pub struct PriceVector(pub Vec<f64>);

impl PriceVector {
    pub fn zeros(n_links: usize) -> Self {
        PriceVector(vec![0.0; n_links])
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Variant {
    Relaxed,
    Index,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Relaxed => write!(f, "relaxed"),
            Variant::Index => write!(f, "index"),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Debug)]
pub enum Action {
    NoTransmit,
    Transmit {
        link: usize,
        receiver: NodeId,
        subset: NodeSet,
    },
}

#[derive(Error, Debug)]
pub enum DpError {
    #[error("policy table would exceed the state budget of {limit} value slots ({visited} states visited, horizon {horizon})")]
    StateBudget {
        limit: usize,
        visited: usize,
        horizon: u32,
    },
    #[error("packet expired: no slots remain")]
    Expired,
    #[error("replica remaining {remaining} exceeds table horizon {horizon}")]
    BeyondHorizon { remaining: u32, horizon: u32 },
    #[error("holder {holder} not a member of its delegated set {delegated}")]
    HolderNotDelegated { holder: NodeId, delegated: NodeSet },
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    link: u32,
    receiver: u8,
    subset: u64,
    reliability: f64,
}

/// Per-topology cache of delegation candidates per (holder, delegated set).
///
/// A candidate is a link `n -> m` with `m` in the set, together with a
/// subset of the set containing `m` but not `n`. With pruning enabled,
/// subsets with members unreachable from `m` inside the subset are
/// skipped: those members can collect no reward there and only shrink the
/// residual set, so under the relaxed recursion pruning never changes the
/// max.
///
/// Pruning is unsound for the forced-transmission recursion: handing
/// unreachable members to a neighbor can park them in a state with no
/// outgoing link, which escapes a forced transmission the residual holder
/// would otherwise pay for. Solve the index variant with `prune = false`.
///
/// Candidate structure depends only on links, so one cache serves every
/// flow, horizon, and epoch, and may be shared across threads.
pub struct CandidateCache {
    prune: bool,
    // (link id, receiver, reliability) per transmitter.
    out_adj: Vec<Vec<(u32, u8, f64)>>,
    map: Mutex<CandidateMap>,
}

type CandidateMap = HashMap<(u8, u64), Arc<[Candidate]>>;

impl CandidateCache {
    pub fn new(topo: &Topology, prune: bool) -> Self {
        let mut out_adj = vec![Vec::new(); topo.n_nodes];
        for l in &topo.links {
            out_adj[l.tx.index()].push((l.id as u32, l.rx.0, l.reliability));
        }
        for adj in &mut out_adj {
            adj.sort_by_key(|&(_, rx, _)| rx);
        }
        CandidateCache {
            prune,
            out_adj,
            map: Mutex::new(HashMap::new()),
        }
    }

    pub fn pruned(&self) -> bool {
        self.prune
    }

    fn reachable_within(&self, from: u8, mask: u64) -> bool {
        let mut seen = 1u64 << from;
        let mut frontier = seen;
        while frontier != 0 {
            let mut next = 0u64;
            let mut bits = frontier;
            while bits != 0 {
                let u = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                for &(_, v, _) in &self.out_adj[u] {
                    next |= (1u64 << v) & mask;
                }
            }
            next &= !seen;
            seen |= next;
            frontier = next;
        }
        seen & mask == mask
    }

    fn get(&self, holder: u8, mask: u64) -> Arc<[Candidate]> {
        if let Some(hit) = self.map.lock().unwrap().get(&(holder, mask)) {
            return Arc::clone(hit);
        }
        let mut cands = Vec::new();
        let others = mask & !(1u64 << holder);
        for &(link, rx, p) in &self.out_adj[holder as usize] {
            if others & (1u64 << rx) == 0 {
                continue;
            }
            let base = others & !(1u64 << rx);
            let mut sub = 0u64;
            loop {
                let subset = sub | (1u64 << rx);
                if !self.prune || self.reachable_within(rx, subset) {
                    cands.push(Candidate {
                        link,
                        receiver: rx,
                        subset,
                        reliability: p,
                    });
                }
                if sub == base {
                    break;
                }
                sub = (sub.wrapping_sub(base)) & base;
            }
        }
        // Argmax tie order: lowest receiver, then smallest subset by
        // popcount, then lowest mask value.
        cands.sort_by_key(|c| (c.receiver, c.subset.count_ones(), c.subset));
        let arc: Arc<[Candidate]> = cands.into();
        Arc::clone(
            self.map
                .lock()
                .unwrap()
                .entry((holder, mask))
                .or_insert(arc),
        )
    }
}

struct StateValues {
    values: Vec<f64>,
    actions: Vec<Action>,
}

/// Memoized W values and argmax actions for one flow at fixed rewards,
/// prices, and horizon. States are keyed by (holder, delegated-set mask)
/// and materialized lazily from whatever root states are queried; values
/// for all lifetimes 0..=horizon are filled per state.
pub struct PolicyTable {
    topo: Arc<Topology>,
    cands: Arc<CandidateCache>,
    pub flow: usize,
    pub variant: Variant,
    pub horizon: u32,
    rewards: RewardVector,
    prices: PriceVector,
    memo: HashMap<(u8, u64), StateValues>,
    max_states: usize,
}

impl std::fmt::Debug for PolicyTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PolicyTable")
            .field("flow", &self.flow)
            .field("variant", &self.variant)
            .field("horizon", &self.horizon)
            .field("states", &self.memo.len())
            .finish()
    }
}

impl PolicyTable {
    /// Builds the table for one flow, eagerly solving from the root state
    /// (source, full node set).
    #[allow(clippy::too_many_arguments)]
    pub fn solve(
        topo: &Arc<Topology>,
        cands: &Arc<CandidateCache>,
        flow: usize,
        rewards: RewardVector,
        prices: PriceVector,
        horizon: u32,
        variant: Variant,
        max_states: usize,
    ) -> Result<PolicyTable, DpError> {
        assert_eq!(rewards.0.len(), topo.n_nodes, "reward vector length");
        assert_eq!(prices.0.len(), topo.links.len(), "price vector length");
        assert!(horizon >= 1, "horizon must be at least 1");
        assert!(
            variant == Variant::Relaxed || !cands.pruned(),
            "index recursion requires an unpruned candidate cache"
        );
        let mut table = PolicyTable {
            topo: Arc::clone(topo),
            cands: Arc::clone(cands),
            flow,
            variant,
            horizon,
            rewards,
            prices,
            memo: HashMap::new(),
            max_states,
        };
        let source = table.topo.flows[flow].source;
        let full = table.topo.full_set().bits();
        table.ensure(source.0, full)?;
        Ok(table)
    }

    /// Relaxed recursion (no-transmit branch always available).
    pub fn solve_relaxed(
        topo: &Arc<Topology>,
        flow: usize,
        rewards: RewardVector,
        prices: PriceVector,
        horizon: u32,
    ) -> Result<PolicyTable, DpError> {
        let cands = Arc::new(CandidateCache::new(topo, true));
        Self::solve(
            topo,
            &cands,
            flow,
            rewards,
            prices,
            horizon,
            Variant::Relaxed,
            DEFAULT_MAX_STATES,
        )
    }

    /// Index recursion (transmission forced while a usable link exists).
    /// Uses an unpruned candidate cache; see [`CandidateCache`].
    pub fn solve_index(
        topo: &Arc<Topology>,
        flow: usize,
        rewards: RewardVector,
        prices: PriceVector,
        horizon: u32,
    ) -> Result<PolicyTable, DpError> {
        let cands = Arc::new(CandidateCache::new(topo, false));
        Self::solve(
            topo,
            &cands,
            flow,
            rewards,
            prices,
            horizon,
            Variant::Index,
            DEFAULT_MAX_STATES,
        )
    }

    fn ensure(&mut self, holder: u8, mask: u64) -> Result<(), DpError> {
        if self.memo.contains_key(&(holder, mask)) {
            return Ok(());
        }
        let cands = self.cands.get(holder, mask);
        for c in cands.iter() {
            self.ensure(holder, mask & !c.subset)?;
            self.ensure(c.receiver, c.subset)?;
        }
        let h = self.horizon as usize;
        if (self.memo.len() + 1) * (h + 1) > self.max_states {
            return Err(DpError::StateBudget {
                limit: self.max_states,
                visited: self.memo.len(),
                horizon: self.horizon,
            });
        }
        let entry = {
            struct Arm<'a> {
                wn: &'a [f64],
                wm: &'a [f64],
                p: f64,
                price: f64,
                act: Action,
            }
            let arms: Vec<Arm> = cands
                .iter()
                .map(|c| Arm {
                    wn: &self.memo[&(holder, mask & !c.subset)].values,
                    wm: &self.memo[&(c.receiver, c.subset)].values,
                    p: c.reliability,
                    price: self.prices.0[c.link as usize],
                    act: Action::Transmit {
                        link: c.link as usize,
                        receiver: NodeId(c.receiver),
                        subset: NodeSet::from_bits(c.subset),
                    },
                })
                .collect();
            let mut values = Vec::with_capacity(h + 1);
            let mut actions = Vec::with_capacity(h + 1);
            values.push(self.rewards.0[holder as usize]);
            actions.push(Action::NoTransmit);
            for tau in 1..=h {
                let stay = values[tau - 1];
                let arm_value =
                    |a: &Arm| a.p * (a.wn[tau - 1] + a.wm[tau - 1]) + (1.0 - a.p) * stay - a.price;
                let (best, act) = match self.variant {
                    Variant::Relaxed => {
                        let mut best = stay;
                        let mut act = Action::NoTransmit;
                        for a in &arms {
                            let v = arm_value(a);
                            if v > best + VALUE_TIE_TOL {
                                best = v;
                                act = a.act;
                            }
                        }
                        (best, act)
                    }
                    Variant::Index => {
                        if arms.is_empty() {
                            (stay, Action::NoTransmit)
                        } else {
                            let mut best = arm_value(&arms[0]);
                            let mut act = arms[0].act;
                            for a in &arms[1..] {
                                let v = arm_value(a);
                                if v > best + VALUE_TIE_TOL {
                                    best = v;
                                    act = a.act;
                                }
                            }
                            (best, act)
                        }
                    }
                };
                values.push(best);
                actions.push(act);
            }
            StateValues { values, actions }
        };
        self.memo.insert((holder, mask), entry);
        Ok(())
    }

    /// W value for an arbitrary state, computing it on demand.
    pub fn value_at(&mut self, holder: NodeId, set: NodeSet, tau: u32) -> Result<f64, DpError> {
        if tau > self.horizon {
            return Err(DpError::BeyondHorizon {
                remaining: tau,
                horizon: self.horizon,
            });
        }
        if !set.contains(holder) {
            return Err(DpError::HolderNotDelegated {
                holder,
                delegated: set,
            });
        }
        self.ensure(holder.0, set.bits())?;
        Ok(self.memo[&(holder.0, set.bits())].values[tau as usize])
    }

    /// Value of the root state (source, full set, horizon).
    pub fn root_value(&mut self) -> Result<f64, DpError> {
        let source = self.topo.flows[self.flow].source;
        self.value_at(source, self.topo.full_set(), self.horizon)
    }

    /// Stored argmax action and value for a replica's state. A replica
    /// left over from an earlier plan is solved on demand.
    pub fn best_action(&mut self, replica: &PacketReplica) -> Result<(Action, f64), DpError> {
        if replica.remaining == 0 {
            return Err(DpError::Expired);
        }
        if replica.remaining > self.horizon {
            return Err(DpError::BeyondHorizon {
                remaining: replica.remaining,
                horizon: self.horizon,
            });
        }
        if !replica.delegated.contains(replica.holder) {
            return Err(DpError::HolderNotDelegated {
                holder: replica.holder,
                delegated: replica.delegated,
            });
        }
        self.ensure(replica.holder.0, replica.delegated.bits())?;
        let s = &self.memo[&(replica.holder.0, replica.delegated.bits())];
        let tau = replica.remaining as usize;
        Ok((s.actions[tau], s.values[tau]))
    }

    /// Iterates all materialized (holder, set, tau, value) entries.
    pub fn states(&self) -> impl Iterator<Item = (NodeId, NodeSet, u32, f64)> + '_ {
        self.memo.iter().flat_map(|(&(h, m), sv)| {
            sv.values
                .iter()
                .enumerate()
                .map(move |(tau, &v)| (NodeId(h), NodeSet::from_bits(m), tau as u32, v))
        })
    }

    /// Text dump: one line per (state, tau), sorted, for golden tests and
    /// the `dump-policy` CLI verb.
    pub fn dump(&self) -> String {
        let mut keys: Vec<_> = self.memo.keys().copied().collect();
        keys.sort();
        let mut out = String::new();
        for (h, m) in keys {
            let sv = &self.memo[&(h, m)];
            for tau in 0..sv.values.len() {
                let act = match sv.actions[tau] {
                    Action::NoTransmit => "hold".to_string(),
                    Action::Transmit {
                        link,
                        receiver,
                        subset,
                    } => format!("tx link={link} to={receiver} subset={subset}"),
                };
                out.push_str(&format!(
                    "holder={} set={} tau={} value={:.9} action={}\n",
                    h,
                    NodeSet::from_bits(m),
                    tau,
                    sv.values[tau],
                    act
                ));
            }
        }
        out
    }
}
