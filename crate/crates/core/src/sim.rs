//! Slotted-time stochastic simulation of the network executing a policy.
//!
//! Slot order: Poisson arrivals, action selection, transmission attempts
//! (Bernoulli per link draw), end-of-slot aggregated ACKs applying the
//! delegated-set splits, lifetime decrement, deadline expiry. The
//! delegated-set partition invariant is checked after every slot.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::dp::{Action, DpError, PolicyTable, Variant};
use crate::net::{split_delegation, NodeId, NodeSet, PacketReplica, Topology};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SlotEventKind {
    Arrival,
    TransmitAttempt,
    DeliverySuccess,
    DeliveryFailure,
    Expiry,
}

impl fmt::Display for SlotEventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SlotEventKind::Arrival => "arrival",
            SlotEventKind::TransmitAttempt => "attempt",
            SlotEventKind::DeliverySuccess => "success",
            SlotEventKind::DeliveryFailure => "failure",
            SlotEventKind::Expiry => "expiry",
        };
        write!(f, "{s}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlotEvent {
    pub slot: u64,
    pub kind: SlotEventKind,
    pub packet_uid: u64,
    pub link: Option<usize>,
    pub subset: Option<NodeSet>,
}

impl SlotEvent {
    /// Tab-separated line for the newline-delimited event log.
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.slot,
            self.kind,
            self.packet_uid,
            self.link.map_or(String::new(), |l| l.to_string()),
            self.subset.map_or(String::new(), |s| s.to_string()),
        )
    }
}

/// Cumulative counters over a simulation.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub n_nodes: usize,
    pub n_links: usize,
    pub n_flows: usize,
    /// Packets delivered within deadline, indexed by `f * n_nodes + n`.
    pub delivered: Vec<u64>,
    /// Transmission attempts, indexed by `f * n_links + l`.
    pub transmissions: Vec<u64>,
    /// Index-policy positive-value demand per slot, same indexing.
    pub demand: Vec<u64>,
    pub slots: u64,
    /// Per link: histogram of per-slot usage (`usage_hist[l][u]` slots saw
    /// exactly `u` transmissions on link `l`).
    pub usage_hist: Vec<Vec<u64>>,
}

impl Metrics {
    fn new(topo: &Topology) -> Self {
        Metrics {
            n_nodes: topo.n_nodes,
            n_links: topo.links.len(),
            n_flows: topo.flows.len(),
            delivered: vec![0; topo.n_nodes * topo.flows.len()],
            transmissions: vec![0; topo.links.len() * topo.flows.len()],
            demand: vec![0; topo.links.len() * topo.flows.len()],
            slots: 0,
            usage_hist: vec![Vec::new(); topo.links.len()],
        }
    }

    pub fn delivered_at(&self, n: NodeId, f: usize) -> u64 {
        self.delivered[f * self.n_nodes + n.index()]
    }

    pub fn transmissions_at(&self, l: usize, f: usize) -> u64 {
        self.transmissions[f * self.n_links + l]
    }

    /// Largest per-slot usage observed on a link.
    pub fn max_usage(&self, l: usize) -> usize {
        self.usage_hist[l]
            .iter()
            .rposition(|&c| c > 0)
            .unwrap_or(0)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BaselineKind {
    Flood,
    Random,
}

/// The per-slot decision rule driving a simulation.
pub enum Policy {
    /// DP-driven DSR; one table per flow, index aligned with flow ids.
    Dsr {
        tables: Vec<PolicyTable>,
        variant: Variant,
    },
    Flood,
    Random,
}

#[derive(Error, Debug)]
pub enum SimError {
    #[error("policy table error: {0}")]
    Dp(#[from] DpError),
    #[error("delegated-set partition invariant violated at slot {slot} for packet {packet_uid}: {detail}")]
    InvariantViolation {
        slot: u64,
        packet_uid: u64,
        detail: String,
    },
    #[error("policy covers {tables} flows but topology has {flows}")]
    PolicyMismatch { tables: usize, flows: usize },
}

#[derive(Clone, Copy, Debug)]
pub struct SimOptions {
    pub seed: u64,
    /// Count delivery to the flow source at the arrival slot.
    pub count_source_delivery: bool,
    pub check_invariants: bool,
    pub log_events: bool,
}

impl SimOptions {
    pub fn new(seed: u64) -> Self {
        SimOptions {
            seed,
            count_source_delivery: true,
            check_invariants: true,
            log_events: false,
        }
    }
}

struct PacketState {
    flow: usize,
    arrival_slot: u64,
    delivered: NodeSet,
}

struct Attempt {
    replica_idx: usize,
    link: usize,
    receiver: NodeId,
    subset: NodeSet,
    uid: u64,
}

/// One simulation instance; owns all mutable state. Packets in flight
/// survive across `run_slots` calls, so policies may be swapped at epoch
/// boundaries while the network keeps running.
pub struct Simulation {
    topo: Arc<Topology>,
    opts: SimOptions,
    rng: ChaCha12Rng,
    slot: u64,
    next_uid: u64,
    replicas: Vec<PacketReplica>,
    packets: HashMap<u64, PacketState>,
    pub metrics: Metrics,
    pub events: Vec<SlotEvent>,
}

/// Inversion sampling keeps the draw count at one uniform per arrival
/// process, which pins the RNG stream layout.
fn poisson_inv(rng: &mut ChaCha12Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    let u: f64 = rng.gen();
    let mut k = 0u64;
    let mut p = (-mean).exp();
    let mut cdf = p;
    while u > cdf && k < 10_000 {
        k += 1;
        p *= mean / k as f64;
        cdf += p;
    }
    k
}

impl Simulation {
    pub fn new(topo: Arc<Topology>, opts: SimOptions) -> Self {
        let metrics = Metrics::new(&topo);
        Simulation {
            topo,
            rng: ChaCha12Rng::seed_from_u64(opts.seed),
            opts,
            slot: 0,
            next_uid: 0,
            replicas: Vec::new(),
            packets: HashMap::new(),
            metrics,
            events: Vec::new(),
        }
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topo
    }

    pub fn run_slots(&mut self, policy: &mut Policy, slots: u64) -> Result<(), SimError> {
        if let Policy::Dsr { tables, .. } = policy {
            if tables.len() != self.topo.flows.len() {
                return Err(SimError::PolicyMismatch {
                    tables: tables.len(),
                    flows: self.topo.flows.len(),
                });
            }
        }
        for _ in 0..slots {
            self.step(policy)?;
        }
        Ok(())
    }

    fn emit(&mut self, kind: SlotEventKind, uid: u64, link: Option<usize>, subset: Option<NodeSet>) {
        if self.opts.log_events {
            self.events.push(SlotEvent {
                slot: self.slot,
                kind,
                packet_uid: uid,
                link,
                subset,
            });
        }
    }

    fn record_delivery(&mut self, uid: u64, node: NodeId) {
        let p = self.packets.get_mut(&uid).expect("live packet");
        if !p.delivered.contains(node) {
            p.delivered.insert(node);
            let idx = p.flow * self.topo.n_nodes + node.index();
            self.metrics.delivered[idx] += 1;
        }
    }

    fn step(&mut self, policy: &mut Policy) -> Result<(), SimError> {
        let full = self.topo.full_set();
        // 1. Arrivals, flows in id order.
        for f in 0..self.topo.flows.len() {
            let flow = self.topo.flows[f].clone();
            let count = poisson_inv(&mut self.rng, flow.arrival_rate);
            for _ in 0..count {
                let uid = self.next_uid;
                self.next_uid += 1;
                self.replicas.push(PacketReplica {
                    packet_uid: uid,
                    flow: f,
                    holder: flow.source,
                    delegated: full,
                    remaining: flow.deadline,
                });
                self.packets.insert(
                    uid,
                    PacketState {
                        flow: f,
                        arrival_slot: self.slot,
                        delivered: NodeSet::EMPTY,
                    },
                );
                self.emit(SlotEventKind::Arrival, uid, None, None);
                if self.opts.count_source_delivery {
                    self.record_delivery(uid, flow.source);
                }
            }
        }

        // 2. Action selection.
        let mut attempts = self.select_attempts(policy)?;

        // 3. Transmission attempts; Bernoulli draws in (link, uid) order.
        attempts.sort_by_key(|a| (a.link, a.uid));
        let mut usage = vec![0u32; self.topo.links.len()];
        let mut successes: Vec<usize> = Vec::new();
        for (i, a) in attempts.iter().enumerate() {
            let flow = self.replicas[a.replica_idx].flow;
            self.metrics.transmissions[self.topo.lf_index(a.link, flow)] += 1;
            usage[a.link] += 1;
            self.emit(
                SlotEventKind::TransmitAttempt,
                a.uid,
                Some(a.link),
                Some(a.subset),
            );
            let ok = self.rng.gen::<f64>() < self.topo.links[a.link].reliability;
            if ok {
                successes.push(i);
            } else {
                self.emit(
                    SlotEventKind::DeliveryFailure,
                    a.uid,
                    Some(a.link),
                    Some(a.subset),
                );
            }
        }

        // 4. End-of-slot ACKs: apply splits, create receiver replicas.
        let n_old = self.replicas.len();
        for &i in &successes {
            let a = &attempts[i];
            let (sender, mut recv) =
                split_delegation(&self.replicas[a.replica_idx], a.receiver, a.subset)
                    .expect("policy produced an invalid delegation");
            recv.remaining = sender.remaining - 1;
            self.replicas[a.replica_idx] = sender;
            let uid = a.uid;
            let (receiver, link, subset) = (a.receiver, a.link, a.subset);
            self.record_delivery(uid, receiver);
            self.emit(SlotEventKind::DeliverySuccess, uid, Some(link), Some(subset));
            self.replicas.push(recv);
        }
        for r in &mut self.replicas[..n_old] {
            r.remaining -= 1;
        }

        // 5. Expiry.
        let mut expired: Vec<u64> = Vec::new();
        self.replicas.retain(|r| {
            if r.remaining == 0 {
                expired.push(r.packet_uid);
                false
            } else {
                true
            }
        });
        for uid in expired {
            self.emit(SlotEventKind::Expiry, uid, None, None);
            // All replicas of a packet share one lifetime, so the packet
            // is fully gone once any replica expires.
            self.packets.remove(&uid);
        }

        for (l, &u) in usage.iter().enumerate() {
            let hist = &mut self.metrics.usage_hist[l];
            if hist.len() <= u as usize {
                hist.resize(u as usize + 1, 0);
            }
            hist[u as usize] += 1;
        }
        self.metrics.slots += 1;
        self.slot += 1;

        if self.opts.check_invariants {
            self.check_partition_invariant()?;
        }
        Ok(())
    }

    fn select_attempts(&mut self, policy: &mut Policy) -> Result<Vec<Attempt>, SimError> {
        match policy {
            Policy::Dsr { tables, variant } => {
                // (attempt, state value) per replica that wants to send.
                let mut wanted: Vec<(Attempt, f64)> = Vec::new();
                for (idx, r) in self.replicas.iter().enumerate() {
                    let (action, value) = tables[r.flow].best_action(r)?;
                    if let Action::Transmit {
                        link,
                        receiver,
                        subset,
                    } = action
                    {
                        wanted.push((
                            Attempt {
                                replica_idx: idx,
                                link,
                                receiver,
                                subset,
                                uid: r.packet_uid,
                            },
                            value,
                        ));
                    }
                }
                match variant {
                    Variant::Relaxed => Ok(wanted.into_iter().map(|(a, _)| a).collect()),
                    Variant::Index => {
                        // Per link: sort by W descending, count the
                        // positive-W demand, transmit the top
                        // min(T_l, demand).
                        let mut by_link: Vec<Vec<(Attempt, f64)>> =
                            (0..self.topo.links.len()).map(|_| Vec::new()).collect();
                        for (a, w) in wanted {
                            by_link[a.link].push((a, w));
                        }
                        let mut out = Vec::new();
                        for (l, mut cands) in by_link.into_iter().enumerate() {
                            cands.sort_by(|(a, wa), (b, wb)| {
                                wb.total_cmp(wa)
                                    .then_with(|| {
                                        let sa = self.packets[&a.uid].arrival_slot;
                                        let sb = self.packets[&b.uid].arrival_slot;
                                        sa.cmp(&sb)
                                    })
                                    .then_with(|| a.uid.cmp(&b.uid))
                            });
                            let positive = cands.iter().filter(|(_, w)| *w > 0.0).count();
                            for (a, w) in &cands {
                                if *w > 0.0 {
                                    let flow = self.replicas[a.replica_idx].flow;
                                    self.metrics.demand[self.topo.lf_index(l, flow)] += 1;
                                }
                            }
                            let take = positive.min(self.topo.links[l].capacity as usize);
                            out.extend(cands.into_iter().take(take).map(|(a, _)| a));
                        }
                        Ok(out)
                    }
                }
            }
            Policy::Flood => {
                let mut per_link_left: Vec<u32> =
                    self.topo.links.iter().map(|l| l.capacity).collect();
                let mut out = Vec::new();
                for (idx, r) in self.replicas.iter().enumerate() {
                    for l in self.topo.out_links(r.holder) {
                        if l.rx != r.holder
                            && r.delegated.contains(l.rx)
                            && per_link_left[l.id] > 0
                        {
                            per_link_left[l.id] -= 1;
                            out.push(Attempt {
                                replica_idx: idx,
                                link: l.id,
                                receiver: l.rx,
                                subset: NodeSet::singleton(l.rx),
                                uid: r.packet_uid,
                            });
                        }
                    }
                }
                Ok(out)
            }
            Policy::Random => {
                let mut per_link_left: Vec<u32> =
                    self.topo.links.iter().map(|l| l.capacity).collect();
                let mut out = Vec::new();
                for (idx, r) in self.replicas.iter().enumerate() {
                    let feasible: Vec<&crate::net::Link> = self
                        .topo
                        .out_links(r.holder)
                        .filter(|l| l.rx != r.holder && r.delegated.contains(l.rx))
                        .collect();
                    if feasible.is_empty() {
                        continue;
                    }
                    let pick = feasible[self.rng.gen_range(0..feasible.len())];
                    if per_link_left[pick.id] > 0 {
                        per_link_left[pick.id] -= 1;
                        out.push(Attempt {
                            replica_idx: idx,
                            link: pick.id,
                            receiver: pick.rx,
                            subset: NodeSet::singleton(pick.rx),
                            uid: r.packet_uid,
                        });
                    }
                }
                Ok(out)
            }
        }
    }

    /// Delegated sets of a packet's live replicas must be pairwise
    /// disjoint and cover the full node set; every holder belongs to its
    /// own set.
    fn check_partition_invariant(&self) -> Result<(), SimError> {
        let full = self.topo.full_set();
        let mut union: HashMap<u64, (u64, u32)> = HashMap::new();
        for r in &self.replicas {
            if !r.delegated.contains(r.holder) {
                return Err(SimError::InvariantViolation {
                    slot: self.slot,
                    packet_uid: r.packet_uid,
                    detail: format!("holder {} outside delegated {}", r.holder, r.delegated),
                });
            }
            let e = union.entry(r.packet_uid).or_insert((0, 0));
            e.0 |= r.delegated.bits();
            e.1 += r.delegated.len();
        }
        for (&uid, &(bits, popsum)) in &union {
            if bits != full.bits() {
                return Err(SimError::InvariantViolation {
                    slot: self.slot,
                    packet_uid: uid,
                    detail: format!(
                        "union {} does not cover {}",
                        NodeSet::from_bits(bits),
                        full
                    ),
                });
            }
            if popsum != full.len() {
                return Err(SimError::InvariantViolation {
                    slot: self.slot,
                    packet_uid: uid,
                    detail: "delegated sets overlap".to_string(),
                });
            }
        }
        Ok(())
    }
}

/// Runs a fresh simulation for `slots` slots under `policy`.
pub fn simulate(
    topo: &Arc<Topology>,
    policy: &mut Policy,
    slots: u64,
    opts: SimOptions,
) -> Result<(Metrics, Option<Vec<SlotEvent>>), SimError> {
    let mut sim = Simulation::new(Arc::clone(topo), opts);
    sim.run_slots(policy, slots)?;
    let events = if opts.log_events {
        Some(std::mem::take(&mut sim.events))
    } else {
        None
    };
    Ok((sim.metrics, events))
}

/// Runs one of the comparison baselines.
pub fn run_baseline(
    topo: &Arc<Topology>,
    kind: BaselineKind,
    slots: u64,
    seed: u64,
) -> Result<Metrics, SimError> {
    let mut policy = match kind {
        BaselineKind::Flood => Policy::Flood,
        BaselineKind::Random => Policy::Random,
    };
    let (metrics, _) = simulate(topo, &mut policy, slots, SimOptions::new(seed))?;
    Ok(metrics)
}
