//! Domain types for the network, flows, packets, and delegated-set algebra.

use std::fmt;

use thiserror::Error;

use crate::dual::UtilityKind;

/// Delegated sets are machine-word bitmasks, so networks are capped at 64 nodes.
pub const MAX_NODES: usize = 64;

/// Capacity of the auto-generated gateway interconnect links.
pub const GATEWAY_LINK_CAPACITY: u32 = 32;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct NodeId(pub u8);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A set of nodes as a 64-bit mask. One bit per [`NodeId`].
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct NodeSet(u64);

impl NodeSet {
    pub const EMPTY: NodeSet = NodeSet(0);

    pub fn from_bits(bits: u64) -> Self {
        NodeSet(bits)
    }

    pub fn bits(self) -> u64 {
        self.0
    }

    /// All `n` nodes, `n <= 64`.
    pub fn full(n: usize) -> Self {
        assert!(n <= MAX_NODES, "node count {n} exceeds {MAX_NODES}");
        if n == MAX_NODES {
            NodeSet(u64::MAX)
        } else {
            NodeSet((1u64 << n) - 1)
        }
    }

    pub fn singleton(n: NodeId) -> Self {
        NodeSet(1u64 << n.0)
    }

    pub fn contains(self, n: NodeId) -> bool {
        self.0 & (1u64 << n.0) != 0
    }

    pub fn insert(&mut self, n: NodeId) {
        self.0 |= 1u64 << n.0;
    }

    pub fn remove(&mut self, n: NodeId) {
        self.0 &= !(1u64 << n.0);
    }

    pub fn union(self, other: NodeSet) -> NodeSet {
        NodeSet(self.0 | other.0)
    }

    pub fn intersection(self, other: NodeSet) -> NodeSet {
        NodeSet(self.0 & other.0)
    }

    pub fn difference(self, other: NodeSet) -> NodeSet {
        NodeSet(self.0 & !other.0)
    }

    pub fn is_subset_of(self, other: NodeSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn is_disjoint(self, other: NodeSet) -> bool {
        self.0 & other.0 == 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> u32 {
        self.0.count_ones()
    }

    pub fn iter(self) -> impl Iterator<Item = NodeId> {
        let mut bits = self.0;
        std::iter::from_fn(move || {
            if bits == 0 {
                None
            } else {
                let i = bits.trailing_zeros() as u8;
                bits &= bits - 1;
                Some(NodeId(i))
            }
        })
    }
}

impl fmt::Debug for NodeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for NodeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, n) in self.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{n}")?;
        }
        write!(f, "}}")
    }
}

/// A directed link with a per-slot transmission budget and a Bernoulli
/// success probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Link {
    pub id: usize,
    pub tx: NodeId,
    pub rx: NodeId,
    /// Packets per slot (`T_l`).
    pub capacity: u32,
    /// Per-transmission success probability (`P_l`), in (0, 1].
    pub reliability: f64,
    /// True for links synthesized by the gateway interconnect expansion.
    pub interconnect: bool,
}

/// A broadcast flow: Poisson arrivals at a source node, a per-packet
/// deadline, and a utility accrued at every node that receives on time.
#[derive(Clone, Debug, PartialEq)]
pub struct Flow {
    pub id: usize,
    pub source: NodeId,
    /// Mean packets per slot (`A_f`).
    pub arrival_rate: f64,
    /// Per-packet end-to-end deadline in slots (`D_f`).
    pub deadline: u32,
    pub utility: UtilityKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    pub n_nodes: usize,
    pub links: Vec<Link>,
    pub flows: Vec<Flow>,
    pub gateways: NodeSet,
}

impl Topology {
    pub fn new(n_nodes: usize) -> Self {
        Topology {
            n_nodes,
            links: Vec::new(),
            flows: Vec::new(),
            gateways: NodeSet::EMPTY,
        }
    }

    pub fn full_set(&self) -> NodeSet {
        NodeSet::full(self.n_nodes)
    }

    pub fn add_link(&mut self, tx: NodeId, rx: NodeId, capacity: u32, reliability: f64) -> usize {
        let id = self.links.len();
        self.links.push(Link {
            id,
            tx,
            rx,
            capacity,
            reliability,
            interconnect: false,
        });
        id
    }

    pub fn add_flow(&mut self, source: NodeId, arrival_rate: f64, deadline: u32) -> usize {
        let id = self.flows.len();
        self.flows.push(Flow {
            id,
            source,
            arrival_rate,
            deadline,
            utility: UtilityKind::Linear,
        });
        id
    }

    pub fn find_link(&self, tx: NodeId, rx: NodeId) -> Option<usize> {
        self.links.iter().position(|l| l.tx == tx && l.rx == rx)
    }

    pub fn out_links(&self, n: NodeId) -> impl Iterator<Item = &Link> {
        self.links.iter().filter(move |l| l.tx == n)
    }

    /// Gateways share a wired backend, modeled as a directed clique of
    /// reliable, effectively uncapped links. Pairs that already have an
    /// explicit link are left alone. Added links are appended in
    /// (tx, rx) order, so the expansion is deterministic.
    pub fn apply_gateway_interconnect(&mut self) {
        let gws: Vec<NodeId> = self.gateways.iter().collect();
        for &a in &gws {
            for &b in &gws {
                if a != b && self.find_link(a, b).is_none() {
                    let id = self.links.len();
                    self.links.push(Link {
                        id,
                        tx: a,
                        rx: b,
                        capacity: GATEWAY_LINK_CAPACITY,
                        reliability: 1.0,
                        interconnect: true,
                    });
                }
            }
        }
    }

    /// Flattened index into per-(node, flow) vectors.
    pub fn nf_index(&self, n: NodeId, f: usize) -> usize {
        f * self.n_nodes + n.index()
    }

    /// Flattened index into per-(link, flow) vectors.
    pub fn lf_index(&self, l: usize, f: usize) -> usize {
        f * self.links.len() + l
    }
}

/// One copy of a packet sitting at a holder node, together with the set of
/// nodes the holder is responsible for and the remaining lifetime in slots.
#[derive(Clone, Debug, PartialEq)]
pub struct PacketReplica {
    pub packet_uid: u64,
    pub flow: usize,
    pub holder: NodeId,
    pub delegated: NodeSet,
    pub remaining: u32,
}

#[derive(Error, Debug, PartialEq)]
pub enum SplitError {
    #[error("receiver {receiver} not in the delegated subset {subset}")]
    ReceiverNotInSubset { receiver: NodeId, subset: NodeSet },
    #[error("subset {subset} is not contained in the sender's delegated set {delegated}")]
    SubsetNotDelegated { subset: NodeSet, delegated: NodeSet },
    #[error("holder {holder} may not delegate itself (subset {subset})")]
    HolderInSubset { holder: NodeId, subset: NodeSet },
}

/// Splits a replica's delegated set on a successful transmission: the
/// sender keeps `delegated - subset`, the receiver takes `subset`. The two
/// halves partition the original set. The receiver's `remaining` is copied
/// from the sender; the caller decrements both at end of slot.
pub fn split_delegation(
    replica: &PacketReplica,
    receiver: NodeId,
    subset: NodeSet,
) -> Result<(PacketReplica, PacketReplica), SplitError> {
    if !subset.contains(receiver) {
        return Err(SplitError::ReceiverNotInSubset { receiver, subset });
    }
    if !subset.is_subset_of(replica.delegated) {
        return Err(SplitError::SubsetNotDelegated {
            subset,
            delegated: replica.delegated,
        });
    }
    if subset.contains(replica.holder) {
        return Err(SplitError::HolderInSubset {
            holder: replica.holder,
            subset,
        });
    }
    let mut sender = replica.clone();
    sender.delegated = replica.delegated.difference(subset);
    let recv = PacketReplica {
        packet_uid: replica.packet_uid,
        flow: replica.flow,
        holder: receiver,
        delegated: subset,
        remaining: replica.remaining,
    };
    Ok((sender, recv))
}

/// Checks all structural invariants of a topology. Returns one diagnostic
/// string per violation; an empty list means the topology is well-formed.
pub fn validate_topology(t: &Topology) -> Vec<String> {
    let mut out = Vec::new();
    if t.n_nodes == 0 {
        out.push("topology: no nodes".to_string());
    }
    if t.n_nodes > MAX_NODES {
        out.push(format!(
            "topology: {} nodes exceeds the {MAX_NODES}-node limit",
            t.n_nodes
        ));
    }
    let in_range = |n: NodeId| n.index() < t.n_nodes;
    let mut seen = std::collections::HashSet::new();
    for (i, l) in t.links.iter().enumerate() {
        if !in_range(l.tx) {
            out.push(format!("link {i}: transmitter {} out of range", l.tx));
        }
        if !in_range(l.rx) {
            out.push(format!("link {i}: receiver {} out of range", l.rx));
        }
        if l.tx == l.rx {
            out.push(format!("link {i}: self-loop"));
        }
        if !seen.insert((l.tx, l.rx)) {
            out.push(format!("link {i}: duplicate ({} -> {})", l.tx, l.rx));
        }
        if l.capacity < 1 {
            out.push(format!("link {i}: capacity must be at least 1"));
        }
        if !(l.reliability > 0.0 && l.reliability <= 1.0) {
            out.push(format!(
                "link {i}: reliability {} outside (0, 1]",
                l.reliability
            ));
        }
    }
    for (i, f) in t.flows.iter().enumerate() {
        if !in_range(f.source) {
            out.push(format!("flow {i}: source out of range"));
        }
        if f.deadline < 1 {
            out.push(format!("flow {i}: deadline must be at least 1"));
        }
        if !(f.arrival_rate >= 0.0 && f.arrival_rate.is_finite()) {
            out.push(format!("flow {i}: arrival rate {} invalid", f.arrival_rate));
        }
    }
    for g in t.gateways.iter() {
        if !in_range(g) {
            out.push(format!("gateway {g}: out of range"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn n(i: u8) -> NodeId {
        NodeId(i)
    }

    fn set(ids: &[u8]) -> NodeSet {
        let mut s = NodeSet::EMPTY;
        for &i in ids {
            s.insert(n(i));
        }
        s
    }

    #[test]
    fn split_full_set_walkthrough() {
        // s=0, A=1, B=2, C=3, D=4, E=5; delegate {A,C,D} to A.
        let r = PacketReplica {
            packet_uid: 0,
            flow: 0,
            holder: n(0),
            delegated: set(&[0, 1, 2, 3, 4, 5]),
            remaining: 6,
        };
        let (s, a) = split_delegation(&r, n(1), set(&[1, 3, 4])).unwrap();
        assert_eq!(s.delegated, set(&[0, 2, 5]));
        assert_eq!(a.delegated, set(&[1, 3, 4]));
        assert_eq!(a.holder, n(1));
        assert_eq!(s.delegated.union(a.delegated), r.delegated);
        assert!(s.delegated.is_disjoint(a.delegated));
    }

    #[test]
    fn split_singleton_has_no_valid_subset() {
        let r = PacketReplica {
            packet_uid: 0,
            flow: 0,
            holder: n(2),
            delegated: set(&[2]),
            remaining: 3,
        };
        // Any subset containing another node is not delegated; the only
        // delegated subset contains the holder.
        assert!(split_delegation(&r, n(1), set(&[1])).is_err());
        assert!(split_delegation(&r, n(2), set(&[2])).is_err());
    }

    #[test]
    fn split_forced_two_node() {
        let r = PacketReplica {
            packet_uid: 7,
            flow: 0,
            holder: n(0),
            delegated: set(&[0, 1]),
            remaining: 2,
        };
        let (s, m) = split_delegation(&r, n(1), set(&[1])).unwrap();
        assert_eq!(s.delegated, set(&[0]));
        assert_eq!(m.delegated, set(&[1]));
    }

    #[test]
    fn validate_catches_bad_entities() {
        let mut t = Topology::new(3);
        t.add_link(n(1), n(1), 1, 0.5);
        t.add_flow(n(3), 1.0, 4);
        let diags = validate_topology(&t);
        assert!(diags.iter().any(|d| d.contains("self-loop")));
        assert!(diags.iter().any(|d| d.contains("flow 0")));
    }

    #[test]
    fn validate_ok_on_well_formed() {
        let mut t = Topology::new(4);
        t.add_link(n(0), n(1), 2, 0.9);
        t.add_link(n(1), n(2), 1, 0.6);
        t.add_flow(n(0), 1.5, 6);
        assert!(validate_topology(&t).is_empty());
    }

    #[test]
    fn gateway_interconnect_is_deterministic() {
        let mut t = Topology::new(4);
        t.add_link(n(0), n(1), 3, 0.8);
        t.gateways = set(&[0, 1, 2]);
        t.apply_gateway_interconnect();
        // 0->1 already exists; five clique links added.
        assert_eq!(t.links.len(), 6);
        assert!(t.links[1..].iter().all(|l| l.interconnect));
        assert_eq!(t.find_link(n(2), n(0)).map(|i| t.links[i].reliability), Some(1.0));
    }

    proptest! {
        #[test]
        fn set_ops_match_u64_semantics(a: u64, b: u64) {
            let (sa, sb) = (NodeSet::from_bits(a), NodeSet::from_bits(b));
            prop_assert_eq!(sa.union(sb).bits(), a | b);
            prop_assert_eq!(sa.difference(sb).bits(), a & !b);
            prop_assert_eq!(sa.intersection(sb).bits(), a & b);
            prop_assert_eq!(sa.is_subset_of(sb), a & !b == 0);
            prop_assert_eq!(sa.len() as usize, sa.iter().count());
        }

        #[test]
        fn split_is_measure_preserving(bits in 1u64..u64::MAX, pick: u64, recv_pick: u64) {
            let delegated = NodeSet::from_bits(bits);
            let holder = delegated.iter().next().unwrap();
            let rest = delegated.difference(NodeSet::singleton(holder));
            prop_assume!(!rest.is_empty());
            let subset = NodeSet::from_bits(rest.bits() & pick);
            prop_assume!(!subset.is_empty());
            let members: Vec<_> = subset.iter().collect();
            let receiver = members[(recv_pick as usize) % members.len()];
            let r = PacketReplica { packet_uid: 0, flow: 0, holder, delegated, remaining: 1 };
            let (s, m) = split_delegation(&r, receiver, subset).unwrap();
            prop_assert_eq!(s.delegated.len() + m.delegated.len(), delegated.len());
            prop_assert!(s.delegated.is_disjoint(m.delegated));
            prop_assert_eq!(s.delegated.union(m.delegated), delegated);
        }
    }
}
