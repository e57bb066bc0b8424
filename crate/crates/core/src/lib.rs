//! Broadcasting deadline-constrained packet flows over a multi-hop
//! unreliable wireless mesh.
//!
//! The crate implements delegated-set routing (DSR): every holder of a
//! packet is responsible for a subset of nodes (its delegated set), and a
//! transmission hands part of that responsibility to the receiver via the
//! packet header. On top of the protocol sit:
//!
//! - [`dp`]: a per-packet dynamic program over (holder, delegated set,
//!   remaining lifetime) that prices transmissions with per-link Lagrange
//!   multipliers, in a relaxed variant (average link capacity) and an
//!   index variant (forced transmission, sortable values).
//! - [`dual`]: the epoch-wise outer loop that mixes stationary policies,
//!   estimates timely-throughputs and link usages, and runs projected
//!   subgradient price updates.
//! - [`sim`]: the slotted-time stochastic simulator with Poisson arrivals,
//!   Bernoulli links, end-of-slot ACKs, and flooding/random baselines.
//! - [`oracle`]: an exhaustive expected-value verifier for tiny instances.
//! - [`scenario`] / [`experiment`]: topology files, experiment configs and
//!   CSV reporting.

pub mod dp;
pub mod dual;
pub mod experiment;
pub mod net;
pub mod oracle;
pub mod scenario;
pub mod sim;
pub mod verify;
