//! Structural properties of the value recursion and the dual objective,
//! checked over randomly drawn small instances.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use dsrnet::dp::{PolicyTable, PriceVector, RewardVector, VALUE_TIE_TOL};
use dsrnet::dual::{dual_value_exact, optimize, total_utility, OptimizeOptions};
use dsrnet::net::{NodeId, NodeSet, Topology};
use dsrnet::verify::{random_instance, VerifyLimits};

const TOL: f64 = 1e-9;

fn limits(seed: u64) -> VerifyLimits {
    VerifyLimits {
        instances: 0,
        seed,
        ..VerifyLimits::default()
    }
}

/// Every subset of `full` that contains `holder`.
fn holder_sets(holder: NodeId, n: usize) -> Vec<NodeSet> {
    let full = NodeSet::full(n).bits();
    let rest = full & !(1u64 << holder.0);
    let mut out = Vec::new();
    let mut sub = 0u64;
    loop {
        out.push(NodeSet::from_bits(sub | (1u64 << holder.0)));
        if sub == rest {
            break;
        }
        sub = (sub.wrapping_sub(rest)) & rest;
    }
    out
}

#[test]
fn relaxed_value_is_monotone_in_lifetime() {
    let mut rng = ChaCha12Rng::seed_from_u64(21);
    for tag in 0..100 {
        let inst = random_instance(&mut rng, &limits(21), tag);
        let mut table = PolicyTable::solve_relaxed(
            &inst.topo,
            0,
            inst.rewards.clone(),
            inst.prices.clone(),
            inst.horizon,
        )
        .unwrap();
        for n in 0..inst.topo.n_nodes {
            let holder = NodeId(n as u8);
            for set in holder_sets(holder, inst.topo.n_nodes) {
                let mut prev = f64::NEG_INFINITY;
                for tau in 0..=inst.horizon {
                    let v = table.value_at(holder, set, tau).unwrap();
                    assert!(
                        v >= prev - TOL,
                        "W({holder}, {set}, {tau}) = {v} dropped below {prev}"
                    );
                    prev = v;
                }
            }
        }
    }
}

#[test]
fn relaxed_value_is_monotone_in_delegated_set() {
    let mut rng = ChaCha12Rng::seed_from_u64(22);
    for tag in 0..100 {
        let inst = random_instance(&mut rng, &limits(22), tag);
        let mut table = PolicyTable::solve_relaxed(
            &inst.topo,
            0,
            inst.rewards.clone(),
            inst.prices.clone(),
            inst.horizon,
        )
        .unwrap();
        for n in 0..inst.topo.n_nodes {
            let holder = NodeId(n as u8);
            let sets = holder_sets(holder, inst.topo.n_nodes);
            for &small in &sets {
                for &big in &sets {
                    if !small.is_subset_of(big) {
                        continue;
                    }
                    let vs = table.value_at(holder, small, inst.horizon).unwrap();
                    let vb = table.value_at(holder, big, inst.horizon).unwrap();
                    assert!(
                        vb >= vs - TOL,
                        "W({holder}, {big}) = {vb} < W({holder}, {small}) = {vs}"
                    );
                }
            }
        }
    }
}

#[test]
fn value_never_exceeds_total_delegated_reward() {
    let mut rng = ChaCha12Rng::seed_from_u64(23);
    for tag in 0..100 {
        let inst = random_instance(&mut rng, &limits(23), tag);
        let mut table = PolicyTable::solve_relaxed(
            &inst.topo,
            0,
            inst.rewards.clone(),
            inst.prices.clone(),
            inst.horizon,
        )
        .unwrap();
        for n in 0..inst.topo.n_nodes {
            let holder = NodeId(n as u8);
            for set in holder_sets(holder, inst.topo.n_nodes) {
                let cap: f64 = set.iter().map(|m| inst.rewards.0[m.index()]).sum();
                let v = table.value_at(holder, set, inst.horizon).unwrap();
                assert!(v <= cap + TOL, "W({holder}, {set}) = {v} exceeds {cap}");
            }
        }
    }
}

#[test]
fn forced_transmission_never_beats_the_relaxed_value() {
    let mut rng = ChaCha12Rng::seed_from_u64(24);
    for tag in 0..100 {
        let inst = random_instance(&mut rng, &limits(24), tag);
        let mut relaxed = PolicyTable::solve_relaxed(
            &inst.topo,
            0,
            inst.rewards.clone(),
            inst.prices.clone(),
            inst.horizon,
        )
        .unwrap();
        let mut index = PolicyTable::solve_index(
            &inst.topo,
            0,
            inst.rewards.clone(),
            inst.prices.clone(),
            inst.horizon,
        )
        .unwrap();
        let vr = relaxed.root_value().unwrap();
        let vi = index.root_value().unwrap();
        assert!(
            vi <= vr + VALUE_TIE_TOL,
            "index root {vi} exceeds relaxed root {vr}"
        );
    }
}

#[test]
fn dual_objective_is_monotone_in_capacity_slack() {
    // Raising any one price by delta raises D by at most delta * T_l and
    // never lowers it below D - delta * usage; in particular D at higher
    // uniform prices minus the added price mass can only shrink W terms.
    let mut rng = ChaCha12Rng::seed_from_u64(25);
    for tag in 0..50 {
        let inst = random_instance(&mut rng, &limits(25), tag);
        let t = &inst.topo;
        if t.links.is_empty() {
            continue;
        }
        let rewards = RewardVector::uniform(t.n_nodes, 1.0);
        let zero = PriceVector::zeros(t.links.len());
        let d0 = dual_value_exact(t, &rewards, &zero).unwrap();
        let bump = PriceVector(vec![0.25; t.links.len()]);
        let d1 = dual_value_exact(t, &rewards, &bump).unwrap();
        let price_mass: f64 = t.links.iter().map(|l| 0.25 * l.capacity as f64).sum();
        // W terms only shrink when prices rise.
        assert!(d1 - price_mass <= d0 + TOL, "tag {tag}: {d1} - {price_mass} > {d0}");
    }
}

#[test]
fn weak_duality_bounds_achieved_utility() {
    // For linear utility, any realized A * mu is a feasible primal value,
    // so it cannot exceed D(0) = sum_f A_f W_f by more than noise.
    let mut rng = ChaCha12Rng::seed_from_u64(26);
    for tag in 0..10 {
        let inst = random_instance(&mut rng, &limits(26), tag);
        let t = &inst.topo;
        let rewards = RewardVector::uniform(t.n_nodes, 1.0);
        let d0 = dual_value_exact(t, &rewards, &PriceVector::zeros(t.links.len())).unwrap();
        let report = optimize(t, &OptimizeOptions::new(20, 500, 0.5, 1000 + tag)).unwrap();
        let utility = total_utility(t, &report.final_mu);
        let slots = (20 * 500) as f64;
        let sigma = (utility.max(0.05) / slots).sqrt() * t.n_nodes as f64;
        assert!(
            utility <= d0 + 3.0 * sigma,
            "tag {tag}: utility {utility} exceeds dual bound {d0}"
        );
    }
}

#[test]
fn congested_link_price_settles_near_complementary_slackness() {
    // A single overloaded link: arrivals at rate 2 against capacity 1.
    // At the optimum the constraint is tight, so usage approaches the
    // capacity and the price stays strictly positive.
    let mut t = Topology::new(2);
    t.add_link(NodeId(0), NodeId(1), 1, 0.95);
    t.add_flow(NodeId(0), 2.0, 2);
    let t = Arc::new(t);
    let report = optimize(&t, &OptimizeOptions::new(400, 300, 0.5, 27)).unwrap();
    let usage = report.final_eps.iter().sum::<f64>();
    assert!(
        (usage - 1.0).abs() < 0.1,
        "average usage {usage} should be close to the capacity 1"
    );
    assert!(
        report.final_lambda[0] > 0.05,
        "price {} should stay positive on a congested link",
        report.final_lambda[0]
    );
}
