//! The bundled scenario files stay loadable and round-trip through the
//! serializer unchanged.

use std::path::PathBuf;

use dsrnet::scenario::{load_scenario, load_scenario_str, serialize_scenario};

fn bundled(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

#[test]
fn scenario1_loads_with_expected_shape() {
    let t = load_scenario(bundled("scenario1.txt")).unwrap();
    assert_eq!(t.n_nodes, 11);
    assert_eq!(t.gateways.len(), 2);
    assert_eq!(t.flows.len(), 2);
    assert_eq!(t.flows[0].arrival_rate, 1.5);
    assert_eq!(t.flows[1].arrival_rate, 2.0);
    assert_eq!(t.links.iter().filter(|l| l.interconnect).count(), 2);
    assert!(t
        .links
        .iter()
        .filter(|l| !l.interconnect)
        .all(|l| (1..=5).contains(&l.capacity) && (0.5..=1.0).contains(&l.reliability)));
}

#[test]
fn scenario2_loads_with_expected_shape() {
    let t = load_scenario(bundled("scenario2.txt")).unwrap();
    assert_eq!(t.n_nodes, 18);
    assert_eq!(t.gateways.len(), 9);
    // Directed gateway clique: 9 * 8 interconnect links.
    assert_eq!(t.links.iter().filter(|l| l.interconnect).count(), 72);
}

#[test]
fn bundled_scenarios_round_trip() {
    for name in ["scenario1.txt", "scenario2.txt"] {
        let t = load_scenario(bundled(name)).unwrap();
        let text = serialize_scenario(&t);
        let t2 = load_scenario_str(&text).unwrap();
        assert_eq!(t, t2, "{name} did not round-trip");
        assert_eq!(text, serialize_scenario(&t2));
    }
}
