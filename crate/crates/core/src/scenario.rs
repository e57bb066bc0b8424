//! Plain-text scenario files.
//!
//! Grammar, one directive per line, `#` starts a comment:
//!
//! ```text
//! nodes N
//! gateways I J K ...        # optional
//! link FROM TO CAPACITY RELIABILITY
//! flow SOURCE RATE DEADLINE
//! ```
//!
//! Gateways get a fully reliable directed clique between them appended
//! after the listed links; those interconnect links are implied by the
//! `gateways` line and are never written back by the serializer.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::net::{validate_topology, NodeId, Topology, MAX_NODES};

#[derive(Error, Debug)]
pub enum ScenarioError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("scenario file has no directives")]
    Empty,
    #[error("invalid scenario:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
}

fn parse_err(line: usize, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Parse {
        line,
        message: message.into(),
    }
}

fn field<T: std::str::FromStr>(
    line: usize,
    parts: &[&str],
    idx: usize,
    what: &str,
) -> Result<T, ScenarioError> {
    let raw = parts
        .get(idx)
        .ok_or_else(|| parse_err(line, format!("missing {what}")))?;
    raw.parse()
        .map_err(|_| parse_err(line, format!("bad {what} {raw:?}")))
}

fn node_field(
    line: usize,
    parts: &[&str],
    idx: usize,
    what: &str,
    n_nodes: usize,
) -> Result<NodeId, ScenarioError> {
    let id: usize = field(line, parts, idx, what)?;
    if id >= n_nodes {
        return Err(parse_err(
            line,
            format!("{what} {id} out of range (nodes {n_nodes})"),
        ));
    }
    Ok(NodeId(id as u8))
}

/// Parses scenario text into a topology. Does not add the gateway
/// interconnect and does not validate; see [`load_scenario`].
pub fn parse_scenario(text: &str) -> Result<Topology, ScenarioError> {
    let mut topo: Option<Topology> = None;
    let mut saw_directive = false;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        saw_directive = true;
        let parts: Vec<&str> = body.split_whitespace().collect();
        match parts[0] {
            "nodes" => {
                if topo.is_some() {
                    return Err(parse_err(line, "duplicate nodes directive"));
                }
                let n: usize = field(line, &parts, 1, "node count")?;
                if n == 0 || n > MAX_NODES {
                    return Err(parse_err(
                        line,
                        format!("node count must be 1..={MAX_NODES}, got {n}"),
                    ));
                }
                if parts.len() > 2 {
                    return Err(parse_err(line, "trailing tokens after nodes directive"));
                }
                topo = Some(Topology::new(n));
            }
            "gateways" => {
                let t = topo
                    .as_mut()
                    .ok_or_else(|| parse_err(line, "gateways before nodes directive"))?;
                if parts.len() < 2 {
                    return Err(parse_err(line, "gateways directive lists no nodes"));
                }
                for idx in 1..parts.len() {
                    let g = node_field(line, &parts, idx, "gateway id", t.n_nodes)?;
                    if t.gateways.contains(g) {
                        return Err(parse_err(line, format!("duplicate gateway {}", g.0)));
                    }
                    t.gateways.insert(g);
                }
            }
            "link" => {
                let t = topo
                    .as_mut()
                    .ok_or_else(|| parse_err(line, "link before nodes directive"))?;
                let from = node_field(line, &parts, 1, "link source", t.n_nodes)?;
                let to = node_field(line, &parts, 2, "link destination", t.n_nodes)?;
                let capacity: u32 = field(line, &parts, 3, "link capacity")?;
                let reliability: f64 = field(line, &parts, 4, "link reliability")?;
                if parts.len() > 5 {
                    return Err(parse_err(line, "trailing tokens after link directive"));
                }
                if from == to {
                    return Err(parse_err(line, format!("self link at node {}", from.0)));
                }
                if t.find_link(from, to).is_some() {
                    return Err(parse_err(
                        line,
                        format!("duplicate link {} -> {}", from.0, to.0),
                    ));
                }
                if capacity == 0 {
                    return Err(parse_err(line, "link capacity must be positive"));
                }
                if !(0.0..=1.0).contains(&reliability) {
                    return Err(parse_err(
                        line,
                        format!("link reliability {reliability} outside [0, 1]"),
                    ));
                }
                t.add_link(from, to, capacity, reliability);
            }
            "flow" => {
                let t = topo
                    .as_mut()
                    .ok_or_else(|| parse_err(line, "flow before nodes directive"))?;
                let source = node_field(line, &parts, 1, "flow source", t.n_nodes)?;
                let rate: f64 = field(line, &parts, 2, "flow rate")?;
                let deadline: u32 = field(line, &parts, 3, "flow deadline")?;
                if parts.len() > 4 {
                    return Err(parse_err(line, "trailing tokens after flow directive"));
                }
                if rate < 0.0 || !rate.is_finite() {
                    return Err(parse_err(line, format!("bad flow rate {rate}")));
                }
                if deadline == 0 {
                    return Err(parse_err(line, "flow deadline must be positive"));
                }
                t.add_flow(source, rate, deadline);
            }
            other => {
                return Err(parse_err(line, format!("unknown directive {other:?}")));
            }
        }
    }
    if !saw_directive {
        return Err(ScenarioError::Empty);
    }
    topo.ok_or(ScenarioError::Empty)
}

/// Reads, parses, adds the gateway interconnect, and validates a scenario
/// file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Topology, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_scenario_str(&text)
}

/// [`load_scenario`] for already-read text.
pub fn load_scenario_str(text: &str) -> Result<Topology, ScenarioError> {
    let mut topo = parse_scenario(text)?;
    topo.apply_gateway_interconnect();
    let diagnostics = validate_topology(&topo);
    if diagnostics.is_empty() {
        Ok(topo)
    } else {
        Err(ScenarioError::Invalid(diagnostics))
    }
}

/// Writes a topology back out in scenario grammar. Interconnect links are
/// implied by the gateway list and are skipped.
pub fn serialize_scenario(topo: &Topology) -> String {
    let mut out = String::new();
    writeln!(out, "nodes {}", topo.n_nodes).unwrap();
    if !topo.gateways.is_empty() {
        let ids: Vec<String> = topo.gateways.iter().map(|g| g.0.to_string()).collect();
        writeln!(out, "gateways {}", ids.join(" ")).unwrap();
    }
    for link in topo.links.iter().filter(|l| !l.interconnect) {
        writeln!(
            out,
            "link {} {} {} {}",
            link.tx.0, link.rx.0, link.capacity, link.reliability
        )
        .unwrap();
    }
    for flow in &topo.flows {
        writeln!(
            out,
            "flow {} {} {}",
            flow.source.0, flow.arrival_rate, flow.deadline
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# three relays behind one gateway pair
nodes 5
gateways 0 1
link 0 2 2 0.9
link 2 0 2 0.9
link 1 3 1 0.75  # lossy edge
link 2 4 3 1
link 4 2 3 1
link 3 4 1 0.8
link 4 3 1 0.8
flow 0 1.5 6
flow 4 2 6
";

    #[test]
    fn parses_sample_and_adds_interconnect() {
        let t = load_scenario_str(SAMPLE).unwrap();
        assert_eq!(t.n_nodes, 5);
        assert_eq!(t.flows.len(), 2);
        assert_eq!(t.gateways.len(), 2);
        // 7 listed links plus the 2-gateway directed clique.
        assert_eq!(t.links.len(), 9);
        let interconnect: Vec<_> = t.links.iter().filter(|l| l.interconnect).collect();
        assert_eq!(interconnect.len(), 2);
        assert!(interconnect.iter().all(|l| l.reliability == 1.0));
        assert_eq!(t.flows[1].source, NodeId(4));
        assert_eq!(t.flows[1].arrival_rate, 2.0);
    }

    #[test]
    fn round_trip_is_identity() {
        let t = load_scenario_str(SAMPLE).unwrap();
        let text = serialize_scenario(&t);
        let t2 = load_scenario_str(&text).unwrap();
        assert_eq!(serialize_scenario(&t2), text);
        assert_eq!(t2.links.len(), t.links.len());
        assert_eq!(t2.n_nodes, t.n_nodes);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse_scenario("nodes 3\nlink 0 7 1 0.5\n").unwrap_err();
        assert!(matches!(err, ScenarioError::Parse { line: 2, .. }), "{err}");
        let err = parse_scenario("nodes 3\nlink 0 1 1 1.5\n").unwrap_err();
        assert!(err.to_string().contains("reliability"), "{err}");
        let err = parse_scenario("link 0 1 1 0.5\n").unwrap_err();
        assert!(err.to_string().contains("before nodes"), "{err}");
        let err = parse_scenario("nodes 2\nwarp 0 1\n").unwrap_err();
        assert!(err.to_string().contains("unknown directive"), "{err}");
    }

    #[test]
    fn empty_and_comment_only_files_are_rejected() {
        assert!(matches!(parse_scenario(""), Err(ScenarioError::Empty)));
        assert!(matches!(
            parse_scenario("# nothing here\n\n"),
            Err(ScenarioError::Empty)
        ));
    }

    #[test]
    fn zero_reliability_fails_validation() {
        // Parsing accepts the closed interval; the structural check
        // rejects links that can never succeed.
        let err = load_scenario_str("nodes 3\nlink 0 1 1 0\nflow 0 1 4\n").unwrap_err();
        assert!(matches!(err, ScenarioError::Invalid(_)), "{err}");
    }

    #[test]
    fn duplicate_link_rejected() {
        let err = parse_scenario("nodes 2\nlink 0 1 1 0.5\nlink 0 1 2 0.9\n").unwrap_err();
        assert!(err.to_string().contains("duplicate link"), "{err}");
    }
}
