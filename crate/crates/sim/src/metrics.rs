//! Per-round metrics and their CSV form.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use cotrain_core::swarm::NodeId;

pub const CSV_HEADER: &str = "round,loss,live_peers,bytes_total,sim_seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: u64,
    /// Mean dataset loss of the committed parameters.
    pub loss: f64,
    /// Running peers that hold this round's parameters.
    pub live_peers: u64,
    /// Bytes sent by all nodes so far, dropped attempts included.
    pub bytes_total: u64,
    pub sim_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimMetrics {
    pub rounds: Vec<RoundMetrics>,
    pub bytes_sent: BTreeMap<NodeId, u64>,
    pub bytes_received: BTreeMap<NodeId, u64>,
    pub messages_dropped: u64,
    pub hash_mismatches: u64,
}

fn node_label(n: &NodeId) -> String {
    match n {
        NodeId::Coordinator => "coordinator".into(),
        NodeId::Peer(p) => p.0.to_string(),
    }
}

impl SimMetrics {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rounds {
            let _ = writeln!(
                out,
                "{},{:.9},{},{},{:.6}",
                r.round, r.loss, r.live_peers, r.bytes_total, r.sim_seconds
            );
        }
        out
    }

    /// `node,bytes_sent,bytes_received`, coordinator first.
    pub fn bytes_csv(&self) -> String {
        let mut out = String::from("node,bytes_sent,bytes_received\n");
        let nodes: std::collections::BTreeSet<&NodeId> =
            self.bytes_sent.keys().chain(self.bytes_received.keys()).collect();
        for n in nodes {
            let _ = writeln!(
                out,
                "{},{},{}",
                node_label(n),
                self.bytes_sent.get(n).copied().unwrap_or(0),
                self.bytes_received.get(n).copied().unwrap_or(0)
            );
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rounds.last().map(|r| r.loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cotrain_core::swarm::PeerId;

    #[test]
    fn csv_layout() {
        let mut m = SimMetrics::default();
        m.rounds.push(RoundMetrics {
            round: 1,
            loss: 0.5,
            live_peers: 3,
            bytes_total: 1024,
            sim_seconds: 2.25,
        });
        m.bytes_sent.insert(NodeId::Peer(PeerId(2)), 10);
        m.bytes_sent.insert(NodeId::Coordinator, 7);
        m.bytes_received.insert(NodeId::Peer(PeerId(2)), 5);
        assert_eq!(
            m.to_csv(),
            "round,loss,live_peers,bytes_total,sim_seconds\n1,0.500000000,3,1024,2.250000\n"
        );
        assert_eq!(
            m.bytes_csv(),
            "node,bytes_sent,bytes_received\ncoordinator,7,0\n2,10,5\n"
        );
        assert_eq!(m.final_loss(), Some(0.5));
    }
}
