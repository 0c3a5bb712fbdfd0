//! Store-and-forward link model with seeded message loss.

use std::collections::BTreeMap;

use cotrain_core::swarm::NodeId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("unknown node {0:?}")]
    UnknownPeer(NodeId),
    #[error("invalid link: {0}")]
    InvalidLink(String),
    #[error("drop probability {0} outside [0, 1)")]
    InvalidDropProb(f64),
}

/// Bandwidths in bits per second.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Link {
    pub uplink: f64,
    pub downlink: f64,
}

impl Link {
    pub fn new(uplink: f64, downlink: f64) -> Result<Self, NetError> {
        if !(uplink > 0.0 && downlink > 0.0 && uplink.is_finite() && downlink.is_finite()) {
            return Err(NetError::InvalidLink(format!("uplink {uplink}, downlink {downlink}")));
        }
        Ok(Self { uplink, downlink })
    }
}

/// Seconds spent pushing `bytes` through the slower end of the path.
pub fn transfer_seconds(bytes: u64, from: Link, to: Link) -> f64 {
    bytes as f64 * 8.0 / from.uplink.min(to.downlink)
}

pub fn delivery_time(t_send: f64, bytes: u64, latency: f64, from: Link, to: Link) -> f64 {
    t_send + latency + transfer_seconds(bytes, from, to)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Delivery {
    At(f64),
    Dropped,
}

#[derive(Debug, Clone)]
pub struct Network {
    latency: f64,
    drop_prob: f64,
    links: BTreeMap<NodeId, Link>,
    rng: ChaCha8Rng,
    pub sent: BTreeMap<NodeId, u64>,
    pub received: BTreeMap<NodeId, u64>,
    pub dropped: u64,
}

impl Network {
    pub fn new(latency: f64, drop_prob: f64, seed: u64) -> Result<Self, NetError> {
        if !(0.0..1.0).contains(&drop_prob) {
            return Err(NetError::InvalidDropProb(drop_prob));
        }
        if !(latency >= 0.0 && latency.is_finite()) {
            return Err(NetError::InvalidLink(format!("latency {latency}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x6e6574);
        Ok(Self {
            latency,
            drop_prob,
            links: BTreeMap::new(),
            rng,
            sent: BTreeMap::new(),
            received: BTreeMap::new(),
            dropped: 0,
        })
    }

    pub fn add_node(&mut self, node: NodeId, link: Link) {
        self.links.insert(node, link);
    }

    pub fn link(&self, node: NodeId) -> Result<Link, NetError> {
        self.links.get(&node).copied().ok_or(NetError::UnknownPeer(node))
    }

    /// Accounts one transmission attempt and decides its fate.
    pub fn deliver(&mut self, from: NodeId, to: NodeId, bytes: u64, t_send: f64) -> Result<Delivery, NetError> {
        let (a, b) = (self.link(from)?, self.link(to)?);
        *self.sent.entry(from).or_default() += bytes;
        if self.drop_prob > 0.0 && self.rng.gen::<f64>() < self.drop_prob {
            self.dropped += 1;
            return Ok(Delivery::Dropped);
        }
        Ok(Delivery::At(delivery_time(t_send, bytes, self.latency, a, b)))
    }

    pub fn record_received(&mut self, to: NodeId, bytes: u64) {
        *self.received.entry(to).or_default() += bytes;
    }

    pub fn total_sent(&self) -> u64 {
        self.sent.values().sum()
    }

    pub fn total_received(&self) -> u64 {
        self.received.values().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cotrain_core::codec::{CodecPolicy, ExchangeCodec};
    use cotrain_core::swarm::{Message, PeerId};
    use cotrain_core::tensor::TensorBuf;

    fn peer(i: u32) -> NodeId {
        NodeId::Peer(PeerId(i))
    }

    #[test]
    fn megabyte_at_eight_megabit() {
        let l = Link::new(8e6, 8e6).unwrap();
        assert_eq!(delivery_time(0.0, 1_000_000, 0.05, l, l), 1.05);
    }

    #[test]
    fn empty_message_costs_latency_only() {
        let l = Link::new(1e6, 1e6).unwrap();
        assert_eq!(delivery_time(2.0, 0, 0.05, l, l), 2.05);
    }

    #[test]
    fn slower_end_limits_transfer() {
        let fast = Link::new(100e6, 100e6).unwrap();
        let slow = Link::new(10e6, 20e6).unwrap();
        assert_eq!(transfer_seconds(1_250_000, slow, fast), 1.0);
        assert_eq!(transfer_seconds(1_250_000, fast, slow), 0.5);
    }

    #[test]
    fn doubling_bandwidth_halves_transfer() {
        for bytes in [1u64, 777, 1 << 20, 123_456_789] {
            let a = Link::new(3e6, 3e6).unwrap();
            let b = Link::new(6e6, 6e6).unwrap();
            let other = Link::new(1e9, 1e9).unwrap();
            assert_eq!(
                transfer_seconds(bytes, a, other),
                2.0 * transfer_seconds(bytes, b, other)
            );
        }
    }

    #[test]
    fn invalid_config_rejected() {
        assert_eq!(Network::new(0.0, 1.0, 0).unwrap_err(), NetError::InvalidDropProb(1.0));
        assert!(Network::new(0.0, -0.1, 0).is_err());
        assert!(Link::new(0.0, 1.0).is_err());
        let mut n = Network::new(0.0, 0.0, 0).unwrap();
        n.add_node(peer(0), Link::new(1.0, 1.0).unwrap());
        assert_eq!(
            n.deliver(peer(0), peer(1), 1, 0.0).unwrap_err(),
            NetError::UnknownPeer(peer(1))
        );
    }

    #[test]
    fn drops_are_seeded_and_counted() {
        let run = |seed| {
            let mut n = Network::new(0.01, 0.3, seed).unwrap();
            let l = Link::new(1e6, 1e6).unwrap();
            n.add_node(peer(0), l);
            n.add_node(NodeId::Coordinator, l);
            let fates: Vec<bool> = (0..200)
                .map(|i| n.deliver(peer(0), NodeId::Coordinator, 10, i as f64).unwrap() == Delivery::Dropped)
                .collect();
            (fates, n.dropped, n.total_sent())
        };
        let (a, dropped, sent) = run(5);
        assert_eq!(run(5).0, a);
        assert_ne!(run(6).0, a);
        assert_eq!(dropped as usize, a.iter().filter(|&&d| d).count());
        assert!((30..90).contains(&dropped), "{dropped}");
        assert_eq!(sent, 2000);
    }

    #[test]
    fn q8_contribution_is_a_quarter_of_f32() {
        let t = TensorBuf::from_vec((0..1 << 20).map(|i| (i as f32 * 0.37).sin()).collect());
        let size = |codec: ExchangeCodec| {
            let chunk = codec.encode(&t).unwrap();
            let chunk_len = chunk.wire_len() as u64;
            let msg = Message::Contrib {
                round_id: 1,
                attempt: 1,
                samples: 64,
                chunks: vec![chunk],
            };
            let mut n = Network::new(0.0, 0.0, 0).unwrap();
            let l = Link::new(1e6, 1e6).unwrap();
            n.add_node(peer(0), l);
            n.add_node(NodeId::Coordinator, l);
            n.deliver(peer(0), NodeId::Coordinator, msg.encode().len() as u64, 0.0)
                .unwrap();
            (n.total_sent(), n.total_sent() - chunk_len)
        };
        let (q8, q8_framing) = size(ExchangeCodec::Compressed(CodecPolicy::default()));
        let (f32, f32_framing) = size(ExchangeCodec::Lossless);
        assert_eq!(q8_framing, f32_framing);
        assert_eq!(q8 - q8_framing, (1 << 20) + 4 * 256 + 24);
        assert_eq!(f32 - f32_framing, 4 * (1 << 20) + 24);
        let ratio = q8 as f64 / f32 as f64;
        assert!((ratio - 0.2502).abs() < 1e-4, "{ratio}");
    }
}
