//! A complete round run in one process over a pluggable transport.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::aggregate::{contribution_norm, AggregationPolicy, Contribution};
use super::partition::{
    aggregate_segments, assemble, decode_params, encode_params, partition, slice_chunks, EncodedContribution, Segment,
    UnitLayout,
};
use super::wire::Message;
use super::{PeerId, SwarmError};
use crate::codec::ExchangeCodec;
use crate::optim::{OptimState, Optimizer};
use crate::tensor::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeId {
    Coordinator,
    Peer(PeerId),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    /// Every contribution goes to the coordinator, which aggregates.
    #[default]
    Star,
    /// Each contributor owns a slice of the parameters and aggregates it.
    Partitioned,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwarmConfig {
    pub codec: ExchangeCodec,
    pub policy: AggregationPolicy,
    pub topology: Topology,
}

impl Default for SwarmConfig {
    fn default() -> Self {
        Self {
            codec: ExchangeCodec::Lossless,
            policy: AggregationPolicy::default(),
            topology: Topology::Star,
        }
    }
}

pub trait Transport {
    /// Carries `msg` from `from` to `to` and returns what the receiver reads.
    fn deliver(&mut self, from: NodeId, to: NodeId, msg: &Message) -> Result<Message, SwarmError>;
}

/// Serializes and parses every message, counting bytes per sender.
#[derive(Debug, Clone, Default)]
pub struct Loopback {
    pub bytes_sent: BTreeMap<NodeId, u64>,
    pub messages: u64,
}

impl Loopback {
    pub fn total_bytes(&self) -> u64 {
        self.bytes_sent.values().sum()
    }
}

impl Transport for Loopback {
    fn deliver(&mut self, from: NodeId, _to: NodeId, msg: &Message) -> Result<Message, SwarmError> {
        let bytes = msg.encode();
        *self.bytes_sent.entry(from).or_default() += bytes.len() as u64;
        self.messages += 1;
        Ok(Message::decode(&bytes)?.0)
    }
}

#[derive(Debug, Clone)]
pub struct LocalPeer {
    pub id: PeerId,
    pub params: ParamSet,
    pub state: OptimState,
    pub bandwidth_score: f64,
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    /// The aggregate every peer applied, after decoding.
    pub aggregate: ParamSet,
    pub param_hash: u64,
}

/// Runs one round: exchange, aggregation, step on every peer, hash check.
///
/// `contributions` are per-peer mean gradients; every contributor must be
/// one of `peers`. Peers without a contribution still apply the aggregate.
pub fn run_round(
    round_id: u64,
    peers: &mut [LocalPeer],
    contributions: &[Contribution],
    cfg: &SwarmConfig,
    optimizer: &Optimizer,
    lr: f32,
    transport: &mut dyn Transport,
) -> Result<RoundOutcome, SwarmError> {
    let template = peers.first().map(|p| p.params.clone()).ok_or(SwarmError::EmptyRound)?;
    if contributions.is_empty() {
        return Err(SwarmError::EmptyRound);
    }
    let mut contribs: Vec<&Contribution> = contributions.iter().collect();
    contribs.sort_by_key(|c| c.peer);
    for c in &contribs {
        if !peers.iter().any(|p| p.id == c.peer) {
            return Err(SwarmError::Protocol(format!("contribution from non-member {}", c.peer)));
        }
    }
    let policy = cfg.policy;
    policy.validate(contribs.len())?;
    let codec = cfg.codec;
    let layout = UnitLayout::new(&template, codec.unit_size());
    let attempt = 1;

    let encoded: Vec<_> = contribs
        .iter()
        .map(|c| encode_params(&codec, &c.grad))
        .collect::<Result<_, _>>()?;

    // Pieces of the final aggregate as received by each peer.
    let mut received: BTreeMap<PeerId, Vec<(Segment, crate::codec::QuantizedChunk)>> =
        peers.iter().map(|p| (p.id, Vec::new())).collect();

    match cfg.topology {
        Topology::Star => {
            let mut at_coord = Vec::new();
            for (c, chunks) in contribs.iter().zip(&encoded) {
                let msg = Message::Contrib {
                    round_id,
                    attempt,
                    samples: c.samples,
                    chunks: chunks.clone(),
                };
                match transport.deliver(NodeId::Peer(c.peer), NodeId::Coordinator, &msg)? {
                    Message::Contrib { samples, chunks, .. } => at_coord.push((c.peer, samples, chunks)),
                    m => return Err(SwarmError::Protocol(format!("expected CONTRIB, got {}", m.kind()))),
                }
            }
            let all = layout.segments(0..layout.num_units());
            let inputs = at_coord
                .iter()
                .map(|(peer, samples, chunks)| {
                    Ok(EncodedContribution {
                        peer: *peer,
                        samples: *samples,
                        norm: contribution_norm(&decode_params(&template, chunks)?),
                        chunks: slice_chunks(chunks, &all)?,
                    })
                })
                .collect::<Result<Vec<_>, SwarmError>>()?;
            let agg = aggregate_segments(&layout, &all, &inputs, &policy, &codec)?;
            let msg = Message::Gather {
                round_id,
                attempt,
                units: 0..layout.num_units() as u32,
                chunks: agg,
            };
            for p in peers.iter() {
                let Message::Gather { chunks, .. } =
                    transport.deliver(NodeId::Coordinator, NodeId::Peer(p.id), &msg)?
                else {
                    return Err(SwarmError::Protocol("expected GATHER".into()));
                };
                received.get_mut(&p.id).unwrap().extend(all.iter().cloned().zip(chunks));
            }
        }
        Topology::Partitioned => {
            let scores: Vec<f64> = contribs
                .iter()
                .map(|c| peers.iter().find(|p| p.id == c.peer).unwrap().bandwidth_score)
                .collect();
            let ranges = partition(layout.num_units(), &scores)?;
            let norms: Vec<f64> = encoded
                .iter()
                .map(|chunks| Ok(contribution_norm(&decode_params(&template, chunks)?)))
                .collect::<Result<_, SwarmError>>()?;
            for (owner, range) in contribs.iter().map(|c| c.peer).zip(ranges) {
                let segs = layout.segments(range.clone());
                if segs.is_empty() {
                    continue;
                }
                let mut inputs = Vec::with_capacity(contribs.len());
                for ((c, chunks), &norm) in contribs.iter().zip(&encoded).zip(&norms) {
                    let slice = slice_chunks(chunks, &segs)?;
                    if c.peer == owner {
                        inputs.push(EncodedContribution {
                            peer: c.peer,
                            samples: c.samples,
                            norm,
                            chunks: slice,
                        });
                        continue;
                    }
                    let msg = Message::Slice {
                        round_id,
                        attempt,
                        samples: c.samples,
                        norm,
                        units: range.start as u32..range.end as u32,
                        chunks: slice,
                    };
                    match transport.deliver(NodeId::Peer(c.peer), NodeId::Peer(owner), &msg)? {
                        Message::Slice {
                            samples, norm, chunks, ..
                        } => inputs.push(EncodedContribution {
                            peer: c.peer,
                            samples,
                            norm,
                            chunks,
                        }),
                        m => return Err(SwarmError::Protocol(format!("expected SLICE, got {}", m.kind()))),
                    }
                }
                let agg = aggregate_segments(&layout, &segs, &inputs, &policy, &codec)?;
                let msg = Message::Gather {
                    round_id,
                    attempt,
                    units: range.start as u32..range.end as u32,
                    chunks: agg.clone(),
                };
                for p in peers.iter() {
                    let chunks = if p.id == owner {
                        agg.clone()
                    } else {
                        match transport.deliver(NodeId::Peer(owner), NodeId::Peer(p.id), &msg)? {
                            Message::Gather { chunks, .. } => chunks,
                            m => return Err(SwarmError::Protocol(format!("expected GATHER, got {}", m.kind()))),
                        }
                    };
                    received
                        .get_mut(&p.id)
                        .unwrap()
                        .extend(segs.iter().cloned().zip(chunks));
                }
            }
        }
    }

    let mut hashes = Vec::with_capacity(peers.len());
    let mut applied = None;
    for p in peers.iter_mut() {
        let pieces = received.remove(&p.id).unwrap_or_default();
        let chunks = assemble(&layout, &codec, pieces)?;
        let grads = decode_params(&template, &chunks)?;
        optimizer.step(&mut p.params, &grads, &mut p.state, lr)?;
        let msg = Message::StepDone {
            round_id,
            param_hash: p.params.hash(),
        };
        if let Message::StepDone { param_hash, .. } =
            transport.deliver(NodeId::Peer(p.id), NodeId::Coordinator, &msg)?
        {
            hashes.push(param_hash);
        }
        applied.get_or_insert(grads);
    }
    if hashes.windows(2).any(|w| w[0] != w[1]) {
        return Err(SwarmError::HashMismatch { round_id });
    }
    Ok(RoundOutcome {
        aggregate: applied.unwrap(),
        param_hash: hashes[0],
    })
}
