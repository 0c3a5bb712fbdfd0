//! Event-driven run of a full training swarm: one coordinator actor and a
//! set of peer actors exchanging encoded protocol messages over [`Network`].
//!
//! Peers compute microbatches at their configured speed and report
//! cumulative progress. Once the reported total reaches the target batch the
//! coordinator freezes membership with TRIGGER, contributions are exchanged
//! (star or partitioned), every synced peer applies the same optimizer step,
//! and the coordinator checks the reported parameter hashes.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt::Write as _;
use std::ops::Range;

use cotrain_core::codec::{ExchangeCodec, QuantizedChunk};
use cotrain_core::optim::ScheduleConfig;
use cotrain_core::optim::{read_checkpoint, write_checkpoint, OptimError, OptimState, Optimizer};
use cotrain_core::swarm::aggregate::contribution_norm;
use cotrain_core::swarm::partition::{
    aggregate_segments, assemble, decode_params, encode_params, partition, slice_chunks, star_encoded,
    EncodedContribution, Segment, UnitLayout,
};
use cotrain_core::swarm::{
    AggregationPolicy, Allowlist, Ledger, Member, Message, NodeId, PeerId, RoundPhase, RoundState, SampleStream,
    SwarmError, Topology,
};
use cotrain_core::tasks::{accumulate_into, dataset_loss, to_f64, GradAccumulator, Params64, Task, TaskError};
use cotrain_core::tensor::ParamSet;
use thiserror::Error;

use crate::metrics::{RoundMetrics, SimMetrics};
use crate::net::{Delivery, Link, NetError, Network};
use crate::scenario::{ChurnKind, RoundPoint, Scenario, ScenarioError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Swarm(#[from] SwarmError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("simulation exceeded {0} events")]
    EventLimit(u64),
    #[error("internal protocol error: {0}")]
    Internal(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimOptions {
    /// Build the textual event trace.
    pub trace: bool,
    /// Keep per-round contributions, sample indices and hashes.
    pub capture: bool,
    pub max_events: u64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            trace: true,
            capture: false,
            max_events: 50_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Completed,
    Aborted { round: u64, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemberCapture {
    pub peer: PeerId,
    pub samples: u64,
    /// Sample indices behind the contribution, in accumulation order.
    pub indices: Vec<usize>,
    /// Decoded contribution as the coordinator received it (star only).
    pub contribution: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundCapture {
    pub round: u64,
    pub members: Vec<MemberCapture>,
    /// Decoded aggregate every peer applied, flattened.
    pub aggregate: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Captures {
    pub rounds: Vec<RoundCapture>,
    pub coordinator_hashes: BTreeMap<u64, u64>,
    /// Hash of each peer's parameters after applying a round.
    pub peer_hashes: BTreeMap<u64, BTreeMap<PeerId, u64>>,
    /// Messages the coordinator discarded, by sender.
    pub ignored: BTreeMap<PeerId, u64>,
}

#[derive(Debug, Clone)]
pub struct SimResult {
    pub outcome: Outcome,
    pub metrics: SimMetrics,
    pub trace: String,
    pub captures: Captures,
    pub ledger: Ledger,
    pub final_params: ParamSet,
}

pub fn simulate(scenario: &Scenario, opts: &SimOptions) -> Result<SimResult, SimError> {
    scenario.validate()?;
    Sim::new(scenario, *opts)?.run()
}

#[derive(Debug, Clone, Copy)]
enum Event {
    Deliver(u64),
    Retry(u64),
    ComputeDone { peer: PeerId, gen: u64 },
    Churn(usize),
    Detect { peer: PeerId, incarnation: u64 },
}

struct Scheduled {
    t: f64,
    seq: u64,
    ev: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // reversed: BinaryHeap pops the earliest event first
    fn cmp(&self, other: &Self) -> Ordering {
        other.t.total_cmp(&self.t).then(other.seq.cmp(&self.seq))
    }
}

struct InFlight {
    from: NodeId,
    from_inc: u64,
    to: NodeId,
    to_inc: u64,
    bytes: Vec<u8>,
    kind: &'static str,
    attempts: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Offline,
    Joining,
    Active,
    Left,
    Crashed,
}

struct TriggerInfo {
    attempt: u32,
    members: Vec<Member>,
    ranges: Vec<Range<usize>>,
    me: Option<usize>,
    gathered: bool,
}

struct PeerNode {
    speed: f64,
    score: f64,
    gradient_scale: f64,
    rogue: bool,
    token: String,
    status: Status,
    incarnation: u64,
    /// Round the coordinator admitted this incarnation into.
    admitted_round: Option<u64>,
    /// Round currently being computed or aggregated; 0 before the first ack.
    round: u64,
    params: ParamSet,
    p64: Params64,
    state: Option<OptimState>,
    stream: SampleStream,
    gen: u64,
    microbatch: Vec<usize>,
    compute_seconds: f64,
    /// Accumulator after each completed microbatch; index 0 is empty.
    history: Vec<GradAccumulator>,
    indices: Vec<usize>,
    last_attempt: u32,
    trigger: Option<TriggerInfo>,
    /// Slices received for this node's range, by (attempt, sender).
    slices: BTreeMap<(u32, PeerId), EncodedContribution>,
    pieces: BTreeMap<PeerId, Vec<(Segment, QuantizedChunk)>>,
    commit_hash: Option<u64>,
    rogue_sent: u64,
}

struct Coordinator {
    params: ParamSet,
    state: OptimState,
    round: RoundState,
    attempt_offset: u32,
    committed: u64,
    finished: bool,
    /// Admitted or pending peers with the incarnation the coordinator knows.
    view: BTreeMap<PeerId, u64>,
    pending_joins: BTreeSet<PeerId>,
    last_progress: BTreeMap<PeerId, (u64, f64)>,
    contribs: BTreeMap<PeerId, (u64, Vec<QuantizedChunk>)>,
    pieces: BTreeMap<PeerId, Vec<(Segment, QuantizedChunk)>>,
    ledger: Ledger,
    hashes: BTreeMap<u64, u64>,
    aggregating_fired: BTreeSet<u64>,
}

impl Coordinator {
    fn wire_attempt(&self) -> u32 {
        self.attempt_offset + self.round.attempt()
    }
}

struct Sim<'a> {
    sc: &'a Scenario,
    opts: SimOptions,
    task: Box<dyn Task>,
    template: ParamSet,
    optimizer: Optimizer,
    schedule: ScheduleConfig,
    codec: ExchangeCodec,
    policy: AggregationPolicy,
    layout: UnitLayout,
    allowlist: Option<Allowlist>,
    net: Network,
    now: f64,
    seq: u64,
    queue: BinaryHeap<Scheduled>,
    events: u64,
    msgs: BTreeMap<u64, InFlight>,
    next_msg: u64,
    peers: BTreeMap<PeerId, PeerNode>,
    coord: Coordinator,
    round_churn: BTreeMap<(u64, RoundPoint), Vec<usize>>,
    trace: String,
    metrics: SimMetrics,
    captures: Captures,
    /// Indices behind each peer's contribution in the current round.
    contributed: BTreeMap<PeerId, Vec<usize>>,
}

fn node_name(n: NodeId) -> String {
    match n {
        NodeId::Coordinator => "coordinator".into(),
        NodeId::Peer(p) => p.to_string(),
    }
}

impl<'a> Sim<'a> {
    fn new(sc: &'a Scenario, opts: SimOptions) -> Result<Self, SimError> {
        let task = sc.task.build()?;
        let template = task.init_params();
        let optimizer = Optimizer::new(sc.optim_config())?;
        let codec = sc.exchange_codec();
        let layout = UnitLayout::new(&template, codec.unit_size());
        let mut net = Network::new(sc.latency, sc.drop_prob, sc.seed)?;
        net.add_node(
            NodeId::Coordinator,
            Link::new(sc.coordinator.uplink, sc.coordinator.downlink)?,
        );
        let mut peers = BTreeMap::new();
        for p in &sc.peers {
            let id = PeerId(p.id);
            net.add_node(NodeId::Peer(id), Link::new(p.uplink, p.downlink)?);
            peers.insert(
                id,
                PeerNode {
                    speed: p.speed,
                    score: p.score(),
                    gradient_scale: p.gradient_scale,
                    rogue: p.rogue,
                    token: p.token.clone(),
                    status: Status::Offline,
                    incarnation: 0,
                    admitted_round: None,
                    round: 0,
                    params: template.clone(),
                    p64: Vec::new(),
                    state: None,
                    stream: SampleStream::new(task.num_samples(), sc.seed, id),
                    gen: 0,
                    microbatch: Vec::new(),
                    compute_seconds: 0.0,
                    history: Vec::new(),
                    indices: Vec::new(),
                    last_attempt: 0,
                    trigger: None,
                    slices: BTreeMap::new(),
                    pieces: BTreeMap::new(),
                    commit_hash: None,
                    rogue_sent: 0,
                },
            );
        }
        let state = optimizer.init_state(&template)?;
        let coord = Coordinator {
            params: template.clone(),
            state,
            round: RoundState::new(1, sc.target_batch, sc.microbatch, []),
            attempt_offset: 0,
            committed: 0,
            finished: false,
            view: BTreeMap::new(),
            pending_joins: BTreeSet::new(),
            last_progress: BTreeMap::new(),
            contribs: BTreeMap::new(),
            pieces: BTreeMap::new(),
            ledger: Ledger::new(),
            hashes: BTreeMap::new(),
            aggregating_fired: BTreeSet::new(),
        };
        let mut round_churn: BTreeMap<(u64, RoundPoint), Vec<usize>> = BTreeMap::new();
        for (i, c) in sc.churn.iter().enumerate() {
            if let Some(r) = c.round {
                round_churn.entry((r, c.when)).or_default().push(i);
            }
        }
        Ok(Self {
            sc,
            opts,
            template,
            optimizer,
            schedule: sc.schedule(),
            codec,
            policy: sc.aggregation,
            layout,
            allowlist: sc.allowlist.as_ref().map(Allowlist::new),
            net,
            now: 0.0,
            seq: 0,
            queue: BinaryHeap::new(),
            events: 0,
            msgs: BTreeMap::new(),
            next_msg: 0,
            peers,
            coord,
            round_churn,
            trace: String::new(),
            metrics: SimMetrics::default(),
            captures: Captures::default(),
            contributed: BTreeMap::new(),
            task,
        })
    }

    fn log(&mut self, args: std::fmt::Arguments<'_>) {
        if self.opts.trace {
            let _ = writeln!(self.trace, "{:.6} {}", self.now, args);
        }
    }

    fn schedule(&mut self, t: f64, ev: Event) {
        self.seq += 1;
        self.queue.push(Scheduled { t, seq: self.seq, ev });
    }

    fn run(mut self) -> Result<SimResult, SimError> {
        let ids: Vec<PeerId> = self.sc.peers.iter().filter(|p| p.start).map(|p| PeerId(p.id)).collect();
        for id in ids {
            self.peer_join(id)?;
        }
        for (i, c) in self.sc.churn.iter().enumerate() {
            if let Some(t) = c.time {
                self.schedule(t, Event::Churn(i));
            }
        }
        self.fire_round_churn(1, RoundPoint::Start)?;

        while let Some(Scheduled { t, ev, .. }) = self.queue.pop() {
            self.events += 1;
            if self.events > self.opts.max_events {
                return Err(SimError::EventLimit(self.opts.max_events));
            }
            self.now = t;
            match ev {
                Event::Deliver(id) => self.on_deliver(id)?,
                Event::Retry(id) => self.on_retry(id)?,
                Event::ComputeDone { peer, gen } => self.on_compute_done(peer, gen)?,
                Event::Churn(i) => self.apply_churn(i)?,
                Event::Detect { peer, incarnation } => {
                    self.log(format_args!("detect {peer} failed"));
                    self.coord_fail(peer, incarnation)?;
                }
            }
        }

        let outcome = if self.coord.finished {
            Outcome::Completed
        } else {
            Outcome::Aborted {
                round: self.coord.round.round_id,
                reason: "no live peers left to finish the round".into(),
            }
        };
        self.log(format_args!("end {:?}", outcome));
        self.metrics.bytes_sent = self.net.sent.clone();
        self.metrics.bytes_received = self.net.received.clone();
        self.metrics.messages_dropped = self.net.dropped;
        Ok(SimResult {
            outcome,
            metrics: self.metrics,
            trace: self.trace,
            captures: self.captures,
            ledger: self.coord.ledger,
            final_params: self.coord.params,
        })
    }

    // ---- transport ----

    fn incarnation(&self, n: NodeId) -> u64 {
        match n {
            NodeId::Coordinator => 0,
            NodeId::Peer(p) => self.peers[&p].incarnation,
        }
    }

    fn send(&mut self, from: NodeId, to: NodeId, msg: &Message) -> Result<(), SimError> {
        let id = self.next_msg;
        self.next_msg += 1;
        let flight = InFlight {
            from,
            from_inc: self.incarnation(from),
            to,
            to_inc: self.incarnation(to),
            bytes: msg.encode(),
            kind: msg.kind(),
            attempts: 0,
        };
        self.msgs.insert(id, flight);
        self.transmit(id)
    }

    fn transmit(&mut self, id: u64) -> Result<(), SimError> {
        let f = self.msgs.get_mut(&id).expect("message in flight");
        f.attempts += 1;
        let (from, to, len, kind, attempts) = (f.from, f.to, f.bytes.len() as u64, f.kind, f.attempts);
        match self.net.deliver(from, to, len, self.now)? {
            Delivery::At(t) => {
                self.log(format_args!(
                    "send {}->{} {kind} {len}B",
                    node_name(from),
                    node_name(to)
                ));
                self.schedule(t, Event::Deliver(id));
            }
            Delivery::Dropped => {
                self.log(format_args!(
                    "drop {}->{} {kind} {len}B attempt {attempts}",
                    node_name(from),
                    node_name(to)
                ));
                if attempts <= self.sc.retries {
                    self.schedule(self.now + self.sc.retry_timeout, Event::Retry(id));
                } else {
                    self.msgs.remove(&id);
                    // the peer end of an unusable path is treated as failed
                    let victim = match (from, to) {
                        (_, NodeId::Peer(p)) => p,
                        (NodeId::Peer(p), NodeId::Coordinator) => p,
                        _ => unreachable!("coordinator does not message itself"),
                    };
                    self.log(format_args!("give-up {kind}, disconnecting {victim}"));
                    self.crash(victim)?;
                }
            }
        }
        Ok(())
    }

    fn sender_gone(&self, from: NodeId, inc: u64) -> bool {
        match from {
            NodeId::Coordinator => false,
            NodeId::Peer(p) => {
                let n = &self.peers[&p];
                n.incarnation != inc || n.status == Status::Crashed
            }
        }
    }

    fn on_retry(&mut self, id: u64) -> Result<(), SimError> {
        let f = &self.msgs[&id];
        if self.sender_gone(f.from, f.from_inc) {
            self.msgs.remove(&id);
            return Ok(());
        }
        self.transmit(id)
    }

    fn on_deliver(&mut self, id: u64) -> Result<(), SimError> {
        let f = self.msgs.remove(&id).expect("message in flight");
        let receiver_ok = match f.to {
            NodeId::Coordinator => true,
            NodeId::Peer(p) => {
                let n = &self.peers[&p];
                n.incarnation == f.to_inc && matches!(n.status, Status::Joining | Status::Active)
            }
        };
        if self.sender_gone(f.from, f.from_inc) || !receiver_ok {
            self.log(format_args!(
                "lost {}->{} {}",
                node_name(f.from),
                node_name(f.to),
                f.kind
            ));
            return Ok(());
        }
        self.net.record_received(f.to, f.bytes.len() as u64);
        let (msg, _) = Message::decode(&f.bytes)?;
        self.log(format_args!(
            "recv {}->{} {}",
            node_name(f.from),
            node_name(f.to),
            f.kind
        ));
        match (f.from, f.to) {
            (NodeId::Peer(p), NodeId::Coordinator) => self.coord_receive(p, f.from_inc, msg),
            (from, NodeId::Peer(p)) => self.peer_receive(p, from, msg),
            _ => Err(SimError::Internal("coordinator messaged itself".into())),
        }
    }

    // ---- churn ----

    fn fire_round_churn(&mut self, round: u64, point: RoundPoint) -> Result<(), SimError> {
        if let Some(list) = self.round_churn.remove(&(round, point)) {
            for i in list {
                self.apply_churn(i)?;
            }
        }
        Ok(())
    }

    fn apply_churn(&mut self, i: usize) -> Result<(), SimError> {
        if self.coord.finished {
            return Ok(());
        }
        let c = self.sc.churn[i];
        let id = PeerId(c.peer);
        self.log(format_args!("churn {:?} {id}", c.event));
        match c.event {
            ChurnKind::Crash => self.crash(id),
            ChurnKind::Leave => self.leave(id),
            ChurnKind::Join => self.peer_join(id),
        }
    }

    fn crash(&mut self, id: PeerId) -> Result<(), SimError> {
        let n = self.peers.get_mut(&id).expect("known peer");
        if !matches!(n.status, Status::Joining | Status::Active) {
            return Ok(());
        }
        n.status = Status::Crashed;
        n.gen += 1;
        n.admitted_round = None;
        let inc = n.incarnation;
        self.log(format_args!("crash {id}"));
        self.schedule(
            self.now + self.sc.failure_timeout,
            Event::Detect {
                peer: id,
                incarnation: inc,
            },
        );
        Ok(())
    }

    fn leave(&mut self, id: PeerId) -> Result<(), SimError> {
        let n = self.peers.get_mut(&id).expect("known peer");
        if !matches!(n.status, Status::Joining | Status::Active) {
            return Ok(());
        }
        n.status = Status::Left;
        n.gen += 1;
        n.admitted_round = None;
        self.send(NodeId::Peer(id), NodeId::Coordinator, &Message::Leave { peer: id })
    }

    // ---- peers ----

    fn peer_join(&mut self, id: PeerId) -> Result<(), SimError> {
        let seed = self.sc.seed;
        let samples = self.task.num_samples();
        let n = self.peers.get_mut(&id).expect("known peer");
        if matches!(n.status, Status::Joining | Status::Active) {
            return Ok(());
        }
        n.incarnation += 1;
        n.status = Status::Joining;
        n.round = 0;
        n.admitted_round = None;
        n.trigger = None;
        n.slices.clear();
        n.pieces.clear();
        n.commit_hash = None;
        if n.incarnation > 1 {
            n.stream = SampleStream::new(samples, seed ^ (n.incarnation << 32), id);
        }
        let token = n.token.clone();
        let rogue = n.rogue;
        self.send(
            NodeId::Peer(id),
            NodeId::Coordinator,
            &Message::Join { peer: id, token },
        )?;
        if rogue {
            let n = self.peers.get_mut(&id).unwrap();
            n.p64 = to_f64(&n.params);
            self.start_microbatch(id);
        }
        Ok(())
    }

    fn start_microbatch(&mut self, id: PeerId) {
        let m = self.sc.microbatch;
        let n = self.peers.get_mut(&id).unwrap();
        n.gen += 1;
        n.microbatch = n.stream.take(m as usize);
        let done = self.now + m as f64 / n.speed;
        let ev = Event::ComputeDone { peer: id, gen: n.gen };
        self.schedule(done, ev);
    }

    fn stop_compute(&mut self, id: PeerId) {
        let n = self.peers.get_mut(&id).unwrap();
        n.gen += 1;
        n.microbatch.clear();
    }

    fn start_round(&mut self, id: PeerId, round: u64) {
        let n = self.peers.get_mut(&id).unwrap();
        n.round = round;
        n.p64 = to_f64(&n.params);
        n.history = vec![GradAccumulator::new(&n.params)];
        n.indices.clear();
        n.compute_seconds = 0.0;
        n.last_attempt = 0;
        n.trigger = None;
        n.slices.clear();
        n.pieces.clear();
        n.commit_hash = None;
        if round <= self.sc.rounds && !self.coord.finished {
            self.start_microbatch(id);
        }
    }

    fn on_compute_done(&mut self, id: PeerId, gen: u64) -> Result<(), SimError> {
        let m = self.sc.microbatch;
        let n = self.peers.get_mut(&id).unwrap();
        if n.gen != gen || !matches!(n.status, Status::Joining | Status::Active) {
            return Ok(());
        }
        let mb = std::mem::take(&mut n.microbatch);
        if n.rogue {
            let mut acc = GradAccumulator::new(&n.params);
            accumulate_into(self.task.as_ref(), &n.p64, &mb, &mut acc)?;
            n.rogue_sent += 1;
            let sent = n.rogue_sent;
            let chunks = encode_params(&self.codec, &acc.mean(&n.params))?;
            let msg = Message::Contrib {
                round_id: sent,
                attempt: 1,
                samples: m,
                chunks,
            };
            self.send(NodeId::Peer(id), NodeId::Coordinator, &msg)?;
            if sent < self.sc.rounds && !self.coord.finished {
                self.start_microbatch(id);
            }
            return Ok(());
        }
        let mut acc = n.history.last().expect("history starts non-empty").clone();
        accumulate_into(self.task.as_ref(), &n.p64, &mb, &mut acc)?;
        n.history.push(acc);
        n.indices.extend_from_slice(&mb);
        n.compute_seconds += m as f64 / n.speed;
        let msg = Message::Progress {
            round_id: n.round,
            samples: (n.history.len() as u64 - 1) * m,
            compute_seconds: n.compute_seconds,
        };
        self.send(NodeId::Peer(id), NodeId::Coordinator, &msg)?;
        self.start_microbatch(id);
        Ok(())
    }

    fn lr(&self, round: u64) -> Result<f32, SimError> {
        Ok(self.schedule.lr_at(round.min(self.schedule.total_steps))? as f32)
    }

    fn peer_receive(&mut self, id: PeerId, from: NodeId, msg: Message) -> Result<(), SimError> {
        if self.peers[&id].rogue {
            return Ok(());
        }
        let round = self.peers[&id].round;
        match msg {
            Message::JoinAck {
                round_id,
                params,
                optimizer,
            } => {
                let (_, state, _) = read_checkpoint(&optimizer)?;
                let n = self.peers.get_mut(&id).unwrap();
                n.params = decode_params(&self.template, &params)?;
                n.state = Some(state);
                n.status = Status::Active;
                self.start_round(id, round_id);
            }
            Message::Trigger {
                round_id,
                attempt,
                members,
            } if round_id == round => {
                if attempt <= self.peers[&id].last_attempt {
                    return Ok(());
                }
                self.on_trigger(id, attempt, members)?;
            }
            Message::Slice {
                round_id,
                attempt,
                samples,
                norm,
                chunks,
                ..
            } if round_id == round => {
                let NodeId::Peer(src) = from else {
                    return Err(SimError::Internal("slice from coordinator".into()));
                };
                let n = self.peers.get_mut(&id).unwrap();
                if attempt < n.last_attempt {
                    return Ok(());
                }
                // may arrive before the trigger of its attempt
                n.slices.insert(
                    (attempt, src),
                    EncodedContribution {
                        peer: src,
                        samples,
                        norm,
                        chunks,
                    },
                );
                self.try_aggregate(id)?;
            }
            Message::Gather {
                round_id,
                attempt,
                units,
                chunks,
            } if round_id == round => match from {
                NodeId::Coordinator => {
                    let grads = decode_params(&self.template, &chunks)?;
                    self.apply_step(id, &grads)?;
                }
                NodeId::Peer(owner) => {
                    let n = self.peers.get_mut(&id).unwrap();
                    if attempt != n.last_attempt {
                        return Ok(());
                    }
                    let segs = self.layout.segments(units.start as usize..units.end as usize);
                    if segs.len() != chunks.len() {
                        return Err(SimError::Internal(format!("gather from {owner} has wrong chunk count")));
                    }
                    n.pieces.insert(owner, segs.into_iter().zip(chunks).collect());
                    self.try_step(id)?;
                }
            },
            Message::StepDone { round_id, param_hash } if round_id == round => {
                self.peers.get_mut(&id).unwrap().commit_hash = Some(param_hash);
                self.try_step(id)?;
            }
            _ => {}
        }
        Ok(())
    }

    fn on_trigger(&mut self, id: PeerId, attempt: u32, members: Vec<Member>) -> Result<(), SimError> {
        self.stop_compute(id);
        let n = self.peers.get_mut(&id).unwrap();
        n.slices.retain(|&(a, _), _| a >= attempt);
        n.pieces.clear();
        n.last_attempt = attempt;
        n.trigger = None;
        if members.is_empty() {
            // round restarted: keep accumulated work and continue
            self.start_microbatch(id);
            return Ok(());
        }
        let me = members.iter().position(|m| m.peer == id);
        let ranges = match self.sc.topology {
            Topology::Star => Vec::new(),
            Topology::Partitioned => {
                let scores: Vec<f64> = members.iter().map(|m| m.bandwidth_score).collect();
                partition(self.layout.num_units(), &scores)?
            }
        };
        let n = self.peers.get_mut(&id).unwrap();
        n.trigger = Some(TriggerInfo {
            attempt,
            members: members.clone(),
            ranges: ranges.clone(),
            me,
            gathered: false,
        });
        let Some(i) = me else {
            return Ok(());
        };
        let samples = members[i].samples;
        let m = self.sc.microbatch;
        let k = (samples / m) as usize;
        if !samples.is_multiple_of(m) || k >= n.history.len() {
            return Err(SimError::Internal(format!(
                "{id} asked for {samples} samples but has {}",
                (n.history.len() - 1) as u64 * m
            )));
        }
        let mut grad = n.history[k].mean(&n.params);
        if n.gradient_scale != 1.0 {
            let s = n.gradient_scale as f32;
            for l in grad.layers_mut() {
                for x in l.tensor.data_mut() {
                    *x *= s;
                }
            }
        }
        let round = n.round;
        if self.opts.capture {
            self.contributed.insert(id, n.indices[..samples as usize].to_vec());
        }
        let chunks = encode_params(&self.codec, &grad)?;
        match self.sc.topology {
            Topology::Star => {
                let msg = Message::Contrib {
                    round_id: round,
                    attempt,
                    samples,
                    chunks,
                };
                self.send(NodeId::Peer(id), NodeId::Coordinator, &msg)?;
            }
            Topology::Partitioned => {
                let norm = contribution_norm(&decode_params(&self.template, &chunks)?);
                for (j, (member, range)) in members.iter().zip(&ranges).enumerate() {
                    let segs = self.layout.segments(range.clone());
                    if segs.is_empty() {
                        continue;
                    }
                    let slice = slice_chunks(&chunks, &segs)?;
                    if j == i {
                        self.peers.get_mut(&id).unwrap().slices.insert(
                            (attempt, id),
                            EncodedContribution {
                                peer: id,
                                samples,
                                norm,
                                chunks: slice,
                            },
                        );
                    } else {
                        let msg = Message::Slice {
                            round_id: round,
                            attempt,
                            samples,
                            norm,
                            units: range.start as u32..range.end as u32,
                            chunks: slice,
                        };
                        self.send(NodeId::Peer(id), NodeId::Peer(member.peer), &msg)?;
                    }
                }
                if self.layout.segments(ranges[i].clone()).is_empty() {
                    // nothing to own; tell the coordinator the slices are out
                    let r = ranges[i].start as u32..ranges[i].end as u32;
                    let msg = Message::Gather {
                        round_id: round,
                        attempt,
                        units: r,
                        chunks: Vec::new(),
                    };
                    self.peers.get_mut(&id).unwrap().trigger.as_mut().unwrap().gathered = true;
                    self.send(NodeId::Peer(id), NodeId::Coordinator, &msg)?;
                } else {
                    self.try_aggregate(id)?;
                }
            }
        }
        Ok(())
    }

    fn try_aggregate(&mut self, id: PeerId) -> Result<(), SimError> {
        let n = &self.peers[&id];
        let Some(t) = &n.trigger else { return Ok(()) };
        let Some(i) = t.me else { return Ok(()) };
        if t.gathered || t.members.iter().any(|m| !n.slices.contains_key(&(t.attempt, m.peer))) {
            return Ok(());
        }
        let segs = self.layout.segments(t.ranges[i].clone());
        let inputs: Vec<EncodedContribution> = t
            .members
            .iter()
            .map(|m| n.slices[&(t.attempt, m.peer)].clone())
            .collect();
        let policy = self.policy.clamped_for(inputs.len());
        let agg = aggregate_segments(&self.layout, &segs, &inputs, &policy, &self.codec)?;
        let units = t.ranges[i].start as u32..t.ranges[i].end as u32;
        let msg = Message::Gather {
            round_id: n.round,
            attempt: t.attempt,
            units,
            chunks: agg.clone(),
        };
        let others: Vec<PeerId> = t.members.iter().map(|m| m.peer).filter(|&p| p != id).collect();
        let n = self.peers.get_mut(&id).unwrap();
        n.trigger.as_mut().unwrap().gathered = true;
        n.pieces.insert(id, segs.into_iter().zip(agg).collect());
        for p in others {
            self.send(NodeId::Peer(id), NodeId::Peer(p), &msg)?;
        }
        self.send(NodeId::Peer(id), NodeId::Coordinator, &msg)?;
        self.try_step(id)
    }

    fn try_step(&mut self, id: PeerId) -> Result<(), SimError> {
        let n = &self.peers[&id];
        let (Some(t), Some(_)) = (&n.trigger, n.commit_hash) else {
            return Ok(());
        };
        let owners: Vec<PeerId> = t
            .members
            .iter()
            .zip(&t.ranges)
            .filter(|(_, r)| !self.layout.segments((*r).clone()).is_empty())
            .map(|(m, _)| m.peer)
            .collect();
        if owners.iter().any(|o| !n.pieces.contains_key(o)) {
            return Ok(());
        }
        let pieces: Vec<(Segment, QuantizedChunk)> = owners.iter().flat_map(|o| n.pieces[o].clone()).collect();
        let chunks = assemble(&self.layout, &self.codec, pieces)?;
        let grads = decode_params(&self.template, &chunks)?;
        self.apply_step(id, &grads)
    }

    fn apply_step(&mut self, id: PeerId, grads: &ParamSet) -> Result<(), SimError> {
        let lr = self.lr(self.peers[&id].round)?;
        let n = self.peers.get_mut(&id).unwrap();
        let state = n
            .state
            .as_mut()
            .ok_or_else(|| SimError::Internal(format!("{id} stepped without optimizer state")))?;
        self.optimizer.step(&mut n.params, grads, state, lr)?;
        let hash = n.params.hash();
        let round = n.round;
        if let Some(expected) = n.commit_hash {
            if expected != hash {
                self.metrics.hash_mismatches += 1;
            }
        }
        self.log(format_args!("step {id} round {round} hash {hash:016x}"));
        if self.opts.capture {
            self.captures.peer_hashes.entry(round).or_default().insert(id, hash);
        }
        let msg = Message::StepDone {
            round_id: round,
            param_hash: hash,
        };
        self.send(NodeId::Peer(id), NodeId::Coordinator, &msg)?;
        self.start_round(id, round + 1);
        Ok(())
    }

    // ---- coordinator ----

    fn coord_receive(&mut self, from: PeerId, inc: u64, msg: Message) -> Result<(), SimError> {
        let known = self.coord.view.get(&from) == Some(&inc);
        let accepted = match msg {
            Message::Join { token, .. } => {
                self.coord_join(from, inc, &token)?;
                true
            }
            Message::Leave { .. } if known => {
                self.coord_fail(from, inc)?;
                true
            }
            Message::Progress {
                round_id,
                samples,
                compute_seconds,
            } if known => self.coord_progress(from, round_id, samples, compute_seconds)?,
            Message::Contrib {
                round_id,
                attempt,
                samples,
                chunks,
            } if known => self.coord_contrib(from, round_id, attempt, samples, chunks)?,
            Message::Gather {
                round_id,
                attempt,
                units,
                chunks,
            } if known => self.coord_gather(from, round_id, attempt, units, chunks)?,
            Message::StepDone { round_id, param_hash } if known => {
                if let Some(&h) = self.coord.hashes.get(&round_id) {
                    if h != param_hash {
                        self.metrics.hash_mismatches += 1;
                        self.log(format_args!("hash mismatch {from} round {round_id}"));
                    }
                }
                true
            }
            _ => false,
        };
        if !accepted {
            self.log(format_args!("ignored message from {from}"));
            if self.opts.capture {
                *self.captures.ignored.entry(from).or_default() += 1;
            }
        }
        Ok(())
    }

    fn coord_join(&mut self, id: PeerId, inc: u64, token: &str) -> Result<(), SimError> {
        if let Some(list) = &self.allowlist {
            if !list.contains(token) {
                self.log(format_args!("reject {id}"));
                return Ok(());
            }
        }
        if let Some(&old) = self.coord.view.get(&id) {
            self.coord_fail(id, old)?;
        }
        if self.coord.finished {
            return Ok(());
        }
        self.coord.view.insert(id, inc);
        let accumulating = self.coord.round.phase() == RoundPhase::Accumulating;
        if accumulating && (self.coord.committed == 0 || self.coord.round.live().is_empty()) {
            self.coord.round.add_live(id);
            self.send_join_ack(id, self.coord.round.round_id)?;
        } else {
            self.log(format_args!("defer {id} to next round"));
            self.coord.pending_joins.insert(id);
        }
        Ok(())
    }

    fn send_join_ack(&mut self, id: PeerId, round: u64) -> Result<(), SimError> {
        let params = encode_params(&ExchangeCodec::Lossless, &self.coord.params)?;
        let names: Vec<String> = self.coord.params.layers().iter().map(|l| l.name.clone()).collect();
        let mut optimizer = Vec::new();
        write_checkpoint(&mut optimizer, self.optimizer.config(), &self.coord.state, &names)?;
        self.peers.get_mut(&id).unwrap().admitted_round = Some(round);
        let msg = Message::JoinAck {
            round_id: round,
            params,
            optimizer,
        };
        self.send(NodeId::Coordinator, NodeId::Peer(id), &msg)
    }

    fn coord_progress(&mut self, id: PeerId, round: u64, samples: u64, secs: f64) -> Result<bool, SimError> {
        let r = &self.coord.round;
        if round != r.round_id || r.phase() != RoundPhase::Accumulating || !r.live().contains(&id) {
            return Ok(false);
        }
        if r.progress().get(&id).is_some_and(|&s| s >= samples) {
            return Ok(false);
        }
        // Counts a multi-microbatch report only up to the first boundary reaching the target.
        let (m, target) = (self.sc.microbatch, self.sc.target_batch);
        let others = r.total_progress() - r.progress().get(&id).copied().unwrap_or(0);
        let capped = if others + samples >= target {
            samples.min((target - others).div_ceil(m) * m)
        } else {
            samples
        };
        let secs = secs * capped as f64 / samples as f64;
        let ready = self.coord.round.report_progress(id, capped)?;
        self.coord.last_progress.insert(id, (capped, secs));
        if ready {
            self.coord_trigger()?;
        }
        Ok(true)
    }

    fn trigger_message(&self, members: &[(PeerId, u64)]) -> Message {
        Message::Trigger {
            round_id: self.coord.round.round_id,
            attempt: self.coord.wire_attempt(),
            members: members
                .iter()
                .map(|&(peer, samples)| Member {
                    peer,
                    samples,
                    bandwidth_score: self.peers[&peer].score,
                })
                .collect(),
        }
    }

    fn broadcast_live(&mut self, msg: &Message) -> Result<(), SimError> {
        let live: Vec<PeerId> = self.coord.round.live().iter().copied().collect();
        for p in live {
            self.send(NodeId::Coordinator, NodeId::Peer(p), msg)?;
        }
        Ok(())
    }

    fn coord_trigger(&mut self) -> Result<(), SimError> {
        let members = self.coord.round.trigger()?;
        let round = self.coord.round.round_id;
        self.log(format_args!(
            "trigger round {round} attempt {} samples {}",
            self.coord.wire_attempt(),
            members.iter().map(|m| m.1).sum::<u64>()
        ));
        let msg = self.trigger_message(&members);
        self.broadcast_live(&msg)?;
        if self.coord.aggregating_fired.insert(round) {
            self.fire_round_churn(round, RoundPoint::Aggregating)?;
        }
        Ok(())
    }

    fn in_current_attempt(&self, round: u64, attempt: u32) -> bool {
        let r = &self.coord.round;
        round == r.round_id && r.phase() == RoundPhase::Aggregating && attempt == self.coord.wire_attempt()
    }

    fn coord_contrib(
        &mut self,
        id: PeerId,
        round: u64,
        attempt: u32,
        samples: u64,
        chunks: Vec<QuantizedChunk>,
    ) -> Result<bool, SimError> {
        if self.sc.topology != Topology::Star || !self.in_current_attempt(round, attempt) {
            return Ok(false);
        }
        if !self.coord.round.members().contains(&(id, samples)) || self.coord.round.has_received(id) {
            return Ok(false);
        }
        if decode_params(&self.template, &chunks).is_err() {
            return Ok(false);
        }
        self.coord.round.mark_received(id)?;
        self.coord.contribs.insert(id, (samples, chunks));
        if self.coord.round.all_received() {
            self.commit_star()?;
        }
        Ok(true)
    }

    fn coord_gather(
        &mut self,
        id: PeerId,
        round: u64,
        attempt: u32,
        units: Range<u32>,
        chunks: Vec<QuantizedChunk>,
    ) -> Result<bool, SimError> {
        if self.sc.topology != Topology::Partitioned || !self.in_current_attempt(round, attempt) {
            return Ok(false);
        }
        if !self.coord.round.members().iter().any(|m| m.0 == id) || self.coord.round.has_received(id) {
            return Ok(false);
        }
        let segs = self.layout.segments(units.start as usize..units.end as usize);
        if segs.len() != chunks.len() {
            return Ok(false);
        }
        self.coord.round.mark_received(id)?;
        self.coord.pieces.insert(id, segs.into_iter().zip(chunks).collect());
        if self.coord.round.all_received() {
            self.commit_partitioned()?;
        }
        Ok(true)
    }

    fn commit_star(&mut self) -> Result<(), SimError> {
        let members = self.coord.round.members();
        let list: Vec<(PeerId, u64, Vec<QuantizedChunk>)> = members
            .iter()
            .map(|(p, s)| (*p, *s, self.coord.contribs[p].1.clone()))
            .collect();
        let policy = self.policy.clamped_for(list.len());
        let chunks = star_encoded(&self.template, &list, &policy, &self.codec)?;
        let grads = decode_params(&self.template, &chunks)?;
        self.commit(&grads)?;
        let msg = Message::Gather {
            round_id: self.coord.round.round_id,
            attempt: self.coord.wire_attempt(),
            units: 0..self.layout.num_units() as u32,
            chunks,
        };
        self.broadcast_live(&msg)?;
        self.open_next_round()
    }

    fn commit_partitioned(&mut self) -> Result<(), SimError> {
        let pieces: Vec<(Segment, QuantizedChunk)> =
            std::mem::take(&mut self.coord.pieces).into_values().flatten().collect();
        let chunks = assemble(&self.layout, &self.codec, pieces)?;
        let grads = decode_params(&self.template, &chunks)?;
        let hash = self.commit(&grads)?;
        let round = self.coord.round.round_id;
        let members: BTreeSet<PeerId> = self.coord.round.members().iter().map(|m| m.0).collect();
        let live: Vec<PeerId> = self.coord.round.live().iter().copied().collect();
        let commit = Message::StepDone {
            round_id: round,
            param_hash: hash,
        };
        let full = Message::Gather {
            round_id: round,
            attempt: self.coord.wire_attempt(),
            units: 0..self.layout.num_units() as u32,
            chunks,
        };
        for p in live {
            let msg = if members.contains(&p) { &commit } else { &full };
            self.send(NodeId::Coordinator, NodeId::Peer(p), msg)?;
        }
        self.open_next_round()
    }

    /// Steps the coordinator's own replica and records the round.
    fn commit(&mut self, grads: &ParamSet) -> Result<u64, SimError> {
        let round = self.coord.round.round_id;
        let lr = self.lr(round)?;
        self.coord.round.begin_step()?;
        self.optimizer
            .step(&mut self.coord.params, grads, &mut self.coord.state, lr)?;
        self.coord.round.finish()?;
        let hash = self.coord.params.hash();
        self.coord.committed = round;
        self.coord.hashes.insert(round, hash);
        let members = self.coord.round.members();
        for &(p, s) in &members {
            let secs = self.coord.last_progress.get(&p).map_or(0.0, |&(_, secs)| secs);
            self.coord.ledger.update(p, s, secs);
        }
        let loss = dataset_loss(self.task.as_ref(), &self.coord.params);
        let live_peers = self
            .peers
            .values()
            .filter(|n| matches!(n.status, Status::Joining | Status::Active))
            .filter(|n| n.admitted_round.is_some_and(|a| a <= round))
            .count() as u64;
        self.metrics.rounds.push(RoundMetrics {
            round,
            loss,
            live_peers,
            bytes_total: self.net.total_sent(),
            sim_seconds: self.now,
        });
        self.log(format_args!(
            "commit round {round} members {} loss {loss:.6} hash {hash:016x}",
            members.len()
        ));
        if self.opts.capture {
            let members = members
                .iter()
                .map(|&(peer, samples)| {
                    let contribution = match self.coord.contribs.get(&peer) {
                        Some((_, chunks)) => Some(decode_params(&self.template, chunks)?.flatten()),
                        None => None,
                    };
                    Ok(MemberCapture {
                        peer,
                        samples,
                        indices: self.contributed.remove(&peer).unwrap_or_default(),
                        contribution,
                    })
                })
                .collect::<Result<Vec<_>, SimError>>()?;
            self.captures.rounds.push(RoundCapture {
                round,
                members,
                aggregate: grads.flatten(),
            });
            self.captures.coordinator_hashes.insert(round, hash);
            self.contributed.clear();
        }
        Ok(hash)
    }

    fn open_next_round(&mut self) -> Result<(), SimError> {
        let round = self.coord.round.round_id;
        if round >= self.sc.rounds {
            self.coord.finished = true;
            self.log(format_args!("finished after round {round}"));
            return Ok(());
        }
        let next = round + 1;
        let joins: Vec<PeerId> = std::mem::take(&mut self.coord.pending_joins).into_iter().collect();
        let mut live: BTreeSet<PeerId> = self.coord.round.live().clone();
        for &p in &joins {
            self.send_join_ack(p, next)?;
            live.insert(p);
        }
        self.coord.round = RoundState::new(next, self.sc.target_batch, self.sc.microbatch, live);
        self.coord.attempt_offset = 0;
        self.coord.contribs.clear();
        self.coord.pieces.clear();
        self.fire_round_churn(next, RoundPoint::Start)
    }

    /// Membership loss of one incarnation of a peer, by detection or LEAVE.
    fn coord_fail(&mut self, id: PeerId, inc: u64) -> Result<(), SimError> {
        if self.coord.view.get(&id) != Some(&inc) {
            return Ok(());
        }
        self.coord.view.remove(&id);
        self.coord.pending_joins.remove(&id);
        self.coord.last_progress.remove(&id);
        if !self.coord.round.live().contains(&id) || self.coord.finished {
            return Ok(());
        }
        let r = &self.coord.round;
        let was_pending =
            r.phase() == RoundPhase::Aggregating && r.members().iter().any(|m| m.0 == id) && !r.has_received(id);
        let phase = self.coord.round.handle_peer_failure(id);
        self.log(format_args!("remove {id} phase {phase:?}"));
        match phase {
            RoundPhase::Aborted => self.restart_round(),
            RoundPhase::Aggregating => match self.sc.topology {
                Topology::Star => {
                    self.coord.contribs.remove(&id);
                    if self.coord.round.all_received() {
                        self.commit_star()?;
                    }
                    Ok(())
                }
                Topology::Partitioned if was_pending => {
                    self.coord.round.restart_attempt();
                    self.coord.pieces.clear();
                    let members = self.coord.round.members();
                    let msg = self.trigger_message(&members);
                    self.log(format_args!("retrigger attempt {}", self.coord.wire_attempt()));
                    self.broadcast_live(&msg)
                }
                Topology::Partitioned => Ok(()),
            },
            _ => Ok(()),
        }
    }

    /// No contribution can arrive any more: accumulate the round again with
    /// whoever is still live.
    fn restart_round(&mut self) -> Result<(), SimError> {
        let old = &self.coord.round;
        let offset = self.coord.attempt_offset + old.attempt() + 1;
        let round = old.round_id;
        let live = old.live().clone();
        self.coord.round = RoundState::new(round, self.sc.target_batch, self.sc.microbatch, live);
        self.coord.attempt_offset = offset;
        self.coord.contribs.clear();
        self.coord.pieces.clear();
        self.log(format_args!("restart round {round}"));
        let msg = Message::Trigger {
            round_id: round,
            attempt: offset,
            members: Vec::new(),
        };
        self.broadcast_live(&msg)
    }
}
