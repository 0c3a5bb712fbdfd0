//! Coordinator-side state of one training round.

use std::collections::{BTreeMap, BTreeSet};

use super::{PeerId, SwarmError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundPhase {
    Accumulating,
    Aggregating,
    Stepping,
    Done,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ContribStatus {
    Pending,
    Received,
}

/// True once reported progress reaches the target batch.
pub fn should_trigger(progress: &BTreeMap<PeerId, u64>, target_batch: u64) -> bool {
    progress.values().sum::<u64>() >= target_batch
}

#[derive(Debug, Clone)]
pub struct RoundState {
    pub round_id: u64,
    pub target_batch: u64,
    pub max_microbatch: u64,
    phase: RoundPhase,
    attempt: u32,
    live: BTreeSet<PeerId>,
    progress: BTreeMap<PeerId, u64>,
    expected: BTreeMap<PeerId, (u64, ContribStatus)>,
}

impl RoundState {
    pub fn new(round_id: u64, target_batch: u64, max_microbatch: u64, live: impl IntoIterator<Item = PeerId>) -> Self {
        Self {
            round_id,
            target_batch,
            max_microbatch,
            phase: RoundPhase::Accumulating,
            attempt: 0,
            live: live.into_iter().collect(),
            progress: BTreeMap::new(),
            expected: BTreeMap::new(),
        }
    }

    pub fn phase(&self) -> RoundPhase {
        self.phase
    }

    pub fn attempt(&self) -> u32 {
        self.attempt
    }

    pub fn live(&self) -> &BTreeSet<PeerId> {
        &self.live
    }

    pub fn progress(&self) -> &BTreeMap<PeerId, u64> {
        &self.progress
    }

    pub fn total_progress(&self) -> u64 {
        self.progress.values().sum()
    }

    /// A peer that joined during this round; it contributes from the next one.
    pub fn add_live(&mut self, peer: PeerId) {
        self.live.insert(peer);
    }

    /// Records a peer's cumulative sample count. Returns whether the round is
    /// now ready to trigger.
    pub fn report_progress(&mut self, peer: PeerId, samples: u64) -> Result<bool, SwarmError> {
        if self.phase != RoundPhase::Accumulating {
            return Err(SwarmError::Protocol(format!(
                "progress from {peer} in phase {:?}",
                self.phase
            )));
        }
        if !self.live.contains(&peer) {
            return Err(SwarmError::Protocol(format!("progress from non-member {peer}")));
        }
        self.progress.insert(peer, samples);
        Ok(self.ready())
    }

    pub fn ready(&self) -> bool {
        self.phase == RoundPhase::Accumulating && should_trigger(&self.progress, self.target_batch)
    }

    /// Freezes membership and moves to aggregation. Returns the contributors
    /// with their sample counts in peer id order.
    pub fn trigger(&mut self) -> Result<Vec<(PeerId, u64)>, SwarmError> {
        if !self.ready() {
            return Err(SwarmError::Protocol(format!(
                "trigger with {} of {} samples",
                self.total_progress(),
                self.target_batch
            )));
        }
        self.expected = self
            .progress
            .iter()
            .filter(|(p, &s)| s > 0 && self.live.contains(p))
            .map(|(&p, &s)| (p, (s, ContribStatus::Pending)))
            .collect();
        self.phase = RoundPhase::Aggregating;
        self.attempt = 1;
        Ok(self.members())
    }

    /// Contributors still counted in this round.
    pub fn members(&self) -> Vec<(PeerId, u64)> {
        self.expected.iter().map(|(&p, &(s, _))| (p, s)).collect()
    }

    pub fn mark_received(&mut self, peer: PeerId) -> Result<(), SwarmError> {
        if self.phase != RoundPhase::Aggregating {
            return Err(SwarmError::Protocol(format!(
                "contribution from {peer} in phase {:?}",
                self.phase
            )));
        }
        match self.expected.get_mut(&peer) {
            Some(e) => {
                e.1 = ContribStatus::Received;
                Ok(())
            }
            None => Err(SwarmError::Protocol(format!("unexpected contribution from {peer}"))),
        }
    }

    pub fn all_received(&self) -> bool {
        self.phase == RoundPhase::Aggregating && self.expected.values().all(|e| e.1 == ContribStatus::Received)
    }

    pub fn has_received(&self, peer: PeerId) -> bool {
        matches!(self.expected.get(&peer), Some((_, ContribStatus::Received)))
    }

    /// Starts a fresh aggregation attempt over the remaining members, all of
    /// which must contribute again.
    pub fn restart_attempt(&mut self) {
        for e in self.expected.values_mut() {
            e.1 = ContribStatus::Pending;
        }
        self.attempt += 1;
    }

    /// Removes a crashed or departed peer.
    ///
    /// While accumulating its progress is forgotten. While aggregating, a
    /// contribution that already arrived is kept and a pending one is
    /// dropped; the round aborts if no contribution can arrive any more.
    pub fn handle_peer_failure(&mut self, peer: PeerId) -> RoundPhase {
        self.live.remove(&peer);
        match self.phase {
            RoundPhase::Accumulating => {
                self.progress.remove(&peer);
            }
            RoundPhase::Aggregating => {
                if let Some((_, ContribStatus::Pending)) = self.expected.get(&peer) {
                    self.expected.remove(&peer);
                }
                if self.expected.is_empty() {
                    self.phase = RoundPhase::Aborted;
                }
            }
            _ => {}
        }
        self.phase
    }

    pub fn begin_step(&mut self) -> Result<(), SwarmError> {
        if !self.all_received() || self.expected.is_empty() {
            return Err(SwarmError::Protocol("step before all contributions arrived".into()));
        }
        self.phase = RoundPhase::Stepping;
        Ok(())
    }

    pub fn finish(&mut self) -> Result<(), SwarmError> {
        if self.phase != RoundPhase::Stepping {
            return Err(SwarmError::Protocol(format!("finish in phase {:?}", self.phase)));
        }
        self.phase = RoundPhase::Done;
        Ok(())
    }

    pub fn abort(&mut self) {
        self.phase = RoundPhase::Aborted;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn peers(n: u32) -> Vec<PeerId> {
        (0..n).map(PeerId).collect()
    }

    #[test]
    fn normal_round() {
        let mut r = RoundState::new(0, 10, 4, peers(3));
        assert!(!r.report_progress(PeerId(0), 4).unwrap());
        assert!(!r.report_progress(PeerId(1), 4).unwrap());
        assert!(r.report_progress(PeerId(2), 3).unwrap());
        let m = r.trigger().unwrap();
        assert_eq!(m, vec![(PeerId(0), 4), (PeerId(1), 4), (PeerId(2), 3)]);
        assert!(r.total_progress() >= r.target_batch);
        for p in peers(3) {
            assert!(!r.all_received());
            r.mark_received(p).unwrap();
        }
        r.begin_step().unwrap();
        r.finish().unwrap();
        assert_eq!(r.phase(), RoundPhase::Done);
    }

    #[test]
    fn trigger_requires_target() {
        let mut r = RoundState::new(0, 10, 4, peers(2));
        r.report_progress(PeerId(0), 4).unwrap();
        assert!(r.trigger().is_err());
        assert!(r.report_progress(PeerId(7), 4).is_err());
    }

    #[test]
    fn failure_while_accumulating_forgets_progress() {
        let mut r = RoundState::new(0, 8, 4, peers(3));
        r.report_progress(PeerId(0), 4).unwrap();
        r.report_progress(PeerId(1), 3).unwrap();
        assert_eq!(r.handle_peer_failure(PeerId(0)), RoundPhase::Accumulating);
        assert_eq!(r.total_progress(), 3);
        assert!(!r.ready());
    }

    #[test]
    fn failure_while_aggregating() {
        let mut r = RoundState::new(0, 8, 4, peers(3));
        for p in peers(3) {
            r.report_progress(p, 4).unwrap();
        }
        r.trigger().unwrap();
        r.mark_received(PeerId(1)).unwrap();
        // received contribution survives
        assert_eq!(r.handle_peer_failure(PeerId(1)), RoundPhase::Aggregating);
        assert!(r.has_received(PeerId(1)));
        // pending contribution is dropped
        r.handle_peer_failure(PeerId(2));
        assert_eq!(r.members(), vec![(PeerId(0), 4), (PeerId(1), 4)]);
        r.mark_received(PeerId(0)).unwrap();
        assert!(r.all_received());
    }

    #[test]
    fn aborts_when_nobody_left() {
        let mut r = RoundState::new(0, 4, 4, peers(1));
        r.report_progress(PeerId(0), 4).unwrap();
        r.trigger().unwrap();
        assert_eq!(r.handle_peer_failure(PeerId(0)), RoundPhase::Aborted);
    }
}
