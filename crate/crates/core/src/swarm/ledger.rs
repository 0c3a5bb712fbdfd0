//! Per-peer contribution accounting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::PeerId;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub samples: u64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    entries: BTreeMap<PeerId, LedgerEntry>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Credits a committed contribution. Both totals only grow.
    pub fn update(&mut self, peer: PeerId, samples: u64, seconds: f64) {
        let e = self.entries.entry(peer).or_default();
        e.samples += samples;
        if seconds > 0.0 && seconds.is_finite() {
            e.wall_seconds += seconds;
        }
    }

    pub fn get(&self, peer: PeerId) -> Option<&LedgerEntry> {
        self.entries.get(&peer)
    }

    pub fn entries(&self) -> &BTreeMap<PeerId, LedgerEntry> {
        &self.entries
    }

    pub fn total_samples(&self) -> u64 {
        self.entries.values().map(|e| e.samples).sum()
    }

    /// Top `n` peers by contributed seconds, ties broken by lower peer id.
    pub fn leaderboard(&self, n: usize) -> Vec<(PeerId, LedgerEntry)> {
        let mut v: Vec<_> = self.entries.iter().map(|(&p, &e)| (p, e)).collect();
        v.sort_by(|a, b| b.1.wall_seconds.total_cmp(&a.1.wall_seconds).then(a.0.cmp(&b.0)));
        v.truncate(n);
        v
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}
