use std::fs;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use cotrain_core::swarm::Ledger;

use crate::{CmdResult, Failure};

#[derive(Debug, Clone, Args)]
pub struct LedgerArgs {
    /// Ledger state file (JSON, as written by `simulate`).
    pub file: PathBuf,
    /// Number of leaderboard rows.
    #[arg(long, default_value_t = 10)]
    pub top: usize,
}

pub fn render(ledger: &Ledger, top: usize) -> String {
    let mut out = format!("{:<5}{:<10}{:>12}{:>16}\n", "rank", "peer", "samples", "seconds");
    for (i, (peer, e)) in ledger.leaderboard(top).iter().enumerate() {
        out += &format!(
            "{:<5}{:<10}{:>12}{:>16.3}\n",
            i + 1,
            peer.to_string(),
            e.samples,
            e.wall_seconds
        );
    }
    out += &format!("total samples {}\n", ledger.total_samples());
    out
}

pub fn run(args: &LedgerArgs) -> CmdResult {
    let text = fs::read_to_string(&args.file).with_context(|| format!("reading {}", args.file.display()))?;
    let ledger = Ledger::from_json(&text).map_err(Failure::config)?;
    print!("{}", render(&ledger, args.top));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use cotrain_core::swarm::PeerId;

    #[test]
    fn rows_follow_leaderboard_order() {
        let mut l = Ledger::new();
        l.update(PeerId(2), 10, 5.0);
        l.update(PeerId(1), 30, 5.0);
        l.update(PeerId(0), 5, 1.0);
        let text = render(&l, 2);
        let rows: Vec<&str> = text.lines().skip(1).take(2).collect();
        assert!(rows[0].contains("peer-1") && rows[1].contains("peer-2"));
        assert!(text.ends_with("total samples 45\n"));
    }
}
