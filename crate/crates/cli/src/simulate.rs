use std::fs;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use cotrain_sim::{simulate, Outcome, Scenario, SimError, SimOptions};

use crate::{CmdResult, Failure};

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Scenario file (TOML).
    pub scenario: PathBuf,
    /// Output directory for metrics.csv, bytes.csv, trace.txt and ledger.json.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Skip writing the event trace.
    #[arg(long)]
    pub no_trace: bool,
}

pub fn run(args: &SimulateArgs) -> CmdResult {
    let scenario = Scenario::load(&args.scenario).map_err(Failure::config)?;
    let opts = SimOptions {
        trace: !args.no_trace,
        ..SimOptions::default()
    };
    let result = simulate(&scenario, &opts).map_err(|e| match e {
        SimError::Scenario(_) | SimError::Net(_) | SimError::Task(_) => Failure::config(e),
        e => e.into(),
    })?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let write = |name: &str, body: &str| -> anyhow::Result<()> {
        let path = args.out.join(name);
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))
    };
    if !args.no_trace {
        write("trace.txt", &result.trace)?;
    }
    write("bytes.csv", &result.metrics.bytes_csv())?;
    write("ledger.json", &result.ledger.to_json()?)?;
    match result.outcome {
        Outcome::Completed => {
            write("metrics.csv", &result.metrics.to_csv())?;
            let last = result.metrics.rounds.last();
            println!(
                "completed {} rounds, final loss {:.6}, {:.3} simulated seconds",
                result.metrics.rounds.len(),
                last.map_or(f64::NAN, |m| m.loss),
                last.map_or(0.0, |m| m.sim_seconds)
            );
            Ok(())
        }
        Outcome::Aborted { round, reason } => {
            let stale = args.out.join("metrics.csv");
            if stale.exists() {
                fs::remove_file(&stale)?;
            }
            Err(Failure::aborted(anyhow::anyhow!("aborted in round {round}: {reason}")))
        }
    }
}
