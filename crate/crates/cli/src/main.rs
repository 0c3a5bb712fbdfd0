use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cotrain_cli::demo::DemoArgs;
use cotrain_cli::ledger::LedgerArgs;
use cotrain_cli::memcalc::MemcalcArgs;
use cotrain_cli::shard::ShardCommand;
use cotrain_cli::simulate::SimulateArgs;
use cotrain_cli::{demo, finish, ledger, memcalc, shard, simulate, EXIT_CONFIG};

/// Collaborative training toolkit.
#[derive(Debug, Parser)]
#[command(name = "cotrain", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a swarm scenario through the network simulator.
    Simulate(SimulateArgs),
    /// Train with in-process peers next to a single-node baseline.
    TrainDemo(DemoArgs),
    /// Estimate training memory for a model preset.
    Memcalc(MemcalcArgs),
    /// Pack, unpack or inspect record shards.
    #[command(subcommand)]
    Shard(ShardCommand),
    /// Print the contribution leaderboard of a ledger file.
    Ledger(LedgerArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    finish(match &cli.command {
        Command::Simulate(a) => simulate::run(a),
        Command::TrainDemo(a) => demo::run(a),
        Command::Memcalc(a) => memcalc::run(a),
        Command::Shard(c) => shard::run(c),
        Command::Ledger(a) => ledger::run(a),
    })
}
