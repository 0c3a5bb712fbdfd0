use clap::{Args, ValueEnum};
use cotrain_core::codec::{CodecPolicy, ExchangeCodec};
use cotrain_core::optim::OptimConfig;
use cotrain_core::swarm::Topology;
use cotrain_core::tasks::TaskSpec;
use cotrain_sim::{train_demo, DemoConfig};

use crate::{CmdResult, Failure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CodecArg {
    Lossless,
    Compressed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TopologyArg {
    Star,
    Partitioned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Lamb,
    Adam,
}

#[derive(Debug, Clone, Args)]
pub struct DemoArgs {
    /// quadratic, logreg or mlp.
    #[arg(long, default_value = "logreg")]
    pub task: String,
    #[arg(long, default_value_t = 4)]
    pub peers: u32,
    #[arg(long, default_value_t = 50)]
    pub rounds: u64,
    #[arg(long, default_value_t = 32)]
    pub samples_per_peer: usize,
    #[arg(long, value_enum, default_value_t = CodecArg::Lossless)]
    pub codec: CodecArg,
    /// Element count at which compressed exchange switches from f16 to 8-bit.
    #[arg(long)]
    pub q8_threshold: Option<usize>,
    #[arg(long, value_enum, default_value_t = TopologyArg::Star)]
    pub topology: TopologyArg,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Lamb)]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dataset size of the task.
    #[arg(long, default_value_t = 4096)]
    pub samples: usize,
    /// Input dimension of the task.
    #[arg(long, default_value_t = 20)]
    pub dim: usize,
}

impl DemoArgs {
    pub fn config(&self) -> DemoConfig {
        let mut policy = CodecPolicy::default();
        if let Some(t) = self.q8_threshold {
            policy.q8_threshold = t;
        }
        DemoConfig {
            task: TaskSpec {
                name: self.task.clone(),
                seed: self.seed,
                samples: self.samples,
                dim: self.dim,
            },
            peers: self.peers,
            rounds: self.rounds,
            samples_per_peer: self.samples_per_peer,
            codec: match self.codec {
                CodecArg::Lossless => ExchangeCodec::Lossless,
                CodecArg::Compressed => ExchangeCodec::Compressed(policy),
            },
            topology: match self.topology {
                TopologyArg::Star => Topology::Star,
                TopologyArg::Partitioned => Topology::Partitioned,
            },
            optimizer: match self.optimizer {
                OptimizerArg::Lamb => OptimConfig::lamb(),
                OptimizerArg::Adam => OptimConfig::adam(),
            },
            lr: self.lr,
            seed: self.seed,
        }
    }
}

pub fn run(args: &DemoArgs) -> CmdResult {
    let report = train_demo(&args.config()).map_err(Failure::config)?;
    println!("max_divergence {:e}", report.max_divergence);
    println!("swarm_loss     {:.9}", report.swarm_loss);
    println!("baseline_loss  {:.9}", report.baseline_loss);
    println!("bytes_total    {}", report.bytes_total);
    Ok(())
}
