//! Swarm training against a single-node baseline, in lockstep rounds.

use cotrain_core::codec::ExchangeCodec;
use cotrain_core::optim::{OptimConfig, Optimizer};
use cotrain_core::swarm::{
    run_round, AggregationPolicy, Contribution, LocalPeer, Loopback, PeerId, SampleStream, SwarmConfig, Topology,
};
use cotrain_core::tasks::{accumulate_local, dataset_loss, to_f64, Task, TaskSpec};
use cotrain_core::tensor::ParamSet;

use crate::engine::SimError;

#[derive(Debug, Clone, PartialEq)]
pub struct DemoConfig {
    pub task: TaskSpec,
    pub peers: u32,
    pub rounds: u64,
    /// Samples each peer accumulates per round.
    pub samples_per_peer: usize,
    pub codec: ExchangeCodec,
    pub topology: Topology,
    pub optimizer: OptimConfig,
    pub lr: f32,
    pub seed: u64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::default(),
            peers: 4,
            rounds: 50,
            samples_per_peer: 32,
            codec: ExchangeCodec::Lossless,
            topology: Topology::Star,
            optimizer: OptimConfig::lamb(),
            lr: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoReport {
    /// Largest elementwise parameter difference seen after any round.
    pub max_divergence: f64,
    pub swarm_loss: f64,
    pub baseline_loss: f64,
    pub bytes_total: u64,
}

/// The baseline gradient over the union of the peers' batches: per-batch
/// means in f64, combined by sample count in peer order.
fn union_gradient(task: &dyn Task, params: &ParamSet, batches: &[Vec<usize>]) -> ParamSet {
    let p = to_f64(params);
    let means: Vec<(f64, Vec<Vec<f32>>)> = batches
        .iter()
        .map(|b| {
            let mut sums: Vec<Vec<f64>> = p.iter().map(|l| vec![0.0; l.len()]).collect();
            for &i in b {
                let (_, g) = task.loss_and_grad(&p, i);
                for (s, g) in sums.iter_mut().zip(g) {
                    for (a, x) in s.iter_mut().zip(g) {
                        *a += x;
                    }
                }
            }
            let n = b.len() as f64;
            (
                n,
                sums.iter()
                    .map(|s| s.iter().map(|x| (x / n) as f32).collect())
                    .collect(),
            )
        })
        .collect();
    let total: f64 = means.iter().map(|m| m.0).sum();
    let mut out = params.clone();
    for (li, layer) in out.layers_mut().iter_mut().enumerate() {
        for (j, x) in layer.tensor.data_mut().iter_mut().enumerate() {
            let num: f64 = means.iter().map(|(n, m)| n * m[li][j] as f64).sum();
            *x = (num / total) as f32;
        }
    }
    out
}

pub fn train_demo(cfg: &DemoConfig) -> Result<DemoReport, SimError> {
    if cfg.peers == 0 || cfg.samples_per_peer == 0 {
        return Err(SimError::Internal("demo needs at least one peer and one sample".into()));
    }
    let task = cfg.task.build()?;
    let optimizer = Optimizer::new(cfg.optimizer)?;
    let init = task.init_params();
    let mut peers: Vec<LocalPeer> = (0..cfg.peers)
        .map(|i| {
            Ok(LocalPeer {
                id: PeerId(i),
                params: init.clone(),
                state: optimizer.init_state(&init)?,
                bandwidth_score: 1.0,
            })
        })
        .collect::<Result<_, SimError>>()?;
    let mut streams: Vec<SampleStream> = (0..cfg.peers)
        .map(|i| SampleStream::new(task.num_samples(), cfg.seed, PeerId(i)))
        .collect();
    let mut baseline = init.clone();
    let mut baseline_state = optimizer.init_state(&init)?;
    let swarm = SwarmConfig {
        codec: cfg.codec,
        policy: AggregationPolicy::weighted_mean(),
        topology: cfg.topology,
    };
    let mut transport = Loopback::default();
    let mut max_divergence = 0.0f64;
    for round in 1..=cfg.rounds {
        let batches: Vec<Vec<usize>> = streams.iter_mut().map(|s| s.take(cfg.samples_per_peer)).collect();
        let contributions = peers
            .iter()
            .zip(&batches)
            .map(|(p, b)| {
                let acc = accumulate_local(task.as_ref(), &p.params, b)?;
                Ok(Contribution {
                    peer: p.id,
                    samples: acc.count(),
                    grad: acc.mean(&p.params),
                })
            })
            .collect::<Result<Vec<_>, SimError>>()?;
        run_round(
            round,
            &mut peers,
            &contributions,
            &swarm,
            &optimizer,
            cfg.lr,
            &mut transport,
        )?;
        let g = union_gradient(task.as_ref(), &baseline, &batches);
        optimizer.step(&mut baseline, &g, &mut baseline_state, cfg.lr)?;
        max_divergence = max_divergence.max(peers[0].params.max_abs_diff(&baseline));
    }
    Ok(DemoReport {
        max_divergence,
        swarm_loss: dataset_loss(task.as_ref(), &peers[0].params),
        baseline_loss: dataset_loss(task.as_ref(), &baseline),
        bytes_total: transport.total_bytes(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use cotrain_core::codec::CodecPolicy;

    fn cfg(peers: u32, codec: ExchangeCodec) -> DemoConfig {
        DemoConfig {
            task: TaskSpec {
                name: "logreg".into(),
                seed: 1,
                samples: 512,
                dim: 20,
            },
            peers,
            rounds: 20,
            codec,
            ..DemoConfig::default()
        }
    }

    #[test]
    fn lossless_matches_baseline() {
        for topology in [Topology::Star, Topology::Partitioned] {
            let r = train_demo(&DemoConfig {
                topology,
                ..cfg(4, ExchangeCodec::Lossless)
            })
            .unwrap();
            assert_eq!(r.max_divergence, 0.0);
            assert_eq!(r.swarm_loss, r.baseline_loss);
        }
    }

    #[test]
    fn single_peer_is_local_training() {
        let r = train_demo(&cfg(1, ExchangeCodec::Lossless)).unwrap();
        assert_eq!(r.max_divergence, 0.0);
    }

    #[test]
    fn compressed_diverges_slightly() {
        let r = train_demo(&cfg(4, ExchangeCodec::Compressed(CodecPolicy::default()))).unwrap();
        assert!(r.max_divergence > 0.0);
        assert!(r.max_divergence < 1e-2, "{}", r.max_divergence);
        assert!((r.swarm_loss - r.baseline_loss).abs() < 1e-2 * r.baseline_loss);
    }
}
