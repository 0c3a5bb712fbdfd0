use cotrain_core::optim::{OptimConfig, Optimizer};
use cotrain_core::swarm::{run_round, Contribution, LocalPeer, Loopback, PeerId, SampleStream, SwarmConfig, Topology};
use cotrain_core::tasks::{accumulate_local, LogReg, Task};
use cotrain_core::tensor::ParamSet;

/// Single node: per-sample gradients summed in f64 over each chunk of the
/// batch, chunk means combined by sample count in f64.
fn baseline_gradient(task: &dyn Task, params: &ParamSet, chunks: &[Vec<usize>]) -> ParamSet {
    let p: Vec<Vec<f64>> = params
        .layers()
        .iter()
        .map(|l| l.tensor.data().iter().map(|&x| x as f64).collect())
        .collect();
    let means: Vec<(f64, Vec<Vec<f32>>)> = chunks
        .iter()
        .map(|c| {
            let mut sums: Vec<Vec<f64>> = p.iter().map(|l| vec![0.0; l.len()]).collect();
            for &i in c {
                let (_, g) = task.loss_and_grad(&p, i);
                for (s, g) in sums.iter_mut().zip(g) {
                    for (a, b) in s.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            let n = c.len() as f64;
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
            let mut num = 0.0f64;
            for (n, m) in &means {
                num += n * m[li][j] as f64;
            }
            *x = (num / total) as f32;
        }
    }
    out
}

#[test]
fn four_peers_match_single_node() {
    let task = LogReg::new(512, 20, 7);
    let opt = Optimizer::new(OptimConfig::lamb()).unwrap();
    let init = task.init_params();
    for topology in [Topology::Star, Topology::Partitioned] {
        let mut peers: Vec<LocalPeer> = (0..4)
            .map(|i| LocalPeer {
                id: PeerId(i),
                params: init.clone(),
                state: opt.init_state(&init).unwrap(),
                bandwidth_score: 1.0,
            })
            .collect();
        let mut streams: Vec<SampleStream> = (0..4).map(|i| SampleStream::new(512, 1, PeerId(i))).collect();
        let mut single = init.clone();
        let mut single_state = opt.init_state(&init).unwrap();
        let cfg = SwarmConfig {
            topology,
            ..SwarmConfig::default()
        };
        for round in 0..20 {
            let chunks: Vec<Vec<usize>> = streams.iter_mut().map(|s| s.take(16)).collect();
            let contribs: Vec<Contribution> = chunks
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let acc = accumulate_local(&task, &peers[i].params, c).unwrap();
                    Contribution {
                        peer: PeerId(i as u32),
                        samples: acc.count(),
                        grad: acc.mean(&peers[i].params),
                    }
                })
                .collect();
            let out = run_round(round, &mut peers, &contribs, &cfg, &opt, 1e-2, &mut Loopback::default()).unwrap();
            let g = baseline_gradient(&task, &single, &chunks);
            opt.step(&mut single, &g, &mut single_state, 1e-2).unwrap();
            assert_eq!(out.param_hash, single.hash(), "round {round}");
            assert_eq!(peers[3].params, single);
        }
    }
}
