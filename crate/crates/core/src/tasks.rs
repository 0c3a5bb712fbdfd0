//! Closed-form training tasks with analytic per-sample gradients.
//!
//! Math runs in f64 on a per-layer copy of the parameters; gradients are
//! handed to the protocol as f32 [`ParamSet`]s. Accumulation is per sample so a
//! sample-weighted average of per-peer means is exactly a batch gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::{self, Execution};
use crate::tensor::{ParamSet, TensorBuf};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("microbatch is empty")]
    EmptyMicrobatch,
    #[error("sample index {index} out of range for {len} samples")]
    SampleOutOfRange { index: usize, len: usize },
    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("invalid task config: {0}")]
    InvalidConfig(String),
}

/// Per-layer f64 parameter values.
pub type Params64 = Vec<Vec<f64>>;

pub trait Task: Send + Sync {
    fn name(&self) -> &str;
    fn num_samples(&self) -> usize;
    /// Deterministic starting point.
    fn init_params(&self) -> ParamSet;
    fn loss(&self, params: &Params64, sample: usize) -> f64;
    /// Loss and per-layer gradient of one sample.
    fn loss_and_grad(&self, params: &Params64, sample: usize) -> (f64, Params64);
    fn optimum(&self) -> Option<ParamSet> {
        None
    }
}

pub fn to_f64(params: &ParamSet) -> Params64 {
    params
        .layers()
        .iter()
        .map(|l| l.tensor.data().iter().map(|&x| x as f64).collect())
        .collect()
}

/// Writes f64 layer values into a parameter set with the same layout.
pub fn from_f64(template: &ParamSet, values: &Params64) -> ParamSet {
    let mut out = template.clone();
    for (l, v) in out.layers_mut().iter_mut().zip(values) {
        for (d, &x) in l.tensor.data_mut().iter_mut().zip(v) {
            *d = x as f32;
        }
    }
    out
}

/// Mean loss over the whole dataset; thread-count independent.
pub fn dataset_loss(task: &dyn Task, params: &ParamSet) -> f64 {
    let p = to_f64(params);
    let n = task.num_samples();
    par::chunked_sum(Execution::default(), n, |r| r.map(|i| task.loss(&p, i)).sum()) / n as f64
}

/// Running sum of per-sample gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradAccumulator {
    sums: Params64,
    count: u64,
}

impl GradAccumulator {
    pub fn new(template: &ParamSet) -> Self {
        Self {
            sums: template.layers().iter().map(|l| vec![0.0; l.tensor.len()]).collect(),
            count: 0,
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn sums(&self) -> &Params64 {
        &self.sums
    }

    pub fn add(&mut self, grad: &Params64) {
        for (s, g) in self.sums.iter_mut().zip(grad) {
            for (a, b) in s.iter_mut().zip(g) {
                *a += b;
            }
        }
        self.count += 1;
    }

    /// Adds another accumulator's sums and count.
    pub fn merge(&mut self, other: &GradAccumulator) {
        for (s, g) in self.sums.iter_mut().zip(&other.sums) {
            for (a, b) in s.iter_mut().zip(g) {
                *a += b;
            }
        }
        self.count += other.count;
    }

    /// Sum divided by count, as f32; zeros when empty.
    pub fn mean(&self, template: &ParamSet) -> ParamSet {
        let n = self.count.max(1) as f64;
        let means: Params64 = self.sums.iter().map(|s| s.iter().map(|x| x / n).collect()).collect();
        from_f64(template, &means)
    }
}

/// Gradient sum and sample count over one microbatch, in sample order.
pub fn accumulate_local(
    task: &dyn Task,
    params: &ParamSet,
    microbatch: &[usize],
) -> Result<GradAccumulator, TaskError> {
    if microbatch.is_empty() {
        return Err(TaskError::EmptyMicrobatch);
    }
    let p = to_f64(params);
    let mut acc = GradAccumulator::new(params);
    accumulate_into(task, &p, microbatch, &mut acc)?;
    Ok(acc)
}

/// Like [`accumulate_local`] but reuses converted parameters and an existing
/// accumulator.
pub fn accumulate_into(
    task: &dyn Task,
    params: &Params64,
    samples: &[usize],
    acc: &mut GradAccumulator,
) -> Result<(), TaskError> {
    let n = task.num_samples();
    for &i in samples {
        if i >= n {
            return Err(TaskError::SampleOutOfRange { index: i, len: n });
        }
        let (_, g) = task.loss_and_grad(params, i);
        if let Some(layer) = g.iter().position(|l| l.iter().any(|x| !x.is_finite())) {
            return Err(TaskError::NonFiniteGradient { layer });
        }
        acc.add(&g);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub name: String,
    pub seed: u64,
    pub samples: usize,
    pub dim: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            name: "logreg".into(),
            seed: 0,
            samples: 4096,
            dim: 20,
        }
    }
}

impl TaskSpec {
    pub fn build(&self) -> Result<Box<dyn Task>, TaskError> {
        if self.samples == 0 || self.dim == 0 {
            return Err(TaskError::InvalidConfig("samples and dim must be >= 1".into()));
        }
        match self.name.as_str() {
            "quadratic" => Ok(Box::new(Quadratic::with_samples(self.dim, self.seed, self.samples))),
            "logreg" => Ok(Box::new(LogReg::new(self.samples, self.dim, self.seed))),
            "mlp" => Ok(Box::new(TinyMlp::with_samples(self.seed, self.samples))),
            other => Err(TaskError::UnknownTask(other.into())),
        }
    }
}

/// `½‖w − w*‖²`, the same for every sample.
#[derive(Debug, Clone)]
pub struct Quadratic {
    target: Vec<f64>,
    samples: usize,
}

impl Quadratic {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self::with_samples(dim, seed, 1)
    }

    pub fn with_samples(dim: usize, seed: u64, samples: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = (0..dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .map(|x: f64| x as f32 as f64)
            .collect();
        Self {
            target,
            samples: samples.max(1),
        }
    }

    pub fn from_target(target: Vec<f64>) -> Self {
        Self { target, samples: 1 }
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }
}

impl Task for Quadratic {
    fn name(&self) -> &str {
        "quadratic"
    }
    fn num_samples(&self) -> usize {
        self.samples
    }
    fn init_params(&self) -> ParamSet {
        let mut p = ParamSet::default();
        p.push("w", TensorBuf::zeros(&[self.target.len()]));
        p
    }
    fn loss(&self, params: &Params64, _sample: usize) -> f64 {
        0.5 * params[0]
            .iter()
            .zip(&self.target)
            .map(|(w, t)| (w - t) * (w - t))
            .sum::<f64>()
    }
    fn loss_and_grad(&self, params: &Params64, sample: usize) -> (f64, Params64) {
        let g = params[0].iter().zip(&self.target).map(|(w, t)| w - t).collect();
        (self.loss(params, sample), vec![g])
    }
    fn optimum(&self) -> Option<ParamSet> {
        let mut p = ParamSet::default();
        p.push(
            "w",
            TensorBuf::from_vec(self.target.iter().map(|&x| x as f32).collect()),
        );
        Some(p)
    }
}

/// Binary logistic regression on linearly separable Gaussian data.
#[derive(Debug, Clone)]
pub struct LogReg {
    xs: Vec<Vec<f64>>,
    ys: Vec<f64>,
}

impl LogReg {
    pub fn new(n_samples: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_true: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut xs = Vec::with_capacity(n_samples);
        let mut ys = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let x: Vec<f64> = (0..dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .map(|v: f64| v as f32 as f64)
                .collect();
            let z: f64 = x.iter().zip(&w_true).map(|(a, b)| a * b).sum();
            ys.push(if z >= 0.0 { 1.0 } else { -1.0 });
            xs.push(x);
        }
        Self { xs, ys }
    }

    pub fn sample(&self, i: usize) -> (&[f64], f64) {
        (&self.xs[i], self.ys[i])
    }

    fn margin(&self, params: &Params64, i: usize) -> f64 {
        let z: f64 = params[0].iter().zip(&self.xs[i]).map(|(w, x)| w * x).sum::<f64>() + params[1][0];
        self.ys[i] * z
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Task for LogReg {
    fn name(&self) -> &str {
        "logreg"
    }
    fn num_samples(&self) -> usize {
        self.xs.len()
    }
    fn init_params(&self) -> ParamSet {
        let mut p = ParamSet::default();
        p.push("weight", TensorBuf::zeros(&[self.xs[0].len()]));
        p.push("bias", TensorBuf::zeros(&[1]));
        p
    }
    fn loss(&self, params: &Params64, i: usize) -> f64 {
        softplus(-self.margin(params, i))
    }
    fn loss_and_grad(&self, params: &Params64, i: usize) -> (f64, Params64) {
        let m = self.margin(params, i);
        // d/dz softplus(-y z) = -y σ(-y z)
        let coef = -self.ys[i] * sigmoid(-m);
        let gw = self.xs[i].iter().map(|x| coef * x).collect();
        (softplus(-m), vec![gw, vec![coef]])
    }
}

pub const MLP_INPUTS: usize = 4;
pub const MLP_HIDDEN: usize = 16;

/// 4 → 16 (tanh) → 1 regression network fitting a fixed smooth teacher.
#[derive(Debug, Clone)]
pub struct TinyMlp {
    xs: Vec<[f64; MLP_INPUTS]>,
    ys: Vec<f64>,
    seed: u64,
}

impl TinyMlp {
    pub fn new(seed: u64) -> Self {
        Self::with_samples(seed, 256)
    }

    pub fn with_samples(seed: u64, samples: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6c_7000);
        let mut xs = Vec::with_capacity(samples);
        let mut ys = Vec::with_capacity(samples);
        for _ in 0..samples {
            let x: [f64; MLP_INPUTS] = std::array::from_fn(|_| rng.gen_range(-1.0f32..1.0) as f64);
            ys.push(x[0].sin() + 0.5 * x[1] * x[2] - 0.3 * x[3]);
            xs.push(x);
        }
        Self { xs, ys, seed }
    }

    /// Dataset with explicit inputs and targets.
    pub fn from_data(xs: Vec<[f64; MLP_INPUTS]>, ys: Vec<f64>, seed: u64) -> Self {
        assert_eq!(xs.len(), ys.len());
        Self { xs, ys, seed }
    }

    fn forward(&self, p: &Params64, i: usize) -> ([f64; MLP_HIDDEN], f64) {
        let (w1, b1, w2, b2) = (&p[0], &p[1], &p[2], &p[3]);
        let x = &self.xs[i];
        let h: [f64; MLP_HIDDEN] = std::array::from_fn(|j| {
            let z: f64 = (0..MLP_INPUTS).map(|k| w1[j * MLP_INPUTS + k] * x[k]).sum::<f64>() + b1[j];
            z.tanh()
        });
        let out = h.iter().zip(w2.iter()).map(|(a, b)| a * b).sum::<f64>() + b2[0];
        (h, out)
    }
}

impl Task for TinyMlp {
    fn name(&self) -> &str {
        "mlp"
    }
    fn num_samples(&self) -> usize {
        self.xs.len()
    }
    fn init_params(&self) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut normal = |n: usize, std: f64| -> Vec<f32> {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z * std) as f32
                })
                .collect()
        };
        let mut p = ParamSet::default();
        let w1 = normal(MLP_HIDDEN * MLP_INPUTS, (1.0 / MLP_INPUTS as f64).sqrt());
        let w2 = normal(MLP_HIDDEN, (1.0 / MLP_HIDDEN as f64).sqrt());
        p.push("fc1.weight", TensorBuf::new(w1, vec![MLP_HIDDEN, MLP_INPUTS]).unwrap());
        p.push("fc1.bias", TensorBuf::zeros(&[MLP_HIDDEN]));
        p.push("fc2.weight", TensorBuf::new(w2, vec![1, MLP_HIDDEN]).unwrap());
        p.push("fc2.bias", TensorBuf::zeros(&[1]));
        p
    }
    fn loss(&self, p: &Params64, i: usize) -> f64 {
        let (_, out) = self.forward(p, i);
        0.5 * (out - self.ys[i]).powi(2)
    }
    fn loss_and_grad(&self, p: &Params64, i: usize) -> (f64, Params64) {
        let (h, out) = self.forward(p, i);
        let x = &self.xs[i];
        let resid = out - self.ys[i];
        let w2 = &p[2];
        let mut gw1 = vec![0.0; MLP_HIDDEN * MLP_INPUTS];
        let mut gb1 = vec![0.0; MLP_HIDDEN];
        let gw2: Vec<f64> = h.iter().map(|a| resid * a).collect();
        for j in 0..MLP_HIDDEN {
            let dz = resid * w2[j] * (1.0 - h[j] * h[j]);
            gb1[j] = dz;
            for k in 0..MLP_INPUTS {
                gw1[j * MLP_INPUTS + k] = dz * x[k];
            }
        }
        (0.5 * resid * resid, vec![gw1, gb1, gw2, vec![resid]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_examples() {
        let q = Quadratic::from_target(vec![3.0]);
        assert_eq!(q.loss_and_grad(&vec![vec![5.0]], 0).1, vec![vec![2.0]]);
        assert_eq!(q.loss_and_grad(&vec![vec![3.0]], 0).1, vec![vec![0.0]]);
    }

    #[test]
    fn quadratic_gd_contracts_by_point_nine() {
        let q = Quadratic::new(5, 9);
        let mut w = vec![vec![0.0; 5]];
        let dist = |w: &Params64| -> f64 {
            w[0].iter()
                .zip(q.target())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let d0 = dist(&w);
        for _ in 0..7 {
            let (_, g) = q.loss_and_grad(&w, 0);
            for (a, b) in w[0].iter_mut().zip(&g[0]) {
                *a -= 0.1 * b;
            }
        }
        assert!((dist(&w) / d0 - 0.9f64.powi(7)).abs() < 1e-12);
        assert!(dist(&w) / d0 < 0.5);
    }

    #[test]
    fn logreg_at_origin() {
        let t = LogReg::new(64, 5, 4);
        let p = to_f64(&t.init_params());
        assert!((t.loss(&p, 0) - std::f64::consts::LN_2).abs() < 1e-15);
        let mut acc = GradAccumulator::new(&t.init_params());
        accumulate_into(&t, &p, &(0..64).collect::<Vec<_>>(), &mut acc).unwrap();
        for d in 0..5 {
            let expected = -0.5 * (0..64).map(|i| t.ys[i] * t.xs[i][d]).sum::<f64>() / 64.0;
            assert!((acc.sums()[0][d] / 64.0 - expected).abs() < 1e-12);
        }
    }

    struct LinReg {
        x: Vec<f64>,
        y: f64,
    }

    impl Task for LinReg {
        fn name(&self) -> &str {
            "linreg"
        }
        fn num_samples(&self) -> usize {
            1
        }
        fn init_params(&self) -> ParamSet {
            let mut p = ParamSet::default();
            p.push("w", TensorBuf::zeros(&[self.x.len()]));
            p
        }
        fn loss(&self, p: &Params64, _: usize) -> f64 {
            let r: f64 = p[0].iter().zip(&self.x).map(|(w, x)| w * x).sum::<f64>() - self.y;
            0.5 * r * r
        }
        fn loss_and_grad(&self, p: &Params64, i: usize) -> (f64, Params64) {
            let r: f64 = p[0].iter().zip(&self.x).map(|(w, x)| w * x).sum::<f64>() - self.y;
            (self.loss(p, i), vec![self.x.iter().map(|x| r * x).collect()])
        }
    }

    #[test]
    fn linear_regression_gradient_at_origin() {
        let t = LinReg {
            x: vec![1.0, 2.0],
            y: 1.0,
        };
        let acc = accumulate_local(&t, &t.init_params(), &[0]).unwrap();
        assert_eq!(acc.sums(), &vec![vec![-1.0, -2.0]]);
    }

    #[test]
    fn output_bias_sees_raw_residual() {
        let t = TinyMlp::from_data(vec![[0.0; 4]], vec![1.0], 0);
        let p: Params64 = to_f64(&t.init_params())
            .into_iter()
            .map(|l| vec![0.0; l.len()])
            .collect();
        let (_, g) = t.loss_and_grad(&p, 0);
        assert_eq!(g[3], vec![-1.0]);
        assert!(g[0].iter().chain(&g[1]).chain(&g[2]).all(|&x| x == 0.0));
    }

    #[test]
    fn zero_net_zero_target_has_zero_gradient() {
        let t = TinyMlp::from_data(vec![[0.3, -0.2, 0.9, 0.1]; 3], vec![0.0; 3], 0);
        let p: Params64 = to_f64(&t.init_params())
            .into_iter()
            .map(|l| vec![0.0; l.len()])
            .collect();
        let (loss, g) = t.loss_and_grad(&p, 1);
        assert_eq!(loss, 0.0);
        assert!(g.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn microbatches_add() {
        let q = Quadratic::from_target(vec![1.0, -2.0]);
        let mut params = q.init_params();
        params.layers_mut()[0].tensor.data_mut().copy_from_slice(&[4.0, 1.0]);
        let a = accumulate_local(&q, &params, &[0, 0, 0]).unwrap();
        let b = accumulate_local(&q, &params, &[0; 5]).unwrap();
        let mut merged = a.clone();
        merged.merge(&b);
        let whole = accumulate_local(&q, &params, &[0; 8]).unwrap();
        assert_eq!(merged.count(), 8);
        assert_eq!(merged, whole);
        assert_eq!(accumulate_local(&q, &params, &[]), Err(TaskError::EmptyMicrobatch));
    }

    #[test]
    fn tasks_are_deterministic() {
        let a = TaskSpec::default().build().unwrap();
        let b = TaskSpec::default().build().unwrap();
        assert_eq!(a.init_params(), b.init_params());
        let p = to_f64(&a.init_params());
        assert_eq!(a.loss_and_grad(&p, 17), b.loss_and_grad(&p, 17));
        let m1 = TinyMlp::new(5).init_params();
        assert_eq!(m1, TinyMlp::new(5).init_params());
        assert!(TaskSpec {
            name: "nope".into(),
            ..Default::default()
        }
        .build()
        .is_err());
    }
}
