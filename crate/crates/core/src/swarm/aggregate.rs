//! Sample-weighted and outlier-robust gradient aggregation.
//!
//! Contributions are always combined in ascending peer id order so that the
//! floating-point result is reproducible bit for bit.

use serde::{Deserialize, Serialize};

use super::{PeerId, SwarmError};
use crate::par::{self, Execution};
use crate::tensor::{ParamSet, TensorBuf};

const COMBINE_CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationKind {
    WeightedMean,
    ClippedMean,
    TrimmedMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregationPolicy {
    pub kind: AggregationKind,
    /// Multiple of the median contribution norm each gradient is clipped to.
    pub clip_norm: f64,
    /// Values dropped per side and coordinate.
    pub trim_k: usize,
}

impl Default for AggregationPolicy {
    fn default() -> Self {
        Self {
            kind: AggregationKind::WeightedMean,
            clip_norm: 1.0,
            trim_k: 1,
        }
    }
}

impl AggregationPolicy {
    pub fn weighted_mean() -> Self {
        Self::default()
    }

    pub fn trimmed(trim_k: usize) -> Self {
        Self {
            kind: AggregationKind::TrimmedMean,
            trim_k,
            ..Self::default()
        }
    }

    pub fn clipped(clip_norm: f64) -> Self {
        Self {
            kind: AggregationKind::ClippedMean,
            clip_norm,
            ..Self::default()
        }
    }

    /// Checks the policy against the number of contributions in a round.
    pub fn validate(&self, contributions: usize) -> Result<(), SwarmError> {
        match self.kind {
            AggregationKind::ClippedMean if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) => Err(
                SwarmError::InvalidPolicy(format!("clip_norm {} must be positive", self.clip_norm)),
            ),
            AggregationKind::TrimmedMean if self.trim_k >= contributions / 2 && self.trim_k > 0 => {
                Err(SwarmError::InvalidPolicy(format!(
                    "trim_k {} needs more than {} contributions",
                    self.trim_k,
                    2 * self.trim_k + 1
                )))
            }
            _ => Ok(()),
        }
    }

    /// The same policy with `trim_k` lowered to the largest value valid for
    /// `contributions` (zero trimming degenerates to a weighted mean).
    pub fn clamped_for(&self, contributions: usize) -> Self {
        let mut p = *self;
        if p.kind == AggregationKind::TrimmedMean {
            p.trim_k = p.trim_k.min((contributions / 2).saturating_sub(1));
        }
        p
    }
}

/// One peer's mean gradient over `samples` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Contribution {
    pub peer: PeerId,
    pub samples: u64,
    pub grad: ParamSet,
}

/// One contributor's view of a coordinate range.
#[derive(Debug, Clone, Copy)]
pub struct Row<'a> {
    pub values: &'a [f32],
    pub weight: f64,
    /// Multiplier applied before combining (clipping); 1 otherwise.
    pub scale: f64,
}

/// Euclidean norm over all layers.
pub fn contribution_norm(grad: &ParamSet) -> f64 {
    grad.layers()
        .iter()
        .map(|l| par::sum_squares(Execution::default(), l.tensor.data()))
        .fold(0.0, |a, b| a + b)
        .sqrt()
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-contribution clipping multipliers for a clip threshold of
/// `clip_norm × median(norms)`.
pub fn clip_scales(norms: &[f64], clip_norm: f64) -> Vec<f64> {
    let threshold = clip_norm * median(norms);
    norms
        .iter()
        .map(|&n| if n > threshold && n > 0.0 { threshold / n } else { 1.0 })
        .collect()
}

/// Combines rows coordinatewise into `out`. Rows must be in peer id order.
pub fn combine(rows: &[Row<'_>], kind: AggregationKind, trim_k: usize, out: &mut [f32]) {
    combine_with(Execution::default(), rows, kind, trim_k, out)
}

pub fn combine_with(exec: Execution, rows: &[Row<'_>], kind: AggregationKind, trim_k: usize, out: &mut [f32]) {
    let total_weight: f64 = rows.iter().map(|r| r.weight).fold(0.0, |a, b| a + b);
    par::for_each_chunk_mut(exec, out, COMBINE_CHUNK, |ci, chunk| {
        let base = ci * COMBINE_CHUNK;
        let mut column: Vec<(f64, f64)> = Vec::with_capacity(rows.len());
        for (j, o) in chunk.iter_mut().enumerate() {
            let idx = base + j;
            match kind {
                AggregationKind::WeightedMean | AggregationKind::ClippedMean => {
                    let mut num = 0.0f64;
                    for r in rows {
                        num += r.weight * (r.scale * r.values[idx] as f64);
                    }
                    *o = (num / total_weight) as f32;
                }
                AggregationKind::TrimmedMean => {
                    column.clear();
                    column.extend(rows.iter().map(|r| (r.scale * r.values[idx] as f64, r.weight)));
                    // stable: equal values keep peer order
                    column.sort_by(|a, b| a.0.total_cmp(&b.0));
                    let kept = &column[trim_k..column.len() - trim_k];
                    let (mut num, mut den) = (0.0f64, 0.0f64);
                    for &(v, w) in kept {
                        num += w * v;
                        den += w;
                    }
                    *o = (num / den) as f32;
                }
            }
        }
    });
}

/// Star aggregation of full contributions.
pub fn aggregate(contributions: &[Contribution], policy: &AggregationPolicy) -> Result<ParamSet, SwarmError> {
    let first = contributions.first().ok_or(SwarmError::EmptyRound)?;
    for c in contributions {
        first
            .grad
            .check_same_layout(&c.grad)
            .map_err(|e| SwarmError::ShapeMismatch(e.to_string()))?;
        if c.samples == 0 {
            return Err(SwarmError::InvalidPolicy(format!(
                "peer {} contributed zero samples",
                c.peer
            )));
        }
    }
    policy.validate(contributions.len())?;
    if contributions.len() == 1 {
        return Ok(first.grad.clone());
    }
    let mut order: Vec<&Contribution> = contributions.iter().collect();
    order.sort_by_key(|c| c.peer);

    let scales = match policy.kind {
        AggregationKind::ClippedMean => {
            let norms: Vec<f64> = order.iter().map(|c| contribution_norm(&c.grad)).collect();
            clip_scales(&norms, policy.clip_norm)
        }
        _ => vec![1.0; order.len()],
    };
    let trim_k = if policy.kind == AggregationKind::TrimmedMean {
        policy.trim_k
    } else {
        0
    };

    let mut out = first.grad.zeros_like();
    for (li, layer) in out.layers_mut().iter_mut().enumerate() {
        let rows: Vec<Row> = order
            .iter()
            .zip(&scales)
            .map(|(c, &scale)| Row {
                values: c.grad.layers()[li].tensor.data(),
                weight: c.samples as f64,
                scale,
            })
            .collect();
        let mut data = vec![0.0f32; layer.tensor.len()];
        combine(&rows, policy.kind, trim_k, &mut data);
        layer.tensor = TensorBuf::new(data, layer.tensor.shape().to_vec()).expect("same shape");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn contrib(peer: u32, samples: u64, values: Vec<f32>) -> Contribution {
        let mut grad = ParamSet::default();
        grad.push("g", TensorBuf::from_vec(values));
        Contribution {
            peer: PeerId(peer),
            samples,
            grad,
        }
    }

    #[test]
    fn weighted_mean_example() {
        let out = aggregate(
            &[contrib(1, 1, vec![2.0]), contrib(2, 3, vec![6.0])],
            &AggregationPolicy::weighted_mean(),
        )
        .unwrap();
        assert_eq!(out.layers()[0].tensor.data(), &[5.0]);
    }

    #[test]
    fn single_contribution_is_identity() {
        let c = contrib(7, 3, vec![1.5, -2.25, 1e-9]);
        for p in [
            AggregationPolicy::weighted_mean(),
            AggregationPolicy::clipped(0.5),
            AggregationPolicy::trimmed(0),
        ] {
            assert_eq!(aggregate(std::slice::from_ref(&c), &p).unwrap(), c.grad);
        }
    }

    #[test]
    fn input_order_does_not_matter() {
        let a = contrib(3, 2, vec![0.1, 0.7]);
        let b = contrib(1, 5, vec![0.3, -0.2]);
        let c = contrib(2, 1, vec![1e-3, 9.0]);
        let p = AggregationPolicy::weighted_mean();
        let x = aggregate(&[a.clone(), b.clone(), c.clone()], &p).unwrap();
        let y = aggregate(&[c, a, b], &p).unwrap();
        assert_eq!(x.hash(), y.hash());
    }

    #[test]
    fn trimmed_mean_rejects_outlier() {
        let honest = [vec![1.0, -1.0], vec![1.2, -0.8], vec![0.9, -1.1], vec![1.1, -0.9]];
        let mut cs: Vec<_> = honest
            .iter()
            .enumerate()
            .map(|(i, v)| contrib(i as u32, 4, v.clone()))
            .collect();
        cs.push(contrib(9, 4, vec![1000.0, -1000.0]));
        let out = aggregate(&cs, &AggregationPolicy::trimmed(1)).unwrap();
        for j in 0..2 {
            let col: Vec<f32> = honest.iter().map(|v| v[j]).collect();
            let lo = col.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = col.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let x = out.layers()[0].tensor.data()[j];
            assert!(x >= lo && x <= hi, "{x} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn clipping_bounds_each_norm() {
        let cs = vec![
            contrib(1, 1, vec![3.0, 4.0]),
            contrib(2, 1, vec![0.0, 1.0]),
            contrib(3, 1, vec![300.0, 400.0]),
        ];
        // norms 5, 1, 500; median 5; clip 1x → the 500 one is scaled to 5
        let out = aggregate(&cs, &AggregationPolicy::clipped(1.0)).unwrap();
        let d = out.layers()[0].tensor.data();
        assert!((d[0] - 2.0).abs() < 1e-6 && (d[1] - 3.0).abs() < 1e-6, "{d:?}");
        assert_eq!(clip_scales(&[0.0, 0.0], 1.0), vec![1.0, 1.0]);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            aggregate(&[], &AggregationPolicy::default()),
            Err(SwarmError::EmptyRound)
        ));
        let bad = [contrib(1, 1, vec![1.0]), contrib(2, 1, vec![1.0, 2.0])];
        assert!(matches!(
            aggregate(&bad, &AggregationPolicy::default()),
            Err(SwarmError::ShapeMismatch(_))
        ));
        let three: Vec<_> = (0..3).map(|i| contrib(i, 1, vec![i as f32])).collect();
        assert!(matches!(
            aggregate(&three, &AggregationPolicy::trimmed(1)),
            Err(SwarmError::InvalidPolicy(_))
        ));
        assert_eq!(AggregationPolicy::trimmed(1).clamped_for(3).trim_k, 0);
        assert_eq!(AggregationPolicy::trimmed(2).clamped_for(5).trim_k, 1);
        assert!(AggregationPolicy::clipped(0.0).validate(3).is_err());
    }
}
