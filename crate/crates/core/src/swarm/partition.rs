//! Splitting the parameter vector into owner slices for partitioned
//! all-reduce.
//!
//! Every layer is cut into units of `unit_size` elements (the codec block
//! size, so slicing never splits a quantization block). Units are numbered
//! across layers in layer order and each owner gets a contiguous unit range.

use std::ops::Range;

use super::aggregate::{clip_scales, combine, contribution_norm, AggregationKind, AggregationPolicy, Row};
use super::{PeerId, SwarmError};
use crate::codec::{ExchangeCodec, QuantizedChunk};
use crate::tensor::{ParamSet, TensorBuf};

/// A contiguous piece of one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub layer: usize,
    pub elems: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitLayout {
    units: Vec<Segment>,
    layer_lens: Vec<usize>,
}

impl UnitLayout {
    pub fn new(params: &ParamSet, unit_size: usize) -> Self {
        let unit_size = unit_size.max(1);
        let mut units = Vec::new();
        let mut layer_lens = Vec::new();
        for (li, l) in params.layers().iter().enumerate() {
            let n = l.tensor.len();
            layer_lens.push(n);
            let mut s = 0;
            while s < n {
                let e = (s + unit_size).min(n);
                units.push(Segment { layer: li, elems: s..e });
                s = e;
            }
        }
        Self { units, layer_lens }
    }

    pub fn num_units(&self) -> usize {
        self.units.len()
    }

    pub fn layer_lens(&self) -> &[usize] {
        &self.layer_lens
    }

    /// Units merged into at most one segment per layer, in layer order.
    pub fn segments(&self, units: Range<usize>) -> Vec<Segment> {
        let mut out: Vec<Segment> = Vec::new();
        for u in &self.units[units] {
            match out.last_mut() {
                Some(last) if last.layer == u.layer && last.elems.end == u.elems.start => {
                    last.elems.end = u.elems.end;
                }
                _ => out.push(u.clone()),
            }
        }
        out
    }
}

/// Contiguous unit ranges proportional to `scores`, covering `0..total`
/// exactly. Owners with a tiny score may receive an empty range.
pub fn partition(total: usize, scores: &[f64]) -> Result<Vec<Range<usize>>, SwarmError> {
    if scores.is_empty() {
        return Err(SwarmError::EmptyRound);
    }
    if scores.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(SwarmError::InvalidPolicy("bandwidth scores must be positive".into()));
    }
    let sum: f64 = scores.iter().sum();
    let mut acc = 0.0;
    let mut bounds = vec![0usize];
    for s in &scores[..scores.len() - 1] {
        acc += s;
        let b = ((total as f64) * acc / sum).round() as usize;
        bounds.push(b.clamp(*bounds.last().unwrap(), total));
    }
    bounds.push(total);
    Ok(bounds.windows(2).map(|w| w[0]..w[1]).collect())
}

/// Encodes every layer with `codec`.
pub fn encode_params(codec: &ExchangeCodec, params: &ParamSet) -> Result<Vec<QuantizedChunk>, SwarmError> {
    Ok(params
        .layers()
        .iter()
        .map(|l| codec.encode(&l.tensor))
        .collect::<Result<_, _>>()?)
}

/// Decodes per-layer chunks into the layout of `template`.
pub fn decode_params(template: &ParamSet, chunks: &[QuantizedChunk]) -> Result<ParamSet, SwarmError> {
    if chunks.len() != template.len() {
        return Err(SwarmError::ShapeMismatch(format!(
            "{} chunks for {} layers",
            chunks.len(),
            template.len()
        )));
    }
    let mut out = template.clone();
    for (l, c) in out.layers_mut().iter_mut().zip(chunks) {
        if c.num_elements() != l.tensor.len() {
            return Err(SwarmError::ShapeMismatch(format!(
                "layer {} has {} elements, chunk has {}",
                l.name,
                l.tensor.len(),
                c.num_elements()
            )));
        }
        let data = c.decode()?.into_data();
        l.tensor = TensorBuf::new(data, l.tensor.shape().to_vec())?;
    }
    Ok(out)
}

/// Cuts per-layer chunks down to the given segments.
pub fn slice_chunks(chunks: &[QuantizedChunk], segments: &[Segment]) -> Result<Vec<QuantizedChunk>, SwarmError> {
    segments
        .iter()
        .map(|s| {
            let c = chunks
                .get(s.layer)
                .ok_or_else(|| SwarmError::ShapeMismatch(format!("no layer {}", s.layer)))?;
            Ok(c.slice(s.elems.clone())?)
        })
        .collect()
}

/// A contributor's encoded gradient as seen by an aggregator.
#[derive(Debug, Clone)]
pub struct EncodedContribution {
    pub peer: PeerId,
    pub samples: u64,
    /// Norm of the decoded gradient; only used by clipped aggregation.
    pub norm: f64,
    /// One chunk per segment being aggregated.
    pub chunks: Vec<QuantizedChunk>,
}

/// Aggregates one owner's segments and encodes the result with the scheme
/// of each full layer.
pub fn aggregate_segments(
    layout: &UnitLayout,
    segments: &[Segment],
    contributions: &[EncodedContribution],
    policy: &AggregationPolicy,
    codec: &ExchangeCodec,
) -> Result<Vec<QuantizedChunk>, SwarmError> {
    if contributions.is_empty() {
        return Err(SwarmError::EmptyRound);
    }
    policy.validate(contributions.len())?;
    let mut order: Vec<&EncodedContribution> = contributions.iter().collect();
    order.sort_by_key(|c| c.peer);
    for c in &order {
        if c.chunks.len() != segments.len() {
            return Err(SwarmError::ShapeMismatch(format!(
                "peer {} sent {} slices for {} segments",
                c.peer,
                c.chunks.len(),
                segments.len()
            )));
        }
    }
    let scales = match policy.kind {
        AggregationKind::ClippedMean => {
            let norms: Vec<f64> = order.iter().map(|c| c.norm).collect();
            clip_scales(&norms, policy.clip_norm)
        }
        _ => vec![1.0; order.len()],
    };
    let trim_k = if policy.kind == AggregationKind::TrimmedMean {
        policy.trim_k
    } else {
        0
    };
    let single = order.len() == 1;

    let mut out = Vec::with_capacity(segments.len());
    for (si, seg) in segments.iter().enumerate() {
        let decoded: Vec<Vec<f32>> = order
            .iter()
            .map(|c| {
                let t = c.chunks[si].decode()?;
                if t.len() != seg.elems.len() {
                    return Err(SwarmError::ShapeMismatch(format!(
                        "peer {} slice has {} elements, expected {}",
                        c.peer,
                        t.len(),
                        seg.elems.len()
                    )));
                }
                Ok(t.into_data())
            })
            .collect::<Result<_, SwarmError>>()?;
        let data = if single {
            decoded.into_iter().next().unwrap()
        } else {
            let rows: Vec<Row> = decoded
                .iter()
                .zip(&order)
                .zip(&scales)
                .map(|((v, c), &scale)| Row {
                    values: v,
                    weight: c.samples as f64,
                    scale,
                })
                .collect();
            let mut data = vec![0.0f32; seg.elems.len()];
            combine(&rows, policy.kind, trim_k, &mut data);
            data
        };
        let scheme = codec.scheme_for(layout.layer_lens()[seg.layer]);
        out.push(codec.encode_as(scheme, &TensorBuf::from_vec(data))?);
    }
    Ok(out)
}

/// Joins gathered owner outputs (segments in any order) back into one chunk
/// per layer.
pub fn assemble(
    layout: &UnitLayout,
    codec: &ExchangeCodec,
    mut pieces: Vec<(Segment, QuantizedChunk)>,
) -> Result<Vec<QuantizedChunk>, SwarmError> {
    pieces.sort_by_key(|(s, _)| (s.layer, s.elems.start));
    let mut out = Vec::with_capacity(layout.layer_lens().len());
    let mut it = pieces.into_iter().peekable();
    for (li, &len) in layout.layer_lens().iter().enumerate() {
        let mut parts = Vec::new();
        let mut covered = 0;
        while let Some((s, _)) = it.peek() {
            if s.layer != li {
                break;
            }
            let (s, c) = it.next().unwrap();
            if s.elems.start != covered {
                return Err(SwarmError::ShapeMismatch(format!("layer {li} has a gap at {covered}")));
            }
            covered = s.elems.end;
            parts.push(c);
        }
        if covered != len {
            return Err(SwarmError::ShapeMismatch(format!(
                "layer {li} covered to {covered} of {len}"
            )));
        }
        if parts.is_empty() {
            // zero-length layer
            out.push(codec.encode(&TensorBuf::from_vec(Vec::new()))?);
        } else {
            out.push(QuantizedChunk::concat(&parts)?);
        }
    }
    if it.next().is_some() {
        return Err(SwarmError::ShapeMismatch("segment for unknown layer".into()));
    }
    Ok(out)
}

/// Star reference: decode everything, aggregate, encode per layer.
pub fn star_encoded(
    template: &ParamSet,
    contributions: &[(PeerId, u64, Vec<QuantizedChunk>)],
    policy: &AggregationPolicy,
    codec: &ExchangeCodec,
) -> Result<Vec<QuantizedChunk>, SwarmError> {
    let layout = UnitLayout::new(template, codec.unit_size());
    let all = layout.segments(0..layout.num_units());
    let encoded = contributions
        .iter()
        .map(|(peer, samples, chunks)| {
            let norm = contribution_norm(&decode_params(template, chunks)?);
            Ok(EncodedContribution {
                peer: *peer,
                samples: *samples,
                norm,
                chunks: slice_chunks(chunks, &all)?,
            })
        })
        .collect::<Result<Vec<_>, SwarmError>>()?;
    let agg = aggregate_segments(&layout, &all, &encoded, policy, codec)?;
    assemble(&layout, codec, all.into_iter().zip(agg).collect())
}

/// Partitioned reference computed in-process: each owner aggregates its
/// slice and the results are gathered.
pub fn partitioned_encoded(
    template: &ParamSet,
    contributions: &[(PeerId, u64, Vec<QuantizedChunk>)],
    policy: &AggregationPolicy,
    codec: &ExchangeCodec,
    scores: &[f64],
) -> Result<Vec<QuantizedChunk>, SwarmError> {
    let layout = UnitLayout::new(template, codec.unit_size());
    let norms = contributions
        .iter()
        .map(|(_, _, chunks)| Ok(contribution_norm(&decode_params(template, chunks)?)))
        .collect::<Result<Vec<f64>, SwarmError>>()?;
    let mut pieces = Vec::new();
    for range in partition(layout.num_units(), scores)? {
        let segs = layout.segments(range);
        if segs.is_empty() {
            continue;
        }
        let slices = contributions
            .iter()
            .zip(&norms)
            .map(|((peer, samples, chunks), &norm)| {
                Ok(EncodedContribution {
                    peer: *peer,
                    samples: *samples,
                    norm,
                    chunks: slice_chunks(chunks, &segs)?,
                })
            })
            .collect::<Result<Vec<_>, SwarmError>>()?;
        let agg = aggregate_segments(&layout, &segs, &slices, policy, codec)?;
        pieces.extend(segs.into_iter().zip(agg));
    }
    assemble(&layout, codec, pieces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecPolicy;
    use proptest::prelude::*;

    fn params(sizes: &[usize], seed: u32) -> ParamSet {
        let mut p = ParamSet::default();
        for (i, &n) in sizes.iter().enumerate() {
            let v = (0..n)
                .map(|j| {
                    (((j as u32).wrapping_mul(2654435761) ^ seed.wrapping_mul(40503) ^ i as u32) % 2001) as f32 / 1000.0
                        - 1.0
                })
                .collect();
            p.push(format!("l{i}"), TensorBuf::from_vec(v));
        }
        p
    }

    #[test]
    fn partition_covers_and_is_proportional() {
        let r = partition(100, &[1.0, 3.0]).unwrap();
        assert_eq!(r, vec![0..25, 25..100]);
        let r = partition(3, &[1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(r.last().unwrap().end, 3);
        assert!(r.windows(2).all(|w| w[0].end == w[1].start));
        assert!(partition(3, &[]).is_err());
        assert!(partition(3, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn segments_merge_within_layers() {
        let p = params(&[10, 3, 0, 7], 1);
        let l = UnitLayout::new(&p, 4);
        assert_eq!(l.num_units(), 3 + 1 + 2);
        let s = l.segments(1..5);
        assert_eq!(
            s,
            vec![
                Segment { layer: 0, elems: 4..10 },
                Segment { layer: 1, elems: 0..3 },
                Segment { layer: 3, elems: 0..4 }
            ]
        );
    }

    fn codecs() -> Vec<ExchangeCodec> {
        vec![
            ExchangeCodec::Lossless,
            ExchangeCodec::Compressed(CodecPolicy {
                q8_threshold: 16,
                block_size: 8,
            }),
        ]
    }

    proptest! {
        #[test]
        fn partitioned_matches_star(
            sizes in proptest::collection::vec(0usize..60, 1..4),
            peers in 1usize..6,
            scores in proptest::collection::vec(0.1f64..10.0, 1..6),
            kind in 0u8..3,
        ) {
            let template = params(&sizes, 0);
            let contribs: Vec<_> = (0..peers)
                .map(|i| {
                    let p = params(&sizes, i as u32 + 1);
                    (PeerId(10 - i as u32), (i as u64 % 3) + 1, p)
                })
                .collect();
            let policy = match kind {
                0 => AggregationPolicy::weighted_mean(),
                1 => AggregationPolicy::clipped(0.8),
                _ => AggregationPolicy::trimmed(1).clamped_for(peers),
            };
            for codec in codecs() {
                let enc: Vec<_> = contribs
                    .iter()
                    .map(|(id, s, p)| (*id, *s, encode_params(&codec, p).unwrap()))
                    .collect();
                let star = star_encoded(&template, &enc, &policy, &codec).unwrap();
                let part = partitioned_encoded(&template, &enc, &policy, &codec, &scores).unwrap();
                prop_assert_eq!(&star, &part);
            }
        }
    }

    #[test]
    fn lossless_star_matches_direct_aggregate() {
        use super::super::aggregate::{aggregate, Contribution};
        let template = params(&[33, 5], 0);
        let cs: Vec<Contribution> = (0..4)
            .map(|i| Contribution {
                peer: PeerId(i),
                samples: 2 + i as u64,
                grad: params(&[33, 5], i + 7),
            })
            .collect();
        let enc: Vec<_> = cs
            .iter()
            .map(|c| {
                (
                    c.peer,
                    c.samples,
                    encode_params(&ExchangeCodec::Lossless, &c.grad).unwrap(),
                )
            })
            .collect();
        let policy = AggregationPolicy::weighted_mean();
        let star = star_encoded(&template, &enc, &policy, &ExchangeCodec::Lossless).unwrap();
        let decoded = decode_params(&template, &star).unwrap();
        assert_eq!(decoded.hash(), aggregate(&cs, &policy).unwrap().hash());
    }
}
