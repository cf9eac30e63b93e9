//! Gradient-weighted attention rollout and grayscale rendering.
//!
//! For one input and a target class, every attention map `A` (`[h, T, T]`)
//! and its gradient `∇A` w.r.t. the target logit are captured in a single
//! eval-mode forward/backward pass. Relevance for a stream is then rolled out
//! block by block:
//!
//! ```text
//! R ← I
//! for each block:  Ā = mean_h max(∇A ⊙ A, 0)
//!                  R ← R + Ā · R
//!                  normalize each row of R to sum 1
//! score_j = mean over rows i ≠ j of R[i][j]
//! ```
//!
//! This is this crate's formulation of gradient-weighted relevance, not a
//! reproduction of any particular published propagation rule.
//!
//! Each stream follows its own attention maps. In cross-fusion blocks that
//! is the map mixing the stream's value rows (image keys scored by landmark
//! queries, for the image stream). For concatenated variants the rollout runs
//! over all `2P` tokens and the scores are split into the two halves.
//! Pyramid levels are rolled out separately and their scores averaged.

use std::fmt::Write as _;

use crate::attention::Stream;
use crate::context::ForwardCtx;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{Model, Topology};
use crate::tensor::Tensor;

/// One captured attention map.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub level: usize,
    pub block: usize,
    pub stream: Stream,
    /// `[h, T, T]`, rows sum to 1.
    pub weights: Tensor,
    /// Gradient of the target logit w.r.t. `weights`.
    pub grad: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub class: usize,
    pub levels: usize,
    pub depth: usize,
    pub records: Vec<AttentionRecord>,
}

fn drop_batch_axis(t: &Tensor) -> Result<Tensor> {
    match t.shape() {
        [1, rest @ ..] if rest.len() == 3 => t.clone().reshape(rest.to_vec()),
        [_, _, _] => Ok(t.clone()),
        s => Err(Error::InvalidArgument(format!(
            "expected a single-sample attention map, got shape {s:?}"
        ))),
    }
}

/// Captures attention maps and their gradients for one sample (`[P, D]` per
/// stream) w.r.t. the logit of `class`.
pub fn capture_attention(model: &Model, x_img: &Tensor, x_lm: &Tensor, class: usize) -> Result<AttentionTrace> {
    capture_attention_with(model, x_img, x_lm, class, ForwardCtx::eval())
}

/// As [`capture_attention`] with an explicit context; training contexts are
/// rejected.
pub fn capture_attention_with(
    model: &Model,
    x_img: &Tensor,
    x_lm: &Tensor,
    class: usize,
    ctx: ForwardCtx<'_>,
) -> Result<AttentionTrace> {
    if ctx.training() {
        return Err(Error::CaptureInTraining);
    }
    let cfg = model.config();
    if class >= cfg.num_classes {
        return Err(Error::LabelOutOfRange {
            label: class,
            classes: cfg.num_classes,
        });
    }
    let mut ctx = ctx.with_capture();
    let mut g = Graph::new();
    let xi = g.constant(x_img.clone())?;
    let xl = g.constant(x_lm.clone())?;
    // Parameters are bound as trainable so that gradients reach the
    // attention maps; their own gradients are discarded.
    let fwd = model.forward(&mut g, xi, xl, &mut ctx, true)?;
    let index: Vec<usize> = match g.shape(fwd.logits).len() {
        1 => vec![class],
        _ if g.shape(fwd.logits)[0] == 1 => vec![0, class],
        _ => {
            return Err(Error::InvalidArgument(
                "attention capture takes a single sample".into(),
            ))
        }
    };
    let target = g.pick(fwd.logits, &index)?;
    g.backward(target)?;
    let records = ctx
        .sites()
        .iter()
        .map(|s| {
            let weights = drop_batch_axis(g.value(s.weights))?;
            let grad = match g.grad(s.weights) {
                Some(gr) => drop_batch_axis(gr)?,
                None => Tensor::zeros(weights.shape().to_vec()),
            };
            Ok(AttentionRecord {
                level: s.level,
                block: s.block,
                stream: s.stream,
                weights,
                grad,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttentionTrace {
        class,
        levels: cfg.level_dims().len(),
        depth: cfg.depth,
        records,
    })
}

/// Head-averaged positive part of `∇A ⊙ A`, `[T, T]`.
pub fn weighted_attention(weights: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let s = weights.shape();
    if s.len() != 3 || s[1] != s[2] || grad.shape() != s {
        return Err(Error::shape("weighted_attention", s, grad.shape()));
    }
    let (h, t) = (s[0], s[1]);
    let mut out = vec![0.0; t * t];
    for head in 0..h {
        let a = &weights.data()[head * t * t..(head + 1) * t * t];
        let ga = &grad.data()[head * t * t..(head + 1) * t * t];
        for ((o, &a), &g) in out.iter_mut().zip(a).zip(ga) {
            *o += (a * g).max(0.0);
        }
    }
    out.iter_mut().for_each(|v| *v /= h as f64);
    Tensor::new([t, t], out)
}

/// Rolls out `(A, ∇A)` pairs in block order, starting from the identity.
pub fn rollout(blocks: &[(&Tensor, &Tensor)], tokens: usize) -> Result<Tensor> {
    let t = tokens;
    let mut r = Tensor::eye(t);
    for &(a, ga) in blocks {
        let abar = weighted_attention(a, ga)?;
        if abar.shape() != [t, t] {
            return Err(Error::shape("rollout", abar.shape(), &[t, t]));
        }
        let (ad, rd) = (abar.data(), r.data());
        let mut next = rd.to_vec();
        for i in 0..t {
            for k in 0..t {
                let w = ad[i * t + k];
                if w != 0.0 {
                    for j in 0..t {
                        next[i * t + j] += w * rd[k * t + j];
                    }
                }
            }
        }
        for row in next.chunks_mut(t) {
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= sum);
        }
        r = Tensor::new([t, t], next)?;
    }
    Ok(r)
}

/// Column means of `R` excluding the diagonal. A single token scores
/// `R[0][0]`.
pub fn patch_scores(r: &Tensor) -> Vec<f64> {
    let t = r.last_dim();
    if t == 1 {
        return vec![r.data()[0]];
    }
    (0..t)
        .map(|j| (0..t).filter(|&i| i != j).map(|i| r.data()[i * t + j]).sum::<f64>() / (t - 1) as f64)
        .collect()
}

/// Relevance of one stream at one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    pub level: usize,
    /// Rolled-out relevance over the tokens the stream attended to.
    pub matrix: Tensor,
    /// Per-patch scores of this stream.
    pub scores: Vec<f64>,
}

/// Per-level maps and level-averaged per-patch scores of one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamRelevance {
    pub stream: Stream,
    pub levels: Vec<RelevanceMap>,
    pub scores: Vec<f64>,
}

fn level_records(trace: &AttentionTrace, level: usize, stream: Stream) -> Result<Vec<&AttentionRecord>> {
    let mut recs: Vec<&AttentionRecord> = trace
        .records
        .iter()
        .filter(|r| r.level == level && r.stream == stream)
        .collect();
    recs.sort_by_key(|r| r.block);
    let blocks: Vec<usize> = recs.iter().map(|r| r.block).collect();
    if blocks != (0..trace.depth).collect::<Vec<_>>() {
        return Err(Error::IncompleteTrace(format!(
            "level {level}, stream {}: blocks {blocks:?}, expected 0..{}",
            stream.as_str(),
            trace.depth
        )));
    }
    Ok(recs)
}

fn map_from(recs: &[&AttentionRecord], level: usize, keep: std::ops::Range<usize>) -> Result<RelevanceMap> {
    let tokens = match recs.first() {
        Some(r) => r.weights.shape()[1],
        None => keep.end,
    };
    let pairs: Vec<(&Tensor, &Tensor)> = recs.iter().map(|r| (&r.weights, &r.grad)).collect();
    let matrix = rollout(&pairs, tokens)?;
    let scores = patch_scores(&matrix)[keep].to_vec();
    Ok(RelevanceMap { level, matrix, scores })
}

/// Rolls out the relevance of `stream` (image or landmark) for `model`'s
/// topology.
pub fn stream_relevance(model: &Model, trace: &AttentionTrace, stream: Stream) -> Result<StreamRelevance> {
    let p = model.config().patches;
    let topology = model.config().variant.topology();
    let mut levels = Vec::with_capacity(trace.levels);
    for level in 0..trace.levels {
        let map = match (topology, stream) {
            (Topology::CrossFusion, Stream::Image | Stream::Landmark) => {
                map_from(&level_records(trace, level, stream)?, level, 0..p)?
            }
            (Topology::SingleStream(s), _) if s == stream => {
                map_from(&level_records(trace, level, stream)?, level, 0..p)?
            }
            (Topology::Concatenated, Stream::Image) => {
                map_from(&level_records(trace, level, Stream::Fused)?, level, 0..p)?
            }
            (Topology::Concatenated, Stream::Landmark) => {
                map_from(&level_records(trace, level, Stream::Fused)?, level, p..2 * p)?
            }
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "variant {} has no {} stream",
                    model.config().variant,
                    stream.as_str()
                )))
            }
        };
        levels.push(map);
    }
    let mut scores = vec![0.0; p];
    for m in &levels {
        scores.iter_mut().zip(&m.scores).for_each(|(s, v)| *s += v / levels.len() as f64);
    }
    Ok(StreamRelevance {
        stream,
        levels,
        scores,
    })
}

/// Placement of patches on a 2-D grid of cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub rows: usize,
    pub cols: usize,
    /// `(row, col)` of each patch.
    pub cells: Vec<(usize, usize)>,
}

impl Layout {
    pub fn new(rows: usize, cols: usize, cells: Vec<(usize, usize)>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument("layout needs at least one cell".into()));
        }
        if let Some(&(r, c)) = cells.iter().find(|&&(r, c)| r >= rows || c >= cols) {
            return Err(Error::InvalidArgument(format!(
                "cell ({r}, {c}) outside a {rows}×{cols} layout"
            )));
        }
        Ok(Self { rows, cols, cells })
    }

    /// Row-major placement of `patches` cells, `cols` per row.
    pub fn grid(patches: usize, cols: usize) -> Result<Self> {
        let cols = cols.max(1);
        let rows = patches.div_ceil(cols).max(1);
        Self::new(rows, cols, (0..patches).map(|i| (i / cols, i % cols)).collect())
    }

    /// Near-square row-major grid.
    pub fn square(patches: usize) -> Result<Self> {
        Self::grid(patches, (patches as f64).sqrt().ceil() as usize)
    }
}

/// Min-max normalized gray levels; constant scores map to mid gray (128).
pub fn gray_levels(scores: &[f64]) -> Vec<u8> {
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // Also catches NaN scores.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(max > min) {
        return vec![128; scores.len()];
    }
    scores
        .iter()
        .map(|s| (255.0 * (s - min) / (max - min)).round() as u8)
        .collect()
}

/// Binary PGM (P5, maxval 255). Each layout cell becomes a `scale × scale`
/// block; cells without a patch are black.
pub fn render_pgm(scores: &[f64], layout: &Layout, scale: usize) -> Result<Vec<u8>> {
    if scores.len() != layout.cells.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for a layout of {} patches",
            scores.len(),
            layout.cells.len()
        )));
    }
    let scale = scale.max(1);
    let (w, h) = (layout.cols * scale, layout.rows * scale);
    let mut pixels = vec![0u8; w * h];
    for (&(r, c), &v) in layout.cells.iter().zip(&gray_levels(scores)) {
        for y in r * scale..(r + 1) * scale {
            pixels[y * w + c * scale..y * w + (c + 1) * scale].fill(v);
        }
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

/// `patch,row,col,score` CSV.
pub fn scores_csv(scores: &[f64], layout: &Layout) -> Result<String> {
    if scores.len() != layout.cells.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for a layout of {} patches",
            scores.len(),
            layout.cells.len()
        )));
    }
    let mut out = String::from("patch,row,col,score\n");
    for (i, (&(r, c), s)) in layout.cells.iter().zip(scores).enumerate() {
        writeln!(out, "{i},{r},{c},{s}").expect("writing to a String");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_keep_identity() {
        let a = Tensor::full([2, 3, 3], 1.0 / 3.0);
        let g = Tensor::zeros([2, 3, 3]);
        let r = rollout(&[(&a, &g), (&a, &g)], 3).unwrap();
        assert_eq!(r, Tensor::eye(3));
        assert_eq!(patch_scores(&r), vec![0.0; 3]);
        assert_eq!(rollout(&[], 4).unwrap(), Tensor::eye(4));
    }

    #[test]
    fn uniform_block_gives_uniform_scores() {
        let a = Tensor::full([1, 4, 4], 0.25);
        let g = Tensor::ones([1, 4, 4]);
        let s = patch_scores(&rollout(&[(&a, &g)], 4).unwrap());
        assert!(s.iter().all(|v| (v - s[0]).abs() < 1e-15));
        assert!(s[0] > 0.0);
    }

    #[test]
    fn gray_levels_extremes() {
        assert_eq!(gray_levels(&[0.3; 5]), vec![128; 5]);
        assert_eq!(gray_levels(&[0.0, 0.0, 2.0, 0.0]), vec![0, 0, 255, 0]);
    }

    #[test]
    fn layout_checks() {
        let l = Layout::grid(5, 2).unwrap();
        assert_eq!((l.rows, l.cols), (3, 2));
        assert_eq!(l.cells[4], (2, 0));
        assert!(Layout::new(2, 2, vec![(2, 0)]).is_err());
        assert!(render_pgm(&[1.0, 2.0], &l, 1).is_err());
    }

    #[test]
    fn pgm_header_and_size() {
        let l = Layout::grid(4, 2).unwrap();
        let pgm = render_pgm(&[0.0, 1.0, 2.0, 3.0], &l, 3).unwrap();
        let header = b"P5\n6 6\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert_eq!(pgm.len(), header.len() + 36);
    }
}
