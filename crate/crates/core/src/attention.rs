//! Multi-head self-attention and the cross-fusion variant with swapped queries.
//!
//! Inputs are `[B, P, D]` (or unbatched `[P, D]`). Attention weights are
//! returned alongside the output as `[B, h, P, P]` so callers can inspect or
//! differentiate them.
//!
//! In cross-fusion attention each stream keeps its own keys and values but
//! scores them against the *other* stream's queries:
//!
//! ```text
//! img = softmax(Q_lm  · K_imgᵀ / √d) · V_img
//! lm  = softmax(Q_img · K_lmᵀ  / √d) · V_lm
//! ```
//!
//! Patches are never exchanged between streams, only queries.

use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::params::{join, Binder, ParamSpec};

/// Which stream an attention map belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stream {
    Image,
    Landmark,
    /// Concatenated image + landmark patches (baseline variants).
    Fused,
}

impl Stream {
    pub fn as_str(self) -> &'static str {
        match self {
            Stream::Image => "img",
            Stream::Landmark => "lm",
            Stream::Fused => "fused",
        }
    }
}

/// Projection weights for one attention layer.
#[derive(Debug, Clone, Copy)]
pub struct MsaParams {
    pub w_q: TensorId,
    pub b_q: Option<TensorId>,
    pub w_k: TensorId,
    pub b_k: Option<TensorId>,
    pub w_v: TensorId,
    pub b_v: Option<TensorId>,
    pub w_o: TensorId,
    pub b_o: TensorId,
    pub heads: usize,
}

/// Independent attention weights for the image and landmark streams.
#[derive(Debug, Clone, Copy)]
pub struct CrossFusionMsaParams {
    pub img: MsaParams,
    pub lm: MsaParams,
}

impl MsaParams {
    pub fn layout(prefix: &str, dim: usize, qkv_bias: bool) -> Vec<ParamSpec> {
        let mut specs = Vec::with_capacity(8);
        for name in ["q", "k", "v"] {
            specs.push(ParamSpec::weight(join(prefix, &format!("w_{name}")), dim, dim));
            if qkv_bias {
                specs.push(ParamSpec::bias(join(prefix, &format!("b_{name}")), dim));
            }
        }
        specs.push(ParamSpec::weight(join(prefix, "w_o"), dim, dim));
        specs.push(ParamSpec::bias(join(prefix, "b_o"), dim));
        specs
    }

    pub fn bind(b: &mut Binder<'_>, prefix: &str, heads: usize, qkv_bias: bool) -> Result<Self> {
        let mut opt = |name: &str| -> Result<Option<TensorId>> {
            if qkv_bias {
                b.param(&join(prefix, name)).map(Some)
            } else {
                Ok(None)
            }
        };
        let b_q = opt("b_q")?;
        let b_k = opt("b_k")?;
        let b_v = opt("b_v")?;
        Ok(Self {
            w_q: b.param(&join(prefix, "w_q"))?,
            b_q,
            w_k: b.param(&join(prefix, "w_k"))?,
            b_k,
            w_v: b.param(&join(prefix, "w_v"))?,
            b_v,
            w_o: b.param(&join(prefix, "w_o"))?,
            b_o: b.param(&join(prefix, "b_o"))?,
            heads,
        })
    }

    fn check(&self, g: &Graph, x: TensorId) -> Result<()> {
        let d = g.value(x).last_dim();
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "embedding dim {d} is not divisible by {} heads",
                self.heads
            )));
        }
        Ok(())
    }
}

/// Output of one attention layer.
#[derive(Debug, Clone, Copy)]
pub struct Attended {
    pub output: TensorId,
    /// Row-stochastic attention weights, `[B, h, P, P]`.
    pub weights: TensorId,
}

/// Head-split query/key/value projections, each `[.., h, P, d]`.
#[derive(Debug, Clone, Copy)]
pub struct Projections {
    pub q: TensorId,
    pub k: TensorId,
    pub v: TensorId,
}

/// Observes (and may replace) attention weights as they are produced.
pub trait AttentionTap {
    fn tap(&mut self, g: &mut Graph, stream: Stream, weights: TensorId) -> Result<TensorId>;
}

/// Tap that passes weights through untouched.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoTap;

impl AttentionTap for NoTap {
    fn tap(&mut self, _g: &mut Graph, _stream: Stream, weights: TensorId) -> Result<TensorId> {
        Ok(weights)
    }
}

pub fn project(g: &mut Graph, x: TensorId, p: &MsaParams) -> Result<Projections> {
    p.check(g, x)?;
    let q = g.linear(x, p.w_q, p.b_q)?;
    let k = g.linear(x, p.w_k, p.b_k)?;
    let v = g.linear(x, p.w_v, p.b_v)?;
    Ok(Projections {
        q: g.split_heads(q, p.heads)?,
        k: g.split_heads(k, p.heads)?,
        v: g.split_heads(v, p.heads)?,
    })
}

/// `softmax(q · kᵀ / √d)` with `d` the per-head width.
pub fn attention_weights(g: &mut Graph, q: TensorId, k: TensorId) -> Result<TensorId> {
    let d = g.value(q).last_dim();
    let scores = g.matmul_t(q, k)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
    g.softmax_rows(scores)
}

/// Applies weights to head-split values, merges heads and output-projects.
pub fn attend(g: &mut Graph, weights: TensorId, v: TensorId, p: &MsaParams) -> Result<TensorId> {
    let mixed = g.matmul(weights, v)?;
    let merged = g.merge_heads(mixed)?;
    g.linear(merged, p.w_o, Some(p.b_o))
}

pub fn mhsa(g: &mut Graph, x: TensorId, p: &MsaParams) -> Result<Attended> {
    mhsa_tapped(g, x, p, Stream::Fused, &mut NoTap)
}

pub fn mhsa_tapped(
    g: &mut Graph,
    x: TensorId,
    p: &MsaParams,
    stream: Stream,
    tap: &mut dyn AttentionTap,
) -> Result<Attended> {
    let proj = project(g, x, p)?;
    let weights = attention_weights(g, proj.q, proj.k)?;
    let weights = tap.tap(g, stream, weights)?;
    let output = attend(g, weights, proj.v, p)?;
    Ok(Attended { output, weights })
}

/// Cross-fusion attention; returns `(image, landmark)`.
pub fn cross_fusion_mhsa(
    g: &mut Graph,
    x_img: TensorId,
    x_lm: TensorId,
    p: &CrossFusionMsaParams,
) -> Result<(Attended, Attended)> {
    cross_fusion_mhsa_tapped(g, x_img, x_lm, p, &mut NoTap)
}

pub fn cross_fusion_mhsa_tapped(
    g: &mut Graph,
    x_img: TensorId,
    x_lm: TensorId,
    p: &CrossFusionMsaParams,
    tap: &mut dyn AttentionTap,
) -> Result<(Attended, Attended)> {
    if g.shape(x_img) != g.shape(x_lm) {
        return Err(Error::shape(
            "cross_fusion_mhsa",
            g.shape(x_img),
            g.shape(x_lm),
        ));
    }
    if p.img.heads != p.lm.heads {
        return Err(Error::InvalidArgument(format!(
            "stream head counts differ: {} vs {}",
            p.img.heads, p.lm.heads
        )));
    }
    let img = project(g, x_img, &p.img)?;
    let lm = project(g, x_lm, &p.lm)?;

    let w_img = attention_weights(g, lm.q, img.k)?;
    let w_img = tap.tap(g, Stream::Image, w_img)?;
    let out_img = attend(g, w_img, img.v, &p.img)?;

    let w_lm = attention_weights(g, img.q, lm.k)?;
    let w_lm = tap.tap(g, Stream::Landmark, w_lm)?;
    let out_lm = attend(g, w_lm, lm.v, &p.lm)?;

    Ok((
        Attended {
            output: out_img,
            weights: w_img,
        },
        Attended {
            output: out_lm,
            weights: w_lm,
        },
    ))
}
