//! Transformer encoder blocks.
//!
//! Residual topology follows the two-line form used throughout:
//!
//! ```text
//! x' = drop_path(MSA(x)) + x
//! y  = drop_path(MLP(Norm(x'))) + x'
//! ```
//!
//! There is no normalization in front of the attention sublayer unless a
//! block is built with `pre_norm` (then `MSA(Norm(x))`).

use rand::Rng;

use crate::attention::{cross_fusion_mhsa_tapped, mhsa_tapped, CrossFusionMsaParams, MsaParams, Stream};
use crate::context::ForwardCtx;
use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::params::{join, Binder, Init, ParamSpec};

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct NormParams {
    pub gamma: TensorId,
    pub beta: TensorId,
}

impl NormParams {
    pub fn layout(prefix: &str, dim: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(join(prefix, "gamma"), [dim], Init::Ones),
            ParamSpec::new(join(prefix, "beta"), [dim], Init::Zeros),
        ]
    }

    pub fn bind(b: &mut Binder<'_>, prefix: &str) -> Result<Self> {
        Ok(Self {
            gamma: b.param(&join(prefix, "gamma"))?,
            beta: b.param(&join(prefix, "beta"))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: TensorId) -> Result<TensorId> {
        g.layer_norm(x, self.gamma, self.beta, LN_EPS)
    }
}

/// Two linear layers with a GELU in between.
#[derive(Debug, Clone, Copy)]
pub struct MlpParams {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

impl MlpParams {
    pub fn layout(prefix: &str, din: usize, hidden: usize, dout: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec::weight(join(prefix, "fc1.w"), din, hidden),
            ParamSpec::bias(join(prefix, "fc1.b"), hidden),
            ParamSpec::weight(join(prefix, "fc2.w"), hidden, dout),
            ParamSpec::bias(join(prefix, "fc2.b"), dout),
        ]
    }

    pub fn bind(b: &mut Binder<'_>, prefix: &str) -> Result<Self> {
        Ok(Self {
            w1: b.param(&join(prefix, "fc1.w"))?,
            b1: b.param(&join(prefix, "fc1.b"))?,
            w2: b.param(&join(prefix, "fc2.w"))?,
            b2: b.param(&join(prefix, "fc2.b"))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: TensorId) -> Result<TensorId> {
        let h = g.linear(x, self.w1, Some(self.b1))?;
        let h = g.gelu(h)?;
        g.linear(h, self.w2, Some(self.b2))
    }
}

/// Shape-level options shared by every block of a stack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockOptions {
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub qkv_bias: bool,
    pub pre_norm: bool,
    pub drop_path: f64,
}

/// One stream's encoder block: attention, MLP, norms.
#[derive(Debug, Clone, Copy)]
pub struct BlockParams {
    pub attn: MsaParams,
    pub norm_attn: Option<NormParams>,
    pub norm_mlp: NormParams,
    pub mlp: MlpParams,
    pub drop_path: f64,
}

impl BlockParams {
    pub fn layout(prefix: &str, opts: &BlockOptions) -> Vec<ParamSpec> {
        let mut specs = MsaParams::layout(&join(prefix, "attn"), opts.dim, opts.qkv_bias);
        if opts.pre_norm {
            specs.extend(NormParams::layout(&join(prefix, "norm_attn"), opts.dim));
        }
        specs.extend(NormParams::layout(&join(prefix, "norm_mlp"), opts.dim));
        specs.extend(MlpParams::layout(
            &join(prefix, "mlp"),
            opts.dim,
            opts.mlp_ratio * opts.dim,
            opts.dim,
        ));
        specs
    }

    pub fn bind(b: &mut Binder<'_>, prefix: &str, opts: &BlockOptions) -> Result<Self> {
        let attn = MsaParams::bind(b, &join(prefix, "attn"), opts.heads, opts.qkv_bias)?;
        let norm_attn = if opts.pre_norm {
            Some(NormParams::bind(b, &join(prefix, "norm_attn"))?)
        } else {
            None
        };
        Ok(Self {
            attn,
            norm_attn,
            norm_mlp: NormParams::bind(b, &join(prefix, "norm_mlp"))?,
            mlp: MlpParams::bind(b, &join(prefix, "mlp"))?,
            drop_path: opts.drop_path,
        })
    }

    fn attn_input(&self, g: &mut Graph, x: TensorId) -> Result<TensorId> {
        match &self.norm_attn {
            Some(n) => n.forward(g, x),
            None => Ok(x),
        }
    }

    /// `y = drop_path(MLP(Norm(x'))) + x'` given `x'`.
    fn mlp_residual(&self, g: &mut Graph, x1: TensorId, ctx: &mut ForwardCtx<'_>) -> Result<TensorId> {
        let h = self.norm_mlp.forward(g, x1)?;
        let h = self.mlp.forward(g, h)?;
        let h = drop_path(g, h, self.drop_path, ctx)?;
        g.add(h, x1)
    }
}

/// Image and landmark blocks with independent weights.
#[derive(Debug, Clone, Copy)]
pub struct TwoStreamBlockParams {
    pub img: BlockParams,
    pub lm: BlockParams,
}

impl TwoStreamBlockParams {
    pub fn layout(prefix: &str, opts: &BlockOptions) -> Vec<ParamSpec> {
        let mut specs = BlockParams::layout(&join(prefix, "img"), opts);
        specs.extend(BlockParams::layout(&join(prefix, "lm"), opts));
        specs
    }

    pub fn bind(b: &mut Binder<'_>, prefix: &str, opts: &BlockOptions) -> Result<Self> {
        Ok(Self {
            img: BlockParams::bind(b, &join(prefix, "img"), opts)?,
            lm: BlockParams::bind(b, &join(prefix, "lm"), opts)?,
        })
    }

    pub fn attention(&self) -> CrossFusionMsaParams {
        CrossFusionMsaParams {
            img: self.img.attn,
            lm: self.lm.attn,
        }
    }
}

/// Per-sample keep factors: `0` with probability `rate`, else `1 / (1 - rate)`.
pub fn drop_path_factors<R: Rng + ?Sized>(samples: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..samples)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

/// Stochastic depth on a residual branch. Identity in eval mode or at rate 0.
///
/// Rank-3 branches are dropped per sample along the leading axis; lower ranks
/// are one sample.
pub fn drop_path(g: &mut Graph, branch: TensorId, rate: f64, ctx: &mut ForwardCtx<'_>) -> Result<TensorId> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "drop path rate must be in [0, 1), got {rate}"
        )));
    }
    if !ctx.training() || rate == 0.0 {
        return Ok(branch);
    }
    let samples = if g.value(branch).rank() >= 3 {
        g.shape(branch)[0]
    } else {
        1
    };
    let rng = ctx
        .rng()
        .ok_or_else(|| Error::InvalidArgument("training forward without an RNG".into()))?;
    let factors = drop_path_factors(samples, rate, rng);
    let dropped = factors.iter().filter(|&&f| f == 0.0).count() as u64;
    ctx.record_drops(samples as u64, dropped);
    g.sample_scale(branch, &factors)
}

/// Single-stream block (vanilla self-attention).
pub fn vanilla_block(
    g: &mut Graph,
    x: TensorId,
    p: &BlockParams,
    stream: Stream,
    ctx: &mut ForwardCtx<'_>,
) -> Result<TensorId> {
    let h = p.attn_input(g, x)?;
    let a = mhsa_tapped(g, h, &p.attn, stream, ctx)?;
    let a = drop_path(g, a.output, p.drop_path, ctx)?;
    let x1 = g.add(a, x)?;
    p.mlp_residual(g, x1, ctx)
}

/// Cross-fusion block: swapped-query attention, then per-stream MLP.
pub fn cross_fusion_block(
    g: &mut Graph,
    x_img: TensorId,
    x_lm: TensorId,
    p: &TwoStreamBlockParams,
    ctx: &mut ForwardCtx<'_>,
) -> Result<(TensorId, TensorId)> {
    if g.shape(x_img) != g.shape(x_lm) {
        return Err(Error::shape("cross_fusion_block", g.shape(x_img), g.shape(x_lm)));
    }
    let h_img = p.img.attn_input(g, x_img)?;
    let h_lm = p.lm.attn_input(g, x_lm)?;
    let (a_img, a_lm) = cross_fusion_mhsa_tapped(g, h_img, h_lm, &p.attention(), ctx)?;

    let a = drop_path(g, a_img.output, p.img.drop_path, ctx)?;
    let x1 = g.add(a, x_img)?;
    let out_img = p.img.mlp_residual(g, x1, ctx)?;

    let a = drop_path(g, a_lm.output, p.lm.drop_path, ctx)?;
    let x1 = g.add(a, x_lm)?;
    let out_lm = p.lm.mlp_residual(g, x1, ctx)?;
    Ok((out_img, out_lm))
}

/// Two-stream block without query swap: each stream attends to itself.
pub fn parallel_block(
    g: &mut Graph,
    x_img: TensorId,
    x_lm: TensorId,
    p: &TwoStreamBlockParams,
    ctx: &mut ForwardCtx<'_>,
) -> Result<(TensorId, TensorId)> {
    if g.shape(x_img) != g.shape(x_lm) {
        return Err(Error::shape("parallel_block", g.shape(x_img), g.shape(x_lm)));
    }
    let out_img = vanilla_block(g, x_img, &p.img, Stream::Image, ctx)?;
    let out_lm = vanilla_block(g, x_lm, &p.lm, Stream::Landmark, ctx)?;
    Ok((out_img, out_lm))
}

/// Two-stream stack whose first `swap_depth` blocks use cross-fusion.
#[derive(Debug, Clone)]
pub struct StackParams {
    pub blocks: Vec<TwoStreamBlockParams>,
    pub swap_depth: usize,
}

impl StackParams {
    pub fn new(blocks: Vec<TwoStreamBlockParams>, swap_depth: usize) -> Result<Self> {
        if swap_depth > blocks.len() {
            return Err(Error::InvalidArgument(format!(
                "swap depth {swap_depth} exceeds stack depth {}",
                blocks.len()
            )));
        }
        Ok(Self { blocks, swap_depth })
    }
}

pub fn stack_forward(
    g: &mut Graph,
    x_img: TensorId,
    x_lm: TensorId,
    s: &StackParams,
    ctx: &mut ForwardCtx<'_>,
) -> Result<(TensorId, TensorId)> {
    let (mut img, mut lm) = (x_img, x_lm);
    for (k, block) in s.blocks.iter().enumerate() {
        ctx.set_block(k);
        (img, lm) = if k < s.swap_depth {
            cross_fusion_block(g, img, lm, block, ctx)?
        } else {
            parallel_block(g, img, lm, block, ctx)?
        };
    }
    Ok((img, lm))
}

/// Stack of single-stream blocks.
pub fn vanilla_stack(
    g: &mut Graph,
    x: TensorId,
    blocks: &[BlockParams],
    stream: Stream,
    ctx: &mut ForwardCtx<'_>,
) -> Result<TensorId> {
    let mut h = x;
    for (k, block) in blocks.iter().enumerate() {
        ctx.set_block(k);
        h = vanilla_block(g, h, block, stream, ctx)?;
    }
    Ok(h)
}
