//! Full architectures: per-stream pyramid projections, encoder stacks per
//! level, pooling and the classification head.
//!
//! Every variant consumes an image-feature tensor and a landmark-feature
//! tensor, each `[B, P, D]` (or unbatched `[P, D]`), and produces `[B, N]`
//! logits. Per level, each stream is linearly projected from `D` to the
//! level width, encoded, and mean-pooled over patches. Pooled vectors of all
//! levels and streams are concatenated and fed to a one-hidden-layer MLP.
//!
//! | variant                | streams            | encoder                       | levels |
//! |------------------------|--------------------|-------------------------------|--------|
//! | `landmark_only`        | landmark           | self-attention                | 1      |
//! | `image_only`           | image              | self-attention                | 1      |
//! | `baseline`             | both, concatenated | self-attention over `2P`      | 1      |
//! | `baseline_pyramid`     | both, concatenated | self-attention over `2P`      | all    |
//! | `baseline_crossfusion` | both               | cross-fusion (`swap_depth`)   | 1      |
//! | `poster`               | both               | cross-fusion (`swap_depth`)   | all    |
//!
//! Single-level variants use `pyramid_dims[0]`. The concatenated variants pool
//! the image half and the landmark half of the fused sequence separately, so
//! every two-stream variant feeds the head the same layout.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Stream;
use crate::context::ForwardCtx;
use crate::encoder::{
    stack_forward, vanilla_stack, BlockOptions, BlockParams, MlpParams, StackParams,
    TwoStreamBlockParams,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::params::{join, Binder, BoundParams, ParamSpec, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    LandmarkOnly,
    ImageOnly,
    Baseline,
    BaselinePyramid,
    BaselineCrossfusion,
    Poster,
}

/// How a variant routes the two feature streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Topology {
    SingleStream(Stream),
    Concatenated,
    CrossFusion,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::LandmarkOnly,
        Variant::ImageOnly,
        Variant::Baseline,
        Variant::BaselinePyramid,
        Variant::BaselineCrossfusion,
        Variant::Poster,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::LandmarkOnly => "landmark_only",
            Variant::ImageOnly => "image_only",
            Variant::Baseline => "baseline",
            Variant::BaselinePyramid => "baseline_pyramid",
            Variant::BaselineCrossfusion => "baseline_crossfusion",
            Variant::Poster => "poster",
        }
    }

    pub fn topology(self) -> Topology {
        match self {
            Variant::LandmarkOnly => Topology::SingleStream(Stream::Landmark),
            Variant::ImageOnly => Topology::SingleStream(Stream::Image),
            Variant::Baseline | Variant::BaselinePyramid => Topology::Concatenated,
            Variant::BaselineCrossfusion | Variant::Poster => Topology::CrossFusion,
        }
    }

    pub fn uses_pyramid(self) -> bool {
        matches!(self, Variant::BaselinePyramid | Variant::Poster)
    }

    /// Number of streams pooled into the head.
    pub fn pooled_streams(self) -> usize {
        match self.topology() {
            Topology::SingleStream(_) => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant `{s}` (expected one of {})",
                    Variant::ALL.map(Variant::as_str).join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Patches per stream.
    pub patches: usize,
    /// Width of the incoming features.
    pub base_dim: usize,
    /// Level widths, strictly decreasing.
    pub pyramid_dims: Vec<usize>,
    /// Encoder blocks per level.
    pub depth: usize,
    pub mlp_ratio: usize,
    pub drop_path: f64,
    /// Target per-head width; a level of width `w` gets `max(1, w / head_dim)` heads.
    pub head_dim: usize,
    pub qkv_bias: bool,
    /// Normalize the attention input as well as the MLP input.
    pub pre_norm: bool,
    /// Leading cross-fusion blocks per level; `None` means all of them.
    pub swap_depth: Option<usize>,
    pub num_classes: usize,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Poster,
            patches: 68,
            base_dim: 512,
            pyramid_dims: vec![512, 256, 128],
            depth: 8,
            mlp_ratio: 2,
            drop_path: 0.01,
            head_dim: 64,
            qkv_bias: true,
            pre_norm: false,
            swap_depth: None,
            num_classes: 7,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small configuration for tests and desk experiments:
    /// `P = 8`, `D = 32`, levels `[32, 16, 8]`, depth 2, head width 8.
    pub fn desk() -> Self {
        Self {
            patches: 8,
            base_dim: 32,
            pyramid_dims: vec![32, 16, 8],
            depth: 2,
            head_dim: 8,
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.patches == 0 || self.base_dim == 0 {
            return fail("patches and base_dim must be positive".into());
        }
        if self.pyramid_dims.is_empty() {
            return fail("pyramid_dims must not be empty".into());
        }
        if self.pyramid_dims.windows(2).any(|w| w[0] <= w[1]) || self.pyramid_dims.contains(&0) {
            return fail(format!(
                "pyramid_dims must be positive and strictly decreasing, got {:?}",
                self.pyramid_dims
            ));
        }
        if self.mlp_ratio == 0 || self.head_dim == 0 {
            return fail("mlp_ratio and head_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return fail(format!("drop_path must be in [0, 1), got {}", self.drop_path));
        }
        if let Some(k) = self.swap_depth {
            if k > self.depth {
                return fail(format!("swap_depth {k} exceeds depth {}", self.depth));
            }
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        for &d in self.level_dims() {
            let h = self.heads_for(d);
            if d % h != 0 {
                return fail(format!("level width {d} is not divisible by {h} heads"));
            }
        }
        Ok(())
    }

    /// Widths of the levels this variant actually builds.
    pub fn level_dims(&self) -> &[usize] {
        if self.variant.uses_pyramid() {
            &self.pyramid_dims
        } else {
            &self.pyramid_dims[..1.min(self.pyramid_dims.len())]
        }
    }

    pub fn heads_for(&self, dim: usize) -> usize {
        (dim / self.head_dim).max(1)
    }

    pub fn effective_swap_depth(&self) -> usize {
        self.swap_depth.unwrap_or(self.depth)
    }

    pub fn block_options(&self, dim: usize) -> BlockOptions {
        BlockOptions {
            dim,
            heads: self.heads_for(dim),
            mlp_ratio: self.mlp_ratio,
            qkv_bias: self.qkv_bias,
            pre_norm: self.pre_norm,
            drop_path: self.drop_path,
        }
    }

    /// Width of the pooled feature vector entering the head.
    pub fn feature_width(&self) -> usize {
        self.variant.pooled_streams() * self.level_dims().iter().sum::<usize>()
    }

    /// Hidden width of the classification head.
    pub fn head_hidden(&self) -> usize {
        self.pyramid_dims[0]
    }

    /// The name → shape map of every learnable tensor, in initialization order.
    pub fn layout(&self) -> Result<Vec<ParamSpec>> {
        self.validate()?;
        let mut specs = Vec::new();
        for (l, &dim) in self.level_dims().iter().enumerate() {
            let level = format!("level{l}");
            for stream in self.projected_streams() {
                specs.extend(Linear::layout(
                    &join(&level, &format!("proj.{}", stream.as_str())),
                    self.base_dim,
                    dim,
                ));
            }
            let opts = self.block_options(dim);
            for k in 0..self.depth {
                let prefix = join(&level, &format!("block{k}"));
                match self.variant.topology() {
                    Topology::CrossFusion => specs.extend(TwoStreamBlockParams::layout(&prefix, &opts)),
                    _ => specs.extend(BlockParams::layout(&prefix, &opts)),
                }
            }
        }
        specs.extend(MlpParams::layout(
            "head",
            self.feature_width(),
            self.head_hidden(),
            self.num_classes,
        ));
        Ok(specs)
    }

    fn projected_streams(&self) -> Vec<Stream> {
        match self.variant.topology() {
            Topology::SingleStream(s) => vec![s],
            _ => vec![Stream::Image, Stream::Landmark],
        }
    }
}

/// Affine map `x · w + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: TensorId,
    pub b: TensorId,
}

impl Linear {
    pub fn layout(prefix: &str, din: usize, dout: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec::weight(join(prefix, "w"), din, dout),
            ParamSpec::bias(join(prefix, "b"), dout),
        ]
    }

    pub fn bind(b: &mut Binder<'_>, prefix: &str) -> Result<Self> {
        Ok(Self {
            w: b.param(&join(prefix, "w"))?,
            b: b.param(&join(prefix, "b"))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: TensorId) -> Result<TensorId> {
        g.linear(x, self.w, Some(self.b))
    }
}

/// Encoder of one pyramid level.
#[derive(Debug, Clone)]
pub enum LevelEncoder {
    /// Two streams with their own weights (cross-fusion variants).
    TwoStream(StackParams),
    /// One stack over a single or concatenated sequence.
    Shared(Vec<BlockParams>),
}

#[derive(Debug, Clone)]
pub struct Level {
    pub proj_img: Option<Linear>,
    pub proj_lm: Option<Linear>,
    pub encoder: LevelEncoder,
}

/// Graph handles for a whole model.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub levels: Vec<Level>,
    pub head: MlpParams,
}

impl BoundModel {
    pub fn bind(b: &mut Binder<'_>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let streams = cfg.projected_streams();
        let mut levels = Vec::with_capacity(cfg.level_dims().len());
        for (l, &dim) in cfg.level_dims().iter().enumerate() {
            let level = format!("level{l}");
            let mut proj = |s: Stream| -> Result<Option<Linear>> {
                if streams.contains(&s) {
                    Linear::bind(b, &join(&level, &format!("proj.{}", s.as_str()))).map(Some)
                } else {
                    Ok(None)
                }
            };
            let proj_img = proj(Stream::Image)?;
            let proj_lm = proj(Stream::Landmark)?;
            let opts = cfg.block_options(dim);
            let encoder = match cfg.variant.topology() {
                Topology::CrossFusion => {
                    let blocks = (0..cfg.depth)
                        .map(|k| TwoStreamBlockParams::bind(b, &join(&level, &format!("block{k}")), &opts))
                        .collect::<Result<Vec<_>>>()?;
                    LevelEncoder::TwoStream(StackParams::new(blocks, cfg.effective_swap_depth())?)
                }
                _ => LevelEncoder::Shared(
                    (0..cfg.depth)
                        .map(|k| BlockParams::bind(b, &join(&level, &format!("block{k}")), &opts))
                        .collect::<Result<Vec<_>>>()?,
                ),
            };
            levels.push(Level {
                proj_img,
                proj_lm,
                encoder,
            });
        }
        Ok(Self {
            levels,
            head: MlpParams::bind(b, "head")?,
        })
    }
}

/// One projection per level: `[.., P, D] -> [.., P, D_level]` for each level.
pub fn project_levels(g: &mut Graph, x: TensorId, projections: &[Linear]) -> Result<Vec<TensorId>> {
    projections.iter().map(|p| p.forward(g, x)).collect()
}

fn projections(levels: &[Level], stream: Stream) -> Result<Vec<Linear>> {
    levels
        .iter()
        .map(|l| match stream {
            Stream::Image => l.proj_img,
            _ => l.proj_lm,
        })
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Config(format!("model has no {} projection", stream.as_str())))
}

fn shared_blocks(level: &Level) -> Result<&[BlockParams]> {
    match &level.encoder {
        LevelEncoder::Shared(blocks) => Ok(blocks),
        LevelEncoder::TwoStream(_) => Err(Error::Config(
            "expected a single-sequence encoder, found a two-stream one".into(),
        )),
    }
}

/// Cross-fusion pyramid: per level, a two-stream stack on the projected
/// features, then both streams mean-pooled into the head.
pub fn poster_forward(
    g: &mut Graph,
    x_img: TensorId,
    x_lm: TensorId,
    m: &BoundModel,
    ctx: &mut ForwardCtx<'_>,
) -> Result<TensorId> {
    let img_levels = project_levels(g, x_img, &projections(&m.levels, Stream::Image)?)?;
    let lm_levels = project_levels(g, x_lm, &projections(&m.levels, Stream::Landmark)?)?;
    let mut pooled = Vec::with_capacity(2 * m.levels.len());
    for (l, level) in m.levels.iter().enumerate() {
        let LevelEncoder::TwoStream(stack) = &level.encoder else {
            return Err(Error::Config(
                "expected a two-stream encoder, found a single-sequence one".into(),
            ));
        };
        ctx.set_level(l);
        let (img, lm) = stack_forward(g, img_levels[l], lm_levels[l], stack, ctx)?;
        pooled.push(g.mean_pool_patches(img)?);
        pooled.push(g.mean_pool_patches(lm)?);
    }
    head_forward(g, &pooled, &m.head)
}

/// Concatenation baseline: per level, the projected streams are joined along
/// the patch axis (`2P` rows) and encoded by one self-attention stack.
pub fn baseline_forward(
    g: &mut Graph,
    x_img: TensorId,
    x_lm: TensorId,
    m: &BoundModel,
    ctx: &mut ForwardCtx<'_>,
) -> Result<TensorId> {
    let img_levels = project_levels(g, x_img, &projections(&m.levels, Stream::Image)?)?;
    let lm_levels = project_levels(g, x_lm, &projections(&m.levels, Stream::Landmark)?)?;
    let patches = g.shape(x_img)[g.shape(x_img).len() - 2];
    let mut pooled = Vec::with_capacity(2 * m.levels.len());
    for (l, level) in m.levels.iter().enumerate() {
        ctx.set_level(l);
        let fused = g.concat_patches(img_levels[l], lm_levels[l])?;
        let out = vanilla_stack(g, fused, shared_blocks(level)?, Stream::Fused, ctx)?;
        let img = g.slice_patches(out, 0, patches)?;
        let lm = g.slice_patches(out, patches, patches)?;
        pooled.push(g.mean_pool_patches(img)?);
        pooled.push(g.mean_pool_patches(lm)?);
    }
    head_forward(g, &pooled, &m.head)
}

/// One stream only: projection, self-attention stack, pooling, head.
pub fn single_stream_forward(
    g: &mut Graph,
    x: TensorId,
    stream: Stream,
    m: &BoundModel,
    ctx: &mut ForwardCtx<'_>,
) -> Result<TensorId> {
    let levels = project_levels(g, x, &projections(&m.levels, stream)?)?;
    let mut pooled = Vec::with_capacity(m.levels.len());
    for (l, level) in m.levels.iter().enumerate() {
        ctx.set_level(l);
        let out = vanilla_stack(g, levels[l], shared_blocks(level)?, stream, ctx)?;
        pooled.push(g.mean_pool_patches(out)?);
    }
    head_forward(g, &pooled, &m.head)
}

/// Concatenates pooled features and applies the MLP head.
pub fn head_forward(g: &mut Graph, pooled: &[TensorId], head: &MlpParams) -> Result<TensorId> {
    let features = g.concat_last(pooled)?;
    head.forward(g, features)
}

/// Logits and the parameter handles they were computed from.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: TensorId,
    pub params: BoundParams,
}

/// A configuration together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

impl Model {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let specs = config.layout()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = ParamStore::init(&specs, &mut rng)?;
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking them against the layout.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        params.check_layout(&config.layout()?)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    fn check_input(&self, g: &Graph, x: TensorId) -> Result<()> {
        let s = g.shape(x);
        let expected = [self.config.patches, self.config.base_dim];
        if s.len() < 2 || s.len() > 3 || s[s.len() - 2..] != expected {
            return Err(Error::shape("model input", s, &expected));
        }
        Ok(())
    }

    /// Builds the forward pass on `g`. Parameters become leaves that require
    /// gradients when `trainable` is set.
    pub fn forward(
        &self,
        g: &mut Graph,
        x_img: TensorId,
        x_lm: TensorId,
        ctx: &mut ForwardCtx<'_>,
        trainable: bool,
    ) -> Result<Forward> {
        self.check_input(g, x_img)?;
        self.check_input(g, x_lm)?;
        if g.shape(x_img) != g.shape(x_lm) {
            return Err(Error::shape("model input", g.shape(x_img), g.shape(x_lm)));
        }
        let unbatched = g.shape(x_img).len() == 2;
        let (x_img, x_lm) = if unbatched {
            let shape = [1, self.config.patches, self.config.base_dim];
            (g.reshape(x_img, &shape)?, g.reshape(x_lm, &shape)?)
        } else {
            (x_img, x_lm)
        };
        let mut binder = Binder::new(g, &self.params, trainable);
        let bound = BoundModel::bind(&mut binder, &self.config)?;
        let params = binder.finish();
        let logits = match self.config.variant.topology() {
            Topology::SingleStream(Stream::Image) => {
                single_stream_forward(g, x_img, Stream::Image, &bound, ctx)?
            }
            Topology::SingleStream(_) => single_stream_forward(g, x_lm, Stream::Landmark, &bound, ctx)?,
            Topology::Concatenated => baseline_forward(g, x_img, x_lm, &bound, ctx)?,
            Topology::CrossFusion => poster_forward(g, x_img, x_lm, &bound, ctx)?,
        };
        let logits = if unbatched {
            g.reshape(logits, &[self.config.num_classes])?
        } else {
            logits
        };
        Ok(Forward { logits, params })
    }

    /// Eval-mode logits for plain tensors (`[P, D]` or `[B, P, D]`).
    pub fn logits(&self, x_img: &Tensor, x_lm: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xi = g.constant(x_img.clone())?;
        let xl = g.constant(x_lm.clone())?;
        let out = self.forward(&mut g, xi, xl, &mut ForwardCtx::eval(), false)?;
        Ok(g.value(out.logits).clone())
    }
}

/// Learnable-scalar counts, computed in closed form from the configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    /// Level projections, summed over streams.
    pub projections: Vec<usize>,
    /// `blocks[level][block]`, summed over streams.
    pub blocks: Vec<Vec<usize>>,
    pub head: usize,
}

impl ParamCount {
    pub fn block_total(&self) -> usize {
        self.blocks.iter().flatten().sum()
    }

    pub fn projection_total(&self) -> usize {
        self.projections.iter().sum()
    }

    pub fn total(&self) -> usize {
        self.projection_total() + self.block_total() + self.head
    }

    /// `(component, count)` rows for display.
    pub fn rows(&self) -> Vec<(String, usize)> {
        let mut rows = Vec::new();
        for (l, (p, blocks)) in self.projections.iter().zip(&self.blocks).enumerate() {
            rows.push((format!("level{l}.proj"), *p));
            for (k, n) in blocks.iter().enumerate() {
                rows.push((format!("level{l}.block{k}"), *n));
            }
        }
        rows.push(("head".into(), self.head));
        rows.push(("blocks_total".into(), self.block_total()));
        rows.push(("total".into(), self.total()));
        rows
    }
}

/// Scalars in one attention layer of width `d`.
pub fn msa_param_count(d: usize, qkv_bias: bool) -> usize {
    4 * d * d + d + if qkv_bias { 3 * d } else { 0 }
}

/// Scalars in one single-stream encoder block.
pub fn block_param_count(opts: &BlockOptions) -> usize {
    let d = opts.dim;
    let hidden = opts.mlp_ratio * d;
    let norms = if opts.pre_norm { 2 } else { 1 };
    msa_param_count(d, opts.qkv_bias) + norms * 2 * d + (d * hidden + hidden) + (hidden * d + d)
}

pub fn count_params(cfg: &ModelConfig) -> Result<ParamCount> {
    cfg.validate()?;
    let streams_in_block = match cfg.variant.topology() {
        Topology::CrossFusion => 2,
        _ => 1,
    };
    let projected = cfg.variant.pooled_streams();
    let mut projections = Vec::new();
    let mut blocks = Vec::new();
    for &dim in cfg.level_dims() {
        projections.push(projected * (cfg.base_dim * dim + dim));
        let per_block = streams_in_block * block_param_count(&cfg.block_options(dim));
        blocks.push(vec![per_block; cfg.depth]);
    }
    let (f, h, n) = (cfg.feature_width(), cfg.head_hidden(), cfg.num_classes);
    Ok(ParamCount {
        projections,
        blocks,
        head: f * h + h + h * n + n,
    })
}

/// Formula used by [`estimate_flops`], for display.
pub const FLOP_FORMULA: &str = "MACs per sample: linear map over T rows = T*Din*Dout; \
attention mixing = 2*h*T^2*d_head (scores + weighted values); \
block of width D over T tokens = 4*T*D^2 (q,k,v,out) + 2*T^2*D + 2*r*T*D^2 (mlp, ratio r); \
T = P per stream, 2P for concatenated variants; \
norms, activations, softmax and pooling are not counted";

/// Multiply-accumulates of a linear map over `rows` rows.
pub fn linear_macs(rows: usize, din: usize, dout: usize) -> u64 {
    (rows * din * dout) as u64
}

/// Score and value products of attention over `tokens` rows of width `dim`
/// split into `heads` heads.
pub fn attention_macs(tokens: usize, dim: usize, heads: usize) -> u64 {
    let d_head = dim / heads;
    (2 * heads * tokens * tokens * d_head) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlopCount {
    pub projections: u64,
    /// Q, K, V and output projections.
    pub attention_linear: u64,
    pub attention_mixing: u64,
    pub mlp: u64,
    pub head: u64,
}

impl FlopCount {
    pub fn blocks(&self) -> u64 {
        self.attention_linear + self.attention_mixing + self.mlp
    }

    pub fn total(&self) -> u64 {
        self.projections + self.blocks() + self.head
    }
}

/// Analytic multiply-accumulate count of one forward sample.
pub fn estimate_flops(cfg: &ModelConfig) -> Result<FlopCount> {
    cfg.validate()?;
    let p = cfg.patches;
    let (sequences, tokens) = match cfg.variant.topology() {
        Topology::SingleStream(_) => (1, p),
        Topology::Concatenated => (1, 2 * p),
        Topology::CrossFusion => (2, p),
    };
    let mut f = FlopCount::default();
    for &dim in cfg.level_dims() {
        let heads = cfg.heads_for(dim);
        let hidden = cfg.mlp_ratio * dim;
        f.projections += cfg.variant.pooled_streams() as u64 * linear_macs(p, cfg.base_dim, dim);
        let per_seq_linear = 4 * linear_macs(tokens, dim, dim);
        let per_seq_mix = attention_macs(tokens, dim, heads);
        let per_seq_mlp = linear_macs(tokens, dim, hidden) + linear_macs(tokens, hidden, dim);
        let blocks = (cfg.depth * sequences) as u64;
        f.attention_linear += blocks * per_seq_linear;
        f.attention_mixing += blocks * per_seq_mix;
        f.mlp += blocks * per_seq_mlp;
    }
    f.head = linear_macs(1, cfg.feature_width(), cfg.head_hidden())
        + linear_macs(1, cfg.head_hidden(), cfg.num_classes);
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.as_str()));
        }
        assert!("posterior".parse::<Variant>().is_err());
    }

    #[test]
    fn default_heads_follow_width() {
        let cfg = ModelConfig::default();
        let heads: Vec<usize> = cfg.pyramid_dims.iter().map(|&d| cfg.heads_for(d)).collect();
        assert_eq!(heads, vec![8, 4, 2]);
        cfg.validate().unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            ModelConfig {
                pyramid_dims: vec![16, 32],
                ..ModelConfig::desk()
            },
            ModelConfig {
                swap_depth: Some(3),
                ..ModelConfig::desk()
            },
            ModelConfig {
                pyramid_dims: vec![25],
                head_dim: 8,
                ..ModelConfig::desk()
            },
            ModelConfig {
                num_classes: 1,
                ..ModelConfig::desk()
            },
            ModelConfig {
                drop_path: 1.0,
                ..ModelConfig::desk()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn single_level_variants_use_first_width() {
        let cfg = ModelConfig::desk().with_variant(Variant::BaselineCrossfusion);
        assert_eq!(cfg.level_dims(), &[32]);
        assert_eq!(cfg.feature_width(), 64);
        let cfg = ModelConfig::desk().with_variant(Variant::ImageOnly);
        assert_eq!(cfg.feature_width(), 32);
        let cfg = ModelConfig::desk();
        assert_eq!(cfg.feature_width(), 2 * (32 + 16 + 8));
    }

    #[test]
    fn logits_have_class_count() {
        for n in [7, 8] {
            for v in Variant::ALL {
                let cfg = ModelConfig {
                    num_classes: n,
                    ..ModelConfig::desk().with_variant(v)
                };
                let model = Model::new(cfg).unwrap();
                let x = Tensor::ones([8, 32]);
                let out = model.logits(&x, &x).unwrap();
                assert_eq!(out.shape(), &[n]);
                assert!(out.is_finite());
            }
        }
    }

    #[test]
    fn input_shape_is_checked() {
        let model = Model::new(ModelConfig::desk()).unwrap();
        let good = Tensor::ones([8, 32]);
        let bad = Tensor::ones([8, 16]);
        assert!(matches!(model.logits(&good, &bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn linear_flops_hand_count() {
        assert_eq!(linear_macs(68, 512, 256), 68 * 512 * 256);
    }
}
