//! Per-forward-pass state: train/eval mode, the drop-path RNG, and optional
//! attention capture for relevance analysis.

use rand::RngCore;

use crate::attention::{AttentionTap, Stream};
use crate::error::Result;
use crate::graph::{Graph, TensorId};
use crate::tensor::Tensor;

/// Where an attention map was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionSite {
    pub level: usize,
    pub block: usize,
    pub stream: Stream,
    pub weights: TensorId,
}

/// Adds `delta` to one entry of the `site`-th attention map produced in a
/// forward pass. Used to differentiate outputs w.r.t. attention weights
/// numerically.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPerturbation {
    pub site: usize,
    pub index: Vec<usize>,
    pub delta: f64,
}

pub struct ForwardCtx<'r> {
    training: bool,
    rng: Option<&'r mut dyn RngCore>,
    capture: bool,
    perturbation: Option<AttentionPerturbation>,
    level: usize,
    block: usize,
    tapped: usize,
    sites: Vec<AttentionSite>,
    branches_sampled: u64,
    branches_dropped: u64,
}

impl<'r> ForwardCtx<'r> {
    /// Inference mode: drop path disabled, fully deterministic.
    pub fn eval() -> Self {
        Self {
            training: false,
            rng: None,
            capture: false,
            perturbation: None,
            level: 0,
            block: 0,
            tapped: 0,
            sites: Vec::new(),
            branches_sampled: 0,
            branches_dropped: 0,
        }
    }

    pub fn train(rng: &'r mut dyn RngCore) -> Self {
        Self {
            training: true,
            rng: Some(rng),
            ..Self::eval()
        }
    }

    /// Retain every attention map (and its gradient) produced in this pass.
    pub fn with_capture(mut self) -> Self {
        self.capture = true;
        self
    }

    pub fn with_perturbation(mut self, p: AttentionPerturbation) -> Self {
        self.perturbation = Some(p);
        self
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn capturing(&self) -> bool {
        self.capture
    }

    pub(crate) fn rng(&mut self) -> Option<&mut (dyn RngCore + 'r)> {
        self.rng.as_deref_mut()
    }

    pub fn set_level(&mut self, level: usize) {
        self.level = level;
    }

    pub fn set_block(&mut self, block: usize) {
        self.block = block;
    }

    pub fn sites(&self) -> &[AttentionSite] {
        &self.sites
    }

    /// Drop-path branches sampled / dropped so far in training mode.
    pub fn drop_counts(&self) -> (u64, u64) {
        (self.branches_sampled, self.branches_dropped)
    }

    pub(crate) fn record_drops(&mut self, sampled: u64, dropped: u64) {
        self.branches_sampled += sampled;
        self.branches_dropped += dropped;
    }
}

impl AttentionTap for ForwardCtx<'_> {
    fn tap(&mut self, g: &mut Graph, stream: Stream, weights: TensorId) -> Result<TensorId> {
        let site = self.tapped;
        self.tapped += 1;
        let mut weights = weights;
        if let Some(p) = self.perturbation.as_ref().filter(|p| p.site == site) {
            let mut offset = Tensor::zeros(g.shape(weights).to_vec());
            let at = offset.offset(&p.index)?;
            offset.data_mut()[at] = p.delta;
            let offset = g.constant(offset)?;
            weights = g.add(weights, offset)?;
        }
        if self.capture {
            g.retain_grad(weights);
            self.sites.push(AttentionSite {
                level: self.level,
                block: self.block,
                stream,
                weights,
            });
        }
        Ok(weights)
    }
}
