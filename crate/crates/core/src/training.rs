//! Label-smoothing cross-entropy, Adam, the training loop and evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::context::ForwardCtx;
use crate::data::{FeatureBatch, FeatureProvider};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport};
use crate::graph::{Graph, TensorId};
use crate::metrics::EvalReport;
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Smoothed targets `q = (1 - eps) · onehot + eps / N`, shape `[B, N]`.
pub fn smoothed_targets(labels: &[usize], classes: usize, eps: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::InvalidArgument(format!("label smoothing must be in [0, 1), got {eps}")));
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut q = vec![eps / classes as f64; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        q[i * classes + l] += 1.0 - eps;
    }
    Tensor::new([labels.len(), classes], q)
}

/// Mean over the batch of `-Σ_c q_c · log softmax(logits)_c`.
pub fn label_smoothing_ce(g: &mut Graph, logits: TensorId, labels: &[usize], eps: f64) -> Result<TensorId> {
    let classes = g.value(logits).last_dim();
    let targets = smoothed_targets(labels, classes, eps)?;
    g.soft_cross_entropy(logits, &targets)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter, plus the step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, grad) in grads {
        let p = params.get(name)?;
        if p.shape() != grad.shape() {
            return Err(Error::ParamShape {
                name: name.clone(),
                expected: p.shape().to_vec(),
                found: grad.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, grad) in grads {
        let p = params.get_mut(name)?;
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
        for (((w, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Optimizer steps; batches are drawn from a fresh shuffle each epoch.
    pub steps: usize,
    pub label_smoothing: f64,
    pub adam: AdamConfig,
    /// Seed for batch order and drop path.
    pub seed: u64,
    /// Write a checkpoint every this many steps (in addition to the final one).
    pub checkpoint_every: Option<usize>,
    /// Record elapsed wall-clock seconds in the log. Off by default so that
    /// logs are reproducible byte for byte.
    pub wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            learning_rate: 4e-5,
            steps: 1000,
            label_smoothing: 0.1,
            adam: AdamConfig::default(),
            seed: 0,
            checkpoint_every: None,
            wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing must be in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    /// `step,loss,lr,seconds` CSV.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "loss", "lr", "seconds"])?;
        for r in &self.rows {
            w.write_record([
                r.step.to_string(),
                r.loss.to_string(),
                r.lr.to_string(),
                r.seconds.to_string(),
            ])?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::InvalidArgument(format!("csv flush failed: {}", e.error())))?;
        String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(e.to_string()))
    }
}

/// Drop-path stream of a training run, distinct from the batch-order stream.
const DROP_STREAM: u64 = 0x0d70_9a7d;

/// Loss and gradients of one batch.
pub fn batch_gradients(
    model: &Model,
    batch: &FeatureBatch,
    eps: f64,
    ctx: &mut ForwardCtx<'_>,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut g = Graph::new();
    let xi = g.constant(batch.img.clone())?;
    let xl = g.constant(batch.lm.clone())?;
    let fwd = model.forward(&mut g, xi, xl, ctx, true)?;
    let loss = label_smoothing_ce(&mut g, fwd.logits, &batch.labels, eps)?;
    g.backward(loss)?;
    Ok((g.value(loss).item()?, fwd.params.grads(&g)))
}

/// Loss of one batch in eval mode.
pub fn batch_loss(model: &Model, batch: &FeatureBatch, eps: f64) -> Result<f64> {
    let mut g = Graph::new();
    let xi = g.constant(batch.img.clone())?;
    let xl = g.constant(batch.lm.clone())?;
    let fwd = model.forward(&mut g, xi, xl, &mut ForwardCtx::eval(), false)?;
    let loss = label_smoothing_ce(&mut g, fwd.logits, &batch.labels, eps)?;
    g.value(loss).item()
}

/// Trains `model` in place. When `checkpoint_dir` is given, writes
/// `step_<k>.pckpt` at the configured cadence and `final.pckpt` at the end.
pub fn train_loop(
    model: &mut Model,
    cfg: &TrainConfig,
    data: &dyn FeatureProvider,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mc = model.config();
    if data.patches() != mc.patches || data.dim() != mc.base_dim || data.num_classes() != mc.num_classes {
        return Err(Error::Config(format!(
            "data is P={} D={} N={}, model expects P={} D={} N={}",
            data.patches(),
            data.dim(),
            data.num_classes(),
            mc.patches,
            mc.base_dim,
            mc.num_classes
        )));
    }
    if let Some(dir) = checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DROP_STREAM);
    let mut state = OptimizerState::default();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let batch = cfg.batch_size.min(data.len());
    let start = Instant::now();
    let mut log = TrainLog::default();
    for step in 1..=cfg.steps {
        if cursor + batch > order.len() {
            order = (0..data.len()).collect();
            order.shuffle(&mut order_rng);
            cursor = 0;
        }
        let fb = data.batch(&order[cursor..cursor + batch])?;
        cursor += batch;
        let mut ctx = ForwardCtx::train(&mut drop_rng);
        let (loss, grads) = match batch_gradients(model, &fb, cfg.label_smoothing, &mut ctx) {
            Err(Error::NonFinite { op }) => {
                log::error!("step {step}: non-finite value produced by {op}");
                return Err(Error::NonFiniteLoss { step, loss: f64::NAN });
            }
            other => other?,
        };
        if !loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        adam_step(model.params_mut(), &grads, &mut state, cfg.learning_rate, &cfg.adam)?;
        let seconds = if cfg.wall_clock {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        };
        log.rows.push(LogRow {
            step,
            loss,
            lr: cfg.learning_rate,
            seconds,
        });
        if let (Some(dir), Some(every)) = (checkpoint_dir, cfg.checkpoint_every) {
            if step % every == 0 {
                checkpoint::save(dir.join(format!("step_{step:06}.pckpt")), model.params())?;
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        checkpoint::save(dir.join("final.pckpt"), model.params())?;
    }
    Ok(log)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Eval-mode predictions in dataset order. Batches run in parallel.
pub fn predict(model: &Model, data: &dyn FeatureProviderSync, batch_size: usize) -> Result<Vec<usize>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let batch_size = batch_size.max(1);
    let chunks: Vec<Vec<usize>> = (0..data.len())
        .collect::<Vec<_>>()
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect();
    let parts = chunks
        .par_iter()
        .map(|idx| -> Result<Vec<usize>> {
            let b = data.batch(idx)?;
            let logits = model.logits(&b.img, &b.lm)?;
            let n = logits.last_dim();
            Ok(logits.data().chunks(n).map(argmax).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.concat())
}

/// A provider that can be shared across evaluation threads.
pub trait FeatureProviderSync: FeatureProvider + Sync {}
impl<T: FeatureProvider + Sync> FeatureProviderSync for T {}

pub fn evaluate(model: &Model, data: &dyn FeatureProviderSync, batch_size: usize) -> Result<EvalReport> {
    if data.num_classes() != model.config().num_classes {
        return Err(Error::Config(format!(
            "data has {} classes, model predicts {}",
            data.num_classes(),
            model.config().num_classes
        )));
    }
    let pred = predict(model, data, batch_size)?;
    EvalReport::from_predictions(data.labels(), &pred, data.num_classes())
}

/// Finite-difference check of the training loss w.r.t. every parameter of
/// `model` on one batch, in eval mode.
pub fn model_gradcheck(
    model: &Model,
    batch: &FeatureBatch,
    eps: f64,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let (_, grads) = batch_gradients(model, batch, eps, &mut ForwardCtx::eval())?;
    let params: Vec<(String, Tensor)> = model
        .params()
        .iter()
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    let analytic: Vec<Tensor> = params.iter().map(|(n, _)| grads[n].clone()).collect();
    let config = model.config().clone();
    let f = |vals: &[Tensor]| -> Result<f64> {
        let mut store = ParamStore::new();
        for ((name, _), t) in params.iter().zip(vals) {
            store.insert(name.clone(), t.clone());
        }
        let m = Model::from_params(config.clone(), store)?;
        batch_loss(&m, batch, eps)
    };
    finite_diff_check(f, &params, &analytic, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_n() {
        for eps in [0.0, 0.1, 0.5] {
            let mut g = Graph::new();
            let z = g.constant(Tensor::full([3, 7], 0.4)).unwrap();
            let l = label_smoothing_ce(&mut g, z, &[0, 3, 6], eps).unwrap();
            assert!((g.value(l).item().unwrap() - 7f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_logits_drive_loss_to_zero() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 40.0] {
            let mut g = Graph::new();
            let z = g.constant(Tensor::new([1, 3], vec![margin, 0.0, 0.0]).unwrap()).unwrap();
            let l = label_smoothing_ce(&mut g, z, &[0], 0.0).unwrap();
            let v = g.value(l).item().unwrap();
            assert!(v < prev && v >= 0.0);
            prev = v;
        }
        assert!(prev < 1e-15);
    }

    #[test]
    fn label_out_of_range() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros([1, 3])).unwrap();
        assert!(matches!(
            label_smoothing_ce(&mut g, z, &[3], 0.1),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn adam_closed_forms() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::new([2], vec![1.0, -2.0]).unwrap());
        let mut state = OptimizerState::default();
        let zero: BTreeMap<_, _> = [("w".to_string(), Tensor::zeros([2]))].into();
        adam_step(&mut params, &zero, &mut state, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(params.get("w").unwrap().data(), &[1.0, -2.0]);

        let mut params = ParamStore::new();
        params.insert("w", Tensor::scalar(0.5));
        let mut state = OptimizerState::default();
        let g: BTreeMap<_, _> = [("w".to_string(), Tensor::scalar(-3.0))].into();
        adam_step(&mut params, &g, &mut state, 0.01, &AdamConfig::default()).unwrap();
        let moved = params.get("w").unwrap().item().unwrap() - 0.5;
        assert!((moved - 0.01).abs() < 1e-8, "{moved}");
    }

    #[test]
    fn adam_decreases_quadratic() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap());
        let mut state = OptimizerState::default();
        let loss = |p: &ParamStore| p.get("w").unwrap().data().iter().map(|v| v * v).sum::<f64>();
        let mut prev = loss(&params);
        for _ in 0..10 {
            let w = params.get("w").unwrap();
            let g: BTreeMap<_, _> = [("w".to_string(), w.map(|v| 2.0 * v))].into();
            adam_step(&mut params, &g, &mut state, 0.05, &AdamConfig::default()).unwrap();
            let now = loss(&params);
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn argmax_ties_pick_first() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[-1.0]), 0);
    }
}
