//! Central finite-difference gradient checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Pass threshold on the per-parameter relative error.
    pub tol: f64,
    /// Gradient magnitudes below this are compared on an absolute scale.
    pub floor: f64,
    /// Check at most this many randomly chosen entries per parameter.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-4,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_abs_error: f64,
    /// `max |analytic - numeric| / max(max|analytic|, max|numeric|, floor)`.
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, |p| p.rel_error)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.rel_error < self.tol)
    }
}

/// Compares `analytic` gradients against central differences of `f`.
///
/// `f` must be deterministic. The analytic side can come from anywhere, which
/// lets callers validate hand-written adjoints as well as the tape.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &[(String, Tensor)],
    analytic: &[Tensor],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::InvalidArgument(format!(
            "{} params but {} gradients",
            params.len(),
            analytic.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut report = Vec::with_capacity(params.len());
    for (pi, ((name, p), grad)) in params.iter().zip(analytic).enumerate() {
        if grad.shape() != p.shape() {
            return Err(Error::ParamShape {
                name: name.clone(),
                expected: p.shape().to_vec(),
                found: grad.shape().to_vec(),
            });
        }
        let entries: Vec<usize> = match cfg.max_entries {
            Some(k) if k < p.numel() => sample(&mut rng, p.numel(), k).into_vec(),
            _ => (0..p.numel()).collect(),
        };
        let mut max_abs_error: f64 = 0.0;
        let mut scale: f64 = cfg.floor;
        for &i in &entries {
            let orig = p.data()[i];
            values[pi].data_mut()[i] = orig + cfg.h;
            let plus = f(&values)?;
            values[pi].data_mut()[i] = orig - cfg.h;
            let minus = f(&values)?;
            values[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.h);
            let a = grad.data()[i];
            max_abs_error = max_abs_error.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        report.push(ParamCheck {
            name: name.clone(),
            checked: entries.len(),
            max_abs_error,
            rel_error: max_abs_error / scale,
        });
    }
    Ok(GradCheckReport {
        params: report,
        tol: cfg.tol,
    })
}

/// Gradient check of a scalar built on the tape from `params`.
pub fn check_graph<F>(
    params: &[(String, Tensor)],
    build: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[TensorId]) -> Result<TensorId>,
{
    let mut g = Graph::new();
    let ids = params
        .iter()
        .map(|(_, t)| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut g, &ids)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(params)
        .map(|(&id, (_, t))| {
            g.grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids = vals
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut g, &ids)?;
        g.value(out).item()
    };
    finite_diff_check(eval, params, &analytic, cfg)
}
