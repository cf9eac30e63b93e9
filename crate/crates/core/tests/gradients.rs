//! Central finite-difference checks of every differentiable op and of whole
//! blocks, stacks and models.

mod common;

use common::{random_store, rng};
use poster_core::attention::{cross_fusion_mhsa, mhsa, CrossFusionMsaParams, MsaParams, Stream};
use poster_core::context::ForwardCtx;
use poster_core::data::FeatureBatch;
use poster_core::encoder::{
    cross_fusion_block, parallel_block, stack_forward, vanilla_block, BlockOptions, BlockParams,
    StackParams, TwoStreamBlockParams, LN_EPS,
};
use poster_core::gradcheck::{check_graph, finite_diff_check, GradCheckConfig, GradCheckReport};
use poster_core::model::{Linear, Model, ModelConfig, Variant};
use poster_core::params::{Binder, ParamSpec, ParamStore};
use poster_core::training::{label_smoothing_ce, model_gradcheck};
use poster_core::{Graph, Result, Tensor, TensorId};

fn gc() -> GradCheckConfig {
    GradCheckConfig::default()
}

fn assert_passed(what: &str, r: &GradCheckReport) {
    assert!(
        r.passed(),
        "{what}: worst {:?} (tol {})",
        r.worst(),
        r.tol
    );
}

/// `sum(y ⊙ c)` with a fixed random `c`, so every output entry matters.
fn probe(g: &mut Graph, y: TensorId, seed: u64) -> Result<TensorId> {
    let c = Tensor::randn(g.shape(y).to_vec(), 1.0, &mut rng(seed));
    let c = g.constant(c)?;
    let m = g.mul(y, c)?;
    g.sum(m)
}

fn named(ts: Vec<Tensor>) -> Vec<(String, Tensor)> {
    ts.into_iter().enumerate().map(|(i, t)| (format!("arg{i}"), t)).collect()
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, &mut rng(seed))
}

fn check_op(name: &str, inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[TensorId]) -> Result<TensorId>) {
    let report = check_graph(
        &named(inputs),
        |g, ids| {
            let y = f(g, ids)?;
            probe(g, y, 99)
        },
        &gc(),
    )
    .unwrap();
    assert_passed(name, &report);
}

#[test]
fn matmul_family() {
    check_op("matmul", vec![randn(&[2, 3, 4], 1), randn(&[4, 5], 2)], |g, x| g.matmul(x[0], x[1]));
    check_op("batched matmul", vec![randn(&[2, 3, 4], 1), randn(&[2, 4, 2], 2)], |g, x| {
        g.matmul(x[0], x[1])
    });
    check_op("matmul_t", vec![randn(&[2, 3, 4], 3), randn(&[2, 5, 4], 4)], |g, x| {
        g.matmul_t(x[0], x[1])
    });
    check_op("linear", vec![randn(&[2, 3, 4], 5), randn(&[4, 3], 6), randn(&[3], 7)], |g, x| {
        g.linear(x[0], x[1], Some(x[2]))
    });
}

#[test]
fn elementwise() {
    check_op("add", vec![randn(&[2, 3], 1), randn(&[2, 3], 2)], |g, x| g.add(x[0], x[1]));
    check_op("add_bias", vec![randn(&[2, 3, 4], 1), randn(&[4], 2)], |g, x| g.add_bias(x[0], x[1]));
    check_op("mul", vec![randn(&[2, 3], 3), randn(&[2, 3], 4)], |g, x| g.mul(x[0], x[1]));
    check_op("scale", vec![randn(&[2, 3], 5)], |g, x| g.scale(x[0], -0.7));
    check_op("gelu", vec![randn(&[3, 4], 6)], |g, x| g.gelu(x[0]));
    check_op("sample_scale", vec![randn(&[3, 2, 2], 7)], |g, x| g.sample_scale(x[0], &[0.0, 1.5, 2.0]));
}

#[test]
fn reductions_and_normalizers() {
    check_op("sum", vec![randn(&[2, 3], 1)], |g, x| g.sum(x[0]));
    check_op("softmax_rows", vec![randn(&[2, 3, 5], 2)], |g, x| g.softmax_rows(x[0]));
    check_op(
        "layer_norm",
        vec![randn(&[2, 3, 6], 3), randn(&[6], 4), randn(&[6], 5)],
        |g, x| g.layer_norm(x[0], x[1], x[2], LN_EPS),
    );
    check_op("mean_pool_patches", vec![randn(&[2, 4, 3], 6)], |g, x| g.mean_pool_patches(x[0]));
    check_op("pick", vec![randn(&[2, 3], 7)], |g, x| g.pick(x[0], &[1, 2]));
    let targets = Tensor::new([2, 3], vec![0.8, 0.1, 0.1, 0.2, 0.2, 0.6]).unwrap();
    check_op("soft_cross_entropy", vec![randn(&[2, 3], 8)], move |g, x| {
        g.soft_cross_entropy(x[0], &targets)
    });
    check_op("label_smoothing_ce", vec![randn(&[4, 5], 9)], |g, x| {
        label_smoothing_ce(g, x[0], &[0, 4, 2, 2], 0.1)
    });
}

#[test]
fn structural() {
    check_op("concat_patches", vec![randn(&[2, 3, 4], 1), randn(&[2, 2, 4], 2)], |g, x| {
        g.concat_patches(x[0], x[1])
    });
    check_op(
        "concat_last",
        vec![randn(&[2, 3], 3), randn(&[2, 1], 4), randn(&[2, 2], 5)],
        |g, x| g.concat_last(x),
    );
    check_op("slice_patches", vec![randn(&[2, 5, 3], 6)], |g, x| g.slice_patches(x[0], 1, 3));
    check_op("reshape", vec![randn(&[2, 6], 7)], |g, x| g.reshape(x[0], &[3, 4]));
    check_op("split_heads", vec![randn(&[2, 3, 6], 8)], |g, x| g.split_heads(x[0], 3));
    check_op("merge_heads", vec![randn(&[2, 3, 4, 2], 9)], |g, x| g.merge_heads(x[0]));
}

fn opts(dim: usize, heads: usize, pre_norm: bool) -> BlockOptions {
    BlockOptions {
        dim,
        heads,
        mlp_ratio: 2,
        qkv_bias: true,
        pre_norm,
        drop_path: 0.01,
    }
}

/// Checks gradients w.r.t. a module's parameters (bound by `bind`) and its
/// `n_inputs` inputs of shape `[2, 3, 4]`.
fn module_check<P>(
    what: &str,
    specs: &[ParamSpec],
    n_inputs: usize,
    bind: impl Fn(&mut Binder<'_>) -> Result<P>,
    apply: impl Fn(&mut Graph, &P, &[TensorId]) -> Result<TensorId>,
) {
    let store = random_store(specs, 0.4, 23);
    let n_params = store.len();
    let mut args: Vec<(String, Tensor)> = store.iter().map(|(n, t)| (n.clone(), t.clone())).collect();
    args.extend(named((0..n_inputs).map(|i| randn(&[2, 3, 4], 40 + i as u64)).collect()));

    let run = |vals: &[Tensor], trainable: bool| -> Result<(Graph, TensorId, Vec<TensorId>)> {
        let mut s = ParamStore::new();
        for ((n, _), t) in args.iter().zip(vals).take(n_params) {
            s.insert(n.clone(), t.clone());
        }
        let mut g = Graph::new();
        let mut b = Binder::new(&mut g, &s, trainable);
        let p = bind(&mut b)?;
        let bound = b.finish();
        let xs = vals[n_params..]
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect::<Result<Vec<_>>>()?;
        let y = apply(&mut g, &p, &xs)?;
        let loss = probe(&mut g, y, 5)?;
        let mut ids: Vec<TensorId> = args[..n_params]
            .iter()
            .map(|(n, _)| {
                bound
                    .ids()
                    .iter()
                    .find(|(m, _)| m == n)
                    .map(|(_, id)| *id)
                    .expect("every parameter is bound")
            })
            .collect();
        ids.extend(xs);
        Ok((g, loss, ids))
    };

    let values: Vec<Tensor> = args.iter().map(|(_, t)| t.clone()).collect();
    let (mut g, loss, ids) = run(&values, true).unwrap();
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor> = ids
        .iter()
        .map(|&id| g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(id).to_vec())))
        .collect();
    let report = finite_diff_check(
        |vals| {
            let (g, loss, _) = run(vals, false)?;
            g.value(loss).item()
        },
        &args,
        &analytic,
        &gc(),
    )
    .unwrap();
    assert_passed(what, &report);
}

fn pooled_pair(g: &mut Graph, a: TensorId, b: TensorId) -> Result<TensorId> {
    g.concat_patches(a, b)
}

#[test]
fn attention_layers() {
    module_check(
        "mhsa",
        &MsaParams::layout("a", 4, true),
        1,
        |b| MsaParams::bind(b, "a", 2, true),
        |g, p, x| Ok(mhsa(g, x[0], p)?.output),
    );
    let mut specs = MsaParams::layout("img", 4, false);
    specs.extend(MsaParams::layout("lm", 4, false));
    module_check(
        "cross_fusion_mhsa",
        &specs,
        2,
        |b| {
            Ok(CrossFusionMsaParams {
                img: MsaParams::bind(b, "img", 2, false)?,
                lm: MsaParams::bind(b, "lm", 2, false)?,
            })
        },
        |g, p, x| {
            let (a, c) = cross_fusion_mhsa(g, x[0], x[1], p)?;
            pooled_pair(g, a.output, c.output)
        },
    );
}

#[test]
fn encoder_blocks() {
    for pre_norm in [false, true] {
        let o = opts(4, 2, pre_norm);
        module_check(
            "vanilla_block",
            &BlockParams::layout("b", &o),
            1,
            |b| BlockParams::bind(b, "b", &o),
            |g, p, x| vanilla_block(g, x[0], p, Stream::Image, &mut ForwardCtx::eval()),
        );
        let two = TwoStreamBlockParams::layout("b", &o);
        module_check(
            "cross_fusion_block",
            &two,
            2,
            |b| TwoStreamBlockParams::bind(b, "b", &o),
            |g, p, x| {
                let (a, c) = cross_fusion_block(g, x[0], x[1], p, &mut ForwardCtx::eval())?;
                pooled_pair(g, a, c)
            },
        );
        module_check(
            "parallel_block",
            &two,
            2,
            |b| TwoStreamBlockParams::bind(b, "b", &o),
            |g, p, x| {
                let (a, c) = parallel_block(g, x[0], x[1], p, &mut ForwardCtx::eval())?;
                pooled_pair(g, a, c)
            },
        );
    }
}

#[test]
fn depth_two_stack() {
    let o = opts(4, 2, false);
    let mut specs = TwoStreamBlockParams::layout("k0", &o);
    specs.extend(TwoStreamBlockParams::layout("k1", &o));
    for swap in [0, 1, 2] {
        module_check(
            "stack",
            &specs,
            2,
            |b| {
                let blocks = vec![
                    TwoStreamBlockParams::bind(b, "k0", &o)?,
                    TwoStreamBlockParams::bind(b, "k1", &o)?,
                ];
                StackParams::new(blocks, swap)
            },
            |g, s, x| {
                let (a, c) = stack_forward(g, x[0], x[1], s, &mut ForwardCtx::eval())?;
                pooled_pair(g, a, c)
            },
        );
    }
}

#[test]
fn level_projection() {
    module_check(
        "projection",
        &Linear::layout("proj", 4, 2),
        1,
        |b| Linear::bind(b, "proj"),
        |g, p, x| p.forward(g, x[0]),
    );
}

/// Tiny cross-fusion pyramid used for whole-model checks.
fn tiny(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        patches: 3,
        base_dim: 8,
        pyramid_dims: vec![8, 4, 2],
        depth: 2,
        head_dim: 2,
        num_classes: 3,
        ..ModelConfig::default()
    }
}

fn tiny_batch(cfg: &ModelConfig, seed: u64) -> FeatureBatch {
    let shape = [2, cfg.patches, cfg.base_dim];
    FeatureBatch {
        img: randn(&shape, seed),
        lm: randn(&shape, seed + 1),
        labels: vec![0, 2],
    }
}

#[test]
fn depth_two_cross_fusion_pyramid_model() {
    let cfg = tiny(Variant::Poster);
    let model = Model::from_params(cfg.clone(), random_store(&cfg.layout().unwrap(), 0.3, 3)).unwrap();
    let report = model_gradcheck(&model, &tiny_batch(&cfg, 8), 0.1, &gc()).unwrap();
    assert_passed("poster model", &report);
    assert_eq!(report.params.len(), model.params().len());
}

#[test]
fn every_variant_model() {
    for v in Variant::ALL {
        let cfg = tiny(v);
        let model = Model::from_params(cfg.clone(), random_store(&cfg.layout().unwrap(), 0.3, 4)).unwrap();
        let c = GradCheckConfig {
            max_entries: Some(6),
            ..gc()
        };
        let report = model_gradcheck(&model, &tiny_batch(&cfg, 9), 0.1, &c).unwrap();
        assert_passed(v.as_str(), &report);
    }
}
