//! Tape implementations against the independent loop implementations.
#![allow(clippy::needless_range_loop)]

mod common;

use common::{lookup, mat_diff, random_store, rng, samples};
use poster_core::attention::{cross_fusion_mhsa, mhsa, CrossFusionMsaParams, MsaParams, Stream};
use poster_core::context::ForwardCtx;
use poster_core::encoder::{
    cross_fusion_block, vanilla_block, BlockOptions, BlockParams, TwoStreamBlockParams, LN_EPS,
};
use poster_core::metrics::confusion_matrix;
use poster_core::params::Binder;
use poster_core::training::label_smoothing_ce;
use poster_core::{Graph, Tensor};
use poster_testkit as oracle;
use rand::Rng;

const INSTANCES: u64 = 100;
const TOL: f64 = 1e-10;

/// Random problem size: batch, patches, heads, per-head width, bias, norm placement.
struct Case {
    batch: usize,
    patches: usize,
    heads: usize,
    dim: usize,
    qkv_bias: bool,
    pre_norm: bool,
}

fn case(seed: u64) -> Case {
    let mut r = rng(seed ^ 0xC0FFEE);
    let heads = r.random_range(1..=3);
    Case {
        batch: r.random_range(1..=3),
        patches: r.random_range(1..=6),
        heads,
        dim: heads * r.random_range(1..=4),
        qkv_bias: r.random_bool(0.5),
        pre_norm: r.random_bool(0.5),
    }
}

fn opts(c: &Case) -> BlockOptions {
    BlockOptions {
        dim: c.dim,
        heads: c.heads,
        mlp_ratio: 2,
        qkv_bias: c.qkv_bias,
        pre_norm: c.pre_norm,
        drop_path: 0.01,
    }
}

fn input(c: &Case, seed: u64) -> Tensor {
    Tensor::randn([c.batch, c.patches, c.dim], 1.0, &mut rng(seed))
}

#[test]
fn mhsa_matches_loops() {
    for seed in 0..INSTANCES {
        let c = case(seed);
        let store = random_store(&MsaParams::layout("a", c.dim, c.qkv_bias), 0.5, seed);
        let x = input(&c, seed + 1000);
        let mut g = Graph::new();
        let mut b = Binder::new(&mut g, &store, false);
        let p = MsaParams::bind(&mut b, "a", c.heads, c.qkv_bias).unwrap();
        b.finish();
        let xi = g.constant(x.clone()).unwrap();
        let out = mhsa(&mut g, xi, &p).unwrap();

        let w = oracle::MsaWeights::load(&lookup(&store), "a", c.heads, c.qkv_bias);
        let got = samples(g.value(out.output));
        let weights = g.value(out.weights);
        for (s, xs) in samples(&x).iter().enumerate() {
            let (want, want_a) = oracle::mhsa(xs, &w);
            assert!(mat_diff(&got[s], &want) < TOL, "seed {seed}");
            for (h, ah) in want_a.iter().enumerate() {
                for (i, row) in ah.iter().enumerate() {
                    for (j, &v) in row.iter().enumerate() {
                        let tape = weights.get(&[s, h, i, j]).unwrap();
                        assert!((tape - v).abs() < TOL, "seed {seed} weights");
                    }
                }
            }
        }
    }
}

#[test]
fn cross_fusion_mhsa_matches_loops() {
    for seed in 0..INSTANCES {
        let c = case(seed);
        let mut specs = MsaParams::layout("img", c.dim, c.qkv_bias);
        specs.extend(MsaParams::layout("lm", c.dim, c.qkv_bias));
        let store = random_store(&specs, 0.5, seed);
        let (xi, xl) = (input(&c, seed + 1000), input(&c, seed + 2000));
        let mut g = Graph::new();
        let mut b = Binder::new(&mut g, &store, false);
        let p = CrossFusionMsaParams {
            img: MsaParams::bind(&mut b, "img", c.heads, c.qkv_bias).unwrap(),
            lm: MsaParams::bind(&mut b, "lm", c.heads, c.qkv_bias).unwrap(),
        };
        b.finish();
        let (ii, il) = (g.constant(xi.clone()).unwrap(), g.constant(xl.clone()).unwrap());
        let (oi, ol) = cross_fusion_mhsa(&mut g, ii, il, &p).unwrap();

        let lk = lookup(&store);
        let wi = oracle::MsaWeights::load(&lk, "img", c.heads, c.qkv_bias);
        let wl = oracle::MsaWeights::load(&lk, "lm", c.heads, c.qkv_bias);
        let (got_i, got_l) = (samples(g.value(oi.output)), samples(g.value(ol.output)));
        for (s, (a, b)) in samples(&xi).iter().zip(samples(&xl).iter()).enumerate() {
            let (want_i, want_l) = oracle::cross_fusion_mhsa(a, b, &wi, &wl);
            assert!(mat_diff(&got_i[s], &want_i) < TOL, "seed {seed} img");
            assert!(mat_diff(&got_l[s], &want_l) < TOL, "seed {seed} lm");
        }
    }
}

#[test]
fn vanilla_block_matches_loops() {
    for seed in 0..INSTANCES {
        let c = case(seed);
        let o = opts(&c);
        let store = random_store(&BlockParams::layout("blk", &o), 0.5, seed);
        let x = input(&c, seed + 1000);
        let mut g = Graph::new();
        let mut b = Binder::new(&mut g, &store, false);
        let p = BlockParams::bind(&mut b, "blk", &o).unwrap();
        b.finish();
        let xi = g.constant(x.clone()).unwrap();
        let out = vanilla_block(&mut g, xi, &p, Stream::Image, &mut ForwardCtx::eval()).unwrap();

        let w = oracle::BlockWeights::load(&lookup(&store), "blk", c.heads, c.qkv_bias, c.pre_norm, LN_EPS);
        let got = samples(g.value(out));
        for (s, xs) in samples(&x).iter().enumerate() {
            assert!(mat_diff(&got[s], &oracle::vanilla_block(xs, &w)) < TOL, "seed {seed}");
        }
    }
}

#[test]
fn cross_fusion_block_matches_loops() {
    for seed in 0..INSTANCES {
        let c = case(seed);
        let o = opts(&c);
        let store = random_store(&TwoStreamBlockParams::layout("blk", &o), 0.5, seed);
        let (xi, xl) = (input(&c, seed + 1000), input(&c, seed + 2000));
        let mut g = Graph::new();
        let mut b = Binder::new(&mut g, &store, false);
        let p = TwoStreamBlockParams::bind(&mut b, "blk", &o).unwrap();
        b.finish();
        let (ii, il) = (g.constant(xi.clone()).unwrap(), g.constant(xl.clone()).unwrap());
        let (oi, ol) = cross_fusion_block(&mut g, ii, il, &p, &mut ForwardCtx::eval()).unwrap();

        let lk = lookup(&store);
        let wi = oracle::BlockWeights::load(&lk, "blk.img", c.heads, c.qkv_bias, c.pre_norm, LN_EPS);
        let wl = oracle::BlockWeights::load(&lk, "blk.lm", c.heads, c.qkv_bias, c.pre_norm, LN_EPS);
        let (got_i, got_l) = (samples(g.value(oi)), samples(g.value(ol)));
        for (s, (a, b)) in samples(&xi).iter().zip(samples(&xl).iter()).enumerate() {
            let (want_i, want_l) = oracle::cross_fusion_block(a, b, &wi, &wl);
            assert!(mat_diff(&got_i[s], &want_i) < TOL, "seed {seed} img");
            assert!(mat_diff(&got_l[s], &want_l) < TOL, "seed {seed} lm");
        }
    }
}

#[test]
fn elementwise_ops_match_loops() {
    let mut r = rng(7);
    for _ in 0..20 {
        let a = Tensor::randn([3, 4], 1.0, &mut r);
        let bm = Tensor::randn([4, 5], 1.0, &mut r);
        let gamma = Tensor::randn([4], 1.0, &mut r);
        let beta = Tensor::randn([4], 1.0, &mut r);
        let mut g = Graph::new();
        let (ia, ib) = (g.constant(a.clone()).unwrap(), g.constant(bm.clone()).unwrap());
        let (ig, ibeta) = (g.constant(gamma.clone()).unwrap(), g.constant(beta.clone()).unwrap());
        let mm = g.matmul(ia, ib).unwrap();
        let sm = g.softmax_rows(ia).unwrap();
        let ln = g.layer_norm(ia, ig, ibeta, LN_EPS).unwrap();
        let ge = g.gelu(ia).unwrap();

        let am = oracle::to_mat(3, 4, a.data());
        let bmat = oracle::to_mat(4, 5, bm.data());
        assert!(mat_diff(&oracle::to_mat(3, 5, g.value(mm).data()), &oracle::matmul(&am, &bmat)) < TOL);
        for i in 0..3 {
            let want = oracle::softmax_row(&am[i]);
            let got = g.value(sm).row(i);
            assert!(got.iter().zip(&want).all(|(x, y)| (x - y).abs() < TOL));
            let want = oracle::layer_norm_row(&am[i], gamma.data(), beta.data(), LN_EPS);
            let got = g.value(ln).row(i);
            assert!(got.iter().zip(&want).all(|(x, y)| (x - y).abs() < TOL));
            let got = g.value(ge).row(i);
            assert!(got.iter().zip(&am[i]).all(|(x, v)| (x - oracle::gelu(*v)).abs() < TOL));
        }
    }
}

#[test]
fn label_smoothing_loss_matches_loop() {
    let mut r = rng(11);
    for _ in 0..50 {
        let n = r.random_range(2..=7);
        let b = r.random_range(1..=5);
        let eps = r.random_range(0.0..0.3);
        let logits = Tensor::randn([b, n], 2.0, &mut r);
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..n)).collect();
        let mut g = Graph::new();
        let z = g.constant(logits.clone()).unwrap();
        let loss = label_smoothing_ce(&mut g, z, &labels, eps).unwrap();
        let want = oracle::label_smoothing_ce(&oracle::to_mat(b, n, logits.data()), &labels, eps);
        assert!((g.value(loss).item().unwrap() - want).abs() < TOL);
    }
}

#[test]
fn confusion_counts_match_loop() {
    let mut r = rng(13);
    for _ in 0..50 {
        let n = r.random_range(2..=7);
        let len = r.random_range(1..=200);
        let truth: Vec<usize> = (0..len).map(|_| r.random_range(0..n)).collect();
        let pred: Vec<usize> = (0..len).map(|_| r.random_range(0..n)).collect();
        let cm = confusion_matrix(&truth, &pred, n).unwrap();
        let want = oracle::count_confusion(&truth, &pred, n);
        for t in 0..n {
            assert_eq!(cm.row(t), want[t].as_slice());
        }
    }
}
