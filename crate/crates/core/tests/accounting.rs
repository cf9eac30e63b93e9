//! Parameter and FLOP accounting against enumeration and hand counts.

use poster_core::model::{
    count_params, estimate_flops, linear_macs, Model, ModelConfig, Variant,
};

fn registered_scalars(cfg: &ModelConfig) -> usize {
    Model::new(cfg.clone()).unwrap().params().num_scalars()
}

#[test]
fn count_matches_registered_scalars_for_every_variant() {
    for v in Variant::ALL {
        for pre_norm in [false, true] {
            for qkv_bias in [false, true] {
                let cfg = ModelConfig {
                    pre_norm,
                    qkv_bias,
                    ..ModelConfig::desk().with_variant(v)
                };
                assert_eq!(count_params(&cfg).unwrap().total(), registered_scalars(&cfg), "{v}");
                let specs = cfg.layout().unwrap();
                assert_eq!(
                    specs.iter().map(|s| s.numel()).sum::<usize>(),
                    count_params(&cfg).unwrap().total()
                );
            }
        }
    }
}

#[test]
fn count_matches_registered_scalars_at_full_width() {
    let cfg = ModelConfig::default();
    let specs = cfg.layout().unwrap();
    let enumerated: usize = specs.iter().map(|s| s.numel()).sum();
    assert_eq!(count_params(&cfg).unwrap().total(), enumerated);
}

#[test]
fn doubling_depth_doubles_block_parameters() {
    for v in Variant::ALL {
        let at = |depth| {
            count_params(&ModelConfig {
                depth,
                ..ModelConfig::default().with_variant(v)
            })
            .unwrap()
        };
        let (four, eight) = (at(4), at(8));
        assert_eq!(eight.block_total(), 2 * four.block_total(), "{v}");
        assert_eq!(eight.projection_total(), four.projection_total());
        assert_eq!(eight.head, four.head);
    }
}

#[test]
fn zero_depth_has_no_block_parameters() {
    let cfg = ModelConfig {
        depth: 0,
        ..ModelConfig::desk()
    };
    assert_eq!(count_params(&cfg).unwrap().block_total(), 0);
    assert_eq!(count_params(&cfg).unwrap().total(), registered_scalars(&cfg));
}

#[test]
fn one_cross_fusion_block_closed_form() {
    // Attention 4D²+4D, MLP 2·2D²+3D, two norms 2·2D; doubled for two streams.
    let d = 512;
    let cfg = ModelConfig {
        pyramid_dims: vec![d],
        depth: 1,
        pre_norm: true,
        ..ModelConfig::default()
    };
    let want = 2 * (4 * d * d + 4 * d + 2 * 2 * d * d + 3 * d + 2 * 2 * d);
    assert_eq!(count_params(&cfg).unwrap().blocks, vec![vec![want]]);
    let enumerated: usize = cfg
        .layout()
        .unwrap()
        .iter()
        .filter(|s| s.name.starts_with("level0.block0."))
        .map(|s| s.numel())
        .sum();
    assert_eq!(enumerated, want);

    // Without the attention-input norm one 2D term goes away per stream.
    let single_norm = ModelConfig { pre_norm: false, ..cfg };
    assert_eq!(count_params(&single_norm).unwrap().blocks[0][0], want - 2 * 2 * d);
}

#[test]
fn flops_scale_linearly_in_depth() {
    for v in Variant::ALL {
        let at = |depth| {
            estimate_flops(&ModelConfig {
                depth,
                ..ModelConfig::desk().with_variant(v)
            })
            .unwrap()
        };
        let (one, two, four) = (at(1), at(2), at(4));
        assert_eq!(two.blocks(), 2 * one.blocks());
        assert_eq!(four.blocks(), 4 * one.blocks());
        assert_eq!(four.projections, one.projections);
    }
}

#[test]
fn attention_mixing_is_quadratic_in_patches() {
    for v in Variant::ALL {
        let at = |patches| {
            estimate_flops(&ModelConfig {
                patches,
                ..ModelConfig::desk().with_variant(v)
            })
            .unwrap()
        };
        let (p, p2) = (at(8), at(16));
        assert_eq!(p2.attention_mixing, 4 * p.attention_mixing);
        assert_eq!(p2.attention_linear, 2 * p.attention_linear);
        assert_eq!(p2.mlp, 2 * p.mlp);
    }
}

#[test]
fn single_linear_layer_hand_count() {
    assert_eq!(linear_macs(68, 512, 256), 68 * 512 * 256);
    let cfg = ModelConfig {
        variant: Variant::ImageOnly,
        patches: 5,
        base_dim: 12,
        pyramid_dims: vec![4],
        depth: 0,
        head_dim: 4,
        num_classes: 3,
        ..ModelConfig::default()
    };
    let f = estimate_flops(&cfg).unwrap();
    assert_eq!(f.projections, 5 * 12 * 4);
    assert_eq!(f.blocks(), 0);
    assert_eq!(f.head, 4 * 4 + 4 * 3);
}
