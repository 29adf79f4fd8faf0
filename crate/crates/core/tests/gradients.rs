mod common;

use common::*;
use ditlab_core::attention::FocusedOrder;
use ditlab_core::AttentionVariant;

#[test]
fn every_op_matches_finite_differences() {
    for seed in 0..5 {
        for (name, err) in op_gradient_errors(seed).unwrap() {
            assert!(err <= GRAD_TOL, "{name} seed {seed}: {err}");
        }
    }
}

#[test]
fn every_attention_variant_matches_finite_differences() {
    let variants = [
        AttentionVariant::Baseline,
        AttentionVariant::Shallow,
        AttentionVariant::mediated(4),
        AttentionVariant::focused(1),
        AttentionVariant::focused(2),
        AttentionVariant::Focused { p: 3, groups: 2, rectify: true },
    ];
    for seed in 0..5 {
        for v in &variants {
            for order in [FocusedOrder::KeyValueFirst, FocusedOrder::QueryKeyFirst] {
                let err = attention_gradient_error(v.clone(), order, seed).unwrap();
                assert!(err <= GRAD_TOL, "{} {order:?} seed {seed}: {err}", v.label());
            }
        }
    }
}

#[test]
fn moe_layer_matches_finite_differences() {
    for seed in 0..5 {
        let err = moe_gradient_error(seed).unwrap();
        assert!(err <= GRAD_TOL, "seed {seed}: {err}");
    }
}

#[test]
fn one_block_dit_matches_finite_differences() {
    for seed in 0..2 {
        let err = dit_gradient_error(one_block_config(), seed).unwrap();
        assert!(err <= GRAD_TOL, "seed {seed}: {err}");
    }
}

#[test]
fn distillation_objective_matches_finite_differences() {
    for alpha in [0.0, 0.4, 1.0] {
        let err = distill_gradient_error(one_block_config(), alpha, 3).unwrap();
        assert!(err <= GRAD_TOL, "alpha {alpha}: {err}");
    }
}
