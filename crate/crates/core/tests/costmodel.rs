use ditlab_core::compress::prune_heads;
use ditlab_core::config::preset_suite;
use ditlab_core::costmodel::{count_flops, count_params};
use ditlab_core::{AttentionVariant, DiTModel, ModelConfig};

#[test]
fn formula_params_equal_walked_params() {
    for size in [16, 32] {
        for (name, cfg) in preset_suite() {
            let cfg = cfg.with_input_size(size);
            let m = DiTModel::new(cfg.clone(), 0).unwrap();
            let p = count_params(&cfg).unwrap();
            assert_eq!(p.total, m.walked_param_count() as u64, "{name} @ {size}");
        }
    }
}

#[test]
fn formula_macs_equal_instrumented_macs() {
    for size in [16, 32] {
        for (name, cfg) in preset_suite() {
            let cfg = cfg.with_input_size(size);
            let m = DiTModel::new(cfg.clone(), 0).unwrap();
            let f = count_flops(&cfg, false).unwrap();
            assert_eq!(f.total, m.instrumented_macs().unwrap(), "{name} @ {size}");
        }
    }
}

#[test]
fn flops_grow_with_depth_width_and_tokens() {
    for variant in [
        AttentionVariant::Baseline,
        AttentionVariant::Shallow,
        AttentionVariant::mediated(4),
        AttentionVariant::focused(3),
    ] {
        let base = ModelConfig::s2().with_attention(variant);
        let f = |c: &ModelConfig| count_flops(c, false).unwrap().total;
        let mut deeper = base.clone();
        deeper.depth += 1;
        let mut wider = base.clone();
        wider.hidden = 768;
        wider.heads = 12;
        let finer = base.clone().with_input_size(64);
        assert!(f(&deeper) > f(&base));
        assert!(f(&wider) > f(&base));
        assert!(f(&finer) > f(&base));
    }
}

#[test]
fn pruned_flops_fall_with_fewer_heads() {
    let mut cfg = ModelConfig::s2().with_input_size(16);
    cfg.depth = 2;
    let m = DiTModel::new_random(cfg.clone(), 1).unwrap();
    let dense = count_flops(&cfg, true).unwrap().total;
    let mut prev = dense;
    for k in (1..cfg.heads).rev() {
        let pruned = prune_heads(&m, k).unwrap();
        let masked = count_flops(&pruned.config, false).unwrap().total;
        let elided = count_flops(&pruned.config, true).unwrap().total;
        assert_eq!(masked, dense);
        assert!(elided < prev, "k={k}");
        prev = elided;
    }
}
