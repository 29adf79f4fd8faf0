mod common;

use common::{rng, store_bytes};
use ditlab_core::checkpoint::{load_checkpoint, save_checkpoint};
use ditlab_core::compress::{
    prune_heads, quantize_model, score_attention_heads, top_heads, weight_storage_bytes, QuantMode,
};
use ditlab_core::diffusion::{ddpm_sample_loop, NoiseSchedule};
use ditlab_core::model::FeedForward;
use ditlab_core::moe::MoeLayer;
use ditlab_core::numerics::{Tape, Tensor};
use ditlab_core::params::{ParamKind, ParamValue};
use ditlab_core::{AttentionVariant, DiTModel, Error, ModelConfig, MoeConfig, ParamStore};

fn tiny() -> ModelConfig {
    let mut c = ModelConfig::xs2().with_input_size(8);
    c.depth = 2;
    c.hidden = 16;
    c.heads = 4;
    c.num_classes = 4;
    c.freq_embed_dim = 8;
    c.mlp_ratio = 2;
    c
}

fn variants() -> [AttentionVariant; 4] {
    [AttentionVariant::Baseline, AttentionVariant::Shallow, AttentionVariant::mediated(2), AttentionVariant::focused(2)]
}

fn input(cfg: &ModelConfig, b: usize, seed: u64) -> Tensor {
    Tensor::randn([b, cfg.in_channels, cfg.input_size, cfg.input_size], &mut rng(seed))
}

#[test]
fn every_parameter_receives_gradient() {
    let mut cfgs: Vec<ModelConfig> = variants().into_iter().map(|v| tiny().with_attention(v)).collect();
    cfgs.push(tiny().with_moe(MoeConfig::new(4, 2, 1)));
    for cfg in cfgs {
        let m = DiTModel::new_random(cfg.clone(), 3).unwrap();
        let x = input(&cfg, 4, 4);
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape, true).unwrap();
        let xv = tape.constant(x);
        let out = m.forward(&mut tape, &p, xv, &[1, 200, 600, 999], &[0, 1, 2, 4]).unwrap();
        let target = tape.constant(Tensor::randn(tape.shape(out.out).to_vec(), &mut rng(5)));
        let loss = tape.mse(out.out, target).unwrap();
        tape.backward(loss).unwrap();
        let grads = p.grads(&tape);
        for (id, param) in m.params.iter() {
            let g = &grads[id.index()];
            if !param.trainable {
                assert!(g.is_none(), "{}", param.name);
                continue;
            }
            let g = g.as_ref().unwrap_or_else(|| panic!("{} got no gradient", param.name));
            assert!(g.data().iter().any(|&v| v != 0.0), "{} has an all-zero gradient", param.name);
        }
    }
}

#[test]
fn identical_experts_equal_the_dense_mlp() {
    let cfg = tiny();
    let moe = MoeConfig::new(4, 2, 1);
    let mut store = ParamStore::new();
    let layer = MoeLayer::new(&mut store, "moe", &cfg, &moe, &mut rng(1)).unwrap();
    let src = &layer.experts[0];
    let src_ids = [src.fc1_w, src.fc1_b, src.fc2_w, src.fc2_b];
    for e in &layer.experts[1..] {
        for (dst, s) in [e.fc1_w, e.fc1_b, e.fc2_w, e.fc2_b].into_iter().zip(src_ids) {
            let v = store.tensor(s).unwrap().clone();
            *store.tensor_mut(dst).unwrap() = v;
        }
    }
    *store.tensor_mut(layer.router_w).unwrap() = Tensor::randn([4, cfg.hidden], &mut rng(2));
    let x = Tensor::randn([24, cfg.hidden], &mut rng(3));
    let mut tape = Tape::no_grad();
    let p = store.bind(&mut tape, false).unwrap();
    let xv = tape.leaf(x, false);
    let (y, stats) = layer.forward(&mut tape, &p, xv).unwrap();
    let dense = src.forward(&mut tape, &p, xv).unwrap();
    let diff = tape.value(y).max_abs_diff(tape.value(dense)).unwrap();
    assert!(diff <= 1e-5, "{diff}");
    assert!(stats.load().iter().all(|&f| f > 0.0));
}

#[test]
fn single_expert_moe_block_equals_dense_block() {
    let dense_cfg = tiny();
    let moe_cfg = tiny().with_moe(MoeConfig::new(1, 1, 1));
    let moe = DiTModel::new_random(moe_cfg, 7).unwrap();
    let mut dense = DiTModel::new(dense_cfg.clone(), 0).unwrap();
    let ids: Vec<_> = dense.params.ids().collect();
    for id in ids {
        let name = dense.params.param(id).name.clone();
        let name = if name.starts_with("blocks.") { name.replace(".mlp.", ".moe.experts.0.") } else { name };
        let src = moe.params.id(&name).unwrap_or_else(|| panic!("{name}"));
        dense.params.set_value(id, moe.params.value(src).clone()).unwrap();
    }
    let x = input(&dense_cfg, 2, 8);
    let (t, y) = ([3, 777], [1, 4]);
    let a = moe.predict(&x, &t, &y).unwrap();
    let b = dense.predict(&x, &t, &y).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
}

#[test]
fn pruning_keeps_all_heads_as_identity_and_is_idempotent() {
    for v in variants().into_iter().take(3) {
        let cfg = tiny().with_attention(v);
        let m = DiTModel::new_random(cfg.clone(), 9).unwrap();
        let same = prune_heads(&m, cfg.heads).unwrap();
        assert_eq!(same.params, m.params);
        assert_eq!(same.config, m.config);
        for k in 1..cfg.heads {
            let once = prune_heads(&m, k).unwrap();
            let twice = prune_heads(&once, k).unwrap();
            assert_eq!(store_bytes(&twice.params), store_bytes(&once.params), "k={k}");
            assert_eq!(once.config.keep_heads, Some(k));
        }
    }
}

#[test]
fn pruned_heads_contribute_exactly_zero() {
    for v in variants().into_iter().take(3) {
        let cfg = tiny().with_attention(v.clone());
        let m = DiTModel::new_random(cfg.clone(), 10).unwrap();
        let k = 2;
        let pruned = prune_heads(&m, k).unwrap();
        let scores = score_attention_heads(&m).unwrap();
        let x = Tensor::uniform([2, cfg.tokens(), cfg.hidden], -1.0, 1.0, &mut rng(11));
        for (layer, block) in pruned.blocks.iter().enumerate() {
            let attn = &block.attn;
            let layer_scores: Vec<f64> = scores.iter().filter(|s| s.layer == layer).map(|s| s.score).collect();
            let kept = top_heads(&layer_scores, k);
            let base = attn.apply(&pruned.params, &x).unwrap();
            // Garbage in the output-projection columns of dropped heads must not matter.
            let mut junk = pruned.params.clone();
            let d = attn.head_dim();
            let w = junk.tensor_mut(attn.proj_w).unwrap();
            let cols = w.shape()[1];
            let noise = Tensor::randn(w.shape().to_vec(), &mut rng(12));
            for r in 0..w.shape()[0] {
                for h in (0..cfg.heads).filter(|h| !kept.contains(h)) {
                    for c in h * d..(h + 1) * d {
                        w.data_mut()[r * cols + c] = noise.data()[r * cols + c];
                    }
                }
            }
            assert_eq!(attn.apply(&junk, &x).unwrap(), base, "{} layer {layer}", v.label());
        }
    }
}

#[test]
fn head_scores_are_non_negative_and_zero_for_zero_heads() {
    let cfg = tiny();
    let mut m = DiTModel::new_random(cfg.clone(), 13).unwrap();
    let (w_id, _) = m.blocks[0].attn.qkv().unwrap();
    let (width, d) = (m.blocks[0].attn.width(), m.blocks[0].attn.head_dim());
    let w = m.params.tensor_mut(w_id).unwrap();
    let cols = w.shape()[1];
    for part in 0..3 {
        let s = (part * width + d) * cols;
        w.data_mut()[s..s + d * cols].fill(0.0);
    }
    let scores = score_attention_heads(&m).unwrap();
    assert_eq!(scores.len(), cfg.depth * cfg.heads);
    assert!(scores.iter().all(|s| s.score >= 0.0));
    assert_eq!(scores[1].score, 0.0);
    assert!(scores[0].score > 0.0);
}

#[test]
fn focused_attention_cannot_be_pruned() {
    let m = DiTModel::new_random(tiny().with_attention(AttentionVariant::focused(2)), 0).unwrap();
    assert!(matches!(prune_heads(&m, 1), Err(Error::UnsupportedVariant(_))));
    assert!(matches!(score_attention_heads(&m), Err(Error::UnsupportedVariant(_))));
}

#[test]
fn quantized_storage_is_a_quarter_plus_scales() {
    let m = DiTModel::new_random(tiny().with_moe(MoeConfig::new(2, 1, 2)), 14).unwrap();
    let q = quantize_model(&m, QuantMode::PerChannel).unwrap();
    let mut expected = 0;
    for (_, p) in m.params.iter() {
        let n = p.value.numel();
        expected += if p.kind == ParamKind::Linear { n + 4 * p.value.shape()[0] } else { 4 * n };
    }
    assert_eq!(weight_storage_bytes(&q.params), expected);
    for (_, p) in q.params.iter() {
        assert_eq!(matches!(p.value, ParamValue::Int8(_)), p.kind == ParamKind::Linear, "{}", p.name);
    }
}

#[test]
fn quantized_forward_stays_close_to_float() {
    let cfg = ModelConfig::s2().with_input_size(16);
    let m = DiTModel::new_random(cfg.clone(), 15).unwrap();
    let q = quantize_model(&m, QuantMode::PerChannel).unwrap();
    let x = input(&cfg, 1, 16);
    let a = m.predict(&x, &[500], &[3]).unwrap();
    let b = q.predict(&x, &[500], &[3]).unwrap();
    let rel = a.sub(&b).unwrap().l2_norm() / a.l2_norm();
    assert!(rel <= 2e-2, "{rel}");
}

#[test]
fn checkpoints_round_trip_float_and_int8() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny().with_attention(AttentionVariant::mediated(2));
    let m = DiTModel::new_random(cfg.clone(), 17).unwrap();
    let q = quantize_model(&m, QuantMode::PerChannel).unwrap();
    let x = input(&cfg, 2, 18);
    for (name, model) in [("float", &m), ("int8", &q)] {
        let path = dir.path().join(format!("{name}.json"));
        save_checkpoint(model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.params, model.params, "{name}");
        assert_eq!(back.config, model.config);
        let (t, y) = ([5, 900], [0, 4]);
        assert_eq!(back.predict(&x, &t, &y).unwrap(), model.predict(&x, &t, &y).unwrap());
    }
}

#[test]
fn quantize_after_prune_loads_and_samples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let m = DiTModel::new_random(cfg, 19).unwrap();
    let path = dir.path().join("pq.json");
    save_checkpoint(&quantize_model(&prune_heads(&m, 2).unwrap(), QuantMode::PerChannel).unwrap(), &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.config.keep_heads, Some(2));
    assert!(back.is_quantized());
    let x = ddpm_sample_loop(&back, &NoiseSchedule::default(), &[0, 3], 5, 4.0, 1).unwrap();
    assert!(x.all_finite());
    assert_eq!(x.shape(), &[2, 4, 8, 8]);
}

#[test]
fn moe_blocks_follow_the_frequency() {
    let mut cfg = tiny().with_moe(MoeConfig::new(2, 1, 2));
    cfg.depth = 4;
    let m = DiTModel::new(cfg, 0).unwrap();
    let kinds: Vec<bool> = m.blocks.iter().map(|b| matches!(b.ff, FeedForward::Moe(_))).collect();
    assert_eq!(kinds, [true, false, true, false]);
}
