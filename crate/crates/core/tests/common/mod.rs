//! Shared oracles for the integration suites.
#![allow(dead_code)]

use ditlab_core::attention::{AttentionLayer, FocusedOrder};
use ditlab_core::moe::{balance_loss_var, MoeLayer};
use ditlab_core::numerics::{grad_check_with, Tape, Tensor, Var};
use ditlab_core::{AttentionVariant, DiTModel, ModelConfig, MoeConfig, ParamStore, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-2;
/// Elements checked per parameter tensor.
pub const PER_TENSOR: usize = 12;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `Σ y ⊙ R` with `R` fixed by `seed` and `y`'s shape.
pub fn wsum(t: &mut Tape<'_>, y: Var, seed: u64) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let w = t.constant(Tensor::randn(shape, &mut rng(seed ^ 0xabcd)));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

/// Cut a flat leaf into consecutive pieces of the given shapes.
pub fn split(t: &mut Tape<'_>, x: Var, shapes: &[&[usize]]) -> Result<Vec<Var>> {
    let mut off = 0;
    let mut out = Vec::new();
    for s in shapes {
        let n: usize = s.iter().product();
        let piece = t.slice_axis(x, 0, off, n)?;
        out.push(t.reshape(piece, s)?);
        off += n;
    }
    Ok(out)
}

fn total(shapes: &[&[usize]]) -> usize {
    shapes.iter().map(|s| s.iter().product::<usize>()).sum()
}

type OpFn = fn(&mut Tape<'_>, &[Var]) -> Result<Var>;

fn op_case(shapes: &[&[usize]], f: OpFn, seed: u64) -> Result<f64> {
    let x = Tensor::randn([total(shapes)], &mut rng(seed));
    let shapes: Vec<Vec<usize>> = shapes.iter().map(|s| s.to_vec()).collect();
    let r = grad_check_with(
        |t, x| {
            let refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
            let parts = split(t, x, &refs)?;
            let y = f(t, &parts)?;
            wsum(t, y, seed)
        },
        &x,
        FD_EPS,
        None,
    )?;
    Ok(r.max_rel_error)
}

/// Maximum relative finite-difference error of every differentiable tape op.
pub fn op_gradient_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let cases: Vec<(&'static str, Vec<&[usize]>, OpFn)> = vec![
        ("add", vec![&[2, 3], &[2, 3]], |t, p| t.add(p[0], p[1])),
        ("sub", vec![&[2, 3], &[2, 3]], |t, p| t.sub(p[0], p[1])),
        ("mul", vec![&[2, 3], &[2, 3]], |t, p| t.mul(p[0], p[1])),
        ("scale", vec![&[5]], |t, p| Ok(t.scale(p[0], -1.7))),
        ("linear", vec![&[2, 3, 4], &[5, 4], &[5]], |t, p| t.linear(p[0], p[1], Some(p[2]))),
        ("bmm", vec![&[2, 3, 4], &[2, 4, 5]], |t, p| t.bmm(p[0], p[1], false)),
        ("bmm_t", vec![&[2, 3, 4], &[2, 5, 4]], |t, p| t.bmm(p[0], p[1], true)),
        ("permute", vec![&[2, 3, 4]], |t, p| t.permute(p[0], &[2, 0, 1])),
        ("reshape", vec![&[2, 3, 4]], |t, p| t.reshape(p[0], &[6, 4])),
        ("softmax", vec![&[3, 5]], |t, p| t.softmax(p[0])),
        ("layer_norm", vec![&[3, 6]], |t, p| t.layer_norm(p[0], 1e-6)),
        ("gelu", vec![&[7]], |t, p| Ok(t.gelu(p[0]))),
        ("silu", vec![&[7]], |t, p| Ok(t.silu(p[0]))),
        ("relu", vec![&[7]], |t, p| Ok(t.relu(p[0]))),
        ("focus", vec![&[3, 4]], |t, p| t.focus(p[0], 3)),
        ("pool_tokens", vec![&[2, 7, 3]], |t, p| t.pool_tokens(p[0], 3)),
        ("depthwise_conv", vec![&[1, 9, 2], &[2, 9], &[2]], |t, p| {
            t.depthwise_conv(p[0], p[1], Some(p[2]), (3, 3))
        }),
        ("embedding", vec![&[4, 3]], |t, p| t.embedding(p[0], &[2, 0, 2])),
        ("add_bcast", vec![&[2, 3, 4], &[2, 4]], |t, p| t.add_bcast(p[0], p[1])),
        ("mul_bcast", vec![&[2, 3, 4], &[2, 4]], |t, p| t.mul_bcast(p[0], p[1])),
        ("add_leading", vec![&[2, 3, 4], &[3, 4]], |t, p| t.add_leading(p[0], p[1])),
        ("slice_axis", vec![&[3, 5]], |t, p| t.slice_axis(p[0], 1, 1, 3)),
        ("sum", vec![&[4]], |t, p| {
            let s = t.sum(p[0]);
            Ok(t.mul(s, s)?)
        }),
        ("mean", vec![&[4]], |t, p| {
            let s = t.mean(p[0]);
            Ok(t.mul(s, s)?)
        }),
        ("sum_axis", vec![&[3, 4]], |t, p| t.sum_axis(p[0], 0)),
        ("index_rows", vec![&[4, 3]], |t, p| t.index_rows(p[0], &[3, 1, 3])),
        ("scatter_rows", vec![&[3, 2]], |t, p| t.scatter_rows(p[0], &[4, 0, 4], 5)),
        ("mul_rows", vec![&[3, 2], &[3]], |t, p| t.mul_rows(p[0], p[1])),
        ("gather_entries", vec![&[3, 4]], |t, p| t.gather_entries(p[0], &[(0, 1), (2, 3), (0, 1)])),
        ("topk_renorm", vec![&[2, 4]], |t, p| {
            let s = t.softmax(p[0])?;
            t.topk_renorm(s, vec![true, false, true, false, false, true, true, true])
        }),
        ("div_last", vec![&[2, 3, 4], &[2, 3]], |t, p| {
            let sq = t.mul(p[1], p[1])?;
            let one = t.constant(Tensor::ones([2, 3]));
            let den = t.add(sq, one)?;
            t.div_last(p[0], den)
        }),
        ("index_axis", vec![&[2, 3, 2]], |t, p| t.index_axis(p[0], 1, &[2, 0, 0, 1])),
        ("mse", vec![&[2, 3], &[2, 3]], |t, p| t.mse(p[0], p[1])),
    ];
    cases.into_iter().map(|(name, shapes, f)| Ok((name, op_case(&shapes, f, seed)?))).collect()
}

/// Up to `PER_TENSOR` evenly spread element indices of a tensor of `n` values.
pub fn spread(n: usize) -> Vec<usize> {
    let k = PER_TENSOR.min(n);
    (0..k).map(|i| i * n / k).collect()
}

/// Attention test geometry: 4×4 grid, C=8, 2 heads.
pub fn attention_config(variant: AttentionVariant) -> ModelConfig {
    let mut c = ModelConfig::xs2().with_input_size(8).with_attention(variant);
    c.hidden = 8;
    c.heads = 2;
    c
}

/// Scalar objective of an attention layer on the tape, with parameter
/// `target` (if any) replaced by `x`.
fn attention_objective(
    t: &mut Tape<'_>,
    store: &ParamStore,
    layer: &AttentionLayer,
    input: &Tensor,
    x: Var,
    target: Option<ditlab_core::ParamId>,
    order: FocusedOrder,
    seed: u64,
) -> Result<Var> {
    let mut p = store.bind_cloned(t, false)?;
    let inp = match target {
        Some(id) => {
            p.set(id, x);
            t.constant(input.clone())
        }
        None => x,
    };
    let y = layer.forward_with(t, &p, inp, order)?;
    wsum(t, y, seed)
}

/// Worst gradient error over the input and every parameter of one attention layer.
pub fn attention_gradient_error(variant: AttentionVariant, order: FocusedOrder, seed: u64) -> Result<f64> {
    let cfg = attention_config(variant);
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let layer = AttentionLayer::new(&mut store, "attn", &cfg, &mut r)?;
    let input = Tensor::randn([2, 16, 8], &mut r);
    let mut worst = grad_check_with(
        |t, x| attention_objective(t, &store, &layer, &input, x, None, order, seed),
        &input,
        FD_EPS,
        Some(&spread(input.numel())),
    )?
    .max_rel_error;
    for (id, param) in store.iter() {
        let value = param.value.to_tensor();
        let e = grad_check_with(
            |t, x| attention_objective(t, &store, &layer, &input, x, Some(id), order, seed),
            &value,
            FD_EPS,
            Some(&spread(value.numel())),
        )?
        .max_rel_error;
        worst = worst.max(e);
    }
    Ok(worst)
}

/// Worst gradient error over the input and all parameters of an MoE layer
/// (output objective plus balance loss).
pub fn moe_gradient_error(seed: u64) -> Result<f64> {
    let mut cfg = attention_config(AttentionVariant::Baseline);
    cfg.mlp_ratio = 2;
    let moe_cfg = MoeConfig { balance_alpha: 0.5, ..MoeConfig::new(4, 2, 1) };
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let layer = MoeLayer::new(&mut store, "moe", &cfg, &moe_cfg, &mut r)?;
    let router = store.id("moe.router.weight").unwrap();
    // Spread router logits so small perturbations never flip a top-k choice.
    *store.tensor_mut(router)? = Tensor::randn([4, 8], &mut r).scale(2.0);
    let input = Tensor::randn([6, 8], &mut r);
    let objective = |t: &mut Tape<'_>, x: Var, target: Option<ditlab_core::ParamId>| -> Result<Var> {
        let mut p = store.bind_cloned(t, false)?;
        let inp = match target {
            Some(id) => {
                p.set(id, x);
                t.constant(input.clone())
            }
            None => x,
        };
        let (y, stats) = layer.forward(t, &p, inp)?;
        let main = wsum(t, y, seed)?;
        let bal = balance_loss_var(t, &stats, moe_cfg.balance_alpha)?;
        t.add(main, bal)
    };
    let mut worst =
        grad_check_with(|t, x| objective(t, x, None), &input, FD_EPS, Some(&spread(input.numel())))?.max_rel_error;
    for (id, param) in store.iter() {
        let value = param.value.to_tensor();
        let e = grad_check_with(|t, x| objective(t, x, Some(id)), &value, FD_EPS, Some(&spread(value.numel())))?
            .max_rel_error;
        worst = worst.max(e);
    }
    Ok(worst)
}

/// One-block DiT small enough for exhaustive-ish gradient checks.
pub fn one_block_config() -> ModelConfig {
    let mut c = ModelConfig::xs2().with_input_size(8);
    c.depth = 1;
    c.hidden = 16;
    c.heads = 2;
    c.num_classes = 4;
    c.freq_embed_dim = 8;
    c.mlp_ratio = 2;
    c
}

/// Worst gradient error of the ε-MSE objective over every trainable parameter
/// of a random one-block DiT.
pub fn dit_gradient_error(cfg: ModelConfig, seed: u64) -> Result<f64> {
    let model = DiTModel::new_random(cfg.clone(), seed)?;
    let mut r = rng(seed + 100);
    let x = Tensor::randn([2, cfg.in_channels, cfg.input_size, cfg.input_size], &mut r);
    let eps = Tensor::randn(x.shape().to_vec(), &mut r);
    let (ts, ys) = ([10usize, 700], [1usize, cfg.num_classes]);
    let mut worst: f64 = 0.0;
    for (id, param) in model.params.iter() {
        if !param.trainable {
            continue;
        }
        let value = param.value.to_tensor();
        let e = grad_check_with(
            |t, v| {
                let mut p = model.params.bind_cloned(t, false)?;
                p.set(id, v);
                let xv = t.constant(x.clone());
                let out = model.forward(t, &p, xv, &ts, &ys)?;
                let e_pred = t.slice_axis(out.out, 1, 0, cfg.in_channels)?;
                let target = t.constant(eps.clone());
                t.mse(e_pred, target)
            },
            &value,
            FD_EPS,
            Some(&spread(value.numel())),
        )?
        .max_rel_error;
        worst = worst.max(e);
    }
    Ok(worst)
}

/// Worst gradient error of `(1−α)·MSE(ε, ε_s) + α·MSE(ε_s, ε_t)` over the
/// student parameters of a one-block student/teacher pair.
pub fn distill_gradient_error(cfg: ModelConfig, alpha: f64, seed: u64) -> Result<f64> {
    let student = DiTModel::new_random(cfg.clone(), seed)?;
    let teacher = DiTModel::new_random(cfg.clone(), seed + 1)?;
    let mut r = rng(seed + 200);
    let x = Tensor::randn([2, cfg.in_channels, cfg.input_size, cfg.input_size], &mut r);
    let eps = Tensor::randn(x.shape().to_vec(), &mut r);
    let (ts, ys) = ([40usize, 420], [0usize, 2]);
    let t_eps = teacher.predict(&x, &ts, &ys)?.slice_axis(1, 0, cfg.in_channels)?;
    let mut worst: f64 = 0.0;
    for (id, param) in student.params.iter() {
        if !param.trainable {
            continue;
        }
        let value = param.value.to_tensor();
        let e = grad_check_with(
            |t, v| {
                let mut p = student.params.bind_cloned(t, false)?;
                p.set(id, v);
                let xv = t.constant(x.clone());
                let out = student.forward(t, &p, xv, &ts, &ys)?;
                let e_pred = t.slice_axis(out.out, 1, 0, cfg.in_channels)?;
                let truth = t.constant(eps.clone());
                let te = t.constant(t_eps.clone());
                let l_diff = t.mse(e_pred, truth)?;
                let l_kd = t.mse(e_pred, te)?;
                let a = t.scale(l_diff, 1.0 - alpha);
                let b = t.scale(l_kd, alpha);
                t.add(a, b)
            },
            &value,
            FD_EPS,
            Some(&spread(value.numel())),
        )?
        .max_rel_error;
        worst = worst.max(e);
    }
    Ok(worst)
}

/// Byte image of every parameter tensor, for equality checks.
pub fn store_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    for (_, p) in store.iter() {
        for v in p.value.to_tensor().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}
