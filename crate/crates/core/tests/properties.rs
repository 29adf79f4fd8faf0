mod common;

use common::rng;
use ditlab_core::compress::{quantize_tensor, top_heads, QuantMode};
use ditlab_core::diffusion::{diffusion_loss, q_sample, Denoiser, NoiseSchedule};
use ditlab_core::evalmetrics::{frechet_distance, GaussianSummary};
use ditlab_core::moe::{balance_loss, route_topk, RoutingStats};
use ditlab_core::numerics::kernels::{matmul_nn, pool_bucket};
use ditlab_core::numerics::{adaptive_avg_pool_tokens, focusing_transform, softmax, Tensor};
use ditlab_core::Result;
use proptest::prelude::*;

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

fn rows(max_rows: usize, max_cols: usize, range: f64) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(move |(r, c)| {
        prop::collection::vec(-range..range, r * c).prop_map(move |d| tensor(vec![r, c], d))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(x in rows(6, 9, 1000.0)) {
        let s = softmax(&x, -1).unwrap();
        let c = x.shape()[1];
        for row in s.data().chunks(c) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn focusing_preserves_row_norm(x in rows(5, 16, 1.0), p in 1u32..5) {
        let y = focusing_transform(&x, p).unwrap();
        let c = x.shape()[1];
        for (a, b) in x.data().chunks(c).zip(y.data().chunks(c)) {
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((na - nb).abs() <= 1e-5 * na.max(f64::MIN_POSITIVE), "{na} vs {nb}");
        }
    }

    #[test]
    fn pooling_then_expanding_conserves_the_sum(
        (big_n, n, d, data) in (1usize..20, 1usize..4).prop_flat_map(|(big_n, d)| {
            (Just(big_n), 1..=big_n, Just(d), prop::collection::vec(-1.0..1.0f64, big_n * d))
        })
    ) {
        let q = tensor(vec![big_n, d], data);
        let pooled = adaptive_avg_pool_tokens(&q, n).unwrap();
        let mut expanded = vec![0.0; big_n * d];
        let mut covered = vec![0usize; big_n];
        for i in 0..n {
            let (s, e) = pool_bucket(i, big_n, n);
            for t in s..e {
                covered[t] += 1;
                expanded[t * d..(t + 1) * d].copy_from_slice(&pooled.data()[i * d..(i + 1) * d]);
            }
        }
        prop_assert!(covered.iter().all(|&c| c == 1));
        for j in 0..d {
            let a: f64 = (0..big_n).map(|t| q.data()[t * d + j]).sum();
            let b: f64 = (0..big_n).map(|t| expanded[t * d + j]).sum();
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn gates_are_k_sparse_probability_vectors(
        (logits, k) in rows(8, 8, 10.0).prop_flat_map(|l| {
            let e = l.shape()[1];
            (Just(l), 1..=e)
        })
    ) {
        let (gates, mask) = route_topk(&logits, k).unwrap();
        let e = logits.shape()[1];
        for (r, row) in gates.data().chunks(e).enumerate() {
            prop_assert!(row.iter().all(|&g| g >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().filter(|&&g| g > 0.0).count() <= k);
            prop_assert_eq!(mask[r * e..(r + 1) * e].iter().filter(|&&m| m).count(), k);
        }
    }

    #[test]
    fn balance_loss_ignores_expert_order(
        (t, e, k, logits, perm_seed) in (1usize..7, 2usize..6).prop_flat_map(|(t, e)| {
            (Just(t), Just(e), 1..=e, prop::collection::vec(-3.0..3.0f64, t * e), any::<u64>())
        })
    ) {
        let logits = tensor(vec![t, e], logits);
        let probs = softmax(&logits, -1).unwrap();
        let (_, mask) = route_topk(&logits, k).unwrap();
        let stats = RoutingStats { experts: e, active: k, tokens: t, assignment: mask, probs, probs_var: None };
        let mut perm: Vec<usize> = (0..e).collect();
        let mut r = rng(perm_seed);
        use rand::seq::SliceRandom;
        perm.shuffle(&mut r);
        let mut assignment = vec![false; t * e];
        let mut p = vec![0.0; t * e];
        for ti in 0..t {
            for (j, &pj) in perm.iter().enumerate() {
                assignment[ti * e + pj] = stats.assignment[ti * e + j];
                p[ti * e + pj] = stats.probs.data()[ti * e + j];
            }
        }
        let permuted = RoutingStats { assignment, probs: tensor(vec![t, e], p), ..stats.clone() };
        let a = balance_loss(&stats, 0.3).unwrap();
        let b = balance_loss(&permuted, 0.3).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn quantization_error_is_at_most_half_a_step(w in rows(6, 12, 5.0), per_tensor in any::<bool>()) {
        let mode = if per_tensor { QuantMode::PerTensor } else { QuantMode::PerChannel };
        let q = quantize_tensor(&w, mode).unwrap();
        let dq = q.dequantize();
        let c = w.shape()[1];
        for (i, (a, b)) in w.data().iter().zip(dq.data()).enumerate() {
            prop_assert!((a - b).abs() <= q.scale(i / c) / 2.0);
        }
    }

    #[test]
    fn top_heads_matches_subset_oracle(scores in prop::collection::vec(0u8..4, 1..9), k in 1usize..9) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let n = scores.len();
        let k = k.min(n);
        // Best subset of size k by total score, lexicographically smallest on ties.
        let mut best: Option<(f64, Vec<usize>)> = None;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != k {
                continue;
            }
            let set: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).collect();
            let total: f64 = set.iter().map(|&i| scores[i]).sum();
            let better = match &best {
                None => true,
                Some((bt, bs)) => total > *bt || (total == *bt && set < *bs),
            };
            if better {
                best = Some((total, set));
            }
        }
        prop_assert_eq!(top_heads(&scores, k), best.unwrap().1);
    }

    #[test]
    fn frechet_is_symmetric_and_non_negative(
        a in prop::collection::vec(prop::collection::vec(-2.0..2.0f64, 3), 4..12),
        b in prop::collection::vec(prop::collection::vec(-2.0..2.0f64, 3), 4..12),
    ) {
        let sa = GaussianSummary::from_samples(&a).unwrap();
        let sb = GaussianSummary::from_samples(&b).unwrap();
        let ab = frechet_distance(&sa, &sb).unwrap();
        let ba = frechet_distance(&sb, &sa).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-6);
        prop_assert!(frechet_distance(&sa, &sa).unwrap() <= 1e-6);
    }

    #[test]
    fn diffusion_loss_is_zero_only_for_exact_noise(offset in -1.0..1.0f64, t in 0usize..1000, seed in any::<u64>()) {
        let sched = NoiseSchedule::default();
        let mut r = rng(seed);
        let x0 = Tensor::randn([2, 1, 2, 2], &mut r);
        let eps = Tensor::randn([2, 1, 2, 2], &mut r);
        let exact = Oracle { eps: eps.clone(), offset: 0.0 };
        prop_assert_eq!(diffusion_loss(&exact, &sched, &x0, &[t, t], &[0, 0], &eps).unwrap(), 0.0);
        let off = Oracle { eps: eps.clone(), offset };
        let l = diffusion_loss(&off, &sched, &x0, &[t, t], &[0, 0], &eps).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, offset == 0.0);
    }
}

/// Predicts a fixed noise tensor shifted by `offset`.
struct Oracle {
    eps: Tensor,
    offset: f64,
}

impl Denoiser for Oracle {
    fn in_channels(&self) -> usize {
        1
    }
    fn input_size(&self) -> usize {
        2
    }
    fn null_label(&self) -> usize {
        1
    }
    fn predict_eps(&self, _x: &Tensor, _t: &[usize], _y: &[usize]) -> Result<Tensor> {
        Ok(self.eps.map(|v| v + self.offset))
    }
}

#[test]
fn matmul_is_associative_within_tolerance() {
    let mut r = rng(4);
    let n = 16;
    for _ in 0..10 {
        let m = |r: &mut _| Tensor::uniform([n, n], -1.0, 1.0, r).into_data();
        let (a, b, c) = (m(&mut r), m(&mut r), m(&mut r));
        let mul = |x: &[f64], y: &[f64]| {
            let mut out = vec![0.0; n * n];
            matmul_nn(x, y, &mut out, n, n, n);
            out
        };
        let left = mul(&mul(&a, &b), &c);
        let right = mul(&a, &mul(&b, &c));
        let worst = left.iter().zip(&right).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-3, "{worst}");
    }
}

#[test]
fn q_sample_follows_the_variance_law() {
    let sched = NoiseSchedule::default();
    let n = 10_000;
    let mut r = rng(11);
    let sigma0 = 0.7;
    let x0 = Tensor::randn([n], &mut r).scale(sigma0);
    let var = |t: &Tensor| {
        let m = t.mean();
        t.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64
    };
    let v0 = var(&x0);
    for t in [0, 50, 250, 500, 999] {
        let eps = Tensor::randn([n], &mut r);
        let xt = q_sample(&sched, &x0, t, &eps).unwrap();
        let ab = sched.alpha_bar(t).unwrap();
        let expected = ab * v0 + (1.0 - ab);
        let got = var(&xt);
        assert!((got - expected).abs() <= 0.05 * expected, "t={t}: {got} vs {expected}");
    }
}

#[test]
fn balance_loss_minimum_over_all_hard_assignments() {
    // T=4, E=2, K=1: every assignment, router probabilities equal to the
    // one-hot choice.
    let (t, e, alpha) = (4, 2, 0.5);
    let mut losses = Vec::new();
    for code in 0u32..(1 << t) {
        let mut assignment = vec![false; t * e];
        let mut probs = vec![0.0; t * e];
        for ti in 0..t {
            let ex = ((code >> ti) & 1) as usize;
            assignment[ti * e + ex] = true;
            probs[ti * e + ex] = 1.0;
        }
        let stats =
            RoutingStats { experts: e, active: 1, tokens: t, assignment, probs: tensor(vec![t, e], probs), probs_var: None };
        losses.push((code.count_ones(), balance_loss(&stats, alpha).unwrap()));
    }
    let min = losses.iter().map(|l| l.1).fold(f64::INFINITY, f64::min);
    assert!((min - alpha).abs() <= 1e-12, "{min}");
    for (ones, l) in losses {
        assert_eq!(ones == 2, (l - alpha).abs() <= 1e-12, "{ones} tokens on expert 1: {l}");
    }
}

#[test]
fn balance_loss_is_alpha_under_uniform_router() {
    let (t, e, alpha) = (6, 3, 0.2);
    for code in 0..(e as u32).pow(t as u32) {
        let mut assignment = vec![false; t * e];
        let mut c = code;
        for ti in 0..t {
            assignment[ti * e + (c % e as u32) as usize] = true;
            c /= e as u32;
        }
        let stats = RoutingStats {
            experts: e,
            active: 1,
            tokens: t,
            assignment,
            probs: Tensor::full([t, e], 1.0 / e as f64),
            probs_var: None,
        };
        assert!((balance_loss(&stats, alpha).unwrap() - alpha).abs() <= 1e-12);
    }
}

#[test]
fn frechet_mean_shift_is_squared_distance() {
    let mut r = rng(5);
    let samples: Vec<Vec<f64>> = (0..50).map(|_| Tensor::randn([4], &mut r).into_data()).collect();
    let a = GaussianSummary::from_samples(&samples).unwrap();
    let shift = [0.5, -1.0, 0.25, 2.0];
    let b = GaussianSummary { mean: a.mean.iter().zip(shift).map(|(m, s)| m + s).collect(), ..a.clone() };
    let expected: f64 = shift.iter().map(|s| s * s).sum();
    assert!((frechet_distance(&a, &b).unwrap() - expected).abs() <= 1e-6);
    assert!(frechet_distance(&a, &a).unwrap() <= 1e-6);
}

#[test]
fn frechet_shrinks_with_more_samples_from_one_gaussian() {
    let d = 4;
    let mut r = rng(21);
    let mut draw = |n: usize| {
        let s: Vec<Vec<f64>> = (0..n).map(|_| Tensor::randn([d], &mut r).into_data()).collect();
        GaussianSummary::from_samples(&s).unwrap()
    };
    let small = frechet_distance(&draw(10 * d), &draw(10 * d)).unwrap();
    let large = frechet_distance(&draw(1000 * d), &draw(1000 * d)).unwrap();
    assert!(large < small, "{large} vs {small}");
    assert!(large < 0.05, "{large}");
}
