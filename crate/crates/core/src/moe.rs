//! Sparse Mixture-of-Experts feed-forward layer.
//!
//! A router scores every token against `E` experts; the top `K` router
//! probabilities are renormalized into gates and the token's output is the
//! gate-weighted sum of those experts' MLPs. Routing statistics from each
//! forward feed the load-balance loss `α·E·Σᵢ fᵢ·P̄ᵢ`.

use rand::Rng;

use crate::config::{ModelConfig, MoeConfig};
use crate::error::{input_err, shape_err, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Bound, ParamId, ParamKind, ParamStore};

/// Two-layer GELU MLP `W₂·gelu(W₁x + b₁) + b₂`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

pub(crate) fn xavier<R: Rng + ?Sized>(out: usize, inp: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (inp + out) as f64).sqrt();
    Tensor::uniform([out, inp], -bound, bound, rng)
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, c: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fc1_w: store.add(format!("{prefix}.fc1.weight"), ParamKind::Linear, xavier(hidden, c, rng)),
            fc1_b: store.add(format!("{prefix}.fc1.bias"), ParamKind::Bias, Tensor::zeros([hidden])),
            fc2_w: store.add(format!("{prefix}.fc2.weight"), ParamKind::Linear, xavier(c, hidden, rng)),
            fc2_b: store.add(format!("{prefix}.fc2.bias"), ParamKind::Bias, Tensor::zeros([c])),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.linear(x, p[self.fc1_w], Some(p[self.fc1_b]))?;
        let h = tape.gelu(h);
        tape.linear(h, p[self.fc2_w], Some(p[self.fc2_b]))
    }
}

/// Per-forward routing record.
#[derive(Clone, Debug)]
pub struct RoutingStats {
    pub experts: usize,
    pub active: usize,
    /// Tokens routed.
    pub tokens: usize,
    /// `I(t, i)`, row-major `[T, E]`.
    pub assignment: Vec<bool>,
    /// `P(t, i)`: full router softmax.
    pub probs: Tensor,
    /// Tape handle of `probs`, for a differentiable balance loss.
    pub probs_var: Option<Var>,
}

impl RoutingStats {
    /// `fᵢ = (1/(K·T))·Σₜ I(t,i)`
    pub fn load(&self) -> Vec<f64> {
        let mut f = vec![0.0; self.experts];
        for (j, &on) in self.assignment.iter().enumerate() {
            if on {
                f[j % self.experts] += 1.0;
            }
        }
        let norm = (self.active * self.tokens) as f64;
        f.iter().map(|v| v / norm).collect()
    }

    /// `P̄ᵢ = (1/T)·Σₜ P(t,i)`
    pub fn mean_prob(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.experts];
        for (j, v) in self.probs.data().iter().enumerate() {
            p[j % self.experts] += v;
        }
        p.iter().map(|v| v / self.tokens as f64).collect()
    }
}

/// Top-`K` routing: softmax over the expert logits, keep the `K` largest
/// probabilities (ties to the lower expert index) and renormalize them.
pub fn route_topk(logits: &Tensor, k: usize) -> Result<(Tensor, Vec<bool>)> {
    if logits.rank() != 2 {
        return Err(shape_err!("router logits must be [T, E], got {:?}", logits.shape()));
    }
    let probs = logits.softmax(-1)?;
    let mask = topk_mask(&probs, k)?;
    let e = probs.shape()[1];
    let mut gates = vec![0.0; probs.numel()];
    for (r, row) in probs.data().chunks(e).enumerate() {
        let s: f64 = (0..e).filter(|&j| mask[r * e + j]).map(|j| row[j]).sum();
        for j in 0..e {
            if mask[r * e + j] {
                gates[r * e + j] = row[j] / s;
            }
        }
    }
    Ok((Tensor::new(probs.shape().to_vec(), gates)?, mask))
}

fn topk_mask(probs: &Tensor, k: usize) -> Result<Vec<bool>> {
    let e = probs.shape()[1];
    if k == 0 || k > e {
        return Err(input_err!("cannot keep {k} of {e} experts"));
    }
    let mut mask = vec![false; probs.numel()];
    let mut order: Vec<usize> = (0..e).collect();
    for (r, row) in probs.data().chunks(e).enumerate() {
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &j in &order[..k] {
            mask[r * e + j] = true;
        }
    }
    Ok(mask)
}

/// `α·E·Σᵢ fᵢ·P̄ᵢ`
pub fn balance_loss(stats: &RoutingStats, alpha: f64) -> Result<f64> {
    if stats.tokens == 0 {
        return Err(input_err!("balance loss over zero routed tokens"));
    }
    let f = stats.load();
    let p = stats.mean_prob();
    Ok(alpha * stats.experts as f64 * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>())
}

/// Differentiable balance loss; gradients reach the router through `P̄`.
pub fn balance_loss_var(tape: &mut Tape<'_>, stats: &RoutingStats, alpha: f64) -> Result<Var> {
    if stats.tokens == 0 {
        return Err(input_err!("balance loss over zero routed tokens"));
    }
    let probs = stats
        .probs_var
        .ok_or_else(|| input_err!("routing statistics were not recorded on a tape"))?;
    let f = tape.constant(Tensor::from_vec(stats.load()));
    let psum = tape.sum_axis(probs, 0)?;
    let fp = tape.mul(psum, f)?;
    let s = tape.sum(fp);
    Ok(tape.scale(s, alpha * stats.experts as f64 / stats.tokens as f64))
}

#[derive(Clone, Debug)]
pub struct MoeLayer {
    pub config: MoeConfig,
    /// `[E, C]`, no bias.
    pub router_w: ParamId,
    pub experts: Vec<Mlp>,
    pub shared: Vec<Mlp>,
}

impl MoeLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &ModelConfig,
        moe: &MoeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        moe.validate()?;
        let (c, hidden) = (cfg.hidden, cfg.mlp_hidden());
        let router_w = store.add(
            format!("{prefix}.router.weight"),
            ParamKind::Linear,
            Tensor::randn([moe.experts, c], rng).scale(0.02),
        );
        let experts = (0..moe.experts)
            .map(|e| Mlp::new(store, &format!("{prefix}.experts.{e}"), c, hidden, rng))
            .collect();
        let shared = (0..moe.shared_experts)
            .map(|e| Mlp::new(store, &format!("{prefix}.shared.{e}"), c, hidden, rng))
            .collect();
        Ok(Self { config: moe.clone(), router_w, experts, shared })
    }

    /// `x: [T, C] → [T, C]` plus routing statistics.
    pub fn forward(&self, tape: &mut Tape<'_>, p: &Bound, x: Var) -> Result<(Var, RoutingStats)> {
        let s = tape.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err!("MoE expects [T, C], got {:?}", s));
        }
        let t = s[0];
        let e = self.config.experts;
        let logits = tape.linear(x, p[self.router_w], None)?;
        let probs = tape.softmax(logits)?;
        let mask = topk_mask(tape.value(probs), self.config.active)?;
        let gates = tape.topk_renorm(probs, mask.clone())?;
        let mut out: Option<Var> = None;
        for (ei, expert) in self.experts.iter().enumerate() {
            let idx: Vec<usize> = (0..t).filter(|&ti| mask[ti * e + ei]).collect();
            if idx.is_empty() {
                continue;
            }
            let xe = tape.index_rows(x, &idx)?;
            let ye = expert.forward(tape, p, xe)?;
            let at: Vec<(usize, usize)> = idx.iter().map(|&ti| (ti, ei)).collect();
            let ge = tape.gather_entries(gates, &at)?;
            let ye = tape.mul_rows(ye, ge)?;
            let ye = tape.scatter_rows(ye, &idx, t)?;
            out = Some(match out {
                Some(o) => tape.add(o, ye)?,
                None => ye,
            });
        }
        for expert in &self.shared {
            let ys = expert.forward(tape, p, x)?;
            out = Some(match out {
                Some(o) => tape.add(o, ys)?,
                None => ys,
            });
        }
        let out = match out {
            Some(o) => o,
            None => tape.constant(Tensor::zeros(s)),
        };
        let stats = RoutingStats {
            experts: e,
            active: self.config.active,
            tokens: t,
            assignment: mask,
            probs: tape.value(probs).clone(),
            probs_var: Some(probs),
        };
        Ok((out, stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(assign: &[usize], probs: Vec<f64>, e: usize) -> RoutingStats {
        let t = assign.len();
        let mut a = vec![false; t * e];
        for (ti, &ei) in assign.iter().enumerate() {
            a[ti * e + ei] = true;
        }
        RoutingStats {
            experts: e,
            active: 1,
            tokens: t,
            assignment: a,
            probs: Tensor::new([t, e], probs).unwrap(),
            probs_var: None,
        }
    }

    #[test]
    fn route_examples() {
        let (g, m) = route_topk(&Tensor::new([1, 1], vec![0.3]).unwrap(), 1).unwrap();
        assert_eq!(g.data(), &[1.0]);
        assert_eq!(m, vec![true]);

        let logits = Tensor::new([1, 4], vec![2.0, 1.0, 0.0, -1.0]).unwrap();
        let (g, m) = route_topk(&logits, 2).unwrap();
        assert_eq!(m, vec![true, true, false, false]);
        // e^2/(e^2+e^1) = 1/(1+e^-1)
        let g0 = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((g.data()[0] - g0).abs() < 1e-12);
        assert!((g.data()[0] - 0.7311).abs() < 1e-4);
        assert!((g.data()[1] - 0.2689).abs() < 1e-4);

        let (g, _) = route_topk(&logits, 4).unwrap();
        let full = logits.softmax(-1).unwrap();
        assert!(g.max_abs_diff(&full).unwrap() < 1e-15);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let (_, m) = route_topk(&Tensor::new([1, 3], vec![1.0, 1.0, 1.0]).unwrap(), 2).unwrap();
        assert_eq!(m, vec![true, true, false]);
    }

    #[test]
    fn balance_examples() {
        let uniform = stats(&[0, 1], vec![0.5, 0.5, 0.5, 0.5], 2);
        assert!((balance_loss(&uniform, 0.3).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(balance_loss(&uniform, 0.0).unwrap(), 0.0);
        let collapsed = stats(&[0, 0], vec![1.0, 0.0, 1.0, 0.0], 2);
        assert!((balance_loss(&collapsed, 0.3).unwrap() - 0.6).abs() < 1e-15);
        let empty = stats(&[], vec![], 2);
        assert!(balance_loss(&empty, 1.0).is_err());
    }
}
