//! DDPM forward process, ε-prediction objective, and an ancestral sampler with
//! classifier-free guidance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, shape_err, Result};
use crate::model::{resolve_label, DiTModel};
use crate::moe::balance_loss_var;
use crate::numerics::{Tape, Tensor, Var};
use crate::optim::AdamW;
use crate::params::Bound;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced `β` from `start` to `end` over `steps`.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps == 0 || !(0.0 < start && start <= end && end < 1.0) {
            return Err(config_err!("invalid linear schedule ({steps}, {start}, {end})"));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| if steps == 1 { start } else { start + (end - start) * i as f64 / (steps - 1) as f64 })
            .collect();
        Ok(Self::from_betas(betas))
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Self { betas, alpha_bars }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| input_err!("timestep {t} outside [0, {})", self.steps()))
    }

    /// `steps` timesteps evenly spread over `[0, T−1]`, ascending.
    pub fn respaced(&self, steps: usize) -> Result<Vec<usize>> {
        let t = self.steps();
        if steps == 0 || steps > t {
            return Err(config_err!("cannot sample with {steps} of {t} steps"));
        }
        if steps == 1 {
            return Ok(vec![t - 1]);
        }
        Ok((0..steps)
            .map(|i| ((i * (t - 1)) as f64 / (steps - 1) as f64).round() as usize)
            .collect())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 2e-2).expect("valid default schedule")
    }
}

/// `√ᾱ_t·x₀ + √(1−ᾱ_t)·ε`
pub fn q_sample(sched: &NoiseSchedule, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// [`q_sample`] with one timestep per leading-axis sample.
pub fn q_sample_batch(sched: &NoiseSchedule, x0: &Tensor, t: &[usize], eps: &Tensor) -> Result<Tensor> {
    x0.expect_same_shape(eps)?;
    let b = x0.shape().first().copied().unwrap_or(0);
    if t.len() != b {
        return Err(shape_err!("{} timesteps for batch {b}", t.len()));
    }
    let per = x0.numel() / b.max(1);
    let mut out = Vec::with_capacity(x0.numel());
    for (i, &ti) in t.iter().enumerate() {
        let ab = sched.alpha_bar(ti)?;
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        let r = i * per..(i + 1) * per;
        out.extend(x0.data()[r.clone()].iter().zip(&eps.data()[r]).map(|(x, e)| a * x + s * e));
    }
    Tensor::new(x0.shape().to_vec(), out)
}

/// `ε_u + s·(ε_c − ε_u)`
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, s: f64) -> Result<Tensor> {
    eps_cond.zip_map(eps_uncond, |c, u| u + s * (c - u))
}

/// Anything that predicts the noise in `x_t`.
pub trait Denoiser {
    fn in_channels(&self) -> usize;
    fn input_size(&self) -> usize;
    fn null_label(&self) -> usize;
    /// `[B, Cin, H, W] → [B, Cin, H, W]`
    fn predict_eps(&self, x_t: &Tensor, t: &[usize], y: &[usize]) -> Result<Tensor>;
}

impl Denoiser for DiTModel {
    fn in_channels(&self) -> usize {
        self.config.in_channels
    }

    fn input_size(&self) -> usize {
        self.config.input_size
    }

    fn null_label(&self) -> usize {
        self.config.num_classes
    }

    fn predict_eps(&self, x_t: &Tensor, t: &[usize], y: &[usize]) -> Result<Tensor> {
        self.predict(x_t, t, y)?.slice_axis(1, 0, self.config.in_channels)
    }
}

/// `mean((ε − ε_θ(x_t, t, y))²)`
pub fn diffusion_loss<D: Denoiser + ?Sized>(
    model: &D,
    sched: &NoiseSchedule,
    x0: &Tensor,
    t: &[usize],
    y: &[usize],
    eps: &Tensor,
) -> Result<f64> {
    let xt = q_sample_batch(sched, x0, t, eps)?;
    let pred = model.predict_eps(&xt, t, y)?;
    pred.expect_same_shape(eps)?;
    let d = pred.sub(eps)?;
    let l = d.data().iter().map(|v| v * v).sum::<f64>() / d.numel() as f64;
    if !l.is_finite() {
        return Err(crate::Error::NumericDomain("non-finite diffusion loss".into()));
    }
    Ok(l)
}

/// One training example set: clean inputs, timesteps, resolved labels, noise.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub x0: Tensor,
    pub t: Vec<usize>,
    pub y: Vec<usize>,
    pub eps: Tensor,
}

impl TrainBatch {
    /// Draw timesteps, noise and label dropout for `x0` with labels `labels`.
    pub fn draw<R: Rng + ?Sized>(
        x0: Tensor,
        labels: &[usize],
        num_classes: usize,
        cfg_dropout: f64,
        sched: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<Self> {
        let b = x0.shape().first().copied().unwrap_or(0);
        if labels.len() != b {
            return Err(shape_err!("{} labels for batch {b}", labels.len()));
        }
        let t = (0..b).map(|_| rng.random_range(0..sched.steps())).collect();
        let y = labels
            .iter()
            .map(|&l| resolve_label(Some(l), num_classes, true, cfg_dropout, rng))
            .collect::<Result<_>>()?;
        let eps = Tensor::randn(x0.shape().to_vec(), rng);
        Ok(Self { x0, t, y, eps })
    }
}

/// Loss terms of one optimizer step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub loss: f64,
    pub l_diff: f64,
    pub l_kd: f64,
    pub l_balance: f64,
}

/// Graph pieces of the training objective for one batch.
pub struct LossGraph {
    pub x_t: Var,
    pub eps_pred: Var,
    pub l_diff: Var,
    pub l_balance: Option<Var>,
}

/// Build `L_diff` (+ summed MoE balance losses) for `batch` on `tape`.
pub fn loss_graph<'a>(
    model: &'a DiTModel,
    tape: &mut Tape<'a>,
    p: &Bound,
    sched: &NoiseSchedule,
    batch: &TrainBatch,
) -> Result<LossGraph> {
    let xt = q_sample_batch(sched, &batch.x0, &batch.t, &batch.eps)?;
    let x_t = tape.constant(xt);
    let out = model.forward(tape, p, x_t, &batch.t, &batch.y)?;
    let eps_pred = tape.slice_axis(out.out, 1, 0, model.config.in_channels)?;
    let target = tape.constant(batch.eps.clone());
    let l_diff = tape.mse(eps_pred, target)?;
    let alpha = model.config.moe.as_ref().map_or(0.0, |m| m.balance_alpha);
    let mut l_balance: Option<Var> = None;
    for stats in &out.routing {
        let b = balance_loss_var(tape, stats, alpha)?;
        l_balance = Some(match l_balance {
            Some(acc) => tape.add(acc, b)?,
            None => b,
        });
    }
    Ok(LossGraph { x_t, eps_pred, l_diff, l_balance })
}

/// Forward, backward and one AdamW update on `batch`.
pub fn train_step(model: &mut DiTModel, opt: &mut AdamW, sched: &NoiseSchedule, batch: &TrainBatch) -> Result<StepLoss> {
    let (grads, losses) = {
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, true)?;
        let g = loss_graph(model, &mut tape, &p, sched, batch)?;
        let total = match g.l_balance {
            Some(b) => tape.add(g.l_diff, b)?,
            None => g.l_diff,
        };
        tape.backward(total)?;
        let losses = StepLoss {
            loss: tape.value(total).item(),
            l_diff: tape.value(g.l_diff).item(),
            l_kd: 0.0,
            l_balance: g.l_balance.map_or(0.0, |b| tape.value(b).item()),
        };
        (p.grads(&tape), losses)
    };
    opt.step(&mut model.params, &grads)?;
    Ok(losses)
}

/// Ancestral DDPM sampling from pure noise on `steps` respaced timesteps,
/// with classifier-free guidance when `cfg_scale ≠ 1`. One label per sample.
pub fn ddpm_sample_loop<D: Denoiser + ?Sized>(
    model: &D,
    sched: &NoiseSchedule,
    y: &[usize],
    steps: usize,
    cfg_scale: f64,
    seed: u64,
) -> Result<Tensor> {
    let ts = sched.respaced(steps)?;
    let b = y.len();
    let (c, s) = (model.in_channels(), model.input_size());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::randn([b, c, s, s], &mut rng);
    let guided = cfg_scale != 1.0;
    let per = c * s * s;
    for i in (0..ts.len()).rev() {
        let t = ts[i];
        let ab = sched.alpha_bars[t];
        let ab_prev = if i == 0 { 1.0 } else { sched.alpha_bars[ts[i - 1]] };
        let beta = 1.0 - ab / ab_prev;
        let eps = if guided {
            let mut xx = x.data().to_vec();
            xx.extend_from_slice(x.data());
            let xx = Tensor::new([2 * b, c, s, s], xx)?;
            let tt = vec![t; 2 * b];
            let mut yy = y.to_vec();
            yy.extend(std::iter::repeat_n(model.null_label(), b));
            let both = model.predict_eps(&xx, &tt, &yy)?;
            let cond = Tensor::new([b, c, s, s], both.data()[..b * per].to_vec())?;
            let uncond = Tensor::new([b, c, s, s], both.data()[b * per..].to_vec())?;
            cfg_combine(&cond, &uncond, cfg_scale)?
        } else {
            model.predict_eps(&x, &vec![t; b], y)?
        };
        eps.ensure_finite("predicted noise")?;
        let x0 = x.zip_map(&eps, |xv, e| ((xv - (1.0 - ab).sqrt() * e) / ab.sqrt()).clamp(-1.0, 1.0))?;
        let c0 = beta * ab_prev.sqrt() / (1.0 - ab);
        let ct = (1.0 - ab_prev) * (1.0 - beta).sqrt() / (1.0 - ab);
        let mean = x0.zip_map(&x, |a, xv| c0 * a + ct * xv)?;
        x = if i > 0 {
            let z = Tensor::randn([b, c, s, s], &mut rng);
            mean.zip_map(&z, |m, zv| m + beta.sqrt() * zv)?
        } else {
            mean
        };
    }
    Ok(x)
}
