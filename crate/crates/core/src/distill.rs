//! Teacher-student distillation of the ε-prediction objective.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::diffusion::{loss_graph, q_sample_batch, Denoiser, NoiseSchedule, StepLoss, TrainBatch};
use crate::error::{config_err, Error, Result};
use crate::model::DiTModel;
use crate::numerics::{Tape, Tensor};
use crate::optim::{AdamW, AdamWConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Weight of the teacher-matching term.
    pub alpha: f64,
    pub teacher: PathBuf,
    pub student: ModelConfig,
    #[serde(default)]
    pub optimizer: AdamWConfig,
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        self.student.validate()
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(config_err!("distillation alpha {alpha} outside [0, 1]"));
    }
    Ok(())
}

fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    let d = a.sub(b)?;
    Ok(d.data().iter().map(|v| v * v).sum::<f64>() / d.numel().max(1) as f64)
}

/// `(1−α)·MSE(ε, ε_s) + α·MSE(ε_s, ε_t)`
pub fn combined_distill_loss(student: &Tensor, teacher: &Tensor, truth: &Tensor, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    student.expect_same_shape(teacher)?;
    student.expect_same_shape(truth)?;
    Ok((1.0 - alpha) * mse(truth, student)? + alpha * mse(student, teacher)?)
}

/// One distillation update: teacher and student see the same `x_t`; only the
/// student receives gradients and an AdamW step.
pub fn distill_train_step(
    student: &mut DiTModel,
    teacher: &DiTModel,
    opt: &mut AdamW,
    sched: &NoiseSchedule,
    batch: &TrainBatch,
    alpha: f64,
) -> Result<StepLoss> {
    check_alpha(alpha)?;
    if !teacher.params.is_frozen() {
        return Err(Error::Contract("teacher must be frozen before distillation".into()));
    }
    if teacher.config.in_channels != student.config.in_channels
        || teacher.config.input_size != student.config.input_size
    {
        return Err(config_err!("teacher and student disagree on the latent geometry"));
    }
    let xt = q_sample_batch(sched, &batch.x0, &batch.t, &batch.eps)?;
    let teacher_eps = teacher.predict_eps(&xt, &batch.t, &batch.y)?;
    let (grads, losses) = {
        let mut tape = Tape::new();
        let p = student.params.bind(&mut tape, true)?;
        let g = loss_graph(student, &mut tape, &p, sched, batch)?;
        let te = tape.constant(teacher_eps);
        let l_kd = tape.mse(g.eps_pred, te)?;
        let a = tape.scale(g.l_diff, 1.0 - alpha);
        let b = tape.scale(l_kd, alpha);
        let mut total = tape.add(a, b)?;
        if let Some(bal) = g.l_balance {
            total = tape.add(total, bal)?;
        }
        tape.backward(total)?;
        let losses = StepLoss {
            loss: tape.value(total).item(),
            l_diff: tape.value(g.l_diff).item(),
            l_kd: tape.value(l_kd).item(),
            l_balance: g.l_balance.map_or(0.0, |v| tape.value(v).item()),
        };
        (p.grads(&tape), losses)
    };
    opt.step(&mut student.params, &grads)?;
    Ok(losses)
}

/// AdamW with the distillation defaults.
pub fn distill_optimizer() -> AdamW {
    AdamW::new(AdamWConfig::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> Tensor {
        Tensor::from_vec(vec![v])
    }

    #[test]
    fn loss_examples() {
        assert!((combined_distill_loss(&s(0.0), &s(1.0), &s(1.0), 0.3).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(combined_distill_loss(&s(0.5), &s(0.5), &s(0.5), 0.7).unwrap(), 0.0);
        assert_eq!(combined_distill_loss(&s(0.0), &s(2.0), &s(1.0), 0.0).unwrap(), 1.0);
        assert_eq!(combined_distill_loss(&s(0.0), &s(2.0), &s(1.0), 1.0).unwrap(), 4.0);
        assert!(combined_distill_loss(&s(0.0), &Tensor::zeros([2]), &s(1.0), 0.3).is_err());
        assert!(combined_distill_loss(&s(0.0), &s(0.0), &s(1.0), 1.5).is_err());
    }
}
