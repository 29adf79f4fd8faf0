//! Seeded training and distillation loops over a [`Dataset`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diffusion::{train_step, NoiseSchedule, StepLoss, TrainBatch};
use crate::distill::distill_train_step;
use crate::error::{input_err, Error, Result};
use crate::model::DiTModel;
use crate::optim::{AdamW, AdamWConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: AdamWConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self { steps: 500, batch_size: 8, seed: 0, optimizer: AdamWConfig::default() }
    }
}

fn check(model: &DiTModel, data: &Dataset, s: &TrainSettings) -> Result<()> {
    if data.is_empty() {
        return Err(input_err!("empty dataset"));
    }
    if s.batch_size == 0 {
        return Err(input_err!("batch size must be positive"));
    }
    if data.num_classes > model.config.num_classes {
        return Err(input_err!(
            "dataset has {} classes, model embeds {}",
            data.num_classes,
            model.config.num_classes
        ));
    }
    let shape = data.latents.shape();
    let c = &model.config;
    if shape[1] != c.in_channels || shape[2] != c.input_size || shape[3] != c.input_size {
        return Err(input_err!(
            "dataset latents {:?} do not match model input [{}, {}, {}]",
            &shape[1..],
            c.in_channels,
            c.input_size,
            c.input_size
        ));
    }
    Ok(())
}

fn finite(l: &StepLoss, step: usize) -> Result<()> {
    if l.loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericDomain(format!("loss diverged at step {step}")))
    }
}

/// Run `s.steps` AdamW steps of the ε-objective. `on_step` sees every loss and the updated model.
pub fn train(
    model: &mut DiTModel,
    data: &Dataset,
    s: &TrainSettings,
    mut on_step: impl FnMut(usize, &StepLoss, &DiTModel) -> Result<()>,
) -> Result<Vec<StepLoss>> {
    check(model, data, s)?;
    let sched = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut opt = AdamW::new(s.optimizer);
    let mut out = Vec::with_capacity(s.steps);
    for step in 0..s.steps {
        let (x0, labels) = data.sample_batch(s.batch_size, &mut rng)?;
        let c = &model.config;
        let batch = TrainBatch::draw(x0, &labels, c.num_classes, c.cfg_dropout, &sched, &mut rng)?;
        let l = train_step(model, &mut opt, &sched, &batch)?;
        finite(&l, step)?;
        on_step(step, &l, model)?;
        out.push(l);
    }
    Ok(out)
}

/// Distil a frozen `teacher` into `student` with KD weight `alpha`.
pub fn distill(
    student: &mut DiTModel,
    teacher: &DiTModel,
    data: &Dataset,
    s: &TrainSettings,
    alpha: f64,
    mut on_step: impl FnMut(usize, &StepLoss, &DiTModel) -> Result<()>,
) -> Result<Vec<StepLoss>> {
    check(student, data, s)?;
    let sched = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut opt = AdamW::new(s.optimizer);
    let mut out = Vec::with_capacity(s.steps);
    for step in 0..s.steps {
        let (x0, labels) = data.sample_batch(s.batch_size, &mut rng)?;
        let c = &student.config;
        let batch = TrainBatch::draw(x0, &labels, c.num_classes, c.cfg_dropout, &sched, &mut rng)?;
        let l = distill_train_step(student, teacher, &mut opt, &sched, &batch, alpha)?;
        finite(&l, step)?;
        on_step(step, &l, student)?;
        out.push(l);
    }
    Ok(out)
}
