//! Data-parallel training loop.
//!
//! Each sample of a batch runs forward and backward on a private tape with
//! its own keyed random stream; gradients are summed in sample order, so the
//! result does not depend on the thread count.

use std::sync::Arc;
use std::time::Instant;

use rand::Rng as _;

use crate::data::VideoRecord;
use crate::denoiser::Denoiser;
use crate::diffusion::{build_pyramid, joint_loss, NoiseSchedule};
use crate::numerics::{Checkpoint, OptimConfig, OptimizerState, Tape, Tensor};
use crate::patchgeom::{OffsetMode, PyramidSpec};
use crate::{par, rng, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub seed: u64,
    /// Probability of replacing the label with the null class.
    pub cond_dropout: f64,
    pub offset_mode: OffsetMode,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            batch_size: 4,
            seed: 0,
            cond_dropout: 0.1,
            offset_mode: OffsetMode::VoxelAligned,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    /// Step counter after the update.
    pub step: u64,
    pub loss: f64,
    pub level_losses: Vec<f64>,
    pub lr: f64,
    pub seconds: f64,
}

pub struct Trainer {
    pub model: Denoiser,
    pub spec: PyramidSpec,
    pub schedule: NoiseSchedule,
    pub optim: OptimizerState,
    pub settings: TrainSettings,
    dataset: Arc<Vec<VideoRecord>>,
}

struct SampleResult {
    grads: Vec<Tensor<f32>>,
    loss: f64,
    levels: Vec<f64>,
}

impl Trainer {
    pub fn new(
        model: Denoiser,
        spec: PyramidSpec,
        schedule: NoiseSchedule,
        optim: OptimConfig,
        settings: TrainSettings,
        dataset: Arc<Vec<VideoRecord>>,
    ) -> Result<Self> {
        schedule.validate()?;
        if settings.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&settings.cond_dropout) {
            return Err(Error::config("train.cond_dropout", "must lie in [0, 1]"));
        }
        if dataset.is_empty() {
            return Err(Error::config("data.count", "dataset is empty"));
        }
        if model.config.levels != spec.levels || model.config.patch != spec.patch {
            return Err(Error::config(
                "model.levels",
                "model levels and patch must match the pyramid",
            ));
        }
        for rec in dataset.iter() {
            crate::data::check_resolution(rec, spec.full)?;
            if rec.class >= model.config.num_classes {
                return Err(Error::UnknownClass {
                    id: rec.class,
                    classes: model.config.num_classes,
                });
            }
        }
        let optim = OptimizerState::new(optim, &model.params.to_tensors());
        Ok(Self {
            model,
            spec,
            schedule,
            optim,
            settings,
            dataset,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.optim.step
    }

    fn sample(&self, step: u64, index: usize) -> Result<SampleResult> {
        let mut r = rng::stream(self.settings.seed, &[step, index as u64]);
        let rec = &self.dataset[r.random_range(0..self.dataset.len())];
        let class = if r.random::<f64>() < self.settings.cond_dropout {
            None
        } else {
            Some(rec.class)
        };
        let pyramid = build_pyramid(&rec.video, &self.spec, &self.schedule, self.settings.offset_mode, &mut r)?;
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, true);
        let (loss, levels) = joint_loss(&mut tape, &self.model, &bound, &pyramid, class, &self.schedule)?;
        let loss_value = tape.value(loss).item() as f64;
        let levels: Vec<f64> = levels.iter().map(|&l| tape.value(l).item() as f64).collect();
        if !loss_value.is_finite() {
            return Err(Error::NumericAbort(format!("loss is {loss_value} at step {step}")));
        }
        let mut grads = tape.backward(loss)?;
        let grads = bound
            .vars()
            .iter()
            .enumerate()
            .map(|(i, &v)| grads.take(v).unwrap_or_else(|| Tensor::zeros(self.model.params.get(i).shape())))
            .collect();
        Ok(SampleResult {
            grads,
            loss: loss_value,
            levels,
        })
    }

    /// One optimizer step on a freshly drawn batch.
    pub fn step(&mut self) -> Result<StepStats> {
        let start = Instant::now();
        let step = self.optim.step;
        let idx: Vec<usize> = (0..self.settings.batch_size).collect();
        let results = par::try_map(&idx, |&i| self.sample(step, i))?;
        let inv = 1.0 / results.len() as f64;
        let mut grads = results[0].grads.clone();
        for r in &results[1..] {
            for (g, s) in grads.iter_mut().zip(&r.grads) {
                g.add_assign(s)?;
            }
        }
        for g in grads.iter_mut() {
            *g = g.scale(inv);
        }
        let loss = results.iter().map(|r| r.loss).sum::<f64>() * inv;
        let levels = self.spec.levels;
        let level_losses = (0..levels)
            .map(|l| results.iter().map(|r| r.levels[l]).sum::<f64>() * inv)
            .collect();
        let names = self.model.params.names().to_vec();
        let mut params = self.model.params.take_tensors();
        let lr = self.optim.update(&names, &mut params, &grads);
        self.model.params.put_tensors(params);
        let lr = lr?;
        Ok(StepStats {
            step: self.optim.step,
            loss,
            level_losses,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    pub fn checkpoint(&self, config_hash: u64, config_text: &str) -> Checkpoint {
        Checkpoint::from_state(
            self.model.params.names(),
            &self.model.params.to_tensors(),
            &self.optim,
            config_hash,
            config_text,
        )
    }

    /// Restores parameters and optimizer state from `ckpt`.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.model.params.set_all(&ckpt.names, ckpt.params.clone())?;
        self.optim.step = ckpt.step;
        self.optim.m = ckpt.m.clone();
        self.optim.v = ckpt.v.clone();
        self.optim.ema = ckpt.ema.clone();
        Ok(())
    }

    /// A copy of the model carrying the EMA weights.
    pub fn ema_model(&self) -> Result<Denoiser> {
        let mut m = self.model.clone();
        m.params.set_all(self.model.params.names(), self.optim.ema.clone())?;
        Ok(m)
    }
}

/// Forward and backward passes of the joint loss for `batch` pyramids cut
/// from `video`, in parallel; returns the mean loss. Gradients are summed and
/// discarded.
pub fn forward_backward(
    model: &Denoiser,
    spec: &PyramidSpec,
    schedule: &NoiseSchedule,
    video: &Tensor<f32>,
    batch: usize,
    seed: u64,
) -> Result<f64> {
    let idx: Vec<u64> = (0..batch as u64).collect();
    let losses = par::try_map(&idx, |&i| {
        let mut r = rng::stream(seed, &[i]);
        let pyramid = build_pyramid(video, spec, schedule, OffsetMode::VoxelAligned, &mut r)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let (loss, _) = joint_loss(&mut tape, model, &bound, &pyramid, Some(0), schedule)?;
        let value = tape.value(loss).item() as f64;
        tape.backward(loss)?;
        Ok::<_, Error>(value)
    })?;
    Ok(losses.iter().sum::<f64>() / batch.max(1) as f64)
}

/// Mean wall-clock seconds of one [`forward_backward`] call over `iters`
/// timed repetitions, after one warm-up call.
pub fn time_forward_backward(
    model: &Denoiser,
    spec: &PyramidSpec,
    schedule: &NoiseSchedule,
    video: &Tensor<f32>,
    batch: usize,
    iters: usize,
) -> Result<f64> {
    forward_backward(model, spec, schedule, video, batch, 0)?;
    let start = Instant::now();
    for i in 0..iters {
        forward_backward(model, spec, schedule, video, batch, i as u64 + 1)?;
    }
    Ok(start.elapsed().as_secs_f64() / iters.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SyntheticSpec};
    use crate::denoiser::DenoiserConfig;

    fn trainer(batch: usize) -> Trainer {
        let cfg = DenoiserConfig {
            patch: [2, 4, 4],
            levels: 2,
            num_blocks: 2,
            num_levels_per_block: vec![1, 2],
            num_latents: 4,
            latent_dim: 8,
            token_dim: 8,
            heads: 2,
            fourier_features: 4,
            ..Default::default()
        };
        let spec = PyramidSpec::new(2, [2, 4, 4], [4, 8, 8]).unwrap();
        let data = generate_dataset(
            &SyntheticSpec {
                resolution: [4, 8, 8],
                ..Default::default()
            },
            8,
        )
        .unwrap();
        Trainer::new(
            Denoiser::new(cfg, 1).unwrap(),
            spec,
            NoiseSchedule::default(),
            OptimConfig {
                warmup_steps: 2,
                total_steps: 10,
                ..Default::default()
            },
            TrainSettings {
                batch_size: batch,
                ..Default::default()
            },
            Arc::new(data),
        )
        .unwrap()
    }

    #[test]
    fn steps_are_deterministic_across_thread_counts() {
        let run = |threads| {
            par::with_threads(threads, || {
                let mut t = trainer(3);
                for _ in 0..3 {
                    t.step().unwrap();
                }
                t.model.params.to_tensors()
            })
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let mut a = trainer(2);
        for _ in 0..4 {
            a.step().unwrap();
        }
        let mut b = trainer(2);
        for _ in 0..2 {
            b.step().unwrap();
        }
        let ckpt = Checkpoint::from_bytes(&b.checkpoint(0, "").to_bytes()).unwrap();
        let mut c = trainer(2);
        c.restore(&ckpt).unwrap();
        for _ in 0..2 {
            c.step().unwrap();
        }
        assert_eq!(a.model.params.to_tensors(), c.model.params.to_tensors());
        assert_eq!(a.optim, c.optim);
    }

    #[test]
    fn first_step_has_zero_lr_and_changes_nothing_but_moments() {
        let mut t = trainer(1);
        let before = t.model.params.to_tensors();
        let s = t.step().unwrap();
        assert_eq!(s.lr, 0.0);
        assert_eq!(s.level_losses.len(), 2);
        assert!(s.loss.is_finite());
        assert_eq!(t.model.params.to_tensors(), before);
    }
}
