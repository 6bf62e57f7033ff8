//! Continuous-σ diffusion: noise sampling, preconditioning, the joint
//! training loss and reverse-process steppers.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::denoiser::{patchify, Bound, unpatchify, ContextSource, Denoiser};
use crate::numerics::{Elem, Tape, Tensor, Var};
use crate::patchgeom::{extract_patch, extract_patch_resampled, sample_pyramid_coords, OffsetMode, PatchCoords, PyramidSpec};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub sigma_data: f64,
    pub p_mean: f64,
    pub p_std: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Per-level attenuation λ: level ℓ draws are scaled by λ^ℓ.
    pub level_decay: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma_data: 0.5,
            p_mean: -1.2,
            p_std: 1.2,
            sigma_min: 0.002,
            sigma_max: 80.0,
            level_decay: 0.5,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_data > 0.0) {
            return Err(Error::config("schedule.sigma_data", "must be positive"));
        }
        if !(self.p_std >= 0.0) || !self.p_mean.is_finite() {
            return Err(Error::config("schedule.p_std", "must be finite and non-negative"));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) || !self.sigma_max.is_finite() {
            return Err(Error::config(
                "schedule.sigma_min",
                "need 0 < sigma_min < sigma_max < inf",
            ));
        }
        if !(self.level_decay > 0.0 && self.level_decay <= 1.0) {
            return Err(Error::config("schedule.level_decay", "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Independent per-level noise levels: `ln σ_ℓ ~ N(P_mean + ℓ ln λ, P_std)`,
    /// clamped to `[σ_min, σ_max]`.
    pub fn sample_sigmas(&self, levels: usize, rng: &mut Rng) -> Vec<f64> {
        (0..levels)
            .map(|l| {
                let z: f64 = rng.sample(StandardNormal);
                let ln = self.p_mean + l as f64 * self.level_decay.ln() + self.p_std * z;
                ln.exp().clamp(self.sigma_min, self.sigma_max)
            })
            .collect()
    }
}

/// Preconditioning coefficients at one noise level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Precond {
    pub c_in: f64,
    pub c_skip: f64,
    pub c_out: f64,
    pub c_noise: f64,
}

pub fn precondition(sigma: f64, sigma_data: f64) -> Result<Precond> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Schedule(format!("sigma must be positive and finite, got {sigma}")));
    }
    let s2 = sigma * sigma + sigma_data * sigma_data;
    Ok(Precond {
        c_in: 1.0 / s2.sqrt(),
        c_skip: sigma_data * sigma_data / s2,
        c_out: sigma * sigma_data / s2.sqrt(),
        c_noise: 0.25 * sigma.ln(),
    })
}

/// Loss weight `(σ² + σ_d²) / (σ σ_d)²`; equals `1 / c_out²`.
pub fn loss_weight(sigma: f64, sigma_data: f64) -> f64 {
    (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data).powi(2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    /// Steps at level 0; level ℓ uses `max(N₀ / 2^ℓ, min_steps)`.
    pub steps: usize,
    pub min_steps: usize,
    pub rho: f64,
    /// Levels `0..heun_levels` use the second-order correction.
    pub heun_levels: usize,
    /// Stochastic churn on level 0 (0 disables it).
    pub churn: f64,
    pub churn_min: f64,
    pub churn_max: f64,
    pub churn_noise: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 32,
            min_steps: 4,
            rho: 7.0,
            heun_levels: usize::MAX,
            churn: 0.0,
            churn_min: 0.0,
            churn_max: f64::INFINITY,
            churn_noise: 1.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_steps < 1 {
            return Err(Error::config("sampler.min_steps", "must be at least 1"));
        }
        if self.steps < self.min_steps {
            return Err(Error::config("sampler.steps", "must be at least sampler.min_steps"));
        }
        if !(self.rho > 0.0) {
            return Err(Error::config("sampler.rho", "must be positive"));
        }
        if !(self.churn >= 0.0) || !(self.churn_noise >= 0.0) {
            return Err(Error::config("sampler.churn", "must be non-negative"));
        }
        Ok(())
    }

    pub fn steps_at(&self, level: usize) -> usize {
        (self.steps >> level.min(63)).max(self.min_steps)
    }

    pub fn options_at(&self, level: usize) -> StepOptions {
        StepOptions {
            heun: level < self.heun_levels,
            churn: if level == 0 { self.churn } else { 0.0 },
            churn_min: self.churn_min,
            churn_max: self.churn_max,
            churn_noise: self.churn_noise,
            steps: self.steps_at(level),
        }
    }
}

/// Decreasing noise levels for one pyramid level, from `λ^ℓ σ_max` to
/// `σ_min` in ρ-power spacing, followed by a final 0.
pub fn sigma_grid(sampler: &SamplerConfig, schedule: &NoiseSchedule, level: usize) -> Result<Vec<f64>> {
    let n = sampler.steps_at(level);
    let hi = schedule.level_decay.powi(level as i32) * schedule.sigma_max;
    let lo = schedule.sigma_min;
    if !(hi > lo) {
        return Err(Error::Schedule(format!(
            "level {level} starts at {hi}, not above sigma_min {lo}"
        )));
    }
    let (a, b) = (hi.powf(1.0 / sampler.rho), lo.powf(1.0 / sampler.rho));
    let mut grid: Vec<f64> = (0..n)
        .map(|i| {
            if n == 1 {
                hi
            } else {
                (a + i as f64 / (n - 1) as f64 * (b - a)).powf(sampler.rho)
            }
        })
        .collect();
    if n > 1 {
        grid[0] = hi;
        grid[n - 1] = lo;
    }
    grid.push(0.0);
    if grid.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::Schedule(format!("grid for level {level} is not strictly decreasing")));
    }
    Ok(grid)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOptions {
    pub heun: bool,
    pub churn: f64,
    pub churn_min: f64,
    pub churn_max: f64,
    pub churn_noise: f64,
    /// Total step count of the grid; scales the churn amount.
    pub steps: usize,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self {
            heun: false,
            churn: 0.0,
            churn_min: 0.0,
            churn_max: f64::INFINITY,
            churn_noise: 1.0,
            steps: 1,
        }
    }
}

/// One reverse step from `sigma` to `next` along the probability-flow ODE.
///
/// `denoise(x, σ)` returns `D(x; σ)`. With churn enabled, `rng` supplies the
/// fresh noise; it is otherwise untouched.
pub fn denoise_step<T: Elem, F>(
    x: &Tensor<T>,
    sigma: f64,
    next: f64,
    opts: &StepOptions,
    rng: &mut Rng,
    mut denoise: F,
) -> Result<Tensor<T>>
where
    F: FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
{
    if !(sigma > next && next >= 0.0) {
        return Err(Error::Schedule(format!("step from {sigma} to {next} is not decreasing")));
    }
    let gamma = if opts.churn > 0.0 && sigma >= opts.churn_min && sigma <= opts.churn_max {
        (opts.churn / opts.steps.max(1) as f64).min(std::f64::consts::SQRT_2 - 1.0)
    } else {
        0.0
    };
    let (x_hat, s_hat) = if gamma > 0.0 {
        let s_hat = sigma * (1.0 + gamma);
        let amp = (s_hat * s_hat - sigma * sigma).sqrt() * opts.churn_noise;
        let mut noisy = x.clone();
        for v in noisy.data_mut() {
            *v = *v + T::of(amp * rng.sample::<f64, _>(StandardNormal));
        }
        (noisy, s_hat)
    } else {
        (x.clone(), sigma)
    };
    let d0 = direction(&x_hat, &denoise(&x_hat, s_hat)?, s_hat)?;
    let h = next - s_hat;
    let euler = x_hat.zip_map(&d0, "denoise_step", |a, d| a + T::of(h) * d)?;
    if !opts.heun || next == 0.0 {
        return Ok(euler);
    }
    let d1 = direction(&euler, &denoise(&euler, next)?, next)?;
    let half = T::of(0.5 * h);
    let mut out = x_hat;
    for ((o, &a), &b) in out.data_mut().iter_mut().zip(d0.data()).zip(d1.data()) {
        *o = *o + half * (a + b);
    }
    Ok(out)
}

fn direction<T: Elem>(x: &Tensor<T>, denoised: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    let inv = T::of(1.0 / sigma);
    x.zip_map(denoised, "denoise_step", |a, d| (a - d) * inv)
}

/// Runs a full grid from pure noise at `grid[0]`.
pub fn sample_grid<T: Elem, F>(
    init_noise: &Tensor<T>,
    grid: &[f64],
    opts: &StepOptions,
    rng: &mut Rng,
    mut denoise: F,
) -> Result<Tensor<T>>
where
    F: FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
{
    let mut x = init_noise.scale(grid[0]);
    for w in grid.windows(2) {
        x = denoise_step(&x, w[0], w[1], opts, rng, &mut denoise)?;
    }
    Ok(x)
}

/// Clean patches, coordinates and noise levels for one training sample.
#[derive(Clone, Debug)]
pub struct PatchPyramid {
    pub coords: Vec<PatchCoords>,
    pub clean: Vec<Tensor<f32>>,
    pub noisy: Vec<Tensor<f32>>,
    pub sigmas: Vec<f64>,
}

/// Samples nested coordinates, extracts patches and corrupts each level
/// independently.
pub fn build_pyramid(
    video: &Tensor<f32>,
    spec: &PyramidSpec,
    schedule: &NoiseSchedule,
    mode: OffsetMode,
    rng: &mut Rng,
) -> Result<PatchPyramid> {
    let expect = [spec.full[0], spec.full[1], spec.full[2]];
    if video.rank() != 4 || video.shape()[1..] != expect {
        return Err(Error::ShapeMismatch {
            op: "build_pyramid",
            lhs: video.shape().to_vec(),
            rhs: expect.to_vec(),
        });
    }
    let coords = sample_pyramid_coords(spec, mode, rng);
    let clean = coords
        .iter()
        .map(|c| match mode {
            OffsetMode::VoxelAligned => extract_patch(video, c, spec.patch),
            OffsetMode::Continuous => extract_patch_resampled(video, c, spec.patch),
        })
        .collect::<Result<Vec<_>>>()?;
    let sigmas = schedule.sample_sigmas(coords.len(), rng);
    let noisy = clean
        .iter()
        .zip(&sigmas)
        .map(|(p, &s)| {
            let mut n = p.clone();
            for v in n.data_mut() {
                *v += (s * rng.sample::<f64, _>(StandardNormal)) as f32;
            }
            n
        })
        .collect();
    Ok(PatchPyramid {
        coords,
        clean,
        noisy,
        sigmas,
    })
}

/// Joint loss of one pyramid on `tape`.
///
/// Returns the total `Σ_ℓ w(σ_ℓ)·mean((D_ℓ − p_ℓ)²) / (L+1)` and the
/// per-level terms. The weighted D-space error equals the unweighted error of
/// the raw network output against `(p − c_skip·x̃) / c_out`.
pub fn joint_loss<T: Elem>(
    tape: &mut Tape<T>,
    model: &Denoiser<T>,
    bound: &Bound,
    pyramid: &PatchPyramid,
    class: Option<usize>,
    schedule: &NoiseSchedule,
) -> Result<(Var, Vec<Var>)> {
    let tok = model.config.tokenizer;
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for (l, ((clean, noisy), &sigma)) in pyramid.clean.iter().zip(&pyramid.noisy).zip(&pyramid.sigmas).enumerate() {
        let pc = precondition(sigma, schedule.sigma_data)?;
        let x: Tensor<T> = noisy.cast::<T>().scale(pc.c_in);
        inputs.push(model.level_input(tape, l, &x, pc.c_noise, class, pyramid.coords[l])?);
        let target = clean
            .cast::<T>()
            .zip_map(&noisy.cast::<T>(), "joint_loss", |p, n| {
                (p - T::of(pc.c_skip) * n) * T::of(1.0 / pc.c_out)
            })?;
        targets.push(patchify(&target, tok)?);
    }
    let out = model.forward(tape, bound, &inputs, None)?;
    let mut levels = Vec::new();
    let mut total: Option<Var> = None;
    for (o, t) in out.outputs.iter().zip(targets) {
        let t = tape.constant(t);
        let l = tape.mse_loss(*o, t)?;
        levels.push(l);
        total = Some(match total {
            None => l,
            Some(a) => tape.add(a, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidShape {
        op: "joint_loss",
        msg: "empty pyramid".into(),
    })?;
    let total = tape.scale(total, 1.0 / levels.len() as f64)?;
    Ok((total, levels))
}

/// One patch to denoise with [`denoise_patches`].
#[derive(Clone, Debug)]
pub struct PatchQuery<'a> {
    pub level: usize,
    pub x: &'a Tensor<f32>,
    pub sigma: f64,
    pub coords: PatchCoords,
}

pub struct Denoised {
    /// `D(x̃; σ)` per query, `[C, r_f, r_h, r_w]`.
    pub preds: Vec<Tensor<f32>>,
    /// Block input token grids per query and block, `[N, d]`.
    pub block_inputs: Vec<Vec<Option<Tensor<f32>>>>,
}

/// Evaluates the preconditioned denoiser `D` on patches of strictly
/// increasing level, reading missing parents from `external`.
pub fn denoise_patches(
    model: &Denoiser,
    queries: &[PatchQuery],
    class: Option<usize>,
    sigma_data: f64,
    external: Option<&dyn ContextSource<f32>>,
) -> Result<Denoised> {
    let mut tape = Tape::inference();
    let bound = model.bind(&mut tape, false);
    let mut inputs = Vec::with_capacity(queries.len());
    let mut pcs = Vec::with_capacity(queries.len());
    for q in queries {
        let pc = precondition(q.sigma, sigma_data)?;
        inputs.push(model.level_input(&mut tape, q.level, &q.x.scale(pc.c_in), pc.c_noise, class, q.coords)?);
        pcs.push(pc);
    }
    let out = model.forward(&mut tape, &bound, &inputs, external)?;
    let cfg = &model.config;
    let mut preds = Vec::with_capacity(queries.len());
    for ((q, pc), &o) in queries.iter().zip(&pcs).zip(&out.outputs) {
        let f = unpatchify(tape.value(o), cfg.channels, cfg.patch, cfg.tokenizer)?;
        let (skip, cout) = (pc.c_skip as f32, pc.c_out as f32);
        preds.push(q.x.zip_map(&f, "denoise", |x, f| skip * x + cout * f)?);
    }
    let block_inputs = out
        .block_inputs
        .iter()
        .map(|per| per.iter().map(|v| v.map(|v| tape.value(v).clone())).collect())
        .collect();
    Ok(Denoised { preds, block_inputs })
}
