//! Hierarchical tiled inference.
//!
//! Levels are generated one after another. Each level's canvas is covered by
//! patch-sized tiles; every reverse step denoises all tiles independently and
//! averages their `x₀` predictions per voxel. Once a level is finished, one
//! clean pass over its tiles records the block-input token grids, which are
//! stitched into whole-video canvases and cached for the next level's context
//! fusion.

mod cache;
mod manifest;
mod recompute;

use std::time::Instant;

pub use cache::{read_spill, read_spill_file, spill_bytes, ActivationCache, CacheStats};
pub use manifest::{LevelRecord, Manifest};
pub use recompute::RecomputeContext;

use crate::denoiser::{ContextSource, Denoiser};
use crate::diffusion::{denoise_patches, denoise_step, sigma_grid, NoiseSchedule, PatchQuery, SamplerConfig};
use crate::numerics::Tensor;
use crate::patchgeom::{plan_tiles, Overlap, PyramidSpec, TilePlan};
use crate::{par, rng, Error, Result};

/// Copies the `patch`-sized window at `origin` out of a `[C, F, H, W]` canvas.
pub fn crop(canvas: &Tensor<f32>, origin: [usize; 3], patch: [usize; 3]) -> Result<Tensor<f32>> {
    let (c, dims) = canvas_dims(canvas)?;
    check_window(dims, origin, patch)?;
    let [_, h, w] = dims;
    let mut out = Vec::with_capacity(c * patch.iter().product::<usize>());
    let d = canvas.data();
    for ch in 0..c {
        for i in 0..patch[0] {
            for j in 0..patch[1] {
                let base = ((ch * dims[0] + origin[0] + i) * h + origin[1] + j) * w + origin[2];
                out.extend_from_slice(&d[base..base + patch[2]]);
            }
        }
    }
    Tensor::new(&[c, patch[0], patch[1], patch[2]], out)
}

fn canvas_dims(t: &Tensor<f32>) -> Result<(usize, [usize; 3])> {
    match *t.shape() {
        [c, f, h, w] => Ok((c, [f, h, w])),
        _ => Err(Error::InvalidShape {
            op: "canvas",
            msg: format!("expected [C, F, H, W], got {:?}", t.shape()),
        }),
    }
}

fn check_window(dims: [usize; 3], origin: [usize; 3], patch: [usize; 3]) -> Result<()> {
    if (0..3).any(|a| origin[a] + patch[a] > dims[a]) {
        return Err(Error::geometry(format!(
            "window {patch:?} at {origin:?} exceeds canvas {dims:?}"
        )));
    }
    Ok(())
}

/// Per-voxel mean of overlapping tile predictions.
pub fn fuse_tile_predictions(preds: &[Tensor<f32>], plan: &TilePlan) -> Result<Tensor<f32>> {
    if preds.len() != plan.len() || preds.is_empty() {
        return Err(Error::geometry(format!(
            "{} predictions for a {}-tile plan",
            preds.len(),
            plan.len()
        )));
    }
    let c = preds[0].shape()[0];
    let [f, h, w] = plan.canvas;
    let p = plan.patch;
    let mut acc = vec![0.0f64; c * f * h * w];
    for (pred, &o) in preds.iter().zip(&plan.origins) {
        if pred.shape() != [c, p[0], p[1], p[2]] {
            return Err(Error::ShapeMismatch {
                op: "fuse_tile_predictions",
                lhs: pred.shape().to_vec(),
                rhs: vec![c, p[0], p[1], p[2]],
            });
        }
        let src = pred.data();
        for ch in 0..c {
            for i in 0..p[0] {
                for j in 0..p[1] {
                    let s = ((ch * p[0] + i) * p[1] + j) * p[2];
                    let d = ((ch * f + o[0] + i) * h + o[1] + j) * w + o[2];
                    for k in 0..p[2] {
                        acc[d + k] += src[s + k] as f64;
                    }
                }
            }
        }
    }
    let cov = plan.coverage_grid();
    if let Some(v) = cov.iter().position(|&n| n == 0) {
        return Err(Error::geometry(format!("voxel {v} is not covered by any tile")));
    }
    let n = f * h * w;
    let data = acc
        .iter()
        .enumerate()
        .map(|(i, &s)| (s / cov[i % n] as f64) as f32)
        .collect();
    Tensor::new(&[c, f, h, w], data)
}

/// Averages per-tile token grids `[N, d]` into a whole-canvas grid
/// `[d, G_f, G_h, G_w]` on the token lattice.
pub fn stitch_tokens(tiles: &[&Tensor<f32>], plan: &TilePlan, tokenizer: [usize; 3]) -> Result<Tensor<f32>> {
    let g = [0, 1, 2].map(|a| plan.patch[a] / tokenizer[a]);
    let canvas = [0, 1, 2].map(|a| plan.canvas[a] / tokenizer[a]);
    let d = tiles.first().map(|t| t.shape()[1]).ok_or_else(|| Error::geometry("no tiles to stitch"))?;
    let n = g.iter().product::<usize>();
    let voxels = canvas.iter().product::<usize>();
    let mut acc = vec![0.0f64; d * voxels];
    let mut count = vec![0u32; voxels];
    for (t, o) in tiles.iter().zip(&plan.origins) {
        if t.shape() != [n, d] {
            return Err(Error::ShapeMismatch {
                op: "stitch_tokens",
                lhs: t.shape().to_vec(),
                rhs: vec![n, d],
            });
        }
        if (0..3).any(|a| o[a] % tokenizer[a] != 0) {
            return Err(Error::geometry(format!(
                "tile origin {o:?} is not on the token lattice {tokenizer:?}"
            )));
        }
        let to = [0, 1, 2].map(|a| o[a] / tokenizer[a]);
        for i in 0..g[0] {
            for j in 0..g[1] {
                for k in 0..g[2] {
                    let row = (i * g[1] + j) * g[2] + k;
                    let v = ((to[0] + i) * canvas[1] + to[1] + j) * canvas[2] + to[2] + k;
                    count[v] += 1;
                    for ch in 0..d {
                        acc[ch * voxels + v] += t.data()[row * d + ch] as f64;
                    }
                }
            }
        }
    }
    if count.contains(&0) {
        return Err(Error::geometry("token canvas has uncovered cells"));
    }
    let data = acc
        .iter()
        .enumerate()
        .map(|(i, &s)| (s / count[i % voxels] as f64) as f32)
        .collect();
    Tensor::new(&[d, canvas[0], canvas[1], canvas[2]], data)
}

/// Settings of one generation run.
#[derive(Clone, Debug)]
pub struct GenerateOptions {
    pub seed: u64,
    pub class: Option<usize>,
    pub overlap: [Overlap; 3],
    /// Read parent context from the activation cache; otherwise recompute it.
    pub use_cache: bool,
    pub cache_budget: usize,
    pub config_hash: u64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            class: None,
            overlap: [Overlap::None, Overlap::Half, Overlap::Half],
            use_cache: true,
            cache_budget: usize::MAX,
            config_hash: 0,
        }
    }
}

pub struct Sampler<'a> {
    pub model: &'a Denoiser,
    pub spec: PyramidSpec,
    pub schedule: NoiseSchedule,
    pub sampler: SamplerConfig,
}

/// Outcome of [`Sampler::sample_level`].
pub struct LevelResult {
    pub canvas: Tensor<f32>,
    pub record: LevelRecord,
}

impl<'a> Sampler<'a> {
    pub fn new(model: &'a Denoiser, spec: PyramidSpec, schedule: NoiseSchedule, sampler: SamplerConfig) -> Result<Self> {
        schedule.validate()?;
        sampler.validate()?;
        if model.config.levels != spec.levels || model.config.patch != spec.patch {
            return Err(Error::config("model.levels", "model levels and patch must match the pyramid"));
        }
        Ok(Self {
            model,
            spec,
            schedule,
            sampler,
        })
    }

    pub fn plan(&self, level: usize, overlap: [Overlap; 3]) -> Result<TilePlan> {
        let plan = plan_tiles(level, self.spec.level_canvas(level), self.spec.patch, overlap)?;
        let tok = self.model.config.tokenizer;
        for o in &plan.origins {
            if (0..3).any(|a| o[a] % tok[a] != 0) {
                return Err(Error::geometry(format!(
                    "tile stride does not align with tokenizer {tok:?}"
                )));
            }
        }
        Ok(plan)
    }

    /// `D` on every tile of `canvas` at noise level `sigma`, fused.
    fn denoise_canvas(
        &self,
        level: usize,
        plan: &TilePlan,
        canvas: &Tensor<f32>,
        sigma: f64,
        class: Option<usize>,
        external: Option<&dyn ContextSource<f32>>,
    ) -> Result<Tensor<f32>> {
        let idx: Vec<usize> = (0..plan.len()).collect();
        let preds = par::try_map(&idx, |&t| {
            let x = crop(canvas, plan.origins[t], plan.patch)?;
            let q = PatchQuery {
                level,
                x: &x,
                sigma,
                coords: plan.tiles[t],
            };
            let mut out = denoise_patches(self.model, &[q], class, self.schedule.sigma_data, external)?;
            Ok::<_, Error>(out.preds.remove(0))
        })?;
        fuse_tile_predictions(&preds, plan)
    }

    /// Samples one level's canvas, reading parent context from `external`.
    pub fn sample_level(
        &self,
        level: usize,
        opts: &GenerateOptions,
        external: Option<&dyn ContextSource<f32>>,
    ) -> Result<LevelResult> {
        if level >= self.spec.levels {
            return Err(Error::geometry(format!("level {level} outside the pyramid")));
        }
        if level > 0 && external.is_none() {
            return Err(Error::Cache(format!("level {level} needs parent context")));
        }
        let plan = self.plan(level, opts.overlap)?;
        let grid = sigma_grid(&self.sampler, &self.schedule, level)?;
        let step_opts = self.sampler.options_at(level);
        let dims = plan.canvas;
        let mut noise_rng = rng::stream(opts.seed, &[level as u64, 0]);
        let mut churn_rng = rng::stream(opts.seed, &[level as u64, 1]);
        let shape = [self.model.config.channels, dims[0], dims[1], dims[2]];
        let mut x = Tensor::<f32>::randn(&shape, 1.0, &mut noise_rng).scale(grid[0]);
        let mut step_ms = Vec::with_capacity(grid.len() - 1);
        for w in grid.windows(2) {
            let t0 = Instant::now();
            x = denoise_step(&x, w[0], w[1], &step_opts, &mut churn_rng, |x, s| {
                self.denoise_canvas(level, &plan, x, s, opts.class, external)
            })?;
            step_ms.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        Ok(LevelResult {
            canvas: x,
            record: LevelRecord {
                level,
                canvas: dims,
                sigmas: grid,
                tiles: plan.tiles.clone(),
                step_ms,
                final_pass_ms: 0.0,
            },
        })
    }

    /// Block-input token grids of every tile of a finished canvas, evaluated
    /// at `σ_min`; indexed `[tile][block]`.
    pub fn tile_activations(
        &self,
        level: usize,
        plan: &TilePlan,
        canvas: &Tensor<f32>,
        class: Option<usize>,
        external: Option<&dyn ContextSource<f32>>,
    ) -> Result<Vec<Vec<Option<Tensor<f32>>>>> {
        let idx: Vec<usize> = (0..plan.len()).collect();
        par::try_map(&idx, |&t| {
            let x = crop(canvas, plan.origins[t], plan.patch)?;
            let q = PatchQuery {
                level,
                x: &x,
                sigma: self.schedule.sigma_min,
                coords: plan.tiles[t],
            };
            let mut out = denoise_patches(self.model, &[q], class, self.schedule.sigma_data, external)?;
            Ok::<_, Error>(out.block_inputs.remove(0))
        })
    }

    /// Runs the clean pass over a finished level and stores the stitched
    /// canvases of every block that processes it.
    pub fn cache_level(
        &self,
        level: usize,
        plan: &TilePlan,
        canvas: &Tensor<f32>,
        class: Option<usize>,
        cache: &ActivationCache,
    ) -> Result<()> {
        let acts = self.tile_activations(level, plan, canvas, class, Some(cache))?;
        let load = &self.model.config.num_levels_per_block;
        for b in self.model.config.blocks_for_level(level) {
            if load[b] <= level + 1 {
                continue;
            }
            let tiles: Vec<&Tensor<f32>> = acts
                .iter()
                .map(|per| per[b].as_ref().ok_or_else(|| Error::Cache(format!("block {b} skipped level {level}"))))
                .collect::<Result<_>>()?;
            let stitched = stitch_tokens(&tiles, plan, self.model.config.tokenizer)?;
            cache.store(level, b, stitched)?;
        }
        Ok(())
    }

    /// Generates a full-resolution video level by level.
    pub fn generate(&self, opts: &GenerateOptions) -> Result<Generation> {
        let cache = ActivationCache::new(opts.cache_budget);
        let mut canvases: Vec<Tensor<f32>> = Vec::with_capacity(self.spec.levels);
        let mut records = Vec::with_capacity(self.spec.levels);
        for level in 0..self.spec.levels {
            let recompute;
            let external: Option<&dyn ContextSource<f32>> = if level == 0 {
                None
            } else if opts.use_cache {
                Some(&cache)
            } else {
                recompute = RecomputeContext::new(self, &canvases, opts.overlap, opts.class)?;
                Some(&recompute)
            };
            let mut res = self.sample_level(level, opts, external)?;
            if opts.use_cache && level + 1 < self.spec.levels {
                let t0 = Instant::now();
                let plan = self.plan(level, opts.overlap)?;
                self.cache_level(level, &plan, &res.canvas, opts.class, &cache)?;
                res.record.final_pass_ms = t0.elapsed().as_secs_f64() * 1e3;
            }
            canvases.push(res.canvas);
            records.push(res.record);
        }
        let manifest = Manifest {
            config_hash: opts.config_hash,
            seed: opts.seed,
            class: opts.class,
            levels: self.spec.levels,
            patch: self.spec.patch,
            full: self.spec.full,
            overlap: Overlap::format_axes(&opts.overlap),
            cache: opts.use_cache,
            records,
        };
        Ok(Generation {
            video: canvases.last().cloned().expect("at least one level"),
            levels: canvases,
            manifest,
            cache_stats: cache.stats(),
        })
    }
}

pub struct Generation {
    pub video: Tensor<f32>,
    /// Finished canvases of every level.
    pub levels: Vec<Tensor<f32>>,
    pub manifest: Manifest,
    pub cache_stats: CacheStats,
}

/// Seam strength of a `[C, F, H, W]` video along the spatial axes: mean
/// absolute difference across planes at multiples of `patch` minus the mean
/// over all other interior planes.
pub fn seam_metric(video: &Tensor<f32>, patch: [usize; 3]) -> Result<f64> {
    let (c, [f, h, w]) = canvas_dims(video)?;
    let d = video.data();
    let at = |ch: usize, t: usize, y: usize, x: usize| d[((ch * f + t) * h + y) * w + x] as f64;
    let (mut seam, mut seam_n, mut inner, mut inner_n) = (0.0, 0usize, 0.0, 0usize);
    for ch in 0..c {
        for t in 0..f {
            for y in 0..h {
                for x in 1..w {
                    let v = (at(ch, t, y, x) - at(ch, t, y, x - 1)).abs();
                    if x % patch[2] == 0 {
                        seam += v;
                        seam_n += 1;
                    } else {
                        inner += v;
                        inner_n += 1;
                    }
                }
            }
            for y in 1..h {
                for x in 0..w {
                    let v = (at(ch, t, y, x) - at(ch, t, y - 1, x)).abs();
                    if y % patch[1] == 0 {
                        seam += v;
                        seam_n += 1;
                    } else {
                        inner += v;
                        inner_n += 1;
                    }
                }
            }
        }
    }
    if seam_n == 0 || inner_n == 0 {
        return Err(Error::geometry("video has no tile boundaries to measure"));
    }
    Ok(seam / seam_n as f64 - inner / inner_n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{ContextMode, DenoiserConfig};
    use crate::rng;

    fn tiny(levels: usize) -> DenoiserConfig {
        DenoiserConfig {
            channels: 2,
            patch: [2, 4, 4],
            levels,
            num_blocks: levels,
            num_latents: 4,
            latent_dim: 8,
            token_dim: 8,
            tokenizer: [1, 2, 2],
            num_levels_per_block: (1..=levels).collect(),
            num_classes: 2,
            heads: 2,
            mlp_ratio: 2,
            compute_depth: 1,
            fourier_features: 4,
            context: ContextMode::AllParents,
            detach_context: false,
        }
    }

    /// Fresh models ignore most of their context; jitter every weight so the
    /// parent path matters.
    pub(crate) fn perturbed(cfg: DenoiserConfig, seed: u64) -> Denoiser {
        let mut m = Denoiser::new(cfg, seed).unwrap();
        let mut r = rng::stream(seed, &[99]);
        for i in 0..m.params.len() {
            let t = m.params.get_mut(i);
            let noise = Tensor::<f32>::randn(t.shape(), 0.2, &mut r);
            t.add_assign(&noise).unwrap();
        }
        m
    }

    fn quick() -> SamplerConfig {
        SamplerConfig {
            steps: 4,
            min_steps: 2,
            ..SamplerConfig::default()
        }
    }

    fn sampler(model: &Denoiser) -> Sampler<'_> {
        let c = &model.config;
        let spec = PyramidSpec::new(c.levels, c.patch, c.patch.map(|r| r << (c.levels - 1))).unwrap();
        Sampler::new(model, spec, NoiseSchedule::default(), quick()).unwrap()
    }

    fn overlapped() -> [Overlap; 3] {
        [Overlap::Half, Overlap::Half, Overlap::Half]
    }

    #[test]
    fn fusing_constant_tiles_gives_constant_canvas() {
        let plan = plan_tiles(1, [4, 8, 8], [2, 4, 4], overlapped()).unwrap();
        let preds = vec![Tensor::full(&[2, 2, 4, 4], 0.75f32); plan.len()];
        let out = fuse_tile_predictions(&preds, &plan).unwrap();
        assert_eq!(out.shape(), &[2, 4, 8, 8]);
        assert!(out.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn non_overlapping_fusion_is_paste_and_crop_inverts_it() {
        let plan = plan_tiles(1, [4, 8, 8], [2, 4, 4], [Overlap::None; 3]).unwrap();
        let canvas = Tensor::<f32>::from_fn(&[2, 4, 8, 8], |i| (i as f32 * 0.13).sin());
        let preds: Vec<_> = plan.origins.iter().map(|&o| crop(&canvas, o, plan.patch).unwrap()).collect();
        let out = fuse_tile_predictions(&preds, &plan).unwrap();
        assert_eq!(out.data(), canvas.data());
    }

    #[test]
    fn overlap_fusion_matches_per_voxel_rasterization() {
        let plan = plan_tiles(1, [4, 8, 8], [2, 4, 4], overlapped()).unwrap();
        let mut r = rng::stream(3, &[]);
        let preds: Vec<_> = (0..plan.len()).map(|_| Tensor::<f32>::randn(&[2, 2, 4, 4], 1.0, &mut r)).collect();
        let out = fuse_tile_predictions(&preds, &plan).unwrap();
        for c in 0..2 {
            for f in 0..4 {
                for h in 0..8 {
                    for w in 0..8 {
                        let (mut s, mut n) = (0.0f64, 0);
                        for (p, o) in preds.iter().zip(&plan.origins) {
                            let l = [f as isize - o[0] as isize, h as isize - o[1] as isize, w as isize - o[2] as isize];
                            if l[0] >= 0 && l[0] < 2 && l[1] >= 0 && l[1] < 4 && l[2] >= 0 && l[2] < 4 {
                                let i = ((c * 2 + l[0] as usize) * 4 + l[1] as usize) * 4 + l[2] as usize;
                                s += p.data()[i] as f64;
                                n += 1;
                            }
                        }
                        let got = out.data()[((c * 4 + f) * 8 + h) * 8 + w] as f64;
                        assert!((got - s / n as f64).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn fusion_rejects_mismatched_inputs() {
        let plan = plan_tiles(0, [2, 4, 4], [2, 4, 4], [Overlap::None; 3]).unwrap();
        assert!(fuse_tile_predictions(&[], &plan).is_err());
        assert!(fuse_tile_predictions(&[Tensor::zeros(&[2, 2, 4, 2])], &plan).is_err());
        let canvas = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        assert!(crop(&canvas, [0, 1, 0], [2, 4, 4]).is_err());
    }

    #[test]
    fn stitched_tokens_reproduce_a_global_field() {
        let plan = plan_tiles(1, [4, 8, 8], [2, 4, 4], overlapped()).unwrap();
        let field = |ch: usize, c: [usize; 3]| (ch * 100 + c[0] * 16 + c[1] * 4 + c[2]) as f32;
        let tiles: Vec<Tensor<f32>> = plan
            .origins
            .iter()
            .map(|o| {
                Tensor::from_fn(&[8, 3], |i| {
                    let (row, ch) = (i / 3, i % 3);
                    let l = [row / 4, row / 2 % 2, row % 2];
                    field(ch, [o[0] + l[0], o[1] / 2 + l[1], o[2] / 2 + l[2]])
                })
            })
            .collect();
        let refs: Vec<&Tensor<f32>> = tiles.iter().collect();
        let out = stitch_tokens(&refs, &plan, [1, 2, 2]).unwrap();
        assert_eq!(out.shape(), &[3, 4, 4, 4]);
        for ch in 0..3 {
            for v in 0..64 {
                assert_eq!(out.data()[ch * 64 + v], field(ch, [v / 16, v / 4 % 4, v % 4]));
            }
        }
    }

    #[test]
    fn single_level_generation_is_plain_patch_sampling() {
        let model = perturbed(tiny(1), 4);
        let s = sampler(&model);
        let opts = GenerateOptions {
            seed: 11,
            class: Some(1),
            ..GenerateOptions::default()
        };
        let g = s.generate(&opts).unwrap();
        let grid = sigma_grid(&s.sampler, &s.schedule, 0).unwrap();
        let noise = Tensor::<f32>::randn(&[2, 2, 4, 4], 1.0, &mut rng::stream(11, &[0, 0]));
        let direct = crate::diffusion::sample_grid(
            &noise,
            &grid,
            &s.sampler.options_at(0),
            &mut rng::stream(11, &[0, 1]),
            |x, sigma| {
                let q = PatchQuery {
                    level: 0,
                    x,
                    sigma,
                    coords: crate::patchgeom::PatchCoords::full(),
                };
                Ok(denoise_patches(&model, &[q], Some(1), 0.5, None)?.preds.remove(0))
            },
        )
        .unwrap();
        assert_eq!(g.video.data(), direct.data());
        assert_eq!(g.manifest.records[0].steps(), grid.len() - 1);
    }

    #[test]
    fn generation_is_deterministic_and_thread_independent() {
        let model = perturbed(tiny(2), 5);
        let s = sampler(&model);
        let opts = GenerateOptions {
            seed: 2,
            overlap: overlapped(),
            ..GenerateOptions::default()
        };
        let a = par::with_threads(1, || s.generate(&opts)).unwrap();
        let b = par::with_threads(3, || s.generate(&opts)).unwrap();
        assert_eq!(a.video.shape(), &[2, 4, 8, 8]);
        assert_eq!(a.video.data(), b.video.data());
        let c = s.generate(&GenerateOptions { seed: 3, ..opts }).unwrap();
        assert_ne!(a.video.data(), c.video.data());
    }

    #[test]
    fn cached_context_matches_recomputation() {
        let model = perturbed(tiny(3), 6);
        let s = sampler(&model);
        let opts = GenerateOptions {
            seed: 8,
            class: Some(0),
            overlap: [Overlap::None, Overlap::Half, Overlap::Half],
            ..GenerateOptions::default()
        };
        let cached = s.generate(&opts).unwrap();
        let recomputed = s.generate(&GenerateOptions { use_cache: false, ..opts.clone() }).unwrap();
        for (a, b) in cached.levels.iter().zip(&recomputed.levels) {
            assert!(a.max_abs_diff(b) <= 1e-5, "{}", a.max_abs_diff(b));
        }
        // The context path is live: a different parent changes the child.
        let mut other = cached.levels.clone();
        other[0] = other[0].scale(-1.0);
        let ctx = RecomputeContext::new(&s, &other[..1], opts.overlap, opts.class).unwrap();
        let alt = s.sample_level(1, &opts, Some(&ctx)).unwrap();
        assert!(alt.canvas.max_abs_diff(&cached.levels[1]) > 1e-4);
    }

    #[test]
    fn spilling_cache_gives_identical_video() {
        let model = perturbed(tiny(3), 7);
        let s = sampler(&model);
        let opts = GenerateOptions {
            seed: 1,
            ..GenerateOptions::default()
        };
        let full = s.generate(&opts).unwrap();
        let tight = s
            .generate(&GenerateOptions {
                cache_budget: 600,
                ..opts
            })
            .unwrap();
        assert_eq!(full.video.data(), tight.video.data());
        assert!(tight.cache_stats.spills > 0 && tight.cache_stats.reloads > 0);
        assert_eq!(full.cache_stats.spills, 0);
    }

    #[test]
    fn level_above_zero_needs_context() {
        let model = Denoiser::new(tiny(2), 0).unwrap();
        let s = sampler(&model);
        assert!(matches!(
            s.sample_level(1, &GenerateOptions::default(), None),
            Err(Error::Cache(_))
        ));
        assert!(s.sample_level(2, &GenerateOptions::default(), None).is_err());
    }

    #[test]
    fn seam_metric_detects_blocky_videos() {
        let smooth = Tensor::<f32>::from_fn(&[1, 2, 8, 8], |i| (i % 8) as f32 * 0.1);
        assert!(seam_metric(&smooth, [2, 4, 4]).unwrap().abs() < 1e-6);
        let blocky = Tensor::<f32>::from_fn(&[1, 2, 8, 8], |i| ((i % 8) / 4) as f32);
        assert!(seam_metric(&blocky, [2, 4, 4]).unwrap() > 0.4);
    }
}
