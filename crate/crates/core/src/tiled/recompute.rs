use std::collections::BTreeMap;

use super::{crop, Sampler};
use crate::denoiser::ContextSource;
use crate::diffusion::{denoise_patches, PatchQuery};
use crate::numerics::grid_sample::taps;
use crate::numerics::Tensor;
use crate::patchgeom::{lattice_queries, Overlap, PatchCoords, TilePlan};
use crate::{Error, Result};

/// Parent context computed from scratch on every request.
///
/// For each query it finds the parent token cells it touches, reruns the
/// clean pass on every parent tile covering them (recursively, for that
/// tile's own parents), averages overlapping tiles per cell and interpolates.
/// Nothing is memoized between calls.
pub struct RecomputeContext<'s, 'a> {
    sampler: &'s Sampler<'a>,
    canvases: &'s [Tensor<f32>],
    plans: Vec<TilePlan>,
    class: Option<usize>,
}

impl<'s, 'a> RecomputeContext<'s, 'a> {
    pub fn new(
        sampler: &'s Sampler<'a>,
        canvases: &'s [Tensor<f32>],
        overlap: [Overlap; 3],
        class: Option<usize>,
    ) -> Result<Self> {
        let plans = (0..canvases.len())
            .map(|l| sampler.plan(l, overlap))
            .collect::<Result<_>>()?;
        Ok(Self {
            sampler,
            canvases,
            plans,
            class,
        })
    }

    fn tile_block_input(&self, level: usize, tile: usize, block: usize) -> Result<Tensor<f32>> {
        let plan = &self.plans[level];
        let x = crop(&self.canvases[level], plan.origins[tile], plan.patch)?;
        let q = PatchQuery {
            level,
            x: &x,
            sigma: self.sampler.schedule.sigma_min,
            coords: plan.tiles[tile],
        };
        let ext: Option<&dyn ContextSource<f32>> = if level == 0 { None } else { Some(self) };
        let mut out = denoise_patches(self.sampler.model, &[q], self.class, self.sampler.schedule.sigma_data, ext)?;
        out.block_inputs
            .remove(0)
            .swap_remove(block)
            .ok_or_else(|| Error::Cache(format!("block {block} does not process level {level}")))
    }
}

impl ContextSource<f32> for RecomputeContext<'_, '_> {
    fn sample(&self, level: usize, block: usize, child: &PatchCoords, child_grid: [usize; 3]) -> Result<Tensor<f32>> {
        let plan = self
            .plans
            .get(level)
            .ok_or_else(|| Error::Cache(format!("level {level} has not been generated")))?;
        let cfg = &self.sampler.model.config;
        let tok = cfg.tokenizer;
        let g = cfg.token_grid();
        let dims = [0, 1, 2].map(|a| plan.canvas[a] / tok[a]);
        let q = lattice_queries::<f64>(child, child_grid, &PatchCoords::full(), dims)?;
        let n = q.shape()[0];
        let all: Vec<_> = (0..n)
            .map(|i| {
                let r = &q.data()[3 * i..3 * i + 3];
                taps(dims, [r[0], r[1], r[2]], i)
            })
            .collect::<Result<_>>()?;

        // Cells with non-zero weight, and the tiles covering each.
        let mut cells: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for t in &all {
            for k in 0..8 {
                if t.weight[k] != 0.0 {
                    cells.entry(t.offset[k]).or_default();
                }
            }
        }
        let mut needed: BTreeMap<usize, Tensor<f32>> = BTreeMap::new();
        for (&cell, covering) in cells.iter_mut() {
            let c = [cell / (dims[1] * dims[2]), cell / dims[2] % dims[1], cell % dims[2]];
            for (ti, o) in plan.origins.iter().enumerate() {
                let inside = (0..3).all(|a| {
                    let s = o[a] / tok[a];
                    c[a] >= s && c[a] < s + g[a]
                });
                if inside {
                    covering.push(ti);
                    needed.entry(ti).or_insert_with(|| Tensor::zeros(&[0]));
                }
            }
            if covering.is_empty() {
                return Err(Error::Cache(format!("token cell {c:?} of level {level} is not covered")));
            }
        }
        for (&ti, slot) in needed.iter_mut() {
            *slot = self.tile_block_input(level, ti, block)?;
        }

        let d = cfg.token_dim;
        let cell_value = |cell: usize, ch: usize| -> f64 {
            let c = [cell / (dims[1] * dims[2]), cell / dims[2] % dims[1], cell % dims[2]];
            let covering = &cells[&cell];
            let mut s = 0.0;
            for &ti in covering {
                let o = plan.origins[ti];
                let l = [0, 1, 2].map(|a| c[a] - o[a] / tok[a]);
                let row = (l[0] * g[1] + l[1]) * g[2] + l[2];
                s += needed[&ti].data()[row * d + ch] as f64;
            }
            // Stitched canvases are stored in f32.
            (s / covering.len() as f64) as f32 as f64
        };
        let mut out = vec![0.0f32; n * d];
        for (i, t) in all.iter().enumerate() {
            for ch in 0..d {
                let mut acc = 0.0;
                for k in 0..8 {
                    if t.weight[k] != 0.0 {
                        acc += t.weight[k] * cell_value(t.offset[k], ch);
                    }
                }
                out[i * d + ch] = acc as f32;
            }
        }
        Tensor::new(&[n, d], out)
    }
}
