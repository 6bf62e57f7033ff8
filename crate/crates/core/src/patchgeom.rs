//! Coordinate algebra for patch pyramids.
//!
//! A patch is described by [`PatchCoords`]: a scale and an offset per axis,
//! both normalized to the full video, ordered `(frames, height, width)`.
//! Level `ℓ` of a pyramid has scale `2^-ℓ`; level 0 is the whole video,
//! downsampled to patch resolution, and the last level is a native crop.

use rand::Rng;

use crate::numerics::{Elem, Tensor};
use crate::{Error, Result};

const EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchCoords {
    pub scale: [f64; 3],
    pub offset: [f64; 3],
}

impl PatchCoords {
    /// The whole video.
    pub fn full() -> Self {
        Self {
            scale: [1.0; 3],
            offset: [0.0; 3],
        }
    }

    /// Uniform-scale coordinates; validated.
    pub fn new(scale: f64, offset: [f64; 3]) -> Result<Self> {
        Self::with_scales([scale; 3], offset)
    }

    pub fn with_scales(scale: [f64; 3], offset: [f64; 3]) -> Result<Self> {
        let c = Self { scale, offset };
        for a in 0..3 {
            let (s, d) = (scale[a], offset[a]);
            if !(s > 0.0 && s <= 1.0 + EPS) || !(d >= -EPS && d + s <= 1.0 + EPS) {
                return Err(Error::geometry(format!("invalid patch coordinates {c:?}")));
            }
        }
        Ok(c)
    }

    pub fn end(&self, axis: usize) -> f64 {
        self.offset[axis] + self.scale[axis]
    }

    /// Whether `other` lies inside `self` (with rounding slack).
    pub fn contains(&self, other: &PatchCoords) -> bool {
        (0..3).all(|a| other.offset[a] >= self.offset[a] - EPS && other.end(a) <= self.end(a) + EPS)
    }

    /// `(s, δ_f, δ_h, δ_w)` as little-endian `f32`.
    pub fn to_bytes(&self) -> [u8; 16] {
        let mut out = [0u8; 16];
        let vals = [self.scale[0], self.offset[0], self.offset[1], self.offset[2]];
        for (i, v) in vals.iter().enumerate() {
            out[4 * i..4 * i + 4].copy_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(b: &[u8; 16]) -> Result<Self> {
        let f = |i: usize| f32::from_le_bytes(b[4 * i..4 * i + 4].try_into().unwrap()) as f64;
        Self::new(f(0), [f(1), f(2), f(3)])
    }
}

/// Geometry of a patch pyramid with factor-2 levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PyramidSpec {
    /// Number of levels, `L + 1`.
    pub levels: usize,
    /// Patch resolution `r`.
    pub patch: [usize; 3],
    /// Full video resolution `R = 2^L · r`.
    pub full: [usize; 3],
}

impl PyramidSpec {
    pub fn new(levels: usize, patch: [usize; 3], full: [usize; 3]) -> Result<Self> {
        if levels == 0 {
            return Err(Error::config("pyramid.levels", "must be at least 1"));
        }
        if patch.contains(&0) {
            return Err(Error::config("pyramid.patch", "dimensions must be positive"));
        }
        let f = 1usize << (levels - 1);
        for a in 0..3 {
            if full[a] != patch[a] * f {
                return Err(Error::config(
                    "pyramid.full",
                    format!(
                        "axis {a}: full resolution {} must equal 2^{} x patch {} = {}",
                        full[a],
                        levels - 1,
                        patch[a],
                        patch[a] * f
                    ),
                ));
            }
        }
        Ok(Self {
            levels,
            patch,
            full,
        })
    }

    /// Index of the finest level, `L`.
    pub fn top(&self) -> usize {
        self.levels - 1
    }

    pub fn level_scale(&self, level: usize) -> f64 {
        0.5f64.powi(level as i32)
    }

    /// Full-canvas resolution of a level during tiled inference.
    pub fn level_canvas(&self, level: usize) -> [usize; 3] {
        let f = 1usize << level;
        [0, 1, 2].map(|a| (self.patch[a] * f).min(self.full[a]))
    }

    /// Average-pooling factor from full resolution down to a level's patch.
    pub fn pool_factor(&self, level: usize) -> usize {
        1 << (self.top() - level)
    }

    /// Fraction of full-video voxels processed per training sample,
    /// `(L+1) · ∏r / ∏R`.
    pub fn pixel_budget(&self) -> f64 {
        let r: usize = self.patch.iter().product();
        let full: usize = self.full.iter().product();
        self.levels as f64 * r as f64 / full as f64
    }
}

/// How offsets of the coarser levels are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OffsetMode {
    /// Every level's crop boundary lies on a full-resolution voxel boundary.
    #[default]
    VoxelAligned,
    /// Levels below the top are continuous; only the top level is snapped.
    Continuous,
}

/// Draws one nested pyramid of patch coordinates (level 0 first).
pub fn sample_pyramid_coords(spec: &PyramidSpec, mode: OffsetMode, rng: &mut impl Rng) -> Vec<PatchCoords> {
    let mut out = vec![PatchCoords::full()];
    // parent region in full-resolution voxels
    let mut start = [0.0f64; 3];
    let mut size = spec.full.map(|v| v as f64);
    for level in 1..spec.levels {
        let s = spec.level_scale(level);
        let mut offset = [0.0; 3];
        for a in 0..3 {
            let child = spec.full[a] as f64 * s;
            let room = size[a] - child;
            let snap = mode == OffsetMode::VoxelAligned || level == spec.top();
            let o = if snap {
                // integer positions only; the parent start is itself integer
                // in aligned mode, otherwise round inward
                let lo = start[a].ceil();
                let hi = (start[a] + room).floor();
                lo + rng.random_range(0..=((hi - lo) as u64)) as f64
            } else {
                start[a] + rng.random::<f64>() * room
            };
            start[a] = o;
            size[a] = child;
            offset[a] = o / spec.full[a] as f64;
        }
        out.push(PatchCoords { scale: [s; 3], offset });
    }
    out
}

fn integral(x: f64, what: &str) -> Result<usize> {
    let r = x.round();
    if (x - r).abs() > 1e-6 || r < 0.0 {
        return Err(Error::geometry(format!("{what} {x} is not an integer")));
    }
    Ok(r as usize)
}

fn video_dims<T: Elem>(video: &Tensor<T>) -> Result<(usize, [usize; 3])> {
    match video.shape() {
        &[c, f, h, w] => Ok((c, [f, h, w])),
        s => Err(Error::geometry(format!("expected a [C,F,H,W] video, got {s:?}"))),
    }
}

/// Crops the region `coords` out of `video [C,F,H,W]` and average-pools it
/// to `out` voxels per axis. The crop must start and end on voxel
/// boundaries and shrink by an integer factor.
pub fn extract_patch<T: Elem>(video: &Tensor<T>, coords: &PatchCoords, out: [usize; 3]) -> Result<Tensor<T>> {
    let (c, dims) = video_dims(video)?;
    let mut start = [0usize; 3];
    let mut factor = [0usize; 3];
    for a in 0..3 {
        start[a] = integral(coords.offset[a] * dims[a] as f64, "crop start")?;
        let size = integral(coords.scale[a] * dims[a] as f64, "crop size")?;
        if size == 0 || size % out[a] != 0 || start[a] + size > dims[a] {
            return Err(Error::geometry(format!(
                "crop of {size} voxels cannot be downsampled to {} on axis {a}",
                out[a]
            )));
        }
        factor[a] = size / out[a];
    }
    let [df, dh, dw] = dims;
    let [of, oh, ow] = out;
    let norm = T::of(1.0 / (factor[0] * factor[1] * factor[2]) as f64);
    let src = video.data();
    let mut data = vec![T::zero(); c * of * oh * ow];
    for ch in 0..c {
        for i in 0..of {
            for j in 0..oh {
                for k in 0..ow {
                    let mut acc = T::zero();
                    for u in 0..factor[0] {
                        let f = start[0] + i * factor[0] + u;
                        for v in 0..factor[1] {
                            let h = start[1] + j * factor[1] + v;
                            let row = ((ch * df + f) * dh + h) * dw;
                            for w in 0..factor[2] {
                                acc = acc + src[row + start[2] + k * factor[2] + w];
                            }
                        }
                    }
                    data[((ch * of + i) * oh + j) * ow + k] = acc * norm;
                }
            }
        }
    }
    Tensor::new(&[c, of, oh, ow], data)
}

/// Like [`extract_patch`] but accepts continuous offsets: each output voxel
/// averages trilinear samples taken at the centres of the full-resolution
/// voxels it covers. Reduces to [`extract_patch`] for aligned coordinates.
pub fn extract_patch_resampled<T: Elem>(video: &Tensor<T>, coords: &PatchCoords, out: [usize; 3]) -> Result<Tensor<T>> {
    let (c, dims) = video_dims(video)?;
    let mut factor = [0usize; 3];
    for a in 0..3 {
        let size = integral(coords.scale[a] * dims[a] as f64, "crop size")?;
        if size == 0 || size % out[a] != 0 {
            return Err(Error::geometry(format!(
                "crop of {size} voxels cannot be downsampled to {} on axis {a}",
                out[a]
            )));
        }
        factor[a] = size / out[a];
    }
    // per-axis (index, weight) pairs of linear interpolation at a voxel-space position
    let lerp = |pos: f64, n: usize| -> [(usize, f64); 2] {
        let x = pos.clamp(0.0, (n - 1) as f64);
        let i0 = (x.floor() as usize).min(n.saturating_sub(2));
        let t = if n == 1 { 0.0 } else { x - i0 as f64 };
        [(i0, 1.0 - t), ((i0 + 1).min(n - 1), t)]
    };
    let axis_weights = |a: usize| -> Vec<Vec<(usize, f64)>> {
        let o = coords.offset[a] * dims[a] as f64;
        (0..out[a])
            .map(|i| {
                let mut acc = vec![0.0; dims[a]];
                for u in 0..factor[a] {
                    for (idx, w) in lerp(o + (i * factor[a] + u) as f64, dims[a]) {
                        acc[idx] += w / factor[a] as f64;
                    }
                }
                acc.into_iter().enumerate().filter(|(_, w)| *w != 0.0).collect()
            })
            .collect()
    };
    let (wf, wh, ww) = (axis_weights(0), axis_weights(1), axis_weights(2));
    let [_, dh, dw] = dims;
    let src = video.data();
    let mut data = Vec::with_capacity(c * out.iter().product::<usize>());
    for ch in 0..c {
        for fi in &wf {
            for hi in &wh {
                for wi in &ww {
                    let mut acc = 0.0;
                    for &(f, a) in fi {
                        for &(h, b) in hi {
                            let row = ((ch * dims[0] + f) * dh + h) * dw;
                            for &(w, g) in wi {
                                acc += a * b * g * src[row + w].as_f64();
                            }
                        }
                    }
                    data.push(T::of(acc));
                }
            }
        }
    }
    Tensor::new(&[c, out[0], out[1], out[2]], data)
}

/// Patch of pyramid level `level` at `coords`, at patch resolution.
pub fn extract_level<T: Elem>(video: &Tensor<T>, spec: &PyramidSpec, coords: &PatchCoords) -> Result<Tensor<T>> {
    extract_patch(video, coords, spec.patch)
}

/// The child region expressed in the parent's normalized frame:
/// `(s_child / s_parent, (δ_child − δ_parent) / s_parent)`.
pub fn recompute_coords(child: &PatchCoords, parent: &PatchCoords) -> Result<PatchCoords> {
    if !parent.contains(child) {
        return Err(Error::Containment {
            child: format!("{child:?}"),
            parent: format!("{parent:?}"),
        });
    }
    let mut scale = [0.0; 3];
    let mut offset = [0.0; 3];
    for a in 0..3 {
        scale[a] = (child.scale[a] / parent.scale[a]).min(1.0);
        offset[a] = ((child.offset[a] - parent.offset[a]) / parent.scale[a]).clamp(0.0, 1.0 - scale[a]);
    }
    Ok(PatchCoords { scale, offset })
}

/// Per-voxel global centre positions `[3, f, h, w]`: channel `a` at index
/// `i` holds `δ_a + s_a · (i + 0.5) / n_a`.
pub fn coord_channels<T: Elem>(coords: &PatchCoords, dims: [usize; 3]) -> Tensor<T> {
    let [nf, nh, nw] = dims;
    let n = nf * nh * nw;
    let centre = |a: usize, i: usize| coords.offset[a] + coords.scale[a] * (i as f64 + 0.5) / dims[a] as f64;
    let mut data = vec![T::zero(); 3 * n];
    for f in 0..nf {
        for h in 0..nh {
            for w in 0..nw {
                let v = (f * nh + h) * nw + w;
                data[v] = T::of(centre(0, f));
                data[n + v] = T::of(centre(1, h));
                data[2 * n + v] = T::of(centre(2, w));
            }
        }
    }
    Tensor::new(&[3, nf, nh, nw], data).expect("coord channel shape")
}

/// Grid-sample queries `[Q, 3]` that read a parent lattice at the centres of
/// a child lattice.
///
/// Child lattice cells are mapped into the parent's frame with
/// [`recompute_coords`] and converted to the align-corners convention of
/// [`grid_sample_3d`](crate::numerics::grid_sample_3d). Centres that fall in
/// the outer half-cell of the parent lattice read its border cells.
pub fn lattice_queries<T: Elem>(
    child: &PatchCoords,
    child_grid: [usize; 3],
    parent: &PatchCoords,
    parent_grid: [usize; 3],
) -> Result<Tensor<T>> {
    let rel = recompute_coords(child, parent)?;
    let axis = |a: usize| -> Vec<f64> {
        let (n, m) = (child_grid[a], parent_grid[a]);
        (0..n)
            .map(|i| {
                let p = rel.offset[a] + rel.scale[a] * (i as f64 + 0.5) / n as f64;
                if m == 1 {
                    0.0
                } else {
                    ((p * m as f64 - 0.5) / (m - 1) as f64).clamp(0.0, 1.0)
                }
            })
            .collect()
    };
    let (qf, qh, qw) = (axis(0), axis(1), axis(2));
    let mut data = Vec::with_capacity(3 * qf.len() * qh.len() * qw.len());
    for &f in &qf {
        for &h in &qh {
            for &w in &qw {
                data.extend([T::of(f), T::of(h), T::of(w)]);
            }
        }
    }
    Tensor::new(&[qf.len() * qh.len() * qw.len(), 3], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Overlap {
    #[default]
    None,
    /// Neighbouring tiles share half their extent (stride `r / 2`).
    Half,
}

impl Overlap {
    /// Parses per-axis flags such as `none`, `hw` or `fhw`.
    pub fn parse_axes(s: &str) -> Result<[Overlap; 3]> {
        let mut out = [Overlap::None; 3];
        if s == "none" {
            return Ok(out);
        }
        for ch in s.chars() {
            let a = match ch {
                'f' => 0,
                'h' => 1,
                'w' => 2,
                _ => return Err(Error::config("overlap", format!("unknown axis `{ch}` in `{s}`"))),
            };
            out[a] = Overlap::Half;
        }
        Ok(out)
    }

    pub fn format_axes(axes: &[Overlap; 3]) -> String {
        let s: String = axes
            .iter()
            .zip(['f', 'h', 'w'])
            .filter(|(o, _)| **o == Overlap::Half)
            .map(|(_, c)| c)
            .collect();
        if s.is_empty() {
            "none".into()
        } else {
            s
        }
    }
}

/// Tiling of one level's canvas into patch-sized windows.
#[derive(Clone, Debug, PartialEq)]
pub struct TilePlan {
    pub level: usize,
    pub canvas: [usize; 3],
    pub patch: [usize; 3],
    /// Tile origins in canvas voxels, row-major over (f, h, w) tile indices.
    pub origins: Vec<[usize; 3]>,
    /// Tile regions normalized to the canvas (which spans the full video).
    pub tiles: Vec<PatchCoords>,
    /// Per-axis coverage counts; a voxel's coverage is their product.
    pub axis_coverage: [Vec<u32>; 3],
}

impl TilePlan {
    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn coverage(&self, voxel: [usize; 3]) -> u32 {
        (0..3).map(|a| self.axis_coverage[a][voxel[a]]).product()
    }

    /// Coverage counts for every canvas voxel, row-major.
    pub fn coverage_grid(&self) -> Vec<u32> {
        let [f, h, w] = self.canvas;
        let mut out = Vec::with_capacity(f * h * w);
        for i in 0..f {
            for j in 0..h {
                for k in 0..w {
                    out.push(self.coverage([i, j, k]));
                }
            }
        }
        out
    }
}

/// Tiles a canvas with windows of `patch` voxels, optionally overlapping by
/// half a window per axis.
pub fn plan_tiles(level: usize, canvas: [usize; 3], patch: [usize; 3], overlap: [Overlap; 3]) -> Result<TilePlan> {
    let mut starts: [Vec<usize>; 3] = Default::default();
    let mut axis_coverage: [Vec<u32>; 3] = Default::default();
    for a in 0..3 {
        let (n, r) = (canvas[a], patch[a]);
        if r == 0 || n % r != 0 {
            return Err(Error::geometry(format!(
                "canvas {n} is not divisible by patch {r} on axis {a}"
            )));
        }
        let stride = match overlap[a] {
            Overlap::None => r,
            Overlap::Half => {
                if r % 2 != 0 {
                    return Err(Error::geometry(format!(
                        "half overlap needs an even patch size, axis {a} has {r}"
                    )));
                }
                r / 2
            }
        };
        starts[a] = (0..=(n - r)).step_by(stride).collect();
        let mut cov = vec![0u32; n];
        for &s in &starts[a] {
            for c in &mut cov[s..s + r] {
                *c += 1;
            }
        }
        axis_coverage[a] = cov;
    }
    let mut origins = Vec::new();
    let mut tiles = Vec::new();
    for &f in &starts[0] {
        for &h in &starts[1] {
            for &w in &starts[2] {
                let o = [f, h, w];
                origins.push(o);
                tiles.push(PatchCoords::with_scales(
                    [0, 1, 2].map(|a| patch[a] as f64 / canvas[a] as f64),
                    [0, 1, 2].map(|a| o[a] as f64 / canvas[a] as f64),
                )?);
            }
        }
    }
    Ok(TilePlan {
        level,
        canvas,
        patch,
        origins,
        tiles,
        axis_coverage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grid_sample_3d;
    use crate::rng;

    fn spec3() -> PyramidSpec {
        PyramidSpec::new(3, [4, 8, 8], [16, 32, 32]).unwrap()
    }

    #[test]
    fn degenerate_pyramid_is_the_full_video() {
        let spec = PyramidSpec::new(1, [4, 8, 8], [4, 8, 8]).unwrap();
        let c = sample_pyramid_coords(&spec, OffsetMode::VoxelAligned, &mut rng::stream(1, &[]));
        assert_eq!(c, vec![PatchCoords::full()]);
    }

    #[test]
    fn level_scales_halve() {
        let c = sample_pyramid_coords(&spec3(), OffsetMode::VoxelAligned, &mut rng::stream(2, &[]));
        let scales: Vec<f64> = c.iter().map(|c| c.scale[0]).collect();
        assert_eq!(scales, vec![1.0, 0.5, 0.25]);
    }

    #[test]
    fn spec_rejects_inconsistent_resolution() {
        let e = PyramidSpec::new(3, [4, 8, 8], [16, 32, 30]).unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "pyramid.full"));
    }

    #[test]
    fn containment_holds_over_many_draws() {
        let spec = spec3();
        for mode in [OffsetMode::VoxelAligned, OffsetMode::Continuous] {
            let mut r = rng::stream(3, &[mode as u64]);
            for _ in 0..1000 {
                let c = sample_pyramid_coords(&spec, mode, &mut r);
                assert!(PatchCoords::full().contains(&c[0]));
                for w in c.windows(2) {
                    assert!(w[0].contains(&w[1]), "{:?} not in {:?}", w[1], w[0]);
                }
                let top = c.last().unwrap();
                for a in 0..3 {
                    let o = top.offset[a] * spec.full[a] as f64;
                    assert_eq!(o, o.round());
                }
            }
        }
    }

    #[test]
    fn full_coverage_extraction_pools_by_two() {
        let video = Tensor::<f64>::from_fn(&[1, 8, 16, 16], |i| (i as f64 * 0.1).sin());
        let p = extract_patch(&video, &PatchCoords::full(), [4, 8, 8]).unwrap();
        let d = video.data();
        let at = |f: usize, h: usize, w: usize| d[(f * 16 + h) * 16 + w];
        let mut want = 0.0;
        for (f, h, w) in itertools_product(2) {
            want += at(2 + f, 4 + h, 6 + w);
        }
        assert!((p.data()[(8 + 2) * 8 + 3] - want / 8.0).abs() < 1e-12);
    }

    fn itertools_product(n: usize) -> Vec<(usize, usize, usize)> {
        let mut v = Vec::new();
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    v.push((a, b, c));
                }
            }
        }
        v
    }

    #[test]
    fn constant_video_gives_constant_patch() {
        let video = Tensor::<f32>::full(&[3, 16, 32, 32], 0.375);
        let c = sample_pyramid_coords(&spec3(), OffsetMode::VoxelAligned, &mut rng::stream(4, &[]));
        for coords in &c {
            let p = extract_patch(&video, coords, [4, 8, 8]).unwrap();
            assert!(p.data().iter().all(|&v| v == 0.375));
        }
    }

    #[test]
    fn misaligned_or_fractional_crops_are_rejected() {
        let video = Tensor::<f32>::zeros(&[1, 8, 8, 8]);
        let c = PatchCoords::new(0.5, [0.1, 0.0, 0.0]).unwrap();
        assert!(extract_patch(&video, &c, [2, 2, 2]).is_err());
        let c = PatchCoords::new(0.5, [0.0; 3]).unwrap();
        assert!(extract_patch(&video, &c, [3, 3, 3]).is_err());
    }

    #[test]
    fn resampled_extraction_matches_pooling_when_aligned() {
        let video = Tensor::<f64>::from_fn(&[2, 8, 16, 16], |i| ((i * 7919) % 101) as f64 / 50.0 - 1.0);
        let c = PatchCoords::new(0.5, [0.25, 0.5, 0.125]).unwrap();
        let a = extract_patch(&video, &c, [2, 4, 4]).unwrap();
        let b = extract_patch_resampled(&video, &c, [2, 4, 4]).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn recompute_examples() {
        let p = PatchCoords::new(0.5, [0.25; 3]).unwrap();
        let id = recompute_coords(&p, &p).unwrap();
        assert_eq!(id, PatchCoords::full());
        let c = PatchCoords::new(0.25, [0.5; 3]).unwrap();
        let r = recompute_coords(&c, &p).unwrap();
        assert_eq!(r, PatchCoords::new(0.5, [0.5; 3]).unwrap());
        let outside = PatchCoords::new(0.25, [0.0; 3]).unwrap();
        assert!(matches!(recompute_coords(&outside, &p), Err(Error::Containment { .. })));
    }

    #[test]
    fn coord_channel_values() {
        let t: Tensor<f64> = coord_channels(&PatchCoords::full(), [1, 1, 2]);
        assert_eq!(&t.data()[4..6], &[0.25, 0.75]);
        let c = PatchCoords::new(0.25, [0.75, 0.5, 0.0]).unwrap();
        let t: Tensor<f32> = coord_channels(&c, [4, 8, 8]);
        assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn lattice_queries_reproduce_child_coordinates() {
        // interior child: every child centre lies between parent centres
        let parent = PatchCoords::new(0.5, [0.0, 0.25, 0.5]).unwrap();
        let child = PatchCoords::new(0.125, [0.125, 0.375, 0.625]).unwrap();
        let (cg, pg) = ([2, 4, 4], [4, 8, 8]);
        let parent_cc: Tensor<f64> = coord_channels(&parent, pg);
        let q = lattice_queries::<f64>(&child, cg, &parent, pg).unwrap();
        let sampled = grid_sample_3d(&parent_cc, &q).unwrap();
        let child_cc: Tensor<f64> = coord_channels(&child, cg);
        let n = cg.iter().product::<usize>();
        for i in 0..n {
            for a in 0..3 {
                let diff = sampled.data()[i * 3 + a] - child_cc.data()[a * n + i];
                assert!(diff.abs() < 1e-6, "token {i} axis {a}: {diff}");
            }
        }
    }

    #[test]
    fn tile_counts_and_coverage() {
        let p = plan_tiles(0, [8, 16, 16], [4, 8, 8], [Overlap::None; 3]).unwrap();
        assert_eq!(p.len(), 8);
        assert!(p.coverage_grid().iter().all(|&c| c == 1));

        let p = plan_tiles(0, [8, 16, 16], [4, 8, 8], [Overlap::None, Overlap::Half, Overlap::None]).unwrap();
        assert_eq!(p.len(), 2 * 3 * 2);
        for h in 0..16 {
            let want = if (4..12).contains(&h) { 2 } else { 1 };
            assert_eq!(p.coverage([1, h, 3]), want);
        }

        assert!(plan_tiles(0, [8, 18, 16], [4, 9, 8], [Overlap::Half; 3]).is_err());
        assert!(plan_tiles(0, [8, 15, 16], [4, 8, 8], [Overlap::None; 3]).is_err());
    }

    #[test]
    fn coords_serialize_as_four_floats() {
        let c = PatchCoords::new(0.25, [0.5, 0.25, 0.75]).unwrap();
        let b = c.to_bytes();
        assert_eq!(&b[0..4], &0.25f32.to_le_bytes());
        assert_eq!(PatchCoords::from_bytes(&b).unwrap(), c);
    }

    #[test]
    fn overlap_flags_parse() {
        assert_eq!(Overlap::parse_axes("none").unwrap(), [Overlap::None; 3]);
        let hw = Overlap::parse_axes("hw").unwrap();
        assert_eq!(hw, [Overlap::None, Overlap::Half, Overlap::Half]);
        assert_eq!(Overlap::format_axes(&hw), "hw");
        assert!(Overlap::parse_axes("x").is_err());
    }
}
