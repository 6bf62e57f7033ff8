//! Trilinear sampling of a `[C, F, H, W]` feature volume.
//!
//! Queries are normalized `(f, h, w)` positions with the align-corners
//! convention: 0 is the centre of the first voxel along an axis and 1 the
//! centre of the last. Single-voxel axes always return that voxel.

use super::{Elem, Tensor};
use crate::{Error, Result};

/// Queries may overshoot the unit cube by this much (rounding slack).
pub const QUERY_TOLERANCE: f64 = 1e-6;

/// Flat voxel offsets and weights of the eight interpolation neighbours.
#[derive(Clone, Copy, Debug)]
pub struct Taps {
    pub offset: [usize; 8],
    pub weight: [f64; 8],
}

fn axis_taps(u: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let x = u * (n - 1) as f64;
    let i0 = (x.floor() as usize).min(n - 2);
    (i0, i0 + 1, x - i0 as f64)
}

/// Interpolation taps for one query against a `[F, H, W]` lattice.
pub fn taps(dims: [usize; 3], query: [f64; 3], index: usize) -> Result<Taps> {
    let mut q = query;
    for u in q.iter_mut() {
        if !(*u >= -QUERY_TOLERANCE && *u <= 1.0 + QUERY_TOLERANCE) {
            return Err(Error::QueryOutOfRange {
                index,
                coords: query,
            });
        }
        *u = u.clamp(0.0, 1.0);
    }
    let [nf, nh, nw] = dims;
    let (f0, f1, tf) = axis_taps(q[0], nf);
    let (h0, h1, th) = axis_taps(q[1], nh);
    let (w0, w1, tw) = axis_taps(q[2], nw);
    let mut out = Taps {
        offset: [0; 8],
        weight: [0.0; 8],
    };
    let mut k = 0;
    for (fi, fw) in [(f0, 1.0 - tf), (f1, tf)] {
        for (hi, hw) in [(h0, 1.0 - th), (h1, th)] {
            for (wi, ww) in [(w0, 1.0 - tw), (w1, tw)] {
                out.offset[k] = (fi * nh + hi) * nw + wi;
                out.weight[k] = fw * hw * ww;
                k += 1;
            }
        }
    }
    Ok(out)
}

pub(crate) fn volume_dims<T: Elem>(features: &Tensor<T>) -> Result<(usize, [usize; 3])> {
    match features.shape() {
        &[c, f, h, w] => Ok((c, [f, h, w])),
        s => Err(Error::InvalidShape {
            op: "grid_sample_3d",
            msg: format!("features must be [C,F,H,W], got {s:?}"),
        }),
    }
}

pub(crate) fn query_taps<T: Elem>(dims: [usize; 3], queries: &Tensor<T>) -> Result<Vec<Taps>> {
    let q = match queries.shape() {
        &[q, 3] => q,
        s => {
            return Err(Error::InvalidShape {
                op: "grid_sample_3d",
                msg: format!("queries must be [Q,3], got {s:?}"),
            })
        }
    };
    let d = queries.data();
    (0..q)
        .map(|i| {
            let p = [d[3 * i].as_f64(), d[3 * i + 1].as_f64(), d[3 * i + 2].as_f64()];
            taps(dims, p, i)
        })
        .collect()
}

/// Gathers `[Q, C]` samples from `features` given precomputed taps.
pub(crate) fn gather<T: Elem>(features: &[T], channels: usize, voxels: usize, taps: &[Taps]) -> Vec<T> {
    let mut out = vec![T::zero(); taps.len() * channels];
    for (qi, t) in taps.iter().enumerate() {
        let row = &mut out[qi * channels..(qi + 1) * channels];
        for (c, o) in row.iter_mut().enumerate() {
            let plane = &features[c * voxels..(c + 1) * voxels];
            let mut acc = T::zero();
            for k in 0..8 {
                acc = acc + T::of(t.weight[k]) * plane[t.offset[k]];
            }
            *o = acc;
        }
    }
    out
}

/// Adjoint of [`gather`]: scatters `[Q, C]` output gradients into `[C, S]`.
pub(crate) fn scatter<T: Elem>(grad_out: &[T], channels: usize, voxels: usize, taps: &[Taps]) -> Vec<T> {
    let mut g = vec![T::zero(); channels * voxels];
    for (qi, t) in taps.iter().enumerate() {
        for c in 0..channels {
            let go = grad_out[qi * channels + c];
            let plane = &mut g[c * voxels..(c + 1) * voxels];
            for k in 0..8 {
                plane[t.offset[k]] = plane[t.offset[k]] + T::of(t.weight[k]) * go;
            }
        }
    }
    g
}

/// Trilinear samples `[Q, C]` of `features [C,F,H,W]` at `queries [Q,3]`.
pub fn grid_sample_3d<T: Elem>(features: &Tensor<T>, queries: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, dims) = volume_dims(features)?;
    let taps = query_taps(dims, queries)?;
    let voxels = dims.iter().product();
    let out = gather(features.data(), c, voxels, &taps);
    Tensor::new(&[taps.len(), c], out)
}
