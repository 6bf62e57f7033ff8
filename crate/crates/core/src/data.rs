//! Synthetic class-conditional video data, the `HPDMVID0` tensor file and
//! PPM frame export.

use std::io::Write;
use std::path::Path;

use rand::Rng as _;

use crate::codec::{ByteReader, ByteWriter};
use crate::numerics::Tensor;
use crate::{par, rng, Error, Result};

const VIDEO_MAGIC: &[u8; 8] = b"HPDMVID0";
const VIDEO_WHAT: &str = "video file";

/// Shape families; a class picks `class % 4`.
const SHAPES: usize = 4;

/// Per-class RGB colours in `[-1, 1]`, cycled for larger class counts.
const PALETTE: [[f32; 3]; 8] = [
    [0.9, -0.6, -0.6],
    [-0.6, 0.9, -0.5],
    [-0.5, -0.4, 0.95],
    [0.85, 0.85, -0.7],
    [-0.7, 0.8, 0.8],
    [0.8, -0.5, 0.85],
    [1.0, 0.3, -0.9],
    [0.2, -0.9, 0.4],
];

const BACKGROUND: f32 = -0.8;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    /// `(F, H, W)`.
    pub resolution: [usize; 3],
    pub channels: usize,
    pub num_classes: usize,
    pub shapes_per_video: usize,
    /// Velocities are drawn from `-max_velocity..=max_velocity` voxels/frame.
    pub max_velocity: i64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            resolution: [16, 32, 32],
            channels: 3,
            num_classes: 4,
            shapes_per_video: 2,
            max_velocity: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    /// `[C, F, H, W]` with values in `[-1, 1]`.
    pub video: Tensor<f32>,
    pub class: usize,
    /// Generator seed, if the record was synthesized.
    pub seed: Option<u64>,
}

/// One moving sprite of a synthetic video.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sprite {
    pub y: i64,
    pub x: i64,
    pub radius: i64,
    pub vy: i64,
    pub vx: i64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.resolution.contains(&0) {
            return Err(Error::config("data.resolution", "dimensions must be positive"));
        }
        if self.channels != 3 {
            return Err(Error::config("data.channels", "synthetic videos are RGB"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("data.classes", "must be positive"));
        }
        if self.max_velocity < 0 {
            return Err(Error::config("data.max_velocity", "must be non-negative"));
        }
        Ok(())
    }

    /// Draws the class and sprites of record `index`.
    pub fn layout(&self, index: u64) -> (usize, Vec<Sprite>) {
        let mut r = rng::stream(self.seed, &[0x7669_6465_6f, index]);
        let class = r.random_range(0..self.num_classes);
        let [_, h, w] = self.resolution;
        let max_r = (h.min(w) as i64 / 4).max(1);
        let sprites = (0..self.shapes_per_video.max(1))
            .map(|_| Sprite {
                y: r.random_range(0..h as i64),
                x: r.random_range(0..w as i64),
                radius: r.random_range((max_r / 2).max(1)..=max_r),
                vy: r.random_range(-self.max_velocity..=self.max_velocity),
                vx: r.random_range(-self.max_velocity..=self.max_velocity),
            })
            .collect();
        (class, sprites)
    }

    pub fn render(&self, class: usize, sprites: &[Sprite]) -> Tensor<f32> {
        let [f, h, w] = self.resolution;
        let c = self.channels;
        let mut video = Tensor::full(&[c, f, h, w], BACKGROUND);
        let colour = PALETTE[class % PALETTE.len()];
        let shade = 1.0 - 0.15 * (class / PALETTE.len()) as f32;
        let data = video.data_mut();
        for t in 0..f {
            for s in sprites {
                let cy = s.y + s.vy * t as i64;
                let cx = s.x + s.vx * t as i64;
                for dy in -s.radius..=s.radius {
                    for dx in -s.radius..=s.radius {
                        if !inside(class % SHAPES, dy, dx, s.radius) {
                            continue;
                        }
                        let y = (cy + dy).rem_euclid(h as i64) as usize;
                        let x = (cx + dx).rem_euclid(w as i64) as usize;
                        for ch in 0..c {
                            data[((ch * f + t) * h + y) * w + x] = colour[ch] * shade;
                        }
                    }
                }
            }
        }
        video
    }

    pub fn record(&self, index: u64) -> VideoRecord {
        let (class, sprites) = self.layout(index);
        VideoRecord {
            video: self.render(class, &sprites),
            class,
            seed: Some(rng::derive_seed(self.seed, &[index])),
        }
    }
}

fn inside(shape: usize, dy: i64, dx: i64, r: i64) -> bool {
    match shape {
        0 => true,
        1 => dy * dy + dx * dx <= r * r,
        2 => dy.abs() <= r / 3 || dx.abs() <= r / 3,
        _ => {
            let d = dy.abs() + dx.abs();
            d <= r && d >= r / 2
        }
    }
}

/// Records `0..count`, generated in parallel; identical for a given seed.
pub fn generate_dataset(spec: &SyntheticSpec, count: usize) -> Result<Vec<VideoRecord>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::config("data.count", "must be at least 1"));
    }
    let idx: Vec<u64> = (0..count as u64).collect();
    Ok(par::map(&idx, |&i| spec.record(i)))
}

/// Checks that a record matches the expected `(F, H, W)` resolution.
pub fn check_resolution(record: &VideoRecord, expect: [usize; 3]) -> Result<()> {
    if record.video.rank() != 4 || record.video.shape()[1..] != expect {
        return Err(Error::config(
            "data.resolution",
            format!(
                "video {:?} does not match pyramid full resolution {expect:?}",
                record.video.shape()
            ),
        ));
    }
    Ok(())
}

pub fn video_to_bytes(record: &VideoRecord) -> Result<Vec<u8>> {
    if record.video.rank() != 4 {
        return Err(Error::InvalidShape {
            op: "write_video",
            msg: format!("expected [C, F, H, W], got {:?}", record.video.shape()),
        });
    }
    let mut w = ByteWriter::default();
    w.bytes(VIDEO_MAGIC);
    w.u32(record.class as u32);
    for &d in record.video.shape() {
        w.u32(d as u32);
    }
    w.f32s(record.video.data());
    Ok(w.finish_crc())
}

pub fn video_from_bytes(bytes: &[u8]) -> Result<VideoRecord> {
    let mut r = ByteReader::new(bytes, VIDEO_WHAT);
    r.magic(VIDEO_MAGIC)?;
    let class = r.u32()? as usize;
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n > 0)
        .ok_or_else(|| r.malformed(format!("invalid dims {dims:?}")))?;
    let data = r.f32s(n)?;
    r.crc_footer()?;
    r.finish()?;
    Ok(VideoRecord {
        video: Tensor::new(&dims, data)?,
        class,
        seed: None,
    })
}

pub fn write_video(path: &Path, record: &VideoRecord) -> Result<()> {
    std::fs::write(path, video_to_bytes(record)?).map_err(|e| Error::io(path, e))
}

pub fn read_video(path: &Path) -> Result<VideoRecord> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    video_from_bytes(&bytes)
}

/// Maps `[-1, 1]` to a byte with round-half-up.
pub fn to_byte(v: f32) -> u8 {
    ((v as f64 + 1.0) * 127.5 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Writes `frame_%04d.ppm` (binary P6) for every frame of a 3-channel video.
pub fn export_frames(video: &Tensor<f32>, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let [c, f, h, w] = match *video.shape() {
        [c, f, h, w] => [c, f, h, w],
        _ => {
            return Err(Error::InvalidShape {
                op: "export_frames",
                msg: format!("expected [3, F, H, W], got {:?}", video.shape()),
            })
        }
    };
    if c != 3 {
        return Err(Error::InvalidShape {
            op: "export_frames",
            msg: format!("expected 3 channels, got {c}"),
        });
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let d = video.data();
    let mut paths = Vec::with_capacity(f);
    for t in 0..f {
        let path = dir.join(format!("frame_{t:04}.ppm"));
        let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    buf.push(to_byte(d[((ch * f + t) * h + y) * w + x]));
                }
            }
        }
        let mut file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Parses a binary P6 image with maxval 255 into `(width, height, rgb)`.
pub fn read_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |msg: &str| Error::Malformed {
        what: "ppm",
        msg: msg.into(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Truncated { what: "ppm" });
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("expected P6 with maxval 255"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let body = bytes.get(pos..).ok_or(Error::Truncated { what: "ppm" })?;
    if body.len() != w * h * 3 {
        return Err(Error::Truncated { what: "ppm" });
    }
    Ok((w, h, body.to_vec()))
}
