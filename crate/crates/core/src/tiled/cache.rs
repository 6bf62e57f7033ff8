use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::codec::{ByteReader, ByteWriter};
use crate::denoiser::ContextSource;
use crate::numerics::grid_sample::taps;
use crate::numerics::{grid_sample_3d, Tensor};
use crate::patchgeom::{lattice_queries, PatchCoords};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"HPDMCACH";
const WHAT: &str = "cache spill file";

static NEXT_DIR: AtomicU64 = AtomicU64::new(0);

type Key = (usize, usize);

/// Usage counters of an [`ActivationCache`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub resident_bytes: usize,
    pub high_water_bytes: usize,
    pub spills: usize,
    pub reloads: usize,
}

struct Inner {
    resident: HashMap<Key, Arc<Tensor<f32>>>,
    spilled: HashMap<Key, PathBuf>,
    /// Resident keys, least recently used first.
    lru: Vec<Key>,
    stats: CacheStats,
}

/// Stitched per-(level, block) token canvases `[d, G_f, G_h, G_w]`, each
/// covering the whole video, with LRU spill to disk beyond a byte budget.
pub struct ActivationCache {
    inner: Mutex<Inner>,
    budget: usize,
    dir: PathBuf,
    owns_dir: bool,
}

impl ActivationCache {
    /// Spills into a private temporary directory removed on drop.
    pub fn new(budget_bytes: usize) -> Self {
        let dir = std::env::temp_dir().join(format!(
            "hpdm-cache-{}-{}",
            std::process::id(),
            NEXT_DIR.fetch_add(1, Ordering::Relaxed)
        ));
        Self::build(budget_bytes, dir, true)
    }

    /// Spills into `dir`, which is left in place.
    pub fn with_dir(budget_bytes: usize, dir: PathBuf) -> Self {
        Self::build(budget_bytes, dir, false)
    }

    fn build(budget: usize, dir: PathBuf, owns_dir: bool) -> Self {
        Self {
            inner: Mutex::new(Inner {
                resident: HashMap::new(),
                spilled: HashMap::new(),
                lru: Vec::new(),
                stats: CacheStats::default(),
            }),
            budget,
            dir,
            owns_dir,
        }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn stats(&self) -> CacheStats {
        self.lock().stats
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn contains(&self, level: usize, block: usize) -> bool {
        let g = self.lock();
        g.resident.contains_key(&(level, block)) || g.spilled.contains_key(&(level, block))
    }

    /// Stored keys in ascending order.
    pub fn keys(&self) -> Vec<(usize, usize)> {
        let g = self.lock();
        let mut k: Vec<Key> = g.resident.keys().chain(g.spilled.keys()).copied().collect();
        k.sort_unstable();
        k
    }

    pub fn spill_path(&self, level: usize, block: usize) -> Option<PathBuf> {
        self.lock().spilled.get(&(level, block)).cloned()
    }

    pub fn store(&self, level: usize, block: usize, canvas: Tensor<f32>) -> Result<()> {
        if canvas.rank() != 4 {
            return Err(Error::Cache(format!(
                "canvas for ({level}, {block}) must be [d, F, H, W], got {:?}",
                canvas.shape()
            )));
        }
        let mut g = self.lock();
        let key = (level, block);
        if let Some(old) = g.resident.remove(&key) {
            g.stats.resident_bytes -= bytes_of(&old);
            g.lru.retain(|k| *k != key);
        }
        if let Some(p) = g.spilled.remove(&key) {
            let _ = std::fs::remove_file(p);
        }
        self.admit(&mut g, key, Arc::new(canvas))
    }

    fn admit(&self, g: &mut Inner, key: Key, canvas: Arc<Tensor<f32>>) -> Result<()> {
        g.stats.resident_bytes += bytes_of(&canvas);
        g.stats.high_water_bytes = g.stats.high_water_bytes.max(g.stats.resident_bytes);
        g.resident.insert(key, canvas);
        g.lru.push(key);
        while g.stats.resident_bytes > self.budget && g.lru.len() > 1 {
            let victim = g.lru.remove(0);
            let t = g.resident.remove(&victim).expect("lru entries are resident");
            let path = self.dir.join(format!("level{}_block{}.cache", victim.0, victim.1));
            std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
            std::fs::write(&path, spill_bytes(victim, &t)).map_err(|e| Error::io(&path, e))?;
            g.stats.resident_bytes -= bytes_of(&t);
            g.stats.spills += 1;
            g.spilled.insert(victim, path);
        }
        Ok(())
    }

    /// Spills every resident canvas regardless of the budget.
    pub fn spill_all(&self) -> Result<()> {
        let mut g = self.lock();
        let keys = std::mem::take(&mut g.lru);
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        for key in keys {
            let t = g.resident.remove(&key).expect("lru entries are resident");
            let path = self.dir.join(format!("level{}_block{}.cache", key.0, key.1));
            std::fs::write(&path, spill_bytes(key, &t)).map_err(|e| Error::io(&path, e))?;
            g.stats.resident_bytes -= bytes_of(&t);
            g.stats.spills += 1;
            g.spilled.insert(key, path);
        }
        Ok(())
    }

    /// The stored canvas, reloading it from disk if it was spilled.
    pub fn get(&self, level: usize, block: usize) -> Result<Arc<Tensor<f32>>> {
        let key = (level, block);
        let mut g = self.lock();
        if let Some(t) = g.resident.get(&key).cloned() {
            g.lru.retain(|k| *k != key);
            g.lru.push(key);
            return Ok(t);
        }
        let path = g
            .spilled
            .get(&key)
            .cloned()
            .ok_or_else(|| Error::Cache(format!("no canvas stored for level {level}, block {block}")))?;
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (k, t) = read_spill(&bytes)?;
        if k != key {
            return Err(Error::Malformed {
                what: WHAT,
                msg: format!("file holds {k:?}, expected {key:?}"),
            });
        }
        g.spilled.remove(&key);
        let _ = std::fs::remove_file(&path);
        g.stats.reloads += 1;
        let t = Arc::new(t);
        self.admit(&mut g, key, t.clone())?;
        Ok(t)
    }

    /// Trilinear samples `[Q, d]` of the canvas at normalized `queries`.
    pub fn query(&self, level: usize, block: usize, queries: &Tensor<f32>) -> Result<Tensor<f32>> {
        let canvas = self.get(level, block)?;
        grid_sample_3d(&canvas, queries)
    }
}

impl Drop for ActivationCache {
    fn drop(&mut self) {
        let g = self.lock();
        for p in g.spilled.values() {
            let _ = std::fs::remove_file(p);
        }
        drop(g);
        if self.owns_dir {
            let _ = std::fs::remove_dir(&self.dir);
        }
    }
}

impl ContextSource<f32> for ActivationCache {
    fn sample(&self, level: usize, block: usize, child: &PatchCoords, child_grid: [usize; 3]) -> Result<Tensor<f32>> {
        let canvas = self.get(level, block)?;
        let s = canvas.shape();
        let (d, dims) = (s[0], [s[1], s[2], s[3]]);
        let voxels: usize = dims.iter().product();
        let q = lattice_queries::<f64>(child, child_grid, &PatchCoords::full(), dims)?;
        let n = q.shape()[0];
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            let r = &q.data()[3 * i..3 * i + 3];
            let t = taps(dims, [r[0], r[1], r[2]], i)?;
            for ch in 0..d {
                let plane = &canvas.data()[ch * voxels..(ch + 1) * voxels];
                let v: f64 = (0..8).map(|k| t.weight[k] * plane[t.offset[k]] as f64).sum();
                out.push(v as f32);
            }
        }
        Tensor::new(&[n, d], out)
    }
}

fn bytes_of(t: &Tensor<f32>) -> usize {
    t.numel() * 4
}

/// `"HPDMCACH" | level u32 | block u32 | rank u32 | dims u32… | f32 payload | crc32`
pub fn spill_bytes(key: (usize, usize), t: &Tensor<f32>) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.bytes(MAGIC);
    w.u32(key.0 as u32);
    w.u32(key.1 as u32);
    w.tensor(t);
    w.finish_crc()
}

pub fn read_spill(bytes: &[u8]) -> Result<((usize, usize), Tensor<f32>)> {
    let mut r = ByteReader::new(bytes, WHAT);
    r.magic(MAGIC)?;
    let level = r.u32()? as usize;
    let block = r.u32()? as usize;
    let t = r.tensor()?;
    r.crc_footer()?;
    r.finish()?;
    Ok(((level, block), t))
}

pub fn read_spill_file(path: &Path) -> Result<((usize, usize), Tensor<f32>)> {
    read_spill(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn canvas(seed: u64) -> Tensor<f32> {
        Tensor::randn(&[4, 2, 4, 4], 1.0, &mut rng::stream(seed, &[]))
    }

    #[test]
    fn lattice_point_query_is_exact() {
        let cache = ActivationCache::new(usize::MAX);
        let c = canvas(1);
        cache.store(0, 0, c.clone()).unwrap();
        let q = Tensor::new(&[1, 3], vec![1.0, 1.0 / 3.0, 2.0 / 3.0]).unwrap();
        let got = cache.query(0, 0, &q).unwrap();
        for ch in 0..4 {
            assert!((got.data()[ch] - c.data()[((ch * 2 + 1) * 4 + 1) * 4 + 2]).abs() < 1e-6);
        }
    }

    #[test]
    fn query_before_store_fails() {
        let cache = ActivationCache::new(usize::MAX);
        let q = Tensor::new(&[1, 3], vec![0.0; 3]).unwrap();
        assert!(matches!(cache.query(1, 2, &q), Err(Error::Cache(_))));
    }

    #[test]
    fn spill_and_reload_are_lossless() {
        let cache = ActivationCache::new(usize::MAX);
        let c = canvas(2);
        cache.store(1, 0, c.clone()).unwrap();
        let q = Tensor::<f32>::randn(&[16, 3], 1.0, &mut rng::stream(3, &[])).map(|v| v.abs().min(1.0));
        let before = cache.query(1, 0, &q).unwrap();
        cache.spill_all().unwrap();
        assert!(cache.spill_path(1, 0).is_some());
        assert_eq!(cache.stats().resident_bytes, 0);
        assert_eq!(cache.query(1, 0, &q).unwrap(), before);
        assert_eq!(*cache.get(1, 0).unwrap(), c);
    }

    #[test]
    fn corrupted_spill_is_detected() {
        let cache = ActivationCache::new(usize::MAX);
        cache.store(0, 1, canvas(4)).unwrap();
        cache.spill_all().unwrap();
        let path = cache.spill_path(0, 1).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[40] ^= 0x01;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(cache.get(0, 1), Err(Error::Checksum { .. })));
    }

    #[test]
    fn budget_bounds_high_water() {
        let one = 4 * 2 * 4 * 4 * 4;
        let cache = ActivationCache::new(2 * one + 10);
        for b in 0..6 {
            cache.store(0, b, canvas(b as u64)).unwrap();
            assert!(cache.stats().resident_bytes <= cache.budget());
        }
        for b in (0..6).rev() {
            assert_eq!(*cache.get(0, b).unwrap(), canvas(b as u64));
        }
        let s = cache.stats();
        assert!(s.high_water_bytes <= cache.budget() + one);
        assert!(s.spills >= 4 && s.reloads >= 4);
    }
}
