use std::fmt::Write as _;
use std::path::Path;

use crate::patchgeom::PatchCoords;
use crate::{Error, Result};

const HEADER: &str = "HPDM-MANIFEST 1";
const WHAT: &str = "manifest";

/// Per-level sampling record.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelRecord {
    pub level: usize,
    pub canvas: [usize; 3],
    /// The σ grid, ending in 0.
    pub sigmas: Vec<f64>,
    pub tiles: Vec<PatchCoords>,
    pub step_ms: Vec<f64>,
    pub final_pass_ms: f64,
}

impl LevelRecord {
    pub fn steps(&self) -> usize {
        self.sigmas.len().saturating_sub(1)
    }
}

/// Line-oriented description of one generation run.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub config_hash: u64,
    pub seed: u64,
    pub class: Option<usize>,
    pub levels: usize,
    pub patch: [usize; 3],
    pub full: [usize; 3],
    pub overlap: String,
    pub cache: bool,
    pub records: Vec<LevelRecord>,
}

fn dims(d: [usize; 3]) -> String {
    format!("{}x{}x{}", d[0], d[1], d[2])
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{HEADER}");
        let _ = writeln!(s, "config_hash {:016x}", self.config_hash);
        let _ = writeln!(s, "seed {}", self.seed);
        match self.class {
            Some(c) => {
                let _ = writeln!(s, "class {c}");
            }
            None => {
                let _ = writeln!(s, "class none");
            }
        }
        let _ = writeln!(
            s,
            "pyramid levels={} patch={} full={}",
            self.levels,
            dims(self.patch),
            dims(self.full)
        );
        let _ = writeln!(s, "overlap {}", self.overlap);
        let _ = writeln!(s, "cache {}", if self.cache { "on" } else { "off" });
        for r in &self.records {
            let _ = writeln!(
                s,
                "level {} canvas={} steps={} tiles={}",
                r.level,
                dims(r.canvas),
                r.steps(),
                r.tiles.len()
            );
            let sig: Vec<String> = r.sigmas.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(s, "sigmas {}", sig.join(" "));
            let tiles: Vec<String> = r.tiles.iter().map(|t| hex(&t.to_bytes())).collect();
            let _ = writeln!(s, "tiles {}", tiles.join(" "));
            let ms: Vec<String> = r.step_ms.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(s, "step_ms {}", ms.join(" "));
            let _ = writeln!(s, "final_ms {:?}", r.final_pass_ms);
        }
        let _ = writeln!(s, "end");
        let crc = crc32fast::hash(s.as_bytes());
        let _ = writeln!(s, "crc32 {crc:08x}");
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Malformed { what: WHAT, msg };
        let end = text.find("\nend\n").ok_or(Error::Truncated { what: WHAT })? + 5;
        let footer = &text[end..];
        let stored = footer
            .strip_prefix("crc32 ")
            .and_then(|f| f.strip_suffix('\n'))
            .ok_or(Error::Truncated { what: WHAT })?;
        let stored = u32::from_str_radix(stored, 16).map_err(|_| bad("bad crc32 line".into()))?;
        let computed = crc32fast::hash(&text.as_bytes()[..end]);
        if stored != computed {
            return Err(Error::Checksum {
                what: WHAT,
                stored,
                computed,
            });
        }
        let mut lines = text[..end].lines();
        let mut next = |key: &str| -> Result<&str> {
            let line = lines.next().ok_or(Error::Truncated { what: WHAT })?;
            if key.is_empty() {
                return Ok(line);
            }
            line.strip_prefix(key)
                .and_then(|l| l.strip_prefix(' ').or(if l.is_empty() { Some("") } else { None }))
                .ok_or_else(|| bad(format!("expected `{key}`, found `{line}`")))
        };
        if next("")? != HEADER {
            return Err(Error::BadMagic { what: WHAT });
        }
        let config_hash = u64::from_str_radix(next("config_hash")?, 16).map_err(|_| bad("config_hash".into()))?;
        let seed = next("seed")?.parse().map_err(|_| bad("seed".into()))?;
        let class = match next("class")? {
            "none" => None,
            c => Some(c.parse().map_err(|_| bad("class".into()))?),
        };
        let pyr = next("pyramid")?;
        let kv = parse_kv(pyr);
        let levels = kv_get(&kv, "levels")?.parse().map_err(|_| bad("levels".into()))?;
        let patch = parse_dims(kv_get(&kv, "patch")?)?;
        let full = parse_dims(kv_get(&kv, "full")?)?;
        let overlap = next("overlap")?.to_string();
        let cache = match next("cache")? {
            "on" => true,
            "off" => false,
            other => return Err(bad(format!("cache `{other}`"))),
        };
        let mut records = Vec::new();
        loop {
            let line = next("")?;
            if line == "end" {
                break;
            }
            let rest = line
                .strip_prefix("level ")
                .ok_or_else(|| bad(format!("expected `level`, found `{line}`")))?;
            let mut parts = rest.splitn(2, ' ');
            let level = parts.next().unwrap_or("").parse().map_err(|_| bad("level".into()))?;
            let kv = parse_kv(parts.next().unwrap_or(""));
            let canvas = parse_dims(kv_get(&kv, "canvas")?)?;
            let steps: usize = kv_get(&kv, "steps")?.parse().map_err(|_| bad("steps".into()))?;
            let ntiles: usize = kv_get(&kv, "tiles")?.parse().map_err(|_| bad("tiles".into()))?;
            let sigmas = parse_floats(next("sigmas")?)?;
            let tiles = next("tiles")?
                .split_whitespace()
                .map(parse_tile)
                .collect::<Result<Vec<_>>>()?;
            let step_ms = parse_floats(next("step_ms")?)?;
            let final_pass_ms = next("final_ms")?.parse().map_err(|_| bad("final_ms".into()))?;
            if sigmas.len() != steps + 1 || tiles.len() != ntiles {
                return Err(bad(format!("level {level}: counts disagree with header")));
            }
            records.push(LevelRecord {
                level,
                canvas,
                sigmas,
                tiles,
                step_ms,
                final_pass_ms,
            });
        }
        Ok(Self {
            config_hash,
            seed,
            class,
            levels,
            patch,
            full,
            overlap,
            cache,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Malformed {
            what: WHAT,
            msg: "not UTF-8".into(),
        })?;
        Self::from_text(&text)
    }
}

fn parse_kv(s: &str) -> Vec<(&str, &str)> {
    s.split_whitespace().filter_map(|p| p.split_once('=')).collect()
}

fn kv_get<'a>(kv: &[(&str, &'a str)], key: &str) -> Result<&'a str> {
    kv.iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::Malformed {
            what: WHAT,
            msg: format!("missing `{key}`"),
        })
}

fn parse_dims(s: &str) -> Result<[usize; 3]> {
    let v: Vec<usize> = s
        .split('x')
        .map(|p| p.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Malformed {
            what: WHAT,
            msg: format!("bad dims `{s}`"),
        })?;
    v.try_into().map_err(|_| Error::Malformed {
        what: WHAT,
        msg: format!("bad dims `{s}`"),
    })
}

fn parse_floats(s: &str) -> Result<Vec<f64>> {
    s.split_whitespace()
        .map(|p| {
            p.parse::<f64>().map_err(|_| Error::Malformed {
                what: WHAT,
                msg: format!("bad number `{p}`"),
            })
        })
        .collect()
}

fn parse_tile(s: &str) -> Result<PatchCoords> {
    let bad = || Error::Malformed {
        what: WHAT,
        msg: format!("bad tile `{s}`"),
    };
    if s.len() != 32 || !s.is_ascii() {
        return Err(bad());
    }
    let mut b = [0u8; 16];
    for (i, byte) in b.iter_mut().enumerate() {
        *byte = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    PatchCoords::from_bytes(&b)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample() -> Manifest {
        Manifest {
            config_hash: 0xdead_beef_0123_4567,
            seed: 9,
            class: Some(2),
            levels: 2,
            patch: [2, 4, 4],
            full: [4, 8, 8],
            overlap: "hw".into(),
            cache: true,
            records: vec![
                LevelRecord {
                    level: 0,
                    canvas: [2, 4, 4],
                    sigmas: vec![80.0, 1.234_567_890_123, 0.002, 0.0],
                    tiles: vec![PatchCoords::full()],
                    step_ms: vec![1.5, 2.25, 0.125],
                    final_pass_ms: 0.5,
                },
                LevelRecord {
                    level: 1,
                    canvas: [4, 8, 8],
                    sigmas: vec![40.0, 0.002, 0.0],
                    tiles: vec![
                        PatchCoords::new(0.5, [0.0, 0.25, 0.5]).unwrap(),
                        PatchCoords::new(0.5, [0.5, 0.5, 0.0]).unwrap(),
                    ],
                    step_ms: vec![3.0, 4.0],
                    final_pass_ms: 0.0,
                },
            ],
        }
    }

    #[test]
    fn text_round_trip_is_exact() {
        let m = sample();
        let text = m.to_text();
        let back = Manifest::from_text(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn every_byte_flip_fails_closed() {
        let text = sample().to_text();
        for i in 0..text.len() {
            let mut b = text.clone().into_bytes();
            b[i] ^= 0x01;
            if let Ok(t) = String::from_utf8(b) {
                assert!(Manifest::from_text(&t).is_err(), "flip at {i} accepted");
            }
        }
    }

    #[test]
    fn truncation_fails() {
        let text = sample().to_text();
        for cut in [0, 10, text.len() / 2, text.len() - 1] {
            assert!(Manifest::from_text(&text[..cut]).is_err());
        }
    }
}
