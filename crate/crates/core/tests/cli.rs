use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hpdm::tiled::Manifest;

const TINY: &str = include_str!("../../../configs/tiny.cfg");

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn arg(&self, rel: &str) -> String {
        self.path(rel).to_str().unwrap().to_string()
    }

    fn run(&self, args: &[&str], env: &[(&str, &str)]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_hpdm"));
        cmd.args(args).current_dir(self.dir.path()).env_remove("HPDM_THREADS");
        for (k, v) in env {
            cmd.env(k, v);
        }
        cmd.output().unwrap()
    }

    fn train(&self, out: &str, steps: &str) -> Output {
        self.run(
            &["--deterministic", "train", "--config", &self.arg("tiny.cfg"), "--steps", steps, "--out", &self.arg(out)],
            &[],
        )
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn zero_steps_writes_initial_checkpoint_and_header() {
    let ws = Workspace::new();
    let o = ws.train("run", "0");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(ws.path("run/latest.ckpt").exists());
    let metrics = std::fs::read_to_string(ws.path("run/metrics.csv")).unwrap();
    assert_eq!(metrics, "step,loss,loss_l0,loss_l1,lr,wall_seconds,videos_per_sec\n");
    let cfg = std::fs::read_to_string(ws.path("run/config.txt")).unwrap();
    assert!(cfg.contains("pyramid.patch = 2x4x4"));
}

#[test]
fn metrics_and_periodic_checkpoints() {
    let ws = Workspace::new();
    let o = ws.run(
        &["--deterministic", "train", "--config", &ws.arg("tiny.cfg"), "--steps", "10", "--log-every", "2", "--out", &ws.arg("run")],
        &[],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = std::fs::read_to_string(ws.path("run/metrics.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    for (i, row) in rows.iter().enumerate() {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols.len(), 7);
        assert_eq!(cols[0], ((i + 1) * 2).to_string());
        assert!(cols[1].parse::<f64>().unwrap().is_finite());
    }
    assert!(ws.path("run/step_000005.ckpt").exists());
    assert!(ws.path("run/step_000010.ckpt").exists());
}

#[test]
fn config_errors_exit_with_two() {
    let ws = Workspace::new();
    std::fs::write(ws.path("bad.cfg"), format!("{TINY}\nmodel.colour = 3\n")).unwrap();
    let o = ws.run(&["train", "--config", &ws.arg("bad.cfg"), "--out", &ws.arg("x")], &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("model.colour"), "{}", stderr(&o));

    std::fs::write(ws.path("bad.cfg"), format!("{TINY}\nmodel.load = 2,1\n")).unwrap();
    let o = ws.run(&["train", "--config", &ws.arg("bad.cfg"), "--out", &ws.arg("x")], &[]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let o = ws.run(&["train", "--config", &ws.arg("tiny.cfg"), "--out", &ws.arg("x")], &[("HPDM_THREADS", "many")]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("HPDM_THREADS"));

    let o = ws.run(&["train", "--bogus-flag"], &[]);
    assert_eq!(code(&o), 2);
}

#[test]
fn unknown_class_and_corrupt_files() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.train("run", "2")), 0);
    let ckpt = ws.arg("run/latest.ckpt");
    let o = ws.run(&["sample", &ckpt, "--class", "99", "--out", &ws.arg("s")], &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("99"));

    let mut bytes = std::fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    std::fs::write(ws.path("bad.ckpt"), &bytes).unwrap();
    let o = ws.run(&["inspect", &ws.arg("bad.ckpt")], &[]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let o = ws.run(&["sample", &ws.arg("bad.ckpt"), "--out", &ws.arg("s")], &[]);
    assert_eq!(code(&o), 3);
    assert!(!ws.path("s/video.hpdmvid").exists());

    let o = ws.run(&["inspect", &ws.arg("missing.ckpt")], &[]);
    assert_ne!(code(&o), 0);
}

#[test]
fn resume_rejects_a_different_config() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.train("run", "5")), 0);
    std::fs::write(ws.path("other.cfg"), TINY.replace("optim.total_steps = 10", "optim.total_steps = 11")).unwrap();
    let o = ws.run(
        &["train", "--config", &ws.arg("other.cfg"), "--resume", &ws.arg("run/latest.ckpt"), "--out", &ws.arg("run")],
        &[],
    );
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("resume"));
}

fn manifest_tiles(dir: &Path) -> Vec<usize> {
    Manifest::load(&dir.join("manifest.txt"))
        .unwrap()
        .records
        .iter()
        .map(|r| r.tiles.len())
        .collect()
}

#[test]
fn overlap_flag_sets_tile_counts() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.train("run", "2")), 0);
    let ckpt = ws.arg("run/latest.ckpt");
    for (overlap, tiles) in [("none", vec![1, 8]), ("hw", vec![1, 18]), ("fhw", vec![1, 27])] {
        let out = format!("s_{overlap}");
        let o = ws.run(&["sample", &ckpt, "--overlap", overlap, "--out", &ws.arg(&out)], &[]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert_eq!(manifest_tiles(&ws.path(&out)), tiles, "overlap {overlap}");
    }
    let o = ws.run(&["inspect", &ws.arg("s_hw/manifest.txt")], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = ws.run(&["sample", &ckpt, "--overlap", "xyz", "--out", &ws.arg("s")], &[]);
    assert_eq!(code(&o), 2);
}

#[test]
fn sampling_output_layout() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.train("run", "2")), 0);
    let ckpt = ws.arg("run/latest.ckpt");
    let o = ws.run(&["sample", &ckpt, "--class", "0", "--dump-sigmas", "--no-cache", "--out", &ws.arg("s")], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("level 1 (2 steps)"));
    let video = hpdm::data::read_video(&ws.path("s/video.hpdmvid")).unwrap();
    assert_eq!(video.video.shape(), &[3, 4, 8, 8]);
    assert_eq!(video.class, 0);
    let frames = std::fs::read_dir(ws.path("s/frames")).unwrap().count();
    assert_eq!(frames, 4);
    let m = Manifest::load(&ws.path("s/manifest.txt")).unwrap();
    assert!(!m.cache);
    for path in ["s/video.hpdmvid", "run/latest.ckpt", "tiny.cfg"] {
        let o = ws.run(&["inspect", &ws.arg(path)], &[]);
        assert_eq!(code(&o), 0, "{path}: {}", stderr(&o));
    }
}

#[test]
fn thread_count_does_not_change_training() {
    let ws = Workspace::new();
    let cfg = ws.arg("tiny.cfg");
    let one = ws.run(&["train", "--config", &cfg, "--steps", "4", "--out", &ws.arg("one")], &[("HPDM_THREADS", "1")]);
    let two = ws.run(&["train", "--config", &cfg, "--steps", "4", "--out", &ws.arg("two")], &[("HPDM_THREADS", "2")]);
    assert_eq!(code(&one), 0);
    assert_eq!(code(&two), 0);
    assert!(stderr(&two).contains("on 2 thread(s)"), "{}", stderr(&two));
    assert_eq!(
        std::fs::read(ws.path("one/latest.ckpt")).unwrap(),
        std::fs::read(ws.path("two/latest.ckpt")).unwrap()
    );
}

#[test]
fn bench_prints_a_table() {
    let ws = Workspace::new();
    let o = ws.run(&["bench", "--config", &ws.arg("tiny.cfg"), "--iters", "1", "--batch", "1"], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("adaptive") && out.contains("flat"), "{out}");
}
