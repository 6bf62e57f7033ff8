//! The `hpdm` command line.
//!
//! Exit codes: 0 success, 2 configuration error, 3 unreadable or corrupt
//! artifact, 4 numeric abort, 1 anything else.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::data::{self, generate_dataset, VideoRecord};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::sigma_grid;
use crate::numerics::Checkpoint;
use crate::patchgeom::{plan_tiles, Overlap, PyramidSpec};
use crate::tiled::{read_spill, GenerateOptions, Manifest, Sampler};
use crate::train::{time_forward_backward, Trainer};
use crate::{par, Error, Result};

pub const THREADS_ENV: &str = "HPDM_THREADS";

#[derive(Parser, Debug)]
#[command(name = "hpdm", version, about = "Hierarchical patch diffusion for video")]
pub struct Cli {
    /// Single-threaded, bitwise reproducible execution.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train on the synthetic dataset.
    Train {
        /// Config file; defaults are used for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Stop once the optimizer step counter reaches this value.
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint written with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        log_every: u64,
        /// Overrides `run.out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a video from a checkpoint.
    Sample {
        checkpoint: PathBuf,
        /// Sampler settings; the architecture must match the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        class: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `none`, or the axes to overlap by half a tile, e.g. `hw`, `fhw`.
        #[arg(long)]
        overlap: Option<String>,
        #[arg(long, default_value = "sample")]
        out: PathBuf,
        /// Use the raw weights instead of the EMA weights.
        #[arg(long)]
        no_ema: bool,
        /// Recompute parent activations per tile instead of caching them.
        #[arg(long)]
        no_cache: bool,
        /// Print every level's sigma grid.
        #[arg(long)]
        dump_sigmas: bool,
    },
    /// Time forward and backward passes and report cost ratios.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = BenchMode::Adaptive)]
        mode: BenchMode,
        /// Timed repetitions per variant.
        #[arg(long, default_value_t = 5)]
        iters: usize,
        #[arg(long, default_value_t = 2)]
        batch: usize,
    },
    /// Summarize a checkpoint, video, cache spill, manifest or config file.
    Inspect { path: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BenchMode {
    /// The configured load vector against a flat one.
    Adaptive,
    /// The flat load vector alone.
    NoAdaptive,
    /// The configured patch against one with half the voxels.
    PatchSize,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::UnknownClass { .. } | Error::Schedule(_) => 2,
        e if e.is_data_error() => 3,
        e if e.is_numeric() => 4,
        _ => 1,
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Worker count: 1 when deterministic, else `HPDM_THREADS`, else the config.
pub fn resolve_threads(deterministic: bool, configured: usize) -> Result<usize> {
    if deterministic {
        return Ok(1);
    }
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::config(THREADS_ENV, format!("`{v}` is not a thread count")))?,
        Err(_) => configured,
    };
    Ok(if n == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        n
    })
}

pub fn run(cli: Cli) -> Result<()> {
    let det = cli.deterministic;
    match cli.command {
        Command::Train {
            config,
            steps,
            resume,
            log_every,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let out_dir = out.unwrap_or_else(|| cfg.out_dir.clone());
            let threads = resolve_threads(det, cfg.threads)?;
            par::with_threads(threads, || train(&cfg, &out_dir, steps, resume.as_deref(), log_every.max(1)))
        }
        Command::Sample {
            checkpoint,
            config,
            class,
            seed,
            overlap,
            out,
            no_ema,
            no_cache,
            dump_sigmas,
        } => {
            let args = SampleArgs {
                checkpoint,
                config,
                class,
                seed,
                overlap,
                out,
                ema: !no_ema,
                cache: !no_cache,
                dump_sigmas,
            };
            let ckpt = Checkpoint::load(&args.checkpoint)?;
            let cfg = sample_config(&ckpt, args.config.as_deref())?;
            let threads = resolve_threads(det, cfg.threads)?;
            par::with_threads(threads, || sample(&cfg, &ckpt, &args))
        }
        Command::Bench {
            config,
            mode,
            iters,
            batch,
        } => {
            let cfg = load_config(config.as_deref())?;
            let threads = resolve_threads(det, cfg.threads)?;
            let report = par::with_threads(threads, || bench(&cfg, mode, iters.max(1), batch.max(1)))?;
            print!("{report}");
            Ok(())
        }
        Command::Inspect { path } => {
            print!("{}", inspect(&path)?);
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes through a temporary file so a crash never leaves a torn checkpoint.
fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    ckpt.save(&tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";

fn metrics_header(levels: usize) -> String {
    let mut h = String::from("step,loss");
    for l in 0..levels {
        let _ = write!(h, ",loss_l{l}");
    }
    h.push_str(",lr,wall_seconds,videos_per_sec\n");
    h
}

/// The checkpoint embeds `cfg` as loaded; `out_dir` only says where to write.
pub fn train(cfg: &RunConfig, out_dir: &Path, steps: Option<u64>, resume: Option<&Path>, log_every: u64) -> Result<()> {
    let target = steps.unwrap_or(cfg.optim.total_steps);
    create_dir(out_dir)?;
    write_file(&out_dir.join("config.txt"), cfg.to_text().as_bytes())?;
    let dataset = Arc::new(generate_dataset(&cfg.synthetic(), cfg.data_count)?);
    let model = Denoiser::new(cfg.model.clone(), cfg.seed)?;
    let mut trainer = Trainer::new(
        model,
        cfg.pyramid,
        cfg.schedule.clone(),
        cfg.optim.clone(),
        cfg.train_settings(),
        dataset,
    )?;
    let hash = cfg.content_hash();
    let text = cfg.to_text();
    if let Some(path) = resume {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.config_hash != hash {
            return Err(Error::config(
                "resume",
                format!(
                    "checkpoint was written with config {:016x}, this run is {hash:016x}",
                    ckpt.config_hash
                ),
            ));
        }
        trainer.restore(&ckpt)?;
    }
    let metrics = out_dir.join(METRICS_FILE);
    let fresh = resume.is_none() || !metrics.exists();
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&metrics)
        .map_err(|e| Error::io(&metrics, e))?;
    if fresh {
        log.write_all(metrics_header(cfg.pyramid.levels).as_bytes())
            .map_err(|e| Error::io(&metrics, e))?;
    }
    let latest = out_dir.join(LATEST_CHECKPOINT);
    let start = Instant::now();
    eprintln!(
        "training {} parameters from step {} to {target} on {} thread(s)",
        trainer.model.params.scalar_count(),
        trainer.step_count(),
        par::current_threads()
    );
    while trainer.step_count() < target {
        let stats = match trainer.step() {
            Ok(s) => s,
            Err(e) => {
                if e.is_numeric() {
                    let keep = out_dir.join("last_good.ckpt");
                    save_checkpoint(&trainer.checkpoint(hash, &text), &keep)?;
                    eprintln!("numeric abort; last good state saved to {}", keep.display());
                }
                return Err(e);
            }
        };
        if stats.step % log_every == 0 || stats.step == target {
            let mut line = format!("{},{:.6}", stats.step, stats.loss);
            for l in &stats.level_losses {
                let _ = write!(line, ",{l:.6}");
            }
            let vps = cfg.batch_size as f64 / stats.seconds.max(1e-12);
            let _ = writeln!(
                line,
                ",{:.6e},{:.3},{vps:.3}",
                stats.lr,
                start.elapsed().as_secs_f64()
            );
            log.write_all(line.as_bytes()).map_err(|e| Error::io(&metrics, e))?;
            eprint!("{line}");
        }
        if stats.step % cfg.checkpoint_every == 0 {
            let ckpt = trainer.checkpoint(hash, &text);
            save_checkpoint(&ckpt, &out_dir.join(format!("step_{:06}.ckpt", stats.step)))?;
            save_checkpoint(&ckpt, &latest)?;
        }
    }
    save_checkpoint(&trainer.checkpoint(hash, &text), &latest)?;
    eprintln!("wrote {}", latest.display());
    Ok(())
}

struct SampleArgs {
    checkpoint: PathBuf,
    config: Option<PathBuf>,
    class: Option<usize>,
    seed: u64,
    overlap: Option<String>,
    out: PathBuf,
    ema: bool,
    cache: bool,
    dump_sigmas: bool,
}

/// The checkpoint's own config, with sampler settings optionally taken from
/// a second config of the same architecture.
fn sample_config(ckpt: &Checkpoint, override_path: Option<&Path>) -> Result<RunConfig> {
    let own = checkpoint_config(ckpt)?;
    let Some(path) = override_path else {
        return Ok(own);
    };
    let other = RunConfig::load(path)?;
    if other.architecture_hash() != own.architecture_hash() {
        return Err(Error::config(
            "checkpoint",
            "the config describes a different architecture than the checkpoint",
        ));
    }
    Ok(RunConfig {
        sampler: other.sampler,
        overlap: other.overlap,
        cache_budget_mb: other.cache_budget_mb,
        threads: other.threads,
        ..own
    })
}

/// Parses the embedded config and checks it against the stored hash.
pub fn checkpoint_config(ckpt: &Checkpoint) -> Result<RunConfig> {
    let cfg = RunConfig::parse(&ckpt.config_text).map_err(|e| Error::Malformed {
        what: "checkpoint",
        msg: format!("embedded config: {e}"),
    })?;
    if cfg.content_hash() != ckpt.config_hash {
        return Err(Error::Malformed {
            what: "checkpoint",
            msg: "embedded config does not match its hash".into(),
        });
    }
    Ok(cfg)
}

/// A model carrying the checkpoint's EMA or raw weights.
pub fn model_from_checkpoint(ckpt: &Checkpoint, cfg: &DenoiserConfig, ema: bool) -> Result<Denoiser> {
    let mut model = Denoiser::new(cfg.clone(), 0)?;
    let values = if ema { &ckpt.ema } else { &ckpt.params };
    model.params.set_all(&ckpt.names, values.clone())?;
    Ok(model)
}

fn sample(cfg: &RunConfig, ckpt: &Checkpoint, args: &SampleArgs) -> Result<()> {
    if let Some(c) = args.class {
        if c >= cfg.model.num_classes {
            return Err(Error::UnknownClass {
                id: c,
                classes: cfg.model.num_classes,
            });
        }
    }
    let overlap = match &args.overlap {
        Some(s) => Overlap::parse_axes(s)?,
        None => cfg.overlap,
    };
    let model = model_from_checkpoint(ckpt, &cfg.model, args.ema)?;
    let sampler = Sampler::new(&model, cfg.pyramid, cfg.schedule.clone(), cfg.sampler.clone())?;
    if args.dump_sigmas {
        for l in 0..cfg.pyramid.levels {
            let g = sigma_grid(&cfg.sampler, &cfg.schedule, l)?;
            let s: Vec<String> = g.iter().map(|v| format!("{v:.6}")).collect();
            println!("level {l} ({} steps): {}", g.len() - 1, s.join(" "));
        }
    }
    let opts = GenerateOptions {
        seed: args.seed,
        class: args.class,
        overlap,
        use_cache: args.cache,
        cache_budget: cfg.cache_budget_bytes(),
        config_hash: cfg.content_hash(),
    };
    let start = Instant::now();
    let gen = sampler.generate(&opts)?;
    let secs = start.elapsed().as_secs_f64();
    create_dir(&args.out)?;
    let record = VideoRecord {
        video: gen.video.clone(),
        class: args.class.unwrap_or(cfg.model.num_classes),
        seed: Some(args.seed),
    };
    data::write_video(&args.out.join("video.hpdmvid"), &record)?;
    let frames = data::export_frames(&gen.video.map(|v| v.clamp(-1.0, 1.0)), &args.out.join("frames"))?;
    gen.manifest.save(&args.out.join("manifest.txt"))?;
    println!("generated {:?} in {secs:.2} s", gen.video.shape());
    for r in &gen.manifest.records {
        println!(
            "  level {}: canvas {:?}, {} tiles, {} steps",
            r.level,
            r.canvas,
            r.tiles.len(),
            r.steps()
        );
    }
    println!(
        "  cache: high water {} bytes, {} spills; {} frames in {}",
        gen.cache_stats.high_water_bytes,
        gen.cache_stats.spills,
        frames.len(),
        args.out.display()
    );
    Ok(())
}

/// One measured variant of [`bench`].
#[derive(Clone, Debug)]
pub struct BenchRow {
    pub label: String,
    pub block_applications: usize,
    pub forward_macs: u64,
    pub seconds: f64,
    pub videos_per_sec: f64,
}

fn flat_load(cfg: &DenoiserConfig) -> DenoiserConfig {
    DenoiserConfig {
        num_levels_per_block: vec![cfg.levels; cfg.num_blocks],
        ..cfg.clone()
    }
}

/// Halves the patch along its longest axis that the tokenizer still divides.
fn halved_patch(cfg: &DenoiserConfig) -> Option<[usize; 3]> {
    let mut axes = [0, 1, 2];
    axes.sort_by_key(|&a| std::cmp::Reverse(cfg.patch[a]));
    axes.iter().find_map(|&a| {
        let half = cfg.patch[a] / 2;
        (cfg.patch[a].is_multiple_of(2) && half.is_multiple_of(cfg.tokenizer[a]) && half > 0).then(|| {
            let mut p = cfg.patch;
            p[a] = half;
            p
        })
    })
}

pub fn measure(label: &str, cfg: &RunConfig, model_cfg: &DenoiserConfig, iters: usize, batch: usize) -> Result<BenchRow> {
    let spec = PyramidSpec::new(
        model_cfg.levels,
        model_cfg.patch,
        model_cfg.patch.map(|r| r << (model_cfg.levels - 1)),
    )?;
    let synth = crate::data::SyntheticSpec {
        resolution: spec.full,
        ..cfg.synthetic()
    };
    let video = synth.record(0).video;
    let model = Denoiser::new(model_cfg.clone(), cfg.seed)?;
    let seconds = time_forward_backward(&model, &spec, &cfg.schedule, &video, batch, iters)?;
    Ok(BenchRow {
        label: label.to_string(),
        block_applications: model_cfg.num_levels_per_block.iter().sum(),
        forward_macs: model_cfg.forward_macs(model_cfg.levels),
        seconds,
        videos_per_sec: batch as f64 / seconds,
    })
}

pub fn bench(cfg: &RunConfig, mode: BenchMode, iters: usize, batch: usize) -> Result<String> {
    let base = &cfg.model;
    let rows = match mode {
        BenchMode::Adaptive => vec![
            measure("flat", cfg, &flat_load(base), iters, batch)?,
            measure("adaptive", cfg, base, iters, batch)?,
        ],
        BenchMode::NoAdaptive => vec![measure("flat", cfg, &flat_load(base), iters, batch)?],
        BenchMode::PatchSize => {
            let patch = halved_patch(base)
                .ok_or_else(|| Error::config("pyramid.patch", "cannot be halved along any axis"))?;
            let small = DenoiserConfig { patch, ..base.clone() };
            vec![
                measure(&format!("patch {:?}", base.patch), cfg, base, iters, batch)?,
                measure(&format!("patch {patch:?}"), cfg, &small, iters, batch)?,
            ]
        }
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<24} {:>8} {:>14} {:>12} {:>12} {:>10} {:>10}",
        "variant", "blocks", "fwd MACs", "s/step", "videos/s", "MAC ratio", "speedup"
    );
    let first = &rows[0];
    for r in &rows {
        let _ = writeln!(
            s,
            "{:<24} {:>8} {:>14} {:>12.4} {:>12.2} {:>10.3} {:>10.3}",
            r.label,
            r.block_applications,
            r.forward_macs,
            r.seconds,
            r.videos_per_sec,
            first.forward_macs as f64 / r.forward_macs as f64,
            first.seconds / r.seconds
        );
    }
    Ok(s)
}

/// Human-readable summary of any artifact the CLI writes.
pub fn inspect(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut s = String::new();
    if bytes.starts_with(crate::numerics::checkpoint::MAGIC) {
        let ckpt = Checkpoint::from_bytes(&bytes)?;
        let cfg = checkpoint_config(&ckpt)?;
        let _ = writeln!(s, "checkpoint {}", path.display());
        let _ = writeln!(s, "  step {}", ckpt.step);
        let _ = writeln!(s, "  config hash {:016x}", ckpt.config_hash);
        let _ = writeln!(s, "  tensors {}", ckpt.names.len());
        let _ = writeln!(
            s,
            "  parameters {} (analytic {})",
            ckpt.param_count(),
            cfg.model.param_count()
        );
        let _ = writeln!(s, "  pyramid {:?} levels, patch {:?}, full {:?}", cfg.pyramid.levels, cfg.pyramid.patch, cfg.pyramid.full);
        let _ = writeln!(s, "  load {:?}", cfg.model.num_levels_per_block);
        for l in 0..cfg.pyramid.levels {
            let g = sigma_grid(&cfg.sampler, &cfg.schedule, l)?;
            let _ = writeln!(s, "  level {l}: {} sampler steps from sigma {:.4}", g.len() - 1, g[0]);
        }
        if ckpt.param_count() != cfg.model.param_count() {
            return Err(Error::Malformed {
                what: "checkpoint",
                msg: "parameter count disagrees with its config".into(),
            });
        }
    } else if bytes.starts_with(b"HPDMVID0") {
        let rec = data::video_from_bytes(&bytes)?;
        let d = rec.video.data();
        let (lo, hi) = d.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let _ = writeln!(s, "video {}", path.display());
        let _ = writeln!(s, "  shape {:?}", rec.video.shape());
        let _ = writeln!(s, "  class {}", rec.class);
        let _ = writeln!(s, "  range [{lo:.4}, {hi:.4}], mean {:.4}", rec.video.mean());
    } else if bytes.starts_with(b"HPDMCACH") {
        let ((level, block), t) = read_spill(&bytes)?;
        let _ = writeln!(s, "cache spill {}", path.display());
        let _ = writeln!(s, "  level {level}, block {block}, canvas {:?}", t.shape());
    } else if bytes.starts_with(b"HPDM-MANIFEST") {
        let text = String::from_utf8(bytes).map_err(|_| Error::Malformed {
            what: "manifest",
            msg: "not UTF-8".into(),
        })?;
        let m = Manifest::from_text(&text)?;
        let overlap = Overlap::parse_axes(&m.overlap).map_err(|_| Error::Malformed {
            what: "manifest",
            msg: format!("bad overlap `{}`", m.overlap),
        })?;
        let _ = writeln!(s, "manifest {}", path.display());
        let _ = writeln!(s, "  config hash {:016x}, seed {}, class {:?}", m.config_hash, m.seed, m.class);
        let _ = writeln!(s, "  overlap {}, cache {}", m.overlap, m.cache);
        for r in &m.records {
            let plan = plan_tiles(r.level, r.canvas, m.patch, overlap)?;
            let ok = plan.len() == r.tiles.len() && r.step_ms.len() == r.steps();
            let _ = writeln!(
                s,
                "  level {}: canvas {:?}, {} tiles, {} steps (sigma grid length {}), {:.1} ms",
                r.level,
                r.canvas,
                r.tiles.len(),
                r.steps(),
                r.sigmas.len(),
                r.step_ms.iter().sum::<f64>()
            );
            if !ok {
                return Err(Error::Malformed {
                    what: "manifest",
                    msg: format!("level {} is inconsistent with its tile plan or sigma grid", r.level),
                });
            }
        }
    } else if let Ok(text) = std::str::from_utf8(&bytes) {
        let cfg = RunConfig::parse(text)?;
        let _ = writeln!(s, "config {}", path.display());
        let _ = writeln!(s, "  content hash {:016x}", cfg.content_hash());
        let _ = writeln!(s, "  parameters {}", cfg.model.param_count());
        for l in 0..cfg.pyramid.levels {
            let g = sigma_grid(&cfg.sampler, &cfg.schedule, l)?;
            let plan = plan_tiles(l, cfg.pyramid.level_canvas(l), cfg.pyramid.patch, cfg.overlap)?;
            let _ = writeln!(s, "  level {l}: {} steps, {} tiles", g.len() - 1, plan.len());
        }
    } else {
        return Err(Error::Malformed {
            what: "artifact",
            msg: "unrecognized file type".into(),
        });
    }
    Ok(s)
}
