//! Run configuration: a flat `section.key = value` text format.
//!
//! Lines starting with `#` and blank lines are ignored. Every key has a
//! default, so a config file only lists what it changes. Unknown and repeated
//! keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::SyntheticSpec;
use crate::denoiser::{ContextMode, DenoiserConfig};
use crate::diffusion::{NoiseSchedule, SamplerConfig};
use crate::numerics::OptimConfig;
use crate::patchgeom::{OffsetMode, Overlap, PyramidSpec};
use crate::train::TrainSettings;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub checkpoint_every: u64,
    pub pyramid: PyramidSpec,
    /// `levels` and `patch` mirror `pyramid`.
    pub model: DenoiserConfig,
    pub schedule: NoiseSchedule,
    pub sampler: SamplerConfig,
    pub overlap: [Overlap; 3],
    /// Activation cache budget in MiB; 0 means unlimited.
    pub cache_budget_mb: usize,
    pub optim: OptimConfig,
    pub batch_size: usize,
    pub cond_dropout: f64,
    pub offset_mode: OffsetMode,
    pub data_count: usize,
    pub data_shapes: usize,
    pub data_max_velocity: i64,
    pub data_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = DenoiserConfig::default();
        let t = TrainSettings::default();
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            threads: 0,
            checkpoint_every: 500,
            pyramid: PyramidSpec {
                levels: model.levels,
                patch: model.patch,
                full: model.patch.map(|r| r << (model.levels - 1)),
            },
            model,
            schedule: NoiseSchedule::default(),
            sampler: SamplerConfig::default(),
            overlap: [Overlap::None, Overlap::Half, Overlap::Half],
            cache_budget_mb: 0,
            optim: OptimConfig::default(),
            batch_size: t.batch_size,
            cond_dropout: t.cond_dropout,
            offset_mode: t.offset_mode,
            data_count: 512,
            data_shapes: 2,
            data_max_velocity: 1,
            data_seed: 0,
        }
    }
}

/// Keys excluded from the content hash: they do not change results.
const UNHASHED: &[&str] = &["run.out_dir", "run.threads"];

fn bad(key: &str, value: &str, what: &str) -> Error {
    Error::config(key, format!("`{value}` is not {what}"))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, v, "a valid number"))
}

fn dims(key: &str, v: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = v
        .split('x')
        .map(|p| p.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad(key, v, "of the form FxHxW"))?;
    parts.try_into().map_err(|_| bad(key, v, "of the form FxHxW"))
}

fn fmt_dims(d: [usize; 3]) -> String {
    format!("{}x{}x{}", d[0], d[1], d[2])
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, v, "true or false")),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}", n + 1), format!("expected `key = value`, got `{line}`"))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::config(k, "is set more than once"));
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "run.seed" => self.seed = num(key, v)?,
            "run.out_dir" => self.out_dir = PathBuf::from(v),
            "run.threads" => self.threads = num(key, v)?,
            "run.checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "pyramid.levels" => {
                self.pyramid.levels = num(key, v)?;
                m.levels = self.pyramid.levels;
            }
            "pyramid.patch" => {
                self.pyramid.patch = dims(key, v)?;
                m.patch = self.pyramid.patch;
            }
            "pyramid.full" => self.pyramid.full = dims(key, v)?,
            "model.channels" => m.channels = num(key, v)?,
            "model.blocks" => m.num_blocks = num(key, v)?,
            "model.latents" => m.num_latents = num(key, v)?,
            "model.latent_dim" => m.latent_dim = num(key, v)?,
            "model.token_dim" => m.token_dim = num(key, v)?,
            "model.tokenizer" => m.tokenizer = dims(key, v)?,
            "model.load" => {
                m.num_levels_per_block = v
                    .split(',')
                    .map(|p| p.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(key, v, "a comma-separated list of level counts"))?
            }
            "model.classes" => m.num_classes = num(key, v)?,
            "model.heads" => m.heads = num(key, v)?,
            "model.mlp_ratio" => m.mlp_ratio = num(key, v)?,
            "model.compute_depth" => m.compute_depth = num(key, v)?,
            "model.fourier_features" => m.fourier_features = num(key, v)?,
            "model.context" => {
                m.context = match v {
                    "all" => ContextMode::AllParents,
                    "immediate" => ContextMode::ImmediateParent,
                    _ => return Err(bad(key, v, "`all` or `immediate`")),
                }
            }
            "model.detach_context" => m.detach_context = boolean(key, v)?,
            "schedule.sigma_data" => self.schedule.sigma_data = num(key, v)?,
            "schedule.p_mean" => self.schedule.p_mean = num(key, v)?,
            "schedule.p_std" => self.schedule.p_std = num(key, v)?,
            "schedule.sigma_min" => self.schedule.sigma_min = num(key, v)?,
            "schedule.sigma_max" => self.schedule.sigma_max = num(key, v)?,
            "schedule.level_decay" => self.schedule.level_decay = num(key, v)?,
            "sampler.steps" => self.sampler.steps = num(key, v)?,
            "sampler.min_steps" => self.sampler.min_steps = num(key, v)?,
            "sampler.rho" => self.sampler.rho = num(key, v)?,
            "sampler.heun_levels" => {
                self.sampler.heun_levels = if v == "all" { usize::MAX } else { num(key, v)? }
            }
            "sampler.churn" => self.sampler.churn = num(key, v)?,
            "sampler.churn_min" => self.sampler.churn_min = num(key, v)?,
            "sampler.churn_max" => self.sampler.churn_max = num(key, v)?,
            "sampler.churn_noise" => self.sampler.churn_noise = num(key, v)?,
            "sampler.overlap" => {
                self.overlap = Overlap::parse_axes(v).map_err(|_| bad(key, v, "`none` or a subset of `fhw`"))?
            }
            "sampler.cache_budget_mb" => self.cache_budget_mb = num(key, v)?,
            "optim.lr" => self.optim.lr = num(key, v)?,
            "optim.warmup_steps" => self.optim.warmup_steps = num(key, v)?,
            "optim.total_steps" => self.optim.total_steps = num(key, v)?,
            "optim.final_lr_frac" => self.optim.final_lr_frac = num(key, v)?,
            "optim.beta1" => self.optim.beta1 = num(key, v)?,
            "optim.beta2" => self.optim.beta2 = num(key, v)?,
            "optim.eps" => self.optim.eps = num(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = num(key, v)?,
            "optim.ema_decay" => self.optim.ema_decay = num(key, v)?,
            "train.batch_size" => self.batch_size = num(key, v)?,
            "train.cond_dropout" => self.cond_dropout = num(key, v)?,
            "train.offset_mode" => {
                self.offset_mode = match v {
                    "aligned" => OffsetMode::VoxelAligned,
                    "continuous" => OffsetMode::Continuous,
                    _ => return Err(bad(key, v, "`aligned` or `continuous`")),
                }
            }
            "data.count" => self.data_count = num(key, v)?,
            "data.shapes" => self.data_shapes = num(key, v)?,
            "data.max_velocity" => self.data_max_velocity = num(key, v)?,
            "data.seed" => self.data_seed = num(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let s = &self.schedule;
        let p = &self.sampler;
        let o = &self.optim;
        let load: Vec<String> = m.num_levels_per_block.iter().map(|n| n.to_string()).collect();
        vec![
            ("run.seed", self.seed.to_string()),
            ("run.out_dir", self.out_dir.display().to_string()),
            ("run.threads", self.threads.to_string()),
            ("run.checkpoint_every", self.checkpoint_every.to_string()),
            ("pyramid.levels", self.pyramid.levels.to_string()),
            ("pyramid.patch", fmt_dims(self.pyramid.patch)),
            ("pyramid.full", fmt_dims(self.pyramid.full)),
            ("model.channels", m.channels.to_string()),
            ("model.blocks", m.num_blocks.to_string()),
            ("model.latents", m.num_latents.to_string()),
            ("model.latent_dim", m.latent_dim.to_string()),
            ("model.token_dim", m.token_dim.to_string()),
            ("model.tokenizer", fmt_dims(m.tokenizer)),
            ("model.load", load.join(",")),
            ("model.classes", m.num_classes.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.mlp_ratio", m.mlp_ratio.to_string()),
            ("model.compute_depth", m.compute_depth.to_string()),
            ("model.fourier_features", m.fourier_features.to_string()),
            (
                "model.context",
                match m.context {
                    ContextMode::AllParents => "all",
                    ContextMode::ImmediateParent => "immediate",
                }
                .into(),
            ),
            ("model.detach_context", m.detach_context.to_string()),
            ("schedule.sigma_data", format!("{:?}", s.sigma_data)),
            ("schedule.p_mean", format!("{:?}", s.p_mean)),
            ("schedule.p_std", format!("{:?}", s.p_std)),
            ("schedule.sigma_min", format!("{:?}", s.sigma_min)),
            ("schedule.sigma_max", format!("{:?}", s.sigma_max)),
            ("schedule.level_decay", format!("{:?}", s.level_decay)),
            ("sampler.steps", p.steps.to_string()),
            ("sampler.min_steps", p.min_steps.to_string()),
            ("sampler.rho", format!("{:?}", p.rho)),
            (
                "sampler.heun_levels",
                if p.heun_levels == usize::MAX {
                    "all".into()
                } else {
                    p.heun_levels.to_string()
                },
            ),
            ("sampler.churn", format!("{:?}", p.churn)),
            ("sampler.churn_min", format!("{:?}", p.churn_min)),
            ("sampler.churn_max", format!("{:?}", p.churn_max)),
            ("sampler.churn_noise", format!("{:?}", p.churn_noise)),
            ("sampler.overlap", Overlap::format_axes(&self.overlap)),
            ("sampler.cache_budget_mb", self.cache_budget_mb.to_string()),
            ("optim.lr", format!("{:?}", o.lr)),
            ("optim.warmup_steps", o.warmup_steps.to_string()),
            ("optim.total_steps", o.total_steps.to_string()),
            ("optim.final_lr_frac", format!("{:?}", o.final_lr_frac)),
            ("optim.beta1", format!("{:?}", o.beta1)),
            ("optim.beta2", format!("{:?}", o.beta2)),
            ("optim.eps", format!("{:?}", o.eps)),
            ("optim.weight_decay", format!("{:?}", o.weight_decay)),
            ("optim.ema_decay", format!("{:?}", o.ema_decay)),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.cond_dropout", format!("{:?}", self.cond_dropout)),
            (
                "train.offset_mode",
                match self.offset_mode {
                    OffsetMode::VoxelAligned => "aligned",
                    OffsetMode::Continuous => "continuous",
                }
                .into(),
            ),
            ("data.count", self.data_count.to_string()),
            ("data.shapes", self.data_shapes.to_string()),
            ("data.max_velocity", self.data_max_velocity.to_string()),
            ("data.seed", self.data_seed.to_string()),
        ]
    }

    /// Canonical text listing every key.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Hash of every result-affecting key.
    pub fn content_hash(&self) -> u64 {
        self.hash_where(|k| !UNHASHED.contains(&k))
    }

    /// Hash of the keys that define the network's parameter layout.
    pub fn architecture_hash(&self) -> u64 {
        self.hash_where(|k| k.starts_with("pyramid.") || k.starts_with("model."))
    }

    fn hash_where(&self, keep: impl Fn(&str) -> bool) -> u64 {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if keep(k) {
                h.update(k.as_bytes());
                h.update(b"=");
                h.update(v.as_bytes());
                h.update(b"\n");
            }
        }
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
    }

    pub fn validate(&self) -> Result<()> {
        let spec = PyramidSpec::new(self.pyramid.levels, self.pyramid.patch, self.pyramid.full)?;
        if self.model.levels != spec.levels || self.model.patch != spec.patch {
            return Err(Error::config("pyramid.levels", "model and pyramid disagree"));
        }
        self.model.validate()?;
        if self.model.channels != 3 {
            return Err(Error::config("model.channels", "synthetic videos have 3 channels"));
        }
        if self.model.fourier_features == 0 {
            return Err(Error::config("model.fourier_features", "must be positive"));
        }
        self.schedule.validate()?;
        self.sampler.validate()?;
        for a in 0..3 {
            if self.overlap[a] == Overlap::Half {
                let stride = spec.patch[a] / 2;
                if spec.patch[a] % 2 != 0 || stride % self.model.tokenizer[a] != 0 {
                    return Err(Error::config(
                        "sampler.overlap",
                        format!("half-patch stride on axis {a} is not a multiple of the tokenizer"),
                    ));
                }
            }
        }
        let o = &self.optim;
        let unit = |x: f64| x > 0.0 && x < 1.0;
        for (field, ok) in [
            ("optim.lr", o.lr > 0.0 && o.lr.is_finite()),
            ("optim.beta1", (0.0..1.0).contains(&o.beta1)),
            ("optim.beta2", (0.0..1.0).contains(&o.beta2)),
            ("optim.eps", o.eps > 0.0),
            ("optim.weight_decay", o.weight_decay >= 0.0 && o.weight_decay.is_finite()),
            ("optim.ema_decay", unit(o.ema_decay)),
            ("optim.final_lr_frac", (0.0..=1.0).contains(&o.final_lr_frac)),
            ("optim.total_steps", o.total_steps >= o.warmup_steps),
            ("run.checkpoint_every", self.checkpoint_every >= 1),
            ("train.batch_size", self.batch_size >= 1),
            ("train.cond_dropout", (0.0..=1.0).contains(&self.cond_dropout)),
            ("data.count", self.data_count >= 1),
            ("data.shapes", self.data_shapes >= 1),
            ("data.max_velocity", self.data_max_velocity >= 0),
        ] {
            if !ok {
                return Err(Error::config(field, "value out of range"));
            }
        }
        self.synthetic().validate()
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            resolution: self.pyramid.full,
            channels: self.model.channels,
            num_classes: self.model.num_classes,
            shapes_per_video: self.data_shapes,
            max_velocity: self.data_max_velocity,
            seed: self.data_seed,
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            batch_size: self.batch_size,
            seed: self.seed,
            cond_dropout: self.cond_dropout,
            offset_mode: self.offset_mode,
        }
    }

    pub fn cache_budget_bytes(&self) -> usize {
        match self.cache_budget_mb {
            0 => usize::MAX,
            mb => mb.saturating_mul(1 << 20),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.content_hash(), cfg.content_hash());
    }

    #[test]
    fn comments_and_partial_files_use_defaults() {
        let cfg = RunConfig::parse("# small\n\nrun.seed = 7\nsampler.heun_levels = 1\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.sampler.heun_levels, 1);
        assert_eq!(cfg.model, RunConfig::default().model);
    }

    #[test]
    fn unknown_repeated_and_malformed_lines_are_rejected() {
        let field = |t: &str| match RunConfig::parse(t) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(field("model.colour = red"), "model.colour");
        assert_eq!(field("run.seed = 1\nrun.seed = 2"), "run.seed");
        assert_eq!(field("run.seed"), "line 1");
        assert_eq!(field("pyramid.patch = 4x8"), "pyramid.patch");
        assert_eq!(field("model.context = some"), "model.context");
    }

    #[test]
    fn output_location_does_not_change_the_hash() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        b.threads = 3;
        assert_eq!(a.content_hash(), b.content_hash());
        b.seed = 1;
        assert_ne!(a.content_hash(), b.content_hash());
        assert_eq!(a.architecture_hash(), b.architecture_hash());
        b.model.token_dim = 32;
        assert_ne!(a.architecture_hash(), b.architecture_hash());
    }

    #[test]
    fn cross_field_rules() {
        let field = |t: &str| match RunConfig::parse(t) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(field("pyramid.full = 16x32x16"), "pyramid.full");
        assert_eq!(field("model.load = 1,2"), "model.load");
        assert_eq!(field("model.load = 1,2,2"), "model.load");
        assert_eq!(field("model.blocks = 4"), "model.load");
        assert_eq!(field("sampler.overlap = f\nmodel.tokenizer = 4x2x2"), "sampler.overlap");
    }

    /// Invalid values paired with the field that must be named.
    fn mutations() -> Vec<(&'static str, &'static str)> {
        vec![
            ("pyramid.levels", "0"),
            ("pyramid.full", "8x32x32"),
            ("pyramid.patch", "4x0x8"),
            ("model.blocks", "0"),
            ("model.latents", "0"),
            ("model.latent_dim", "0"),
            ("model.token_dim", "0"),
            ("model.tokenizer", "3x2x2"),
            ("model.load", "1,3,3,3"),
            ("model.load", "2,1,3"),
            ("model.load", "1,2,4"),
            ("model.classes", "0"),
            ("model.heads", "0"),
            ("model.heads", "5"),
            ("model.mlp_ratio", "0"),
            ("model.channels", "1"),
            ("model.fourier_features", "0"),
            ("schedule.sigma_data", "0"),
            ("schedule.p_std", "-1"),
            ("schedule.sigma_min", "100"),
            ("schedule.level_decay", "1.5"),
            ("sampler.min_steps", "0"),
            ("sampler.steps", "2"),
            ("sampler.rho", "0"),
            ("sampler.churn", "-1"),
            ("optim.lr", "0"),
            ("optim.beta1", "1"),
            ("optim.beta2", "-0.1"),
            ("optim.eps", "0"),
            ("optim.weight_decay", "-1"),
            ("optim.ema_decay", "1"),
            ("optim.final_lr_frac", "2"),
            ("optim.total_steps", "10"),
            ("run.checkpoint_every", "0"),
            ("train.batch_size", "0"),
            ("train.cond_dropout", "1.5"),
            ("data.count", "0"),
            ("data.shapes", "0"),
            ("data.max_velocity", "-1"),
            ("run.threads", "many"),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn every_violation_names_its_field(i in 0usize..40, seed in 0u64..1000) {
            let muts = mutations();
            let (key, bad) = muts[i % muts.len()];
            let text = format!("run.seed = {seed}\n{key} = {bad}\n");
            match RunConfig::parse(&text) {
                Err(Error::Config { field, .. }) => prop_assert_eq!(field, key),
                other => prop_assert!(false, "{key} = {bad} gave {other:?}"),
            }
        }

        #[test]
        fn valid_overrides_round_trip(seed in any::<u64>(), steps in 4usize..200, lr in 1e-5f64..1e-2, dropout in 0.0f64..1.0) {
            let text = format!("run.seed = {seed}\nsampler.steps = {steps}\noptim.lr = {lr:?}\ntrain.cond_dropout = {dropout:?}\n");
            let cfg = RunConfig::parse(&text).unwrap();
            let back = RunConfig::parse(&cfg.to_text()).unwrap();
            prop_assert_eq!(back.content_hash(), cfg.content_hash());
            prop_assert_eq!(back, cfg);
        }
    }
}
