use std::collections::HashMap;

use super::params::{Attn, Lin, Mlp, Norm};
use super::{ContextMode, DenoiserConfig, Params};
use crate::numerics::{Elem, Tape, Tensor, Var};
use crate::patchgeom::{coord_channels, lattice_queries, PatchCoords};
use crate::{Error, Result};

/// One pyramid level fed to [`Denoiser::forward`].
#[derive(Clone, Debug)]
pub struct LevelInput {
    pub level: usize,
    /// Preconditioned network input in token layout, `[N, C·t_f·t_h·t_w]`.
    pub tokens: Var,
    pub c_noise: f64,
    /// `None` selects the learned null embedding.
    pub class: Option<usize>,
    pub coords: PatchCoords,
}

/// Parent context for levels that are not part of the current forward pass.
pub trait ContextSource<T: Elem>: Sync {
    /// Block-`block` input tokens of `level`, sampled at the token-lattice
    /// centres of a child patch; returns `[N, d]`.
    fn sample(
        &self,
        level: usize,
        block: usize,
        child: &PatchCoords,
        child_grid: [usize; 3],
    ) -> Result<Tensor<T>>;
}

pub struct ForwardOutput {
    /// Per input, `F` in token layout `[N, C·t_f·t_h·t_w]`.
    pub outputs: Vec<Var>,
    /// Per input and block, the token state entering that block (`None`
    /// where the block skips the level).
    pub block_inputs: Vec<Vec<Option<Var>>>,
    /// Number of (block, level) applications performed.
    pub applications: usize,
}

/// Parameters registered on one tape.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Debug)]
pub struct Denoiser<T: Elem = f32> {
    pub config: DenoiserConfig,
    pub params: Params<T>,
}

impl Denoiser<f32> {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let params = Params::init(&config, seed)?;
        Ok(Self { config, params })
    }
}

/// `[cos(ω_j c), sin(ω_j c)]` with half-octave spaced `ω_j = π·2^{j/2}`.
pub fn fourier_features(c_noise: f64, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * n);
    for j in 0..n {
        let w = std::f64::consts::PI * 2f64.powf(j as f64 / 2.0);
        out.push((w * c_noise).cos());
    }
    for j in 0..n {
        let w = std::f64::consts::PI * 2f64.powf(j as f64 / 2.0);
        out.push((w * c_noise).sin());
    }
    out
}

/// `[C, F, H, W]` → `[N, C·t_f·t_h·t_w]`; tokens in row-major lattice order,
/// each token flattened as `(c, f, h, w)`.
pub fn patchify<T: Elem>(x: &Tensor<T>, tok: [usize; 3]) -> Result<Tensor<T>> {
    let [c, f, h, w] = dims4(x, "patchify")?;
    if f % tok[0] != 0 || h % tok[1] != 0 || w % tok[2] != 0 {
        return Err(Error::InvalidShape {
            op: "patchify",
            msg: format!("{:?} not divisible by tokenizer {tok:?}", x.shape()),
        });
    }
    let g = [f / tok[0], h / tok[1], w / tok[2]];
    let width = c * tok[0] * tok[1] * tok[2];
    let mut out = vec![T::zero(); x.numel()];
    let src = x.data();
    for (gi, gj, gk) in lattice(g) {
        let row = ((gi * g[1] + gj) * g[2] + gk) * width;
        let mut o = row;
        for ci in 0..c {
            for a in 0..tok[0] {
                for b in 0..tok[1] {
                    let base = ((ci * f + gi * tok[0] + a) * h + gj * tok[1] + b) * w + gk * tok[2];
                    out[o..o + tok[2]].copy_from_slice(&src[base..base + tok[2]]);
                    o += tok[2];
                }
            }
        }
    }
    Tensor::new(&[g.iter().product(), width], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Elem>(tokens: &Tensor<T>, channels: usize, patch: [usize; 3], tok: [usize; 3]) -> Result<Tensor<T>> {
    let [c, f, h, w] = [channels, patch[0], patch[1], patch[2]];
    let g = [f / tok[0], h / tok[1], w / tok[2]];
    let width = c * tok[0] * tok[1] * tok[2];
    if tokens.shape() != [g[0] * g[1] * g[2], width] {
        return Err(Error::InvalidShape {
            op: "unpatchify",
            msg: format!("{:?} does not match patch {patch:?} / tokenizer {tok:?}", tokens.shape()),
        });
    }
    let mut out = vec![T::zero(); tokens.numel()];
    let src = tokens.data();
    for (gi, gj, gk) in lattice(g) {
        let mut o = ((gi * g[1] + gj) * g[2] + gk) * width;
        for ci in 0..c {
            for a in 0..tok[0] {
                for b in 0..tok[1] {
                    let base = ((ci * f + gi * tok[0] + a) * h + gj * tok[1] + b) * w + gk * tok[2];
                    out[base..base + tok[2]].copy_from_slice(&src[o..o + tok[2]]);
                    o += tok[2];
                }
            }
        }
    }
    Tensor::new(&[c, f, h, w], out)
}

fn dims4<T: Elem>(x: &Tensor<T>, op: &'static str) -> Result<[usize; 4]> {
    match *x.shape() {
        [c, f, h, w] => Ok([c, f, h, w]),
        _ => Err(Error::InvalidShape {
            op,
            msg: format!("expected [C, F, H, W], got {:?}", x.shape()),
        }),
    }
}

fn lattice(g: [usize; 3]) -> impl Iterator<Item = (usize, usize, usize)> {
    (0..g[0]).flat_map(move |i| (0..g[1]).flat_map(move |j| (0..g[2]).map(move |k| (i, j, k))))
}

/// Coordinate channels of a patch as `[N, 3]` rows in lattice order.
pub(crate) fn coord_rows<T: Elem>(coords: &PatchCoords, grid: [usize; 3]) -> Result<Tensor<T>> {
    let n = grid.iter().product();
    coord_channels::<T>(coords, grid).reshape(&[3, n])?.transpose2()
}

impl<T: Elem> Denoiser<T> {
    pub fn cast<U: Elem>(&self) -> Denoiser<U> {
        Denoiser {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Registers every parameter on `tape`, as gradient leaves when
    /// `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = (0..self.params.len())
            .map(|i| {
                let v = self.params.shared(i).clone();
                if trainable {
                    tape.param_shared(v)
                } else {
                    tape.constant_shared(v)
                }
            })
            .collect();
        Bound { vars }
    }

    /// Places a `[C, r_f, r_h, r_w]` network input on the tape in token
    /// layout.
    pub fn level_input(
        &self,
        tape: &mut Tape<T>,
        level: usize,
        x: &Tensor<T>,
        c_noise: f64,
        class: Option<usize>,
        coords: PatchCoords,
    ) -> Result<LevelInput> {
        let expect = [self.config.channels, self.config.patch[0], self.config.patch[1], self.config.patch[2]];
        if x.shape() != expect {
            return Err(Error::ShapeMismatch {
                op: "level_input",
                lhs: x.shape().to_vec(),
                rhs: expect.to_vec(),
            });
        }
        let tokens = tape.constant(patchify(x, self.config.tokenizer)?);
        Ok(LevelInput {
            level,
            tokens,
            c_noise,
            class,
            coords,
        })
    }

    /// Joint forward pass over the given levels (strictly increasing).
    ///
    /// Parents that are not among `inputs` are read from `external`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        inputs: &[LevelInput],
        external: Option<&dyn ContextSource<T>>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let lay = &self.params.layout;
        let p = |i: usize| bound.vars[i];
        let grid = cfg.token_grid();
        let n = cfg.tokens_per_patch();
        for (i, inp) in inputs.iter().enumerate() {
            if inp.level >= cfg.levels || (i > 0 && inp.level <= inputs[i - 1].level) {
                return Err(Error::InvalidShape {
                    op: "forward",
                    msg: format!(
                        "levels must be strictly increasing and below {}",
                        cfg.levels
                    ),
                });
            }
            let shape = tape.value(inp.tokens).shape();
            if shape != [n, cfg.token_input_dim()] {
                return Err(Error::ShapeMismatch {
                    op: "forward",
                    lhs: shape.to_vec(),
                    rhs: vec![n, cfg.token_input_dim()],
                });
            }
        }

        let mut tokens = Vec::with_capacity(inputs.len());
        let mut latents = Vec::with_capacity(inputs.len());
        let mut coords = Vec::with_capacity(inputs.len());
        for inp in inputs {
            let (t, l) = self.tokenize(tape, bound, inp)?;
            tokens.push(t);
            latents.push(l);
            coords.push(tape.constant(coord_rows(&inp.coords, grid)?));
        }

        let mut block_inputs = vec![vec![None; cfg.num_blocks]; inputs.len()];
        let mut applications = 0;
        for b in 0..cfg.num_blocks {
            let active = cfg.num_levels_per_block[b];
            let snapshot = tokens.clone();
            let mut grids = HashMap::new();
            for (i, inp) in inputs.iter().enumerate() {
                if inp.level >= active {
                    continue;
                }
                block_inputs[i][b] = Some(snapshot[i]);
                let ctx = self.context(tape, b, i, inputs, &snapshot, external, &mut grids)?;
                let cat = tape.concat(&[snapshot[i], ctx, coords[i]], 1)?;
                let fused = linear(tape, cat, lay.blocks[b].fuse, &p)?;
                let (t, l) = self.rin_block(tape, bound, b, fused, latents[i])?;
                tokens[i] = t;
                latents[i] = l;
                applications += 1;
            }
        }

        let mut outputs = Vec::with_capacity(inputs.len());
        for t in tokens {
            let h = norm(tape, t, lay.out_norm, &p)?;
            outputs.push(linear(tape, h, lay.out, &p)?);
        }
        Ok(ForwardOutput {
            outputs,
            block_inputs,
            applications,
        })
    }

    /// Embeds one level: token embedding plus noise and class conditioning,
    /// and the level's initial latents.
    pub fn tokenize(&self, tape: &mut Tape<T>, bound: &Bound, inp: &LevelInput) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let lay = &self.params.layout;
        let p = |i: usize| bound.vars[i];
        let t = linear(tape, inp.tokens, lay.tokenizer, &p)?;
        let ff = fourier_features(inp.c_noise, cfg.fourier_features);
        let ff = tape.constant(Tensor::new(&[1, ff.len()], ff.into_iter().map(T::of).collect())?);
        let e = linear(tape, ff, lay.noise, &p)?;
        let row = match inp.class {
            None => cfg.num_classes,
            Some(c) if c < cfg.num_classes => c,
            Some(c) => {
                return Err(Error::UnknownClass {
                    id: c,
                    classes: cfg.num_classes,
                })
            }
        };
        let ce = tape.select_row(p(lay.class_table), row)?;
        let cond = tape.add(e, ce)?;
        let tokens = tape.add_row(t, cond)?;
        let lc = linear(tape, cond, lay.latent_cond, &p)?;
        let latents = tape.add_row(p(lay.latents), lc)?;
        Ok((tokens, latents))
    }

    #[allow(clippy::too_many_arguments)]
    fn context(
        &self,
        tape: &mut Tape<T>,
        block: usize,
        i: usize,
        inputs: &[LevelInput],
        snapshot: &[Var],
        external: Option<&dyn ContextSource<T>>,
        grids: &mut HashMap<usize, Var>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let grid = cfg.token_grid();
        let level = inputs[i].level;
        let parents = match cfg.context {
            ContextMode::AllParents => 0..level,
            ContextMode::ImmediateParent => level.saturating_sub(1)..level,
        };
        let count = parents.len();
        if count == 0 {
            return Ok(tape.constant(Tensor::zeros(&[cfg.tokens_per_patch(), cfg.token_dim])));
        }
        let mut acc: Option<Var> = None;
        for k in parents {
            let sample = match inputs.iter().position(|x| x.level == k) {
                Some(j) => {
                    let g = match grids.get(&j) {
                        Some(&g) => g,
                        None => {
                            let src = if cfg.detach_context {
                                tape.detach(snapshot[j])?
                            } else {
                                snapshot[j]
                            };
                            let t = tape.transpose(src)?;
                            let g = tape.reshape(t, &[cfg.token_dim, grid[0], grid[1], grid[2]])?;
                            grids.insert(j, g);
                            g
                        }
                    };
                    let q = lattice_queries::<T>(&inputs[i].coords, grid, &inputs[j].coords, grid)?;
                    tape.grid_sample_3d(g, &q)?
                }
                None => {
                    let ext = external.ok_or_else(|| {
                        Error::Cache(format!("no context source for parent level {k} of level {level}"))
                    })?;
                    let t = ext.sample(k, block, &inputs[i].coords, grid)?;
                    if t.shape() != [cfg.tokens_per_patch(), cfg.token_dim] {
                        return Err(Error::ShapeMismatch {
                            op: "context",
                            lhs: t.shape().to_vec(),
                            rhs: vec![cfg.tokens_per_patch(), cfg.token_dim],
                        });
                    }
                    tape.constant(t)
                }
            };
            acc = Some(match acc {
                None => sample,
                Some(a) => tape.add(a, sample)?,
            });
        }
        let acc = acc.expect("at least one parent");
        if count == 1 {
            Ok(acc)
        } else {
            tape.scale(acc, 1.0 / count as f64)
        }
    }

    /// Read, compute and write stages of block `b` on fused tokens.
    pub fn rin_block(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        b: usize,
        fused: Var,
        latents: Var,
    ) -> Result<(Var, Var)> {
        let p = |i: usize| bound.vars[i];
        let bl = &self.params.layout.blocks[b];
        let heads = self.config.heads;

        let lq = norm(tape, latents, bl.read_latents, &p)?;
        let tk = norm(tape, fused, bl.read_tokens, &p)?;
        let a = attend(tape, lq, tk, &bl.read, heads, &p)?;
        let mut latents = tape.add(latents, a)?;

        for layer in &bl.compute {
            let h = norm(tape, latents, layer.norm, &p)?;
            let a = attend(tape, h, h, &layer.attn, heads, &p)?;
            latents = tape.add(latents, a)?;
            let m = mlp(tape, latents, &layer.mlp, &p)?;
            latents = tape.add(latents, m)?;
        }

        let tq = norm(tape, fused, bl.write_tokens, &p)?;
        let lk = norm(tape, latents, bl.write_latents, &p)?;
        let a = attend(tape, tq, lk, &bl.write, heads, &p)?;
        let tokens = tape.add(fused, a)?;
        let m = mlp(tape, tokens, &bl.write_mlp, &p)?;
        let tokens = tape.add(tokens, m)?;
        Ok((tokens, latents))
    }
}

fn linear<T: Elem>(tape: &mut Tape<T>, x: Var, l: Lin, p: &impl Fn(usize) -> Var) -> Result<Var> {
    tape.linear(x, p(l.w), Some(p(l.b)))
}

fn norm<T: Elem>(tape: &mut Tape<T>, x: Var, n: Norm, p: &impl Fn(usize) -> Var) -> Result<Var> {
    tape.layer_norm(x, p(n.g), p(n.b))
}

fn attend<T: Elem>(
    tape: &mut Tape<T>,
    q_in: Var,
    kv_in: Var,
    a: &Attn,
    heads: usize,
    p: &impl Fn(usize) -> Var,
) -> Result<Var> {
    let q = linear(tape, q_in, a.q, p)?;
    let k = linear(tape, kv_in, a.k, p)?;
    let v = linear(tape, kv_in, a.v, p)?;
    let o = tape.attention(q, k, v, heads)?;
    linear(tape, o, a.o, p)
}

fn mlp<T: Elem>(tape: &mut Tape<T>, x: Var, m: &Mlp, p: &impl Fn(usize) -> Var) -> Result<Var> {
    let h = norm(tape, x, m.norm, p)?;
    let h = linear(tape, h, m.fc1, p)?;
    let h = tape.gelu(h)?;
    linear(tape, h, m.fc2, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, grid_sample_3d};
    use crate::patchgeom::{sample_pyramid_coords, OffsetMode, PyramidSpec};
    use crate::rng;

    fn small() -> DenoiserConfig {
        DenoiserConfig {
            channels: 3,
            patch: [2, 4, 4],
            levels: 3,
            num_blocks: 3,
            num_latents: 4,
            latent_dim: 8,
            token_dim: 8,
            tokenizer: [1, 2, 2],
            num_levels_per_block: vec![1, 2, 3],
            num_classes: 3,
            heads: 2,
            mlp_ratio: 2,
            compute_depth: 2,
            fourier_features: 4,
            context: ContextMode::AllParents,
            detach_context: false,
        }
    }

    fn pyramid(model: &Denoiser, seed: u64) -> Vec<(Tensor<f32>, PatchCoords)> {
        let cfg = &model.config;
        let spec = PyramidSpec::new(cfg.levels, cfg.patch, cfg.patch.map(|r| r << (cfg.levels - 1))).unwrap();
        let mut r = rng::stream(seed, &[1]);
        let coords = sample_pyramid_coords(&spec, OffsetMode::VoxelAligned, &mut r);
        coords
            .into_iter()
            .map(|c| (Tensor::randn(&[3, cfg.patch[0], cfg.patch[1], cfg.patch[2]], 1.0, &mut r), c))
            .collect()
    }

    fn run(model: &Denoiser, levels: &[(Tensor<f32>, PatchCoords)]) -> (Vec<Tensor<f32>>, usize) {
        let mut tape = Tape::inference();
        let bound = model.bind(&mut tape, false);
        let inputs: Vec<LevelInput> = levels
            .iter()
            .enumerate()
            .map(|(l, (x, c))| model.level_input(&mut tape, l, x, 0.1 * l as f64, Some(1), *c).unwrap())
            .collect();
        let out = model.forward(&mut tape, &bound, &inputs, None).unwrap();
        let preds = out.outputs.iter().map(|&v| tape.value(v).clone()).collect();
        (preds, out.applications)
    }

    #[test]
    fn patchify_shapes_and_round_trip() {
        let mut r = rng::stream(3, &[]);
        let x = Tensor::<f32>::randn(&[3, 4, 8, 8], 1.0, &mut r);
        let t = patchify(&x, [1, 4, 4]).unwrap();
        assert_eq!(t.shape(), [16, 48]);
        assert_eq!(unpatchify(&t, 3, [4, 8, 8], [1, 4, 4]).unwrap(), x);
    }

    #[test]
    fn zero_patch_tokens_are_input_independent_part() {
        let model = Denoiser::new(small(), 0).unwrap();
        let mut tape = Tape::<f32>::inference();
        let bound = model.bind(&mut tape, false);
        let x = Tensor::zeros(&[3, 2, 4, 4]);
        let inp = model.level_input(&mut tape, 0, &x, 0.3, Some(2), PatchCoords::full()).unwrap();
        let (tok, _) = model.tokenize(&mut tape, &bound, &inp).unwrap();
        let lay = &model.params.layout;
        let ff = fourier_features(0.3, 4);
        let nw = model.params.get(lay.noise.w);
        let nb = model.params.get(lay.noise.b);
        let tb = model.params.get(lay.tokenizer.b);
        let table = model.params.get(lay.class_table);
        let d = 8;
        for j in 0..d {
            let mut e = nb.data()[j] as f64;
            for (i, f) in ff.iter().enumerate() {
                e += f * nw.data()[i * d + j] as f64;
            }
            let want = tb.data()[j] as f64 + e + table.data()[2 * d + j] as f64;
            for row in 0..8 {
                let got = tape.value(tok).data()[row * d + j] as f64;
                assert!((got - want).abs() < 1e-5, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn unknown_class_is_rejected() {
        let model = Denoiser::new(small(), 0).unwrap();
        let mut tape = Tape::<f32>::inference();
        let bound = model.bind(&mut tape, false);
        let inp = model
            .level_input(&mut tape, 0, &Tensor::zeros(&[3, 2, 4, 4]), 0.0, Some(3), PatchCoords::full())
            .unwrap();
        assert!(matches!(
            model.forward(&mut tape, &bound, &[inp], None),
            Err(Error::UnknownClass { id: 3, classes: 3 })
        ));
    }

    #[test]
    fn block_is_identity_on_tokens_at_init() {
        let model = Denoiser::new(small(), 4).unwrap();
        let mut tape = Tape::<f32>::inference();
        let bound = model.bind(&mut tape, false);
        let mut r = rng::stream(5, &[]);
        let fused = tape.constant(Tensor::randn(&[8, 8], 1.0, &mut r));
        let lat = tape.constant(Tensor::randn(&[4, 8], 1.0, &mut r));
        for b in 0..3 {
            let (t, l) = model.rin_block(&mut tape, &bound, b, fused, lat).unwrap();
            assert_eq!(tape.value(t), tape.value(fused));
            assert_eq!(tape.value(l).shape(), [4, 8]);
        }
    }

    #[test]
    fn coarse_to_fine_causality() {
        for load in [vec![1, 2, 3], vec![3, 3, 3], vec![2, 3, 3], vec![1, 1, 3]] {
            let cfg = DenoiserConfig {
                num_levels_per_block: load,
                ..small()
            };
            let mut model = Denoiser::new(cfg, 11).unwrap();
            perturb_zero_inits(&mut model);
            let levels = pyramid(&model, 2);
            let (base, _) = run(&model, &levels);
            for l in 1..3 {
                let mut changed = levels.clone();
                changed[l].0 = changed[l].0.map(|v| v * -2.0 + 0.5);
                let (preds, _) = run(&model, &changed);
                for k in 0..l {
                    assert_eq!(preds[k], base[k]);
                }
                assert_ne!(preds[l], base[l]);
            }
        }
    }

    #[test]
    fn truncated_pyramid_is_bitwise_identical() {
        let mut model = Denoiser::new(small(), 12).unwrap();
        perturb_zero_inits(&mut model);
        let levels = pyramid(&model, 3);
        let (full, _) = run(&model, &levels);
        for m in 1..3 {
            let (part, _) = run(&model, &levels[..m]);
            assert_eq!(&part[..], &full[..m]);
        }
    }

    #[test]
    fn application_counts_follow_load() {
        let cfg = DenoiserConfig {
            num_blocks: 6,
            num_levels_per_block: vec![1, 1, 2, 2, 3, 3],
            ..small()
        };
        let model = Denoiser::new(cfg.clone(), 0).unwrap();
        let levels = pyramid(&model, 1);
        assert_eq!(run(&model, &levels).1, 12);
        let flat = Denoiser::new(
            DenoiserConfig {
                num_levels_per_block: vec![3; 6],
                ..cfg
            },
            0,
        )
        .unwrap();
        assert_eq!(run(&flat, &levels).1, 18);
    }

    /// Gives zero-initialized projections random values so every path
    /// carries signal.
    fn perturb_zero_inits(model: &mut Denoiser) {
        let mut r = rng::stream(99, &[]);
        for i in 0..model.params.len() {
            let t = model.params.get_mut(i);
            if t.data().iter().all(|&v| v == 0.0) {
                *t = Tensor::randn(t.shape(), 0.2, &mut r);
            }
        }
    }

    fn context_of(model: &Denoiser<f64>, grids: &[Tensor<f64>], coords: &[PatchCoords]) -> Tensor<f64> {
        let mut tape = Tape::<f64>::inference();
        let inputs: Vec<LevelInput> = coords
            .iter()
            .enumerate()
            .map(|(l, c)| LevelInput {
                level: l,
                tokens: tape.constant(Tensor::zeros(&[8, 12])),
                c_noise: 0.0,
                class: None,
                coords: *c,
            })
            .collect();
        let snapshot: Vec<Var> = grids.iter().map(|g| tape.constant(g.clone())).collect();
        let ctx = model
            .context(&mut tape, 0, coords.len() - 1, &inputs, &snapshot, None, &mut HashMap::new())
            .unwrap();
        tape.value(ctx).clone()
    }

    #[test]
    fn level_zero_context_is_zero_and_constant_parent_is_constant() {
        let model = Denoiser::new(small(), 0).unwrap().cast::<f64>();
        let model_levels = pyramid(&Denoiser::new(small(), 0).unwrap(), 6);
        let coords: Vec<PatchCoords> = model_levels.iter().map(|l| l.1).collect();
        let ctx = context_of(&model, &[Tensor::full(&[8, 8], 1.0)], &coords[..1]);
        assert!(ctx.data().iter().all(|&v| v == 0.0));
        let v: Vec<f64> = (0..8).map(|j| j as f64 * 0.5 - 1.0).collect();
        let grid = Tensor::from_fn(&[8, 8], |i| v[i % 8]);
        let ctx = context_of(&model, &[grid, Tensor::zeros(&[8, 8])], &coords[..2]);
        for (i, &c) in ctx.data().iter().enumerate() {
            assert!((c - v[i % 8]).abs() < 1e-12);
        }
    }

    #[test]
    fn two_parent_context_is_mean_of_samples() {
        let model = Denoiser::new(small(), 0).unwrap().cast::<f64>();
        let coords: Vec<PatchCoords> = pyramid(&Denoiser::new(small(), 0).unwrap(), 8).iter().map(|l| l.1).collect();
        let mut r = rng::stream(8, &[2]);
        let grids: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::randn(&[8, 8], 1.0, &mut r)).collect();
        let ctx = context_of(&model, &grids, &coords);
        let g = [2, 2, 2];
        let mut want = Tensor::<f64>::zeros(&[8, 8]);
        for k in 0..2 {
            let vol = grids[k].transpose2().unwrap().reshape(&[8, 2, 2, 2]).unwrap();
            let q = lattice_queries::<f64>(&coords[2], g, &coords[k], g).unwrap();
            want.add_assign(&grid_sample_3d(&vol, &q).unwrap().scale(0.5)).unwrap();
        }
        assert!(ctx.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn detach_changes_only_backward() {
        let mut model = Denoiser::new(small(), 21).unwrap();
        perturb_zero_inits(&mut model);
        let levels = pyramid(&model, 4);
        let probe = |detach: bool| {
            let mut m = model.clone();
            m.config.detach_context = detach;
            let mut tape = Tape::<f32>::new();
            let bound = m.bind(&mut tape, true);
            let mut inputs = Vec::new();
            let mut parent_in = None;
            for (l, (x, c)) in levels.iter().enumerate() {
                let tokens = tape.param(patchify(x, m.config.tokenizer).unwrap());
                if l == 0 {
                    parent_in = Some(tokens);
                }
                inputs.push(LevelInput {
                    level: l,
                    tokens,
                    c_noise: 0.2,
                    class: Some(0),
                    coords: *c,
                });
            }
            let out = m.forward(&mut tape, &bound, &inputs, None).unwrap();
            let child = tape.value(out.outputs[2]).clone();
            let loss = tape.sum(out.outputs[2]).unwrap();
            let grads = tape.backward(loss).unwrap();
            let g = grads.get(parent_in.unwrap()).map(|g| g.sq_norm()).unwrap_or(0.0);
            (child, g)
        };
        let (a, ga) = probe(false);
        let (b, gb) = probe(true);
        assert_eq!(a, b);
        assert!(ga > 0.0);
        assert_eq!(gb, 0.0);
    }

    #[test]
    fn rin_block_gradient_matches_finite_differences() {
        let mut model = Denoiser::new(small(), 31).unwrap();
        perturb_zero_inits(&mut model);
        let model = model.cast::<f64>();
        let mut r = rng::stream(32, &[]);
        let x = Tensor::<f64>::randn(&[8, 8], 1.0, &mut r);
        let lat = Tensor::<f64>::randn(&[4, 8], 1.0, &mut r);
        let err = grad_check(
            |tape, xv| {
                let bound = model.bind(tape, false);
                let l = tape.constant(lat.clone());
                let (t, l) = model.rin_block(tape, &bound, 0, xv, l)?;
                let a = tape.sum(t)?;
                let lm = tape.mul(l, l)?;
                let b = tape.sum(lm)?;
                let w = tape.mul(t, t)?;
                let c = tape.sum(w)?;
                let ab = tape.add(a, b)?;
                tape.add(ab, c)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-3, "relative error {err}");
    }
}
