use std::sync::Arc;

use rand_distr::StandardNormal;

use super::DenoiserConfig;
use crate::numerics::{Elem, Tensor};
use crate::rng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) struct Lin {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub g: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Mlp {
    pub norm: Norm,
    pub fc1: Lin,
    pub fc2: Lin,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Attn {
    pub q: Lin,
    pub k: Lin,
    pub v: Lin,
    pub o: Lin,
}

#[derive(Clone, Debug)]
pub(crate) struct ComputeLayer {
    pub norm: Norm,
    pub attn: Attn,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub(crate) struct BlockLayout {
    pub fuse: Lin,
    pub read_latents: Norm,
    pub read_tokens: Norm,
    pub read: Attn,
    pub compute: Vec<ComputeLayer>,
    pub write_tokens: Norm,
    pub write_latents: Norm,
    pub write: Attn,
    pub write_mlp: Mlp,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub tokenizer: Lin,
    pub noise: Lin,
    pub class_table: usize,
    pub latents: usize,
    pub latent_cond: Lin,
    pub blocks: Vec<BlockLayout>,
    pub out_norm: Norm,
    pub out: Lin,
}

enum Init {
    /// Normal with std `gain / sqrt(fan_in)`.
    Fan(f64),
    Zero,
    /// Identity on the first `n` input rows plus small noise elsewhere.
    IdentityPrefix(usize),
}

struct Builder<R> {
    rng: R,
    names: Vec<String>,
    values: Vec<Tensor<f32>>,
}

impl<R: rand::Rng> Builder<R> {
    fn push(&mut self, name: String, t: Tensor<f32>) -> usize {
        self.names.push(name);
        self.values.push(t);
        self.values.len() - 1
    }

    fn randn(&mut self, shape: &[usize], std: f64) -> Tensor<f32> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| (rng.sample::<f64, _>(StandardNormal) * std) as f32)
    }

    fn lin(&mut self, name: &str, din: usize, dout: usize, init: Init) -> Lin {
        let w = match init {
            Init::Fan(gain) => self.randn(&[din, dout], gain / (din as f64).sqrt()),
            Init::Zero => Tensor::zeros(&[din, dout]),
            Init::IdentityPrefix(n) => {
                let mut t = self.randn(&[din, dout], 0.1 / (din as f64).sqrt());
                for i in 0..n.min(dout) {
                    for j in 0..dout {
                        t.data_mut()[i * dout + j] = if i == j { 1.0 } else { 0.0 };
                    }
                }
                t
            }
        };
        let w = self.push(format!("{name}.w"), w);
        let b = self.push(format!("{name}.b"), Tensor::zeros(&[dout]));
        Lin { w, b }
    }

    fn norm(&mut self, name: &str, n: usize) -> Norm {
        let g = self.push(format!("{name}.g"), Tensor::full(&[n], 1.0));
        let b = self.push(format!("{name}.b"), Tensor::zeros(&[n]));
        Norm { g, b }
    }

    fn attn(&mut self, name: &str, dq: usize, dkv: usize, width: usize, zero_out: bool) -> Attn {
        Attn {
            q: self.lin(&format!("{name}.q"), dq, width, Init::Fan(1.0)),
            k: self.lin(&format!("{name}.k"), dkv, width, Init::Fan(1.0)),
            v: self.lin(&format!("{name}.v"), dkv, width, Init::Fan(1.0)),
            o: self.lin(
                &format!("{name}.o"),
                width,
                dq,
                if zero_out { Init::Zero } else { Init::Fan(1.0) },
            ),
        }
    }

    fn mlp(&mut self, name: &str, n: usize, ratio: usize, zero_out: bool) -> Mlp {
        Mlp {
            norm: self.norm(&format!("{name}.norm"), n),
            fc1: self.lin(&format!("{name}.fc1"), n, ratio * n, Init::Fan(1.0)),
            fc2: self.lin(
                &format!("{name}.fc2"),
                ratio * n,
                n,
                if zero_out { Init::Zero } else { Init::Fan(1.0) },
            ),
        }
    }
}

/// Named parameter tensors of a denoiser plus their structural layout.
///
/// Values are reference counted so inference tapes can borrow them without
/// copying.
#[derive(Clone, Debug)]
pub struct Params<T: Elem = f32> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
    pub(crate) layout: Layout,
}

impl Params<f32> {
    /// Deterministic initialization from `seed`.
    ///
    /// Final write projections and the second layer of every token MLP start
    /// at zero, so each block is the identity on its fused tokens. The fusion
    /// projection starts as the identity on the token slice.
    pub fn init(config: &DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (d, ld, tin) = (config.token_dim, config.latent_dim, config.token_input_dim());
        let mut b = Builder {
            rng: rng::stream(seed, &[0x696e_6974]),
            names: Vec::new(),
            values: Vec::new(),
        };
        let tokenizer = b.lin("tokenizer", tin, d, Init::Fan(1.0));
        let noise = b.lin("noise_embed", 2 * config.fourier_features, d, Init::Fan(1.0));
        let table = b.randn(&[config.num_classes + 1, d], 0.5);
        let class_table = b.push("class_embed".into(), table);
        let lat = b.randn(&[config.num_latents, ld], 1.0);
        let latents = b.push("latents".into(), lat);
        let latent_cond = b.lin("latent_cond", d, ld, Init::Fan(1.0));
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for i in 0..config.num_blocks {
            let p = format!("block{i}");
            let fuse = b.lin(&format!("{p}.fuse"), config.fused_width(), d, Init::IdentityPrefix(d));
            let read_latents = b.norm(&format!("{p}.read.norm_latents"), ld);
            let read_tokens = b.norm(&format!("{p}.read.norm_tokens"), d);
            let read = b.attn(&format!("{p}.read"), ld, d, ld, false);
            let compute = (0..config.compute_depth)
                .map(|k| ComputeLayer {
                    norm: b.norm(&format!("{p}.compute{k}.norm"), ld),
                    attn: b.attn(&format!("{p}.compute{k}.attn"), ld, ld, ld, false),
                    mlp: b.mlp(&format!("{p}.compute{k}.mlp"), ld, config.mlp_ratio, false),
                })
                .collect();
            let write_tokens = b.norm(&format!("{p}.write.norm_tokens"), d);
            let write_latents = b.norm(&format!("{p}.write.norm_latents"), ld);
            let write = b.attn(&format!("{p}.write"), d, ld, d, true);
            let write_mlp = b.mlp(&format!("{p}.write.mlp"), d, config.mlp_ratio, true);
            blocks.push(BlockLayout {
                fuse,
                read_latents,
                read_tokens,
                read,
                compute,
                write_tokens,
                write_latents,
                write,
                write_mlp,
            });
        }
        let out_norm = b.norm("out.norm", d);
        let out = b.lin("out", d, tin, Init::Fan(0.1));
        let layout = Layout {
            tokenizer,
            noise,
            class_table,
            latents,
            latent_cond,
            blocks,
            out_norm,
            out,
        };
        Ok(Self {
            names: b.names,
            values: b.values.into_iter().map(Arc::new).collect(),
            layout,
        })
    }
}

impl<T: Elem> Params<T> {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.values[i]
    }

    pub fn shared(&self, i: usize) -> &Arc<Tensor<T>> {
        &self.values[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    pub fn to_tensors(&self) -> Vec<Tensor<T>> {
        self.values.iter().map(|t| (**t).clone()).collect()
    }

    /// Replaces every value, checking names and shapes against the layout.
    pub fn set_all(&mut self, names: &[String], values: Vec<Tensor<T>>) -> Result<()> {
        if names.len() != self.names.len() || values.len() != self.values.len() {
            return Err(Error::Malformed {
                what: "parameters",
                msg: format!("expected {} tensors, got {}", self.names.len(), values.len()),
            });
        }
        for (i, (n, v)) in names.iter().zip(&values).enumerate() {
            if *n != self.names[i] || v.shape() != self.values[i].shape() {
                return Err(Error::Malformed {
                    what: "parameters",
                    msg: format!(
                        "entry {i}: expected {} {:?}, got {n} {:?}",
                        self.names[i],
                        self.values[i].shape(),
                        v.shape()
                    ),
                });
            }
        }
        self.values = values.into_iter().map(Arc::new).collect();
        Ok(())
    }

    /// Hands ownership of the values to the caller (copy-free when no tape
    /// still holds them).
    pub fn take_tensors(&mut self) -> Vec<Tensor<T>> {
        std::mem::take(&mut self.values)
            .into_iter()
            .map(Arc::unwrap_or_clone)
            .collect()
    }

    /// Restores values previously taken with [`Params::take_tensors`].
    pub fn put_tensors(&mut self, values: Vec<Tensor<T>>) {
        self.values = values.into_iter().map(Arc::new).collect();
    }

    pub fn cast<U: Elem>(&self) -> Params<U> {
        Params {
            names: self.names.clone(),
            values: self.values.iter().map(|t| Arc::new(t.cast())).collect(),
            layout: self.layout.clone(),
        }
    }

    /// Mutable access to one tensor; clones it first if it is shared.
    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_matches_count() {
        let c = DenoiserConfig::default();
        let a = Params::init(&c, 7).unwrap();
        let b = Params::init(&c, 7).unwrap();
        assert_eq!(a.to_tensors(), b.to_tensors());
        assert_eq!(a.scalar_count(), c.param_count());
        let other = Params::init(&c, 8).unwrap();
        assert_ne!(a.to_tensors(), other.to_tensors());
    }

    #[test]
    fn names_are_unique() {
        let p = Params::init(&DenoiserConfig::default(), 0).unwrap();
        let mut n = p.names().to_vec();
        n.sort();
        n.dedup();
        assert_eq!(n.len(), p.len());
    }

    #[test]
    fn take_and_put_round_trip() {
        let mut p = Params::init(&DenoiserConfig::default(), 1).unwrap();
        let before = p.to_tensors();
        let t = p.take_tensors();
        p.put_tensors(t);
        assert_eq!(p.to_tensors(), before);
    }
}
