use crate::{Error, Result};

/// Which coarser levels feed a level's context.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ContextMode {
    /// Average over every coarser level.
    #[default]
    AllParents,
    /// Only the next coarser level.
    ImmediateParent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub patch: [usize; 3],
    /// Pyramid levels `L + 1`.
    pub levels: usize,
    pub num_blocks: usize,
    pub num_latents: usize,
    pub latent_dim: usize,
    pub token_dim: usize,
    pub tokenizer: [usize; 3],
    pub num_levels_per_block: Vec<usize>,
    pub num_classes: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Latent self-attention + MLP pairs per block.
    pub compute_depth: usize,
    pub fourier_features: usize,
    pub context: ContextMode,
    pub detach_context: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            patch: [4, 8, 8],
            levels: 3,
            num_blocks: 3,
            num_latents: 16,
            latent_dim: 64,
            token_dim: 64,
            tokenizer: [1, 2, 2],
            num_levels_per_block: vec![1, 2, 3],
            num_classes: 4,
            heads: 4,
            mlp_ratio: 2,
            compute_depth: 2,
            fourier_features: 8,
            context: ContextMode::AllParents,
            detach_context: false,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let load = &self.num_levels_per_block;
        if self.levels == 0 {
            return Err(Error::config("pyramid.levels", "must be at least 1"));
        }
        if self.num_blocks == 0 {
            return Err(Error::config("model.blocks", "must be at least 1"));
        }
        if load.len() != self.num_blocks {
            return Err(Error::config(
                "model.load",
                format!("has {} entries but model.blocks = {}", load.len(), self.num_blocks),
            ));
        }
        if load.iter().any(|&n| n == 0 || n > self.levels) {
            return Err(Error::config(
                "model.load",
                format!("entries must lie in 1..={}", self.levels),
            ));
        }
        if load.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::config("model.load", "must be non-decreasing"));
        }
        if *load.last().unwrap() != self.levels {
            return Err(Error::config(
                "model.load",
                format!("last entry must equal the level count {}", self.levels),
            ));
        }
        for a in 0..3 {
            if self.tokenizer[a] == 0 || !self.patch[a].is_multiple_of(self.tokenizer[a]) {
                return Err(Error::config(
                    "model.tokenizer",
                    format!("patch {:?} is not divisible by {:?}", self.patch, self.tokenizer),
                ));
            }
        }
        for (field, v) in [
            ("model.token_dim", self.token_dim),
            ("model.latent_dim", self.latent_dim),
            ("model.latents", self.num_latents),
            ("model.heads", self.heads),
            ("model.mlp_ratio", self.mlp_ratio),
            ("model.classes", self.num_classes),
            ("model.channels", self.channels),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !self.token_dim.is_multiple_of(self.heads) || !self.latent_dim.is_multiple_of(self.heads) {
            return Err(Error::config(
                "model.heads",
                "must divide both token_dim and latent_dim",
            ));
        }
        Ok(())
    }

    /// Token lattice of one patch.
    pub fn token_grid(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.patch[a] / self.tokenizer[a])
    }

    pub fn tokens_per_patch(&self) -> usize {
        self.token_grid().iter().product()
    }

    /// Length of one flattened voxel block.
    pub fn token_input_dim(&self) -> usize {
        self.channels * self.tokenizer.iter().product::<usize>()
    }

    /// Channels entering the fusion projection: tokens, context, coordinates.
    pub fn fused_width(&self) -> usize {
        2 * self.token_dim + 3
    }

    /// Number of (block, level) applications in one full pyramid pass.
    pub fn block_level_count(&self) -> usize {
        self.num_levels_per_block.iter().sum()
    }

    /// Blocks that process `level`.
    pub fn blocks_for_level(&self, level: usize) -> Vec<usize> {
        (0..self.num_blocks)
            .filter(|&b| self.num_levels_per_block[b] > level)
            .collect()
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (d, ld, tin) = (self.token_dim, self.latent_dim, self.token_input_dim());
        let lin = |i: usize, o: usize| i * o + o;
        let norm = |n: usize| 2 * n;
        let mlp = |n: usize| norm(n) + lin(n, self.mlp_ratio * n) + lin(self.mlp_ratio * n, n);
        let fuse = lin(self.fused_width(), d);
        let read = norm(ld) + norm(d) + lin(ld, ld) + 2 * lin(d, ld) + lin(ld, ld);
        let compute = self.compute_depth * (norm(ld) + 4 * lin(ld, ld) + mlp(ld));
        let write = norm(d) + norm(ld) + lin(d, d) + 2 * lin(ld, d) + lin(d, d) + mlp(d);
        let block = fuse + read + compute + write;
        lin(tin, d)
            + lin(2 * self.fourier_features, d)
            + (self.num_classes + 1) * d
            + self.num_latents * ld
            + lin(d, ld)
            + self.num_blocks * block
            + norm(d)
            + lin(d, tin)
    }

    /// Multiply-accumulate estimate for one forward pass over the first
    /// `levels` pyramid levels (`levels ≤ self.levels`).
    pub fn forward_macs(&self, levels: usize) -> u64 {
        let (d, ld, tin) = (self.token_dim as u64, self.latent_dim as u64, self.token_input_dim() as u64);
        let n = self.tokens_per_patch() as u64;
        let m = self.num_latents as u64;
        let r = self.mlp_ratio as u64;
        let attn = |q: u64, k: u64, width: u64| 2 * q * k * width;
        let fuse = n * (2 * d + 3) * d + (n * d * 8);
        let read = m * ld * ld + 2 * n * d * ld + attn(m, n, ld) + m * ld * ld;
        let compute = self.compute_depth as u64 * (4 * m * ld * ld + attn(m, m, ld) + 2 * r * m * ld * ld);
        let write = n * d * d + 2 * m * ld * d + attn(n, m, d) + n * d * d + 2 * r * n * d * d;
        let per_block_level = fuse + read + compute + write;
        let per_level = 2 * n * tin * d;
        let apps: u64 = self
            .num_levels_per_block
            .iter()
            .map(|&l| l.min(levels) as u64)
            .sum();
        apps * per_block_level + levels as u64 * per_level
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        DenoiserConfig::default().validate().unwrap();
    }

    #[test]
    fn load_vector_rules() {
        let mut c = DenoiserConfig::default();
        c.num_levels_per_block = vec![2, 1, 3];
        assert!(c.validate().is_err());
        c.num_levels_per_block = vec![1, 2, 2];
        assert!(c.validate().is_err());
        c.num_levels_per_block = vec![1, 3];
        assert!(c.validate().is_err());
        c.num_levels_per_block = vec![3, 3, 3];
        assert!(c.validate().is_ok());
    }

    #[test]
    fn adaptive_load_counts() {
        let c = DenoiserConfig {
            num_blocks: 6,
            num_levels_per_block: vec![1, 1, 2, 2, 3, 3],
            ..Default::default()
        };
        assert_eq!(c.block_level_count(), 12);
        let per_level: Vec<usize> = (0..3).map(|l| c.blocks_for_level(l).len()).collect();
        assert_eq!(per_level, vec![6, 4, 2]);
        let flat = DenoiserConfig {
            num_levels_per_block: vec![3; 6],
            ..c.clone()
        };
        assert_eq!(flat.block_level_count(), 18);
    }

    #[test]
    fn fused_width_is_two_d_plus_three() {
        let c = DenoiserConfig::default();
        assert_eq!(c.fused_width(), 2 * 64 + 3);
    }
}
