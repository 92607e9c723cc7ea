use crate::error::{Error, Result};

/// Reading of the local-feature product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LfeMode {
    /// `gap(block) ⊙ F_w`.
    #[default]
    PooledGate,
    /// `block ⊙ F_w`.
    BlockGate,
}

/// Which halves of each integration block are active (for ablations).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FibVariant {
    #[default]
    Full,
    /// The slice scanner is replaced by the identity.
    NoDaem,
    /// The resolution transform is dropped: the block returns the scanner output.
    NoDrtm,
}

/// What is fed to the upsampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Residual {
    /// `F_0 + F_N`.
    #[default]
    Global,
    /// `F_N` alone.
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_fibs: usize,
    pub channels: usize,
    pub downsample: usize,
    pub chunk_c: usize,
    pub chunk_w: usize,
    pub chunk_h: usize,
    pub drtm_w: usize,
    pub drtm_h: usize,
    pub lfe_reduction: usize,
    pub cache_enabled: bool,
    pub q_bits: u32,
    pub lfe_mode: LfeMode,
    pub variant: FibVariant,
    pub residual: Residual,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_fibs: 8,
            channels: 48,
            downsample: 2,
            chunk_c: 16,
            chunk_w: 64,
            chunk_h: 64,
            drtm_w: 64,
            drtm_h: 64,
            lfe_reduction: 4,
            cache_enabled: true,
            q_bits: 8,
            lfe_mode: LfeMode::PooledGate,
            variant: FibVariant::Full,
            residual: Residual::Global,
        }
    }
}

impl ModelConfig {
    /// One block, eight channels: the desk-scale training configuration.
    pub fn micro() -> Self {
        ModelConfig {
            num_fibs: 1,
            channels: 8,
            chunk_c: 4,
            chunk_w: 16,
            chunk_h: 16,
            lfe_reduction: 2,
            drtm_w: 32,
            drtm_h: 32,
            ..Self::default()
        }
    }

    /// Small enough for finite differences on an 8×8 input.
    pub fn tiny() -> Self {
        ModelConfig {
            num_fibs: 1,
            channels: 4,
            chunk_c: 2,
            chunk_w: 2,
            chunk_h: 2,
            lfe_reduction: 2,
            drtm_w: 4,
            drtm_h: 4,
            ..Self::default()
        }
    }

    /// Channel chunk actually used (never wider than the feature map).
    pub fn effective_chunk_c(&self) -> usize {
        self.chunk_c.min(self.channels)
    }

    /// Hidden width of a local-feature branch over `ch` channels.
    pub fn hidden(&self, ch: usize) -> usize {
        (ch / self.lfe_reduction).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_fibs", self.num_fibs),
            ("channels", self.channels),
            ("downsample", self.downsample),
            ("chunk_c", self.chunk_c),
            ("chunk_w", self.chunk_w),
            ("chunk_h", self.chunk_h),
            ("drtm_w", self.drtm_w),
            ("drtm_h", self.drtm_h),
            ("lfe_reduction", self.lfe_reduction),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidInput(format!("{name} must be at least 1")));
            }
        }
        if self.channels % self.lfe_reduction != 0 {
            return Err(Error::InvalidInput(format!(
                "channels ({}) must be divisible by lfe_reduction ({})",
                self.channels, self.lfe_reduction
            )));
        }
        // Channel blocks share one set of weights, so they must all be the same width.
        if self.channels % self.effective_chunk_c() != 0 {
            return Err(Error::InvalidInput(format!(
                "channels ({}) must be divisible by chunk_c ({})",
                self.channels, self.chunk_c
            )));
        }
        if !(1..=8).contains(&self.q_bits) {
            return Err(Error::InvalidInput(format!(
                "q_bits must be in 1..=8, got {}",
                self.q_bits
            )));
        }
        Ok(())
    }
}
