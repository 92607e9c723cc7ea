//! Eager `f32` inference with optional block memoization.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use xxhash_rust::xxh3::Xxh3;

use super::config::{FibVariant, LfeMode, Residual};
use super::weights::ModelWeights;
use super::ExposureTriplet;
use crate::cache::AttentionCache;
use crate::error::{Error, Result};
use crate::tensor::{
    block_ranges, conv, interpolate_bilinear, modulate_bilinear, pixel_shuffle, pixel_unshuffle,
    Activation, Axis, ConvParams, ElementwiseOp, Tensor3,
};

/// Plain local-feature extraction on one block.
pub fn lfe_forward(block: &Tensor3, reduce: &ConvParams, expand: &ConvParams, mode: LfeMode) -> Result<Tensor3> {
    let mut h = conv(block, reduce)?;
    h.activation_in_place(Activation::Relu);
    let mut w = conv(&h, expand)?;
    drop(h);
    w.activation_in_place(Activation::Sigmoid);
    match mode {
        LfeMode::PooledGate => w.combine_assign(&block.gap(), ElementwiseOp::Mul)?,
        LfeMode::BlockGate => w.combine_assign(block, ElementwiseOp::Mul)?,
    }
    Ok(w)
}

/// Runs a configured network on exposure triplets.
pub struct InferenceEngine {
    weights: ModelWeights,
    cache: Option<Arc<AttentionCache>>,
    parallel: bool,
    lfe_evals: AtomicU64,
    /// Cache scope of each (fib, axis) branch.
    scopes: Vec<[u64; 3]>,
}

impl InferenceEngine {
    pub fn new(weights: ModelWeights) -> Result<Self> {
        weights.validate()?;
        let layout = weights.layout();
        let scopes = (0..weights.config.num_fibs)
            .map(|i| {
                Axis::ALL.map(|axis| {
                    let (r, e) = layout.lfe(i, axis);
                    let mut h = Xxh3::new();
                    h.update(&(i as u64).to_le_bytes());
                    h.update(&[axis as u8, weights.config.lfe_mode as u8]);
                    for p in [weights.get(r), weights.get(e)] {
                        for v in p.weight.iter().chain(&p.bias) {
                            h.update(&v.to_bits().to_le_bytes());
                        }
                    }
                    h.digest()
                })
            })
            .collect();
        Ok(InferenceEngine {
            weights,
            cache: None,
            parallel: true,
            lfe_evals: AtomicU64::new(0),
            scopes,
        })
    }

    /// Attaches a cache; `None` (or a zero-capacity cache) computes every block.
    pub fn with_cache(mut self, cache: Option<Arc<AttentionCache>>) -> Self {
        self.cache = cache;
        self
    }

    /// Processes the blocks of a scanner branch concurrently (default) or in order.
    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn cache(&self) -> Option<&Arc<AttentionCache>> {
        self.cache.as_ref()
    }

    /// Local-feature evaluations actually computed (cache hits excluded).
    pub fn lfe_evaluations(&self) -> u64 {
        self.lfe_evals.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.lfe_evals.store(0, Ordering::Relaxed);
    }

    fn chunk(&self, axis: Axis) -> usize {
        let c = &self.weights.config;
        match axis {
            Axis::Channel => c.effective_chunk_c(),
            Axis::Width => c.chunk_w,
            Axis::Height => c.chunk_h,
        }
    }

    fn block_lfe(&self, fib: usize, axis: Axis, block: &Tensor3) -> Result<Tensor3> {
        let (r, e) = self.weights.layout().lfe(fib, axis);
        let (r, e) = (self.weights.get(r), self.weights.get(e));
        let mode = self.weights.config.lfe_mode;
        let compute = |b: &Tensor3| {
            self.lfe_evals.fetch_add(1, Ordering::Relaxed);
            lfe_forward(b, r, e, mode)
        };
        match &self.cache {
            Some(cache) => cache.memoized_lfe(block, axis, self.scopes[fib][axis as usize], compute),
            None => compute(block),
        }
    }

    /// Slice-and-scan along the three axes; returns the sum of the branches.
    pub fn scan(&self, fib: usize, x: &Tensor3) -> Result<Tensor3> {
        let s = x.shape();
        let mut acc = Tensor3::zeros(s);
        // Blocks are computed in bounded waves and written back in order, so
        // the result does not depend on scheduling. A wave holds at most a
        // quarter of the feature map (or one block, if blocks are larger).
        for (k, axis) in Axis::ALL.into_iter().enumerate() {
            let chunk = self.chunk(axis).min(s.dim(axis));
            let block_len = s.len() / s.dim(axis) * chunk;
            let wave = if self.parallel {
                (2 * rayon::current_num_threads()).min((s.len() / 4 / block_len).max(1))
            } else {
                1
            };
            let ranges: Vec<_> = block_ranges(s.dim(axis), self.chunk(axis)).collect();
            for group in ranges.chunks(wave) {
                let run = |&(start, len): &(usize, usize)| -> Result<Tensor3> {
                    if len == s.dim(axis) {
                        self.block_lfe(fib, axis, x)
                    } else {
                        self.block_lfe(fib, axis, &x.slice(axis, start, len))
                    }
                };
                let outs: Vec<Result<Tensor3>> = if self.parallel {
                    group.par_iter().map(run).collect()
                } else {
                    group.iter().map(run).collect()
                };
                for (&(start, _), out) in group.iter().zip(outs) {
                    acc.write_block(axis, start, &out?, k > 0);
                }
            }
        }
        Ok(acc)
    }

    /// Resolution transform applied in place: `x ← x + up(T(down(x))) ⊙ x`.
    pub fn drtm_in_place(&self, fib: usize, x: &mut Tensor3) -> Result<()> {
        let cfg = &self.weights.config;
        let layout = self.weights.layout();
        let mut t = interpolate_bilinear(x, cfg.drtm_w, cfg.drtm_h);
        for axis in Axis::ALL {
            t = conv(&t, self.weights.get(layout.drtm(fib, axis)))?;
            t.activation_in_place(Activation::Gelu);
            t = t.permute_roll();
        }
        modulate_bilinear(x, &t)
    }

    /// One integration block.
    pub fn fib(&self, i: usize, x: &Tensor3) -> Result<Tensor3> {
        match self.weights.config.variant {
            FibVariant::Full => {
                let mut d = self.scan(i, x)?;
                self.drtm_in_place(i, &mut d)?;
                Ok(d)
            }
            FibVariant::NoDaem => {
                let mut d = x.clone();
                self.drtm_in_place(i, &mut d)?;
                Ok(d)
            }
            FibVariant::NoDrtm => self.scan(i, x),
        }
    }

    /// Downsampler output `F_0`.
    pub fn encode(&self, t: &ExposureTriplet) -> Result<Tensor3> {
        let r = self.weights.config.downsample;
        let s = t.shape();
        if s.w % r != 0 || s.h % r != 0 {
            return Err(Error::shape(
                "forward",
                s,
                format!("downsample factor {r} must divide width and height"),
            ));
        }
        let cat = Tensor3::concat(Axis::Channel, &[&t.x1, &t.x2, &t.x3])?;
        let d = pixel_unshuffle(&cat, r)?;
        drop(cat);
        conv(&d, self.weights.get(self.weights.layout().down()))
    }

    /// Fused output, `(3, W, H)` in `[0, 1]`.
    pub fn forward(&self, t: &ExposureTriplet) -> Result<Tensor3> {
        let cfg = &self.weights.config;
        let f0 = self.encode(t)?;
        let mut f: Option<Tensor3> = None;
        for i in 0..cfg.num_fibs {
            let next = self.fib(i, f.as_ref().unwrap_or(&f0))?;
            f = Some(next);
        }
        let mut ff = f.expect("at least one block");
        if cfg.residual == Residual::Global {
            ff.combine_assign(&f0, ElementwiseOp::Add)?;
        }
        drop(f0);
        let u = conv(&ff, self.weights.get(self.weights.layout().up()))?;
        drop(ff);
        let mut y = pixel_shuffle(&u, cfg.downsample)?;
        drop(u);
        y.combine_assign(&t.x2, ElementwiseOp::Mul)?;
        y.map_in_place(|v| v.max(0.0).min(1.0));
        Ok(y)
    }
}

/// Upper bound on transient allocation of [`InferenceEngine::forward`] for a
/// `W × H` triplet, excluding the caller-owned triplet itself.
///
/// The pass holds at most three `(C, W/r, H/r)` feature maps at once (`F_0`,
/// the block input, the scanner accumulator) or, while downsampling, two
/// nine-channel full-resolution maps. Per-block temporaries (slice, hidden
/// and gate maps, codes) stay below three times the largest block, and the
/// in-flight wave below a quarter feature map; one more feature map (or three
/// largest blocks, if more) covers them and the output. Resident cache
/// payloads never exceed the cache budget.
pub fn peak_memory_bound(config: &super::ModelConfig, width: usize, height: usize, cache_capacity: usize) -> usize {
    let f32s = std::mem::size_of::<f32>();
    let r = config.downsample;
    let (fw, fh) = (width / r, height / r);
    let feature = config.channels * fw * fh * f32s;
    let nine = 9 * width * height * f32s;
    let block = [
        config.effective_chunk_c() * fw * fh,
        config.channels * config.chunk_w.min(fw) * fh,
        config.channels * fw * config.chunk_h.min(fh),
    ]
    .into_iter()
    .max()
    .unwrap_or(0)
        * f32s;
    (3 * feature).max(2 * nine) + feature.max(3 * block) + cache_capacity
}
