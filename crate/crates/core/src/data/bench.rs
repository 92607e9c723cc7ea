//! Cache speedup benchmark: cache-disabled, cold and warm fusion timings.

use std::fmt::{self, Write as _};
use std::sync::Arc;
use std::time::Instant;

use crate::cache::{AttentionCache, Storage};
use crate::error::{Error, Result};
use crate::net::{ExposureTriplet, InferenceEngine, ModelWeights};

#[derive(Debug, Clone, Copy)]
pub struct BenchConfig {
    /// Timed repetitions for the cache-off and warm modes.
    pub repeats: usize,
    pub cache_bytes: usize,
    pub storage: Storage,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            repeats: 5,
            cache_bytes: crate::cache::DEFAULT_CAPACITY,
            storage: Storage::Quantized { q_min: 0, q_max: 255 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Off,
    Cold,
    Warm,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Off => "off",
            Mode::Cold => "cold",
            Mode::Warm => "warm",
        }
    }
}

/// One timed fusion.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: usize,
    pub mode: Mode,
    pub iteration: usize,
    pub seconds: f64,
    pub lfe_evals: u64,
    pub hits: u64,
    pub misses: u64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub samples: Vec<Sample>,
    pub peak_cache_bytes: usize,
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

impl BenchReport {
    fn of(&self, mode: Mode) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.mode == mode)
    }

    /// Median wall time per fused image in `mode`, in seconds.
    pub fn median_seconds(&self, mode: Mode) -> f64 {
        let mut t: Vec<f64> = self.of(mode).map(|s| s.seconds).collect();
        if t.is_empty() {
            return f64::NAN;
        }
        median(&mut t)
    }

    pub fn lfe_evals(&self, mode: Mode) -> u64 {
        self.of(mode).map(|s| s.lfe_evals).sum()
    }

    pub fn hit_rate(&self, mode: Mode) -> f64 {
        let (h, m) = self.of(mode).fold((0, 0), |(h, m), s| (h + s.hits, m + s.misses));
        if h + m == 0 {
            0.0
        } else {
            h as f64 / (h + m) as f64
        }
    }

    /// Relative wall-time reduction of warm runs against cache-off runs.
    pub fn warm_reduction(&self) -> f64 {
        1.0 - self.median_seconds(Mode::Warm) / self.median_seconds(Mode::Off)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,mode,iteration,seconds,lfe_evals,hits,misses\n");
        for s in &self.samples {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{},{},{}",
                s.image,
                s.mode.name(),
                s.iteration,
                s.seconds,
                s.lfe_evals,
                s.hits,
                s.misses
            );
        }
        out
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for mode in [Mode::Off, Mode::Cold, Mode::Warm] {
            writeln!(
                f,
                "mode={} median_ms={:.3} lfe_evals={} hit_rate={:.4}",
                mode.name(),
                self.median_seconds(mode) * 1e3,
                self.lfe_evals(mode),
                self.hit_rate(mode)
            )?;
        }
        write!(
            f,
            "warm_reduction={:.4} peak_cache_bytes={}",
            self.warm_reduction(),
            self.peak_cache_bytes
        )
    }
}

fn timed(engine: &InferenceEngine, t: &ExposureTriplet) -> Result<(f64, u64)> {
    engine.reset_counters();
    let start = Instant::now();
    let y = engine.forward(t)?;
    let seconds = start.elapsed().as_secs_f64();
    drop(y);
    Ok((seconds, engine.lfe_evaluations()))
}

/// Times every triplet with the cache off, then cold and warm with a fresh cache.
pub fn bench_run(weights: &ModelWeights, triplets: &[ExposureTriplet], config: &BenchConfig) -> Result<BenchReport> {
    if config.repeats == 0 {
        return Err(Error::InvalidInput("bench needs at least one repeat".into()));
    }
    let mut samples = Vec::new();
    let mut peak = 0;
    let off = InferenceEngine::new(weights.clone())?;
    for (image, t) in triplets.iter().enumerate() {
        for iteration in 0..config.repeats {
            let (seconds, lfe_evals) = timed(&off, t)?;
            samples.push(Sample {
                image,
                mode: Mode::Off,
                iteration,
                seconds,
                lfe_evals,
                hits: 0,
                misses: 0,
            });
        }
        let cache = Arc::new(AttentionCache::new(config.cache_bytes, config.storage));
        let on = InferenceEngine::new(weights.clone())?.with_cache(Some(cache.clone()));
        for iteration in 0..=config.repeats {
            cache.reset_stats();
            let (seconds, lfe_evals) = timed(&on, t)?;
            let st = cache.stats();
            peak = peak.max(st.peak_bytes);
            samples.push(Sample {
                image,
                mode: if iteration == 0 { Mode::Cold } else { Mode::Warm },
                iteration: iteration.saturating_sub(1),
                seconds,
                lfe_evals,
                hits: st.hits,
                misses: st.misses,
            });
        }
    }
    Ok(BenchReport {
        samples,
        peak_cache_bytes: peak,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_weights, ModelConfig};
    use crate::tensor::{Shape3, Tensor3};
    use crate::testutil::random_tensor;

    #[test]
    fn median_cases() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn cache_off_saves_nothing_and_warm_saves_everything() {
        let cfg = ModelConfig::micro();
        let w = init_weights(&cfg, 1).unwrap();
        let f = |s| random_tensor(Shape3::new(3, 32, 32), s, 1.0).map(|v| v.abs());
        let t = ExposureTriplet::new(f(1), f(2), f(3)).unwrap();
        let r = bench_run(&w, &[t], &BenchConfig { repeats: 2, ..BenchConfig::default() }).unwrap();
        assert_eq!(r.hit_rate(Mode::Off), 0.0);
        assert!(r.lfe_evals(Mode::Off) > 0);
        assert_eq!(r.lfe_evals(Mode::Warm), 0);
        assert_eq!(r.hit_rate(Mode::Warm), 1.0);
        assert_eq!(r.samples.len(), 2 + 1 + 2);
        assert!(r.to_csv().lines().count() == 6);
        assert!(r.to_string().contains("mode=warm"));
    }

    #[test]
    fn tiled_input_cold_hit_rate() {
        // Features repeat with period 16 along width and height, so each
        // interior strip of a branch is a duplicate; border strips differ
        // because of the 3×3 downsampler's zero padding. The oracle counts
        // unique strips directly on the computed feature map.
        let cfg = ModelConfig { num_fibs: 1, chunk_w: 16, chunk_h: 16, ..ModelConfig::micro() };
        let w = init_weights(&cfg, 2).unwrap();
        let tile = random_tensor(Shape3::new(3, 32, 32), 3, 1.0).map(|v| v.abs());
        let img = Tensor3::from_fn(Shape3::new(3, 128, 128), |c, x, y| tile.get(c, x % 32, y % 32));
        let t = ExposureTriplet::new(img.clone(), img.clone(), img).unwrap();
        let r = bench_run(&w, &[t.clone()], &BenchConfig { repeats: 1, ..BenchConfig::default() }).unwrap();

        let e = InferenceEngine::new(w).unwrap();
        let f0 = e.encode(&t).unwrap();
        let s = f0.shape();
        let mut total = 0usize;
        let mut unique = 0usize;
        for (axis, chunk) in [(crate::Axis::Channel, 4), (crate::Axis::Width, 16), (crate::Axis::Height, 16)] {
            let blocks: Vec<Tensor3> = crate::tensor::block_ranges(s.dim(axis), chunk)
                .map(|(st, len)| f0.slice(axis, st, len))
                .collect();
            total += blocks.len();
            unique += (0..blocks.len())
                .filter(|&i| !blocks[..i].iter().any(|b| b == &blocks[i]))
                .count();
        }
        let expected = 1.0 - unique as f64 / total as f64;
        assert!(expected > 0.0);
        assert!((r.hit_rate(Mode::Cold) - expected).abs() < 1e-12, "{} vs {expected}", r.hit_rate(Mode::Cold));
    }
}
