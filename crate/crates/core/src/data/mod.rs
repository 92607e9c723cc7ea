//! Synthetic scenes, quality metrics and the cache benchmark.

pub mod bench;
pub mod metrics;
pub mod synth;

pub use bench::{bench_run, BenchConfig, BenchReport, Mode};
pub use metrics::{psnr, ssim, MetricReport};
pub use synth::{synth_triplet, SceneSpec};
