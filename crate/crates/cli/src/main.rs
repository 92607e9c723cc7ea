//! `ipl`: fuse exposure triplets, synthesize scenes, train, score and benchmark.
//!
//! Exit status: 0 on success, 1 on a usage error, 2 on a runtime or I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use ipl::cache::{AttentionCache, Storage, DEFAULT_CAPACITY};
use ipl::data::{bench_run, synth_triplet, BenchConfig, MetricReport, SceneSpec};
use ipl::io;
use ipl::net::{init_weights, InferenceEngine, ModelConfig};
use ipl::train::{grad_check_model, train_loop, Sample, TrainConfig};
use ipl::{Error, Result};

#[derive(Parser)]
#[command(name = "ipl", version, about = "Chunked, cached multi-exposure fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fuse a low/mid/high exposure triplet into one image.
    Fuse {
        #[arg(long)]
        low: PathBuf,
        #[arg(long)]
        mid: PathBuf,
        #[arg(long)]
        high: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Disable the attention cache.
        #[arg(long)]
        no_cache: bool,
        #[arg(long, default_value_t = DEFAULT_CAPACITY)]
        cache_bytes: usize,
        /// Code width of cached payloads (1..=8); defaults to the weights' config.
        #[arg(long)]
        q_bits: Option<u32>,
        #[arg(long)]
        chunk_w: Option<usize>,
        #[arg(long)]
        chunk_h: Option<usize>,
        #[arg(long)]
        chunk_c: Option<usize>,
        /// Print cache statistics.
        #[arg(long)]
        stats: bool,
    },
    /// Write synthetic scenes (three exposures and a target each).
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        count: usize,
        /// Scene size as WxH.
        #[arg(long, value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Exposure offsets in stops, low,mid,high.
        #[arg(long, value_parser = parse_ev, allow_hyphen_values = true)]
        ev: Option<[f32; 3]>,
    },
    /// Train a network on a scene directory.
    Train {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out_weights: PathBuf,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        fibs: Option<usize>,
        #[arg(long)]
        channels: Option<usize>,
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// PSNR and SSIM of a test image against a reference.
    Metrics {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Time fusion with the cache off, cold and warm.
    Bench {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = DEFAULT_CAPACITY)]
        cache_bytes: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference check of the model gradient (exit 0 iff ≤ 1e-3).
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

const GRADCHECK_TOLERANCE: f64 = 1e-3;

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let n = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((n(w)?, n(h)?))
}

fn parse_ev(s: &str) -> std::result::Result<[f32; 3], String> {
    let v: Vec<f32> = s
        .split(',')
        .map(|p| p.trim().parse::<f32>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    <[f32; 3]>::try_from(v).map_err(|v| format!("expected three offsets, got {}", v.len()))
}

#[allow(clippy::too_many_arguments)]
fn fuse(
    frames: [&Path; 3],
    weights: &Path,
    out: &Path,
    no_cache: bool,
    cache_bytes: usize,
    q_bits: Option<u32>,
    chunks: (Option<usize>, Option<usize>, Option<usize>),
    stats: bool,
) -> Result<()> {
    let mut w = io::load_weights(weights)?;
    if let Some(c) = chunks.0 {
        w.config.chunk_w = c;
    }
    if let Some(c) = chunks.1 {
        w.config.chunk_h = c;
    }
    if let Some(c) = chunks.2 {
        w.config.chunk_c = c;
    }
    if let Some(b) = q_bits {
        w.config.q_bits = b;
    }
    w.validate()?;
    let triplet = io::load_triplet(&frames.map(Path::to_path_buf))?;
    let cache = (w.config.cache_enabled && !no_cache)
        .then(|| Storage::bits(w.config.q_bits).map(|s| Arc::new(AttentionCache::new(cache_bytes, s))))
        .transpose()?;
    let engine = InferenceEngine::new(w)?.with_cache(cache.clone());
    let y = engine.forward(&triplet)?;
    io::save_image(out, &y)?;
    if stats {
        println!("lfe_evals={}", engine.lfe_evaluations());
        match cache {
            Some(c) => println!("{}", c.stats()),
            None => println!("cache=off"),
        }
    }
    Ok(())
}

fn synth(out_dir: &Path, count: usize, size: (usize, usize), seed: u64, ev: Option<[f32; 3]>) -> Result<()> {
    for i in 0..count {
        let mut spec = SceneSpec::new(size.0, size.1, seed.wrapping_add(i as u64));
        if let Some(ev) = ev {
            spec.ev_offsets = ev;
        }
        let (t, gt) = synth_triplet(&spec)?;
        io::save_scene(out_dir, i, &t, Some(&gt))?;
    }
    println!("scenes={count} dir={}", out_dir.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    data_dir: &Path,
    out_weights: &Path,
    steps: usize,
    lr: f64,
    seed: u64,
    fibs: Option<usize>,
    channels: Option<usize>,
    loss_csv: Option<&Path>,
) -> Result<()> {
    let mut cfg = ModelConfig::micro();
    if let Some(n) = fibs {
        cfg.num_fibs = n;
    }
    if let Some(c) = channels {
        cfg.channels = c;
    }
    let mut data = Vec::new();
    for scene in io::list_scenes(data_dir)? {
        let target = scene.target.as_ref().ok_or_else(|| {
            Error::InvalidInput(format!("{} has no _gt target", scene.frames[1].display()))
        })?;
        data.push(Sample {
            triplet: io::load_triplet(&scene.frames)?,
            target: io::load_image(target)?,
        });
    }
    let tc = TrainConfig {
        learning_rate: lr,
        steps,
        seed,
        ..TrainConfig::default()
    };
    let out = train_loop(init_weights(&cfg, seed)?, &data, &tc)?;
    if let Some(p) = loss_csv {
        io::write_atomic(p, out.loss_csv().as_bytes())?;
    }
    io::save_weights(out_weights, &out.weights)?;
    println!(
        "steps={steps} initial_loss={:.6} final_loss={:.6}",
        out.losses[0],
        out.losses[out.losses.len() - 1]
    );
    Ok(())
}

fn bench(data_dir: &Path, weights: &Path, repeats: usize, cache_bytes: usize, csv: Option<&Path>) -> Result<()> {
    let w = io::load_weights(weights)?;
    let triplets = io::list_scenes(data_dir)?
        .iter()
        .map(|s| io::load_triplet(&s.frames))
        .collect::<Result<Vec<_>>>()?;
    let config = BenchConfig {
        repeats,
        cache_bytes,
        storage: Storage::bits(w.config.q_bits)?,
    };
    let report = bench_run(&w, &triplets, &config)?;
    if let Some(p) = csv {
        io::write_atomic(p, report.to_csv().as_bytes())?;
    }
    println!("{report}");
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Fuse {
            low,
            mid,
            high,
            weights,
            out,
            no_cache,
            cache_bytes,
            q_bits,
            chunk_w,
            chunk_h,
            chunk_c,
            stats,
        } => fuse(
            [&low, &mid, &high],
            &weights,
            &out,
            no_cache,
            cache_bytes,
            q_bits,
            (chunk_w, chunk_h, chunk_c),
            stats,
        )?,
        Command::Synth { out_dir, count, size, seed, ev } => synth(&out_dir, count, size, seed, ev)?,
        Command::Train {
            data_dir,
            out_weights,
            steps,
            lr,
            seed,
            fibs,
            channels,
            loss_csv,
        } => train(&data_dir, &out_weights, steps, lr, seed, fibs, channels, loss_csv.as_deref())?,
        Command::Metrics { reference, test } => {
            let r = io::load_image(&reference)?;
            let t = io::load_image(&test)?;
            println!("{}", MetricReport::compute(&r, &t)?);
        }
        Command::Bench {
            data_dir,
            weights,
            repeats,
            cache_bytes,
            csv,
        } => bench(&data_dir, &weights, repeats, cache_bytes, csv.as_deref())?,
        Command::Gradcheck { seed } => {
            let e = grad_check_model(&ModelConfig::micro(), seed, false)?;
            println!("max_rel_error={e:.3e}");
            return Ok(e <= GRADCHECK_TOLERANCE);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
