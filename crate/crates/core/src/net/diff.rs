//! The network recorded on a [`Tape`], for training and gradient checks.
//!
//! Mirrors the eager engine operation for operation, so both produce the same
//! values (the cache is never involved here).

use super::config::{FibVariant, LfeMode, ModelConfig, Residual};
use super::weights::Layout;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{block_ranges, Activation, Axis, ConvId, Real, Tensor3};

pub fn lfe<T: Real>(tape: &mut Tape<T>, x: Var, ids: (ConvId, ConvId), mode: LfeMode) -> Result<Var> {
    let h = tape.conv(x, ids.0)?;
    let h = tape.activation(h, Activation::Relu);
    let w = tape.conv(h, ids.1)?;
    let w = tape.activation(w, Activation::Sigmoid);
    let m = match mode {
        LfeMode::PooledGate => tape.gap(x),
        LfeMode::BlockGate => x,
    };
    tape.mul(w, m)
}

fn chunk(config: &ModelConfig, axis: Axis) -> usize {
    match axis {
        Axis::Channel => config.effective_chunk_c(),
        Axis::Width => config.chunk_w,
        Axis::Height => config.chunk_h,
    }
}

pub fn scan<T: Real>(tape: &mut Tape<T>, config: &ModelConfig, fib: usize, x: Var) -> Result<Var> {
    let layout = Layout::new(config);
    let shape = tape.shape(x);
    let mut total: Option<Var> = None;
    for axis in Axis::ALL {
        let ids = layout.lfe(fib, axis);
        let mut parts = Vec::new();
        for (start, len) in block_ranges(shape.dim(axis), chunk(config, axis)) {
            let b = if len == shape.dim(axis) {
                x
            } else {
                tape.slice(x, axis, start, len)
            };
            parts.push(lfe(tape, b, ids, config.lfe_mode)?);
        }
        let branch = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat(&parts, axis)?
        };
        total = Some(match total {
            None => branch,
            Some(t) => tape.add(t, branch)?,
        });
    }
    Ok(total.expect("three branches"))
}

pub fn drtm<T: Real>(tape: &mut Tape<T>, config: &ModelConfig, fib: usize, x: Var) -> Result<Var> {
    let layout = Layout::new(config);
    let s = tape.shape(x);
    let mut t = tape.interpolate(x, config.drtm_w, config.drtm_h);
    for axis in Axis::ALL {
        t = tape.conv(t, layout.drtm(fib, axis))?;
        t = tape.activation(t, Activation::Gelu);
        t = tape.permute_roll(t);
    }
    let up = tape.interpolate(t, s.w, s.h);
    let m = tape.mul(up, x)?;
    tape.add(x, m)
}

pub fn fib<T: Real>(tape: &mut Tape<T>, config: &ModelConfig, i: usize, x: Var) -> Result<Var> {
    match config.variant {
        FibVariant::Full => {
            let d = scan(tape, config, i, x)?;
            drtm(tape, config, i, d)
        }
        FibVariant::NoDaem => drtm(tape, config, i, x),
        FibVariant::NoDrtm => scan(tape, config, i, x),
    }
}

/// Records the whole forward pass on three exposures and returns the output.
pub fn forward<T: Real>(tape: &mut Tape<T>, config: &ModelConfig, frames: [&Tensor3<T>; 3]) -> Result<Var> {
    let s = frames[1].shape();
    for f in frames {
        if f.shape() != s || s.c != 3 {
            return Err(Error::shape("forward", s, f.shape()));
        }
    }
    let layout = Layout::new(config);
    let xs: Vec<Var> = frames.iter().map(|f| tape.input((*f).clone())).collect();
    let cat = tape.concat(&xs, Axis::Channel)?;
    let d = tape.pixel_unshuffle(cat, config.downsample)?;
    let f0 = tape.conv(d, layout.down())?;
    let mut f = f0;
    for i in 0..config.num_fibs {
        f = fib(tape, config, i, f)?;
    }
    let ff = match config.residual {
        Residual::Global => tape.add(f, f0)?,
        Residual::None => f,
    };
    let u = tape.conv(ff, layout.up())?;
    let u = tape.pixel_shuffle(u, config.downsample)?;
    let y = tape.mul(u, xs[1])?;
    Ok(tape.clamp(y, T::zero(), T::one()))
}
