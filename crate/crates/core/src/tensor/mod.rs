//! Dense rank-3 feature maps and the kernels the fusion network is built from.
//!
//! Layout is row-major `(channels, width, height)` with height innermost. Every
//! kernel here is a pure function of its inputs; the reverse-mode helpers used
//! by [`crate::autodiff`] live next to their forward kernels.

mod conv;
mod resample;

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rayon::prelude::*;

use crate::error::{Error, Result};

pub use conv::{conv, conv_backward, ConvId, ConvParams, Kernel};
pub use resample::{
    interpolate_bilinear, interpolate_bilinear_backward, modulate_bilinear, pixel_shuffle, pixel_unshuffle,
};

/// Elements per rayon task for elementwise passes. Fixed so that results never
/// depend on the thread count.
pub(crate) const PAR_CHUNK: usize = 1 << 15;

/// Floating point element type. Inference runs in `f32`; gradient checks run
/// the very same kernels in `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn erf(self) -> Self;

    /// `C <- alpha * A B + beta * C` with arbitrary strides (see `matrixmultiply`).
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing `m×k`, `k×n` and
    /// `m×n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal out of range")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Raw pointer that may cross rayon task boundaries. Callers guarantee that
/// concurrent tasks write disjoint elements.
#[derive(Clone, Copy)]
pub(crate) struct SyncPtr<T>(pub *mut T);
unsafe impl<T> Send for SyncPtr<T> {}
unsafe impl<T> Sync for SyncPtr<T> {}

/// One of the three tensor axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    Channel,
    Width,
    Height,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Channel, Axis::Width, Axis::Height];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape3 {
    pub c: usize,
    pub w: usize,
    pub h: usize,
}

impl Shape3 {
    pub const fn new(c: usize, w: usize, h: usize) -> Self {
        Shape3 { c, w, h }
    }

    pub const fn len(&self) -> usize {
        self.c * self.w * self.h
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.w * self.h
    }

    pub fn dim(&self, axis: Axis) -> usize {
        match axis {
            Axis::Channel => self.c,
            Axis::Width => self.w,
            Axis::Height => self.h,
        }
    }

    pub fn with_dim(mut self, axis: Axis, n: usize) -> Self {
        match axis {
            Axis::Channel => self.c = n,
            Axis::Width => self.w = n,
            Axis::Height => self.h = n,
        }
        self
    }

    #[inline]
    pub fn index(&self, c: usize, w: usize, h: usize) -> usize {
        (c * self.w + w) * self.h + h
    }
}

impl fmt::Display for Shape3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.c, self.w, self.h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Sigmoid,
    /// Exact `x·Φ(x)`.
    Gelu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Mul,
}

/// Dense `(C, W, H)` tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor3<T = f32> {
    shape: Shape3,
    data: Vec<T>,
}

impl<T: Real> fmt::Debug for Tensor3<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor3{}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor3<T> {
    pub fn new(shape: Shape3, data: Vec<T>) -> Result<Self> {
        if shape.c == 0 || shape.w == 0 || shape.h == 0 {
            return Err(Error::InvalidInput(format!(
                "tensor dimensions must be >= 1, got {shape}"
            )));
        }
        if data.len() != shape.len() {
            return Err(Error::shape(
                "Tensor3::new",
                shape,
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor3 { shape, data })
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape3, value: T) -> Self {
        assert!(shape.len() > 0, "tensor dimensions must be >= 1");
        Tensor3 {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.c {
            for w in 0..shape.w {
                for h in 0..shape.h {
                    data.push(f(c, w, h));
                }
            }
        }
        Tensor3 { shape, data }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, c: usize, w: usize, h: usize) -> T {
        self.data[self.shape.index(c, w, h)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, w: usize, h: usize, v: T) {
        let i = self.shape.index(c, w, h);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.shape.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn cast<U: Real>(&self) -> Tensor3<U> {
        Tensor3 {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(T) -> T + Sync) -> Self {
        let mut out = self.clone();
        out.map_in_place(f);
        out
    }

    pub fn map_in_place(&mut self, f: impl Fn(T) -> T + Sync) {
        self.data
            .par_chunks_mut(PAR_CHUNK)
            .for_each(|chunk| chunk.iter_mut().for_each(|v| *v = f(*v)));
    }

    /// Global average pooling: `(C, W, H) -> (C, 1, 1)`.
    pub fn gap(&self) -> Self {
        let n = self.shape.plane() as f64;
        let data = (0..self.shape.c)
            .map(|c| {
                let s: f64 = self.channel(c).iter().map(|v| v.as_f64()).sum();
                T::lit(s / n)
            })
            .collect();
        Tensor3 {
            shape: Shape3::new(self.shape.c, 1, 1),
            data,
        }
    }

    pub fn activation(&self, kind: Activation) -> Self {
        let mut out = self.clone();
        out.activation_in_place(kind);
        out
    }

    pub fn activation_in_place(&mut self, kind: Activation) {
        match kind {
            Activation::Relu => self.map_in_place(|x| x.max(T::zero())),
            Activation::Sigmoid => self.map_in_place(sigmoid),
            Activation::Gelu => self.map_in_place(gelu),
            Activation::Identity => {}
        }
    }

    /// Rolls the axis order `(C, W, H) -> (W, H, C)`, relaying the data out so
    /// the new axis 0 is outermost.
    pub fn permute_roll(&self) -> Self {
        let Shape3 { c, w, h } = self.shape;
        let out_shape = Shape3::new(w, h, c);
        let mut data = vec![T::zero(); self.len()];
        // out[wi][hi][ci] = in[ci][wi][hi]
        for wi in 0..w {
            for hi in 0..h {
                let dst = &mut data[(wi * h + hi) * c..(wi * h + hi + 1) * c];
                for (ci, d) in dst.iter_mut().enumerate() {
                    *d = self.data[(ci * w + wi) * h + hi];
                }
            }
        }
        Tensor3 {
            shape: out_shape,
            data,
        }
    }

    /// Inverse of [`Tensor3::permute_roll`].
    pub fn permute_unroll(&self) -> Self {
        self.permute_roll().permute_roll()
    }

    fn check_broadcast(&self, other: &Self, op: &'static str) -> Result<bool> {
        if self.shape == other.shape {
            Ok(false)
        } else if other.shape.w == 1 && other.shape.h == 1 && other.shape.c == self.shape.c {
            Ok(true)
        } else {
            Err(Error::shape(op, self.shape, other.shape))
        }
    }

    /// `self op= other`, where `other` either matches `self` or has shape
    /// `(C, 1, 1)` and is broadcast over every spatial position.
    pub fn combine_assign(&mut self, other: &Self, op: ElementwiseOp) -> Result<()> {
        let broadcast = self.check_broadcast(other, "elementwise")?;
        let f = match op {
            ElementwiseOp::Add => |a: T, b: T| a + b,
            ElementwiseOp::Mul => |a: T, b: T| a * b,
        };
        if broadcast {
            let plane = self.shape.plane();
            for (chunk, &b) in self.data.chunks_mut(plane).zip(&other.data) {
                chunk.iter_mut().for_each(|a| *a = f(*a, b));
            }
        } else {
            self.data
                .par_chunks_mut(PAR_CHUNK)
                .zip(other.data.par_chunks(PAR_CHUNK))
                .for_each(|(a, b)| a.iter_mut().zip(b).for_each(|(a, &b)| *a = f(*a, b)));
        }
        Ok(())
    }

    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.map(|x| x.max(lo).min(hi))
    }

    /// Copies `len` indices starting at `start` along `axis`.
    pub fn slice(&self, axis: Axis, start: usize, len: usize) -> Self {
        let s = self.shape;
        assert!(len > 0 && start + len <= s.dim(axis), "slice out of range");
        let out_shape = s.with_dim(axis, len);
        let data = match axis {
            Axis::Channel => self.data[start * s.plane()..(start + len) * s.plane()].to_vec(),
            Axis::Width => {
                let mut data = Vec::with_capacity(out_shape.len());
                for c in 0..s.c {
                    let base = s.index(c, start, 0);
                    data.extend_from_slice(&self.data[base..base + len * s.h]);
                }
                data
            }
            Axis::Height => {
                let mut data = Vec::with_capacity(out_shape.len());
                for row in self.data.chunks(s.h) {
                    data.extend_from_slice(&row[start..start + len]);
                }
                data
            }
        };
        Tensor3 {
            shape: out_shape,
            data,
        }
    }

    /// Writes (or adds) `block` into `self` at offset `start` along `axis`.
    pub fn write_block(&mut self, axis: Axis, start: usize, block: &Self, accumulate: bool) {
        let s = self.shape;
        let b = block.shape;
        let len = b.dim(axis);
        assert!(
            start + len <= s.dim(axis) && b.with_dim(axis, s.dim(axis)) == s,
            "block {b} does not fit {s} at {start} along {axis:?}"
        );
        let put = |dst: &mut [T], src: &[T]| {
            if accumulate {
                dst.iter_mut().zip(src).for_each(|(d, &v)| *d = *d + v);
            } else {
                dst.copy_from_slice(src);
            }
        };
        match axis {
            Axis::Channel => {
                let p = s.plane();
                put(&mut self.data[start * p..(start + len) * p], &block.data);
            }
            Axis::Width => {
                let run = len * s.h;
                for c in 0..s.c {
                    let base = s.index(c, start, 0);
                    put(
                        &mut self.data[base..base + run],
                        &block.data[c * run..(c + 1) * run],
                    );
                }
            }
            Axis::Height => {
                for (dst, src) in self.data.chunks_mut(s.h).zip(block.data.chunks(len)) {
                    put(&mut dst[start..start + len], src);
                }
            }
        }
    }

    /// Concatenates tensors along `axis`; all other dimensions must agree.
    pub fn concat(axis: Axis, parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("concat of zero tensors".into()))?;
        let mut total = 0;
        for p in parts {
            if p.shape.with_dim(axis, 1) != first.shape.with_dim(axis, 1) {
                return Err(Error::shape("concat", first.shape, p.shape));
            }
            total += p.shape.dim(axis);
        }
        let mut out = Self::zeros(first.shape.with_dim(axis, total));
        let mut offset = 0;
        for p in parts {
            out.write_block(axis, offset, p, false);
            offset += p.shape.dim(axis);
        }
        Ok(out)
    }
}

/// Free-function form of [`Tensor3::combine_assign`].
pub fn elementwise<T: Real>(a: &Tensor3<T>, b: &Tensor3<T>, op: ElementwiseOp) -> Result<Tensor3<T>> {
    let mut out = a.clone();
    out.combine_assign(b, op)?;
    Ok(out)
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// `d gelu / dx = Φ(x) + x φ(x)`.
#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Splits `0..n` into consecutive `(start, len)` blocks of at most `chunk`.
pub fn block_ranges(n: usize, chunk: usize) -> impl Iterator<Item = (usize, usize)> {
    let chunk = chunk.max(1);
    (0..n).step_by(chunk).map(move |s| (s, chunk.min(n - s)))
}
