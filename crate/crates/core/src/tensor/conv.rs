use rayon::prelude::*;

use super::{Real, Shape3, SyncPtr, Tensor3};
use crate::error::{Error, Result};

/// Columns per rayon task in the 1×1 convolution.
const CONV_COLS: usize = 4096;

/// Index of a [`ConvParams`] within a model's parameter list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ConvId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kernel {
    K1,
    /// 3×3 with zero padding 1, so spatial size is preserved.
    K3,
}

impl Kernel {
    pub fn size(self) -> usize {
        match self {
            Kernel::K1 => 1,
            Kernel::K3 => 3,
        }
    }
}

/// Convolution weights `(out, in, kernel-h, kernel-w)` and per-output bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T = f32> {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kernel: Kernel,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvParams<T> {
    pub fn new(
        out_ch: usize,
        in_ch: usize,
        kernel: Kernel,
        weight: Vec<T>,
        bias: Vec<T>,
    ) -> Result<Self> {
        let k = kernel.size();
        if weight.len() != out_ch * in_ch * k * k || bias.len() != out_ch {
            return Err(Error::shape(
                "ConvParams::new",
                format!("({out_ch}, {in_ch}, {k}, {k}) + bias {out_ch}"),
                format!("{} weights + bias {}", weight.len(), bias.len()),
            ));
        }
        Ok(ConvParams {
            out_ch,
            in_ch,
            kernel,
            weight,
            bias,
        })
    }

    pub fn zeros(out_ch: usize, in_ch: usize, kernel: Kernel) -> Self {
        let k = kernel.size();
        ConvParams {
            out_ch,
            in_ch,
            kernel,
            weight: vec![T::zero(); out_ch * in_ch * k * k],
            bias: vec![T::zero(); out_ch],
        }
    }

    /// 1×1 identity map on `n` channels.
    pub fn identity(n: usize) -> Self {
        let mut p = Self::zeros(n, n, Kernel::K1);
        for i in 0..n {
            p.weight[i * n + i] = T::one();
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.out_ch, self.in_ch, self.kernel)
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Weight dims in `(out, in, kernel-h, kernel-w)` order.
    pub fn weight_dims(&self) -> [usize; 4] {
        let k = self.kernel.size();
        [self.out_ch, self.in_ch, k, k]
    }

    #[inline]
    pub fn w(&self, o: usize, i: usize, kh: usize, kw: usize) -> T {
        let k = self.kernel.size();
        self.weight[((o * self.in_ch + i) * k + kh) * k + kw]
    }

    pub fn cast<U: Real>(&self) -> ConvParams<U> {
        ConvParams {
            out_ch: self.out_ch,
            in_ch: self.in_ch,
            kernel: self.kernel,
            weight: self.weight.iter().map(|&v| U::lit(v.as_f64())).collect(),
            bias: self.bias.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Valid output columns for a kernel tap displaced by `d` along an axis of length `n`.
#[inline]
fn tap_range(n: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { (-d) as usize } else { 0 };
    let hi = if d > 0 { n.saturating_sub(d as usize) } else { n };
    (lo, hi.max(lo))
}

/// Cross-correlation plus bias. 3×3 kernels use zero padding 1.
pub fn conv<T: Real>(x: &Tensor3<T>, p: &ConvParams<T>) -> Result<Tensor3<T>> {
    let s = x.shape();
    if s.c != p.in_ch {
        return Err(Error::shape(
            "conv",
            s,
            format!("weights ({}, {}, {k}, {k})", p.out_ch, p.in_ch, k = p.kernel.size()),
        ));
    }
    let out_shape = Shape3::new(p.out_ch, s.w, s.h);
    let plane = s.plane();
    let mut data = Vec::with_capacity(out_shape.len());
    for &b in &p.bias {
        data.extend(std::iter::repeat(b).take(plane));
    }
    let out = SyncPtr(data.as_mut_ptr());
    let xp = x.data().as_ptr() as usize;

    match p.kernel {
        Kernel::K1 => {
            let n_tasks = plane.div_ceil(CONV_COLS);
            (0..n_tasks).into_par_iter().for_each(|t| {
                let out = out;
                let c0 = t * CONV_COLS;
                let n = CONV_COLS.min(plane - c0);
                // SAFETY: tasks write disjoint column ranges of the output.
                unsafe {
                    T::gemm(
                        p.out_ch,
                        p.in_ch,
                        n,
                        T::one(),
                        p.weight.as_ptr(),
                        p.in_ch as isize,
                        1,
                        (xp as *const T).add(c0),
                        plane as isize,
                        1,
                        T::one(),
                        out.0.add(c0),
                        plane as isize,
                        1,
                    );
                }
            });
        }
        Kernel::K3 => {
            let kk = 9isize;
            (0..s.w).into_par_iter().for_each(|w| {
                let out = out;
                for kw in 0..3 {
                    let wi = w as isize + kw as isize - 1;
                    if wi < 0 || wi >= s.w as isize {
                        continue;
                    }
                    for kh in 0..3 {
                        let d = kh as isize - 1;
                        let (lo, hi) = tap_range(s.h, d);
                        if hi == lo {
                            continue;
                        }
                        // SAFETY: each task owns output row `w` across all channels.
                        unsafe {
                            T::gemm(
                                p.out_ch,
                                p.in_ch,
                                hi - lo,
                                T::one(),
                                p.weight.as_ptr().add(kh * 3 + kw),
                                p.in_ch as isize * kk,
                                kk,
                                (xp as *const T)
                                    .offset(wi * s.h as isize + lo as isize + d),
                                plane as isize,
                                1,
                                T::one(),
                                out.0.add(w * s.h + lo),
                                plane as isize,
                                1,
                            );
                        }
                    }
                }
            });
        }
    }
    Tensor3::new(out_shape, data)
}

/// Vector-Jacobian product of [`conv`]: returns `(dL/dx, dL/dparams)` given `dL/dy`.
pub fn conv_backward<T: Real>(
    x: &Tensor3<T>,
    p: &ConvParams<T>,
    dy: &Tensor3<T>,
) -> (Tensor3<T>, ConvParams<T>) {
    let s = x.shape();
    let plane = s.plane();
    debug_assert_eq!(dy.shape(), Shape3::new(p.out_ch, s.w, s.h));
    let mut dx = Tensor3::zeros(s);
    let mut dp = p.zeros_like();

    for (o, db) in dp.bias.iter_mut().enumerate() {
        *db = dy.channel(o).iter().copied().sum();
    }

    let xd = x.data().as_ptr();
    let dyd = dy.data().as_ptr();
    match p.kernel {
        Kernel::K1 => unsafe {
            // dx = Wᵀ dy
            T::gemm(
                p.in_ch,
                p.out_ch,
                plane,
                T::one(),
                p.weight.as_ptr(),
                1,
                p.in_ch as isize,
                dyd,
                plane as isize,
                1,
                T::zero(),
                dx.data_mut().as_mut_ptr(),
                plane as isize,
                1,
            );
            // dW = dy xᵀ
            T::gemm(
                p.out_ch,
                plane,
                p.in_ch,
                T::one(),
                dyd,
                plane as isize,
                1,
                xd,
                1,
                plane as isize,
                T::zero(),
                dp.weight.as_mut_ptr(),
                p.in_ch as isize,
                1,
            );
        },
        Kernel::K3 => {
            let kk = 9isize;
            let dxd = dx.data_mut().as_mut_ptr();
            for w in 0..s.w {
                for kw in 0..3 {
                    let wi = w as isize + kw as isize - 1;
                    if wi < 0 || wi >= s.w as isize {
                        continue;
                    }
                    for kh in 0..3 {
                        let d = kh as isize - 1;
                        let (lo, hi) = tap_range(s.h, d);
                        if hi == lo {
                            continue;
                        }
                        let off = kh * 3 + kw;
                        let in_off = wi * s.h as isize + lo as isize + d;
                        let out_off = w * s.h + lo;
                        unsafe {
                            T::gemm(
                                p.in_ch,
                                p.out_ch,
                                hi - lo,
                                T::one(),
                                p.weight.as_ptr().add(off),
                                kk,
                                p.in_ch as isize * kk,
                                dyd.add(out_off),
                                plane as isize,
                                1,
                                T::one(),
                                dxd.offset(in_off),
                                plane as isize,
                                1,
                            );
                            T::gemm(
                                p.out_ch,
                                hi - lo,
                                p.in_ch,
                                T::one(),
                                dyd.add(out_off),
                                plane as isize,
                                1,
                                xd.offset(in_off),
                                1,
                                plane as isize,
                                T::one(),
                                dp.weight.as_mut_ptr().add(off),
                                p.in_ch as isize * kk,
                                kk,
                            );
                        }
                    }
                }
            }
        }
    }
    (dx, dp)
}
