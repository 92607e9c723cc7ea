use rayon::prelude::*;

use super::{Real, Shape3, Tensor3};
use crate::error::{Error, Result};

/// Source taps `(i0, i1, frac)` for each output index, align-corners-false with
/// edge clamping.
fn taps<T: Real>(n_in: usize, n_out: usize) -> Vec<(usize, usize, T)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, T::lit(frac))
        })
        .collect()
}

/// Per-channel bilinear resampling to `(width, height)`.
pub fn interpolate_bilinear<T: Real>(x: &Tensor3<T>, width: usize, height: usize) -> Tensor3<T> {
    assert!(width > 0 && height > 0, "interpolation target must be non-empty");
    let s = x.shape();
    if s.w == width && s.h == height {
        return x.clone();
    }
    let tw = taps::<T>(s.w, width);
    let th = taps::<T>(s.h, height);
    let out_shape = Shape3::new(s.c, width, height);
    let mut out = Tensor3::zeros(out_shape);
    out.data_mut()
        .par_chunks_mut(width * height)
        .enumerate()
        .for_each(|(c, plane)| {
            let src = x.channel(c);
            for (w, &(w0, w1, lw)) in tw.iter().enumerate() {
                let r0 = &src[w0 * s.h..(w0 + 1) * s.h];
                let r1 = &src[w1 * s.h..(w1 + 1) * s.h];
                let row = &mut plane[w * height..(w + 1) * height];
                for (v, &(h0, h1, lh)) in row.iter_mut().zip(&th) {
                    let a = (T::one() - lh) * r0[h0] + lh * r0[h1];
                    let b = (T::one() - lh) * r1[h0] + lh * r1[h1];
                    *v = (T::one() - lw) * a + lw * b;
                }
            }
        });
    out
}

/// Adjoint of [`interpolate_bilinear`]: scatters `dy` back onto a tensor of `input` shape.
pub fn interpolate_bilinear_backward<T: Real>(input: Shape3, dy: &Tensor3<T>) -> Tensor3<T> {
    let o = dy.shape();
    if o == input {
        return dy.clone();
    }
    let tw = taps::<T>(input.w, o.w);
    let th = taps::<T>(input.h, o.h);
    let mut dx = Tensor3::zeros(input);
    for c in 0..o.c {
        for (w, &(w0, w1, lw)) in tw.iter().enumerate() {
            for (h, &(h0, h1, lh)) in th.iter().enumerate() {
                let g = dy.get(c, w, h);
                let d = dx.data_mut();
                let one = T::one();
                d[input.index(c, w0, h0)] = d[input.index(c, w0, h0)] + g * (one - lw) * (one - lh);
                d[input.index(c, w0, h1)] = d[input.index(c, w0, h1)] + g * (one - lw) * lh;
                d[input.index(c, w1, h0)] = d[input.index(c, w1, h0)] + g * lw * (one - lh);
                d[input.index(c, w1, h1)] = d[input.index(c, w1, h1)] + g * lw * lh;
            }
        }
    }
    dx
}

/// In-place `x ← x + interpolate_bilinear(attn, W, H) ⊙ x`, without
/// materializing the upsampled map. Bit-identical to the unfused form.
pub fn modulate_bilinear<T: Real>(x: &mut Tensor3<T>, attn: &Tensor3<T>) -> Result<()> {
    let s = x.shape();
    let a = attn.shape();
    if a.c != s.c {
        return Err(Error::shape("modulate", s, a));
    }
    let same = a.w == s.w && a.h == s.h;
    let tw = taps::<T>(a.w, s.w);
    let th = taps::<T>(a.h, s.h);
    x.data_mut()
        .par_chunks_mut(s.plane())
        .enumerate()
        .for_each(|(c, plane)| {
            let src = attn.channel(c);
            if same {
                plane
                    .iter_mut()
                    .zip(src)
                    .for_each(|(v, &u)| *v = *v + u * *v);
                return;
            }
            for (w, &(w0, w1, lw)) in tw.iter().enumerate() {
                let r0 = &src[w0 * a.h..(w0 + 1) * a.h];
                let r1 = &src[w1 * a.h..(w1 + 1) * a.h];
                let row = &mut plane[w * s.h..(w + 1) * s.h];
                for (v, &(h0, h1, lh)) in row.iter_mut().zip(&th) {
                    let p = (T::one() - lh) * r0[h0] + lh * r0[h1];
                    let q = (T::one() - lh) * r1[h0] + lh * r1[h1];
                    let u = (T::one() - lw) * p + lw * q;
                    *v = *v + u * *v;
                }
            }
        });
    Ok(())
}

/// Space-to-depth:`(C, W, H) -> (C·r², W/r, H/r)` with
/// `out[c·r² + a·r + b][w][h] = in[c][w·r + a][h·r + b]`.
pub fn pixel_unshuffle<T: Real>(x: &Tensor3<T>, r: usize) -> Result<Tensor3<T>> {
    let s = x.shape();
    if r == 0 || s.w % r != 0 || s.h % r != 0 {
        return Err(Error::shape(
            "pixel_unshuffle",
            s,
            format!("factor {r} must divide width and height"),
        ));
    }
    let o = Shape3::new(s.c * r * r, s.w / r, s.h / r);
    let mut out = Tensor3::zeros(o);
    out.data_mut()
        .par_chunks_mut(o.plane())
        .enumerate()
        .for_each(|(oc, plane)| {
            let (c, a, b) = (oc / (r * r), (oc / r) % r, oc % r);
            let src = x.channel(c);
            for w in 0..o.w {
                let row = &src[(w * r + a) * s.h..];
                for (h, v) in plane[w * o.h..(w + 1) * o.h].iter_mut().enumerate() {
                    *v = row[h * r + b];
                }
            }
        });
    Ok(out)
}

/// Depth-to-space, the exact inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle<T: Real>(x: &Tensor3<T>, r: usize) -> Result<Tensor3<T>> {
    let s = x.shape();
    if r == 0 || s.c % (r * r) != 0 {
        return Err(Error::shape(
            "pixel_shuffle",
            s,
            format!("factor² {} must divide channels", r * r),
        ));
    }
    let o = Shape3::new(s.c / (r * r), s.w * r, s.h * r);
    let mut out = Tensor3::zeros(o);
    out.data_mut()
        .par_chunks_mut(o.plane())
        .enumerate()
        .for_each(|(c, plane)| {
            for a in 0..r {
                for b in 0..r {
                    let src = x.channel(c * r * r + a * r + b);
                    for w in 0..s.w {
                        let row = &mut plane[(w * r + a) * o.h..(w * r + a + 1) * o.h];
                        for (h, &v) in src[w * s.h..(w + 1) * s.h].iter().enumerate() {
                            row[h * r + b] = v;
                        }
                    }
                }
            }
        });
    Ok(out)
}
