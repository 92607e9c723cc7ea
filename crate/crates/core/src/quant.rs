//! Per-tensor affine quantization.
//!
//! `s = (t_max - t_min) / (q_max - q_min)`, `zp = round(q_min - t_min / s)`,
//! `code = clamp(round(t / s + zp))` and `t' = s · (code - zp)`. The fitted
//! range always contains zero, so zero is represented exactly and the
//! reconstruction error of any in-range value is at most `s / 2`.

use crate::error::{Error, Result};
use crate::tensor::{Shape3, Tensor3};

/// Serialized header size: shape (3 × u32), scale/t_min/t_max (3 × f32),
/// zero point/q_min/q_max (3 × i32).
pub const HEADER_BYTES: usize = 36;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
    pub q_min: i32,
    pub q_max: i32,
    pub t_min: f32,
    pub t_max: f32,
}

/// Code range of an unsigned `bits`-wide quantizer (1..=8).
pub fn code_range(bits: u32) -> Result<(i32, i32)> {
    if !(1..=8).contains(&bits) {
        return Err(Error::InvalidInput(format!(
            "quantization bit width must be in 1..=8, got {bits}"
        )));
    }
    Ok((0, (1 << bits) - 1))
}

fn check_range(q_min: i32, q_max: i32) -> Result<()> {
    if q_min >= q_max || q_min < 0 || q_max > u8::MAX as i32 {
        return Err(Error::InvalidInput(format!(
            "quantization range [{q_min}, {q_max}] must satisfy 0 <= q_min < q_max <= 255"
        )));
    }
    Ok(())
}

/// Fits scale and zero point to `t`, widening the range to include zero.
pub fn fit_params(t: &Tensor3, q_min: i32, q_max: i32) -> Result<QuantParams> {
    fit_slice(t.data(), q_min, q_max)
}

pub(crate) fn fit_slice(data: &[f32], q_min: i32, q_max: i32) -> Result<QuantParams> {
    check_range(q_min, q_max)?;
    let (lo, hi, finite) = min_max(data);
    if !finite {
        let v = data.iter().find(|v| !v.is_finite()).copied().unwrap_or(f32::NAN);
        return Err(Error::InvalidInput(format!(
            "cannot quantize non-finite value {v}"
        )));
    }
    let (t_min, mut t_max) = (lo as f64, hi as f64);
    if t_max - t_min < 1e-12 {
        t_max = t_min + 1.0;
    }
    let levels = (q_max - q_min) as f64;
    let scale = (t_max - t_min) / levels;
    // q_min - t_min / s, written without the rounded scale so that exact
    // midpoints (e.g. 127.5 for a symmetric range) are not perturbed.
    let zp = (q_min as f64 - t_min * levels / (t_max - t_min)).round();
    let zero_point = (zp as i32).clamp(q_min, q_max);
    Ok(QuantParams {
        scale: scale as f32,
        zero_point,
        q_min,
        q_max,
        t_min: t_min as f32,
        t_max: t_max as f32,
    })
}

impl QuantParams {
    pub fn validate(&self) -> Result<()> {
        check_range(self.q_min, self.q_max)?;
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Corrupt(format!("non-positive scale {}", self.scale)));
        }
        if !(self.q_min..=self.q_max).contains(&self.zero_point) {
            return Err(Error::Corrupt(format!(
                "zero point {} outside [{}, {}]",
                self.zero_point, self.q_min, self.q_max
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn quantize(&self, v: f32) -> u8 {
        quantize_one(v, 1.0 / self.scale as f64, self.zero_point as f64, self.q_min as f64, self.q_max as f64)
    }

    #[inline]
    pub fn dequantize(&self, code: u8) -> f32 {
        self.scale * (code as i32 - self.zero_point) as f32
    }
}

/// Quantized payload: one code byte per element.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Shape3,
    pub params: QuantParams,
    pub codes: Vec<u8>,
}

pub fn encode(t: &Tensor3, params: &QuantParams) -> QuantizedTensor {
    let mut codes = Vec::with_capacity(t.len());
    encode_slice(t.data(), params, &mut codes);
    QuantizedTensor {
        shape: t.shape(),
        params: *params,
        codes,
    }
}

/// `clamp(round(v / s + zp))` with rounding half away from zero, given
/// `inv_s = 1 / s` in f64 (within an ulp of the quotient, far below the f32
/// input resolution). Clamping first keeps the value in `[0, 255]`, where that
/// rounding is `trunc(x + 0.5)`.
#[inline(always)]
fn quantize_one(v: f32, inv_s: f64, zp: f64, lo: f64, hi: f64) -> u8 {
    // `max` maps NaN to `lo`, so x is finite and within [0.5, 255.5].
    let x = (v as f64 * inv_s + zp).max(lo).min(hi) + 0.5;
    // SAFETY: see above; 0 <= lo <= hi <= 255.
    unsafe { x.to_int_unchecked::<u8>() }
}

pub(crate) fn encode_slice(data: &[f32], params: &QuantParams, out: &mut Vec<u8>) {
    out.clear();
    out.resize(data.len(), 0);
    encode_into(data, params, out);
}

// The hot loops below are written lane-wise so they vectorize, and are
// compiled a second time for AVX2 where the CPU has it.

const LANES: usize = 16;

/// `(min(0, data), max(0, data), all finite)`.
#[inline(always)]
fn min_max_body(data: &[f32]) -> (f32, f32, bool) {
    let mut lo = [0f32; LANES];
    let mut hi = [0f32; LANES];
    // v·0 is ±0 for finite v and NaN otherwise.
    let mut poison = [0f32; LANES];
    let chunks = data.chunks_exact(LANES);
    let rest = chunks.remainder();
    for ch in chunks {
        for i in 0..LANES {
            let v = ch[i];
            lo[i] = if v < lo[i] { v } else { lo[i] };
            hi[i] = if v > hi[i] { v } else { hi[i] };
            poison[i] += v * 0.0;
        }
    }
    for (i, &v) in rest.iter().enumerate() {
        lo[i] = if v < lo[i] { v } else { lo[i] };
        hi[i] = if v > hi[i] { v } else { hi[i] };
        poison[i] += v * 0.0;
    }
    let lo = lo.iter().fold(0f32, |a, &b| a.min(b));
    let hi = hi.iter().fold(0f32, |a, &b| a.max(b));
    (lo, hi, poison.iter().all(|p| *p == 0.0))
}

#[inline(always)]
fn encode_body(data: &[f32], params: &QuantParams, out: &mut [u8]) {
    let (s, zp) = (1.0 / params.scale as f64, params.zero_point as f64);
    let (lo, hi) = (params.q_min as f64, params.q_max as f64);
    for (o, &v) in out.iter_mut().zip(data) {
        *o = quantize_one(v, s, zp, lo, hi);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn min_max_avx2(data: &[f32]) -> (f32, f32, bool) {
    min_max_body(data)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn encode_avx2(data: &[f32], params: &QuantParams, out: &mut [u8]) {
    encode_body(data, params, out)
}

fn min_max(data: &[f32]) -> (f32, f32, bool) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2.
        return unsafe { min_max_avx2(data) };
    }
    min_max_body(data)
}

fn encode_into(data: &[f32], params: &QuantParams, out: &mut [u8]) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2.
        return unsafe { encode_avx2(data, params, out) };
    }
    encode_body(data, params, out)
}

/// `fit_params` followed by `encode`.
pub fn quantize(t: &Tensor3, q_min: i32, q_max: i32) -> Result<QuantizedTensor> {
    let params = fit_params(t, q_min, q_max)?;
    Ok(encode(t, &params))
}

pub fn decode(q: &QuantizedTensor) -> Result<Tensor3> {
    let mut out = Tensor3::zeros(q.shape);
    decode_into(q, &mut out)?;
    Ok(out)
}

/// Decodes into an existing tensor of the payload's shape, reusing its buffer.
pub fn decode_into(q: &QuantizedTensor, out: &mut Tensor3) -> Result<()> {
    if q.codes.len() != q.shape.len() {
        return Err(Error::Corrupt(format!(
            "payload holds {} codes, shape {} needs {}",
            q.codes.len(),
            q.shape,
            q.shape.len()
        )));
    }
    if out.shape() != q.shape {
        return Err(Error::shape("decode", q.shape, out.shape()));
    }
    q.params.validate()?;
    let (s, zp) = (q.params.scale, q.params.zero_point);
    for (o, &c) in out.data_mut().iter_mut().zip(&q.codes) {
        *o = s * (c as i32 - zp) as f32;
    }
    Ok(())
}

impl QuantizedTensor {
    /// Size of the serialized form.
    pub fn byte_size(&self) -> usize {
        HEADER_BYTES + self.codes.len()
    }

    /// Little-endian layout: shape, scale, t_min, t_max, zero point, q_min, q_max, codes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_size());
        for d in [self.shape.c, self.shape.w, self.shape.h] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in [self.params.scale, self.params.t_min, self.params.t_max] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in [self.params.zero_point, self.params.q_min, self.params.q_max] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.codes);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::Corrupt(format!(
                "quantized tensor needs a {HEADER_BYTES}-byte header, got {} bytes",
                bytes.len()
            )));
        }
        let word = |i: usize| -> [u8; 4] { bytes[i * 4..i * 4 + 4].try_into().unwrap() };
        let dim = |i| u32::from_le_bytes(word(i)) as usize;
        let shape = Shape3::new(dim(0), dim(1), dim(2));
        let params = QuantParams {
            scale: f32::from_le_bytes(word(3)),
            t_min: f32::from_le_bytes(word(4)),
            t_max: f32::from_le_bytes(word(5)),
            zero_point: i32::from_le_bytes(word(6)),
            q_min: i32::from_le_bytes(word(7)),
            q_max: i32::from_le_bytes(word(8)),
        };
        params.validate()?;
        let codes = bytes[HEADER_BYTES..].to_vec();
        if codes.len() != shape.len() {
            return Err(Error::Corrupt(format!(
                "payload holds {} codes, shape {shape} needs {}",
                codes.len(),
                shape.len()
            )));
        }
        if let Some(&c) = codes
            .iter()
            .find(|&&c| (c as i32) < params.q_min || (c as i32) > params.q_max)
        {
            return Err(Error::Corrupt(format!("code {c} outside quantization range")));
        }
        Ok(QuantizedTensor {
            shape,
            params,
            codes,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_tensor;
    use proptest::prelude::*;

    fn linspace(lo: f32, hi: f32, n: usize) -> Tensor3 {
        let data = (0..n)
            .map(|i| lo + (hi - lo) * i as f32 / (n - 1) as f32)
            .collect();
        Tensor3::new(Shape3::new(1, 1, n), data).unwrap()
    }

    #[test]
    fn symmetric_unit_range() {
        // s = 2/255; zp = round(0 + 1 / (2/255)) = round(127.5) = 128.
        let p = fit_params(&linspace(-1.0, 1.0, 101), 0, 255).unwrap();
        assert!((p.scale as f64 - 2.0 / 255.0).abs() < 1e-9);
        assert!((p.scale - 0.0078431).abs() < 1e-7);
        assert_eq!(p.zero_point, 128);
    }

    #[test]
    fn all_zero_tensor_widens_range() {
        let p = fit_params(&Tensor3::zeros(Shape3::new(2, 3, 3)), 0, 255).unwrap();
        assert_eq!((p.t_min, p.t_max), (0.0, 1.0));
        assert!((p.scale as f64 - 1.0 / 255.0).abs() < 1e-9);
        assert_eq!(p.zero_point, 0);
    }

    #[test]
    fn nonnegative_range() {
        let p = fit_params(&linspace(0.0, 2.55, 50), 0, 255).unwrap();
        assert!((p.scale - 0.01).abs() < 1e-7);
        assert_eq!(p.zero_point, 0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut t = Tensor3::zeros(Shape3::new(1, 1, 3));
        t.data_mut()[1] = f32::NAN;
        assert!(matches!(fit_params(&t, 0, 255), Err(Error::InvalidInput(_))));
        assert!(fit_params(&Tensor3::zeros(Shape3::new(1, 1, 1)), 5, 5).is_err());
        assert!(code_range(0).is_err());
        assert_eq!(code_range(8).unwrap(), (0, 255));
        assert_eq!(code_range(4).unwrap(), (0, 15));
    }

    #[test]
    fn zero_maps_to_zero_point_and_back() {
        let t = linspace(-1.0, 1.0, 11);
        let p = fit_params(&t, 0, 255).unwrap();
        let zeros = Tensor3::zeros(t.shape());
        let q = encode(&zeros, &p);
        assert!(q.codes.iter().all(|&c| c == 128));
        assert!(decode(&q).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(p.dequantize(p.zero_point as u8), 0.0);
    }

    #[test]
    fn range_endpoint_maps_to_q_max() {
        let t = linspace(0.0, 3.0, 7);
        let p = fit_params(&t, 0, 255).unwrap();
        assert_eq!(p.quantize(p.t_max), 255);
    }

    /// Half-away-from-zero rounding done with floor on the magnitude.
    fn scalar_code(v: f32, p: &QuantParams) -> u8 {
        let x = v as f64 / p.scale as f64 + p.zero_point as f64;
        let r = x.signum() * (x.abs() + 0.5).floor();
        r.max(p.q_min as f64).min(p.q_max as f64) as u8
    }

    #[test]
    fn codes_match_scalar_oracle() {
        let t = random_tensor(Shape3::new(3, 9, 11), 17, 4.0);
        let p = fit_params(&t, 0, 255).unwrap();
        let q = encode(&t, &p);
        for (&v, &c) in t.data().iter().zip(&q.codes) {
            assert_eq!(c, scalar_code(v, &p));
        }
        // Values beyond the fitted range are clamped.
        assert_eq!(p.quantize(1e6), 255);
        assert_eq!(p.quantize(-1e6), 0);
    }

    #[test]
    fn round_trip_bound_over_one_rounding_period() {
        // Sweep densely across one quantization step around several lattice points.
        let t = linspace(-1.0, 1.0, 64);
        let p = fit_params(&t, 0, 255).unwrap();
        let s = p.scale;
        for k in [-100i32, -1, 0, 1, 57, 126] {
            for j in 0..=1000 {
                let v = s * k as f32 + s * (j as f32 / 1000.0 - 0.5);
                if v < p.t_min || v > p.t_max {
                    continue;
                }
                let back = p.dequantize(p.quantize(v));
                assert!((v - back).abs() <= s / 2.0 + 1e-6, "v = {v}");
            }
        }
    }

    #[test]
    fn decode_rejects_length_mismatch() {
        let mut q = quantize(&linspace(-1.0, 2.0, 10), 0, 255).unwrap();
        q.codes.pop();
        assert!(matches!(decode(&q), Err(Error::Corrupt(_))));
    }

    #[test]
    fn compression_ratio_is_four() {
        let t = random_tensor(Shape3::new(4, 16, 16), 2, 1.0);
        let q = quantize(&t, 0, 255).unwrap();
        assert_eq!((t.len() * std::mem::size_of::<f32>()) / q.codes.len(), 4);
        assert_eq!(q.byte_size(), HEADER_BYTES + t.len());
    }

    #[test]
    fn decode_into_reuses_buffer() {
        let t = random_tensor(Shape3::new(2, 3, 5), 9, 2.0);
        let q = quantize(&t, 0, 255).unwrap();
        let mut out = t.clone();
        decode_into(&q, &mut out).unwrap();
        assert_eq!(out, decode(&q).unwrap());
        let mut wrong = Tensor3::zeros(Shape3::new(2, 5, 3));
        assert!(matches!(decode_into(&q, &mut wrong), Err(Error::Shape { .. })));
    }

    #[test]
    fn serialized_layout() {
        let t = linspace(-1.0, 1.0, 6);
        let q = quantize(&t, 0, 255).unwrap();
        let bytes = q.to_bytes();
        assert_eq!(bytes.len(), 36 + 6);
        assert_eq!(&bytes[0..12], &[1, 0, 0, 0, 1, 0, 0, 0, 6, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &q.params.scale.to_le_bytes());
        assert_eq!(&bytes[24..28], &128i32.to_le_bytes());
        assert_eq!(QuantizedTensor::from_bytes(&bytes).unwrap(), q);
        assert!(QuantizedTensor::from_bytes(&bytes[..20]).is_err());
        assert!(QuantizedTensor::from_bytes(&bytes[..40]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_within_half_step(values in prop::collection::vec(-50.0f32..50.0, 1..200)) {
            let n = values.len();
            let t = Tensor3::new(Shape3::new(1, 1, n), values).unwrap();
            let q = quantize(&t, 0, 255).unwrap();
            let back = decode(&q).unwrap();
            let s = q.params.scale;
            for (&a, &b) in t.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= s / 2.0 + 1e-6 + a.abs() * 1e-6);
                if a == 0.0 { prop_assert_eq!(b, 0.0); }
            }
        }

        #[test]
        fn encode_is_monotone(a in -10.0f32..10.0, b in -10.0f32..10.0, lo in -5.0f32..0.0, hi in 0.0f32..5.0) {
            let p = fit_params(&Tensor3::new(Shape3::new(1, 1, 2), vec![lo, hi]).unwrap(), 0, 255).unwrap();
            let (x, y) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(p.quantize(x) <= p.quantize(y));
        }

        #[test]
        fn projection_is_idempotent(values in prop::collection::vec(-3.0f32..3.0, 1..100)) {
            let n = values.len();
            let t = Tensor3::new(Shape3::new(1, n, 1), values).unwrap();
            let p = fit_params(&t, 0, 255).unwrap();
            let once = decode(&encode(&t, &p)).unwrap();
            let twice = decode(&encode(&once, &p)).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
