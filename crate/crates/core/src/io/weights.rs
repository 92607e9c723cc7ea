//! Weights file: the model config followed by one record per tensor.
//!
//! ```text
//! "IPLW"  u32 version
//! u32 n   n × u32 config fields
//! u32 records
//! per record: u32 name_len, name (UTF-8), u32 rank, rank × u32 dims, f32 payload
//! ```
//!
//! All integers and reals are little-endian. Each convolution contributes a
//! `<name>.weight` record of rank 4 `(out, in, k, k)` and a `<name>.bias`
//! record of rank 1.

use std::collections::HashMap;
use std::path::Path;

use super::{read_file, write_atomic};
use crate::error::{Error, Result};
use crate::net::{FibVariant, LfeMode, ModelConfig, ModelWeights, Residual};
use crate::tensor::ConvParams;

pub const MAGIC: &[u8; 4] = b"IPLW";
pub const VERSION: u32 = 1;
const CONFIG_FIELDS: usize = 14;

fn config_fields(c: &ModelConfig) -> [u32; CONFIG_FIELDS] {
    [
        c.num_fibs as u32,
        c.channels as u32,
        c.downsample as u32,
        c.chunk_c as u32,
        c.chunk_w as u32,
        c.chunk_h as u32,
        c.lfe_reduction as u32,
        c.drtm_w as u32,
        c.drtm_h as u32,
        match c.lfe_mode {
            LfeMode::PooledGate => 0,
            LfeMode::BlockGate => 1,
        },
        match c.variant {
            FibVariant::Full => 0,
            FibVariant::NoDaem => 1,
            FibVariant::NoDrtm => 2,
        },
        match c.residual {
            Residual::Global => 0,
            Residual::None => 1,
        },
        c.cache_enabled as u32,
        c.q_bits,
    ]
}

fn config_from(f: &[u32]) -> std::result::Result<ModelConfig, String> {
    let enum_field = |v: u32, n: u32, what: &str| {
        if v < n {
            Ok(v)
        } else {
            Err(format!("unknown {what} code {v}"))
        }
    };
    Ok(ModelConfig {
        num_fibs: f[0] as usize,
        channels: f[1] as usize,
        downsample: f[2] as usize,
        chunk_c: f[3] as usize,
        chunk_w: f[4] as usize,
        chunk_h: f[5] as usize,
        lfe_reduction: f[6] as usize,
        drtm_w: f[7] as usize,
        drtm_h: f[8] as usize,
        lfe_mode: [LfeMode::PooledGate, LfeMode::BlockGate][enum_field(f[9], 2, "lfe mode")? as usize],
        variant: [FibVariant::Full, FibVariant::NoDaem, FibVariant::NoDrtm][enum_field(f[10], 3, "variant")? as usize],
        residual: [Residual::Global, Residual::None][enum_field(f[11], 2, "residual")? as usize],
        cache_enabled: enum_field(f[12], 2, "cache flag")? == 1,
        q_bits: f[13],
    })
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_record(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f32]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, dims.len() as u32);
    for &d in dims {
        put_u32(out, d as u32);
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes weights (config included).
pub fn write_weights(weights: &ModelWeights) -> Result<Vec<u8>> {
    weights.validate()?;
    let mut out = MAGIC.to_vec();
    put_u32(&mut out, VERSION);
    put_u32(&mut out, CONFIG_FIELDS as u32);
    for v in config_fields(&weights.config) {
        put_u32(&mut out, v);
    }
    put_u32(&mut out, 2 * weights.params.len() as u32);
    for (p, name) in weights.params.iter().zip(weights.layout().names()) {
        let k = p.kernel.size();
        put_record(&mut out, &format!("{name}.weight"), &[p.out_ch, p.in_ch, k, k], &p.weight);
        put_record(&mut out, &format!("{name}.bias"), &[p.out_ch], &p.bias);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(self.path, format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

struct Record {
    dims: Vec<usize>,
    data: Vec<f32>,
}

/// Parses and validates a weights file image.
pub fn read_weights(bytes: &[u8], path: &Path) -> Result<ModelWeights> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic").ok() != Some(&MAGIC[..]) {
        return Err(Error::format(path, "not a weights file (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let n = r.u32("config length")? as usize;
    if n != CONFIG_FIELDS {
        return Err(Error::format(path, format!("config block has {n} fields, expected {CONFIG_FIELDS}")));
    }
    let fields: Vec<u32> = (0..n).map(|_| r.u32("config")).collect::<Result<_>>()?;
    let config = config_from(&fields).map_err(|m| Error::format(path, m))?;
    config
        .validate()
        .map_err(|e| Error::format(path, format!("embedded config: {e}")))?;

    let count = r.u32("record count")? as usize;
    let mut records: HashMap<String, Record> = HashMap::new();
    let mut order = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "record name")?)
            .map_err(|_| Error::format(path, "record name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::format(path, format!("{name}: rank {rank} too large")));
        }
        let dims: Vec<usize> = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<_>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4).map(|_| n))
            .ok_or_else(|| Error::format(path, format!("{name}: dims overflow")))?;
        let raw = r.take(numel * 4, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if records.insert(name.clone(), Record { dims, data }).is_some() {
            return Err(Error::Incompatible(format!("duplicate record {name}")));
        }
        order.push(name);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let expected = ModelWeights::<f32>::zeros(&config)?;
    let names = expected.layout().names();
    let mut wanted = std::collections::HashSet::new();
    for n in &names {
        wanted.insert(format!("{n}.weight"));
        wanted.insert(format!("{n}.bias"));
    }
    if let Some(extra) = order.iter().find(|n| !wanted.contains(*n)) {
        return Err(Error::Incompatible(format!("unexpected record {extra}")));
    }
    let mut params = Vec::with_capacity(names.len());
    for (p, name) in expected.params.iter().zip(&names) {
        let k = p.kernel.size();
        let mut take = |suffix: &str, dims: Vec<usize>| -> Result<Vec<f32>> {
            let key = format!("{name}.{suffix}");
            let rec = records
                .remove(&key)
                .ok_or_else(|| Error::Incompatible(format!("missing record {key}")))?;
            if rec.dims != dims {
                return Err(Error::Incompatible(format!(
                    "{key}: dims {:?}, expected {dims:?}",
                    rec.dims
                )));
            }
            Ok(rec.data)
        };
        let weight = take("weight", vec![p.out_ch, p.in_ch, k, k])?;
        let bias = take("bias", vec![p.out_ch])?;
        params.push(ConvParams {
            weight,
            bias,
            ..p.clone()
        });
    }
    ModelWeights::from_params(&config, params)
}

pub fn save_weights(path: impl AsRef<Path>, weights: &ModelWeights) -> Result<()> {
    let path = path.as_ref();
    write_atomic(path, &write_weights(weights)?)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelWeights> {
    let path = path.as_ref();
    read_weights(&read_file(path)?, path)
}
