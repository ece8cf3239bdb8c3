//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TSRQ1"
//! u32 metadata length, metadata JSON (UTF-8)
//! u32 record count
//! per record:
//!   u32 name length, name (UTF-8)
//!   u8  dtype: 0 = f32, 1 = quantized
//!   u32 ndim, u32 dims...
//!   f32:       f32 values
//!   quantized: u8 bits, u8 granularity (0 channel, 1 group, 2 token),
//!              u32 spec group size, f32 gamma, f32 beta, u8 rounding,
//!              u32 group size, u32 group count, f32 scales, u8 zero points,
//!              u32 packed length, packed codes, u8 has_v, [f32 v]
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde_json::Value;

use super::{packed_len, Granularity, QuantParams, QuantSpec, QuantizedTensor, RoundingRule};
use crate::error::{data_err, Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"TSRQ1";

const DTYPE_F32: u8 = 0;
const DTYPE_QUANT: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    F32(Tensor),
    Quant(QuantizedTensor),
}

impl Record {
    pub fn numel(&self) -> usize {
        match self {
            Record::F32(t) => t.numel(),
            Record::Quant(q) => q.numel(),
        }
    }

    /// Bytes of the payload alone: values for f32 records; codes, scales,
    /// zero points, and scale logits for quantized ones.
    pub fn payload_bytes(&self) -> usize {
        match self {
            Record::F32(t) => 4 * t.numel(),
            Record::Quant(q) => {
                let g = q.params.num_groups();
                q.packed.len() + 5 * g + q.dst.as_ref().map_or(0, |v| 4 * v.len())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub metadata: Value,
    pub records: Vec<(String, Record)>,
}

impl Container {
    pub fn new(metadata: Value) -> Self {
        Self { metadata, records: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, record: Record) {
        self.records.push((name.into(), record));
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let meta = serde_json::to_vec(&self.metadata)?;
        put_u32(&mut out, meta.len())?;
        out.extend_from_slice(&meta);
        put_u32(&mut out, self.records.len())?;
        for (name, rec) in &self.records {
            write_record(&mut out, name, rec)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(data_err!("not a checkpoint container (bad magic)"));
        }
        let meta_len = r.u32()?;
        let metadata = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()?;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            records.push(read_record(&mut r)?);
        }
        if r.pos != bytes.len() {
            return Err(data_err!("{} trailing bytes after the last record", bytes.len() - r.pos));
        }
        Ok(Self { metadata, records })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Exact serialized size of one record, header included.
pub fn record_bytes(name: &str, record: &Record) -> Result<usize> {
    let mut buf = Vec::new();
    write_record(&mut buf, name, record)?;
    Ok(buf.len())
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| data_err!("length {v} does not fit in u32"))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_record(out: &mut Vec<u8>, name: &str, rec: &Record) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    match rec {
        Record::F32(t) => {
            out.push(DTYPE_F32);
            put_u32(out, t.shape().len())?;
            for &d in t.shape() {
                put_u32(out, d)?;
            }
            put_f32s(out, t.data());
        }
        Record::Quant(q) => {
            out.push(DTYPE_QUANT);
            put_u32(out, 2)?;
            put_u32(out, q.shape[0])?;
            put_u32(out, q.shape[1])?;
            let spec = &q.spec;
            out.push(spec.bits);
            let (tag, gs) = match spec.granularity {
                Granularity::PerChannel => (0u8, 0),
                Granularity::PerGroup { group_size } => (1, group_size),
                Granularity::PerToken => (2, 0),
            };
            out.push(tag);
            put_u32(out, gs)?;
            put_f32s(out, &[spec.gamma, spec.beta]);
            out.push(match spec.rounding {
                RoundingRule::HalfAwayFromZero => 0,
                RoundingRule::HalfToEven => 1,
            });
            put_u32(out, q.params.group_size)?;
            put_u32(out, q.params.num_groups())?;
            put_f32s(out, &q.params.scales);
            out.extend_from_slice(&q.params.zeros);
            put_u32(out, q.packed.len())?;
            out.extend_from_slice(&q.packed);
            match &q.dst {
                Some(v) => {
                    out.push(1);
                    put_f32s(out, v);
                }
                None => out.push(0),
            }
        }
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| data_err!("container truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| data_err!("length overflow"))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

fn read_record(r: &mut Reader<'_>) -> Result<(String, Record)> {
    let name_len = r.u32()?;
    let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| data_err!("record name: {e}"))?;
    let dtype = r.u8()?;
    let ndim = r.u32()?;
    let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let numel = numel.ok_or_else(|| data_err!("record {name}: shape overflows"))?;
    let rec = match dtype {
        DTYPE_F32 => Record::F32(Tensor::new(shape, r.f32s(numel)?).map_err(|e| bad(&name, e))?),
        DTYPE_QUANT => {
            let [rows, cols] = shape[..] else {
                return Err(data_err!("record {name}: quantized tensors must be 2-D"));
            };
            let bits = r.u8()?;
            let tag = r.u8()?;
            let gs = r.u32()?;
            let granularity = match tag {
                0 => Granularity::PerChannel,
                1 => Granularity::PerGroup { group_size: gs },
                2 => Granularity::PerToken,
                t => return Err(data_err!("record {name}: unknown granularity tag {t}")),
            };
            let gb = r.f32s(2)?;
            let rounding = match r.u8()? {
                0 => RoundingRule::HalfAwayFromZero,
                1 => RoundingRule::HalfToEven,
                t => return Err(data_err!("record {name}: unknown rounding tag {t}")),
            };
            let spec = QuantSpec { bits, granularity, gamma: gb[0], beta: gb[1], rounding };
            spec.validate().map_err(|e| bad(&name, e))?;
            let group_size = r.u32()?;
            let groups = r.u32()?;
            if group_size == 0 || group_size.checked_mul(groups) != Some(numel) {
                return Err(data_err!("record {name}: {groups} groups of {group_size} do not cover {numel}"));
            }
            let scales = r.f32s(groups)?;
            let zeros = r.take(groups)?.to_vec();
            let packed_n = r.u32()?;
            if packed_n != rows * packed_len(cols, bits) {
                return Err(data_err!("record {name}: {packed_n} packed bytes for a {rows}×{cols} tensor"));
            }
            let packed = r.take(packed_n)?.to_vec();
            let dst = match r.u8()? {
                0 => None,
                1 => Some(r.f32s(groups)?),
                t => return Err(data_err!("record {name}: bad dst flag {t}")),
            };
            let params = QuantParams { scales, zeros, group_size };
            let codes = super::unpack_rows(&packed, bits, rows, cols).map_err(|e| bad(&name, e))?;
            if codes.iter().any(|&c| c > spec.qmax()) || params.zeros.iter().any(|&z| z > spec.qmax()) {
                return Err(data_err!("record {name}: code or zero point exceeds {bits}-bit range"));
            }
            Record::Quant(QuantizedTensor { shape: [rows, cols], packed, params, dst, spec })
        }
        t => return Err(data_err!("record {name}: unknown dtype tag {t}")),
    };
    Ok((name, rec))
}

fn bad(name: &str, e: Error) -> Error {
    data_err!("record {name}: {e}")
}
