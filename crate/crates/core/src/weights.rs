//! Checksummed binary container for parameter stores.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes  "ADNW"
//! version      u32      1
//! flags        u8       bit 0: training checkpoint
//! fp_len       u32      then fp_len bytes of UTF-8 model fingerprint
//! [adam_t      u64]     present only for checkpoints
//! count        u64      number of tensor records
//! record*      name_len u32, name (UTF-8), dtype u8 (0 binary32, 1 binary64),
//!              rank u32, rank x u64 extents, row-major payload
//! crc32        u32      IEEE CRC-32 of every preceding byte
//! ```
//!
//! Adam moments of a trainable tensor `p` are stored as `p/adam_m` and
//! `p/adam_v` right after `p`. Trainability is implied by the name:
//! `*.moving_mean` and `*.moving_var` are the only frozen tensors.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::is_trainable_suffix;
use crate::params::{AdamSlots, ParamStore};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"ADNW";
pub const VERSION: u32 = 1;
const FLAG_CHECKPOINT: u8 = 1;
const SLOT_M: &str = "/adam_m";
const SLOT_V: &str = "/adam_v";

/// What a weights file carries besides the tensors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightsHeader {
    pub fingerprint: String,
    /// Adam step count, present for training checkpoints.
    pub adam_t: Option<u64>,
    pub dtype: DType,
}

/// Serializes `store`. With `adam_t` set the file is a checkpoint and
/// includes the moment slots.
pub fn encode<T: Scalar>(store: &ParamStore<T>, fingerprint: &str, adam_t: Option<u64>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(if adam_t.is_some() { FLAG_CHECKPOINT } else { 0 });
    put_str(&mut buf, fingerprint)?;
    if let Some(t) = adam_t {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    let checkpoint = adam_t.is_some();
    let count: usize = store
        .iter()
        .map(|(_, e)| 1 + if checkpoint && e.slots.is_some() { 2 } else { 0 })
        .sum();
    buf.extend_from_slice(&(count as u64).to_le_bytes());
    for (name, entry) in store.iter() {
        put_tensor(&mut buf, name, &entry.value)?;
        if let (true, Some(slots)) = (checkpoint, &entry.slots) {
            put_tensor(&mut buf, &format!("{name}{SLOT_M}"), &slots.m)?;
            put_tensor(&mut buf, &format!("{name}{SLOT_V}"), &slots.v)?;
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

fn put_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u32::try_from(s.len()).map_err(|_| Error::Format("string longer than 4 GiB".into()))?;
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_tensor<T: Scalar>(buf: &mut Vec<u8>, name: &str, t: &Tensor<T>) -> Result<()> {
    put_str(buf, name)?;
    buf.push(T::DTYPE.code());
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    buf.reserve(t.len() * T::DTYPE.width());
    for &v in t.data() {
        v.write_le(buf);
    }
    Ok(())
}

pub fn save<T: Scalar>(store: &ParamStore<T>, fingerprint: &str, adam_t: Option<u64>, path: &Path) -> Result<()> {
    let bytes = encode(store, fingerprint, adam_t)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("unexpected end of weights data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Format("name is not UTF-8".into()))
    }
}

/// Validates magic, version and checksum; returns the body without the CRC.
fn verified_body(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < MAGIC.len() + 4 + 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not an ADNW weights file (bad magic)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Format("checksum mismatch (file truncated or corrupted)".into()));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported weights version {version}")));
    }
    Ok(body)
}

struct RawRecord<'a> {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    payload: &'a [u8],
}

fn parse(bytes: &[u8]) -> Result<(WeightsHeader, Vec<RawRecord<'_>>)> {
    let body = verified_body(bytes)?;
    let mut r = Reader { bytes: body, pos: 8 };
    let flags = r.u8()?;
    if flags & !FLAG_CHECKPOINT != 0 {
        return Err(Error::Format(format!("unknown header flags {flags:#04x}")));
    }
    let fingerprint = r.string()?;
    let adam_t = if flags & FLAG_CHECKPOINT != 0 { Some(r.u64()?) } else { None };
    let count = r.u64()?;
    let mut records = Vec::new();
    let mut dtype = None;
    for _ in 0..count {
        let name = r.string()?;
        let d = DType::from_code(r.u8()?).ok_or_else(|| Error::Format(format!("bad dtype code in {name:?}")))?;
        if *dtype.get_or_insert(d) != d {
            return Err(Error::Format("records mix binary32 and binary64".into()));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        let mut len: usize = 1;
        for _ in 0..rank {
            let e = usize::try_from(r.u64()?).map_err(|_| Error::Format("extent overflows usize".into()))?;
            len = len
                .checked_mul(e)
                .ok_or_else(|| Error::Format(format!("extents of {name:?} overflow")))?;
            shape.push(e);
        }
        let nbytes = len
            .checked_mul(d.width())
            .ok_or_else(|| Error::Format(format!("payload of {name:?} overflows")))?;
        let payload = r.take(nbytes)?;
        records.push(RawRecord {
            name,
            dtype: d,
            shape,
            payload,
        });
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes after last record", body.len() - r.pos)));
    }
    Ok((
        WeightsHeader {
            fingerprint,
            adam_t,
            dtype: dtype.unwrap_or(DType::F32),
        },
        records,
    ))
}

fn decode_payload<T: Scalar>(rec: &RawRecord<'_>) -> Result<Tensor<T>> {
    let data: Vec<T> = match rec.dtype {
        DType::F32 => rec.payload.chunks_exact(4).map(|c| T::from_f64(f64::from(f32::read_le(c)))).collect(),
        DType::F64 => rec.payload.chunks_exact(8).map(|c| T::from_f64(f64::read_le(c))).collect(),
    };
    // Same-precision loads go through f64 losslessly for f32 and f64.
    Tensor::from_vec(rec.shape.clone(), data)
}

/// Decodes a buffer. If `expected_fingerprint` is given it must match.
pub fn decode<T: Scalar>(bytes: &[u8], expected_fingerprint: Option<&str>) -> Result<(ParamStore<T>, WeightsHeader)> {
    let (header, records) = parse(bytes)?;
    if let Some(fp) = expected_fingerprint {
        if fp != header.fingerprint {
            return Err(Error::Compat(format!(
                "weights were saved for `{}` but the model is `{fp}`",
                header.fingerprint
            )));
        }
    }
    let mut store = ParamStore::new();
    let mut pending: Vec<(String, Tensor<T>, Tensor<T>)> = Vec::new();
    let mut iter = records.iter().peekable();
    while let Some(rec) = iter.next() {
        if rec.name.ends_with(SLOT_M) || rec.name.ends_with(SLOT_V) {
            return Err(Error::Format(format!("orphan optimizer record {:?}", rec.name)));
        }
        let suffix = rec.name.rsplit('.').next().unwrap_or("");
        store.insert(rec.name.clone(), decode_payload(rec)?, is_trainable_suffix(suffix))
            .map_err(|e| Error::Format(e.to_string()))?;
        let m_name = format!("{}{SLOT_M}", rec.name);
        if iter.peek().is_some_and(|n| n.name == m_name) {
            let m = decode_payload(iter.next().expect("peeked"))?;
            let v_name = format!("{}{SLOT_V}", rec.name);
            let v = match iter.next() {
                Some(v) if v.name == v_name => decode_payload(v)?,
                _ => return Err(Error::Format(format!("missing {v_name:?}"))),
            };
            pending.push((rec.name.clone(), m, v));
        }
    }
    for (name, m, v) in pending {
        store.set_slots(&name, AdamSlots { m, v }).map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok((store, header))
}

pub fn load<T: Scalar>(path: &Path, expected_fingerprint: Option<&str>) -> Result<(ParamStore<T>, WeightsHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, expected_fingerprint)
}

/// Reads only the header (after verifying the checksum).
pub fn peek(path: &Path) -> Result<WeightsHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse(&bytes)?.0)
}
