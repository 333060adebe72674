//! Versioned binary container for dense checkpoints and sparse records.
//!
//! Layout, all little-endian:
//! `magic "SPCK" | version u16 | kind u8 | compute width u8 | iteration u64 |
//! data cursor u64 | seed u64 | window start u64 | window len u32 | slot u32 |
//! entry count u32 | entries | checksum`
//! where each entry is `id u32 | mode u8 | payload len u64 | payload` and the
//! checksum is the first 8 bytes of SHA-256 over everything before it.

use sha2::{Digest, Sha256};

use super::engine::{FullState, Metadata};
use super::quantize::{decode_bits, encode_bits};
use super::snapshot::{DenseCheckpoint, Payload, SnapshotRecord};
use super::TensorBuf;
use crate::model::OperatorId;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"SPCK";
const VERSION: u16 = 1;
const KIND_DENSE: u8 = 0;
const KIND_SPARSE: u8 = 1;
const MODE_FULL: u8 = 0;
const MODE_COMPUTE: u8 = 1;

struct Header {
    kind: u8,
    width: u8,
    meta: Metadata,
    window_start: u64,
    window_len: u32,
    slot: u32,
    count: u32,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn header(&mut self, h: &Header) {
        self.0.extend_from_slice(MAGIC);
        self.u16(VERSION);
        self.u8(h.kind);
        self.u8(h.width);
        self.u64(h.meta.iteration);
        self.u64(h.meta.data_cursor);
        self.u64(h.meta.seed);
        self.u64(h.window_start);
        self.u32(h.window_len);
        self.u32(h.slot);
        self.u32(h.count);
    }

    fn shape(&mut self, t: &TensorBuf) {
        self.u32(t.shape.len() as u32);
        for &d in &t.shape {
            self.u64(d as u64);
        }
    }

    fn entry(&mut self, id: OperatorId, payload: &Payload, width: u32) -> Result<()> {
        let mut p = Writer::default();
        match payload {
            Payload::Full(f) => {
                p.u64(f.step);
                p.shape(&f.master);
                for t in [&f.master, &f.m, &f.v] {
                    for x in &t.values {
                        p.u32(x.to_bits());
                    }
                }
            }
            Payload::ComputeOnly(t) => {
                p.shape(t);
                for &x in &t.values {
                    let bits = encode_bits(x, width)?;
                    p.0.extend_from_slice(&bits.to_le_bytes()[..width as usize]);
                }
            }
        }
        self.u32(id.0);
        self.u8(match payload {
            Payload::Full(_) => MODE_FULL,
            Payload::ComputeOnly(_) => MODE_COMPUTE,
        });
        self.u64(p.0.len() as u64);
        self.0.extend_from_slice(&p.0);
        Ok(())
    }

    fn finish(mut self) -> Vec<u8> {
        let sum = checksum(&self.0);
        self.0.extend_from_slice(&sum);
        self.0
    }
}

fn checksum(bytes: &[u8]) -> [u8; 8] {
    let d = Sha256::digest(bytes);
    let mut out = [0u8; 8];
    out.copy_from_slice(&d[..8]);
    out
}

/// True when the trailing checksum matches the body.
pub fn checksum_ok(bytes: &[u8]) -> bool {
    bytes.len() >= 8 && checksum(&bytes[..bytes.len() - 8]) == bytes[bytes.len() - 8..]
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| Error::Codec("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn header(&mut self) -> Result<Header> {
        if self.take(4)? != MAGIC {
            return Err(Error::Codec("bad magic".into()));
        }
        let version = self.u16()?;
        if version != VERSION {
            return Err(Error::Codec(format!("unsupported version {version}")));
        }
        let kind = self.u8()?;
        let width = self.u8()?;
        let meta = Metadata { iteration: self.u64()?, data_cursor: self.u64()?, seed: self.u64()? };
        Ok(Header {
            kind,
            width,
            meta,
            window_start: self.u64()?,
            window_len: self.u32()?,
            slot: self.u32()?,
            count: self.u32()?,
        })
    }

    fn shape(&mut self) -> Result<Vec<usize>> {
        let nd = self.u32()? as usize;
        if nd > 8 {
            return Err(Error::Codec(format!("implausible rank {nd}")));
        }
        (0..nd).map(|_| Ok(self.u64()? as usize)).collect()
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        (0..n).map(|_| Ok(f32::from_bits(self.u32()?))).collect()
    }

    fn entry(&mut self, width: u32) -> Result<(OperatorId, Payload)> {
        let id = OperatorId(self.u32()?);
        let mode = self.u8()?;
        let len = self.u64()? as usize;
        let mut p = Reader { buf: self.take(len)?, pos: 0 };
        let payload = match mode {
            MODE_FULL => {
                let step = p.u64()?;
                let shape = p.shape()?;
                let n = shape.iter().product();
                let master = TensorBuf::new(shape.clone(), p.f32s(n)?);
                let m = TensorBuf::new(shape.clone(), p.f32s(n)?);
                let v = TensorBuf::new(shape, p.f32s(n)?);
                Payload::Full(FullState { master, m, v, step })
            }
            MODE_COMPUTE => {
                let shape = p.shape()?;
                let n: usize = shape.iter().product();
                let w = width as usize;
                let values = (0..n)
                    .map(|_| {
                        let mut b = [0u8; 4];
                        b[..w].copy_from_slice(p.take(w)?);
                        decode_bits(u32::from_le_bytes(b), width)
                    })
                    .collect::<Result<_>>()?;
                Payload::ComputeOnly(TensorBuf::new(shape, values))
            }
            m => return Err(Error::Codec(format!("unknown mode {m}"))),
        };
        if p.pos != len {
            return Err(Error::Codec(format!("entry {id} has {} trailing bytes", len - p.pos)));
        }
        Ok((id, payload))
    }
}

fn open(bytes: &[u8], kind: u8) -> Result<(Header, Reader<'_>)> {
    if !checksum_ok(bytes) {
        return Err(Error::Codec("checksum mismatch".into()));
    }
    let mut r = Reader { buf: &bytes[..bytes.len() - 8], pos: 0 };
    let h = r.header()?;
    if h.kind != kind {
        return Err(Error::Codec(format!("expected container kind {kind}, found {}", h.kind)));
    }
    Ok((h, r))
}

fn entries(r: &mut Reader<'_>, h: &Header) -> Result<Vec<(OperatorId, Payload)>> {
    let out = (0..h.count).map(|_| r.entry(h.width as u32)).collect::<Result<Vec<_>>>()?;
    if r.pos != r.buf.len() {
        return Err(Error::Codec("trailing bytes after entries".into()));
    }
    Ok(out)
}

pub fn encode_record(rec: &SnapshotRecord, compute_width: u32) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.header(&Header {
        kind: KIND_SPARSE,
        width: compute_width as u8,
        meta: rec.meta,
        window_start: rec.window_start,
        window_len: rec.window_len,
        slot: rec.slot,
        count: rec.entries.len() as u32,
    });
    for (id, p) in &rec.entries {
        w.entry(*id, p, compute_width)?;
    }
    Ok(w.finish())
}

pub fn decode_record(bytes: &[u8]) -> Result<SnapshotRecord> {
    let (h, mut r) = open(bytes, KIND_SPARSE)?;
    let entries = entries(&mut r, &h)?;
    Ok(SnapshotRecord { meta: h.meta, slot: h.slot, window_start: h.window_start, window_len: h.window_len, entries })
}

pub fn encode_dense(ck: &DenseCheckpoint) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.header(&Header {
        kind: KIND_DENSE,
        width: 4,
        meta: ck.meta,
        window_start: ck.meta.iteration,
        window_len: 1,
        slot: 0,
        count: ck.ops.len() as u32,
    });
    for (i, f) in ck.ops.iter().enumerate() {
        w.entry(OperatorId(i as u32), &Payload::Full(f.clone()), 4)?;
    }
    Ok(w.finish())
}

pub fn decode_dense(bytes: &[u8]) -> Result<DenseCheckpoint> {
    let (h, mut r) = open(bytes, KIND_DENSE)?;
    let mut ops = Vec::with_capacity(h.count as usize);
    for (i, (id, p)) in entries(&mut r, &h)?.into_iter().enumerate() {
        match p {
            Payload::Full(f) if id.index() == i => ops.push(f),
            _ => return Err(Error::Codec(format!("dense entry {i} is not a full payload for op{i}"))),
        }
    }
    Ok(DenseCheckpoint { meta: h.meta, ops })
}
