//! Bit-exact model persistence.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "BFCK" | version u32 | arch_id | provenance | layer table
//! payload_len u64 | payload fnv1a-64 checksum u64 | payload
//! ```
//!
//! Strings are u32-length-prefixed UTF-8. The layer table holds, per
//! weighted layer: kind tag, weight shape, bias length, quantization scale.
//! The payload carries, per weighted layer, the shadow weights (f64 LE),
//! the bias (f64 LE), then one raw signed byte per int8 code. Saving has no
//! timestamps, so identical models serialize byte-identically.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Layer, Model, Provenance};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"BFCK";
const VERSION: u32 = 1;
/// Sanity cap for length fields in untrusted headers.
const MAX_STR: usize = 1 << 20;

/// FNV-1a 64-bit hash, used as the payload checksum and for manifests.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1_0000_0000_01b3);
    }
    h
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Integrity(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        if len > MAX_STR {
            return Err(Error::Integrity(format!("string length {len} exceeds cap")));
        }
        String::from_utf8(self.take(len)?.to_vec()).map_err(|e| Error::Integrity(format!("utf8: {e}")))
    }
}

/// Serializes a model to checkpoint bytes.
pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut header = Writer { buf: Vec::new() };
    header.buf.extend_from_slice(MAGIC);
    header.u32(VERSION);
    header.string(&model.arch_id);
    header.string(&model.provenance.config);
    header.u64(model.provenance.seed);
    match model.provenance.final_test_accuracy {
        Some(acc) => {
            header.buf.push(1);
            header.f64(acc);
        }
        None => {
            header.buf.push(0);
            header.f64(0.0);
        }
    }
    header.string(&model.provenance.notes);

    let weighted = model.weighted_layers();
    header.u32(weighted.len() as u32);
    let mut payload = Writer { buf: Vec::new() };
    for &pos in &weighted {
        let layer = &model.layers[pos];
        let p = layer.params().expect("weighted");
        let kind: u8 = match layer {
            Layer::Dense { .. } => 0,
            Layer::Conv2d { .. } => 1,
            _ => unreachable!(),
        };
        header.buf.push(kind);
        header.u32(p.shadow.shape().len() as u32);
        for &d in p.shadow.shape() {
            header.u32(d as u32);
        }
        header.u32(p.bias.len() as u32);
        header.f64(p.quant.scale);

        for &w in p.shadow.values() {
            payload.f64(w);
        }
        for &b in p.bias.values() {
            payload.f64(b);
        }
        payload.buf.extend(p.quant.codes.iter().map(|&c| c as u8));
    }

    header.u64(payload.buf.len() as u64);
    header.u64(fnv1a64(&payload.buf));
    header.buf.extend_from_slice(&payload.buf);
    header.buf
}

/// Reconstructs a model from checkpoint bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Integrity(format!("bad checkpoint magic {magic:02x?}")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch { found: version, supported: VERSION });
    }
    let arch_id = r.string()?;
    let config = r.string()?;
    let seed = r.u64()?;
    let has_acc = r.take(1)?[0] != 0;
    let acc = r.f64()?;
    let notes = r.string()?;

    let mut model = Model::from_arch_id(&arch_id)?;
    model.provenance = Provenance {
        config,
        seed,
        final_test_accuracy: has_acc.then_some(acc),
        notes,
    };

    let weighted = model.weighted_layers();
    let count = r.u32()? as usize;
    if count != weighted.len() {
        return Err(Error::Integrity(format!(
            "layer table has {count} entries, arch {arch_id} has {}",
            weighted.len()
        )));
    }
    struct Entry {
        shape: Vec<usize>,
        bias_len: usize,
        scale: f64,
    }
    let mut entries = Vec::with_capacity(count);
    for (ordinal, &pos) in weighted.iter().enumerate() {
        let kind = r.take(1)?[0];
        let expect_kind = match &model.layers[pos] {
            Layer::Dense { .. } => 0,
            Layer::Conv2d { .. } => 1,
            _ => unreachable!(),
        };
        if kind != expect_kind {
            return Err(Error::Integrity(format!("layer {ordinal} kind {kind} != {expect_kind}")));
        }
        let ndim = r.u32()? as usize;
        if ndim > 8 {
            return Err(Error::Integrity(format!("layer {ordinal} has {ndim} dims")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let bias_len = r.u32()? as usize;
        let scale = r.f64()?;
        let p = model.layers[pos].params().expect("weighted");
        if shape != p.shadow.shape() || bias_len != p.bias.len() {
            return Err(Error::Integrity(format!(
                "layer {ordinal} shape {shape:?}/{bias_len} does not match arch"
            )));
        }
        entries.push(Entry { shape, bias_len, scale });
    }

    let payload_len = r.u64()? as usize;
    let checksum = r.u64()?;
    let payload = r.take(payload_len)?;
    if r.pos != bytes.len() {
        return Err(Error::Integrity(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let actual = fnv1a64(payload);
    if actual != checksum {
        return Err(Error::Integrity(format!(
            "payload checksum {actual:#018x} != recorded {checksum:#018x}"
        )));
    }

    let mut pr = Reader { bytes: payload, pos: 0 };
    for (ordinal, &pos) in weighted.iter().enumerate() {
        let e = &entries[ordinal];
        let n: usize = e.shape.iter().product();
        let mut shadow = Vec::with_capacity(n);
        for _ in 0..n {
            shadow.push(pr.f64()?);
        }
        let mut bias = Vec::with_capacity(e.bias_len);
        for _ in 0..e.bias_len {
            bias.push(pr.f64()?);
        }
        let codes: Vec<i8> = pr.take(n)?.iter().map(|&b| b as i8).collect();
        let shadow = Tensor::from_values(&e.shape, shadow)?;
        let bias = Tensor::from_values(&[e.bias_len], bias)?;
        model.layers[pos]
            .params_mut()
            .expect("weighted")
            .restore(shadow, bias, e.scale, codes);
    }
    if pr.pos != payload.len() {
        return Err(Error::Integrity("payload length mismatch".into()));
    }
    Ok(model)
}

/// Writes a checkpoint file.
pub fn save(model: &Model, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, to_bytes(model))?;
    Ok(())
}

/// Loads a checkpoint file.
pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&fs::read(path)?)
}
