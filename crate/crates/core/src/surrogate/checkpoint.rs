//! Binary checkpoint format.
//!
//! ```text
//! "FBNN"            magic
//! u16               format version (1)
//! u32               number of layer widths n
//! u32 × n           layer widths
//! u8                activation tag
//! f64 × dims[0]     input offsets
//! f64 × dims[0]     input scales
//! per layer         W row-major (out × in), then b
//! u32               CRC32 of all preceding bytes
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use ndarray::{Array1, Array2};

use super::{Activation, InputScaling, Mlp};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FBNN";
const VERSION: u16 = 1;

pub fn write_checkpoint(net: &Mlp) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + 8 * net.num_params());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(net.dims().len() as u32).to_le_bytes());
    for &d in net.dims() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.push(net.activation().tag());
    for v in net.scaling().offset.iter().chain(&net.scaling().scale) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in net.params_flat() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Mlp> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(bad("bad magic bytes"));
    }
    if bytes.len() < 4 + 2 + 4 + 4 {
        return Err(bad("truncated header"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let mut r = Reader { buf: body, pos: 4 };
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    if !(2..=1024).contains(&n) {
        return Err(bad("implausible layer count"));
    }
    let dims: Vec<usize> = (0..n).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
    let act = Activation::from_tag(r.take(1)?[0]).ok_or_else(|| bad("unknown activation tag"))?;
    let offset = (0..dims[0]).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let scale = (0..dims[0]).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for w in dims.windows(2) {
        let wv = (0..w[0] * w[1]).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let bv = (0..w[1]).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        weights.push(Array2::from_shape_vec((w[1], w[0]), wv).unwrap());
        biases.push(Array1::from(bv));
    }
    if r.pos != body.len() {
        return Err(bad("trailing bytes before checksum"));
    }
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if stored != crc32fast::hash(body) {
        return Err(bad("checksum mismatch"));
    }
    if weights.iter().flat_map(|w| w.iter()).chain(biases.iter().flat_map(|b| b.iter())).any(|v| !v.is_finite()) {
        return Err(bad("non-finite parameter"));
    }
    Mlp::from_parts(act, weights, biases, InputScaling { offset, scale })
        .map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save_checkpoint(net: &Mlp, path: &Path) -> Result<()> {
    std::fs::write(path, write_checkpoint(net))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Mlp> {
    read_checkpoint(&std::fs::read(path)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
