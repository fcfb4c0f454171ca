//! Binary checkpoint format.
//!
//! ```text
//! "PATN" | version: u32 | L, H, D, C, tap: u32 x 5
//! per tensor, in EncoderParams::tensors() order:
//!     rows: u32 | cols: u32 | rows*cols f64
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::numcore::Matrix;

const MAGIC: &[u8; 4] = b"PATN";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(params: &EncoderParams, mut w: W) -> Result<()> {
    let c = &params.config;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for v in [c.num_layers, c.hidden, c.input_dim, c.num_classes, c.tap_layer] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for t in params.tensors() {
        w.write_all(&(t.rows() as u32).to_le_bytes())?;
        w.write_all(&(t.cols() as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(t.len() * 8);
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!("truncated while reading {what} at byte {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint, validating every header and tensor shape.
pub fn read_checkpoint<R: Read>(mut r: R, path: &Path) -> Result<EncoderParams> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::format(path, "bad magic, not a PATN checkpoint"));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 5];
    for (d, name) in dims.iter_mut().zip(["L", "H", "D", "C", "tap"]) {
        *d = cur.u32(name)? as usize;
    }
    let config = EncoderConfig {
        num_layers: dims[0],
        hidden: dims[1],
        input_dim: dims[2],
        num_classes: dims[3],
        tap_layer: dims[4],
    };
    config
        .validate()
        .map_err(|e| Error::format(path, format!("bad config block: {e}")))?;
    let shapes = EncoderParams::expected_shapes(&config);
    let mut tensors = Vec::with_capacity(shapes.len());
    for (i, &(rows, cols)) in shapes.iter().enumerate() {
        let at = cur.pos;
        let (r, c) = (cur.u32("rows")? as usize, cur.u32("cols")? as usize);
        if (r, c) != (rows, cols) {
            return Err(Error::format(
                path,
                format!("tensor {i} at byte {at} has shape {r}x{c}, expected {rows}x{cols}"),
            ));
        }
        let raw = cur.take(rows * cols * 8, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push(Matrix::from_vec(rows, cols, data)?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(
            path,
            format!("{} trailing bytes", bytes.len() - cur.pos),
        ));
    }
    EncoderParams::from_tensors(config, tensors)
}

pub fn save_checkpoint(params: &EncoderParams, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderParams> {
    let f = fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f), path)
}
