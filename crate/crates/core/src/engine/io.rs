//! `RVT1` tensor files: the four magic bytes `RVT1`, five little-endian
//! `u32` extents (B, C, D, H, W), then the values as little-endian `f32`.
//! A file may hold several records back to back.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::{Shape, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RVT1";

pub fn write_record<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    for e in t.shape().0 {
        let e = u32::try_from(e)
            .map_err(|_| std::io::Error::new(ErrorKind::InvalidInput, "extent exceeds u32"))?;
        w.write_all(&e.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

/// Reads one record; `Ok(None)` at a clean end of stream.
pub fn read_record<R: Read>(r: &mut R, path: &Path) -> Result<Option<Tensor>> {
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut magic = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut magic[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Err(bad("truncated header")),
            n => got += n,
        }
    }
    if &magic != MAGIC {
        return Err(bad("bad magic, expected RVT1"));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let shape = Shape(dims);
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|n| *n <= isize::MAX as usize / 4)
        .ok_or_else(|| bad("extents overflow"))?;
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw).map_err(|_| bad("truncated data"))?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Some(Tensor::from_vec(shape, data)))
}

pub fn save_all(path: impl AsRef<Path>, tensors: &[&Tensor]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    for t in tensors {
        write_record(&mut w, t)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_all(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    while let Some(t) = read_record(&mut r, path)? {
        out.push(t);
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    save_all(path, &[t])
}

/// Loads a file that must hold exactly one record.
pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let mut all = load_all(path)?;
    if all.len() != 1 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected one tensor record, found {}", all.len()),
        });
    }
    Ok(all.pop().unwrap())
}
