//! `C2T1` tensor container: magic, u8 dtype (0 = f64), u8 ndim,
//! ndim little-endian u32 dims, then the row-major little-endian payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"C2T1";
const DTYPE_F64: u8 = 0;

pub fn write_ctf_to<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    if t.ndim() > u8::MAX as usize {
        return Err(Error::Format(format!("{} dimensions do not fit a u8", t.ndim())));
    }
    w.write_all(MAGIC)?;
    w.write_all(&[DTYPE_F64, t.ndim() as u8])?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_ctf_from<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut head = [0u8; 6];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("bad magic, expected C2T1".into()));
    }
    if head[4] != DTYPE_F64 {
        return Err(Error::Format(format!("unsupported dtype code {}", head[4])));
    }
    let ndim = head[5] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut d = [0u8; 4];
        r.read_exact(&mut d)?;
        shape.push(u32::from_le_bytes(d) as usize);
    }
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * 8];
    r.read_exact(&mut payload)?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_ctf(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ctf_to(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_ctf(path: impl AsRef<Path>) -> Result<Tensor> {
    read_ctf_from(&mut BufReader::new(File::open(path)?))
}
