//! `ZST1` tensor container: magic, `u32` rank, `rank x u64` extents, then
//! row-major `f32` data. Every integer and float is little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ZST1";

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for x in t.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)
        .map_err(|_| Error::Format("truncated rank".into()))?;
    let rank = u32::from_le_bytes(word) as usize;
    if rank == 0 || rank > 16 {
        return Err(Error::Format(format!("unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut ext = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut ext)
            .map_err(|_| Error::Format("truncated extents".into()))?;
        let d = usize::try_from(u64::from_le_bytes(ext))
            .map_err(|_| Error::Format("extent exceeds address space".into()))?;
        shape.push(d);
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format("data length is not a multiple of 4".into()));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_tensor_file(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Tensor> {
    read_tensor(fs::File::open(path)?)
}
