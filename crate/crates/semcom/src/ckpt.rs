//! Versioned binary checkpoint encoding shared by codec and inverse-network
//! snapshots. Parameters are stored as raw little-endian f64 bits, so a
//! save/load round trip is bit-exact.

use std::io::{self, Read, Write};

pub(crate) const MAGIC: &[u8; 4] = b"SCMC";
pub(crate) const VERSION: u32 = 1;
pub(crate) const KIND_CODEC: u8 = 0;
pub(crate) const KIND_INVERSE: u8 = 1;

pub(crate) fn write_header<W: Write>(w: &mut W, kind: u8) -> io::Result<()> {
    w.write_all(MAGIC)?;
    write_u32(w, VERSION)?;
    w.write_all(&[kind])
}

pub(crate) fn read_header<R: Read>(r: &mut R) -> io::Result<u8> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind)?;
    Ok(kind[0])
}

pub(crate) fn bad(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn write_u64<W: Write>(w: &mut W, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn write_f64<W: Write>(w: &mut W, v: f64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn write_slice<W: Write>(w: &mut W, data: &[f64]) -> io::Result<()> {
    write_u64(w, data.len() as u64)?;
    for &v in data {
        write_f64(w, v)?;
    }
    Ok(())
}

pub(crate) fn read_into_slice<R: Read>(r: &mut R, data: &mut [f64]) -> io::Result<()> {
    let len = read_u64(r)? as usize;
    if len != data.len() {
        return Err(bad(&format!(
            "parameter tensor length {len} does not match expected {}",
            data.len()
        )));
    }
    for v in data.iter_mut() {
        *v = read_f64(r)?;
    }
    Ok(())
}

pub(crate) fn write_shape3<W: Write>(w: &mut W, s: (usize, usize, usize)) -> io::Result<()> {
    write_u32(w, s.0 as u32)?;
    write_u32(w, s.1 as u32)?;
    write_u32(w, s.2 as u32)
}

pub(crate) fn read_shape3<R: Read>(r: &mut R) -> io::Result<(usize, usize, usize)> {
    Ok((
        read_u32(r)? as usize,
        read_u32(r)? as usize,
        read_u32(r)? as usize,
    ))
}
