//! Little-endian helpers shared by the binary file formats.

use std::io::{Read, Write};

pub(crate) fn write_f32_slice<W: Write>(w: &mut W, values: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(4 * values.len());
    for v in values {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

pub(crate) fn read_f32_vec<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>, String> {
    let mut buf = vec![0u8; 4 * n];
    r.read_exact(&mut buf)
        .map_err(|e| format!("truncated float array of {n}: {e}"))?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32, String> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| format!("truncated header: {e}"))?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64, String> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| format!("truncated header: {e}"))?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_magic<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<(), String> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| format!("missing magic: {e}"))?;
    if &b != magic {
        return Err(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&b),
            String::from_utf8_lossy(magic)
        ));
    }
    Ok(())
}
