//! Little-endian binary blobs with a fixed 16-byte header:
//! magic (4), dtype code (1), rank (1), reserved (2), dims (2 x u32).
//! Rank 1 or 2; payload follows the header row-major.

use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"RCB1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    U8 = 1,
}

#[derive(Debug, Error)]
pub enum BlobError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic, not a blob file")]
    BadMagic,
    #[error("unknown dtype code {0}")]
    BadDType(u8),
    #[error("unsupported rank {0} (expected 1 or 2)")]
    BadRank(u8),
    #[error("truncated blob")]
    Truncated,
    #[error("expected dtype {expected:?}, found {found:?}")]
    WrongDType { expected: DType, found: DType },
}

fn write_header(w: &mut impl Write, dtype: DType, dims: &[usize]) -> Result<(), BlobError> {
    assert!(dims.len() == 1 || dims.len() == 2, "blob rank must be 1 or 2");
    w.write_all(MAGIC)?;
    w.write_all(&[dtype as u8, dims.len() as u8, 0, 0])?;
    let d0 = dims[0] as u32;
    let d1 = *dims.get(1).unwrap_or(&1) as u32;
    w.write_all(&d0.to_le_bytes())?;
    w.write_all(&d1.to_le_bytes())?;
    Ok(())
}

fn read_header(r: &mut impl Read) -> Result<(DType, Vec<usize>), BlobError> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head).map_err(|_| BlobError::Truncated)?;
    if &head[0..4] != MAGIC {
        return Err(BlobError::BadMagic);
    }
    let dtype = match head[4] {
        0 => DType::F32,
        1 => DType::U8,
        other => return Err(BlobError::BadDType(other)),
    };
    let rank = head[5];
    if rank == 0 || rank > 2 {
        return Err(BlobError::BadRank(rank));
    }
    let d0 = u32::from_le_bytes([head[8], head[9], head[10], head[11]]) as usize;
    let d1 = u32::from_le_bytes([head[12], head[13], head[14], head[15]]) as usize;
    let dims = if rank == 1 { vec![d0] } else { vec![d0, d1] };
    Ok((dtype, dims))
}

pub fn write_f32(w: &mut impl Write, dims: &[usize], data: &[f32]) -> Result<(), BlobError> {
    assert_eq!(dims.iter().product::<usize>(), data.len());
    write_header(w, DType::F32, dims)?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_u8(w: &mut impl Write, dims: &[usize], data: &[u8]) -> Result<(), BlobError> {
    assert_eq!(dims.iter().product::<usize>(), data.len());
    write_header(w, DType::U8, dims)?;
    w.write_all(data)?;
    Ok(())
}

pub fn read_f32(r: &mut impl Read) -> Result<(Vec<usize>, Vec<f32>), BlobError> {
    let (dtype, dims) = read_header(r)?;
    if dtype != DType::F32 {
        return Err(BlobError::WrongDType {
            expected: DType::F32,
            found: dtype,
        });
    }
    let n: usize = dims.iter().product();
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf).map_err(|_| BlobError::Truncated)?;
    let data = buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((dims, data))
}

pub fn read_u8(r: &mut impl Read) -> Result<(Vec<usize>, Vec<u8>), BlobError> {
    let (dtype, dims) = read_header(r)?;
    if dtype != DType::U8 {
        return Err(BlobError::WrongDType {
            expected: DType::U8,
            found: dtype,
        });
    }
    let n: usize = dims.iter().product();
    let mut data = vec![0u8; n];
    r.read_exact(&mut data).map_err(|_| BlobError::Truncated)?;
    Ok((dims, data))
}

pub fn save_f32(path: &Path, dims: &[usize], data: &[f32]) -> Result<(), BlobError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_f32(&mut f, dims, data)?;
    f.flush()?;
    Ok(())
}

pub fn load_f32(path: &Path) -> Result<(Vec<usize>, Vec<f32>), BlobError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_f32(&mut f)
}

pub fn save_u8(path: &Path, dims: &[usize], data: &[u8]) -> Result<(), BlobError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_u8(&mut f, dims, data)?;
    f.flush()?;
    Ok(())
}

pub fn load_u8(path: &Path) -> Result<(Vec<usize>, Vec<u8>), BlobError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_u8(&mut f)
}

/// SHA-256 of a file, lowercase hex. Used for manifest checksums.
pub fn file_sha256(path: &Path) -> Result<String, BlobError> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_round_trip_bit_exact() {
        let data = vec![0.5f32, -0.0, 1e-40, 3.25e7];
        let mut buf = Vec::new();
        write_f32(&mut buf, &[2, 2], &data).unwrap();
        assert_eq!(buf.len(), 16 + 16);
        let (dims, back) = read_f32(&mut buf.as_slice()).unwrap();
        assert_eq!(dims, vec![2, 2]);
        for (a, b) in back.iter().zip(&data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn u8_round_trip() {
        let data = vec![0u8, 1, 255];
        let mut buf = Vec::new();
        write_u8(&mut buf, &[3], &data).unwrap();
        let (dims, back) = read_u8(&mut buf.as_slice()).unwrap();
        assert_eq!(dims, vec![3]);
        assert_eq!(back, data);
    }

    #[test]
    fn wrong_dtype_and_magic_rejected() {
        let mut buf = Vec::new();
        write_u8(&mut buf, &[1], &[7]).unwrap();
        assert!(matches!(
            read_f32(&mut buf.as_slice()),
            Err(BlobError::WrongDType { .. })
        ));
        buf[0] = b'X';
        assert!(matches!(read_u8(&mut buf.as_slice()), Err(BlobError::BadMagic)));
    }
}
