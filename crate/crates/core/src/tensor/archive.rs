//! Named-tensor archive used for checkpoints and feature caches.
//!
//! Layout (all integers little-endian): magic `SELDCKPT`, `u32` version,
//! `u32` entry count, then per entry a `u16` name length, the UTF-8 name, a
//! `u8` dtype (0 = f64), a `u8` rank, `rank` × `u32` dims and the row-major
//! payload.

use super::Tensor;
use crate::error::{Result, SeldError};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"SELDCKPT";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

pub fn write<W: Write>(mut w: W, entries: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count =
        u32::try_from(entries.len()).map_err(|_| SeldError::Format("too many tensors".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in entries {
        let len = u16::try_from(name.len())
            .map_err(|_| SeldError::Format(format!("name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let rank = u8::try_from(t.rank())
            .map_err(|_| SeldError::Format(format!("rank too large for {name}")))?;
        w.write_all(&[DTYPE_F64, rank])?;
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| SeldError::Format(format!("dimension too large in {name}")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(SeldError::Format("bad magic bytes".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(SeldError::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let mut len = [0u8; 2];
        r.read_exact(&mut len)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| SeldError::Format("tensor name is not UTF-8".into()))?;
        let mut head = [0u8; 2];
        r.read_exact(&mut head)?;
        if head[0] != DTYPE_F64 {
            return Err(SeldError::Format(format!(
                "{name}: unknown dtype {}",
                head[0]
            )));
        }
        let shape = (0..head[1])
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| SeldError::Format(format!("{name}: {e}")))?;
        entries.push((name, t));
    }
    Ok(entries)
}

pub fn save(path: impl AsRef<Path>, entries: &[(String, Tensor)]) -> Result<()> {
    write(BufWriter::new(File::create(path)?), entries)
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    read(BufReader::new(File::open(path)?))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_bytes_are_bit_exact() {
        let t = Tensor::new(&[2], vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        write(&mut buf, &[("ab".to_string(), t)]).unwrap();
        let mut expect = b"SELDCKPT".to_vec();
        expect.extend([1, 0, 0, 0, 1, 0, 0, 0]);
        expect.extend([2, 0, b'a', b'b', 0, 1, 2, 0, 0, 0]);
        expect.extend(1.0f64.to_le_bytes());
        expect.extend((-0.5f64).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn round_trip_preserves_names_and_order() {
        let entries = vec![
            (
                "z.w".to_string(),
                Tensor::new(&[2, 3], (0..6).map(f64::from).collect()).unwrap(),
            ),
            ("a".to_string(), Tensor::scalar(f64::MIN_POSITIVE)),
        ];
        let mut buf = Vec::new();
        write(&mut buf, &entries).unwrap();
        assert_eq!(read(buf.as_slice()).unwrap(), entries);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(
            read(&b"NOTACKPT\x01\0\0\0\0\0\0\0"[..]),
            Err(SeldError::Format(_))
        ));
        let mut buf = Vec::new();
        write(&mut buf, &[("x".into(), Tensor::ones(&[4]))]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read(buf.as_slice()).is_err());
    }
}
