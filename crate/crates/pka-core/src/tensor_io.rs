//! Flat tensor file format.
//!
//! Layout: magic bytes `PKAT`, `u32` rank, `u32` dimension sizes, then the
//! row-major payload as little-endian `f32`. Used by the `analyze`
//! subcommand, toy-model weight dumps, and test fixtures.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 4] = b"PKAT";

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &x in t.data() {
        w.write_all(&(x.to_f64() as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::TensorFormat("file shorter than header".into()))?;
    if &magic != MAGIC {
        return Err(Error::TensorFormat(format!(
            "bad magic {:?}, expected \"PKAT\"",
            magic
        )));
    }
    let rank = read_u32(&mut r)? as usize;
    if rank > 8 {
        return Err(Error::TensorFormat(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(&mut r)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut buf = [0u8; 4];
    for _ in 0..n {
        r.read_exact(&mut buf)
            .map_err(|_| Error::TensorFormat("payload shorter than shape requires".into()))?;
        data.push(T::from_f64(f32::from_le_bytes(buf) as f64));
    }
    if r.read(&mut buf)? != 0 {
        return Err(Error::TensorFormat("trailing bytes after payload".into()));
    }
    Tensor::new(shape, data)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::TensorFormat("truncated header".into()))?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pkat");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x01\x00\x00\x00\x00\x00\x80\x3f").unwrap();
        assert!(matches!(
            read_tensor::<f32>(&path),
            Err(Error::TensorFormat(_))
        ));
    }

    #[test]
    fn rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.pkat");
        std::fs::write(&path, b"PKAT\x01\x00\x00\x00\x02\x00\x00\x00\x00\x00\x80\x3f").unwrap();
        assert!(read_tensor::<f32>(&path).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>()) {
            let mut rng = crate::rng::Rng::new(seed);
            let t = crate::rng::normal_tensor::<f32>(&mut rng, &[rows, cols]);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("t.pkat");
            write_tensor(&path, &t).unwrap();
            let back = read_tensor::<f32>(&path).unwrap();
            prop_assert_eq!(t, back);
        }
    }
}
