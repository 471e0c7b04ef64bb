//! Named-tensor blob: shape header plus little-endian f32 payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DSTB";

/// Stream form, for embedding a blob inside another file.
pub fn write_tensor_blob_to(
    w: &mut impl Write,
    entries: &[(String, Tensor<f32>)],
    ctx: &str,
) -> Result<()> {
    let io = |e: std::io::Error| Error::io(ctx.to_string(), e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(entries.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, tensor) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes()).map_err(io)?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    Ok(())
}

pub fn write_tensor_blob(path: &Path, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    let ctx = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(ctx.clone(), e))?;
    let mut w = BufWriter::new(file);
    write_tensor_blob_to(&mut w, entries, &ctx)?;
    w.flush().map_err(|e| Error::io(ctx, e))
}

/// Stream form, for reading a blob embedded inside another file.
pub fn read_tensor_blob_from(r: &mut impl Read, ctx: &str) -> Result<Vec<(String, Tensor<f32>)>> {
    fn get<const N: usize>(r: &mut impl Read, ctx: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        r.read_exact(&mut buf).map_err(|e| Error::io(ctx.to_string(), e))?;
        Ok(buf)
    }

    let magic = get::<4>(r, ctx)?;
    if &magic != MAGIC {
        return Err(Error::format(ctx.to_string(), "bad magic, not a tensor blob"));
    }
    let count = u32::from_le_bytes(get::<4>(r, ctx)?) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(get::<4>(r, ctx)?) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|e| Error::io(ctx.to_string(), e))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::format(ctx.to_string(), "tensor name is not UTF-8"))?;
        let ndim = u32::from_le_bytes(get::<4>(r, ctx)?) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(get::<4>(r, ctx)?) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f32::from_le_bytes(get::<4>(r, ctx)?));
        }
        entries.push((name, Tensor::new(&shape, data)));
    }
    Ok(entries)
}

pub fn read_tensor_blob(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let ctx = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(ctx.clone(), e))?;
    let mut r = BufReader::new(file);
    read_tensor_blob_from(&mut r, &ctx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let entries = vec![
            ("w".to_string(), Tensor::new(&[2, 3], vec![1.0f32, -2.5, 3.25, 0.0, 1e-7, 9.0])),
            ("b".to_string(), Tensor::new(&[3], vec![0.5f32, 0.25, -0.125])),
        ];
        write_tensor_blob(&path, &entries).unwrap();
        let back = read_tensor_blob(&path).unwrap();
        assert_eq!(entries, back);
    }

    #[test]
    fn blob_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"not a blob at all").unwrap();
        assert!(read_tensor_blob(&path).is_err());
    }
}
