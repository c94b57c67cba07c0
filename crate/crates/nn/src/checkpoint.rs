use std::io::{Read, Write};
use std::path::Path;

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PSTCKPT1";

fn io_err(path: &Path, source: std::io::Error) -> NnError {
    NnError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes named 32-bit tensors in order.
pub fn write_checkpoint<'a>(
    path: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&buf).map_err(|e| io_err(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    let bad = |msg: &str| NnError::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing magic header"));
    }
    let mut pos = 8;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(pos..pos + n)
            .ok_or_else(|| bad("truncated file"))?;
        pos += n;
        Ok(s)
    };
    let mut out = Vec::new();
    loop {
        let Ok(len) = take(4) else { break };
        let len = u32::from_le_bytes(len.try_into().expect("4 bytes")) as usize;
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("name is not UTF-8"))?;
        let rank = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize);
        }
        let n: usize = shape.iter().product();
        let data = take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| bad(&format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let a = Tensor::matrix(2, 2, vec![1.5f32, -0.0, f32::MIN_POSITIVE, 3.0e-39]).unwrap();
        let b = Tensor::new(vec![3], vec![0.1f32, 1e30, -7.25]).unwrap();
        write_checkpoint(&path, [("enc.w", &a), ("β", &b)]).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].0, "β");
        for ((_, x), y) in back.iter().zip([&a, &b]) {
            assert_eq!(x.shape(), y.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(x), bits(y));
        }
    }

    #[test]
    fn rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad");
        std::fs::write(&path, b"NOTACKPT").unwrap();
        assert!(read_checkpoint(&path).is_err());
        let mut good = CHECKPOINT_MAGIC.to_vec();
        good.extend_from_slice(&5u32.to_le_bytes());
        good.extend_from_slice(b"ab");
        std::fs::write(&path, good).unwrap();
        assert!(read_checkpoint(&path).is_err());
    }
}
