use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::tensor::{numel, Tensor};
use super::AutodiffError;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"UCG1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes named tensors in the fixed binary layout: magic, version, count,
/// then per tensor name length, name, rank, extents, raw little-endian 32-bit
/// values. The byte stream is a pure function of the input, so identical
/// tensors produce identical files.
pub fn save_checkpoint(
    path: &Path,
    tensors: &[(String, Tensor<f32>)],
) -> Result<(), AutodiffError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, tensor) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &e in tensor.shape() {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>, AutodiffError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(AutodiffError::BadCheckpoint(format!(
            "bad magic {magic:?}"
        )));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(AutodiffError::BadCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| AutodiffError::BadCheckpoint(format!("tensor name not UTF-8: {e}")))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n = numel(&shape);
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf));
        }
        out.push((name, Tensor::from_parts(shape, data)));
    }
    // trailing bytes mean a corrupt or mismatched file
    let mut extra = [0u8; 1];
    match r.read(&mut extra)? {
        0 => Ok(out),
        _ => Err(AutodiffError::BadCheckpoint("trailing bytes".to_string())),
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, AutodiffError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_tensors() -> Vec<(String, Tensor<f32>)> {
        vec![
            (
                "E/conv0/w".to_string(),
                Tensor::from_parts(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, f32::MIN_POSITIVE, 1e30]),
            ),
            ("G/bias".to_string(), Tensor::from_parts(vec![1], vec![-0.125])),
            ("D/scalar".to_string(), Tensor::from_parts(vec![], vec![7.75])),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join(format!("ckpt_rt_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("a.ckpt");
        let tensors = sample_tensors();
        save_checkpoint(&path, &tensors).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.len(), tensors.len());
        for ((n0, t0), (n1, t1)) in tensors.iter().zip(&loaded) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            let bits0: Vec<u32> = t0.data().iter().map(|v| v.to_bits()).collect();
            let bits1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits0, bits1);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn equal_tensors_produce_identical_files() {
        let dir = std::env::temp_dir().join(format!("ckpt_eq_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let (pa, pb) = (dir.join("a.ckpt"), dir.join("b.ckpt"));
        save_checkpoint(&pa, &sample_tensors()).unwrap();
        save_checkpoint(&pb, &sample_tensors()).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = std::env::temp_dir().join(format!("ckpt_bad_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(AutodiffError::BadCheckpoint(_))
        ));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = std::env::temp_dir().join(format!("ckpt_tr_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.ckpt");
        save_checkpoint(&path, &sample_tensors()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(load_checkpoint(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
