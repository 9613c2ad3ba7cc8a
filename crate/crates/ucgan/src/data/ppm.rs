use std::fs;
use std::io::Write;
use std::path::Path;

use super::DataError;
use crate::autodiff::Scalar;

/// Writes a binary P6 image, maxval 255. `rgb` is interleaved row-major.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<(), DataError> {
    assert_eq!(rgb.len(), width * height * 3, "pixel buffer size");
    let mut buf = Vec::with_capacity(rgb.len() + 32);
    write!(buf, "P6\n{width} {height}\n255\n").expect("vec write");
    buf.extend_from_slice(rgb);
    fs::write(path, &buf).map_err(|e| DataError::io(path, e))
}

/// Reads a binary P6 image with maxval 255.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>), DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    let bad = |reason: &str| DataError::BadPpm {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };

    // header: magic, width, height, maxval as whitespace-separated tokens,
    // with '#' comments allowed between them
    fn next_token(bytes: &[u8], mut i: usize) -> Option<(usize, usize)> {
        loop {
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if i < bytes.len() && bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
                continue;
            }
            break;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        (start != i).then_some((start, i))
    }

    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    for _ in 0..4 {
        let (s, e) = next_token(&bytes, pos).ok_or_else(|| bad("truncated header"))?;
        fields.push(std::str::from_utf8(&bytes[s..e]).map_err(|_| bad("non-ascii header"))?);
        pos = e;
    }
    if fields[0] != "P6" {
        return Err(bad("not a P6 file"));
    }
    let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    if fields[3] != "255" {
        return Err(bad("maxval must be 255"));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing raster separator"));
    }
    pos += 1;
    let need = width * height * 3;
    if bytes.len() - pos != need {
        return Err(bad(&format!(
            "raster has {} bytes, expected {need}",
            bytes.len() - pos
        )));
    }
    Ok((width, height, bytes[pos..].to_vec()))
}

/// Interleaved RGB bytes -> channel planes in `[0, 1]` (shape `[3, h, w]`).
pub fn bytes_to_planes<T: Scalar>(rgb: &[u8], width: usize, height: usize) -> Vec<T> {
    assert_eq!(rgb.len(), width * height * 3);
    let hw = width * height;
    let mut out = vec![T::ZERO; 3 * hw];
    for p in 0..hw {
        for c in 0..3 {
            out[c * hw + p] = T::from_f64(rgb[p * 3 + c] as f64 / 255.0);
        }
    }
    out
}

/// Channel planes in `[0, 1]` -> interleaved RGB bytes, round-to-nearest.
pub fn planes_to_bytes<T: Scalar>(planes: &[T], width: usize, height: usize) -> Vec<u8> {
    let hw = width * height;
    assert_eq!(planes.len(), 3 * hw);
    let mut out = vec![0u8; hw * 3];
    for p in 0..hw {
        for c in 0..3 {
            let v = (planes[c * hw + p].to_f64() * 255.0).round().clamp(0.0, 255.0);
            out[p * 3 + c] = v as u8;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_dir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("ucgan-ppm-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tmp_dir();
        let path = dir.join("rt.ppm");
        let rgb: Vec<u8> = (0..4 * 2 * 3).map(|i| (i * 11 % 256) as u8).collect();
        write_ppm(&path, 4, 2, &rgb).unwrap();
        let (w, h, back) = read_ppm(&path).unwrap();
        assert_eq!((w, h), (4, 2));
        assert_eq!(back, rgb);
    }

    #[test]
    fn full_byte_maps_to_one() {
        let planes: Vec<f64> = bytes_to_planes(&[255, 0, 128], 1, 1);
        assert_eq!(planes[0], 1.0);
        assert_eq!(planes[1], 0.0);
        assert!((planes[2] - 128.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn plane_conversion_round_trips_bytes() {
        let rgb: Vec<u8> = (0..3 * 9).map(|i| (i * 29 % 256) as u8).collect();
        let planes: Vec<f64> = bytes_to_planes(&rgb, 3, 3);
        assert_eq!(planes_to_bytes(&planes, 3, 3), rgb);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        let dir = tmp_dir();
        let p5 = dir.join("bad.ppm");
        std::fs::write(&p5, b"P5\n2 2\n255\n0000").unwrap();
        assert!(matches!(read_ppm(&p5), Err(DataError::BadPpm { .. })));
        let short = dir.join("short.ppm");
        std::fs::write(&short, b"P6\n2 2\n255\n000").unwrap();
        assert!(matches!(read_ppm(&short), Err(DataError::BadPpm { .. })));
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tmp_dir();
        let path = dir.join("comment.ppm");
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        std::fs::write(&path, &bytes).unwrap();
        let (w, h, rgb) = read_ppm(&path).unwrap();
        assert_eq!((w, h, rgb), (1, 1, vec![1, 2, 3]));
    }
}
