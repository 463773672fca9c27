//! Binary PPM (P6) and PGM (P5) images with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Nearest 8-bit level of a value in `[0, 1]` (clamped).
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn level<T: Scalar>(b: u8) -> T {
    T::lit(b as f64 / 255.0)
}

/// Rounds every value to its 8-bit level.
pub fn quantize_tensor<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| level(quantize(v.as_f64())))
}

fn encode(magic: &str, w: usize, h: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a P5/P6 header; returns `(width, height, payload offset)`.
fn header(bytes: &[u8], magic: &[u8; 2]) -> std::result::Result<(usize, usize, usize), String> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format!("expected magic {}", String::from_utf8_lossy(magic)));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("malformed header number")?;
    }
    if fields[2] != 255 {
        return Err(format!("unsupported maxval {}", fields[2]));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing separator after header".into());
    }
    Ok((fields[0], fields[1], pos + 1))
}

fn read(path: &Path, magic: &[u8; 2], channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, off) = header(&bytes, magic).map_err(|r| Error::format("pnm", format!("{}: {r}", path.display())))?;
    let need = w * h * channels;
    if w == 0 || h == 0 || bytes.len() - off < need {
        return Err(Error::format("pnm", format!("{}: payload shorter than {w}x{h}", path.display())));
    }
    Ok((w, h, bytes[off..off + need].to_vec()))
}

/// Writes a `[3, H, W]` image.
pub fn write_ppm<T: Scalar>(path: impl AsRef<Path>, img: &Tensor<T>) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Geometry(format!("expected a [3, H, W] image, got {s:?}")));
    }
    let hw = s[1] * s[2];
    let d = img.data();
    let pixels: Vec<u8> = (0..3 * hw).map(|i| quantize(d[(i % 3) * hw + i / 3].as_f64())).collect();
    let path = path.as_ref();
    fs::write(path, encode("P6", s[2], s[1], &pixels)).map_err(|e| Error::io(path, e))
}

/// Reads a P6 file into a `[3, H, W]` tensor in `[0, 1]`.
pub fn read_ppm<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let (w, h, px) = read(path.as_ref(), b"P6", 3)?;
    let hw = w * h;
    Tensor::new(&[3, h, w], (0..3 * hw).map(|i| level(px[(i % hw) * 3 + i / hw])).collect())
}

/// Writes a `[H, W]` mask as 0/255 after thresholding at one half.
pub fn write_pgm_mask<T: Scalar>(path: impl AsRef<Path>, mask: &Tensor<T>) -> Result<()> {
    let s = mask.shape();
    if s.len() != 2 {
        return Err(Error::Geometry(format!("expected a [H, W] mask, got {s:?}")));
    }
    let pixels: Vec<u8> = mask.data().iter().map(|v| if v.as_f64() >= 0.5 { 255 } else { 0 }).collect();
    let path = path.as_ref();
    fs::write(path, encode("P5", s[1], s[0], &pixels)).map_err(|e| Error::io(path, e))
}

/// Reads a P5 file as a binary `[H, W]` mask (nonzero samples are object).
pub fn read_pgm_mask<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let (w, h, px) = read(path.as_ref(), b"P5", 1)?;
    Tensor::new(&[h, w], px.iter().map(|&b| if b >= 128 { T::one() } else { T::zero() }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_exact_after_quantisation() {
        let dir = tempfile::tempdir().unwrap();
        let img = quantize_tensor(&Tensor::<f32>::from_fn(&[3, 4, 5], |i| (i as f32 * 0.071) % 1.0));
        let p = dir.path().join("a.ppm");
        write_ppm(&p, &img).unwrap();
        assert_eq!(read_ppm::<f32>(&p).unwrap(), img);
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P6\n5 4\n255\n"));
        assert_eq!(bytes.len(), 11 + 60);
    }

    #[test]
    fn pgm_round_trip_and_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let m = Tensor::<f64>::new(&[2, 3], vec![0.0, 0.49, 0.5, 1.0, 0.7, 0.2]).unwrap();
        let p = dir.path().join("m.pgm");
        write_pgm_mask(&p, &m).unwrap();
        let back = read_pgm_mask::<f64>(&p).unwrap();
        assert_eq!(back.data(), &[0.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn header_comments_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        fs::write(&p, b"P5\n# made by hand\n2 1\n255\n\x00\xff").unwrap();
        assert_eq!(read_pgm_mask::<f32>(&p).unwrap().data(), &[0.0, 1.0]);
        fs::write(&p, b"P5\n2 2\n255\n\x00").unwrap();
        assert!(matches!(read_pgm_mask::<f32>(&p), Err(Error::Format { .. })));
        fs::write(&p, b"P6\n1 1\n255\n\x00\x00\x00").unwrap();
        assert!(matches!(read_pgm_mask::<f32>(&p), Err(Error::Format { .. })));
        assert!(matches!(read_ppm::<f32>(dir.path().join("missing.ppm")), Err(Error::Io { .. })));
    }
}
