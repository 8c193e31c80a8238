//! Bit-exact artifact formats: binary PPM/PGM images, raw float planes,
//! and CSV traces.
//!
//! All writers are pure functions of their inputs (no timestamps, no
//! platform-dependent formatting), so rerunning a seeded experiment
//! reproduces every output byte for byte. Floats in CSV use Rust's
//! shortest round-trip formatting.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Result, SimError};

/// RGB image or texture, shape `(H, W, 3)`, values in `[0, 1]`.
pub type Rgb = Array3<f64>;

fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an RGB grid as binary PPM (P6, 8-bit).
pub fn write_ppm(path: &Path, image: &Rgb) -> Result<()> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(SimError::invalid("write_ppm expects an HxWx3 grid"));
    }
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{} {}\n255\n", w, h)?;
    let mut buf = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for col in 0..w {
            for ch in 0..3 {
                buf.push(quantize8(image[[r, col, ch]]));
            }
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Reads a binary PPM (P6, maxval 255) back into an RGB grid.
pub fn read_ppm(path: &Path) -> Result<Rgb> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let (w, h, offset) = parse_pnm_header(&bytes, b"P6")?;
    let need = w * h * 3;
    if bytes.len() < offset + need {
        return Err(SimError::Parse("ppm payload truncated".into()));
    }
    let mut image = Array3::zeros((h, w, 3));
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                image[[r, c, ch]] = bytes[offset + (r * w + c) * 3 + ch] as f64 / 255.0;
            }
        }
    }
    Ok(image)
}

/// Writes a single-channel grid as 16-bit binary PGM (P5, big-endian
/// samples per the PNM convention). Values are clamped to `[0, 1]` and
/// scaled to the `[0, 65535]` sample range.
pub fn write_pgm16(path: &Path, plane: &Array2<f64>) -> Result<()> {
    let (h, w) = plane.dim();
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{} {}\n65535\n", w, h)?;
    let mut buf = Vec::with_capacity(h * w * 2);
    for r in 0..h {
        for c in 0..w {
            let q = (plane[[r, c]].clamp(0.0, 1.0) * 65535.0).round() as u16;
            buf.extend_from_slice(&q.to_be_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Writes an RGB grid as raw 32-bit little-endian float planes
/// (all of R row-major, then G, then B; no header).
pub fn write_raw_f32(path: &Path, image: &Rgb) -> Result<()> {
    let (h, w, _) = image.dim();
    let mut out = BufWriter::new(File::create(path)?);
    for ch in 0..3 {
        for r in 0..h {
            for c in 0..w {
                out.write_all(&(image[[r, c, ch]] as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Reads raw float planes written by [`write_raw_f32`]; the caller supplies
/// the dimensions (they live in the accompanying config echo).
pub fn read_raw_f32(path: &Path, h: usize, w: usize) -> Result<Rgb> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() != h * w * 3 * 4 {
        return Err(SimError::Parse(format!(
            "raw f32 size mismatch: got {} bytes, expected {}",
            bytes.len(),
            h * w * 3 * 4
        )));
    }
    let mut image = Array3::zeros((h, w, 3));
    let mut idx = 0;
    for ch in 0..3 {
        for r in 0..h {
            for c in 0..w {
                let v = f32::from_le_bytes(bytes[idx..idx + 4].try_into().unwrap());
                image[[r, c, ch]] = v as f64;
                idx += 4;
            }
        }
    }
    Ok(image)
}

/// Writes rows as CSV with a header line. Cells are written verbatim;
/// callers format numbers with `Display` (shortest round-trip for floats).
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{}", header.join(","))?;
    for row in rows {
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

fn parse_pnm_header(bytes: &[u8], magic: &[u8]) -> Result<(usize, usize, usize)> {
    if !bytes.starts_with(magic) {
        return Err(SimError::Parse("bad PNM magic".into()));
    }
    let mut fields = Vec::new();
    let mut pos = magic.len();
    while fields.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(SimError::Parse("truncated PNM header".into()));
        }
        let text = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| SimError::Parse("non-utf8 PNM header".into()))?;
        fields.push(
            text.parse::<usize>()
                .map_err(|_| SimError::Parse("bad PNM header field".into()))?,
        );
    }
    // single whitespace byte separates header from payload
    pos += 1;
    if fields[2] != 255 {
        return Err(SimError::Parse("unsupported PNM maxval".into()));
    }
    Ok((fields[0], fields[1], pos))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn ppm_round_trip_is_lossless_at_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        let mut img = Array3::zeros((3, 4, 3));
        for (i, v) in img.iter_mut().enumerate() {
            *v = (i as f64 * 37.0 % 256.0) / 255.0;
        }
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() < 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn raw_f32_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.f32");
        let mut img = Array3::zeros((5, 2, 3));
        for (i, v) in img.iter_mut().enumerate() {
            *v = i as f64 * 0.03125;
        }
        write_raw_f32(&path, &img).unwrap();
        let back = read_raw_f32(&path, 5, 2).unwrap();
        for (a, b) in img.iter().zip(back.iter()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }
}
