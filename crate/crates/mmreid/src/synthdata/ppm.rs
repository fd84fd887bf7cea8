//! Binary PPM (P6) image files, 8 bits per channel.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Quantize `[0, 1]` floats to bytes and write a P6 file.
pub fn write_ppm(path: &Path, pixels: &[f64], width: usize, height: usize) -> Result<()> {
    if pixels.len() != width * height * 3 {
        return Err(Error::Data(format!(
            "ppm write: {} values for {}x{}",
            pixels.len(),
            width,
            height
        )));
    }
    let mut buf = Vec::with_capacity(pixels.len() + 32);
    write!(buf, "P6\n{width} {height}\n255\n")?;
    buf.extend(
        pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(path, buf)?;
    Ok(())
}

/// Read a P6 file back to `[0, 1]` floats. Returns `(pixels, width, height)`.
pub fn read_ppm(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));

    // header: magic, width, height, maxval, separated by whitespace,
    // then a single whitespace byte before the raster
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(&bytes[start..pos]);
    }
    if fields[0] != b"P6" {
        return Err(bad("not a P6 file"));
    }
    let parse = |f: &[u8]| -> Result<usize> {
        std::str::from_utf8(f)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad header field"))
    };
    let width = parse(fields[1])?;
    let height = parse(fields[2])?;
    if parse(fields[3])? != 255 {
        return Err(bad("expected maxval 255"));
    }
    pos += 1; // the single whitespace after maxval
    let n = width * height * 3;
    let raster = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated raster"))?;
    if pos + n != bytes.len() {
        return Err(bad("trailing bytes after raster"));
    }
    Ok((raster.iter().map(|&b| b as f64 / 255.0).collect(), width, height))
}
