//! Binary (P5) 8-bit greymap images.

use std::fs;
use std::path::Path;

use crate::error::{CliError, CliResult};

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> CliResult<()> {
    assert_eq!(
        pixels.len(),
        width * height,
        "pixel count must match dimensions"
    );
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Read a P5 image with maxval 255, returning `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> CliResult<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let bad =
        |why: &str| CliError::Core(opunet::Error::Format(format!("{}: {why}", path.display())));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if bytes.get(pos) == Some(&b'#') {
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
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if max != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    if pos >= bytes.len() {
        return Err(bad("missing pixel data"));
    }
    let data = &bytes[pos + 1..];
    if data.len() != w * h {
        return Err(bad("pixel data length does not match header"));
    }
    Ok((w, h, data.to_vec()))
}

/// Quantize a probability to 0..=255, rounding half up.
pub fn quantize(p: f32) -> u8 {
    (p as f64 * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}
