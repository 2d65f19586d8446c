//! Heatmap and binary map files.
//!
//! Heatmaps are grayscale PFM (`Pf`), rows stored bottom to top as usual for
//! the format. Files are written little-endian (scale `-1.0`); both
//! endiannesses are read. Binary maps are PGM (`P5` or `P2`).

use crate::geometry::FrameDims;
use crate::saliency::{BinaryMap, Heatmap};
use crate::Error;
use std::io::Write;
use std::path::Path;

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), message: message.into() }
}

// Reads whitespace-separated header tokens, skipping `#` comments. Returns
// the tokens and the offset just past the single whitespace byte that
// terminates the last one.
fn header_tokens(bytes: &[u8], count: usize) -> Option<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return None;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() {
        return if tokens.len() == count { Some((tokens, i)) } else { None };
    }
    Some((tokens, i + 1))
}

fn parse_dims(path: &Path, w: &str, h: &str) -> Result<FrameDims, Error> {
    let w = w.parse().map_err(|_| format_err(path, format!("bad width {w:?}")))?;
    let h = h.parse().map_err(|_| format_err(path, format!("bad height {h:?}")))?;
    FrameDims::new(w, h)
}

pub fn decode_pfm(path: &Path, bytes: &[u8]) -> Result<Heatmap<f32>, Error> {
    let (tokens, offset) =
        header_tokens(bytes, 4).ok_or_else(|| format_err(path, "truncated PFM header"))?;
    match tokens[0].as_str() {
        "Pf" => {}
        "PF" => return Err(format_err(path, "color PFM not supported, expected grayscale Pf")),
        other => return Err(format_err(path, format!("not a PFM file (magic {other:?})"))),
    }
    let dims = parse_dims(path, &tokens[1], &tokens[2])?;
    let scale: f32 =
        tokens[3].parse().map_err(|_| format_err(path, format!("bad scale {:?}", tokens[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(format_err(path, "PFM scale must be nonzero"));
    }
    let little = scale < 0.0;
    let (w, h) = (dims.width as usize, dims.height as usize);
    let data = &bytes[offset..];
    if data.len() < w * h * 4 {
        return Err(format_err(path, format!("expected {} data bytes, found {}", w * h * 4, data.len())));
    }
    let mut values = vec![0f32; w * h];
    for (i, chunk) in data[..w * h * 4].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (file_row, col) = (i / w, i % w);
        values[(h - 1 - file_row) * w + col] = v;
    }
    Heatmap::clamped(dims, values)
}

pub fn read_pfm(path: &Path) -> Result<Heatmap<f32>, Error> {
    let bytes = std::fs::read(path)?;
    decode_pfm(path, &bytes)
}

pub fn encode_pfm(heatmap: &Heatmap<f32>) -> Vec<u8> {
    let d = heatmap.dims();
    let (w, h) = (d.width as usize, d.height as usize);
    let mut out = format!("Pf\n{} {}\n-1.0\n", d.width, d.height).into_bytes();
    out.reserve(w * h * 4);
    for row in (0..h).rev() {
        for v in &heatmap.values()[row * w..(row + 1) * w] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_pfm(path: &Path, heatmap: &Heatmap<f32>) -> Result<(), Error> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&encode_pfm(heatmap))?;
    f.flush()?;
    Ok(())
}

/// Reads a PGM as a binary map: a pixel is on when it is at least half of
/// `maxval`, rounded up (so `>= 1` for maxval 1 and `>= 128` for 255).
pub fn decode_pgm(path: &Path, bytes: &[u8]) -> Result<BinaryMap, Error> {
    let (tokens, offset) =
        header_tokens(bytes, 4).ok_or_else(|| format_err(path, "truncated PGM header"))?;
    let ascii = match tokens[0].as_str() {
        "P5" => false,
        "P2" => true,
        other => return Err(format_err(path, format!("not a PGM file (magic {other:?})"))),
    };
    let dims = parse_dims(path, &tokens[1], &tokens[2])?;
    let maxval: u32 =
        tokens[3].parse().map_err(|_| format_err(path, format!("bad maxval {:?}", tokens[3])))?;
    if maxval == 0 || maxval > 255 {
        return Err(format_err(path, format!("unsupported maxval {maxval}")));
    }
    let n = dims.area() as usize;
    let raw: Vec<u32> = if ascii {
        let text = String::from_utf8_lossy(&bytes[offset..]);
        let vals: Result<Vec<u32>, _> = text.split_ascii_whitespace().take(n).map(str::parse).collect();
        vals.map_err(|_| format_err(path, "bad ASCII sample"))?
    } else {
        bytes[offset..].iter().take(n).map(|&b| b as u32).collect()
    };
    if raw.len() < n {
        return Err(format_err(path, format!("expected {n} samples, found {}", raw.len())));
    }
    let bits = raw.into_iter().map(|v| (2 * v > maxval) as u8).collect();
    BinaryMap::new(dims, bits)
}

pub fn read_pgm(path: &Path) -> Result<BinaryMap, Error> {
    let bytes = std::fs::read(path)?;
    decode_pgm(path, &bytes)
}

/// Writes a binary map as `P5` with maxval 255.
pub fn write_pgm(path: &Path, map: &BinaryMap) -> Result<(), Error> {
    let d = map.dims();
    let mut out = format!("P5\n{} {}\n255\n", d.width, d.height).into_bytes();
    out.extend(map.bits().iter().map(|&b| b * 255));
    std::fs::write(path, out)?;
    Ok(())
}
