//! Binary PGM (P5, maxval 255) images and tiled grids.

use std::fs;
use std::io;
use std::path::Path;

/// Gray level of a probability in [0, 1].
pub fn gray(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> io::Result<()> {
    fs::write(path, encode_pgm(width, height, pixels))
}

/// Parses a P5 image with maxval 255 into `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Option<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return None;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return None;
    }
    let (w, h): (usize, usize) = (fields[1].parse().ok()?, fields[2].parse().ok()?);
    let data = bytes.get(pos + 1..)?;
    (data.len() == w * h).then(|| (w, h, data.to_vec()))
}

/// Separator gray between tiles.
pub const SEPARATOR: u8 = 128;

/// Tiles `rows x cols` square cells of side `side` (row-major) with
/// 1-pixel separators.
pub fn tile(cells: &[Vec<u8>], rows: usize, cols: usize, side: usize) -> (usize, usize, Vec<u8>) {
    assert_eq!(cells.len(), rows * cols, "cell count");
    let w = cols * side + cols.saturating_sub(1);
    let h = rows * side + rows.saturating_sub(1);
    let mut out = vec![SEPARATOR; w * h];
    for (i, cell) in cells.iter().enumerate() {
        let (top, left) = ((i / cols) * (side + 1), (i % cols) * (side + 1));
        for y in 0..side {
            let dst = (top + y) * w + left;
            out[dst..dst + side].copy_from_slice(&cell[y * side..(y + 1) * side]);
        }
    }
    (w, h, out)
}
