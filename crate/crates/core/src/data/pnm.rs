//! Binary PGM (P5) and PPM (P6) images with maxval 255.

use std::path::Path;

use crate::error::{Result, TensorError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    /// Interleaved samples, row-major.
    pub data: Vec<u8>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Option<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).ok()?.parse().ok()
    }
}

/// Parses a P5 or P6 file; `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Image> {
    let bad = |m: &str| TensorError::format(path, m);
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(bad("malformed header: expected P5 or P6 magic")),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number().ok_or_else(|| bad("malformed header: width"))?;
    let height = h.number().ok_or_else(|| bad("malformed header: height"))?;
    let maxval = h.number().ok_or_else(|| bad("malformed header: maxval"))?;
    if width == 0 || height == 0 {
        return Err(bad("malformed header: zero extent"));
    }
    if maxval != 255 {
        return Err(bad(&format!("unsupported maxval {maxval} (only 255)")));
    }
    match bytes.get(h.pos) {
        Some(c) if c.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(bad("malformed header: missing separator")),
    }
    let len = width * height * channels;
    let data = bytes
        .get(h.pos..h.pos + len)
        .ok_or_else(|| bad(&format!("expected {len} pixel bytes")))?
        .to_vec();
    Ok(Image {
        width,
        height,
        channels,
        data,
    })
}

pub fn encode(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| TensorError::io(path, e))?;
    decode(&bytes, path)
}

pub fn write(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, encode(img)).map_err(|e| TensorError::io(path, e))
}

/// Channel-first floats in [0, 1] with three channels; grayscale is
/// replicated.
pub fn to_chw(img: &Image) -> Vec<f32> {
    let plane = img.width * img.height;
    let mut out = vec![0.0f32; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            let src = if img.channels == 1 { p } else { p * 3 + c };
            out[c * plane + p] = img.data[src] as f32 / 255.0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_ppm_is_ones() {
        let img = Image {
            width: 2,
            height: 2,
            channels: 3,
            data: vec![255; 12],
        };
        let back = decode(&encode(&img), Path::new("w.ppm")).unwrap();
        assert_eq!(to_chw(&back), vec![1.0; 12]);
    }

    #[test]
    fn gray_is_replicated() {
        let img = Image {
            width: 2,
            height: 1,
            channels: 1,
            data: vec![0, 51],
        };
        assert_eq!(to_chw(&img), vec![0.0, 0.2, 0.0, 0.2, 0.0, 0.2]);
    }

    #[test]
    fn comments_in_header() {
        let bytes = b"P5\n# made by hand\n3 1\n# max\n255\n\x01\x02\x03";
        let img = decode(bytes, Path::new("c.pgm")).unwrap();
        assert_eq!((img.width, img.height, img.data.clone()), (3, 1, vec![1, 2, 3]));
    }

    #[test]
    fn malformed_header_names_path() {
        let err = decode(b"P3\n1 1\n255\n0", Path::new("bad.ppm")).unwrap_err();
        assert!(err.to_string().contains("bad.ppm"));
        let err = decode(b"P5\n4 4\n255\n\x00", Path::new("short.pgm")).unwrap_err();
        assert!(err.to_string().contains("short.pgm"));
    }
}
