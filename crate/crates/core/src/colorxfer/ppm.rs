//! Binary PPM (`P6`, maxval 255).

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{ColorError, ImageRgb, Result};

fn bad(msg: impl Into<String>) -> ColorError {
    ColorError::Ppm(msg.into())
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(format!("missing or invalid {what}")))
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageRgb> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(bad("not a binary PPM (expected P6 magic)"));
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(bad(format!("unsupported maxval {maxval}, only 255 is handled")));
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing whitespace after maxval"));
    }
    let data = &bytes[h.pos + 1..];
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| bad("image too large"))?;
    if data.len() < need {
        return Err(bad(format!("raster truncated: {} of {need} bytes", data.len())));
    }
    ImageRgb::new(width, height, data[..need].to_vec())
}

pub fn encode_ppm(image: &ImageRgb) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend_from_slice(image.pixels());
    out
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<ImageRgb> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    decode_ppm(&bytes).map_err(|e| bad(format!("{}: {e}", path.display())))
}

pub fn write_ppm(path: impl AsRef<Path>, image: &ImageRgb) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    f.write_all(&encode_ppm(image))
        .map_err(|e| bad(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bytes() {
        let img = ImageRgb::new(2, 1, vec![0, 10, 255, 7, 8, 9]).unwrap();
        let bytes = encode_ppm(&img);
        assert_eq!(&bytes[..11], b"P6\n2 1\n255\n");
        assert_eq!(decode_ppm(&bytes).unwrap(), img);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P6 # made by hand\n1 # w\n1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        assert_eq!(decode_ppm(&bytes).unwrap().pixels(), &[1, 2, 3]);
    }

    #[test]
    fn rejects_other_formats() {
        assert!(decode_ppm(b"P3\n1 1\n255\n1 2 3").is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\0\0\0").is_err());
        assert!(decode_ppm(b"").is_err());
    }

    #[test]
    fn raster_may_start_with_whitespace_bytes() {
        // a first pixel value of 10 is '\n'
        let img = ImageRgb::new(1, 1, vec![10, 32, 9]).unwrap();
        assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
    }
}
