//! Binary 8-bit PPM (P6) and PGM (P5).

use std::fs;
use std::path::Path;

use patchwise::PixelImage;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PnmError {
    #[error("malformed header: {0}")]
    Header(String),
    #[error("unsupported maxval {0} (only 8-bit, maxval 255)")]
    Maxval(u32),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("cannot write {0}-channel image (need 1 or 3)")]
    Channels(usize),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Maps `[0, 1]` to `0..=255` with round-half-up; values outside are clamped.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn encode(img: &PixelImage) -> Result<Vec<u8>, PnmError> {
    let magic = match img.channels() {
        1 => "P5",
        3 => "P6",
        c => return Err(PnmError::Channels(c)),
    };
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.reserve(c * h * w);
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                out.push(quantize(img.get(ch, r, col)));
            }
        }
    }
    Ok(out)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32, PnmError> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PnmError::Header(format!("bad {what}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<PixelImage, PnmError> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(PnmError::Header("expected P5 or P6 magic".into())),
    };
    let mut hdr = Header { bytes, pos: 2 };
    let w = hdr.number("width")? as usize;
    let h = hdr.number("height")? as usize;
    let maxval = hdr.number("maxval")?;
    if w == 0 || h == 0 {
        return Err(PnmError::Header(format!("empty image {w}x{h}")));
    }
    if maxval != 255 {
        return Err(PnmError::Maxval(maxval));
    }
    match bytes.get(hdr.pos) {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => return Err(PnmError::Header("missing separator after maxval".into())),
    }
    let payload = &bytes[hdr.pos + 1..];
    let expected = channels * h * w;
    if payload.len() < expected {
        return Err(PnmError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    Ok(PixelImage::from_fn(channels, h, w, |c, r, col| {
        payload[(r * w + col) * channels + c] as f64 / 255.0
    }))
}

pub fn read_image(path: &Path) -> Result<PixelImage, PnmError> {
    let bytes = fs::read(path).map_err(|source| PnmError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

pub fn write_image(img: &PixelImage, path: &Path) -> Result<(), PnmError> {
    fs::write(path, encode(img)?).map_err(|source| PnmError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn black_pixel_bytes() {
        let img = PixelImage::from_fn(3, 1, 1, |_, _, _| 0.0);
        let bytes = encode(&img).unwrap();
        assert_eq!(bytes, b"P6\n1 1\n255\n\x00\x00\x00");
    }

    #[test]
    fn round_half_up() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(0.49 / 255.0), 0);
        assert_eq!(quantize(-3.0), 0);
        assert_eq!(quantize(7.0), 255);
    }

    #[test]
    fn roundtrip_within_one_level() {
        for channels in [1, 3] {
            let img = PixelImage::from_fn(channels, 5, 7, |c, r, col| {
                ((c * 13 + r * 7 + col * 3) as f64 * 0.137).fract()
            });
            let back = decode(&encode(&img).unwrap()).unwrap();
            assert_eq!(
                (back.channels(), back.height(), back.width()),
                (channels, 5, 7)
            );
            assert!(back.max_abs_diff(&img) <= 1.0 / 255.0 + 1e-9);
        }
    }

    #[test]
    fn header_comments_and_whitespace() {
        let img = decode(b"P5 # gray\n2\t1\n# depth\n255\n\x00\xff").unwrap();
        assert_eq!(img.data(), &[0.0, 1.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            decode(b"P6\n1 1\n65535\n\0\0\0\0\0\0"),
            Err(PnmError::Maxval(65535))
        ));
        assert!(matches!(
            decode(b"P3\n1 1\n255\n0 0 0"),
            Err(PnmError::Header(_))
        ));
        assert!(matches!(
            decode(b"P6\n1 x\n255\n"),
            Err(PnmError::Header(_))
        ));
        assert!(matches!(
            decode(b"P6\n2 2\n255\n\0\0\0"),
            Err(PnmError::Truncated {
                expected: 12,
                found: 3
            })
        ));
        assert!(matches!(decode(b"P6\n1 1\n255"), Err(PnmError::Header(_))));
        let two = PixelImage::from_fn(2, 1, 1, |_, _, _| 0.0);
        assert!(matches!(encode(&two), Err(PnmError::Channels(2))));
    }
}
