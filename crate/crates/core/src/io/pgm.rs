//! Binary grayscale PGM (P5, maxval 255).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn bad(detail: impl Into<String>) -> Error {
    Error::Format { what: "pgm", detail: detail.into() }
}

/// Raw 8-bit plane.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray8 {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    /// Skips whitespace and `#` comments, then reads one token.
    fn token(&mut self, field: &str) -> Result<&[u8]> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(bad(format!("{field}: missing (header truncated)"))),
            }
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#') {
            self.pos += 1;
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self, field: &str) -> Result<usize> {
        let tok = self.token(field)?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| bad(format!("{field}: not a number: {:?}", String::from_utf8_lossy(tok))))
    }
}

pub fn decode_gray8(bytes: &[u8]) -> Result<Gray8> {
    let mut h = Header { bytes, pos: 0 };
    let magic = h.token("magic")?;
    if magic != b"P5" {
        return Err(bad(format!("magic: expected P5, found {:?}", String::from_utf8_lossy(magic))));
    }
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(bad(format!("width/height: empty image {width}x{height}")));
    }
    if maxval != 255 {
        return Err(bad(format!("maxval: expected 255, found {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("payload: missing separator after maxval"));
    }
    let payload = &bytes[h.pos + 1..];
    let n = width
        .checked_mul(height)
        .ok_or_else(|| bad(format!("width/height: {width}x{height} overflows")))?;
    if payload.len() != n {
        return Err(bad(format!("payload: expected {n} bytes, found {}", payload.len())));
    }
    Ok(Gray8 { height, width, pixels: payload.to_vec() })
}

pub fn encode_gray8(img: &Gray8) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Decodes to a `[1, 1, H, W]` tensor of `level / 255`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let g = decode_gray8(bytes)?;
    Tensor::image(g.height, g.width, g.pixels.iter().map(|&b| b as f64 / 255.0).collect())
}

/// Clamps to [0, 1] and rounds half up to 8 bits.
pub fn encode_pgm(img: &Tensor) -> Result<Vec<u8>> {
    let (n, c, height, width) = img.dims4()?;
    if n != 1 || c != 1 {
        return Err(Error::shape(format!("PGM holds one grayscale image, got N={n}, C={c}")));
    }
    if !img.is_finite() {
        return Err(Error::NonFinite("image to save contains NaN or infinity".into()));
    }
    let pixels = img.data().iter().map(|&v| crate::metrics::quantize(v)).collect();
    Ok(encode_gray8(&Gray8 { height, width, pixels }))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_pgm(&fs::read(path)?)
}

pub fn write_pgm(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    Ok(fs::write(path, encode_pgm(img)?)?)
}

pub fn read_gray8(path: impl AsRef<Path>) -> Result<Gray8> {
    decode_gray8(&fs::read(path)?)
}

pub fn write_gray8(path: impl AsRef<Path>, img: &Gray8) -> Result<()> {
    Ok(fs::write(path, encode_gray8(img))?)
}
