//! Binary PPM (P6, maxval 255) images.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// 8-bit RGB image, pixels interleaved row-major as in the PPM payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::Format(format!(
                "{}x{} RGB image needs {} bytes, got {}",
                width,
                height,
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(RgbImage { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        RgbImage { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Channel-first `[3, H, W]` floats scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = vec![0.0; self.pixels.len()];
        self.write_chw(&mut data);
        Tensor::new(&[3, self.height, self.width], data).expect("pixel count matches shape")
    }

    /// Writes the `[3, H, W]` float layout into `out`.
    pub fn write_chw(&self, out: &mut [f64]) {
        let plane = self.width * self.height;
        for (p, rgb) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = rgb[c] as f64 / 255.0;
            }
        }
    }

    /// Inverse of [`RgbImage::to_tensor`], rounding to the nearest level.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Format(format!("expected a [3, H, W] tensor, got {:?}", s)));
        }
        let (h, w) = (s[1], s[2]);
        let plane = h * w;
        let mut pixels = vec![0u8; plane * 3];
        for p in 0..plane {
            for c in 0..3 {
                pixels[p * 3 + c] = (t.data()[c * plane + p] * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        RgbImage::new(w, h, pixels)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let magic = header_token(bytes, &mut pos)?;
        if magic != b"P6" {
            return Err(Error::Format(format!(
                "not a binary PPM: magic {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let mut number = |what: &str| -> Result<usize> {
            let tok = header_token(bytes, &mut pos)?;
            std::str::from_utf8(tok)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format(format!("PPM header: bad {what}")))
        };
        let width = number("width")?;
        let height = number("height")?;
        let maxval = number("maxval")?;
        if maxval != 255 {
            return Err(Error::Format(format!("PPM maxval {maxval} unsupported (only 8-bit, 255)")));
        }
        // exactly one whitespace byte separates the header from the payload
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(Error::Format("PPM header not terminated".into()));
        }
        pos += 1;
        let need = width * height * 3;
        let payload = &bytes[pos..];
        if payload.len() < need {
            return Err(Error::Format(format!(
                "PPM payload truncated: {} of {} bytes",
                payload.len(),
                need
            )));
        }
        RgbImage::new(width, height, payload[..need].to_vec())
    }
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("PPM header truncated".into()));
    }
    Ok(&bytes[start..*pos])
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    RgbImage::decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Decodes a P6 file into a `[3, H, W]` tensor in `[0, 1]`.
pub fn decode_image(path: &Path) -> Result<Tensor> {
    Ok(read_image(path)?.to_tensor())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_and_black() {
        let white = RgbImage::decode(&RgbImage::filled(2, 2, [255; 3]).encode()).unwrap();
        assert_eq!(white.to_tensor(), Tensor::full(&[3, 2, 2], 1.0));
        let black = RgbImage::decode(&RgbImage::filled(2, 2, [0; 3]).encode()).unwrap();
        assert_eq!(black.to_tensor(), Tensor::zeros(&[3, 2, 2]));
    }

    #[test]
    fn channel_first_layout() {
        let mut img = RgbImage::filled(2, 1, [0; 3]);
        img.set(1, 0, [255, 0, 51]);
        let t = img.to_tensor();
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.2]);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        assert!(matches!(RgbImage::decode(b"P3\n1 1\n255\n0 0 0"), Err(Error::Format(_))));
        assert!(matches!(RgbImage::decode(b"P6\n2 2\n255\n\x00\x00"), Err(Error::Format(m)) if m.contains("truncated")));
        assert!(matches!(RgbImage::decode(b"P6\n1 1\n65535\n\x00\x00\x00"), Err(Error::Format(_))));
        assert!(matches!(RgbImage::decode(b"P6\n1"), Err(Error::Format(_))));
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = RgbImage::decode(b"P6 # made by hand\n1 1\n255\n\x01\x02\x03").unwrap();
        assert_eq!(img.get(0, 0), [1, 2, 3]);
    }
}
