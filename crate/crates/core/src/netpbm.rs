//! Binary PPM (P6) and PGM (P5) reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit interleaved RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Grayscale raster with up to 16-bit samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: u32,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::Parse("not a netpbm file".into()));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        // whitespace and comments may precede every header field
        loop {
            match bytes.get(pos) {
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&c) = bytes.get(pos) {
                        pos += 1;
                        if c == b'\n' || c == b'\r' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(Error::Parse("truncated netpbm header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse("malformed netpbm header field".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::Parse("netpbm header value out of range".into()))?;
    }
    match bytes.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Parse("missing whitespace after netpbm maxval".into())),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::Parse(format!("invalid netpbm dimensions {width}x{height} maxval {maxval}")));
    }
    Ok(Header { magic, width: width as usize, height: height as usize, maxval, data_start: pos })
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::Dimension(format!("{width}x{height} RGB image needs {} bytes", width * height * 3)));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let h = parse_header(bytes)?;
        if &h.magic != b"P6" {
            return Err(Error::Parse("expected a binary PPM (P6)".into()));
        }
        if h.maxval > 255 {
            return Err(Error::Parse("only 8-bit PPM is supported".into()));
        }
        let n = h.width * h.height * 3;
        let raster = bytes
            .get(h.data_start..h.data_start + n)
            .ok_or_else(|| Error::Parse("truncated PPM raster".into()))?;
        let pixels = if h.maxval == 255 {
            raster.to_vec()
        } else {
            raster.iter().map(|&v| ((v as u32 * 255 + h.maxval / 2) / h.maxval) as u8).collect()
        };
        Ok(Self { width: h.width, height: h.height, pixels })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    /// Planar `[3, H, W]` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let plane = self.width * self.height;
        Tensor::from_fn(&[3, self.height, self.width], |i| {
            let (c, p) = (i / plane, i % plane);
            self.pixels[p * 3 + c] as f32 / 255.0
        })
    }

    /// Quantize a `[3, H, W]` tensor in `[0, 1]` to 8 bits.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Dimension(format!("expected [3,H,W], got {:?}", s)));
        }
        let (h, w) = (s[1], s[2]);
        let plane = h * w;
        let mut pixels = vec![0u8; plane * 3];
        for (i, &v) in t.data().iter().enumerate() {
            let (c, p) = (i / plane, i % plane);
            pixels[p * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        Ok(Self { width: w, height: h, pixels })
    }
}

impl GrayImage {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let h = parse_header(bytes)?;
        if &h.magic != b"P5" {
            return Err(Error::Parse("expected a binary PGM (P5)".into()));
        }
        let n = h.width * h.height;
        let wide = h.maxval > 255;
        let len = if wide { 2 * n } else { n };
        let raster = bytes
            .get(h.data_start..h.data_start + len)
            .ok_or_else(|| Error::Parse("truncated PGM raster".into()))?;
        let samples: Vec<u16> = if wide {
            raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        } else {
            raster.iter().map(|&v| v as u16).collect()
        };
        if samples.iter().any(|&v| v as u32 > h.maxval) {
            return Err(Error::Parse("PGM sample exceeds maxval".into()));
        }
        Ok(Self { width: h.width, height: h.height, maxval: h.maxval as u16, samples })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval > 255 {
            for v in &self.samples {
                out.extend_from_slice(&v.to_be_bytes());
            }
        } else {
            out.extend(self.samples.iter().map(|&v| v as u8));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_with_comments_round_trips() {
        let mut bytes = b"P6 # comment\n2 1\n# another\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 250, 251, 252]);
        let img = RgbImage::decode(&bytes).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(RgbImage::decode(&img.encode()).unwrap(), img);
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(RgbImage::from_tensor(&t).unwrap(), img);
    }

    #[test]
    fn pgm_16bit_is_big_endian() {
        let g = GrayImage { width: 2, height: 1, maxval: 1000, samples: vec![7, 999] };
        let b = g.encode();
        assert_eq!(&b[b.len() - 4..], &[0, 7, 3, 231]);
        assert_eq!(GrayImage::decode(&b).unwrap(), g);
    }

    #[test]
    fn malformed_headers_are_parse_errors() {
        assert!(matches!(RgbImage::decode(b"P3\n1 1\n255\n"), Err(Error::Parse(_))));
        assert!(matches!(RgbImage::decode(b"P6\n1 x\n255\n"), Err(Error::Parse(_))));
        assert!(matches!(RgbImage::decode(b"P6\n2 2\n255\n\0\0"), Err(Error::Parse(_))));
        assert!(matches!(GrayImage::decode(b"P5\n1 1\n0\n\0"), Err(Error::Parse(_))));
    }
}
