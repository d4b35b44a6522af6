//! The `SPIC` bitstream container and whole-image encode/decode.
//!
//! Layout, little-endian throughout:
//!
//! | field        | size |
//! |--------------|------|
//! | magic `SPIC` | 4    |
//! | version = 1  | 1    |
//! | width        | 4    |
//! | height       | 4    |
//! | region mode  | 1    | 0 = external map, else grid side n
//! | region count | 1    |
//! | model hash   | 8    | FNV-1a 64 of the SPW1 weights
//! | 4 x (len u32, bytes) | p', p, z, y |
//! | crc32        | 4    | over every preceding byte
//!
//! Width and height are the true image dims; the codec works on the
//! reflect-padded image and crops after decoding.

use crate::entropy::latents::{code_latents, decode_latents, Substreams};
use crate::error::{Error, Result};
use crate::net::{Codec, Quantizer, StageMaps, PAD_MULTIPLE};
use crate::region::{grid_partition, reflect, RegionMap};
use crate::tensor::{Graph, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"SPIC";
pub const VERSION: u8 = 1;
/// Bytes outside the substream payloads.
pub const OVERHEAD: usize = 4 + 1 + 4 + 4 + 1 + 1 + 8 + 4 * 4 + 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Container {
    pub width: u32,
    pub height: u32,
    /// 0 for an external region map, otherwise the grid side.
    pub region_mode: u8,
    pub region_count: u8,
    pub model_hash: u64,
    pub streams: Substreams,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(OVERHEAD + self.streams.total_len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.push(self.region_mode);
        out.push(self.region_count);
        out.extend_from_slice(&self.model_hash.to_le_bytes());
        for s in self.streams.as_array() {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < OVERHEAD {
            return Err(Error::Decode(format!("container of {} bytes is too short", bytes.len())));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let crc = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != crc {
            return Err(Error::Decode("container checksum mismatch".into()));
        }
        if &body[..4] != MAGIC {
            return Err(Error::Decode("not a SPIC container".into()));
        }
        if body[4] != VERSION {
            return Err(Error::Decode(format!("unsupported container version {}", body[4])));
        }
        let u32_at = |i: usize| u32::from_le_bytes(body[i..i + 4].try_into().unwrap());
        let width = u32_at(5);
        let height = u32_at(9);
        let region_mode = body[13];
        let region_count = body[14];
        let model_hash = u64::from_le_bytes(body[15..23].try_into().unwrap());
        let mut pos = 23;
        let mut take = || -> Result<Vec<u8>> {
            let len = body.get(pos..pos + 4).ok_or_else(|| Error::Decode("truncated substream length".into()))?;
            let len = u32::from_le_bytes(len.try_into().unwrap()) as usize;
            let s = body.get(pos + 4..pos + 4 + len).ok_or_else(|| Error::Decode("truncated substream".into()))?;
            pos += 4 + len;
            Ok(s.to_vec())
        };
        let streams = Substreams { p_prime: take()?, p: take()?, z: take()?, y: take()? };
        if pos != body.len() {
            return Err(Error::Decode(format!("{} stray bytes after substreams", body.len() - pos)));
        }
        if width == 0 || height == 0 {
            return Err(Error::Decode("zero image dimension".into()));
        }
        Ok(Self { width, height, region_mode, region_count, model_hash, streams })
    }
}

/// Where the region map comes from.
#[derive(Clone, Debug)]
pub enum RegionSource {
    /// Deterministic `n x n` grid; only `n` is transmitted.
    Grid(usize),
    /// A map the decoder must be given out of band.
    External(RegionMap),
}

pub fn padded_dim(d: usize) -> usize {
    d.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE
}

/// Reflect-pad a `[C, H, W]` tensor at the bottom and right.
pub fn reflect_pad(x: &Tensor<f32>, height: usize, width: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    if height < h || width < w {
        return Err(Error::Dimension(format!("cannot pad {h}x{w} to {height}x{width}")));
    }
    Ok(Tensor::from_fn(&[c, height, width], |i| {
        let (ch, p) = (i / (height * width), i % (height * width));
        x.at3(ch, reflect(p / width, h), reflect(p % width, w))
    }))
}

pub fn crop(x: &Tensor<f32>, height: usize, width: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    if height > h || width > w {
        return Err(Error::Dimension(format!("cannot crop {h}x{w} to {height}x{width}")));
    }
    Ok(Tensor::from_fn(&[c, height, width], |i| {
        let (ch, p) = (i / (height * width), i % (height * width));
        x.at3(ch, p / width, p % width)
    }))
}

/// Full-resolution region map over the padded canvas.
fn region_map(source: &RegionSource, h: usize, w: usize) -> Result<(RegionMap, u8, u8)> {
    let (ph, pw) = (padded_dim(h), padded_dim(w));
    match source {
        RegionSource::Grid(n) => {
            if *n == 0 || n * n > crate::region::MAX_REGIONS {
                return Err(Error::Usage(format!("grid side {n} out of range 1..=8")));
            }
            let rm = grid_partition(h, w, *n)?.reflect_pad(ph, pw)?;
            Ok((rm, *n as u8, (n * n) as u8))
        }
        RegionSource::External(rm) => {
            if (rm.height(), rm.width()) != (h, w) {
                return Err(Error::Dimension(format!(
                    "region map is {}x{}, image is {h}x{w}",
                    rm.height(),
                    rm.width()
                )));
            }
            Ok((rm.reflect_pad(ph, pw)?, 0, rm.count() as u8))
        }
    }
}

/// Encoder output.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub bytes: Vec<u8>,
    /// Encoder-side reconstruction in `[0, 1]`, cropped to the true size.
    pub reconstruction: Tensor<f32>,
    /// Model estimate of the four rate terms in bits: `[p', p, z, y]`.
    pub estimated_bits: [f64; 4],
}

/// Encode a `[3, H, W]` image in `[0, 1]`.
pub fn encode_image(codec: &Codec, p: &ParamStore, image: &Tensor<f32>, source: &RegionSource) -> Result<Encoded> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 || s[1] == 0 || s[2] == 0 {
        return Err(Error::Dimension(format!("expected a [3, H, W] image, got {:?}", s)));
    }
    let (h, w) = (s[1], s[2]);
    if h > u32::MAX as usize || w > u32::MAX as usize {
        return Err(Error::Dimension("image too large".into()));
    }
    let (rm, mode, count) = region_map(source, h, w)?;
    let maps = StageMaps::new(&rm)?;
    let padded = reflect_pad(image, rm.height(), rm.width())?;
    let mut g = Graph::inference();
    let x = g.constant(padded);
    let f = codec.forward(&mut g, p, x, &maps, &mut Quantizer::Round)?;
    let symbols = f.symbols.clone().expect("round mode records symbols");
    let streams = code_latents(codec, p, &symbols, g.value(f.sigma))?;
    let recon = g.value(f.x_hat).map(|v| v.clamp(0.0, 1.0));
    let c = Container {
        width: w as u32,
        height: h as u32,
        region_mode: mode,
        region_count: count,
        model_hash: p.fingerprint(),
        streams,
    };
    let est = [f.bits_p_prime, f.bits_p, f.bits_z, f.bits_y].map(|v| g.scalar(v) as f64);
    Ok(Encoded { bytes: c.to_bytes(), reconstruction: crop(&recon, h, w)?, estimated_bits: est })
}

/// Decode a container. `external` is required when it was encoded with an
/// external region map.
pub fn decode_image(codec: &Codec, p: &ParamStore, bytes: &[u8], external: Option<&RegionMap>) -> Result<Tensor<f32>> {
    let c = Container::from_bytes(bytes)?;
    if c.model_hash != p.fingerprint() {
        return Err(Error::Consistency(format!(
            "container was made with model {:016x}, these weights are {:016x}",
            c.model_hash,
            p.fingerprint()
        )));
    }
    let (h, w) = (c.height as usize, c.width as usize);
    let source = match (c.region_mode, external) {
        (0, Some(rm)) => RegionSource::External(rm.clone()),
        (0, None) => return Err(Error::Usage("container needs the external region map it was encoded with".into())),
        (n, _) => RegionSource::Grid(n as usize),
    };
    let (rm, _, count) = region_map(&source, h, w)?;
    if count != c.region_count {
        return Err(Error::Consistency(format!("region count {} does not match header {}", count, c.region_count)));
    }
    let maps = StageMaps::new(&rm)?;
    let d = decode_latents(codec, p, &c.streams, &maps, rm.height(), rm.width())?;
    let recon = d.graph.value(d.x_hat).map(|v| v.clamp(0.0, 1.0));
    crop(&recon, h, w)
}

/// Encode then decode, failing if the decoder disagrees with the encoder.
pub fn self_test(codec: &Codec, p: &ParamStore, image: &Tensor<f32>, source: &RegionSource) -> Result<Encoded> {
    let enc = encode_image(codec, p, image, source)?;
    let external = match source {
        RegionSource::External(rm) => Some(rm),
        RegionSource::Grid(_) => None,
    };
    let dec = decode_image(codec, p, &enc.bytes, external)?;
    let same = dec.data().iter().zip(enc.reconstruction.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    if !same {
        return Err(Error::Consistency("decoder reconstruction differs from the encoder's".into()));
    }
    Ok(enc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trips_and_detects_corruption() {
        let c = Container {
            width: 70,
            height: 33,
            region_mode: 4,
            region_count: 16,
            model_hash: 0x0123_4567_89ab_cdef,
            streams: Substreams { p_prime: vec![1, 2, 3, 4], p: vec![], z: vec![9; 8], y: vec![7; 12] },
        };
        let b = c.to_bytes();
        assert_eq!(b.len(), OVERHEAD + 24);
        assert_eq!(&b[..4], b"SPIC");
        assert_eq!(Container::from_bytes(&b).unwrap(), c);
        let mut bad = b.clone();
        bad[30] ^= 1;
        assert!(matches!(Container::from_bytes(&bad), Err(Error::Decode(_))));
        assert!(Container::from_bytes(&b[..10]).is_err());
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let x = Tensor::from_fn(&[3, 5, 7], |i| i as f32);
        let p = reflect_pad(&x, 64, 64).unwrap();
        assert_eq!(p.at3(1, 5, 0), x.at3(1, 3, 0));
        assert_eq!(crop(&p, 5, 7).unwrap(), x);
        assert_eq!(padded_dim(65), 128);
        assert_eq!(padded_dim(64), 64);
    }
}
