//! Turning quantized latents into the four substreams and back.

use super::{RangeDecoder, RangeEncoder, TableCache};
use crate::error::{dim_err, Error, Result};
use crate::net::{dequantize, Codec, ProtoCodec, StageMaps, Symbols};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Coded payloads in transmission order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Substreams {
    pub p_prime: Vec<u8>,
    pub p: Vec<u8>,
    pub z: Vec<u8>,
    pub y: Vec<u8>,
}

impl Substreams {
    pub fn total_len(&self) -> usize {
        self.p_prime.len() + self.p.len() + self.z.len() + self.y.len()
    }

    pub fn as_array(&self) -> [&[u8]; 4] {
        [&self.p_prime, &self.p, &self.z, &self.y]
    }
}

fn encode_factorized(cache: &mut TableCache, symbols: &[i32], scales: &[f64], inner: usize) -> Result<Vec<u8>> {
    let mut enc = RangeEncoder::new();
    for (i, &s) in symbols.iter().enumerate() {
        enc.encode(cache.logistic(scales[(i / inner) % scales.len()])?, s)?;
    }
    Ok(enc.finish())
}

fn decode_factorized(cache: &mut TableCache, bytes: &[u8], count: usize, scales: &[f64], inner: usize) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(bytes);
    let out = (0..count)
        .map(|i| Ok(dec.decode(cache.logistic(scales[(i / inner) % scales.len()])?)))
        .collect::<Result<Vec<i32>>>()?;
    if dec.overran() {
        return Err(Error::Decode("substream ended early".into()));
    }
    Ok(out)
}

/// Code the symbols of a round-mode forward pass. `sigma` is the scale map
/// that pass produced for `y`.
pub fn code_latents(codec: &Codec, p: &ParamStore, symbols: &Symbols, sigma: &Tensor<f32>) -> Result<Substreams> {
    if symbols.y.len() != sigma.numel() {
        return Err(dim_err!("{} y symbols for {} scales", symbols.y.len(), sigma.numel()));
    }
    let mut cache = TableCache::new();
    let zc = codec.cfg.z_channels();
    if symbols.z.len() % zc != 0 {
        return Err(dim_err!("{} z symbols for {zc} channels", symbols.z.len()));
    }
    let (_, zs) = codec.z_model(p)?;
    let p_prime = encode_factorized(&mut cache, &symbols.p_prime, &codec.proto_prime.scales(p)?, 1)?;
    let pp = encode_factorized(&mut cache, &symbols.p, &codec.proto.scales(p)?, 1)?;
    let z = encode_factorized(&mut cache, &symbols.z, &zs, symbols.z.len() / zc)?;
    let mut enc = RangeEncoder::new();
    for (&s, &sd) in symbols.y.iter().zip(sigma.data()) {
        enc.encode(cache.gaussian(sd as f64)?, s)?;
    }
    Ok(Substreams { p_prime, p: pp, z, y: enc.finish() })
}

/// Decoder-side state after parsing all four substreams.
pub struct DecodedLatents {
    pub graph: Graph<f32>,
    pub y_hat: Var,
    pub p_prime_hat: Var,
    pub p_hat: Var,
    pub mu: Var,
    pub sigma: Var,
    pub x_hat: Var,
    pub symbols: Symbols,
}

fn decode_protos(
    g: &mut Graph<f32>,
    p: &ParamStore,
    pc: &ProtoCodec,
    cache: &mut TableCache,
    bytes: &[u8],
    regions: usize,
) -> Result<(Var, Vec<i32>)> {
    let d = pc.code_dim();
    let syms = decode_factorized(cache, bytes, regions * d, &pc.scales(p)?, 1)?;
    let loc = pc.loc_values(p)?;
    let centers: Vec<f32> = (0..regions * d).map(|i| loc[i % d]).collect();
    let codes = g.constant(Tensor::new(&[regions, d], dequantize(&syms, &centers))?);
    Ok((pc.synthesize(g, p, codes)?, syms))
}

/// Rebuild `ŷ`, `p̂'`, `p̂` and the unclamped reconstruction from the
/// substreams. `height`/`width` are the padded dims.
pub fn decode_latents(codec: &Codec, p: &ParamStore, streams: &Substreams, maps: &StageMaps, height: usize, width: usize) -> Result<DecodedLatents> {
    let mut g = Graph::inference();
    let mut cache = TableCache::new();
    let (p_prime_hat, s1) = decode_protos(&mut g, p, &codec.proto_prime, &mut cache, &streams.p_prime, maps.s4.count())?;
    let (p_hat, s2) = decode_protos(&mut g, p, &codec.proto, &mut cache, &streams.p, maps.s16.count())?;

    let zc = codec.cfg.z_channels();
    let (zh, zw) = (height / 64, width / 64);
    let (zloc, zs) = codec.z_model(p)?;
    let sz = decode_factorized(&mut cache, &streams.z, zc * zh * zw, &zs, zh * zw)?;
    let centers: Vec<f32> = (0..sz.len()).map(|i| zloc[i / (zh * zw)]).collect();
    let z_hat = g.constant(Tensor::new(&[zc, zh, zw], dequantize(&sz, &centers))?);

    let (mu, sigma) = codec.hyper_decode(&mut g, p, z_hat, p_hat, &maps.s16)?;
    let mut dec = RangeDecoder::new(&streams.y);
    let sy = g
        .value(sigma)
        .data()
        .iter()
        .map(|&s| Ok(dec.decode(cache.gaussian(s as f64)?)))
        .collect::<Result<Vec<i32>>>()?;
    if dec.overran() {
        return Err(Error::Decode("y substream ended early".into()));
    }
    let yv = dequantize(&sy, g.value(mu).data());
    let y_hat = g.constant(Tensor::new(g.shape(mu), yv)?);
    let x_hat = codec.synthesize(&mut g, p, y_hat, p_prime_hat, &maps.s4)?;
    Ok(DecodedLatents {
        graph: g,
        y_hat,
        p_prime_hat,
        p_hat,
        mu,
        sigma,
        x_hat,
        symbols: Symbols { p_prime: s1, p: s2, z: sz, y: sy },
    })
}
