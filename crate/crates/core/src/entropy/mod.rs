//! Quantization, likelihood models and entropy coding.

pub mod cdf;
pub mod latents;
pub mod range;

use std::collections::HashMap;

use rand::Rng;

pub use cdf::CdfTable;
pub use range::{range_decode, range_encode, RangeDecoder, RangeEncoder};

use crate::error::{dim_err, Error, Result};
use crate::tensor::graph::{gaussian_mass, logistic_mass};
use crate::tensor::{Graph, Real, Tensor, Var, LIKELIHOOD_FLOOR};

pub const SIGMA_MIN: f64 = 1e-4;
pub const SIGMA_MAX: f64 = 1e4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Additive `U(-0.5, 0.5)` noise (training).
    Noise,
    /// `round(y - mu) + mu` (inference).
    Round,
}

/// Per-element Gaussian parameters over a latent.
#[derive(Clone, Debug)]
pub struct GaussianParams<T: Real = f32> {
    pub mu: Tensor<T>,
    pub sigma: Tensor<T>,
}

impl<T: Real> GaussianParams<T> {
    pub fn new(mu: Tensor<T>, sigma: Tensor<T>) -> Result<Self> {
        if mu.shape() != sigma.shape() {
            return Err(dim_err!("mu {:?} vs sigma {:?}", mu.shape(), sigma.shape()));
        }
        check_sigma(&sigma)?;
        Ok(Self { mu, sigma })
    }
}

fn check_sigma<T: Real>(sigma: &Tensor<T>) -> Result<()> {
    match sigma.data().iter().find(|s| !(s.f64() >= SIGMA_MIN && s.f64() <= SIGMA_MAX)) {
        Some(s) => Err(Error::Numeric(format!("sigma {} outside [{SIGMA_MIN}, {SIGMA_MAX}]", s.f64()))),
        None => Ok(()),
    }
}

/// Quantize a plain tensor. `mu` is only used by round mode.
pub fn quantize<T: Real>(y: &Tensor<T>, mu: &Tensor<T>, mode: QuantMode, rng: &mut impl Rng) -> Result<Tensor<T>> {
    if y.shape() != mu.shape() {
        return Err(dim_err!("quantize: y {:?} vs mu {:?}", y.shape(), mu.shape()));
    }
    let out = match mode {
        QuantMode::Noise => y.data().iter().map(|&v| v + T::lit(rng.gen_range(-0.5..0.5))).collect(),
        QuantMode::Round => y.data().iter().zip(mu.data()).map(|(&v, &m)| (v - m).round() + m).collect(),
    };
    Tensor::new(y.shape(), out)
}

/// Graph form of noise quantization: `y + u` with `u` a constant.
pub fn add_uniform_noise<T: Real>(g: &mut Graph<T>, y: Var, rng: &mut impl Rng) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let u = Tensor::from_fn(&shape, |_| T::lit(rng.gen_range(-0.5..0.5)));
    let u = g.constant(u);
    g.add(y, u)
}

/// Total bits of `y_hat` under per-element Gaussians.
pub fn gaussian_bits<T: Real>(y_hat: &Tensor<T>, params: &GaussianParams<T>) -> Result<f64> {
    if y_hat.shape() != params.mu.shape() {
        return Err(dim_err!("gaussian_bits: {:?} vs {:?}", y_hat.shape(), params.mu.shape()));
    }
    check_sigma(&params.sigma)?;
    Ok(y_hat
        .data()
        .iter()
        .zip(params.mu.data())
        .zip(params.sigma.data())
        .map(|((&y, &m), &s)| -gaussian_mass(y.f64() - m.f64(), s.f64()).0.max(LIKELIHOOD_FLOOR).log2())
        .sum())
}

/// Total bits of `v` under per-channel logistics; channel is the leading axis.
pub fn factorized_bits<T: Real>(v: &Tensor<T>, loc: &[T], log_scale: &[T]) -> Result<f64> {
    let c = loc.len();
    if v.rank() == 0 || v.dim(0) != c || log_scale.len() != c {
        return Err(dim_err!("factorized_bits: {:?} with {c} channels", v.shape()));
    }
    let inner = v.numel() / c;
    Ok(v.data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let ch = i / inner;
            -logistic_mass(x.f64() - loc[ch].f64(), log_scale[ch].f64().exp()).0.max(LIKELIHOOD_FLOOR).log2()
        })
        .sum())
}

/// Memoizes tables by the exact bit pattern of their scale, so encoder and
/// decoder rebuild identical tables from identical parameters.
#[derive(Default)]
pub struct TableCache {
    gaussian: HashMap<u64, CdfTable>,
    logistic: HashMap<u64, CdfTable>,
}

impl TableCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn gaussian(&mut self, sigma: f64) -> Result<&CdfTable> {
        let key = sigma.to_bits();
        if !self.gaussian.contains_key(&key) {
            self.gaussian.insert(key, CdfTable::gaussian(sigma)?);
        }
        Ok(&self.gaussian[&key])
    }

    pub fn logistic(&mut self, scale: f64) -> Result<&CdfTable> {
        let key = scale.to_bits();
        if !self.logistic.contains_key(&key) {
            self.logistic.insert(key, CdfTable::logistic(scale)?);
        }
        Ok(&self.logistic[&key])
    }
}

/// Symbol `round(v - center)` as an integer.
pub fn residual_symbol(v: f64, center: f64) -> Result<i32> {
    let d = (v - center).round();
    if !d.is_finite() || d.abs() > i32::MAX as f64 {
        return Err(Error::Numeric(format!("latent value {v} cannot be coded")));
    }
    Ok(d as i32)
}

/// Encode `values` as residuals from `mu` under Gaussian tables.
pub fn encode_gaussian(enc: &mut RangeEncoder, cache: &mut TableCache, values: &[f64], mu: &[f64], sigma: &[f64]) -> Result<()> {
    for ((&v, &m), &s) in values.iter().zip(mu).zip(sigma) {
        let sym = residual_symbol(v, m)?;
        enc.encode(cache.gaussian(s)?, sym)?;
    }
    Ok(())
}

/// Inverse of [`encode_gaussian`]; returns the integer residuals.
pub fn decode_gaussian(dec: &mut RangeDecoder, cache: &mut TableCache, sigma: &[f64]) -> Result<Vec<i32>> {
    sigma.iter().map(|&s| Ok(dec.decode(cache.gaussian(s)?))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_mode_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = Tensor::new(&[2], vec![2.7f64, 2.7]).unwrap();
        let mu = Tensor::new(&[2], vec![2.5, 0.0]).unwrap();
        let q = quantize(&y, &mu, QuantMode::Round, &mut rng).unwrap();
        assert_eq!(q.data(), &[2.5, 3.0]);
    }

    #[test]
    fn noise_mode_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = Tensor::from_fn(&[1000], |i| i as f64 * 0.37);
        let q = quantize(&y, &Tensor::zeros(&[1000]), QuantMode::Noise, &mut rng).unwrap();
        assert!(q.data().iter().zip(y.data()).all(|(a, b)| (a - b).abs() <= 0.5));
    }

    #[test]
    fn sigma_bounds_are_enforced() {
        let z = Tensor::<f64>::zeros(&[1]);
        assert!(GaussianParams::new(z.clone(), Tensor::full(&[1], 0.0)).is_err());
        assert!(GaussianParams::new(z.clone(), Tensor::full(&[1], 2e4)).is_err());
        assert!(GaussianParams::new(z, Tensor::full(&[1], 1.0)).is_ok());
    }
}
