//! Quantized cumulative frequency tables.

use crate::error::{Error, Result};
use crate::tensor::graph::{gaussian_mass, logistic_mass};

pub const PRECISION_BITS: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION_BITS;
/// Smallest half-width of a table's direct symbol range.
pub const MIN_HALF_WIDTH: i32 = 16;
/// Largest half-width; wider distributions spill into the escape symbol.
pub const MAX_HALF_WIDTH: i32 = 4096;

/// Monotone 16-bit CDF over symbols `offset..offset + n`, optionally followed
/// by an escape slot for values outside that range.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    cdf: Vec<u32>,
    offset: i32,
    escape: bool,
}

impl CdfTable {
    /// Quantize a pmf. `tail` is the probability left for the escape symbol;
    /// `None` builds a table without one.
    pub fn from_pmf(pmf: &[f64], offset: i32, tail: Option<f64>) -> Result<Self> {
        let slots = pmf.len() + tail.is_some() as usize;
        if pmf.is_empty() || slots > TOTAL as usize {
            return Err(Error::Config(format!("cdf table with {} symbols", pmf.len())));
        }
        let mut probs: Vec<f64> = pmf.to_vec();
        if let Some(t) = tail {
            probs.push(t);
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Numeric("pmf entries must be finite and non-negative".into()));
        }
        let total: f64 = probs.iter().sum();
        if total <= 0.0 {
            return Err(Error::Numeric("pmf has zero mass".into()));
        }
        let mut freq: Vec<u32> =
            probs.iter().map(|p| ((p / total * TOTAL as f64).round() as u32).max(1)).collect();
        repair(&mut freq);
        let mut cdf = Vec::with_capacity(freq.len() + 1);
        let mut acc = 0;
        cdf.push(0);
        for f in &freq {
            acc += f;
            cdf.push(acc);
        }
        Ok(Self { cdf, offset, escape: tail.is_some() })
    }

    /// Equiprobable table over `n` symbols.
    pub fn uniform(n: usize, offset: i32) -> Result<Self> {
        Self::from_pmf(&vec![1.0; n], offset, None)
    }

    /// Table for `round(y - mu)` under a Gaussian of scale `sigma`.
    pub fn gaussian(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Numeric(format!("gaussian scale {sigma}")));
        }
        Self::centered(half_width(sigma), |d| gaussian_mass(d, sigma).0)
    }

    /// Table for `round(v - loc)` under a logistic of scale `s`.
    pub fn logistic(s: f64) -> Result<Self> {
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Numeric(format!("logistic scale {s}")));
        }
        // standard deviation of the logistic is s * pi / sqrt(3)
        Self::centered(half_width(s * std::f64::consts::PI / 3f64.sqrt()), |d| logistic_mass(d, s).0)
    }

    fn centered(r: i32, mass: impl Fn(f64) -> f64) -> Result<Self> {
        let pmf: Vec<f64> = (-r..=r).map(|d| mass(d as f64)).collect();
        let tail = (1.0 - pmf.iter().sum::<f64>()).max(0.0);
        Self::from_pmf(&pmf, -r, Some(tail))
    }

    pub fn cdf(&self) -> &[u32] {
        &self.cdf
    }

    pub fn offset(&self) -> i32 {
        self.offset
    }

    pub fn has_escape(&self) -> bool {
        self.escape
    }

    /// Number of directly coded symbols (escape excluded).
    pub fn symbols(&self) -> usize {
        self.cdf.len() - 1 - self.escape as usize
    }

    pub fn min_symbol(&self) -> i32 {
        self.offset
    }

    pub fn max_symbol(&self) -> i32 {
        self.offset + self.symbols() as i32 - 1
    }

    /// Slot index for `value`, or `None` when it needs the escape path.
    pub(crate) fn slot(&self, value: i32) -> Option<usize> {
        let i = value as i64 - self.offset as i64;
        (i >= 0 && (i as usize) < self.symbols()).then_some(i as usize)
    }

    pub(crate) fn escape_slot(&self) -> Option<usize> {
        self.escape.then(|| self.cdf.len() - 2)
    }

    /// `(cumulative, frequency)` of a slot.
    #[inline]
    pub(crate) fn interval(&self, slot: usize) -> (u32, u32) {
        (self.cdf[slot], self.cdf[slot + 1] - self.cdf[slot])
    }

    /// Slot whose interval contains `target` (binary search).
    pub(crate) fn find(&self, target: u32) -> usize {
        self.cdf.partition_point(|&c| c <= target) - 1
    }

    /// Ideal code length in bits of `value`, including escape payload.
    pub fn cost_bits(&self, value: i32) -> f64 {
        let (slot, extra) = match self.slot(value) {
            Some(s) => (s, 0.0),
            None => (self.escape_slot().expect("value outside table without escape"), 32.0),
        };
        let (_, f) = self.interval(slot);
        PRECISION_BITS as f64 - (f as f64).log2() + extra
    }
}

/// Half-width `max(16, ceil(8 sigma))`, capped.
pub fn half_width(sigma: f64) -> i32 {
    let r = (8.0 * sigma).ceil();
    if r >= MAX_HALF_WIDTH as f64 {
        MAX_HALF_WIDTH
    } else {
        (r as i32).max(MIN_HALF_WIDTH)
    }
}

/// Make the frequencies sum to exactly `TOTAL` while keeping each at least 1,
/// adjusting the largest entry one unit at a time.
fn repair(freq: &mut [u32]) {
    let mut sum: i64 = freq.iter().map(|&f| f as i64).sum();
    while sum != TOTAL as i64 {
        let (imax, _) = freq.iter().enumerate().max_by_key(|&(i, &f)| (f, std::cmp::Reverse(i))).unwrap();
        if sum > TOTAL as i64 {
            // take as much as possible from the largest bin in one go
            let excess = (sum - TOTAL as i64).min(freq[imax] as i64 - 1);
            let take = excess.max(1) as u32;
            freq[imax] -= take;
            sum -= take as i64;
        } else {
            freq[imax] += (TOTAL as i64 - sum) as u32;
            sum = TOTAL as i64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_four() {
        let t = CdfTable::uniform(4, 0).unwrap();
        assert_eq!(t.cdf(), &[0, 16384, 32768, 49152, 65536]);
        assert!(!t.has_escape());
    }

    #[test]
    fn tiny_mass_still_gets_a_slot() {
        let t = CdfTable::from_pmf(&[1.0, 1e-12, 1e-12], 0, Some(0.0)).unwrap();
        let c = t.cdf();
        assert_eq!(*c.last().unwrap(), TOTAL);
        assert!(c.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn gaussian_table_ranges() {
        assert_eq!(CdfTable::gaussian(0.5).unwrap().min_symbol(), -16);
        let t = CdfTable::gaussian(10.0).unwrap();
        assert_eq!((t.min_symbol(), t.max_symbol()), (-80, 80));
        assert_eq!(CdfTable::gaussian(1e4).unwrap().max_symbol(), MAX_HALF_WIDTH);
        assert!(CdfTable::gaussian(0.0).is_err());
    }

    #[test]
    fn rejects_bad_pmf() {
        assert!(CdfTable::from_pmf(&[], 0, None).is_err());
        assert!(CdfTable::from_pmf(&[0.0, 0.0], 0, None).is_err());
        assert!(CdfTable::from_pmf(&[f64::NAN], 0, None).is_err());
    }
}
