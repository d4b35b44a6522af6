//! PSNR, bits per pixel and Bjøntegaard delta rate.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Reported for identical inputs.
pub const PSNR_CAP: f64 = 100.0;

pub fn mse<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    if x.shape() != y.shape() || x.numel() == 0 {
        return Err(dim_err!("mse of {:?} and {:?}", x.shape(), y.shape()));
    }
    let s: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a.f64() - b.f64()).powi(2)).sum();
    Ok(s / x.numel() as f64)
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
}

pub fn psnr<T: Real>(x: &Tensor<T>, y: &Tensor<T>, peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?, peak))
}

pub fn bpp(total_bytes: usize, height: usize, width: usize) -> f64 {
    8.0 * total_bytes as f64 / (height * width) as f64
}

/// Rate–distortion points, bpp strictly increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct RdCurve {
    points: Vec<(f64, f64)>,
}

impl RdCurve {
    pub fn new(mut points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() < 4 {
            return Err(Error::Config(format!("RD curve needs at least 4 points, got {}", points.len())));
        }
        if points.iter().any(|(r, d)| !r.is_finite() || !d.is_finite() || *r <= 0.0) {
            return Err(Error::Numeric("RD points must be finite with positive bpp".into()));
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        if points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Config("bpp values must be distinct".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// `bpp,psnr` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bpp,psnr\n");
        for (r, d) in &self.points {
            writeln!(s, "{r},{d}").unwrap();
        }
        s
    }

    /// Reads the first two columns; a header row is skipped if present.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut pts = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            let parsed = (cols.first().and_then(|c| c.parse::<f64>().ok()), cols.get(1).and_then(|c| c.parse::<f64>().ok()));
            match parsed {
                (Some(r), Some(d)) => pts.push((r, d)),
                _ if i == 0 => continue,
                _ => return Err(Error::Parse(format!("bad RD row {}: '{line}'", i + 1))),
            }
        }
        Self::new(pts)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// Least-squares cubic `ln(rate) = c0 + c1 t + c2 t^2 + c3 t^3` in the
/// normalized quality variable `t = (psnr - shift) / scale`.
fn fit_cubic(c: &RdCurve, shift: f64, scale: f64) -> Result<[f64; 4]> {
    let n = c.points.len();
    let a = DMatrix::from_fn(n, 4, |i, j| ((c.points[i].1 - shift) / scale).powi(j as i32));
    let b = DVector::from_iterator(n, c.points.iter().map(|p| p.0.ln()));
    let sol = a.svd(true, true).solve(&b, 1e-12).map_err(|e| Error::Numeric(format!("cubic fit failed: {e}")))?;
    Ok([sol[0], sol[1], sol[2], sol[3]])
}

fn integral(c: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let prim = |t: f64| c[0] * t + c[1] * t * t / 2.0 + c[2] * t.powi(3) / 3.0 + c[3] * t.powi(4) / 4.0;
    prim(hi) - prim(lo)
}

/// Average rate difference of `test` over `anchor` at equal PSNR, in
/// percent (negative = savings).
pub fn bd_rate(test: &RdCurve, anchor: &RdCurve) -> Result<f64> {
    let range = |c: &RdCurve| {
        let it = c.points.iter().map(|p| p.1);
        (it.clone().fold(f64::INFINITY, f64::min), it.fold(f64::NEG_INFINITY, f64::max))
    };
    let (tl, th) = range(test);
    let (al, ah) = range(anchor);
    let (lo, hi) = (tl.max(al), th.min(ah));
    if !(hi > lo) {
        return Err(Error::Numeric(format!("PSNR ranges [{tl}, {th}] and [{al}, {ah}] do not overlap")));
    }
    // normalize so the Vandermonde system stays well conditioned
    let shift = (lo + hi) / 2.0;
    let scale = ((hi - lo) / 2.0).max(1e-9);
    let ct = fit_cubic(test, shift, scale)?;
    let ca = fit_cubic(anchor, shift, scale)?;
    let (u, v) = ((lo - shift) / scale, (hi - shift) / scale);
    let avg = (integral(&ct, u, v) - integral(&ca, u, v)) / (v - u);
    Ok((avg.exp() - 1.0) * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let x = Tensor::<f64>::full(&[3, 2, 2], 0.5);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), PSNR_CAP);
        assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-12);
        let y = x.map(|v| v + 1.0 / 255.0);
        assert!((psnr(&x, &y, 1.0).unwrap() - 48.1308).abs() < 1e-3);
    }

    #[test]
    fn bpp_examples() {
        assert_eq!(bpp(1000, 80, 100), 1.0);
        assert_eq!(bpp(0, 10, 10), 0.0);
        assert!((bpp(49152, 512, 768) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let c = RdCurve::new(vec![(0.1, 28.0), (0.2, 30.0), (0.4, 32.5), (0.8, 35.0)]).unwrap();
        assert_eq!(RdCurve::from_csv(&c.to_csv()).unwrap(), c);
        assert!(RdCurve::new(vec![(0.1, 1.0); 3]).is_err());
    }
}
