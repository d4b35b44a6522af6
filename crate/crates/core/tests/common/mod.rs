//! Independent reference implementations shared by the test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segcodec::metrics::{bd_rate, RdCurve};
use segcodec::rat::{dpsconv, DpsKernels};
use segcodec::region::{expand_prototypes, masked_average_pool, PrototypeSet, RegionMap};
use segcodec::tensor::{Graph, Tensor};

pub fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Direct six-loop evaluation with zero padding.
pub fn naive_dpsconv(x: &Tensor<f64>, k: &DpsKernels<f64>) -> Tensor<f64> {
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let ks = k.kernel_size();
    let r = (ks / 2) as isize;
    let mut out = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        for hi in 0..h {
            for wi in 0..w {
                let mut acc = 0.0;
                for i in 0..ks {
                    for j in 0..ks {
                        let (y, xx) = (hi as isize + i as isize - r, wi as isize + j as isize - r);
                        if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                            acc += k.at(ci, hi, wi, i, j) * x.at3(ci, y as usize, xx as usize);
                        }
                    }
                }
                out.data_mut()[(ci * h + hi) * w + wi] = acc;
            }
        }
    }
    out
}

pub fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, n: u32) -> RegionMap {
    let raw: Vec<u32> = (0..h * w).map(|_| rng.gen_range(0..n)).collect();
    RegionMap::from_raw(h, w, &raw).unwrap()
}


/// Least squares by normal equations and Gaussian elimination, in PSNR
/// centered on the curve's own mean.
pub fn fit(points: &[(f64, f64)]) -> (f64, [f64; 4]) {
    let c = points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
    let mut a = [[0.0f64; 5]; 4];
    for &(r, d) in points {
        let t = d - c;
        let phi = [1.0, t, t * t, t * t * t];
        for i in 0..4 {
            for j in 0..4 {
                a[i][j] += phi[i] * phi[j];
            }
            a[i][4] += phi[i] * r.ln();
        }
    }
    for col in 0..4 {
        let piv = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        for row in 0..4 {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in col..5 {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    (c, [a[0][4] / a[0][0], a[1][4] / a[1][1], a[2][4] / a[2][2], a[3][4] / a[3][3]])
}

/// Dense trapezoid integration of the fitted log-rate gap.
pub fn dense_bd_rate(test: &[(f64, f64)], anchor: &[(f64, f64)]) -> f64 {
    let range = |p: &[(f64, f64)]| {
        (p.iter().map(|x| x.1).fold(f64::INFINITY, f64::min), p.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max))
    };
    let ((tl, th), (al, ah)) = (range(test), range(anchor));
    let (lo, hi) = (tl.max(al), th.min(ah));
    let (ct, pt) = fit(test);
    let (ca, pa) = fit(anchor);
    let eval = |c: f64, p: &[f64; 4], d: f64| {
        let t = d - c;
        p[0] + p[1] * t + p[2] * t * t + p[3] * t * t * t
    };
    let n = 200_000;
    let h = (hi - lo) / n as f64;
    let mut s = 0.0;
    for i in 0..=n {
        let d = lo + i as f64 * h;
        let wgt = if i == 0 || i == n { 0.5 } else { 1.0 };
        s += wgt * (eval(ct, &pt, d) - eval(ca, &pa, d));
    }
    ((s * h / (hi - lo)).exp() - 1.0) * 100.0
}

pub fn anchor() -> Vec<(f64, f64)> {
    vec![(0.12, 28.4), (0.21, 30.3), (0.36, 32.4), (0.58, 34.5), (0.89, 36.4), (1.31, 38.2)]
}


fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Worst gap between the library and the naive loop over `cases` random
/// shapes, cycling the kernel size through 1, 3 and 5.
pub fn dpsconv_vs_naive(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let (c, h, w) = (rng.gen_range(1..5), rng.gen_range(1..9), rng.gen_range(1..9));
        let k = [1, 3, 5][case % 3];
        let x = rand_t(&mut rng, &[c, h, w]);
        let kern = DpsKernels::new(rand_t(&mut rng, &[c, k * k, h, w])).unwrap();
        let got = dpsconv(&x, &kern).unwrap();
        worst = worst.max(max_abs(got.data(), naive_dpsconv(&x, &kern).data()));
    }
    worst
}

/// Worst gap between position-invariant DPSConv and grouped conv2d.
pub fn constant_kernels_vs_depthwise(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for k in [1, 3, 5] {
        let (c, h, w) = (4, 7, 6);
        let x = rand_t(&mut rng, &[c, h, w]);
        let base = rand_t(&mut rng, &[c, 1, k, k]);
        let kern = DpsKernels::from_fn(c, h, w, k, |ci, _, _, i, j| base.data()[(ci * k + i) * k + j]).unwrap();
        let dps = dpsconv(&x, &kern).unwrap();
        let mut g = Graph::<f64>::inference();
        let (xv, wv) = (g.constant(x), g.constant(base));
        let y = g.conv2d(xv, wv, None, 1, k / 2, c).unwrap();
        worst = worst.max(max_abs(dps.data(), g.value(y).data()));
    }
    worst
}

/// Worst gap of masked average pooling against per-region loops.
pub fn pooling_vs_loops(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (c, h, w) = (rng.gen_range(1..6), rng.gen_range(1..12), rng.gen_range(1..12));
        let n = rng.gen_range(1..6);
        let rm = random_map(&mut rng, h, w, n);
        let x = rand_t(&mut rng, &[c, h, w]);
        let ps = masked_average_pool(&x, &rm).unwrap();
        assert_eq!(ps.vectors.shape(), &[rm.count(), c]);
        for region in 0..rm.count() {
            let pixels: Vec<(usize, usize)> =
                (0..h).flat_map(|r| (0..w).map(move |q| (r, q))).filter(|&(r, q)| rm.label(r, q) as usize == region).collect();
            for ch in 0..c {
                let mean = pixels.iter().map(|&(r, q)| x.at3(ch, r, q)).sum::<f64>() / pixels.len() as f64;
                worst = worst.max((ps.vectors.data()[region * c + ch] - mean).abs());
            }
        }
    }
    worst
}

/// Worst gap of prototype expansion against a per-pixel lookup, and of
/// pooling the expansion back to the prototypes.
pub fn expansion_vs_lookup(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (c, h, w) = (rng.gen_range(1..6), rng.gen_range(1..12), rng.gen_range(1..12));
        let n = rng.gen_range(1..6);
        let rm = random_map(&mut rng, h, w, n);
        let vectors = rand_t(&mut rng, &[rm.count(), c]);
        let ps = PrototypeSet { vectors: vectors.clone(), source: (h, w) };
        let e = expand_prototypes(&ps, &rm).unwrap();
        for ch in 0..c {
            for r in 0..h {
                for q in 0..w {
                    worst = worst.max((e.at3(ch, r, q) - vectors.data()[rm.label(r, q) as usize * c + ch]).abs());
                }
            }
        }
        let back = masked_average_pool(&e, &rm).unwrap();
        worst = worst.max(max_abs(back.vectors.data(), vectors.data()));
    }
    worst
}

pub fn bd_rate_cases() -> Vec<Vec<(f64, f64)>> {
    vec![
        vec![(0.11, 28.9), (0.19, 30.8), (0.33, 32.7), (0.55, 34.9), (0.84, 36.7), (1.22, 38.6)],
        vec![(0.15, 28.0), (0.26, 29.9), (0.40, 31.8), (0.66, 34.2)],
        vec![(0.09, 27.1), (0.17, 29.6), (0.31, 32.0), (0.52, 34.3), (0.80, 36.0)],
    ]
}

/// Worst gap in percentage points between the library BD-rate and the dense
/// integration oracle.
pub fn bd_rate_vs_dense() -> f64 {
    let a = RdCurve::new(anchor()).unwrap();
    bd_rate_cases()
        .into_iter()
        .map(|t| {
            let got = bd_rate(&RdCurve::new(t.clone()).unwrap(), &a).unwrap();
            (got - dense_bd_rate(&t, &anchor())).abs()
        })
        .fold(0.0, f64::max)
}
