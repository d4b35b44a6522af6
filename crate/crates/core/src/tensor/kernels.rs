//! Raw numeric kernels on flat slices. Shapes are validated by the caller.

use super::Real;

/// Row-major `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `m x k`
/// and `op(b)` is `k x n`. `ta`/`tb` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    ta: bool,
    tb: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the length assertions above cover every index touched with these strides.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output extent of a strided window sweep with zero padding.
#[inline]
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Unfold `x[c, h, w]` into columns `[c * k * k, ho * wo]`.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let mut col = vec![T::zero(); c * k * k * ho * wo];
    let plane = ho * wo;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let src = &xc[ih as usize * w..(ih as usize + 1) * w];
                    let drow = &mut dst[oh * wo..(oh + 1) * wo];
                    if stride == 1 {
                        // contiguous run, clipped at both borders
                        let off = kj as isize - pad as isize;
                        let lo = (-off).max(0) as usize;
                        let hi = ((w as isize - off).min(wo as isize)).max(0) as usize;
                        if lo < hi {
                            let s0 = (lo as isize + off) as usize;
                            drow[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ow, d) in drow.iter_mut().enumerate() {
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if iw >= 0 && iw < w as isize {
                                *d = src[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add columns back into `out[c, h, w]`.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Real>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    out: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let oc = &mut out[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst = &mut oc[ih as usize * w..(ih as usize + 1) * w];
                    let srow = &src[oh * wo..(oh + 1) * wo];
                    for (ow, &v) in srow.iter().enumerate() {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            dst[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Geometry of a 2-D convolution on a single image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
}

pub fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let plane = g.ho * g.wo;
    let kk = cin_g * g.k * g.k;
    let mut out = vec![T::zero(); g.cout * plane];
    for gi in 0..g.groups {
        let xg = &x[gi * cin_g * g.h * g.w..(gi + 1) * cin_g * g.h * g.w];
        let col = im2col(xg, cin_g, g.h, g.w, g.k, g.stride, g.pad, g.ho, g.wo);
        let wg = &w[gi * cout_g * kk..(gi + 1) * cout_g * kk];
        let og = &mut out[gi * cout_g * plane..(gi + 1) * cout_g * plane];
        gemm(false, false, cout_g, plane, kk, T::one(), wg, &col, T::zero(), og);
    }
    if let Some(b) = b {
        for (o, bo) in b.iter().enumerate() {
            for v in &mut out[o * plane..(o + 1) * plane] {
                *v += *bo;
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`]; each output is produced only when requested.
pub fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    gout: &[T],
    x: &[T],
    w: &[T],
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let plane = g.ho * g.wo;
    let kk = cin_g * g.k * g.k;
    let mut gx = want_x.then(|| vec![T::zero(); g.cin * g.h * g.w]);
    let mut gw = want_w.then(|| vec![T::zero(); g.cout * kk]);
    for gi in 0..g.groups {
        let go = &gout[gi * cout_g * plane..(gi + 1) * cout_g * plane];
        let wg = &w[gi * cout_g * kk..(gi + 1) * cout_g * kk];
        if let Some(gw) = gw.as_mut() {
            let xg = &x[gi * cin_g * g.h * g.w..(gi + 1) * cin_g * g.h * g.w];
            let col = im2col(xg, cin_g, g.h, g.w, g.k, g.stride, g.pad, g.ho, g.wo);
            let gwg = &mut gw[gi * cout_g * kk..(gi + 1) * cout_g * kk];
            gemm(false, true, cout_g, kk, plane, T::one(), go, &col, T::zero(), gwg);
        }
        if let Some(gx) = gx.as_mut() {
            let mut gcol = vec![T::zero(); kk * plane];
            gemm(true, false, kk, plane, cout_g, T::one(), wg, go, T::zero(), &mut gcol);
            let gxg = &mut gx[gi * cin_g * g.h * g.w..(gi + 1) * cin_g * g.h * g.w];
            col2im(&gcol, cin_g, g.h, g.w, g.k, g.stride, g.pad, g.ho, g.wo, gxg);
        }
    }
    (gx, gw)
}

pub fn bias_grad<T: Real>(gout: &[T], channels: usize) -> Vec<T> {
    let plane = gout.len() / channels;
    (0..channels)
        .map(|o| gout[o * plane..(o + 1) * plane].iter().fold(T::zero(), |a, &v| a + v))
        .collect()
}

/// Geometry of a transposed convolution: input `[cin, h, w]`, weight
/// `[cin, cout, k, k]`, output `[cout, ho, wo]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

pub fn conv_transpose_forward<T: Real>(g: &TConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let plane = g.h * g.w;
    let rows = g.cout * g.k * g.k;
    let mut col = vec![T::zero(); rows * plane];
    gemm(true, false, rows, plane, g.cin, T::one(), w, x, T::zero(), &mut col);
    let mut out = vec![T::zero(); g.cout * g.ho * g.wo];
    col2im(&col, g.cout, g.ho, g.wo, g.k, g.stride, g.pad, g.h, g.w, &mut out);
    if let Some(b) = b {
        let oplane = g.ho * g.wo;
        for (o, bo) in b.iter().enumerate() {
            for v in &mut out[o * oplane..(o + 1) * oplane] {
                *v += *bo;
            }
        }
    }
    out
}

pub fn conv_transpose_backward<T: Real>(
    g: &TConvGeom,
    gout: &[T],
    x: &[T],
    w: &[T],
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let plane = g.h * g.w;
    let rows = g.cout * g.k * g.k;
    let col = im2col(gout, g.cout, g.ho, g.wo, g.k, g.stride, g.pad, g.h, g.w);
    let gx = want_x.then(|| {
        let mut gx = vec![T::zero(); g.cin * plane];
        gemm(false, false, g.cin, plane, rows, T::one(), w, &col, T::zero(), &mut gx);
        gx
    });
    let gw = want_w.then(|| {
        let mut gw = vec![T::zero(); g.cin * rows];
        gemm(false, true, g.cin, rows, plane, T::one(), x, &col, T::zero(), &mut gw);
        gw
    });
    (gx, gw)
}

/// Denominator argument `beta_c + sum_j gamma[c, j] * x_j^2` per pixel.
fn gdn_norm<T: Real>(x: &[T], beta: &[T], gamma: &[T], c: usize, plane: usize) -> Vec<T> {
    let sq: Vec<T> = x.iter().map(|&v| v * v).collect();
    let mut norm = vec![T::zero(); c * plane];
    for (ci, b) in beta.iter().enumerate() {
        norm[ci * plane..(ci + 1) * plane].fill(*b);
    }
    gemm(false, false, c, plane, c, T::one(), gamma, &sq, T::one(), &mut norm);
    norm
}

/// Generalized divisive normalization (or its inverse) over `x[c, plane]`.
/// Returns `None` when a denominator is non-finite or non-positive.
pub fn gdn_forward<T: Real>(
    x: &[T],
    beta: &[T],
    gamma: &[T],
    c: usize,
    inverse: bool,
) -> Option<Vec<T>> {
    let plane = x.len() / c;
    let norm = gdn_norm(x, beta, gamma, c, plane);
    let mut out = Vec::with_capacity(x.len());
    for (&xv, &nv) in x.iter().zip(&norm) {
        if !(nv > T::zero()) || !nv.is_finite() {
            return None;
        }
        let s = nv.sqrt();
        out.push(if inverse { xv * s } else { xv / s });
    }
    Some(out)
}

/// Returns (grad_x, grad_beta, grad_gamma).
pub fn gdn_backward<T: Real>(
    gout: &[T],
    x: &[T],
    beta: &[T],
    gamma: &[T],
    c: usize,
    inverse: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let plane = x.len() / c;
    let norm = gdn_norm(x, beta, gamma, c, plane);
    let half = T::lit(0.5);
    let mut gx = vec![T::zero(); x.len()];
    // gradient w.r.t. the per-pixel norm argument
    let mut gn = vec![T::zero(); x.len()];
    for i in 0..x.len() {
        let s = norm[i].sqrt();
        if inverse {
            gx[i] = gout[i] * s;
            gn[i] = gout[i] * x[i] * half / s;
        } else {
            gx[i] = gout[i] / s;
            gn[i] = -gout[i] * x[i] * half / (norm[i] * s);
        }
    }
    let gbeta = bias_grad(&gn, c);
    let sq: Vec<T> = x.iter().map(|&v| v * v).collect();
    let mut ggamma = vec![T::zero(); c * c];
    gemm(false, true, c, c, plane, T::one(), &gn, &sq, T::zero(), &mut ggamma);
    // d/dx_j of sum_c gn_c * gamma[c, j] * x_j^2 = 2 x_j (gamma^T gn)_j
    let mut gsq = vec![T::zero(); x.len()];
    gemm(true, false, c, plane, c, T::one(), gamma, &gn, T::zero(), &mut gsq);
    let two = T::lit(2.0);
    for i in 0..x.len() {
        gx[i] += two * x[i] * gsq[i];
    }
    (gx, gbeta, ggamma)
}

/// Standard normal CDF.
#[inline]
pub fn std_normal_cdf<T: Real>(x: T) -> T {
    T::lit(0.5) * (-x / T::lit(std::f64::consts::SQRT_2)).erfc()
}

/// Standard normal density.
#[inline]
pub fn std_normal_pdf<T: Real>(x: T) -> T {
    T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt()) * (-T::lit(0.5) * x * x).exp()
}

#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    x * std_normal_cdf(x)
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    std_normal_cdf(x) + x * std_normal_pdf(x)
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
