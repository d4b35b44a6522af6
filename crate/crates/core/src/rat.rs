//! Region-adaptive transform: scale affine layer, per-pixel separable
//! convolution (DPSConv) and the RAT block that generates its kernels from
//! region prototypes and local context.

use std::cell::Cell;

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::nn::{Conv, Linear, LEAKY_SLOPE};
use crate::region::{expand_var, RegionMap};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

thread_local! {
    static DPS_MACS: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-adds executed by DPSConv forward passes on this thread since the last reset.
pub fn dpsconv_mac_count() -> u64 {
    DPS_MACS.with(Cell::get)
}

pub fn reset_dpsconv_mac_count() {
    DPS_MACS.with(|c| c.set(0));
}

/// Overlap of a tap offset with `[0, len)`: output positions `[lo, hi)`.
#[inline]
fn tap_range(len: usize, off: isize) -> (usize, usize) {
    let lo = ((-off).max(0) as usize).min(len);
    let hi = (len as isize - off).clamp(0, len as isize) as usize;
    (lo, hi.max(lo))
}

/// `out[c,h,w] = sum_{i,j} x[c, h+i, w+j] * K[c, tap(i,j), h, w]` with zero padding.
pub(crate) fn dpsconv_raw<T: Real>(x: &[T], kern: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let plane = h * w;
    let r = (k / 2) as isize;
    let mut out = vec![T::zero(); c * plane];
    let mut macs = 0u64;
    for ci in 0..c {
        let xc = &x[ci * plane..(ci + 1) * plane];
        let oc = &mut out[ci * plane..(ci + 1) * plane];
        for tap in 0..k * k {
            let (di, dj) = ((tap / k) as isize - r, (tap % k) as isize - r);
            let kt = &kern[(ci * k * k + tap) * plane..(ci * k * k + tap + 1) * plane];
            let (r0, r1) = tap_range(h, di);
            let (c0, c1) = tap_range(w, dj);
            if r0 == r1 || c0 == c1 {
                continue;
            }
            for row in r0..r1 {
                let src = (row as isize + di) as usize * w;
                let o = &mut oc[row * w + c0..row * w + c1];
                let kk = &kt[row * w + c0..row * w + c1];
                let xs = &xc[(src as isize + c0 as isize + dj) as usize..(src as isize + c1 as isize + dj) as usize];
                for ((o, &kv), &xv) in o.iter_mut().zip(kk).zip(xs) {
                    *o += xv * kv;
                }
                macs += (c1 - c0) as u64;
            }
        }
    }
    DPS_MACS.with(|m| m.set(m.get() + macs));
    out
}

/// Analytic adjoints of [`dpsconv_raw`]: `(grad_x, grad_kernels)`.
pub(crate) fn dpsconv_backward_raw<T: Real>(
    gout: &[T],
    x: &[T],
    kern: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
) -> (Vec<T>, Vec<T>) {
    let plane = h * w;
    let r = (k / 2) as isize;
    let mut gx = vec![T::zero(); c * plane];
    let mut gk = vec![T::zero(); c * k * k * plane];
    for ci in 0..c {
        let xc = &x[ci * plane..(ci + 1) * plane];
        let gc = &gout[ci * plane..(ci + 1) * plane];
        let gxc = &mut gx[ci * plane..(ci + 1) * plane];
        for tap in 0..k * k {
            let (di, dj) = ((tap / k) as isize - r, (tap % k) as isize - r);
            let base = (ci * k * k + tap) * plane;
            let (r0, r1) = tap_range(h, di);
            let (c0, c1) = tap_range(w, dj);
            if r0 == r1 || c0 == c1 {
                continue;
            }
            for row in r0..r1 {
                let src = ((row as isize + di) as usize * w) as isize + dj;
                for col in c0..c1 {
                    let o = row * w + col;
                    let s = (src + col as isize) as usize;
                    gk[base + o] = gc[o] * xc[s];
                    gxc[s] += gc[o] * kern[base + o];
                }
            }
        }
    }
    (gx, gk)
}

/// Per-pixel depthwise kernels, stored tap-major as `[C, k*k, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DpsKernels<T: Real = f32> {
    tensor: Tensor<T>,
    k: usize,
}

impl<T: Real> DpsKernels<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        let s = tensor.shape();
        if s.len() != 4 {
            return Err(dim_err!("kernels must be [C, k*k, H, W], got {:?}", s));
        }
        let k = (s[1] as f64).sqrt().round() as usize;
        if k * k != s[1] || k % 2 == 0 {
            return Err(dim_err!("{} taps is not an odd square", s[1]));
        }
        if !tensor.is_finite() {
            return Err(crate::error::Error::Numeric("non-finite DPSConv kernel".into()));
        }
        Ok(Self { tensor, k })
    }

    /// Build from a function of `(c, h, w, i, j)`, with `i, j` in `0..k`.
    pub fn from_fn(c: usize, h: usize, w: usize, k: usize, f: impl Fn(usize, usize, usize, usize, usize) -> T) -> Result<Self> {
        let plane = h * w;
        let t = Tensor::from_fn(&[c, k * k, h, w], |idx| {
            let (ct, p) = (idx / plane, idx % plane);
            let (ci, tap) = (ct / (k * k), ct % (k * k));
            f(ci, p / w, p % w, tap / k, tap % k)
        });
        Self::new(t)
    }

    pub fn kernel_size(&self) -> usize {
        self.k
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    /// `W[c, h, w, i, j]` with `i, j` in `0..k` (offset `i - k/2`).
    pub fn at(&self, c: usize, h: usize, w: usize, i: usize, j: usize) -> T {
        let s = self.tensor.shape();
        self.tensor.data()[((c * s[1] + i * self.k + j) * s[2] + h) * s[3] + w]
    }
}

pub fn dpsconv<T: Real>(x: &Tensor<T>, kernels: &DpsKernels<T>) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let kv = g.constant(kernels.tensor.clone());
    let y = g.dpsconv(xv, kv)?;
    Ok(g.value(y).clone())
}

pub fn dpsconv_backward<T: Real>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    kernels: &DpsKernels<T>,
) -> Result<(Tensor<T>, DpsKernels<T>)> {
    let s = x.shape();
    if grad_out.shape() != s || kernels.tensor.shape() != [s[0], kernels.k * kernels.k, s[1], s[2]] {
        return Err(dim_err!("dpsconv_backward: shapes {:?}, {:?}", grad_out.shape(), kernels.tensor.shape()));
    }
    let (gx, gk) =
        dpsconv_backward_raw(grad_out.data(), x.data(), kernels.tensor.data(), s[0], s[1], s[2], kernels.k);
    Ok((Tensor::new(s, gx)?, DpsKernels { tensor: Tensor::new(kernels.tensor.shape(), gk)?, k: kernels.k }))
}

/// Scale affine layer: `Y = S(X) * X + B(X)`, each branch conv1x1 -> GELU -> conv1x1.
#[derive(Clone, Debug)]
pub struct Sal {
    pub scale: [Conv; 2],
    pub bias: [Conv; 2],
}

impl Sal {
    pub fn new(name: &str, channels: usize) -> Self {
        let c = |n: &str| Conv::new(format!("{name}.{n}"), channels, channels, 1, 1);
        Self { scale: [c("s0"), c("s1")], bias: [c("b0"), c("b1")] }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        for c in self.scale.iter().chain(&self.bias) {
            c.init(store, rng)?;
        }
        // scale branch starts around 1 so the block begins close to identity
        let b = store.value_mut(&self.scale[1].bias()).unwrap();
        b.data_mut().iter_mut().for_each(|v| *v += 1.0);
        Ok(())
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = self.scale[0].forward(g, p, x)?;
        let s = g.gelu(s);
        let s = self.scale[1].forward(g, p, s)?;
        let b = self.bias[0].forward(g, p, x)?;
        let b = g.gelu(b);
        let b = self.bias[1].forward(g, p, b)?;
        let sx = g.mul(s, x)?;
        g.add(sx, b)
    }
}

/// Hyperparameters of one RAT block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RatConfig {
    pub channels: usize,
    pub proto_dim: usize,
    pub kernel_size: usize,
    pub cag_hidden: usize,
    /// Softmax-normalize each generated kernel over its taps.
    pub normalize_kernels: bool,
}

impl RatConfig {
    pub fn new(channels: usize, proto_dim: usize) -> Self {
        Self { channels, proto_dim, kernel_size: 3, cag_hidden: (channels / 4).max(1), normalize_kernels: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 || self.channels == 0 || self.proto_dim == 0 || self.cag_hidden == 0 {
            return Err(crate::error::Error::Config(format!("invalid RAT config {self:?}")));
        }
        Ok(())
    }
}

/// Channel transform layers: conv1x1 -> LeakyReLU -> conv1x1, width preserved.
#[derive(Clone, Debug)]
pub struct Ctl {
    pub layers: [Conv; 2],
}

impl Ctl {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            layers: [
                Conv::new(format!("{name}.0"), channels, channels, 1, 1),
                Conv::new(format!("{name}.1"), channels, channels, 1, 1),
            ],
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.layers[0].forward(g, p, x)?;
        let h = g.leaky_relu(h, T::lit(LEAKY_SLOPE));
        self.layers[1].forward(g, p, h)
    }
}

/// Kernel generator: conv1x1 fuse -> LeakyReLU -> grouped conv3x3 to `k^2 C` -> `[C, k^2, H, W]`.
#[derive(Clone, Debug)]
pub struct Dkg {
    pub fuse: Conv,
    pub gen: Conv,
    pub channels: usize,
    pub k: usize,
    pub normalize: bool,
}

impl Dkg {
    pub fn new(name: &str, cfg: &RatConfig) -> Self {
        let c = cfg.channels;
        let kk = cfg.kernel_size * cfg.kernel_size;
        Self {
            fuse: Conv::new(format!("{name}.0"), c + cfg.proto_dim, c, 1, 1),
            gen: Conv::new(format!("{name}.1"), c, kk * c, 3, 1).grouped(c),
            channels: c,
            k: cfg.kernel_size,
            normalize: cfg.normalize_kernels,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, fused: Var) -> Result<Var> {
        let s = g.shape(fused).to_vec();
        if s.len() != 3 || s[0] != self.fuse.cin {
            return Err(dim_err!("DKG expects {} fused channels, got {:?}", self.fuse.cin, s));
        }
        let h = self.fuse.forward(g, p, fused)?;
        let h = g.leaky_relu(h, T::lit(LEAKY_SLOPE));
        let h = self.gen.forward(g, p, h)?;
        let kern = g.reshape(h, &[self.channels, self.k * self.k, s[1], s[2]])?;
        if self.normalize {
            g.softmax(kern, 1)
        } else {
            Ok(kern)
        }
    }
}

/// Channel attention: GAP -> linear -> LeakyReLU -> linear -> sigmoid, giving `[C]`.
#[derive(Clone, Debug)]
pub struct Cag {
    pub layers: [Linear; 2],
}

impl Cag {
    pub fn new(name: &str, cfg: &RatConfig) -> Self {
        Self {
            layers: [
                Linear::new(format!("{name}.0"), cfg.channels + cfg.proto_dim, cfg.cag_hidden),
                Linear::new(format!("{name}.1"), cfg.cag_hidden, cfg.channels),
            ],
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, fused: Var) -> Result<Var> {
        let v = g.global_avg_pool(fused)?;
        let h = self.layers[0].forward(g, p, v)?;
        let h = g.leaky_relu(h, T::lit(LEAKY_SLOPE));
        let h = self.layers[1].forward(g, p, h)?;
        Ok(g.sigmoid(h))
    }
}

/// Region-adaptive transform block.
#[derive(Clone, Debug)]
pub struct Rat {
    pub cfg: RatConfig,
    pub ctl: Ctl,
    pub dkg: Dkg,
    pub cag: Cag,
    pub merge: Conv,
}

impl Rat {
    /// Parameters are namespaced `<name>.{ctl,dkg,cag,merge}`.
    pub fn new(name: &str, cfg: RatConfig) -> Self {
        Self {
            ctl: Ctl::new(&format!("{name}.ctl"), cfg.channels),
            dkg: Dkg::new(&format!("{name}.dkg"), &cfg),
            cag: Cag::new(&format!("{name}.cag"), &cfg),
            merge: Conv::new(format!("{name}.merge"), cfg.channels, cfg.channels, 1, 1),
            cfg,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.cfg.validate()?;
        for c in self.ctl.layers.iter().chain([&self.dkg.fuse, &self.dkg.gen, &self.merge]) {
            c.init(store, rng)?;
        }
        for l in &self.cag.layers {
            l.init(store, rng)?;
        }
        Ok(())
    }

    /// Fused context: `concat(ctl(x), expand(prototypes, rm))`.
    pub fn fuse<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var, protos: Var, rm: &RegionMap) -> Result<Var> {
        let t = self.ctl.forward(g, p, x)?;
        let e = expand_var(g, protos, rm)?;
        g.concat(t, e)
    }

    /// `merge(cag(fused) * dpsconv(x, dkg(fused))) + x`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var, protos: Var, rm: &RegionMap) -> Result<Var> {
        let xs = g.shape(x).to_vec();
        if xs.len() != 3 || xs[0] != self.cfg.channels || xs[1] != rm.height() || xs[2] != rm.width() {
            return Err(dim_err!("RAT input {:?} vs channels {} and region map {}x{}", xs, self.cfg.channels, rm.height(), rm.width()));
        }
        if g.shape(protos) != [rm.count(), self.cfg.proto_dim] {
            return Err(dim_err!("RAT prototypes {:?}, expected [{}, {}]", g.shape(protos), rm.count(), self.cfg.proto_dim));
        }
        let fused = self.fuse(g, p, x, protos, rm)?;
        let kernels = self.dkg.forward(g, p, fused)?;
        let d = g.dpsconv(x, kernels)?;
        let a = self.cag.forward(g, p, fused)?;
        let m = g.mul_channel(d, a)?;
        let m = self.merge.forward(g, p, m)?;
        g.add(m, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_kernels_are_identity() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| i as f64 * 0.5 - 3.0);
        let k = DpsKernels::from_fn(2, 3, 4, 3, |_, _, _, i, j| if i == 1 && j == 1 { 1.0 } else { 0.0 }).unwrap();
        assert_eq!(dpsconv(&x, &k).unwrap(), x);
    }

    #[test]
    fn uniform_box_kernel_center() {
        let x = Tensor::from_fn(&[1, 3, 3], |i| (i + 1) as f64);
        let k = DpsKernels::from_fn(1, 3, 3, 3, |_, _, _, _, _| 1.0 / 9.0).unwrap();
        let y = dpsconv(&x, &k).unwrap();
        assert!((y.at3(0, 1, 1) - 5.0).abs() < 1e-12);
        // corner sees 1,2,4,5
        assert!((y.at3(0, 0, 0) - 12.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn backward_of_constant_input() {
        let x = Tensor::full(&[1, 4, 4], 2.5f64);
        let k = DpsKernels::from_fn(1, 4, 4, 3, |_, _, _, _, _| 0.3).unwrap();
        let go = Tensor::full(&[1, 4, 4], 1.0);
        let (_, gk) = dpsconv_backward(&go, &x, &k).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(gk.at(0, 1, 2, i, j), 2.5);
            }
        }
        // corner taps reaching outside the image see zero padding
        assert_eq!(gk.at(0, 0, 0, 0, 0), 0.0);
        let zero = Tensor::zeros(&[1, 4, 4]);
        let (gx, gk) = dpsconv_backward(&zero, &x, &k).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(gk.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_mismatched_kernels() {
        let x = Tensor::<f64>::zeros(&[2, 3, 3]);
        let k = DpsKernels::from_fn(2, 3, 4, 3, |_, _, _, _, _| 0.0).unwrap();
        assert!(dpsconv(&x, &k).is_err());
        assert!(DpsKernels::new(Tensor::<f64>::zeros(&[1, 4, 2, 2])).is_err());
    }
}
