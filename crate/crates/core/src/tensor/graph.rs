use std::collections::{BTreeMap, HashMap};
use std::f64::consts::LN_2;
use std::sync::Arc;

use super::kernels::{self, ConvGeom, TConvGeom};
use super::{ParamStore, Real, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Likelihood floor used by the rate terms, matching 16-bit table precision.
pub const LIKELIHOOD_FLOOR: f64 = 1.0 / 65536.0;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MulScalarVar(Var, Var),
    Square(Var),
    Exp(Var),
    Recip(Var),
    Clamp(Var, T, T),
    Gelu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvT { x: Var, w: Var, b: Option<Var>, geom: TConvGeom },
    Gdn { x: Var, beta: Var, gamma: Var, inverse: bool },
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, cin: usize, cout: usize },
    GlobalAvgPool(Var),
    MaskedAvgPool { x: Var, labels: Arc<[u32]>, counts: Vec<usize> },
    Expand { p: Var, labels: Arc<[u32]> },
    DpsConv { x: Var, kernels: Var, k: usize },
    Softmax { x: Var, outer: usize, axis: usize, inner: usize },
    Concat(Var, Var),
    MulChannel(Var, Var),
    GaussianBits { y: Var, mu: Var, sigma: Var },
    LogisticBits { v: Var, loc: Var, log_scale: Var, channels: usize, inner: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of recorded operations. One graph per forward pass; confined to a single thread.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    params: HashMap<String, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Var>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a recorded value; `None` when the value is disconnected from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for every bound parameter, keyed by name. Disconnected ones are `None`.
    pub fn params(&self) -> impl Iterator<Item = (&str, Option<&Tensor<T>>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), self.get(*v)))
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|v| self.get(*v))
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!("{what}: shape {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn add_into<T: Real>(slot: &mut Option<Tensor<T>>, shape: &[usize], g: Vec<T>) {
    match slot {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(Tensor::new(shape, g).expect("gradient shape")),
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// Graph that records gradients for trainable parameters and marked inputs.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true, params: HashMap::new() }
    }

    /// Graph for pure evaluation: nothing requires a gradient.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false, params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf value; `requires_grad` is ignored in inference graphs.
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.input(value, false)
    }

    /// Bind a named parameter as a leaf. Repeated binds return the same handle.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let p = store
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
        let v = self.input(p.value.clone(), p.trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x + *y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x - *y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x * *y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    /// `x * s` where `s` holds a single value.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(dim_err!("scalar operand has shape {:?}", self.shape(s)));
        }
        let sv = self.scalar(s);
        Ok(self.unary(x, |v| v * sv, Op::MulScalarVar(x, s)))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.recip(), Op::Recip(x))
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { v * slope }, Op::LeakyRelu(x, slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).numel()).unwrap();
        let value = Tensor::scalar(self.value(x).sum() / n);
        self.push(value, Op::Mean(x), &[x])
    }

    /// Cross-correlation of `x[C, H, W]` with `w[O, C/groups, k, k]`, zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 3 || ws.len() != 4 {
            return Err(dim_err!("conv2d expects x[C,H,W] and w[O,C/g,k,k], got {:?} and {:?}", xs, ws));
        }
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        let (o, cg, k) = (ws[0], ws[1], ws[2]);
        if groups == 0 || c % groups != 0 || o % groups != 0 || cg * groups != c {
            return Err(dim_err!("conv2d groups {groups} incompatible with C={c}, O={o}, w={ws:?}"));
        }
        if ws[3] != k || k % 2 == 0 {
            return Err(dim_err!("conv2d kernel must be square and odd, got {:?}", ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(dim_err!("conv2d bias shape {:?}, expected [{o}]", self.shape(b)));
            }
        }
        let ho = kernels::conv_out_len(h, k, stride, padding)
            .ok_or_else(|| dim_err!("conv2d input {h}x{wd} too small for k={k}"))?;
        let wo = kernels::conv_out_len(wd, k, stride, padding)
            .ok_or_else(|| dim_err!("conv2d input {h}x{wd} too small for k={k}"))?;
        let geom = ConvGeom { cin: c, h, w: wd, cout: o, k, stride, pad: padding, groups, ho, wo };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(&[o, ho, wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Transposed convolution with `w[Cin, Cout, k, k]`; output is `stride * H`.
    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 3 || ws.len() != 4 || ws[0] != xs[0] {
            return Err(dim_err!("conv2d_transpose expects x[C,H,W], w[C,O,k,k]; got {:?}, {:?}", xs, ws));
        }
        if !(1..=2).contains(&stride) {
            return Err(dim_err!("conv2d_transpose stride must be 1 or 2, got {stride}"));
        }
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[1], ws[2]);
        if ws[3] != k || k % 2 == 0 {
            return Err(dim_err!("conv2d_transpose kernel must be square and odd, got {:?}", ws));
        }
        let (ho, wo) = (stride * h, stride * wd);
        // the forward sweep over the output must land exactly back on the input grid
        if kernels::conv_out_len(ho, k, stride, padding) != Some(h)
            || kernels::conv_out_len(wo, k, stride, padding) != Some(wd)
        {
            return Err(dim_err!(
                "conv2d_transpose k={k} stride={stride} padding={padding} cannot map {h}x{wd} to {ho}x{wo}"
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(dim_err!("conv2d_transpose bias shape {:?}", self.shape(b)));
            }
        }
        let geom = TConvGeom { cin, h, w: wd, cout, k, stride, pad: padding, ho, wo };
        let out = kernels::conv_transpose_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(&[cout, ho, wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::ConvT { x, w, b, geom }, &inputs))
    }

    /// GDN over `x[C, H, W]` with effective (already positive) `beta[C]`, `gamma[C, C]`.
    pub fn gdn(&mut self, x: Var, beta: Var, gamma: Var, inverse: bool) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(dim_err!("gdn expects x[C,H,W], got {:?}", xs));
        }
        let c = xs[0];
        if self.shape(beta) != [c] || self.shape(gamma) != [c, c] {
            return Err(dim_err!(
                "gdn params beta {:?} gamma {:?} do not match C={c}",
                self.shape(beta),
                self.shape(gamma)
            ));
        }
        let out = kernels::gdn_forward(
            self.value(x).data(),
            self.value(beta).data(),
            self.value(gamma).data(),
            c,
            inverse,
        )
        .ok_or_else(|| Error::Numeric("gdn denominator is not finite and positive".into()))?;
        let value = Tensor::new(&xs, out)?;
        Ok(self.push(value, Op::Gdn { x, beta, gamma, inverse }, &[x, beta, gamma]))
    }

    /// Affine map over the last axis: `x[.., Cin] -> [.., Cout]` with `w[Cout, Cin]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        let cin = *xs.last().ok_or_else(|| dim_err!("linear on a rank-0 value"))?;
        if ws.len() != 2 || ws[1] != cin {
            return Err(dim_err!("linear weight {:?} does not accept {cin} inputs", ws));
        }
        let cout = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(dim_err!("linear bias shape {:?}, expected [{cout}]", self.shape(b)));
            }
        }
        let rows = self.value(x).numel() / cin;
        let mut out = vec![T::zero(); rows * cout];
        if let Some(b) = b {
            for r in 0..rows {
                out[r * cout..(r + 1) * cout].copy_from_slice(self.value(b).data());
            }
        }
        kernels::gemm(false, true, rows, cout, cin, T::one(), self.value(x).data(), self.value(w).data(), T::one(), &mut out);
        let mut shape = xs;
        *shape.last_mut().unwrap() = cout;
        let value = Tensor::new(&shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b, rows, cin, cout }, &inputs))
    }

    /// Per-channel spatial mean of `x[C, H, W]`, giving `[C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 3 {
            return Err(dim_err!("global_avg_pool expects x[C,H,W], got {:?}", xs));
        }
        let c = xs[0];
        let plane = xs[1] * xs[2];
        let n = T::from_usize(plane).unwrap();
        let data = self.value(x).data();
        let out = (0..c)
            .map(|ci| data[ci * plane..(ci + 1) * plane].iter().fold(T::zero(), |a, &v| a + v) / n)
            .collect();
        let value = Tensor::new(&[c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    /// Per-region channel means of `x[C, H, W]` under a label raster, giving `[n, C]`.
    pub fn masked_avg_pool(&mut self, x: Var, labels: Arc<[u32]>, n: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 3 || xs[1] * xs[2] != labels.len() {
            return Err(dim_err!("masked_avg_pool: features {:?} vs {} labels", xs, labels.len()));
        }
        let c = xs[0];
        let plane = labels.len();
        let mut counts = vec![0usize; n];
        for &l in labels.iter() {
            let l = l as usize;
            if l >= n {
                return Err(dim_err!("label {l} out of range for {n} regions"));
            }
            counts[l] += 1;
        }
        if counts.iter().any(|&k| k == 0) {
            return Err(dim_err!("masked_avg_pool: empty region"));
        }
        let data = self.value(x).data();
        let mut out = vec![T::zero(); n * c];
        for ci in 0..c {
            let xc = &data[ci * plane..(ci + 1) * plane];
            for (p, &l) in labels.iter().enumerate() {
                out[l as usize * c + ci] += xc[p];
            }
        }
        for (i, &k) in counts.iter().enumerate() {
            let inv = T::one() / T::from_usize(k).unwrap();
            for v in &mut out[i * c..(i + 1) * c] {
                *v *= inv;
            }
        }
        let value = Tensor::new(&[n, c], out)?;
        Ok(self.push(value, Op::MaskedAvgPool { x, labels, counts }, &[x]))
    }

    /// Scatter `p[n, C]` to every pixel of its region: `[C, H, W]`.
    pub fn expand(&mut self, p: Var, labels: Arc<[u32]>, h: usize, w: usize) -> Result<Var> {
        let ps = self.shape(p);
        if ps.len() != 2 || h * w != labels.len() {
            return Err(dim_err!("expand: prototypes {:?}, {}x{} vs {} labels", ps, h, w, labels.len()));
        }
        let (n, c) = (ps[0], ps[1]);
        if labels.iter().any(|&l| l as usize >= n) {
            return Err(dim_err!("expand: region label exceeds prototype count {n}"));
        }
        let pd = self.value(p).data();
        let plane = h * w;
        let mut out = vec![T::zero(); c * plane];
        for ci in 0..c {
            let oc = &mut out[ci * plane..(ci + 1) * plane];
            for (o, &l) in oc.iter_mut().zip(labels.iter()) {
                *o = pd[l as usize * c + ci];
            }
        }
        let value = Tensor::new(&[c, h, w], out)?;
        Ok(self.push(value, Op::Expand { p, labels }, &[p]))
    }

    /// Per-pixel depthwise convolution; `kernels` is laid out `[C, k*k, H, W]`.
    pub fn dpsconv(&mut self, x: Var, kernels: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernels);
        if xs.len() != 3 || ks.len() != 4 || ks[0] != xs[0] || ks[2] != xs[1] || ks[3] != xs[2] {
            return Err(dim_err!("dpsconv: x {:?} vs kernels {:?}", xs, ks));
        }
        let k = (ks[1] as f64).sqrt().round() as usize;
        if k * k != ks[1] || k % 2 == 0 {
            return Err(dim_err!("dpsconv: {} taps is not an odd square", ks[1]));
        }
        let out = crate::rat::dpsconv_raw(self.value(x).data(), self.value(kernels).data(), xs[0], xs[1], xs[2], k);
        let value = Tensor::new(&xs, out)?;
        Ok(self.push(value, Op::DpsConv { x, kernels, k }, &[x, kernels]))
    }

    /// Softmax along `axis`, viewing the value as `[outer, axis_len, inner]`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(dim_err!("softmax axis {axis} out of range for {:?}", xs));
        }
        let outer: usize = xs[..axis].iter().product();
        let len = xs[axis];
        let inner: usize = xs[axis + 1..].iter().product();
        let d = self.value(x).data();
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let m = (0..len).map(|a| d[at(a)]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for a in 0..len {
                    let e = (d[at(a)] - m).exp();
                    out[at(a)] = e;
                    s += e;
                }
                for a in 0..len {
                    out[at(a)] = out[at(a)] / s;
                }
            }
        }
        let value = Tensor::new(&xs, out)?;
        Ok(self.push(value, Op::Softmax { x, outer, axis: len, inner }, &[x]))
    }

    /// Concatenate along the leading axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa.is_empty() || sa[1..] != sb[1..] {
            return Err(dim_err!("concat: {:?} vs {:?}", sa, sb));
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Concat(a, b), &[a, b]))
    }

    /// `x[C, ...] * a[C]` broadcast along the trailing axes.
    pub fn mul_channel(&mut self, x: Var, a: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if self.shape(a) != [xs[0]] {
            return Err(dim_err!("mul_channel: x {:?} vs a {:?}", xs, self.shape(a)));
        }
        let inner = self.value(x).numel() / xs[0];
        let ad = self.value(a).data();
        let out = self.value(x).data().iter().enumerate().map(|(i, &v)| v * ad[i / inner]).collect();
        let value = Tensor::new(&xs, out)?;
        Ok(self.push(value, Op::MulChannel(x, a), &[x, a]))
    }

    /// Total bits of `y` under per-element Gaussians integrated over unit bins.
    pub fn gaussian_bits(&mut self, y: Var, mu: Var, sigma: Var) -> Result<Var> {
        same_shape(self.value(y), self.value(mu), "gaussian_bits mu")?;
        same_shape(self.value(y), self.value(sigma), "gaussian_bits sigma")?;
        let mut bits = 0.0f64;
        for ((&yv, &m), &s) in self.value(y).data().iter().zip(self.value(mu).data()).zip(self.value(sigma).data()) {
            if !(s > T::zero()) || !s.is_finite() {
                return Err(Error::Numeric(format!("gaussian scale {} out of range", s.f64())));
            }
            let (p, _, _) = gaussian_mass(yv - m, s);
            bits -= p.max(T::lit(LIKELIHOOD_FLOOR)).f64().log2();
        }
        let value = Tensor::scalar(T::lit(bits));
        Ok(self.push(value, Op::GaussianBits { y, mu, sigma }, &[y, mu, sigma]))
    }

    /// Total bits of `v` under per-channel logistic densities. The value is
    /// viewed as `[outer, channels, inner]`.
    pub fn logistic_bits(&mut self, v: Var, loc: Var, log_scale: Var, channel_axis: usize) -> Result<Var> {
        let vs = self.shape(v).to_vec();
        if channel_axis >= vs.len() {
            return Err(dim_err!("logistic_bits channel axis {channel_axis} for {:?}", vs));
        }
        let channels = vs[channel_axis];
        let inner: usize = vs[channel_axis + 1..].iter().product();
        if self.shape(loc) != [channels] || self.shape(log_scale) != [channels] {
            return Err(dim_err!("logistic_bits params do not match {channels} channels"));
        }
        let (ld, sd) = (self.value(loc).data(), self.value(log_scale).data());
        let mut bits = 0.0f64;
        for (i, &x) in self.value(v).data().iter().enumerate() {
            let c = (i / inner) % channels;
            let (p, _, _) = logistic_mass(x - ld[c], sd[c].exp());
            bits -= p.max(T::lit(LIKELIHOOD_FLOOR)).f64().log2();
        }
        let value = Tensor::scalar(T::lit(bits));
        Ok(self.push(value, Op::LogisticBits { v, loc, log_scale, channels, inner }, &[v, loc, log_scale]))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(dim_err!("backward needs a scalar loss, got {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient at node {i}")));
            }
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self.params.iter().map(|(k, v)| (k.clone(), *v)).collect();
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let out = node.value.data();
        let mut acc = |v: Var, data: Vec<T>| {
            if self.rg(v) {
                add_into(&mut grads[v.0], self.shape(v), data);
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, gd.to_vec());
                acc(*b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, gd.to_vec());
                acc(*b, gd.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if self.rg(*a) {
                    acc(*a, gd.iter().zip(bv).map(|(g, b)| *g * *b).collect());
                }
                if self.rg(*b) {
                    acc(*b, gd.iter().zip(av).map(|(g, a)| *g * *a).collect());
                }
            }
            Op::Scale(x, c) => acc(*x, gd.iter().map(|&v| v * *c).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, gd.to_vec()),
            Op::MulScalarVar(x, s) => {
                let sv = val(*s)[0];
                if self.rg(*x) {
                    acc(*x, gd.iter().map(|&v| v * sv).collect());
                }
                if self.rg(*s) {
                    let t = gd.iter().zip(val(*x)).fold(T::zero(), |a, (g, x)| a + *g * *x);
                    acc(*s, vec![t]);
                }
            }
            Op::Square(x) => acc(*x, gd.iter().zip(val(*x)).map(|(g, x)| *g * T::lit(2.0) * *x).collect()),
            Op::Exp(x) => acc(*x, gd.iter().zip(out).map(|(g, y)| *g * *y).collect()),
            Op::Recip(x) => acc(*x, gd.iter().zip(out).map(|(g, y)| -*g * *y * *y).collect()),
            Op::Clamp(x, lo, hi) => acc(
                *x,
                gd.iter()
                    .zip(val(*x))
                    .map(|(g, x)| if *x >= *lo && *x <= *hi { *g } else { T::zero() })
                    .collect(),
            ),
            Op::Gelu(x) => acc(*x, gd.iter().zip(val(*x)).map(|(g, x)| *g * kernels::gelu_grad(*x)).collect()),
            Op::LeakyRelu(x, s) => acc(
                *x,
                gd.iter().zip(val(*x)).map(|(g, x)| if *x > T::zero() { *g } else { *g * *s }).collect(),
            ),
            Op::Sigmoid(x) => acc(*x, gd.iter().zip(out).map(|(g, y)| *g * *y * (T::one() - *y)).collect()),
            Op::Sum(x) => acc(*x, vec![gd[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![gd[0] / T::from_usize(n).unwrap(); n]);
            }
            Op::Conv2d { x, w, b, geom } => {
                let (gx, gw) = kernels::conv2d_backward(geom, gd, val(*x), val(*w), self.rg(*x), self.rg(*w));
                if let Some(gx) = gx {
                    acc(*x, gx);
                }
                if let Some(gw) = gw {
                    acc(*w, gw);
                }
                if let Some(b) = b {
                    acc(*b, kernels::bias_grad(gd, geom.cout));
                }
            }
            Op::ConvT { x, w, b, geom } => {
                let (gx, gw) =
                    kernels::conv_transpose_backward(geom, gd, val(*x), val(*w), self.rg(*x), self.rg(*w));
                if let Some(gx) = gx {
                    acc(*x, gx);
                }
                if let Some(gw) = gw {
                    acc(*w, gw);
                }
                if let Some(b) = b {
                    acc(*b, kernels::bias_grad(gd, geom.cout));
                }
            }
            Op::Gdn { x, beta, gamma, inverse } => {
                let c = self.shape(*x)[0];
                let (gx, gb, gg) = kernels::gdn_backward(gd, val(*x), val(*beta), val(*gamma), c, *inverse);
                acc(*x, gx);
                acc(*beta, gb);
                acc(*gamma, gg);
            }
            Op::Linear { x, w, b, rows, cin, cout } => {
                if self.rg(*x) {
                    let mut gx = vec![T::zero(); rows * cin];
                    kernels::gemm(false, false, *rows, *cin, *cout, T::one(), gd, val(*w), T::zero(), &mut gx);
                    acc(*x, gx);
                }
                if self.rg(*w) {
                    let mut gw = vec![T::zero(); cout * cin];
                    kernels::gemm(true, false, *cout, *cin, *rows, T::one(), gd, val(*x), T::zero(), &mut gw);
                    acc(*w, gw);
                }
                if let Some(b) = b {
                    let mut gb = vec![T::zero(); *cout];
                    for r in 0..*rows {
                        for (o, v) in gb.iter_mut().enumerate() {
                            *v += gd[r * cout + o];
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let plane = xs[1] * xs[2];
                let n = T::from_usize(plane).unwrap();
                let mut gx = Vec::with_capacity(xs[0] * plane);
                for &gc in gd {
                    gx.extend(std::iter::repeat(gc / n).take(plane));
                }
                acc(*x, gx);
            }
            Op::MaskedAvgPool { x, labels, counts } => {
                let c = self.shape(*x)[0];
                let plane = labels.len();
                let mut gx = vec![T::zero(); c * plane];
                let inv: Vec<T> = counts.iter().map(|&k| T::one() / T::from_usize(k).unwrap()).collect();
                for ci in 0..c {
                    for (p, &l) in labels.iter().enumerate() {
                        gx[ci * plane + p] = gd[l as usize * c + ci] * inv[l as usize];
                    }
                }
                acc(*x, gx);
            }
            Op::Expand { p, labels } => {
                let ps = self.shape(*p);
                let (n, c) = (ps[0], ps[1]);
                let plane = labels.len();
                let mut gp = vec![T::zero(); n * c];
                for ci in 0..c {
                    for (pix, &l) in labels.iter().enumerate() {
                        gp[l as usize * c + ci] += gd[ci * plane + pix];
                    }
                }
                acc(*p, gp);
            }
            Op::DpsConv { x, kernels, k } => {
                let xs = self.shape(*x);
                let (gx, gk) = crate::rat::dpsconv_backward_raw(gd, val(*x), val(*kernels), xs[0], xs[1], xs[2], *k);
                acc(*x, gx);
                acc(*kernels, gk);
            }
            Op::Softmax { x, outer, axis, inner } => {
                let mut gx = vec![T::zero(); out.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |a: usize| (o * axis + a) * inner + i;
                        let dot = (0..*axis).fold(T::zero(), |s, a| s + gd[at(a)] * out[at(a)]);
                        for a in 0..*axis {
                            gx[at(a)] = out[at(a)] * (gd[at(a)] - dot);
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).numel();
                acc(*a, gd[..na].to_vec());
                acc(*b, gd[na..].to_vec());
            }
            Op::MulChannel(x, a) => {
                let c = self.shape(*a)[0];
                let inner = gd.len() / c;
                let (xv, av) = (val(*x), val(*a));
                if self.rg(*x) {
                    acc(*x, gd.iter().enumerate().map(|(i, &g)| g * av[i / inner]).collect());
                }
                if self.rg(*a) {
                    let mut ga = vec![T::zero(); c];
                    for (i, &g) in gd.iter().enumerate() {
                        ga[i / inner] += g * xv[i];
                    }
                    acc(*a, ga);
                }
            }
            Op::GaussianBits { y, mu, sigma } => {
                let scale = gd[0];
                let (yv, mv, sv) = (val(*y), val(*mu), val(*sigma));
                let n = yv.len();
                let mut gy = vec![T::zero(); n];
                let mut gs = vec![T::zero(); n];
                for j in 0..n {
                    let (p, dp_dd, dp_ds) = gaussian_mass(yv[j] - mv[j], sv[j]);
                    if p < T::lit(LIKELIHOOD_FLOOR) {
                        continue;
                    }
                    let dbits_dp = -scale / (p * T::lit(LN_2));
                    gy[j] = dbits_dp * dp_dd;
                    gs[j] = dbits_dp * dp_ds;
                }
                acc(*mu, gy.iter().map(|&v| -v).collect());
                acc(*y, gy);
                acc(*sigma, gs);
            }
            Op::LogisticBits { v, loc, log_scale, channels, inner } => {
                let scale = gd[0];
                let (vv, ld, sd) = (val(*v), val(*loc), val(*log_scale));
                let mut gv = vec![T::zero(); vv.len()];
                let mut gl = vec![T::zero(); *channels];
                let mut gs = vec![T::zero(); *channels];
                for (j, &x) in vv.iter().enumerate() {
                    let c = (j / inner) % channels;
                    let s = sd[c].exp();
                    let (p, dp_dd, dp_ds) = logistic_mass(x - ld[c], s);
                    if p < T::lit(LIKELIHOOD_FLOOR) {
                        continue;
                    }
                    let dbits_dp = -scale / (p * T::lit(LN_2));
                    gv[j] = dbits_dp * dp_dd;
                    gl[c] -= dbits_dp * dp_dd;
                    gs[c] += dbits_dp * dp_ds * s;
                }
                acc(*v, gv);
                acc(*loc, gl);
                acc(*log_scale, gs);
            }
        }
    }
}

/// Mass of a zero-mean Gaussian with scale `s` on `[d - 0.5, d + 0.5]`, with
/// its derivatives in `d` and `s`. Evaluated on `|d|` so both CDF terms sit in
/// the lower tail.
pub(crate) fn gaussian_mass<T: Real>(d: T, s: T) -> (T, T, T) {
    let half = T::lit(0.5);
    let v = d.abs();
    let a = (half - v) / s;
    let b = (-half - v) / s;
    let p = kernels::std_normal_cdf(a) - kernels::std_normal_cdf(b);
    let (pa, pb) = (kernels::std_normal_pdf(a), kernels::std_normal_pdf(b));
    let dp_dv = (pb - pa) / s;
    let dp_dd = if d < T::zero() { -dp_dv } else { dp_dv };
    let dp_ds = (b * pb - a * pa) / s;
    (p, dp_dd, dp_ds)
}

/// Logistic counterpart of [`gaussian_mass`].
pub(crate) fn logistic_mass<T: Real>(d: T, s: T) -> (T, T, T) {
    let half = T::lit(0.5);
    let v = d.abs();
    let a = (half - v) / s;
    let b = (-half - v) / s;
    let (sa, sb) = (kernels::sigmoid(a), kernels::sigmoid(b));
    let p = sa - sb;
    let (da, db) = (sa * (T::one() - sa), sb * (T::one() - sb));
    let dp_dv = (db - da) / s;
    let dp_dd = if d < T::zero() { -dp_dv } else { dp_dv };
    let dp_ds = (b * db - a * da) / s;
    (p, dp_dd, dp_ds)
}
