//! The codec network: sample blocks with SAL, RAT stages, the hyperprior and
//! the two prototype sub-codecs.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::nn::{Conv, ConvT, Gdn, Linear, LEAKY_SLOPE};
use crate::rat::{Rat, RatConfig, Sal};
use crate::region::{downsample_region_map, map_var, RegionMap};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};
use crate::entropy::{SIGMA_MAX, SIGMA_MIN};

/// Region map resolution for `y'`, `p'` and the transform RATs.
pub const STAGE1_FACTOR: usize = 4;
/// Region map resolution for `y`, `p` and the hyper RATs.
pub const STAGE2_FACTOR: usize = 16;
/// Input sides must be multiples of this.
pub const PAD_MULTIPLE: usize = 64;

const CONFIG_HEADER: &str = "segcodec-config 1";
const META_NORMALIZE: &str = "meta.normalize_kernels";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetConfig {
    /// Width of the transforms and of `y'`.
    pub n: usize,
    /// Width of `y`.
    pub m: usize,
    /// Linear chain for `p'`, starting at `n`.
    pub proto_prime: Vec<usize>,
    /// Linear chain for `p`, starting at `m`.
    pub proto: Vec<usize>,
    /// Hyper encoder output widths; the last one is the width of `z`.
    pub hyper: Vec<usize>,
    pub kernel_size: usize,
    pub grid_n: usize,
    pub normalize_kernels: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl NetConfig {
    pub fn full() -> Self {
        Self {
            n: 192,
            m: 320,
            proto_prime: vec![192, 128, 96, 96],
            proto: vec![320, 192, 128, 96],
            hyper: vec![320, 288, 256, 224, 192],
            kernel_size: 3,
            grid_n: 4,
            normalize_kernels: true,
        }
    }

    /// Narrow widths for desk-scale training.
    pub fn toy() -> Self {
        Self {
            n: 32,
            m: 48,
            proto_prime: vec![32, 24, 16, 16],
            proto: vec![48, 32, 24, 16],
            hyper: vec![48, 40, 32, 24, 16],
            ..Self::full()
        }
    }

    /// Smallest widths that exercise every layer, for finite differences.
    pub fn tiny() -> Self {
        Self {
            n: 4,
            m: 6,
            proto_prime: vec![4, 3, 3, 2],
            proto: vec![6, 4, 3, 2],
            hyper: vec![6, 5, 4, 4, 3],
            ..Self::full()
        }
    }

    pub fn z_channels(&self) -> usize {
        self.hyper[4]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n == 0 || self.m == 0 {
            return bad("N and M must be positive".into());
        }
        if self.proto_prime.len() != 4 || self.proto_prime[0] != self.n {
            return bad(format!("p' schedule {:?} must have 4 entries starting at N={}", self.proto_prime, self.n));
        }
        if self.proto.len() != 4 || self.proto[0] != self.m {
            return bad(format!("p schedule {:?} must have 4 entries starting at M={}", self.proto, self.m));
        }
        if self.hyper.len() != 5 {
            return bad(format!("hyper schedule {:?} must have 5 entries", self.hyper));
        }
        if self.proto_prime.iter().chain(&self.proto).chain(&self.hyper).any(|&w| w == 0) {
            return bad("all widths must be positive".into());
        }
        if self.kernel_size % 2 == 0 {
            return bad(format!("kernel size {} must be odd", self.kernel_size));
        }
        if self.grid_n == 0 || self.grid_n * self.grid_n > crate::region::MAX_REGIONS {
            return bad(format!("grid_n {} out of range", self.grid_n));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "{CONFIG_HEADER}\nN={}\nM={}\nproto_prime={}\nproto={}\nhyper={}\nkernel_size={}\ngrid_n={}\nnormalize_kernels={}\n",
            self.n,
            self.m,
            list(&self.proto_prime),
            list(&self.proto),
            list(&self.hyper),
            self.kernel_size,
            self.grid_n,
            self.normalize_kernels
        )
    }

    /// Parse the key=value form. Keys not given keep the full-width values;
    /// `preset=toy|tiny|full` picks a different base and must come first.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        if lines.next() != Some(CONFIG_HEADER) {
            return Err(Error::Parse(format!("config must start with '{CONFIG_HEADER}'")));
        }
        let mut cfg = Self::full();
        for line in lines {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse(format!("expected key=value, got '{line}'")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |s: &str| s.trim().parse::<usize>().map_err(|_| Error::Parse(format!("bad value for {k}: '{s}'")));
            let list = |s: &str| s.split(',').map(num).collect::<Result<Vec<_>>>();
            match k {
                "preset" => {
                    cfg = match v {
                        "full" => Self::full(),
                        "toy" => Self::toy(),
                        "tiny" => Self::tiny(),
                        _ => return Err(Error::Parse(format!("unknown preset '{v}'"))),
                    }
                }
                "N" => cfg.n = num(v)?,
                "M" => cfg.m = num(v)?,
                "proto_prime" => cfg.proto_prime = list(v)?,
                "proto" => cfg.proto = list(v)?,
                "hyper" => cfg.hyper = list(v)?,
                "kernel_size" => cfg.kernel_size = num(v)?,
                "grid_n" => cfg.grid_n = num(v)?,
                "normalize_kernels" => {
                    cfg.normalize_kernels = v.parse().map_err(|_| Error::Parse(format!("bad bool '{v}'")))?
                }
                _ => return Err(Error::Parse(format!("unknown config key '{k}'"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Recover the architecture from stored weights. `grid_n` is not a
    /// property of the weights and is left at its default.
    pub fn from_params<T: Real>(store: &ParamStore<T>) -> Result<Self> {
        let shape = |name: &str| -> Result<Vec<usize>> {
            store
                .get(name)
                .map(|p| p.value.shape().to_vec())
                .ok_or_else(|| Error::Config(format!("weights lack parameter {name}")))
        };
        let n = shape("enc.0.down.w")?[0];
        let m = shape("enc.3.conv.w")?[0];
        let chain = |prefix: &str| -> Result<Vec<usize>> {
            let mut v = vec![shape(&format!("{prefix}.enc.0.w"))?[1]];
            for i in 0..3 {
                v.push(shape(&format!("{prefix}.enc.{i}.w"))?[0]);
            }
            Ok(v)
        };
        let hyper = (0..5).map(|i| shape(&format!("hyper.enc.{i}.w")).map(|s| s[0])).collect::<Result<Vec<_>>>()?;
        let taps = shape("enc.rat.dkg.1.w")?[0] / n;
        let kernel_size = (1..16).find(|k| k * k == taps).ok_or_else(|| Error::Config("cannot infer kernel size".into()))?;
        let normalize_kernels = match store.get(META_NORMALIZE) {
            Some(p) => p.value.data().first().map_or(true, |v| v.f64() != 0.0),
            None => true,
        };
        let cfg = Self {
            n,
            m,
            proto_prime: chain("proto1")?,
            proto: chain("proto2")?,
            hyper,
            kernel_size,
            normalize_kernels,
            ..Self::full()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Downsample block: conv k5 s2 -> SAL -> conv k3 -> GDN (GDN omitted on the last block).
#[derive(Clone, Debug)]
struct Down {
    down: Conv,
    sal: Sal,
    conv: Conv,
    gdn: Option<Gdn>,
}

impl Down {
    fn new(name: &str, cin: usize, mid: usize, cout: usize, gdn: bool) -> Self {
        Self {
            down: Conv::new(format!("{name}.down"), cin, mid, 5, 2),
            sal: Sal::new(&format!("{name}.sal"), mid),
            conv: Conv::new(format!("{name}.conv"), mid, cout, 3, 1),
            gdn: gdn.then(|| Gdn::new(format!("{name}.gdn"), cout, false)),
        }
    }

    fn init(&self, s: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.down.init(s, rng)?;
        self.sal.init(s, rng)?;
        self.conv.init(s, rng)?;
        self.gdn.as_ref().map_or(Ok(()), |g| g.init(s))
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.down.forward(g, p, x)?;
        let h = self.sal.forward(g, p, h)?;
        let h = self.conv.forward(g, p, h)?;
        match &self.gdn {
            Some(gdn) => gdn.forward(g, p, h),
            None => Ok(h),
        }
    }
}

/// Upsample block: tconv k5 s2 -> SAL -> conv k3 -> IGDN (IGDN omitted on the last block).
#[derive(Clone, Debug)]
struct Up {
    up: ConvT,
    sal: Sal,
    conv: Conv,
    igdn: Option<Gdn>,
}

impl Up {
    fn new(name: &str, cin: usize, mid: usize, cout: usize, igdn: bool) -> Self {
        Self {
            up: ConvT::new(format!("{name}.up"), cin, mid, 5, 2),
            sal: Sal::new(&format!("{name}.sal"), mid),
            conv: Conv::new(format!("{name}.conv"), mid, cout, 3, 1),
            igdn: igdn.then(|| Gdn::new(format!("{name}.igdn"), cout, true)),
        }
    }

    fn init(&self, s: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.up.init(s, rng)?;
        self.sal.init(s, rng)?;
        self.conv.init(s, rng)?;
        self.igdn.as_ref().map_or(Ok(()), |g| g.init(s))
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, p, x)?;
        let h = self.sal.forward(g, p, h)?;
        let h = self.conv.forward(g, p, h)?;
        match &self.igdn {
            Some(gdn) => gdn.forward(g, p, h),
            None => Ok(h),
        }
    }
}

#[derive(Clone, Debug)]
enum HyperLayer {
    Conv(Conv),
    ConvT(ConvT),
}

/// One hyper decoder column followed by its RAT.
#[derive(Clone, Debug)]
struct HyperDecoder {
    layers: Vec<HyperLayer>,
    rat: Rat,
}

impl HyperDecoder {
    fn new(name: &str, cfg: &NetConfig) -> Self {
        let h = &cfg.hyper;
        let layers = vec![
            HyperLayer::Conv(Conv::new(format!("{name}.0"), h[4], h[4], 3, 1)),
            HyperLayer::ConvT(ConvT::new(format!("{name}.1"), h[4], h[3], 3, 2)),
            HyperLayer::Conv(Conv::new(format!("{name}.2"), h[3], h[2], 3, 1)),
            HyperLayer::ConvT(ConvT::new(format!("{name}.3"), h[2], h[1], 3, 2)),
            HyperLayer::Conv(Conv::new(format!("{name}.4"), h[1], cfg.m, 3, 1)),
        ];
        Self { layers, rat: Rat::new(&format!("{name}.rat"), rat_config(cfg, cfg.m, cfg.m)) }
    }

    fn init(&self, s: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        for l in &self.layers {
            match l {
                HyperLayer::Conv(c) => c.init(s, rng)?,
                HyperLayer::ConvT(c) => c.init(s, rng)?,
            }
        }
        self.rat.init(s, rng)
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, z: Var, protos: Var, rm: &RegionMap) -> Result<Var> {
        let mut h = z;
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.gelu(h);
            }
            h = match l {
                HyperLayer::Conv(c) => c.forward(g, p, h)?,
                HyperLayer::ConvT(c) => c.forward(g, p, h)?,
            };
        }
        self.rat.forward(g, p, h, protos, rm)
    }
}

/// Prototype sub-codec: linear chain with a learned gain before rounding,
/// mirrored on the way back, and a per-dimension logistic entropy model.
#[derive(Clone, Debug)]
pub struct ProtoCodec {
    name: String,
    enc: Vec<Linear>,
    dec: Vec<Linear>,
}

impl ProtoCodec {
    fn new(name: &str, dims: &[usize]) -> Self {
        let enc = (0..dims.len() - 1).map(|i| Linear::new(format!("{name}.enc.{i}"), dims[i], dims[i + 1])).collect();
        let last = dims.len() - 1;
        let dec = (0..last).map(|i| Linear::new(format!("{name}.dec.{i}"), dims[last - i], dims[last - i - 1])).collect();
        Self { name: name.to_string(), enc, dec }
    }

    pub fn code_dim(&self) -> usize {
        self.enc.last().unwrap().cout
    }

    pub fn input_dim(&self) -> usize {
        self.enc[0].cin
    }

    fn gain_name(&self) -> String {
        format!("{}.log_gain", self.name)
    }

    fn loc_name(&self) -> String {
        format!("{}.loc", self.name)
    }

    fn scale_name(&self) -> String {
        format!("{}.log_scale", self.name)
    }

    fn init(&self, s: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        for l in self.enc.iter().chain(&self.dec) {
            l.init(s, rng)?;
            s.value_mut(&format!("{}.b", l.name)).unwrap().data_mut().fill(0.0);
        }
        let d = self.code_dim();
        s.insert(&self.gain_name(), Tensor::zeros(&[1]), true)?;
        s.insert(&self.loc_name(), Tensor::zeros(&[d]), true)?;
        s.insert(&self.scale_name(), Tensor::zeros(&[d]), true)
    }

    fn chain<T: Real>(layers: &[Linear], g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in layers.iter().enumerate() {
            if i > 0 {
                h = g.leaky_relu(h, T::lit(LEAKY_SLOPE));
            }
            h = l.forward(g, p, h)?;
        }
        Ok(h)
    }

    /// `[n, d0] -> [n, d_code]`, scaled by the gain; ready for quantization.
    pub fn analyze<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, protos: Var) -> Result<Var> {
        let e = Self::chain(&self.enc, g, p, protos)?;
        let lg = g.param(p, &self.gain_name())?;
        let gain = g.exp(lg);
        g.mul_scalar_var(e, gain)
    }

    /// Quantized codes back to `[n, d0]`.
    pub fn synthesize<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, codes: Var) -> Result<Var> {
        let lg = g.param(p, &self.gain_name())?;
        let neg = g.scale(lg, T::lit(-1.0));
        let inv = g.exp(neg);
        let c = g.mul_scalar_var(codes, inv)?;
        Self::chain(&self.dec, g, p, c)
    }

    pub fn loc<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>) -> Result<Var> {
        g.param(p, &self.loc_name())
    }

    pub fn loc_values<T: Real>(&self, p: &ParamStore<T>) -> Result<Vec<T>> {
        Ok(param(p, &self.loc_name())?.data().to_vec())
    }

    pub fn bits<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, codes: Var) -> Result<Var> {
        let loc = g.param(p, &self.loc_name())?;
        let ls = g.param(p, &self.scale_name())?;
        g.logistic_bits(codes, loc, ls, 1)
    }

    /// Logistic scale per code dimension.
    pub fn scales<T: Real>(&self, p: &ParamStore<T>) -> Result<Vec<f64>> {
        Ok(param(p, &self.scale_name())?.data().iter().map(|v| v.f64().exp()).collect())
    }
}

fn param<'a, T: Real>(p: &'a ParamStore<T>, name: &str) -> Result<&'a Tensor<T>> {
    p.get(name).map(|x| &x.value).ok_or_else(|| Error::Config(format!("missing parameter {name}")))
}

fn rat_config(cfg: &NetConfig, channels: usize, proto_dim: usize) -> RatConfig {
    RatConfig { kernel_size: cfg.kernel_size, normalize_kernels: cfg.normalize_kernels, ..RatConfig::new(channels, proto_dim) }
}

/// Region maps at the two resolutions the network consumes.
#[derive(Clone, Debug)]
pub struct StageMaps {
    pub s4: RegionMap,
    pub s16: RegionMap,
}

impl StageMaps {
    /// From a full-resolution map over the (padded) input.
    pub fn new(rm: &RegionMap) -> Result<Self> {
        let (s4, _) = downsample_region_map(rm, STAGE1_FACTOR)?;
        let (s16, _) = downsample_region_map(rm, STAGE2_FACTOR)?;
        Ok(Self { s4, s16 })
    }
}

/// How latents are discretized on a forward pass.
pub enum Quantizer<'a> {
    /// Additive uniform noise (training).
    Noise(&'a mut dyn RngCore),
    /// Mean-subtracted rounding (inference); symbols are recorded.
    Round,
}

enum Center {
    Elementwise(Var),
    /// Per-channel location along `axis`.
    Channel(Var, usize),
}

/// `center + symbol` for every element. Shared by encoder and decoder so
/// both reconstruct identical values.
pub fn dequantize<T: Real>(symbols: &[i32], centers: &[T]) -> Vec<T> {
    symbols.iter().zip(centers).map(|(&s, &c)| T::lit(s as f64) + c).collect()
}

fn expand_centers<T: Real>(g: &Graph<T>, shape: &[usize], center: &Center) -> Vec<T> {
    match *center {
        Center::Elementwise(c) => g.value(c).data().to_vec(),
        Center::Channel(c, axis) => {
            let loc = g.value(c).data();
            let inner: usize = shape[axis + 1..].iter().product();
            let n: usize = shape.iter().product();
            (0..n).map(|i| loc[(i / inner) % loc.len()]).collect()
        }
    }
}

fn quantize_var<T: Real>(g: &mut Graph<T>, v: Var, center: Center, q: &mut Quantizer) -> Result<(Var, Option<Vec<i32>>)> {
    match q {
        Quantizer::Noise(rng) => Ok((crate::entropy::add_uniform_noise(g, v, rng)?, None)),
        Quantizer::Round => {
            let shape = g.shape(v).to_vec();
            let centers = expand_centers(g, &shape, &center);
            let symbols = g
                .value(v)
                .data()
                .iter()
                .zip(&centers)
                .map(|(&x, &c)| crate::entropy::residual_symbol(x.f64(), c.f64()))
                .collect::<Result<Vec<i32>>>()?;
            let q = g.constant(Tensor::new(&shape, dequantize(&symbols, &centers))?);
            Ok((q, Some(symbols)))
        }
    }
}

/// Integer symbols of the four streams, in coding order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Symbols {
    pub p_prime: Vec<i32>,
    pub p: Vec<i32>,
    pub z: Vec<i32>,
    pub y: Vec<i32>,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub y_prime: Var,
    pub y: Var,
    pub z: Var,
    pub z_hat: Var,
    pub y_hat: Var,
    pub mu: Var,
    pub sigma: Var,
    pub p_prime: Var,
    pub p_prime_code: Var,
    pub p_prime_hat: Var,
    pub p: Var,
    pub p_code: Var,
    pub p_hat: Var,
    pub x_hat: Var,
    pub bits_y: Var,
    pub bits_z: Var,
    pub bits_p_prime: Var,
    pub bits_p: Var,
    /// Present for [`Quantizer::Round`].
    pub symbols: Option<Symbols>,
}

/// Tensor values of a forward pass.
#[derive(Clone, Debug)]
pub struct LatentBundle<T: Real = f32> {
    pub y: Tensor<T>,
    pub y_prime: Tensor<T>,
    pub z: Tensor<T>,
    pub y_hat: Tensor<T>,
    pub z_hat: Tensor<T>,
    pub mu: Tensor<T>,
    pub sigma: Tensor<T>,
    pub p_prime: Tensor<T>,
    pub p_prime_code: Tensor<T>,
    pub p_prime_hat: Tensor<T>,
    pub p: Tensor<T>,
    pub p_code: Tensor<T>,
    pub p_hat: Tensor<T>,
}

impl Forward {
    pub fn bundle<T: Real>(&self, g: &Graph<T>) -> LatentBundle<T> {
        let v = |x: Var| g.value(x).clone();
        LatentBundle {
            y: v(self.y),
            y_prime: v(self.y_prime),
            z: v(self.z),
            y_hat: v(self.y_hat),
            z_hat: v(self.z_hat),
            mu: v(self.mu),
            sigma: v(self.sigma),
            p_prime: v(self.p_prime),
            p_prime_code: v(self.p_prime_code),
            p_prime_hat: v(self.p_prime_hat),
            p: v(self.p),
            p_code: v(self.p_code),
            p_hat: v(self.p_hat),
        }
    }
}

/// The assembled network. Holds only structure; weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Codec {
    pub cfg: NetConfig,
    enc: [Down; 4],
    enc_rat: Rat,
    dec: [Up; 4],
    dec_rat: Rat,
    hyper_enc: Vec<Conv>,
    hyper_mean: HyperDecoder,
    hyper_scale: HyperDecoder,
    pub proto_prime: ProtoCodec,
    pub proto: ProtoCodec,
}

impl Codec {
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let (n, m) = (cfg.n, cfg.m);
        let h = &cfg.hyper;
        let hyper_enc = vec![
            Conv::new("hyper.enc.0", m, h[0], 3, 1),
            Conv::new("hyper.enc.1", h[0], h[1], 3, 1),
            Conv::new("hyper.enc.2", h[1], h[2], 3, 2),
            Conv::new("hyper.enc.3", h[2], h[3], 3, 1),
            Conv::new("hyper.enc.4", h[3], h[4], 3, 2),
        ];
        Ok(Self {
            enc: [
                Down::new("enc.0", 3, n, n, true),
                Down::new("enc.1", n, n, n, true),
                Down::new("enc.2", n, n, n, true),
                Down::new("enc.3", n, n, m, false),
            ],
            enc_rat: Rat::new("enc.rat", rat_config(&cfg, n, n)),
            dec: [
                Up::new("dec.0", m, n, n, true),
                Up::new("dec.1", n, n, n, true),
                Up::new("dec.2", n, n, n, true),
                Up::new("dec.3", n, n, 3, false),
            ],
            dec_rat: Rat::new("dec.rat", rat_config(&cfg, n, n)),
            hyper_enc,
            hyper_mean: HyperDecoder::new("hyper.mean", &cfg),
            hyper_scale: HyperDecoder::new("hyper.scale", &cfg),
            proto_prime: ProtoCodec::new("proto1", &cfg.proto_prime),
            proto: ProtoCodec::new("proto2", &cfg.proto),
            cfg,
        })
    }

    /// Fresh weights from a seed.
    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        for b in &self.enc {
            b.init(&mut s, &mut rng)?;
        }
        self.enc_rat.init(&mut s, &mut rng)?;
        for b in &self.dec {
            b.init(&mut s, &mut rng)?;
        }
        self.dec_rat.init(&mut s, &mut rng)?;
        for c in &self.hyper_enc {
            c.init(&mut s, &mut rng)?;
        }
        self.hyper_mean.init(&mut s, &mut rng)?;
        self.hyper_scale.init(&mut s, &mut rng)?;
        self.proto_prime.init(&mut s, &mut rng)?;
        self.proto.init(&mut s, &mut rng)?;
        let z = self.cfg.z_channels();
        s.insert("hyper.z.loc", Tensor::zeros(&[z]), true)?;
        s.insert("hyper.z.log_scale", Tensor::zeros(&[z]), true)?;
        s.insert(META_NORMALIZE, Tensor::full(&[1], self.cfg.normalize_kernels as u8 as f32), false)?;
        Ok(s)
    }

    /// Codec matching stored weights.
    pub fn for_params<T: Real>(store: &ParamStore<T>) -> Result<Self> {
        Self::new(NetConfig::from_params(store)?)
    }

    fn check_input<T: Real>(&self, g: &Graph<T>, x: Var, maps: &StageMaps) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 3 || s[0] != 3 || s[1] % PAD_MULTIPLE != 0 || s[2] % PAD_MULTIPLE != 0 || s[1] == 0 || s[2] == 0 {
            return Err(dim_err!("input must be [3, H, W] with H, W positive multiples of {PAD_MULTIPLE}, got {:?}", s));
        }
        let want4 = (s[1] / STAGE1_FACTOR, s[2] / STAGE1_FACTOR);
        let want16 = (s[1] / STAGE2_FACTOR, s[2] / STAGE2_FACTOR);
        if (maps.s4.height(), maps.s4.width()) != want4 || (maps.s16.height(), maps.s16.width()) != want16 {
            return Err(dim_err!("region maps do not match input {}x{}", s[1], s[2]));
        }
        Ok(())
    }

    /// `x -> y'`.
    pub fn encode_head<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.enc[0].forward(g, p, x)?;
        self.enc[1].forward(g, p, h)
    }

    /// `(y', p̂') -> y`.
    pub fn encode_tail<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, y_prime: Var, p_prime_hat: Var, rm4: &RegionMap) -> Result<Var> {
        let h = self.enc_rat.forward(g, p, y_prime, p_prime_hat, rm4)?;
        let h = self.enc[2].forward(g, p, h)?;
        self.enc[3].forward(g, p, h)
    }

    /// `(ŷ, p̂') -> x̂`, unclamped.
    pub fn synthesize<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, y_hat: Var, p_prime_hat: Var, rm4: &RegionMap) -> Result<Var> {
        let h = self.dec[0].forward(g, p, y_hat)?;
        let h = self.dec[1].forward(g, p, h)?;
        let h = self.dec_rat.forward(g, p, h, p_prime_hat, rm4)?;
        let h = self.dec[2].forward(g, p, h)?;
        self.dec[3].forward(g, p, h)
    }

    pub fn hyper_encode<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, y: Var) -> Result<Var> {
        let mut h = y;
        for (i, c) in self.hyper_enc.iter().enumerate() {
            if i > 0 {
                h = g.gelu(h);
            }
            h = c.forward(g, p, h)?;
        }
        Ok(h)
    }

    /// `(ẑ, p̂) -> (μ, σ)` with `σ = clamp(exp(raw))`.
    pub fn hyper_decode<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, z_hat: Var, p_hat: Var, rm16: &RegionMap) -> Result<(Var, Var)> {
        let mu = self.hyper_mean.forward(g, p, z_hat, p_hat, rm16)?;
        let raw = self.hyper_scale.forward(g, p, z_hat, p_hat, rm16)?;
        let s = g.exp(raw);
        let sigma = g.clamp(s, T::lit(SIGMA_MIN), T::lit(SIGMA_MAX));
        Ok((mu, sigma))
    }

    pub fn z_bits<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, z_hat: Var) -> Result<Var> {
        let loc = g.param(p, "hyper.z.loc")?;
        let ls = g.param(p, "hyper.z.log_scale")?;
        g.logistic_bits(z_hat, loc, ls, 0)
    }

    /// Per-channel logistic location and scale of `z`.
    pub fn z_model<T: Real>(&self, p: &ParamStore<T>) -> Result<(Vec<T>, Vec<f64>)> {
        let loc = param(p, "hyper.z.loc")?.data().to_vec();
        let scale = param(p, "hyper.z.log_scale")?.data().iter().map(|v| v.f64().exp()).collect();
        Ok((loc, scale))
    }

    /// Full pass: analysis, prototype round trips, hyperprior, synthesis and
    /// the four rate terms (in bits).
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var, maps: &StageMaps, q: &mut Quantizer) -> Result<Forward> {
        self.check_input(g, x, maps)?;
        let y_prime = self.encode_head(g, p, x)?;

        let p_prime = map_var(g, y_prime, &maps.s4)?;
        let p_prime_code = self.proto_prime.analyze(g, p, p_prime)?;
        let loc1 = self.proto_prime.loc(g, p)?;
        let (c1, s1) = quantize_var(g, p_prime_code, Center::Channel(loc1, 1), q)?;
        let bits_p_prime = self.proto_prime.bits(g, p, c1)?;
        let p_prime_hat = self.proto_prime.synthesize(g, p, c1)?;

        let y = self.encode_tail(g, p, y_prime, p_prime_hat, &maps.s4)?;

        let pv = map_var(g, y, &maps.s16)?;
        let p_code = self.proto.analyze(g, p, pv)?;
        let loc2 = self.proto.loc(g, p)?;
        let (c2, s2) = quantize_var(g, p_code, Center::Channel(loc2, 1), q)?;
        let bits_p = self.proto.bits(g, p, c2)?;
        let p_hat = self.proto.synthesize(g, p, c2)?;

        let z = self.hyper_encode(g, p, y)?;
        let zloc = g.param(p, "hyper.z.loc")?;
        let (z_hat, sz) = quantize_var(g, z, Center::Channel(zloc, 0), q)?;
        let bits_z = self.z_bits(g, p, z_hat)?;

        let (mu, sigma) = self.hyper_decode(g, p, z_hat, p_hat, &maps.s16)?;
        let (y_hat, sy) = quantize_var(g, y, Center::Elementwise(mu), q)?;
        let bits_y = g.gaussian_bits(y_hat, mu, sigma)?;

        let x_hat = self.synthesize(g, p, y_hat, p_prime_hat, &maps.s4)?;
        let symbols = match (s1, s2, sz, sy) {
            (Some(p_prime), Some(p), Some(z), Some(y)) => Some(Symbols { p_prime, p, z, y }),
            _ => None,
        };
        Ok(Forward {
            y_prime,
            y,
            z,
            z_hat,
            y_hat,
            mu,
            sigma,
            p_prime,
            p_prime_code,
            p_prime_hat,
            p: pv,
            p_code,
            p_hat,
            x_hat,
            bits_y,
            bits_z,
            bits_p_prime,
            bits_p,
            symbols,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_round_trips() {
        for cfg in [NetConfig::full(), NetConfig::toy(), NetConfig::tiny()] {
            assert_eq!(NetConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        }
        let t = NetConfig::from_text("segcodec-config 1\npreset=toy\nN=24\nproto_prime=24,16,16,8\n").unwrap();
        assert_eq!((t.n, t.m), (24, 48));
        assert!(NetConfig::from_text("segcodec-config 2\n").is_err());
        assert!(NetConfig::from_text("segcodec-config 1\nN=100\n").is_err());
        assert!(NetConfig::from_text("segcodec-config 1\nfoo=1\n").is_err());
    }

    #[test]
    fn config_is_recovered_from_weights() {
        let cfg = NetConfig { normalize_kernels: false, ..NetConfig::tiny() };
        let c = Codec::new(cfg.clone()).unwrap();
        let s = c.init(1).unwrap();
        let back = ParamStore::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(NetConfig::from_params(&back).unwrap(), cfg);
        assert!(!back.get(META_NORMALIZE).unwrap().trainable);
    }
}
