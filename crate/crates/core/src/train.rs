//! Rate–distortion training on synthetic segmented images.
//!
//! Region maps are privilege information: training may use the exact
//! labels of [`synth_dataset`] while evaluation substitutes a grid. The two
//! are independent knobs ([`TrainConfig::regions`] and the `source` passed
//! to [`eval_rd`]).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cli::container::{encode_image, RegionSource};
use crate::error::{dim_err, Error, Result};
use crate::metrics::{mse, psnr_from_mse};
use crate::net::{Codec, NetConfig, Quantizer, StageMaps};
use crate::region::{grid_partition, RegionMap};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

/// MSE trade-offs of the published rate ladder.
pub const LAMBDAS: [f64; 6] = [0.0018, 0.0035, 0.0067, 0.0130, 0.0250, 0.0483];

/// One evaluation of the objective. Rates are bits per pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdLoss {
    pub total: f64,
    pub rate_y: f64,
    pub rate_z: f64,
    pub rate_p: f64,
    pub rate_p_prime: f64,
    pub distortion: f64,
    pub lambda: f64,
}

impl RdLoss {
    pub fn rate(&self) -> f64 {
        self.rate_y + self.rate_z + self.rate_p + self.rate_p_prime
    }
}

/// Bit totals of the four streams.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RateBits {
    pub y: f64,
    pub z: f64,
    pub p: f64,
    pub p_prime: f64,
}

/// `R + λ·D` with `D` the MSE of `[C, H, W]` images in `[0, 1]`.
pub fn rd_loss<T: Real>(x: &Tensor<T>, x_hat: &Tensor<T>, bits: RateBits, lambda: f64) -> Result<RdLoss> {
    if x.shape() != x_hat.shape() || x.rank() != 3 {
        return Err(dim_err!("rd_loss of {:?} and {:?}", x.shape(), x_hat.shape()));
    }
    let pixels = (x.dim(1) * x.dim(2)) as f64;
    let distortion = mse(x, x_hat)?;
    Ok(assemble(bits, pixels, distortion, lambda))
}

fn assemble(bits: RateBits, pixels: f64, distortion: f64, lambda: f64) -> RdLoss {
    let (rate_y, rate_z, rate_p, rate_p_prime) = (bits.y / pixels, bits.z / pixels, bits.p / pixels, bits.p_prime / pixels);
    RdLoss {
        total: rate_y + rate_z + rate_p + rate_p_prime + lambda * distortion,
        rate_y,
        rate_z,
        rate_p,
        rate_p_prime,
        distortion,
        lambda,
    }
}

/// Adam with bias correction. Moments are keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Update every trainable parameter that has a gradient.
    pub fn step<T: Real>(&mut self, p: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            match p.get(name) {
                Some(par) if par.trainable => {}
                Some(_) => continue,
                None => return Err(Error::Config(format!("gradient for unknown parameter {name}"))),
            }
            let w = p.value_mut(name).unwrap();
            if w.shape() != g.shape() {
                return Err(dim_err!("{name}: gradient {:?} for value {:?}", g.shape(), w.shape()));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            for (((wi, gi), mi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.f64();
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let upd = lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *wi = T::lit(wi.f64() - upd);
            }
        }
        Ok(())
    }
}

/// A synthetic image with its exact region labels.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub regions: RegionMap,
    /// Voronoi sites `(row, col)` for synthetic images, indexed by label.
    pub seeds: Vec<(usize, usize)>,
}

/// Voronoi seed positions, distinct pixels in `(row, col)`.
fn voronoi_seeds(rng: &mut ChaCha8Rng, size: usize, k: usize) -> Vec<(usize, usize)> {
    let mut seeds: Vec<(usize, usize)> = Vec::with_capacity(k);
    while seeds.len() < k {
        let s = (rng.gen_range(0..size), rng.gen_range(0..size));
        if !seeds.contains(&s) {
            seeds.push(s);
        }
    }
    seeds
}

/// Nearest seed by squared distance, ties to the lower index.
pub fn voronoi_labels(size: usize, seeds: &[(usize, usize)]) -> Vec<u32> {
    let mut labels = vec![0u32; size * size];
    for r in 0..size {
        for c in 0..size {
            let mut best = (usize::MAX, 0);
            for (i, &(sr, sc)) in seeds.iter().enumerate() {
                let d = r.abs_diff(sr).pow(2) + c.abs_diff(sc).pow(2);
                if d < best.0 {
                    best = (d, i);
                }
            }
            labels[r * size + c] = best.1 as u32;
        }
    }
    labels
}

/// `count` square images of side `size`, each a Voronoi partition into
/// `regions` cells with a flat color plus a sinusoid of amplitude
/// `texture_amp` per cell. Labels are seed indices, so every label is used.
pub fn synth_dataset(count: usize, size: usize, regions: usize, texture_amp: f64, seed: u64) -> Result<Vec<Sample>> {
    if size == 0 || regions == 0 || regions > size * size || regions > crate::region::MAX_REGIONS {
        return Err(Error::Config(format!("cannot place {regions} regions in a {size}x{size} image")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let seeds = voronoi_seeds(&mut rng, size, regions);
            let labels = voronoi_labels(size, &seeds);
            let amp = texture_amp.clamp(0.0, 0.45);
            // per region: base rgb, then frequency, direction and phase per channel
            let style: Vec<[f64; 12]> = (0..regions)
                .map(|_| {
                    let mut s = [0.0; 12];
                    for ch in 0..3 {
                        s[ch] = rng.gen_range(amp..1.0 - amp);
                        s[3 + ch] = rng.gen_range(0.1..0.6);
                        s[6 + ch] = rng.gen_range(0.0..std::f64::consts::PI);
                        s[9 + ch] = rng.gen_range(0.0..std::f64::consts::TAU);
                    }
                    s
                })
                .collect();
            let image = Tensor::from_fn(&[3, size, size], |i| {
                let (ch, p) = (i / (size * size), i % (size * size));
                let (r, c) = ((p / size) as f64, (p % size) as f64);
                let s = &style[labels[p] as usize];
                let t = s[3 + ch] * (c * s[6 + ch].cos() + r * s[6 + ch].sin()) + s[9 + ch];
                (s[ch] + amp * t.sin()) as f32
            });
            Ok(Sample { image, regions: RegionMap::new(size, size, labels)?, seeds })
        })
        .collect()
}

/// Region maps used during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainRegions {
    OracleMasks,
    Grid(usize),
}

impl TrainRegions {
    fn map(&self, s: &Sample) -> Result<RegionMap> {
        match *self {
            TrainRegions::OracleMasks => Ok(s.regions.clone()),
            TrainRegions::Grid(n) => grid_partition(s.regions.height(), s.regions.width(), n),
        }
    }

    pub fn source(&self, s: &Sample) -> RegionSource {
        match *self {
            TrainRegions::OracleMasks => RegionSource::External(s.regions.clone()),
            TrainRegions::Grid(n) => RegionSource::Grid(n),
        }
    }
}

/// `255²`: converts `[0, 1]` MSE to the 8-bit scale.
pub const EIGHT_BIT_MSE: f64 = 65025.0;

/// Training run description. Text form is `key = value` lines; `#` starts a
/// comment.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub lambda: f64,
    /// Multiplies the `[0, 1]` MSE in the loss. The default,
    /// [`EIGHT_BIT_MSE`], weighs MSE as if measured on 0..255 values.
    pub distortion_scale: f64,
    pub batch: usize,
    pub crop: usize,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub regions: TrainRegions,
    pub dataset_count: usize,
    pub dataset_size: usize,
    pub dataset_regions: usize,
    pub texture_amp: f64,
    pub dataset_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::toy(),
            lambda: 0.0130,
            distortion_scale: EIGHT_BIT_MSE,
            batch: 8,
            crop: 64,
            lr: 1e-4,
            steps: 5000,
            seed: 0,
            regions: TrainRegions::OracleMasks,
            dataset_count: 500,
            dataset_size: 64,
            dataset_regions: 6,
            texture_amp: 0.05,
            dataset_seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be positive");
        }
        if !(self.distortion_scale > 0.0 && self.distortion_scale.is_finite()) {
            return bad("distortion_scale must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch == 0 || self.dataset_count == 0 {
            return bad("batch and dataset_count must be nonzero");
        }
        if self.crop == 0 || self.crop % crate::net::PAD_MULTIPLE != 0 || self.crop > self.dataset_size {
            return bad("crop must be a multiple of 64 no larger than dataset_size");
        }
        if let TrainRegions::Grid(n) = self.regions {
            if n == 0 || n * n > crate::region::MAX_REGIONS {
                return bad("grid side out of range");
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let regions = match self.regions {
            TrainRegions::OracleMasks => "masks".to_string(),
            TrainRegions::Grid(n) => format!("grid:{n}"),
        };
        for (k, v) in [
            ("lambda", self.lambda.to_string()),
            ("distortion_scale", self.distortion_scale.to_string()),
            ("batch", self.batch.to_string()),
            ("crop", self.crop.to_string()),
            ("lr", self.lr.to_string()),
            ("steps", self.steps.to_string()),
            ("seed", self.seed.to_string()),
            ("regions", regions),
            ("dataset_count", self.dataset_count.to_string()),
            ("dataset_size", self.dataset_size.to_string()),
            ("dataset_regions", self.dataset_regions.to_string()),
            ("texture_amp", self.texture_amp.to_string()),
            ("dataset_seed", self.dataset_seed.to_string()),
        ] {
            writeln!(s, "{k} = {v}").unwrap();
        }
        for line in self.net.to_text().lines().skip(1) {
            let (k, v) = line.split_once('=').unwrap();
            writeln!(s, "net.{} = {}", k.trim(), v.trim()).unwrap();
        }
        s
    }

    /// Unknown keys are errors. `net.*` keys go to [`NetConfig::from_text`].
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut net = String::from("segcodec-config 1\n");
        let mut net_given = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Parse(format!("line {}: expected key = value", i + 1)))?;
            let num = |v: &str| v.parse::<f64>().map_err(|_| Error::Parse(format!("line {}: bad number '{v}'", i + 1)));
            let int = |v: &str| v.parse::<u64>().map_err(|_| Error::Parse(format!("line {}: bad integer '{v}'", i + 1)));
            match k {
                "lambda" => c.lambda = num(v)?,
                "distortion_scale" => c.distortion_scale = num(v)?,
                "batch" => c.batch = int(v)? as usize,
                "crop" => c.crop = int(v)? as usize,
                "lr" => c.lr = num(v)?,
                "steps" => c.steps = int(v)? as usize,
                "seed" => c.seed = int(v)?,
                "regions" => {
                    c.regions = match v {
                        "masks" => TrainRegions::OracleMasks,
                        g => match g.strip_prefix("grid:") {
                            Some(n) => TrainRegions::Grid(int(n)? as usize),
                            None => return Err(Error::Parse(format!("line {}: regions must be masks or grid:N", i + 1))),
                        },
                    }
                }
                "dataset_count" => c.dataset_count = int(v)? as usize,
                "dataset_size" => c.dataset_size = int(v)? as usize,
                "dataset_regions" => c.dataset_regions = int(v)? as usize,
                "texture_amp" => c.texture_amp = num(v)?,
                "dataset_seed" => c.dataset_seed = int(v)?,
                _ => match k.strip_prefix("net.") {
                    Some(nk) => {
                        writeln!(net, "{nk}={v}").unwrap();
                        net_given = true;
                    }
                    None => return Err(Error::Parse(format!("line {}: unknown key '{k}'", i + 1))),
                },
            }
        }
        if net_given {
            c.net = NetConfig::from_text(&net)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn dataset(&self) -> Result<Vec<Sample>> {
        synth_dataset(self.dataset_count, self.dataset_size, self.dataset_regions, self.texture_amp, self.dataset_seed)
    }
}

/// One row of the loss trace, averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss: RdLoss,
    pub psnr: f64,
}

pub const TRACE_HEADER: &str = "step,total,rate_y,rate_z,rate_p,rate_p_prime,mse,psnr";

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = format!("{TRACE_HEADER}\n");
    for r in rows {
        let l = &r.loss;
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.step, l.total, l.rate_y, l.rate_z, l.rate_p, l.rate_p_prime, l.distortion, r.psnr
        )
        .unwrap();
    }
    s
}

/// Trailing mean of `total` over `window` rows ending at `index`.
pub fn smoothed(rows: &[TraceRow], index: usize, window: usize) -> f64 {
    let lo = (index + 1).saturating_sub(window.max(1));
    let xs = &rows[lo..=index];
    xs.iter().map(|r| r.loss.total).sum::<f64>() / xs.len() as f64
}

fn crop_sample(s: &Sample, crop: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let (h, w) = (s.regions.height(), s.regions.width());
    if crop == h && crop == w {
        return Ok(s.clone());
    }
    let (r0, c0) = (rng.gen_range(0..=h - crop), rng.gen_range(0..=w - crop));
    let image = Tensor::from_fn(&[3, crop, crop], |i| {
        let (ch, p) = (i / (crop * crop), i % (crop * crop));
        s.image.at3(ch, r0 + p / crop, c0 + p % crop)
    });
    let raw: Vec<u32> = (0..crop * crop).map(|p| s.regions.label(r0 + p / crop, c0 + p % crop)).collect();
    Ok(Sample { image, regions: RegionMap::from_raw(crop, crop, &raw)?, seeds: Vec::new() })
}

/// Graph nodes of the objective for one image.
pub struct LossVars {
    pub total: Var,
    pub mse: Var,
}

/// Build `(Σ bits)/(H·W) + λ·scale·MSE` on the graph.
pub fn loss_graph<T: Real>(g: &mut Graph<T>, x: Var, f: &crate::net::Forward, lambda: f64, distortion_scale: f64) -> Result<LossVars> {
    let s = g.shape(x).to_vec();
    let pixels = (s[1] * s[2]) as f64;
    let a = g.add(f.bits_y, f.bits_z)?;
    let b = g.add(f.bits_p, f.bits_p_prime)?;
    let bits = g.add(a, b)?;
    let rate = g.scale(bits, T::lit(1.0 / pixels));
    let d = g.sub(f.x_hat, x)?;
    let d2 = g.square(d);
    let mse = g.mean(d2);
    let weighted = g.scale(mse, T::lit(lambda * distortion_scale));
    Ok(LossVars { total: g.add(rate, weighted)?, mse })
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("at step {step}: {m}")),
        e => e,
    }
}

/// Trained weights and the per-step trace.
pub struct TrainOutcome {
    pub params: ParamStore,
    pub trace: Vec<TraceRow>,
}

/// Train from `params`. `progress` sees every trace row as it is produced.
pub fn train_loop(
    cfg: &TrainConfig,
    data: &[Sample],
    mut params: ParamStore,
    mut progress: impl FnMut(&TraceRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let codec = Codec::for_params(&params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::default();
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let mut sum: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        let mut bits = RateBits::default();
        let mut dist = 0.0;
        for _ in 0..cfg.batch {
            let s = crop_sample(&data[rng.gen_range(0..data.len())], cfg.crop, &mut rng)?;
            let maps = StageMaps::new(&cfg.regions.map(&s)?)?;
            let mut g = Graph::new();
            let x = g.constant(s.image.clone());
            let f = codec
                .forward(&mut g, &params, x, &maps, &mut Quantizer::Noise(&mut rng))
                .map_err(|e| at_step(e, step))?;
            let l = loss_graph(&mut g, x, &f, cfg.lambda, cfg.distortion_scale)?;
            bits.y += g.scalar(f.bits_y) as f64;
            bits.z += g.scalar(f.bits_z) as f64;
            bits.p += g.scalar(f.bits_p) as f64;
            bits.p_prime += g.scalar(f.bits_p_prime) as f64;
            dist += g.scalar(l.mse) as f64;
            let total = g.scalar(l.total);
            if !total.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss is {total} at step {step}: bits y={} z={} p={} p'={} mse={}",
                    g.scalar(f.bits_y),
                    g.scalar(f.bits_z),
                    g.scalar(f.bits_p),
                    g.scalar(f.bits_p_prime),
                    g.scalar(l.mse)
                )));
            }
            let grads = g.backward(l.total).map_err(|e| at_step(e, step))?;
            for (name, gr) in grads.params() {
                if let Some(gr) = gr {
                    match sum.get_mut(name) {
                        Some(acc) => acc.data_mut().iter_mut().zip(gr.data()).for_each(|(a, b)| *a += b),
                        None => {
                            sum.insert(name.to_string(), gr.clone());
                        }
                    }
                }
            }
        }
        let k = cfg.batch as f64;
        for t in sum.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v /= k as f32);
        }
        if let Some((name, _)) = sum.iter().find(|(_, t)| t.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric(format!("non-finite gradient for {name} at step {step}")));
        }
        adam.step(&mut params, &sum, cfg.lr)?;
        let pixels = (cfg.crop * cfg.crop) as f64 * k;
        let mean_bits = RateBits { y: bits.y, z: bits.z, p: bits.p, p_prime: bits.p_prime };
        let loss = assemble(mean_bits, pixels, dist / k, cfg.lambda * cfg.distortion_scale);
        let row = TraceRow { step, loss, psnr: psnr_from_mse(dist / k, 1.0) };
        progress(&row);
        trace.push(row);
    }
    Ok(TrainOutcome { params, trace })
}

/// Measured result of coding one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalPoint {
    /// From the container size, header included.
    pub bpp: f64,
    /// Of the 8-bit reconstruction against the 8-bit original.
    pub psnr: f64,
    /// Same pair as `psnr`, on the `[0, 1]` scale.
    pub mse: f64,
    /// Model rate estimate in bits per pixel, all four streams.
    pub estimated_bpp: f64,
}

impl EvalPoint {
    /// Measured `bpp + λ·MSE`.
    pub fn rd_loss(&self, lambda: f64) -> f64 {
        self.bpp + lambda * self.mse
    }
}

fn to_8bit(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

/// Encode every sample with real containers and measure rate and PSNR.
pub fn eval_rd(codec: &Codec, p: &ParamStore, data: &[Sample], source: impl Fn(&Sample) -> RegionSource) -> Result<Vec<EvalPoint>> {
    data.iter()
        .map(|s| {
            let (h, w) = (s.image.dim(1), s.image.dim(2));
            let enc = encode_image(codec, p, &s.image, &source(s))?;
            let m = mse(&to_8bit(&s.image), &to_8bit(&enc.reconstruction))?;
            let est: f64 = enc.estimated_bits.iter().sum();
            Ok(EvalPoint {
                bpp: crate::metrics::bpp(enc.bytes.len(), h, w),
                psnr: psnr_from_mse(m, 1.0),
                mse: m,
                estimated_bpp: est / (h * w) as f64,
            })
        })
        .collect()
}

pub fn mean_of(points: &[EvalPoint], f: impl Fn(&EvalPoint) -> f64) -> f64 {
    points.iter().map(f).sum::<f64>() / points.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rd_loss_arithmetic() {
        let x = Tensor::<f64>::full(&[3, 4, 4], 0.5);
        let l = rd_loss(&x, &x, RateBits::default(), 0.013).unwrap();
        assert_eq!(l.total, 0.0);
        let bits = RateBits { y: 5.0, z: 1.0, p: 1.0, p_prime: 1.0 };
        let l = assemble(bits, 16.0, 0.01, 0.0130);
        assert!((l.total - 0.50013).abs() < 1e-12);
        assert!((l.total - (l.rate() + l.lambda * l.distortion)).abs() < 1e-12);
        assert!(rd_loss(&x, &Tensor::zeros(&[3, 4, 5]), bits, 0.01).is_err());
    }

    #[test]
    fn config_text_round_trips() {
        let c = TrainConfig { regions: TrainRegions::Grid(4), steps: 20, net: NetConfig::tiny(), ..Default::default() };
        assert_eq!(TrainConfig::from_text(&c.to_text()).unwrap(), c);
        assert!(TrainConfig::from_text("speed = 3").is_err());
        assert!(TrainConfig::from_text("crop = 48").is_err());
        let d = TrainConfig::from_text("# defaults\nlambda = 0.0483\n").unwrap();
        assert_eq!(d.lambda, 0.0483);
        assert_eq!(d.net, NetConfig::toy());
    }

    #[test]
    fn single_region_images_are_flat_plus_texture() {
        let d = synth_dataset(2, 64, 1, 0.0, 3).unwrap();
        for s in &d {
            assert_eq!(s.regions.count(), 1);
            for ch in 0..3 {
                let v = s.image.at3(ch, 0, 0);
                assert!((0..64 * 64).all(|p| s.image.at3(ch, p / 64, p % 64) == v));
            }
        }
    }
}
