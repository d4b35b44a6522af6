//! Finite-difference gradient checks for every differentiable block.
//!
//! Each check places its inputs in the parameter store next to the
//! block's weights, so input and weight gradients are verified together.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::net::{Codec, NetConfig, Quantizer, StageMaps};
use crate::nn::Gdn;
use crate::rat::{Rat, RatConfig, Sal};
use crate::region::{expand_var, grid_partition, map_var, RegionMap};
use crate::tensor::gradcheck::{grad_check_params, CheckReport, Coverage};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// A check passes when its worst relative error is below this.
pub const THRESHOLD: f64 = 1e-4;
/// Stencil step for single blocks.
pub const EPS: f64 = 1e-4;
/// Stencil step through the whole network, where pre-activations at init
/// sit within about 1e-3 of the LeakyReLU kink. These checks span gradients
/// many decades apart, so their error floor is set by the largest gradient
/// in the whole check rather than per tensor.
pub const EPS_DEEP: f64 = 1e-5;

pub const MODULES: [&str; 9] = ["dpsconv", "sal", "ctl", "dkg", "cag", "map", "gdn", "hyper", "e2e"];

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub module: &'static str,
    pub report: CheckReport,
    pub seconds: f64,
}

impl CheckOutcome {
    pub fn max_rel_error(&self) -> f64 {
        self.report.max_rel_error()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < THRESHOLD
    }

    pub fn checked(&self) -> usize {
        self.report.entries.iter().map(|e| e.2).sum()
    }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn input(store: &mut ParamStore<f64>, name: &str, t: Tensor<f64>) {
    store.insert(name, t, true).unwrap();
}

/// `Σ w ⊙ v` with a fixed random `w`, so every output element matters.
fn weighted_sum(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_t(&mut rng, g.shape(v), -1.0, 1.0);
    let w = g.constant(w);
    let m = g.mul(v, w)?;
    Ok(g.sum(m))
}

fn voronoi(h: usize, w: usize, k: usize, rng: &mut ChaCha8Rng) -> RegionMap {
    let seeds: Vec<(f64, f64)> = (0..k).map(|_| (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64))).collect();
    let raw: Vec<u32> = (0..h * w)
        .map(|p| {
            let (r, c) = ((p / w) as f64, (p % w) as f64);
            let d = |s: &(f64, f64)| (s.0 - r).powi(2) + (s.1 - c).powi(2);
            (0..k).min_by(|&a, &b| d(&seeds[a]).total_cmp(&d(&seeds[b]))).unwrap() as u32
        })
        .collect();
    RegionMap::from_raw(h, w, &raw).unwrap()
}

fn check(store: &ParamStore<f64>, coverage: Coverage, f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>) -> Result<CheckReport> {
    grad_check_params(f, store, EPS, coverage)
}

fn check_deep(store: &ParamStore<f64>, coverage: Coverage, f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>) -> Result<CheckReport> {
    Ok(grad_check_params(f, store, EPS_DEEP, coverage)?.with_global_floor())
}

fn rat_store(cfg: RatConfig, seed: u64) -> Result<(Rat, ParamStore<f64>)> {
    let rat = Rat::new("rat", cfg);
    let mut s = ParamStore::new();
    rat.init(&mut s, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok((rat, s.cast()))
}

fn run_one(module: &'static str) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ module.len() as u64);
    let all = Coverage::All;
    match module {
        "dpsconv" => {
            let mut s = ParamStore::new();
            input(&mut s, "x", rand_t(&mut rng, &[3, 6, 5], -1.0, 1.0));
            input(&mut s, "k", rand_t(&mut rng, &[3, 9, 6, 5], -1.0, 1.0));
            check(&s, all, |g, p| {
                let (x, k) = (g.param(p, "x")?, g.param(p, "k")?);
                let y = g.dpsconv(x, k)?;
                weighted_sum(g, y, 1)
            })
        }
        "sal" => {
            let sal = Sal::new("sal", 4);
            let mut s = ParamStore::new();
            sal.init(&mut s, &mut rng)?;
            let mut s: ParamStore<f64> = s.cast();
            input(&mut s, "x", rand_t(&mut rng, &[4, 5, 5], -1.0, 1.0));
            check(&s, all, |g, p| {
                let x = g.param(p, "x")?;
                let y = sal.forward(g, p, x)?;
                weighted_sum(g, y, 2)
            })
        }
        "ctl" | "dkg" | "cag" => {
            let cfg = RatConfig::new(4, 3);
            let (rat, mut s) = rat_store(cfg, 7)?;
            let rm = voronoi(6, 6, 3, &mut rng);
            input(&mut s, "x", rand_t(&mut rng, &[4, 6, 6], -1.0, 1.0));
            input(&mut s, "protos", rand_t(&mut rng, &[3, 3], -1.0, 1.0));
            // only the block under test and the shared inputs
            let keep = format!("rat.{module}.");
            let mut sub = ParamStore::new();
            for (n, par) in s.iter() {
                let trainable = par.trainable && (n.starts_with(&keep) || n == "x" || n == "protos");
                sub.insert(n, par.value.clone(), trainable)?;
            }
            check(&sub, all, |g, p| {
                let (x, pr) = (g.param(p, "x")?, g.param(p, "protos")?);
                let out = match module {
                    "ctl" => rat.ctl.forward(g, p, x)?,
                    m => {
                        let fused = rat.fuse(g, p, x, pr, &rm)?;
                        if m == "dkg" {
                            rat.dkg.forward(g, p, fused)?
                        } else {
                            rat.cag.forward(g, p, fused)?
                        }
                    }
                };
                weighted_sum(g, out, 3)
            })
        }
        "map" => {
            let rm = voronoi(7, 6, 4, &mut rng);
            let mut s = ParamStore::new();
            input(&mut s, "x", rand_t(&mut rng, &[3, 7, 6], -1.0, 1.0));
            input(&mut s, "protos", rand_t(&mut rng, &[4, 2], -1.0, 1.0));
            check(&s, all, |g, p| {
                let (x, pr) = (g.param(p, "x")?, g.param(p, "protos")?);
                let m = map_var(g, x, &rm)?;
                let e = expand_var(g, pr, &rm)?;
                let a = weighted_sum(g, m, 4)?;
                let b = weighted_sum(g, e, 5)?;
                g.add(a, b)
            })
        }
        "gdn" => {
            let mut reports = CheckReport::default();
            for inverse in [false, true] {
                let gdn = Gdn::new("gdn", 4, inverse);
                let mut s = ParamStore::new();
                gdn.init(&mut s)?;
                let mut s: ParamStore<f64> = s.cast();
                // move away from the initial identity-like point
                for v in s.value_mut("gdn.gamma").unwrap().data_mut() {
                    *v += rng.gen_range(0.0..0.2);
                }
                input(&mut s, "x", rand_t(&mut rng, &[4, 4, 4], -2.0, 2.0));
                let r = check(&s, all, |g, p| {
                    let x = g.param(p, "x")?;
                    let y = gdn.forward(g, p, x)?;
                    weighted_sum(g, y, 6)
                })?;
                let tag = if inverse { "igdn" } else { "gdn" };
                reports.extend(r, &format!("{tag}."));
            }
            Ok(reports)
        }
        "hyper" => {
            let codec = Codec::new(NetConfig::tiny())?;
            let full: ParamStore<f64> = codec.init(11)?.cast();
            let mut s = ParamStore::new();
            for (n, par) in full.iter() {
                s.insert(n, par.value.clone(), par.trainable && n.starts_with("hyper."))?;
            }
            let m = codec.cfg.m;
            // y of a 128x128 image: 8x8 latents, 2x2 hyper-latents
            input(&mut s, "y", rand_t(&mut rng, &[m, 8, 8], -3.0, 3.0));
            input(&mut s, "p_hat", rand_t(&mut rng, &[4, m], -1.0, 1.0));
            let rm16 = grid_partition(8, 8, 2)?;
            let zc = codec.cfg.z_channels();
            let zn = rand_t(&mut rng, &[zc, 2, 2], -0.5, 0.5);
            let yn = rand_t(&mut rng, &[m, 8, 8], -0.5, 0.5);
            check_deep(&s, Coverage::Sample(40, 1), |g, p| {
                let (y, ph) = (g.param(p, "y")?, g.param(p, "p_hat")?);
                let z = codec.hyper_encode(g, p, y)?;
                let zn = g.constant(zn.clone());
                let z_hat = g.add(z, zn)?;
                let bz = codec.z_bits(g, p, z_hat)?;
                let (mu, sigma) = codec.hyper_decode(g, p, z_hat, ph, &rm16)?;
                let yn = g.constant(yn.clone());
                let y_hat = g.add(y, yn)?;
                let by = g.gaussian_bits(y_hat, mu, sigma)?;
                g.add(by, bz)
            })
        }
        "e2e" => {
            let codec = Codec::new(NetConfig::tiny())?;
            let mut s: ParamStore<f64> = codec.init(12)?.cast();
            input(&mut s, "image", rand_t(&mut rng, &[3, 64, 64], 0.0, 1.0));
            let maps = StageMaps::new(&voronoi(64, 64, 5, &mut rng))?;
            check_deep(&s, Coverage::Sample(24, 2), |g, p| {
                let x = g.param(p, "image")?;
                let mut noise = ChaCha8Rng::seed_from_u64(99);
                let f = codec.forward(g, p, x, &maps, &mut Quantizer::Noise(&mut noise))?;
                Ok(crate::train::loss_graph(g, x, &f, 0.013, 1.0)?.total)
            })
        }
        other => Err(Error::Usage(format!("unknown gradcheck module '{other}'"))),
    }
}

/// Run one named check, or all of them for `"all"`.
pub fn run(module: &str) -> Result<Vec<CheckOutcome>> {
    let names: Vec<&'static str> = match module {
        "all" => MODULES.to_vec(),
        m => vec![*MODULES
            .iter()
            .find(|n| **n == m)
            .ok_or_else(|| Error::Usage(format!("unknown gradcheck module '{m}', expected one of {MODULES:?} or all")))?],
    };
    names
        .into_iter()
        .map(|m| {
            let t = Instant::now();
            let report = run_one(m)?;
            Ok(CheckOutcome { module: m, report, seconds: t.elapsed().as_secs_f64() })
        })
        .collect()
}
