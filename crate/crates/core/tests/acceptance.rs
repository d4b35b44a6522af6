//! Acceptance run. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.
//!
//! Criteria use the default training config, which weighs MSE on the 8-bit
//! scale. The same two trainings with MSE on the `[0, 1]` scale are also run
//! and reported on an INFO line that does not count toward the result.
//!
//! Each 5000-step toy training takes roughly an hour on one core. Weights and
//! traces are cached under the cargo target tmp dir, keyed by the training
//! config; set `SEGCODEC_RETRAIN=1` to ignore the cache.

mod common;

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segcodec::cli::container::{self_test, Container, RegionSource};
use segcodec::entropy::cdf::CdfTable;
use segcodec::entropy::{range_decode, range_encode};
use segcodec::net::{Codec, NetConfig, Quantizer, StageMaps};
use segcodec::region::grid_partition;
use segcodec::tensor::{Graph, ParamStore, Tensor};
use segcodec::train::{eval_rd, mean_of, synth_dataset, train_loop, EvalPoint, Sample, TrainConfig, TrainRegions};

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn line(name: &'static str, pass: bool, detail: String) -> Outcome {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    Outcome { name, pass, detail }
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let outs = segcodec::gradsuite::run("all").expect("gradient suite runs");
    let secs = t.elapsed().as_secs_f64();
    let worst = outs.iter().map(|o| o.max_rel_error()).fold(0.0, f64::max);
    let failed: Vec<&str> = outs.iter().filter(|o| !o.passed()).map(|o| o.module).collect();
    let pass = failed.is_empty() && worst < 1e-4 && secs < 600.0;
    line(
        "gradient suite",
        pass,
        format!("{} modules, worst rel err {worst:.2e}, {secs:.0}s (limit 600s), failed {failed:?}", outs.len()),
    )
}

fn oracle_equivalences() -> Outcome {
    let dps = common::dpsconv_vs_naive(20, 2024);
    let pool = common::pooling_vs_loops(20, 8);
    let expand = common::expansion_vs_lookup(20, 9);
    let depthwise = common::constant_kernels_vs_depthwise(5);
    let bd = common::bd_rate_vs_dense();
    let pass = dps < 1e-6 && pool < 1e-9 && expand < 1e-9 && depthwise < 1e-9 && bd < 0.1;
    line(
        "oracle equivalences",
        pass,
        format!("dpsconv {dps:.1e}, pool {pool:.1e}, expand {expand:.1e}, depthwise {depthwise:.1e}, bd-rate gap {bd:.1e} pp"),
    )
}

fn random_table(rng: &mut ChaCha8Rng) -> CdfTable {
    match rng.gen_range(0..3) {
        0 => CdfTable::gaussian(10f64.powf(rng.gen_range(-3.0..2.5))).unwrap(),
        1 => CdfTable::logistic(10f64.powf(rng.gen_range(-3.0..2.0))).unwrap(),
        _ => {
            let n = rng.gen_range(1..300);
            let pmf: Vec<f64> = (0..n).map(|_| rng.gen::<f64>().powi(4) + 1e-9).collect();
            let tail = rng.gen_bool(0.5).then(|| rng.gen::<f64>() * 0.01);
            CdfTable::from_pmf(&pmf, rng.gen_range(-100..100), tail).unwrap()
        }
    }
}

fn random_symbol(rng: &mut ChaCha8Rng, t: &CdfTable) -> i32 {
    if t.has_escape() && rng.gen_bool(0.05) {
        return if rng.gen_bool(0.5) { t.max_symbol() + rng.gen_range(1..1_000_000) } else { rng.gen() };
    }
    rng.gen_range(t.min_symbol()..=t.max_symbol())
}

fn entropy_coding(model: &Trained, held_out: &[Sample]) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut round_trip_failures = 0;
    for _ in 0..10_000 {
        let pool: Vec<CdfTable> = (0..rng.gen_range(1..5)).map(|_| random_table(&mut rng)).collect();
        let len = rng.gen_range(0..64);
        let tables: Vec<&CdfTable> = (0..len).map(|_| &pool[rng.gen_range(0..pool.len())]).collect();
        let symbols: Vec<i32> = tables.iter().map(|t| random_symbol(&mut rng, t)).collect();
        let ok = range_encode(&symbols, &tables).and_then(|b| range_decode(&b, &tables, len)).is_ok_and(|d| d == symbols);
        round_trip_failures += usize::from(!ok);
    }

    let p = [0.9, 0.05, 0.05];
    let table = CdfTable::from_pmf(&p, 0, None).unwrap();
    let n = 1_000_000;
    let symbols: Vec<i32> = (0..n)
        .map(|_| match rng.gen::<f64>() {
            u if u < 0.9 => 0,
            u if u < 0.95 => 1,
            _ => 2,
        })
        .collect();
    let tables = vec![&table; n];
    let bytes = range_encode(&symbols, &tables).unwrap();
    let entropy: f64 = -p.iter().map(|q| q * q.log2()).sum::<f64>();
    let bound = entropy * n as f64 / 8.0;
    let skew_ok = bytes.len() as f64 <= bound * 1.01 + 8.0 && range_decode(&bytes, &tables, n).unwrap() == symbols;

    // self_test decodes and compares bit for bit against the encoder
    let mut image_failures = 0;
    for s in held_out.iter().take(5) {
        for src in [RegionSource::External(s.regions.clone()), RegionSource::Grid(4)] {
            image_failures += usize::from(self_test(&model.codec, &model.params, &s.image, &src).is_err());
        }
    }
    line(
        "entropy coding",
        round_trip_failures == 0 && skew_ok && image_failures == 0,
        format!(
            "round-trip failures {round_trip_failures}/10000, skewed source {} bytes vs bound {:.0} (+1% +8 = {:.0}), image decode mismatches {image_failures}/10",
            bytes.len(),
            bound,
            bound * 1.01 + 8.0
        ),
    )
}

fn rate_accounting(model: &Trained, held_out: &[Sample]) -> Outcome {
    let mut worst_excess = f64::NEG_INFINITY;
    let (mut actual_sum, mut est_sum) = (0.0, 0.0);
    let mut bpp_includes_side_info = true;
    for s in held_out {
        let enc = segcodec::cli::container::encode_image(&model.codec, &model.params, &s.image, &RegionSource::External(s.regions.clone()))
            .unwrap();
        let c = Container::from_bytes(&enc.bytes).unwrap();
        let actual_bits = 8.0 * c.streams.total_len() as f64;
        let est: f64 = enc.estimated_bits.iter().sum();
        // slack: 2% of the estimate plus 64 bytes
        worst_excess = worst_excess.max((actual_bits - est).abs() - (0.02 * est + 512.0));
        actual_sum += actual_bits;
        est_sum += est;
        let (h, w) = (s.image.dim(1), s.image.dim(2));
        let bpp = segcodec::metrics::bpp(enc.bytes.len(), h, w);
        bpp_includes_side_info &= !c.streams.p.is_empty() && !c.streams.p_prime.is_empty() && bpp * (h * w) as f64 >= actual_bits;
    }
    line(
        "rate accounting",
        worst_excess <= 0.0 && bpp_includes_side_info,
        format!(
            "{} images, mean coded {:.0} bits vs estimate {:.0}, worst margin {:.0} bits inside the bound, bpp counts p and p' streams: {bpp_includes_side_info}",
            held_out.len(),
            actual_sum / held_out.len() as f64,
            est_sum / held_out.len() as f64,
            -worst_excess
        ),
    )
}

struct Trained {
    codec: Codec,
    params: ParamStore,
    /// `(step, total loss)` per step.
    trace: Vec<(usize, f64)>,
    seconds: f64,
    cached: bool,
}

fn fnv(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn train_cached(cfg: &TrainConfig) -> Trained {
    let text = cfg.to_text();
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    let key = format!("{:016x}", fnv(&format!("{}\n{text}", env!("CARGO_PKG_VERSION"))));
    let (weights, trace_path, time_path) = (dir.join(format!("{key}.spw")), dir.join(format!("{key}.trace")), dir.join(format!("{key}.secs")));
    let retrain = std::env::var_os("SEGCODEC_RETRAIN").is_some();
    if !retrain && weights.exists() && trace_path.exists() {
        let params = ParamStore::read_from(std::fs::File::open(&weights).unwrap()).unwrap();
        let trace = std::fs::read_to_string(&trace_path)
            .unwrap()
            .lines()
            .map(|l| {
                let (s, v) = l.split_once(',').unwrap();
                (s.parse().unwrap(), v.parse().unwrap())
            })
            .collect();
        let seconds = std::fs::read_to_string(&time_path).ok().and_then(|s| s.trim().parse().ok()).unwrap_or(f64::NAN);
        return Trained { codec: Codec::for_params(&params).unwrap(), params, trace, seconds, cached: true };
    }
    eprintln!("training {} steps ({:?}), cache {}", cfg.steps, cfg.regions, weights.display());
    let t = Instant::now();
    let codec = Codec::new(cfg.net.clone()).unwrap();
    let init = codec.init(cfg.seed).unwrap();
    let data = cfg.dataset().unwrap();
    let out = train_loop(cfg, &data, init, |r| {
        if r.step % 500 == 0 {
            eprintln!("  step {:>5} loss {:.5} psnr {:.2}", r.step, r.loss.total, r.psnr);
        }
    })
    .unwrap();
    let seconds = t.elapsed().as_secs_f64();
    let trace: Vec<(usize, f64)> = out.trace.iter().map(|r| (r.step, r.loss.total)).collect();
    out.params.write_to(std::fs::File::create(&weights).unwrap()).unwrap();
    let csv: String = trace.iter().map(|(s, v)| format!("{s},{v}\n")).collect();
    std::fs::write(&trace_path, csv).unwrap();
    std::fs::write(&time_path, format!("{seconds}\n")).unwrap();
    Trained { codec, params: out.params, trace, seconds, cached: false }
}

/// Trailing mean of the loss over `window` steps ending at `step`.
fn smoothed_at(trace: &[(usize, f64)], step: usize, window: usize) -> f64 {
    let xs: Vec<f64> = trace.iter().filter(|(s, _)| *s <= step && *s + window > step).map(|p| p.1).collect();
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn masks(s: &Sample) -> RegionSource {
    RegionSource::External(s.regions.clone())
}

fn grid4(_: &Sample) -> RegionSource {
    RegionSource::Grid(4)
}

fn rd(points: &[EvalPoint], lambda: f64) -> f64 {
    mean_of(points, |p| p.rd_loss(lambda))
}

fn toy_training(cfg: &TrainConfig, model: &Trained, held_out: &[Sample]) -> Outcome {
    let window = 100;
    let base = smoothed_at(&model.trace, 100, window);
    let last = model.trace.last().unwrap().0;
    let end = smoothed_at(&model.trace, last, window);
    let drop = 1.0 - end / base;
    let untrained = cfg.net.clone();
    let codec = Codec::new(untrained).unwrap();
    let init = codec.init(cfg.seed).unwrap();
    let before = eval_rd(&codec, &init, held_out, masks).unwrap();
    let after = eval_rd(&model.codec, &model.params, held_out, masks).unwrap();
    let (psnr0, psnr1) = (mean_of(&before, |p| p.psnr), mean_of(&after, |p| p.psnr));
    let (bpp0, bpp1) = (mean_of(&before, |p| p.bpp), mean_of(&after, |p| p.bpp));
    let time = if model.cached { format!("{:.0}s (cached)", model.seconds) } else { format!("{:.0}s", model.seconds) };
    line(
        "toy training",
        last == cfg.steps && drop >= 0.5 && psnr1 - psnr0 >= 5.0,
        format!(
            "smoothed loss {base:.4} at step 100 -> {end:.4} at step {last} ({:.1}% drop, need 50%); held-out PSNR {psnr0:.2} dB @ {bpp0:.3} bpp untrained -> {psnr1:.2} dB @ {bpp1:.3} bpp trained ({:+.2} dB, need +5); train time {time}",
            100.0 * drop,
            psnr1 - psnr0
        ),
    )
}

fn privilege_protocol(cfg: &TrainConfig, with_masks: &Trained, with_grid: &Trained, held_out: &[Sample]) -> Outcome {
    let lambda = cfg.lambda * cfg.distortion_scale;
    let m_masks = rd(&eval_rd(&with_masks.codec, &with_masks.params, held_out, masks).unwrap(), lambda);
    let m_grid = rd(&eval_rd(&with_masks.codec, &with_masks.params, held_out, grid4).unwrap(), lambda);
    let g_grid = rd(&eval_rd(&with_grid.codec, &with_grid.params, held_out, grid4).unwrap(), lambda);
    let gap = (m_grid - m_masks) / m_masks;
    line(
        "privilege protocol",
        gap.abs() <= 0.05 && m_grid < g_grid,
        format!(
            "mask-trained RD loss {m_masks:.5} with masks vs {m_grid:.5} with 4x4 grid ({:+.2}%, need |gap| <= 5%); on grid eval mask-trained {m_grid:.5} vs grid-trained {g_grid:.5} (need mask-trained lower)",
            100.0 * gap
        ),
    )
}

/// Same protocol for models trained with MSE on the `[0, 1]` scale.
fn unit_scale_info(cfg: &TrainConfig, held_out: &[Sample]) {
    let with_masks = train_cached(cfg);
    let with_grid = train_cached(&TrainConfig { regions: TrainRegions::Grid(4), ..cfg.clone() });
    let lambda = cfg.lambda * cfg.distortion_scale;
    let mm = eval_rd(&with_masks.codec, &with_masks.params, held_out, masks).unwrap();
    let mg = eval_rd(&with_masks.codec, &with_masks.params, held_out, grid4).unwrap();
    let gg = eval_rd(&with_grid.codec, &with_grid.params, held_out, grid4).unwrap();
    println!(
        "[INFO] unit-scale MSE arms (not a criterion): mask-trained {:.2} dB @ {:.3} bpp with masks, RD loss {:.5} masks vs {:.5} grid ({:+.2}%); grid-trained RD loss {:.5} on grid",
        mean_of(&mm, |p| p.psnr),
        mean_of(&mm, |p| p.bpp),
        rd(&mm, lambda),
        rd(&mg, lambda),
        100.0 * (rd(&mg, lambda) / rd(&mm, lambda) - 1.0),
        rd(&gg, lambda)
    );
}

fn shape_schedule() -> Outcome {
    let codec = Codec::new(NetConfig::full()).unwrap();
    let p = codec.init(0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_fn(&[3, 256, 256], |_| rng.gen_range(0.0f32..1.0));
    let maps = StageMaps::new(&grid_partition(256, 256, 4).unwrap()).unwrap();
    let mut g = Graph::inference();
    let xv = g.constant(x);
    let f = codec.forward(&mut g, &p, xv, &maps, &mut Quantizer::Round).unwrap();
    let mut bad = Vec::new();
    let mut expect = |what: &str, got: &[usize], want: &[usize]| {
        if got != want {
            bad.push(format!("{what} {got:?} != {want:?}"));
        }
    };
    expect("y", g.shape(f.y), &[320, 16, 16]);
    expect("y'", g.shape(f.y_prime), &[192, 64, 64]);
    expect("z", g.shape(f.z), &[192, 4, 4]);
    expect("mu", g.shape(f.mu), &[320, 16, 16]);
    expect("sigma", g.shape(f.sigma), &[320, 16, 16]);
    expect("x_hat", g.shape(f.x_hat), &[3, 256, 256]);
    // [out, in, k, k] for conv, [in, out, k, k] for transposed conv
    let w = |n: &str| p.get(n).unwrap().value.shape().to_vec();
    for (i, (cin, cout)) in [(320, 320), (320, 288), (288, 256), (256, 224), (224, 192)].into_iter().enumerate() {
        expect(&format!("hyper.enc.{i}"), &w(&format!("hyper.enc.{i}.w")), &[cout, cin, 3, 3]);
    }
    for side in ["mean", "scale"] {
        let layers = [(false, 192, 192), (true, 192, 224), (false, 224, 256), (true, 256, 288), (false, 288, 320)];
        for (i, (transposed, cin, cout)) in layers.into_iter().enumerate() {
            let want = if transposed { [cin, cout, 3, 3] } else { [cout, cin, 3, 3] };
            expect(&format!("hyper.{side}.{i}"), &w(&format!("hyper.{side}.{i}.w")), &want);
        }
    }
    let pass = bad.is_empty();
    line(
        "shape schedule",
        pass,
        if pass { "y 320x16x16, y' 192x64x64, z 192x4x4, hyper encoder and both decoders match the layer table".into() } else { bad.join("; ") },
    )
}

fn main() {
    // libtest flags such as --list or a name filter are accepted and ignored,
    // except that listing prints nothing
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let t = Instant::now();
    let cfg = TrainConfig::default();
    let grid_cfg = TrainConfig { regions: TrainRegions::Grid(4), ..cfg.clone() };
    let held_out = synth_dataset(20, cfg.dataset_size, cfg.dataset_regions, cfg.texture_amp, cfg.dataset_seed + 1000).unwrap();

    let mut results = vec![gradient_suite(), oracle_equivalences()];
    let with_masks = train_cached(&cfg);
    results.push(entropy_coding(&with_masks, &held_out));
    results.push(rate_accounting(&with_masks, &held_out));
    results.push(toy_training(&cfg, &with_masks, &held_out));
    let with_grid = train_cached(&grid_cfg);
    results.push(privilege_protocol(&cfg, &with_masks, &with_grid, &held_out));
    results.push(shape_schedule());
    unit_scale_info(&TrainConfig { distortion_scale: 1.0, ..cfg.clone() }, &held_out);

    let failed: Vec<&Outcome> = results.iter().filter(|o| !o.pass).collect();
    println!("acceptance: {}/{} passed in {:.0}s", results.len() - failed.len(), results.len(), t.elapsed().as_secs_f64());
    if !failed.is_empty() {
        for o in &failed {
            eprintln!("failed: {} ({})", o.name, o.detail);
        }
        std::process::exit(1);
    }
}
