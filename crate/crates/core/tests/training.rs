use std::collections::BTreeMap;

use segcodec::cli::container::RegionSource;
use segcodec::net::{Codec, NetConfig, Quantizer, StageMaps};
use segcodec::tensor::{Graph, ParamStore, Tensor};
use segcodec::train::{
    eval_rd, loss_graph, smoothed, synth_dataset, train_loop, Adam, TrainConfig, TrainRegions, LAMBDAS,
};
use segcodec::Error;

fn tiny_cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        net: NetConfig::tiny(),
        steps,
        batch: 2,
        lr: 1e-3,
        dataset_count: 8,
        dataset_regions: 4,
        ..Default::default()
    }
}

#[test]
fn lambda_ladder_matches_the_published_values() {
    assert_eq!(LAMBDAS, [0.0018, 0.0035, 0.0067, 0.0130, 0.0250, 0.0483]);
}

#[test]
fn voronoi_labels_match_a_brute_force_distance_scan() {
    let data = synth_dataset(6, 64, 6, 0.05, 21).unwrap();
    for s in &data {
        assert_eq!(s.regions.count(), 6);
        assert!(s.regions.histogram().iter().all(|&n| n > 0));
        for r in 0..64 {
            for c in 0..64 {
                let dist = |k: usize| (s.seeds[k].0 as f64 - r as f64).hypot(s.seeds[k].1 as f64 - c as f64);
                let best = (0..6).map(dist).fold(f64::INFINITY, f64::min);
                let own = dist(s.regions.label(r, c) as usize);
                assert!(own <= best + 1e-12, "pixel ({r},{c}) labeled {own} away, nearest {best}");
            }
        }
    }
}

#[test]
fn dataset_is_reproducible_and_in_range() {
    let a = synth_dataset(3, 64, 5, 0.1, 4).unwrap();
    let b = synth_dataset(3, 64, 5, 0.1, 4).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.image, y.image);
        assert_eq!(x.regions, y.regions);
        assert!(x.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert!(synth_dataset(1, 4, 17, 0.1, 0).is_err());
}

#[test]
fn adam_matches_a_scalar_recurrence() {
    let (lr, b1, b2, eps) = (1e-2, 0.9, 0.999, 1e-8);
    let grads = [0.5, -1.25, 2.0, 0.0, 0.75];
    let mut p = ParamStore::<f64>::new();
    p.insert("w", Tensor::scalar(1.0), true).unwrap();
    let mut opt = Adam::new(b1, b2, eps);
    let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for (t, &g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        w -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        let gr = BTreeMap::from([("w".to_string(), Tensor::scalar(g))]);
        opt.step(&mut p, &gr, lr).unwrap();
        assert!((p.get("w").unwrap().value.data()[0] - w).abs() < 1e-15);
    }
    // first step of a constant gradient moves by lr in the opposite direction
    let mut q = ParamStore::<f64>::new();
    q.insert("w", Tensor::scalar(0.0), true).unwrap();
    Adam::default().step(&mut q, &BTreeMap::from([("w".to_string(), Tensor::scalar(-3.0))]), 0.1).unwrap();
    assert!((q.get("w").unwrap().value.data()[0] - 0.1).abs() < 1e-8);
}

#[test]
fn adam_leaves_zero_gradients_and_frozen_parameters_alone() {
    let mut p = ParamStore::<f32>::new();
    p.insert("a", Tensor::full(&[3], 0.5), true).unwrap();
    p.insert("meta.flag", Tensor::scalar(1.0), false).unwrap();
    let before = p.clone();
    let grads = BTreeMap::from([("a".to_string(), Tensor::zeros(&[3])), ("meta.flag".to_string(), Tensor::scalar(5.0))]);
    Adam::default().step(&mut p, &grads, 1e-3).unwrap();
    assert_eq!(p, before);
}

#[test]
fn every_trainable_parameter_receives_gradient() {
    let codec = Codec::new(NetConfig::toy()).unwrap();
    let p = codec.init(0).unwrap();
    let s = &synth_dataset(1, 64, 6, 0.05, 3).unwrap()[0];
    let maps = StageMaps::new(&s.regions).unwrap();
    let mut g = Graph::new();
    let x = g.constant(s.image.clone());
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
    let f = codec.forward(&mut g, &p, x, &maps, &mut Quantizer::Noise(&mut rng)).unwrap();
    let l = loss_graph(&mut g, x, &f, 0.013, 1.0).unwrap();
    let grads = g.backward(l.total).unwrap();
    let mut seen = 0;
    for (name, par) in p.iter() {
        if !par.trainable {
            continue;
        }
        let gr = grads.param(name).unwrap_or_else(|| panic!("{name} is disconnected"));
        assert!(gr.data().iter().any(|v| *v != 0.0), "{name} has an all-zero gradient");
        seen += 1;
    }
    assert_eq!(seen, p.iter().filter(|(_, q)| q.trainable).count());
}

#[test]
fn training_is_deterministic_and_keeps_the_loss_decomposition() {
    let cfg = tiny_cfg(4);
    let data = cfg.dataset().unwrap();
    let init = Codec::new(cfg.net.clone()).unwrap().init(3).unwrap();
    let a = train_loop(&cfg, &data, init.clone(), |_| {}).unwrap();
    let b = train_loop(&cfg, &data, init, |_| {}).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.params, b.params);
    for r in &a.trace {
        let l = r.loss;
        assert!((l.total - (l.rate() + l.lambda * l.distortion)).abs() <= 1e-6 * l.total.abs());
        assert!(l.rate_y >= 0.0 && l.rate_z >= 0.0 && l.rate_p >= 0.0 && l.rate_p_prime >= 0.0);
    }
}

#[test]
fn short_tiny_run_lowers_the_loss() {
    let cfg = tiny_cfg(120);
    let data = cfg.dataset().unwrap();
    let init = Codec::new(cfg.net.clone()).unwrap().init(5).unwrap();
    let out = train_loop(&cfg, &data, init, |_| {}).unwrap();
    let early = smoothed(&out.trace, 19, 20);
    let late = smoothed(&out.trace, out.trace.len() - 1, 20);
    assert!(late < early, "loss went from {early} to {late}");
}

#[test]
fn nan_weights_abort_training() {
    let cfg = tiny_cfg(2);
    let data = cfg.dataset().unwrap();
    let mut p = Codec::new(cfg.net.clone()).unwrap().init(0).unwrap();
    p.value_mut("enc.0.down.w").unwrap().data_mut()[0] = f32::NAN;
    match train_loop(&cfg, &data, p, |_| {}) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("step 1"), "{msg}"),
        other => panic!("expected a numeric error, got {:?}", other.map(|o| o.trace.len())),
    }
}

#[test]
fn eval_works_with_masks_and_grids_on_the_same_weights() {
    let codec = Codec::new(NetConfig::tiny()).unwrap();
    let p = codec.init(2).unwrap();
    let data = synth_dataset(3, 64, 5, 0.05, 8).unwrap();
    let grid = eval_rd(&codec, &p, &data, |_| RegionSource::Grid(4)).unwrap();
    let masks = eval_rd(&codec, &p, &data, |s| TrainRegions::OracleMasks.source(s)).unwrap();
    for pt in grid.iter().chain(&masks) {
        assert!(pt.bpp > 0.0 && pt.psnr.is_finite());
        let (actual, est) = (pt.bpp * 64.0 * 64.0, pt.estimated_bpp * 64.0 * 64.0);
        assert!(actual <= est * 1.02 + 64.0 * 8.0, "{actual} bits vs estimate {est}");
    }
}
