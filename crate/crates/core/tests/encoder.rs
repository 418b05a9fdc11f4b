use std::collections::HashSet;

use lamward::encoder::{Encoder, EncoderCfg};
use lamward::lam::{LamConfig, ModelBundle, RegularizerCfg};
use lamward::worldgen::{make_dataset, make_episode, render_clean, Scene, WorldCfg, WorldState};

fn quiet() -> WorldCfg {
    WorldCfg {
        distractor_rate: 0.0,
        ..WorldCfg::default()
    }
}

/// Ordinary least squares with intercept via the normal equations and a
/// Cholesky solve; returns the held-out R².
fn probe_r2(train: &[(Vec<f64>, f64)], test: &[(Vec<f64>, f64)]) -> f64 {
    let d = train[0].0.len() + 1;
    let aug = |x: &[f64]| {
        let mut v = x.to_vec();
        v.push(1.0);
        v
    };
    let mut a = vec![0.0; d * d];
    let mut b = vec![0.0; d];
    for (x, y) in train {
        let x = aug(x);
        for i in 0..d {
            b[i] += x[i] * y;
            for j in 0..d {
                a[i * d + j] += x[i] * x[j];
            }
        }
    }
    for i in 0..d {
        a[i * d + i] += 1e-8;
    }
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = a[i * d + j] - (0..j).map(|k| l[i * d + k] * l[j * d + k]).sum::<f64>();
            l[i * d + j] = if i == j { s.sqrt() } else { s / l[j * d + j] };
        }
    }
    let mut y = vec![0.0; d];
    for i in 0..d {
        y[i] = (b[i] - (0..i).map(|k| l[i * d + k] * y[k]).sum::<f64>()) / l[i * d + i];
    }
    let mut w = vec![0.0; d];
    for i in (0..d).rev() {
        w[i] = (y[i] - (i + 1..d).map(|k| l[k * d + i] * w[k]).sum::<f64>()) / l[i * d + i];
    }
    let mean = test.iter().map(|(_, y)| y).sum::<f64>() / test.len() as f64;
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for (x, y) in test {
        let p: f64 = aug(x).iter().zip(&w).map(|(a, b)| a * b).sum();
        ss_res += (y - p).powi(2);
        ss_tot += (y - mean).powi(2);
    }
    1.0 - ss_res / ss_tot
}

#[test]
fn linear_probe_recovers_agent_position() {
    let cfg = WorldCfg {
        n_sprites: 1,
        ..quiet()
    };
    let enc = Encoder::new(EncoderCfg::default(), cfg.pixels());
    let mut rows = Vec::new();
    for ep in make_dataset(&cfg, 21, 400).unwrap() {
        let reps = enc.encode_episode(&ep).unwrap();
        for (t, s) in ep.states.iter().enumerate() {
            rows.push((reps.row(t).to_vec(), s.agent_x as f64));
        }
    }
    let (train, test): (Vec<_>, Vec<_>) = rows.into_iter().enumerate().partition(|(i, _)| i % 4 != 0);
    let strip = |v: Vec<(usize, (Vec<f64>, f64))>| v.into_iter().map(|(_, r)| r).collect::<Vec<_>>();
    let r2 = probe_r2(&strip(train), &strip(test));
    assert!(r2 >= 0.8, "held-out R² {r2}");
}

#[test]
fn single_pixel_moves_change_the_representation() {
    let cfg = quiet();
    let enc = Encoder::new(EncoderCfg::default(), cfg.pixels());
    let mut checked = 0;
    for seed in 0..100u64 {
        let scene = Scene::generate(&cfg, seed);
        let a = WorldState {
            agent_x: 5,
            agent_y: 6,
            ..WorldState::default()
        };
        let b = WorldState { agent_x: 6, ..a };
        let (fa, fb) = (render_clean(&cfg, &scene, &a), render_clean(&cfg, &scene, &b));
        if fa == fb {
            continue;
        }
        let (sa, sb) = (enc.encode_frame(&fa).unwrap(), enc.encode_frame(&fb).unwrap());
        let d: f64 = sa.iter().zip(&sb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(d > 0.0, "seed {seed}");
        checked += 1;
    }
    assert!(checked >= 90);
}

#[test]
fn distinct_frames_never_collide() {
    let cfg = quiet();
    let enc = Encoder::new(EncoderCfg::default(), cfg.pixels());
    let mut frames = HashSet::new();
    let mut seed = 0;
    while frames.len() < 10_000 {
        let ep = make_episode(&cfg, seed).unwrap();
        for f in ep.frames {
            frames.insert(f.iter().map(|v| v.to_bits()).collect::<Vec<u64>>());
        }
        seed += 1;
    }
    let mut reps = HashSet::new();
    for f in &frames {
        let x: Vec<f64> = f.iter().map(|b| f64::from_bits(*b)).collect();
        let s = enc.encode_frame(&x).unwrap();
        assert!(s.iter().all(|v| v.abs() < 1.0));
        reps.insert(s.iter().map(|v| v.to_bits()).collect::<Vec<u64>>());
    }
    assert_eq!(reps.len(), frames.len());
}

#[test]
fn encoder_is_outside_the_trainable_set() {
    let cfg = LamConfig {
        model: Default::default(),
        reg: RegularizerCfg::default(),
        train: Default::default(),
        encoder: EncoderCfg::default(),
    };
    let bundle = ModelBundle::new(cfg, 256).unwrap();
    assert!(bundle.trainable_names().iter().all(|n| !n.contains("encoder")));
    let before = bundle.encoder.clone();
    let mut trained = bundle.clone();
    let eps = make_dataset(&WorldCfg::default(), 1, 4).unwrap();
    for _ in 0..3 {
        lamward::lam::train_step(&mut trained, &eps).unwrap();
    }
    assert_eq!(trained.encoder, before);
    assert_ne!(trained.params, bundle.params);
}
