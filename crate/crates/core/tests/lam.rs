use lamward::encoder::EncoderCfg;
use lamward::lam::{
    kl_loss_value, nearest_code, Codebook, rollout, sparse_loss_value, train, vq_quantize_value, InferMode, LamConfig,
    LatentSource, ModelBundle, ModelCfg, RegKind, RegularizerCfg, TrainCfg,
};
use lamward::rng::{Dist, Rng};
use lamward::tensor::Tensor;
use lamward::worldgen::{make_dataset, WorldCfg};

fn bundle(reg: RegularizerCfg, steps: u64, seed: u64) -> ModelBundle {
    let cfg = LamConfig {
        model: ModelCfg::default(),
        reg,
        train: TrainCfg {
            steps,
            seed,
            ..TrainCfg::default()
        },
        encoder: EncoderCfg::default(),
    };
    ModelBundle::new(cfg, WorldCfg::default().pixels()).unwrap()
}

/// Straight-from-the-formula sparse regularizer on plain nested vectors.
fn sparse_oracle(z: &[Vec<f64>], c: &RegularizerCfg) -> f64 {
    let n = z.len() as f64;
    let d = z[0].len();
    let mean: Vec<f64> = (0..d).map(|j| z.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let cov = |a: usize, b: usize| z.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / n;
    let eps = 1e-4f64;
    let var_term: f64 = (0..d)
        .map(|j| (1.0 - ((cov(j, j) + eps).sqrt() - eps.sqrt())).max(0.0))
        .sum::<f64>()
        / d as f64;
    let mut cov_term = 0.0;
    for a in 0..d {
        for b in 0..d {
            if a != b {
                cov_term += cov(a, b).powi(2);
            }
        }
    }
    cov_term /= (d * (d - 1)) as f64;
    let mean_term = z.iter().flatten().sum::<f64>() / (n * d as f64);
    let energy: f64 = z
        .iter()
        .map(|r| {
            let sq: f64 = r.iter().map(|x| x * x).sum();
            let l1: f64 = r.iter().map(|x| x.abs()).sum();
            c.lambda_l2 * ((d as f64).sqrt() - sq).max(0.0) + c.lambda_l1 * l1
        })
        .sum::<f64>()
        / n;
    c.lambda_v * var_term + c.lambda_c * cov_term + c.lambda_m * mean_term + energy
}

#[test]
fn sparse_regularizer_matches_independent_formula() {
    let mut rng = Rng::new(12, "sparse-oracle");
    let cfg = RegularizerCfg {
        lambda_c: 0.3,
        lambda_m: 0.2,
        ..RegularizerCfg::sparse(0.05)
    };
    for batch in 0..100 {
        let scale = 0.1 + 0.02 * batch as f64;
        let z = rng.draw(Dist::Normal, &[8, 16]).map(|v| v * scale);
        let rows: Vec<Vec<f64>> = (0..8).map(|i| z.row(i).to_vec()).collect();
        let got = sparse_loss_value(&z, &cfg).unwrap();
        let want = sparse_oracle(&rows, &cfg);
        assert!((got - want).abs() <= 1e-10, "batch {batch}: {got} vs {want}");
    }
}

#[test]
fn sparse_regularizer_hand_cases() {
    let cfg = RegularizerCfg::sparse(0.01);
    let zeros = Tensor::zeros(&[2, 4]);
    assert!((sparse_loss_value(&zeros, &cfg).unwrap() - 2.1).abs() < 1e-12);
    let ones = Tensor::full(&[2, 4], 1.0);
    let got = sparse_loss_value(&ones, &cfg).unwrap();
    // Constant rows: variance hinge is fully active, covariance is zero.
    let want = cfg.lambda_v + cfg.lambda_m + cfg.lambda_l1 * 4.0;
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    assert!(sparse_loss_value(&Tensor::zeros(&[1, 4]), &cfg).is_err());
}

#[test]
fn kl_closed_forms() {
    let beta = 0.7;
    assert_eq!(kl_loss_value(&Tensor::zeros(&[3, 4]), &Tensor::zeros(&[3, 4]), beta), 0.0);
    let mu = Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
    assert!((kl_loss_value(&mu, &Tensor::zeros(&[1, 3]), beta) - 0.5 * beta).abs() < 1e-12);
    let ls = Tensor::matrix(1, 1, vec![2f64.ln()]).unwrap();
    let want = beta * 0.5 * (4.0 - 1.0 - 4f64.ln());
    assert!((kl_loss_value(&Tensor::zeros(&[1, 1]), &ls, beta) - want).abs() < 1e-12);
}

#[test]
fn noisy_head_samples_around_its_mean() {
    let b = bundle(RegularizerCfg::noisy(1e-3), 0, 3);
    let mut rng = Rng::new(9, "inputs");
    let s = rng.draw(Dist::Normal, &[64]).map(|v| 0.5 * v.tanh());
    let s_next = rng.draw(Dist::Normal, &[64]).map(|v| 0.5 * v.tanh());
    let eval = b.idm_infer(s.data(), s_next.data(), InferMode::Eval, None).unwrap();
    let mu = eval.mu.clone().unwrap();
    let sigma: Vec<f64> = eval.log_sigma.clone().unwrap().iter().map(|l| l.exp()).collect();
    assert_eq!(eval.z, mu);

    let n = 10_000;
    let mut noise = Rng::new(9, "reparam");
    let mut sum = vec![0.0; mu.len()];
    for _ in 0..n {
        let z = b.idm_infer(s.data(), s_next.data(), InferMode::Train, Some(&mut noise)).unwrap().z;
        for (acc, v) in sum.iter_mut().zip(z) {
            *acc += v;
        }
    }
    for d in 0..mu.len() {
        let mean = sum[d] / n as f64;
        assert!((mean - mu[d]).abs() <= 3.0 * sigma[d] / 100.0, "dim {d}: {mean} vs {}", mu[d]);
    }
}

#[test]
fn deterministic_head_returns_zero() {
    let b = bundle(RegularizerCfg::of_kind(RegKind::Deterministic), 0, 1);
    let mut rng = Rng::new(2, "det");
    for _ in 0..5 {
        let s = rng.draw(Dist::Normal, &[64]);
        let t = rng.draw(Dist::Normal, &[64]);
        let z = b.idm_infer(s.data(), t.data(), InferMode::Train, Some(&mut rng)).unwrap();
        assert!(z.z.iter().all(|v| *v == 0.0));
        assert_eq!(z.z.len(), b.latent_dim());
    }
    assert!(b.idm_infer(&[0.0; 3], &[0.0; 64], InferMode::Eval, None).is_err());
}

#[test]
fn quantizer_picks_nearest_code_and_is_idempotent() {
    let codes = Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
    assert_eq!(nearest_code(&[0.9, 0.8], &codes), 1);
    let mut rng = Rng::new(6, "vq");
    let mut book = Codebook::new(rng.draw(Dist::Normal, &[16, 5]));
    for _ in 0..50 {
        let z_e = rng.draw(Dist::Normal, &[5]);
        let (z_q, index, _) = vq_quantize_value(z_e.data(), &mut book, 0.25).unwrap();
        let brute = (0..16)
            .map(|j| (j, book.codes.row(j).iter().zip(z_e.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0;
        assert_eq!(index, brute);
        assert_eq!(z_q, book.codes.row(index));
        let (again, same, loss) = vq_quantize_value(&z_q, &mut book, 0.25).unwrap();
        assert_eq!((again, same, loss), (z_q, index, 0.0));
    }
    assert_eq!(book.usage.iter().sum::<u64>(), 100);
    let mut empty = Codebook::new(Tensor::zeros(&[0, 5]));
    assert!(vq_quantize_value(&[0.0; 5], &mut empty, 0.25).is_err());
}

#[test]
fn zero_gate_makes_fresh_predictions_ignore_latents() {
    let b = bundle(RegularizerCfg::of_kind(RegKind::None), 0, 4);
    let ep = &make_dataset(&WorldCfg::default(), 5, 1).unwrap()[0];
    let seq = b.encoder.encode_episode(ep).unwrap();
    let mut rng = Rng::new(4, "z");
    let z1 = rng.draw(Dist::Normal, &[seq.rows(), b.latent_dim()]);
    let z2 = rng.draw(Dist::Normal, &[seq.rows(), b.latent_dim()]);
    assert_eq!(b.forward_predict(&seq, &z1).unwrap(), b.forward_predict(&seq, &z2).unwrap());
}

#[test]
fn predictions_only_see_their_window() {
    let mut b = bundle(RegularizerCfg::of_kind(RegKind::None), 40, 4);
    let eps = make_dataset(&WorldCfg::default(), 5, 8).unwrap();
    train(&mut b, &eps, |_| Ok(())).unwrap();
    let seq = b.encoder.encode_episode(&eps[0]).unwrap();
    let z = Rng::new(1, "z").draw(Dist::Normal, &[seq.rows(), b.latent_dim()]);
    let base = b.forward_predict(&seq, &z).unwrap();
    let t = 9;
    let mut poked = seq.clone();
    let r = poked.cols();
    for v in &mut poked.data_mut()[..(t - 1) * r] {
        *v += 0.3;
    }
    let moved = b.forward_predict(&poked, &z).unwrap();
    assert_eq!(base.row(t), moved.row(t));
    assert_ne!(base.row(t - 2), moved.row(t - 2));
}

#[test]
fn deterministic_model_learns_static_scenes() {
    let world = WorldCfg {
        action_range: 0,
        distractor_rate: 0.0,
        ..WorldCfg::default()
    };
    let eps = make_dataset(&world, 31, 64).unwrap();
    let cfg = LamConfig {
        model: ModelCfg {
            residual: true,
            ..ModelCfg::default()
        },
        reg: RegularizerCfg::of_kind(RegKind::Deterministic),
        train: TrainCfg {
            steps: 500,
            lr: 1e-2,
            seed: 8,
            ..TrainCfg::default()
        },
        encoder: EncoderCfg::default(),
    };
    let mut b = ModelBundle::new(cfg, world.pixels()).unwrap();
    let mut last = f64::INFINITY;
    train(&mut b, &eps, |r| {
        last = r.total;
        Ok(())
    })
    .unwrap();
    assert_eq!(b.step, 500);
    assert!(last < 1e-3, "final loss {last}");
}

#[test]
fn inferred_latents_beat_the_deterministic_model() {
    let world = WorldCfg {
        n_sprites: 1,
        distractor_rate: 0.0,
        ..WorldCfg::default()
    };
    let train_eps = make_dataset(&world, 40, 256).unwrap();
    let held_out = make_dataset(&world, 41, 32).unwrap();
    let mut one_step = Vec::new();
    for reg in [RegularizerCfg::of_kind(RegKind::None), RegularizerCfg::of_kind(RegKind::Deterministic)] {
        let mut b = bundle(reg, 600, 2);
        train(&mut b, &train_eps, |_| Ok(())).unwrap();
        let mut err = 0.0;
        let mut count = 0;
        for ep in &held_out {
            let seq = b.encoder.encode_episode(ep).unwrap();
            let z = b.sequence_latents(&seq).unwrap();
            let pasts = Tensor::matrix(seq.rows() - 1, seq.cols(), seq.data()[..(seq.rows() - 1) * seq.cols()].to_vec())
                .unwrap();
            let pred = b.forward_predict(&pasts, &z).unwrap();
            for t in 0..pred.rows() {
                err += pred.row(t).iter().zip(seq.row(t + 1)).map(|(a, b)| (a - b).abs()).sum::<f64>();
                count += 1;
            }
        }
        one_step.push(err / count as f64);
    }
    assert!(one_step[0] < one_step[1], "idm {} vs deterministic {}", one_step[0], one_step[1]);
}

#[test]
fn given_latents_reproduce_the_idm_rollout() {
    let mut b = bundle(RegularizerCfg::sparse(0.01), 30, 5);
    let eps = make_dataset(&WorldCfg::default(), 7, 8).unwrap();
    train(&mut b, &eps, |_| Ok(())).unwrap();
    let ep = &eps[3];
    let seq = b.encoder.encode_episode(ep).unwrap();
    let z = b.sequence_latents(&seq).unwrap();
    let idm = rollout(ep, &b, 2, LatentSource::Idm).unwrap();
    let given = rollout(ep, &b, 2, LatentSource::Given(&z)).unwrap();
    assert_eq!(idm, given);
    assert!(rollout(ep, &b, ep.len(), LatentSource::Idm).unwrap().errors.is_empty());
}

#[test]
fn training_that_ends_on_a_reset_boundary_keeps_usage() {
    let mut b = bundle(RegularizerCfg::discrete(8, 10), 20, 4);
    let eps = make_dataset(&WorldCfg::default(), 6, 8).unwrap();
    train(&mut b, &eps, |_| Ok(())).unwrap();
    assert!(b.usage.iter().sum::<u64>() > 0);
    let book = b.codebook().unwrap();
    assert!(lamward::sampler::codebook_sample(&book, &mut Rng::new(1, "s"), true).is_ok());
}
