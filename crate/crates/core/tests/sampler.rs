use lamward::lam::Codebook;
use lamward::rng::{Dist, Rng};
use lamward::sampler::{codebook_sample, prior_sample, sgld_sample, Quadratic, SgldCfg, SgldInit, SparseEnergy, Energy};
use lamward::tensor::Tensor;

fn moments(col: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = col.clone().count() as f64;
    let mean = col.clone().sum::<f64>() / n;
    let var = col.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

#[test]
fn langevin_on_a_quadratic_matches_the_standard_normal() {
    let cfg = SgldCfg {
        alpha: 0.01,
        steps: 100_000,
        init: SgldInit::Constant { value: 5.0 },
        ..SgldCfg::default()
    };
    let chain = sgld_sample(&Quadratic, 1, &cfg, &mut Rng::new(1, "sgld")).unwrap();
    assert_eq!(chain.init, vec![5.0]);
    let (mean, var) = moments(chain.samples.data().iter().copied());
    assert!(mean.abs() <= 0.1, "mean {mean}");
    assert!((var - 1.0).abs() <= 0.3, "variance {var}");
}

#[test]
fn noiseless_small_steps_descend() {
    let cfg = SgldCfg {
        alpha: 1e-4,
        steps: 2000,
        noise: false,
        init: SgldInit::Uniform { half_width: 3.0 },
        ..SgldCfg::default()
    };
    let e = SparseEnergy {
        lambda_l2: 1.0,
        lambda_l1: 0.4,
    };
    let chain = sgld_sample(&e, 16, &cfg, &mut Rng::new(2, "gd")).unwrap();
    for w in chain.energies.windows(2) {
        assert!(w[1] <= w[0] + 1e-12);
    }
}

#[test]
fn sparse_chains_settle_below_their_starting_energy() {
    let e = SparseEnergy {
        lambda_l2: 1.0,
        lambda_l1: 0.4,
    };
    let cfg = SgldCfg {
        steps: 5000,
        init: SgldInit::Uniform { half_width: 10.0 },
        ..SgldCfg::default()
    };
    let mut init_energy = 0.0;
    let mut sample_energy = 0.0;
    let chains = 20;
    for c in 0..chains {
        let chain = sgld_sample(&e, 16, &cfg, &mut Rng::new(c, "sparse")).unwrap();
        init_energy += e.value(&chain.init);
        let n = chain.samples.rows();
        sample_energy += (0..n).map(|i| e.value(chain.samples.row(i))).sum::<f64>() / n as f64;
    }
    assert!(sample_energy < init_energy, "{sample_energy} vs {init_energy}");
}

#[test]
fn prior_draws_are_standard_normal() {
    let mut rng = Rng::new(3, "prior");
    let draws: Vec<Vec<f64>> = (0..10_000).map(|_| prior_sample(8, &mut rng)).collect();
    assert!(draws.iter().all(|d| d.len() == 8));
    for d in 0..8 {
        let (mean, var) = moments(draws.iter().map(|r| r[d]));
        assert!(mean.abs() <= 0.05 && (var - 1.0).abs() <= 0.1, "dim {d}: {mean} {var}");
    }
    assert_eq!(prior_sample(8, &mut Rng::new(3, "prior")), draws[0]);
}

#[test]
fn codebook_draws_are_uniform_over_codes() {
    let codes = Rng::new(4, "codes").draw(Dist::Normal, &[8, 3]);
    let mut book = Codebook::new(codes.clone());
    book.usage = vec![1; 8];
    let mut rng = Rng::new(4, "draws");
    let n = 10_000;
    let mut counts = [0usize; 8];
    for _ in 0..n {
        let z = codebook_sample(&book, &mut rng, true).unwrap();
        let j = (0..8).find(|&j| codes.row(j) == z.as_slice()).unwrap();
        counts[j] += 1;
    }
    let p = 1.0 / 8.0;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sigma, "{counts:?}");
    }
    let single = Codebook::new(Tensor::matrix(1, 3, vec![0.5, 0.5, 0.5]).unwrap());
    assert_eq!(codebook_sample(&single, &mut rng, false).unwrap(), vec![0.5; 3]);
    let mut one_used = Codebook::new(codes.clone());
    one_used.usage[5] = 2;
    for _ in 0..20 {
        assert_eq!(codebook_sample(&one_used, &mut rng, true).unwrap(), codes.row(5));
    }
}
