//! Drawing latent actions without an IDM: Langevin dynamics on the sparse
//! energy, prior draws for the noisy head, codebook draws for the discrete
//! head.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{malformed, Error, Result};
use crate::encoder::ReprSequence;
use crate::lam::{sparse_energy, sparse_energy_grad, window_row, Codebook, ModelBundle, RegKind, RegularizerCfg};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SgldInit {
    /// Standard normal in every coordinate.
    Normal,
    /// Uniform over `[-half_width, half_width]^D`.
    Uniform { half_width: f64 },
    /// Every coordinate starts at `value`.
    Constant { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgldCfg {
    pub alpha: f64,
    pub steps: usize,
    /// Fraction of `steps` discarded before collecting.
    pub burn_in: f64,
    pub thin: usize,
    pub init: SgldInit,
    /// Abort once any coordinate exceeds this magnitude.
    pub bound: f64,
    /// Off turns the chain into plain gradient descent.
    pub noise: bool,
}

impl Default for SgldCfg {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            steps: 20_000,
            burn_in: 0.2,
            thin: 10,
            init: SgldInit::Normal,
            bound: 100.0,
            noise: true,
        }
    }
}

impl SgldCfg {
    pub fn burn_in_steps(&self) -> usize {
        (self.steps as f64 * self.burn_in).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("SGLD step size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.burn_in) || self.burn_in_steps() >= self.steps {
            return Err(Error::Config("SGLD needs steps > burn-in".into()));
        }
        if self.thin == 0 || !(self.bound > 0.0) {
            return Err(Error::Config("SGLD thinning and bound must be positive".into()));
        }
        Ok(())
    }
}

/// A differentiable energy over latents.
pub trait Energy {
    fn value(&self, z: &[f64]) -> f64;
    fn grad(&self, z: &[f64]) -> Vec<f64>;
}

/// The sparse-latent energy `λ_l2·max(√D − ‖z‖², 0) + λ_l1·‖z‖₁`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseEnergy {
    pub lambda_l2: f64,
    pub lambda_l1: f64,
}

impl SparseEnergy {
    pub fn from_cfg(cfg: &RegularizerCfg) -> Self {
        Self {
            lambda_l2: cfg.lambda_l2,
            lambda_l1: cfg.lambda_l1,
        }
    }
}

impl Energy for SparseEnergy {
    fn value(&self, z: &[f64]) -> f64 {
        sparse_energy(z, self.lambda_l2, self.lambda_l1)
    }

    fn grad(&self, z: &[f64]) -> Vec<f64> {
        sparse_energy_grad(z, self.lambda_l2, self.lambda_l1)
    }
}

/// `½‖z‖²`, whose Langevin stationary law is the standard normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadratic;

impl Energy for Quadratic {
    fn value(&self, z: &[f64]) -> f64 {
        0.5 * z.iter().map(|v| v * v).sum::<f64>()
    }

    fn grad(&self, z: &[f64]) -> Vec<f64> {
        z.to_vec()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgldChain {
    /// Collected samples, `[n, D]`.
    pub samples: Tensor,
    /// Energy after every step, including burn-in.
    pub energies: Vec<f64>,
    pub init: Vec<f64>,
}

pub fn sgld_init(dim: usize, init: SgldInit, rng: &mut Rng) -> Vec<f64> {
    (0..dim)
        .map(|_| match init {
            SgldInit::Normal => rng.normal(),
            SgldInit::Uniform { half_width } => rng.uniform_range(-half_width, half_width),
            SgldInit::Constant { value } => value,
        })
        .collect()
}

/// `z ← z − (α/2)·∇E(z) + ε`, `ε ~ N(0, α)`; samples are kept every `thin`
/// steps after burn-in.
pub fn sgld_sample(energy: &dyn Energy, dim: usize, cfg: &SgldCfg, rng: &mut Rng) -> Result<SgldChain> {
    cfg.validate()?;
    let init = sgld_init(dim, cfg.init, rng);
    let mut z = init.clone();
    let burn = cfg.burn_in_steps();
    let noise_std = cfg.alpha.sqrt();
    let mut samples = Vec::new();
    let mut energies = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let g = energy.grad(&z);
        for (zi, gi) in z.iter_mut().zip(&g) {
            *zi -= 0.5 * cfg.alpha * gi;
            if cfg.noise {
                *zi += noise_std * rng.normal();
            }
        }
        let worst = z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !(worst <= cfg.bound) {
            return Err(Error::Diverged { step, norm: worst });
        }
        energies.push(energy.value(&z));
        if step >= burn && (step - burn) % cfg.thin == 0 {
            samples.extend_from_slice(&z);
        }
    }
    let n = samples.len() / dim.max(1);
    Ok(SgldChain {
        samples: Tensor::matrix(n, dim, samples)?,
        energies,
        init,
    })
}

pub fn prior_sample(dim: usize, rng: &mut Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.normal()).collect()
}

/// Uniform draw over codes, or over codes with non-zero usage.
pub fn codebook_sample(codebook: &Codebook, rng: &mut Rng, used_only: bool) -> Result<Vec<f64>> {
    let pool: Vec<usize> = (0..codebook.len())
        .filter(|&j| !used_only || codebook.usage[j] > 0)
        .collect();
    if pool.is_empty() {
        return Err(Error::Empty(if used_only { "used codes" } else { "codebook" }));
    }
    Ok(codebook.codes.row(pool[rng.below(pool.len())]).to_vec())
}

/// Held-out accuracy of a logistic-regression probe separating `a` (label 0)
/// from `b` (label 1). Rows alternate between fit and test halves.
pub fn separability(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.cols() != b.cols() || a.rows() < 2 || b.rows() < 2 {
        return Err(Error::Config("probe needs two non-trivial sets of equal width".into()));
    }
    let d = a.cols();
    let rows: Vec<(&[f64], f64)> = (0..a.rows())
        .map(|i| (a.row(i), 0.0))
        .chain((0..b.rows()).map(|i| (b.row(i), 1.0)))
        .collect();
    let (fit, test): (Vec<_>, Vec<_>) = rows.iter().enumerate().partition(|(i, _)| i % 2 == 0);
    let fit: Vec<_> = fit.into_iter().map(|(_, r)| *r).collect();
    let test: Vec<_> = test.into_iter().map(|(_, r)| *r).collect();

    let mut mu = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for (x, _) in &fit {
        for j in 0..d {
            mu[j] += x[j] / fit.len() as f64;
        }
    }
    for (x, _) in &fit {
        for j in 0..d {
            sd[j] += (x[j] - mu[j]).powi(2) / fit.len() as f64;
        }
    }
    let sd: Vec<f64> = sd.iter().map(|v| v.sqrt().max(1e-8)).collect();
    let feat = |x: &[f64]| -> Vec<f64> { (0..d).map(|j| (x[j] - mu[j]) / sd[j]).collect() };
    let fit_x: Vec<(Vec<f64>, f64)> = fit.iter().map(|(x, y)| (feat(x), *y)).collect();

    let mut w = vec![0.0; d];
    let mut bias = 0.0;
    let lr = 0.5;
    for _ in 0..300 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, y) in &fit_x {
            let logit: f64 = bias + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let p = 1.0 / (1.0 + (-logit).exp());
            let e = p - y;
            for j in 0..d {
                gw[j] += e * x[j];
            }
            gb += e;
        }
        let n = fit_x.len() as f64;
        for j in 0..d {
            w[j] -= lr * (gw[j] / n + 1e-3 * w[j]);
        }
        bias -= lr * gb / n;
    }
    let correct = test
        .iter()
        .filter(|(x, y)| {
            let f = feat(x);
            let logit: f64 = bias + f.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            (logit > 0.0) == (*y > 0.5)
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleFamily {
    Sgld,
    Prior,
    Codebook,
}

impl SampleFamily {
    pub fn name(self) -> &'static str {
        match self {
            SampleFamily::Sgld => "sgld",
            SampleFamily::Prior => "prior",
            SampleFamily::Codebook => "codebook",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgld" => Ok(SampleFamily::Sgld),
            "prior" => Ok(SampleFamily::Prior),
            "codebook" => Ok(SampleFamily::Codebook),
            other => Err(Error::Config(format!("unknown sample family {other:?}"))),
        }
    }
}

/// `n` latents from `family`, sized for `bundle`. SGLD runs independent
/// chains on the bundle's sparse energy until `n` samples are collected.
pub fn draw_latents(
    bundle: &ModelBundle,
    family: SampleFamily,
    n: usize,
    sgld: &SgldCfg,
    used_only: bool,
    rng: &Rng,
) -> Result<Tensor> {
    let d = bundle.latent_dim();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    match family {
        SampleFamily::Sgld => {
            if bundle.kind() != RegKind::Sparse {
                return Err(Error::Config(format!(
                    "sgld sampling needs a sparse bundle, got {}",
                    bundle.cfg.reg.label()
                )));
            }
            let energy = SparseEnergy::from_cfg(&bundle.cfg.reg);
            let mut chain = 0usize;
            while rows.len() < n {
                let mut r = rng.fork(&format!("sgld/chain/{chain}"));
                let out = sgld_sample(&energy, d, sgld, &mut r)?;
                if out.samples.rows() == 0 {
                    return Err(Error::Config("sgld chain yields no samples after burn-in".into()));
                }
                for i in 0..out.samples.rows().min(n - rows.len()) {
                    rows.push(out.samples.row(i).to_vec());
                }
                chain += 1;
            }
        }
        SampleFamily::Prior => {
            if bundle.kind() != RegKind::Noisy {
                return Err(Error::Config(format!(
                    "prior sampling needs a noisy bundle, got {}",
                    bundle.cfg.reg.label()
                )));
            }
            let mut r = rng.fork("prior");
            rows.extend((0..n).map(|_| prior_sample(d, &mut r)));
        }
        SampleFamily::Codebook => {
            let book = bundle.codebook().ok_or_else(|| {
                Error::Config(format!("codebook sampling needs a discrete bundle, got {}", bundle.cfg.reg.label()))
            })?;
            let mut r = rng.fork("codebook");
            for _ in 0..n {
                rows.push(codebook_sample(&book, &mut r, used_only)?);
            }
        }
    }
    if rows.is_empty() {
        return Ok(Tensor::zeros(&[0, d]));
    }
    Tensor::from_rows(&rows)
}

/// Feed sample `i` to the forward model at transition `i mod (T−1)` of
/// sequence `i mod len(seqs)`.
pub fn predict_with_samples(bundle: &ModelBundle, samples: &Tensor, seqs: &[ReprSequence]) -> Result<Tensor> {
    if seqs.is_empty() || seqs.iter().any(|s| s.rows() < 2) {
        return Err(Error::Empty("context sequences"));
    }
    let windows: Vec<Vec<f64>> = (0..samples.rows())
        .map(|i| {
            let s = &seqs[i % seqs.len()];
            window_row(s, i % (s.rows() - 1), bundle.window())
        })
        .collect();
    if windows.is_empty() {
        return Ok(Tensor::zeros(&[0, bundle.repr_dim()]));
    }
    bundle.predict(&Tensor::from_rows(&windows)?, samples)
}

pub const DUMP_MAGIC: &[u8; 4] = b"LWSD";
pub const DUMP_VERSION: u16 = 1;

/// Sampled latents plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleDump {
    pub digest: String,
    pub family: String,
    pub seed: u64,
    pub samples: Tensor,
}

impl SampleDump {
    /// `"LWSD" u16:version str digest str family u64 seed u32 n u32 d f64[n*d]`.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(DUMP_MAGIC);
        w.u16(DUMP_VERSION);
        w.str(&self.digest);
        w.str(&self.family);
        w.u64(self.seed);
        w.u32(self.samples.rows() as u32);
        w.u32(self.samples.cols() as u32);
        w.f64s(self.samples.data());
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "sample dump");
        r.expect_magic(DUMP_MAGIC)?;
        r.expect_version(DUMP_VERSION)?;
        let digest = r.str()?;
        let family = r.str()?;
        let seed = r.u64()?;
        let n = r.u32()? as usize;
        let d = r.u32()? as usize;
        let len = n
            .checked_mul(d)
            .ok_or_else(|| malformed("sample dump", "size overflow"))?;
        let data = r.f64s(len)?;
        r.finish()?;
        Ok(Self {
            digest,
            family,
            seed,
            samples: Tensor::matrix(n, d, data)?,
        })
    }

    pub fn to_csv(&self) -> String {
        let d = self.samples.cols();
        let mut out = format!(
            "# lamward {} digest={} family={} seed={}\n",
            env!("CARGO_PKG_VERSION"),
            self.digest,
            self.family,
            self.seed
        );
        let header: Vec<String> = (0..d).map(|j| format!("z{j}")).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for i in 0..self.samples.rows() {
            let row: Vec<String> = self.samples.row(i).iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_descent_limit_is_monotone() {
        let cfg = SgldCfg {
            alpha: 1e-3,
            steps: 2000,
            noise: false,
            init: SgldInit::Uniform { half_width: 5.0 },
            ..SgldCfg::default()
        };
        let e = SparseEnergy {
            lambda_l2: 1.0,
            lambda_l1: 0.1,
        };
        let chain = sgld_sample(&e, 16, &cfg, &mut Rng::new(0, "gd")).unwrap();
        assert!(chain.energies.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn chain_is_deterministic() {
        let cfg = SgldCfg {
            steps: 500,
            ..SgldCfg::default()
        };
        let a = sgld_sample(&Quadratic, 4, &cfg, &mut Rng::new(5, "c")).unwrap();
        let b = sgld_sample(&Quadratic, 4, &cfg, &mut Rng::new(5, "c")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples.rows(), 40);
    }

    #[test]
    fn divergence_is_reported() {
        struct Repel;
        impl Energy for Repel {
            fn value(&self, z: &[f64]) -> f64 {
                -z.iter().map(|v| v * v).sum::<f64>()
            }
            fn grad(&self, z: &[f64]) -> Vec<f64> {
                z.iter().map(|v| -2.0 * v).collect()
            }
        }
        let cfg = SgldCfg {
            alpha: 0.5,
            steps: 1000,
            ..SgldCfg::default()
        };
        let r = sgld_sample(&Repel, 2, &cfg, &mut Rng::new(0, "d"));
        assert!(matches!(r, Err(Error::Diverged { .. })));
    }

    #[test]
    fn codebook_draws() {
        let one = Codebook::new(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let mut rng = Rng::new(0, "cb");
        assert_eq!(codebook_sample(&one, &mut rng, false).unwrap(), vec![1.0, 2.0]);
        let mut cb = Codebook::new(Tensor::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap());
        assert!(codebook_sample(&cb, &mut rng, true).is_err());
        cb.usage[2] = 4;
        for _ in 0..20 {
            assert_eq!(codebook_sample(&cb, &mut rng, true).unwrap(), vec![2.0]);
        }
    }

    #[test]
    fn probe_separates_distinct_clouds() {
        let mut rng = Rng::new(2, "probe");
        let a = rng.draw(crate::rng::Dist::Normal, &[200, 4]);
        let b = rng.draw(crate::rng::Dist::Normal, &[200, 4]).map(|v| v + 3.0);
        let c = rng.draw(crate::rng::Dist::Normal, &[200, 4]);
        assert!(separability(&a, &b).unwrap() > 0.95);
        assert!((separability(&a, &c).unwrap() - 0.5).abs() < 0.1);
    }

    #[test]
    fn dump_round_trip() {
        let d = SampleDump {
            digest: "d".into(),
            family: "noisy".into(),
            seed: 3,
            samples: Rng::new(0, "s").draw(crate::rng::Dist::Normal, &[5, 3]),
        };
        let bytes = d.encode();
        assert_eq!(SampleDump::decode(&bytes).unwrap(), d);
        assert!(SampleDump::decode(&bytes[..bytes.len() - 1]).is_err());
        assert_eq!(d.to_csv().lines().count(), 7);
    }
}
