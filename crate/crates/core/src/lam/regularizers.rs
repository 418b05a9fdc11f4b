//! Information regularizers for latent actions: sparse energy with the
//! variance-covariance-mean terms, the Gaussian prior-matching KL, and vector
//! quantization with dead-code resets.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::{Dist, Rng};
use crate::tensor::Tensor;

use super::RegularizerCfg;

/// Stabilizer inside the per-dimension standard deviation. The std is taken as
/// `√(Var + ε) − √ε`: finite slope at collapse, and exactly 0 when Var = 0.
pub const VAR_EPS: f64 = 1e-4;

/// Sparse energy of one latent:
/// `E(z) = λ_l2·max(√D − ‖z‖₂², 0) + λ_l1·‖z‖₁`.
pub fn sparse_energy(z: &[f64], lambda_l2: f64, lambda_l1: f64) -> f64 {
    let d = z.len() as f64;
    let sq: f64 = z.iter().map(|x| x * x).sum();
    let l1: f64 = z.iter().map(|x| x.abs()).sum();
    lambda_l2 * (d.sqrt() - sq).max(0.0) + lambda_l1 * l1
}

/// Subgradient of [`sparse_energy`]; `sign(0) = 0` and the hinge is inactive
/// at its kink.
pub fn sparse_energy_grad(z: &[f64], lambda_l2: f64, lambda_l1: f64) -> Vec<f64> {
    let d = z.len() as f64;
    let sq: f64 = z.iter().map(|x| x * x).sum();
    let hinge_active = d.sqrt() - sq > 0.0;
    z.iter()
        .map(|&x| {
            let l2 = if hinge_active { -2.0 * lambda_l2 * x } else { 0.0 };
            l2 + lambda_l1 * crate::autodiff::sign0(x)
        })
        .collect()
}

/// Graph form of `VCM(Z) + mean_i E(Z_i)` for a batch `Z: [N, D]`.
pub fn reg_sparse_loss(g: &mut Graph, z: Var, cfg: &RegularizerCfg) -> Result<Var> {
    let (n, d) = g.value(z).dims2()?;
    if n < 2 {
        return Err(Error::Config(format!("sparse regularizer needs N >= 2 rows, got {n}")));
    }
    // Variance: λ_V · mean_d max(1 − std_d, 0)
    let mean = g.mean_rows(z);
    let centered = g.sub_row(z, mean);
    let sq = g.square(centered);
    let var = g.mean_rows(sq);
    let var_eps = g.add_scalar(var, VAR_EPS);
    let root = g.sqrt(var_eps);
    let std = g.add_scalar(root, -VAR_EPS.sqrt());
    let neg_std = g.scale(std, -1.0);
    let slack = g.add_scalar(neg_std, 1.0);
    let hinge = g.hinge(slack);
    let v_mean = g.mean(hinge);
    let v_term = g.scale(v_mean, cfg.lambda_v);

    // Covariance: λ_C / (D(D−1)) · Σ_{i≠j} Cov_ij²
    let mut total = v_term;
    if d >= 2 {
        let ct = g.transpose(centered);
        let gram = g.matmul(ct, centered);
        let cov = g.scale(gram, 1.0 / n as f64);
        let mut mask = Tensor::full(&[d, d], 1.0);
        for i in 0..d {
            mask.data_mut()[i * d + i] = 0.0;
        }
        let mask = g.constant(mask);
        let off = g.mul(cov, mask);
        let off_sq = g.square(off);
        let off_sum = g.sum(off_sq);
        let c_term = g.scale(off_sum, cfg.lambda_c / (d * (d - 1)) as f64);
        total = g.add(total, c_term);
    }

    // Mean: λ_M / (N D) · Σ Z_ij
    let z_mean = g.mean(z);
    let m_term = g.scale(z_mean, cfg.lambda_m);
    total = g.add(total, m_term);

    // Energy averaged over rows.
    let zsq = g.square(z);
    let norms = g.sum_cols(zsq);
    let neg = g.scale(norms, -1.0);
    let gap = g.add_scalar(neg, (d as f64).sqrt());
    let l2 = g.hinge(gap);
    let l2_mean = g.mean(l2);
    let l2_term = g.scale(l2_mean, cfg.lambda_l2);
    let za = g.abs(z);
    let l1 = g.sum_cols(za);
    let l1_mean = g.mean(l1);
    let l1_term = g.scale(l1_mean, cfg.lambda_l1);
    total = g.add(total, l2_term);
    Ok(g.add(total, l1_term))
}

/// Value-only wrapper around [`reg_sparse_loss`].
pub fn sparse_loss_value(z: &Tensor, cfg: &RegularizerCfg) -> Result<f64> {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let l = reg_sparse_loss(&mut g, zv, cfg)?;
    Ok(g.scalar(l))
}

/// `β · ½ Σ_d (μ² + σ² − 1 − ln σ²)`, averaged over rows, with `σ = exp(log σ)`.
pub fn reg_kl_loss(g: &mut Graph, mu: Var, log_sigma: Var, beta: f64) -> Var {
    let n = g.value(mu).rows() as f64;
    let mu2 = g.square(mu);
    let two_ls = g.scale(log_sigma, 2.0);
    let var = g.exp(two_ls);
    let a = g.add(mu2, var);
    let b = g.sub(a, two_ls);
    let c = g.add_scalar(b, -1.0);
    let s = g.sum(c);
    g.scale(s, 0.5 * beta / n)
}

pub fn kl_loss_value(mu: &Tensor, log_sigma: &Tensor, beta: f64) -> f64 {
    let mut g = Graph::new();
    let m = g.constant(mu.clone());
    let l = g.constant(log_sigma.clone());
    let k = reg_kl_loss(&mut g, m, l, beta);
    g.scalar(k)
}

/// Codes plus a per-code assignment counter since the last reset.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub codes: Tensor,
    pub usage: Vec<u64>,
}

impl Codebook {
    pub fn new(codes: Tensor) -> Self {
        let n = codes.rows();
        Self {
            codes,
            usage: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.codes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dead_codes(&self) -> usize {
        self.usage.iter().filter(|u| **u == 0).count()
    }
}

/// Nearest code by Euclidean distance; ties go to the lowest index.
pub fn nearest_code(z: &[f64], codes: &Tensor) -> usize {
    let mut best = (f64::INFINITY, 0);
    for j in 0..codes.rows() {
        let d: f64 = codes
            .row(j)
            .iter()
            .zip(z)
            .map(|(c, x)| (c - x) * (c - x))
            .sum();
        if d < best.0 {
            best = (d, j);
        }
    }
    best.1
}

pub struct Quantized {
    pub z_q: Var,
    pub indices: Vec<usize>,
    pub loss: Var,
}

/// Graph form of vector quantization for `z_e: [N, D]` against the codebook
/// leaf `codes: [|C|, D]`.
///
/// Forward value is the nearest code; the gradient of anything downstream
/// passes straight through to `z_e`. The loss is
/// `‖sg(z_e) − c‖² + β_c·‖z_e − sg(c)‖²`, averaged over rows.
pub fn vq_quantize(g: &mut Graph, z_e: Var, codes: Var, commitment: f64) -> Result<Quantized> {
    let (k, d) = g.value(codes).dims2()?;
    if k == 0 {
        return Err(Error::Empty("codebook"));
    }
    let (n, dz) = g.value(z_e).dims2()?;
    if dz != d {
        return Err(crate::error::shape_err(
            "vq_quantize",
            format!("latent dim {dz} vs code dim {d}"),
        ));
    }
    let indices: Vec<usize> = (0..n)
        .map(|i| nearest_code(g.value(z_e).row(i), g.value(codes)))
        .collect();
    let chosen = g.gather_rows(codes, &indices);
    let z_q = g.straight_through(chosen, z_e);

    let ze_sg = g.stop_grad(z_e);
    let code_err = g.sub(ze_sg, chosen);
    let code_sq = g.square(code_err);
    let code_sum = g.sum(code_sq);

    let chosen_sg = g.stop_grad(chosen);
    let commit_err = g.sub(z_e, chosen_sg);
    let commit_sq = g.square(commit_err);
    let commit_sum = g.sum(commit_sq);
    let commit = g.scale(commit_sum, commitment);

    let both = g.add(code_sum, commit);
    let loss = g.scale(both, 1.0 / n.max(1) as f64);
    Ok(Quantized { z_q, indices, loss })
}

/// Value form on a single latent: `(z_q, index, vq_loss)`. Increments the
/// chosen code's usage counter.
pub fn vq_quantize_value(
    z_e: &[f64],
    codebook: &mut Codebook,
    commitment: f64,
) -> Result<(Vec<f64>, usize, f64)> {
    if codebook.is_empty() {
        return Err(Error::Empty("codebook"));
    }
    if z_e.len() != codebook.codes.cols() {
        return Err(crate::error::shape_err("vq_quantize", "latent/code dim mismatch"));
    }
    let idx = nearest_code(z_e, &codebook.codes);
    let c = codebook.codes.row(idx).to_vec();
    let sq: f64 = c.iter().zip(z_e).map(|(a, b)| (a - b) * (a - b)).sum();
    codebook.usage[idx] += 1;
    Ok((c, idx, (1.0 + commitment) * sq))
}

/// Std of the jitter added to re-seeded codes.
pub const RESET_NOISE: f64 = 0.01;

/// Re-seed every code unused since the last reset from a random row of
/// `batch_z_e` plus small Gaussian noise, then zero all usage counters.
/// Returns the indices of the re-seeded codes.
pub fn codebook_reset(codebook: &mut Codebook, batch_z_e: &Tensor, rng: &mut Rng) -> Vec<usize> {
    let dead: Vec<usize> = (0..codebook.len())
        .filter(|&j| codebook.usage[j] == 0)
        .collect();
    let d = codebook.codes.cols();
    if batch_z_e.rows() > 0 {
        for &j in &dead {
            let src = rng.below(batch_z_e.rows());
            let noise = rng.draw(Dist::Normal, &[d]);
            let row: Vec<f64> = batch_z_e
                .row(src)
                .iter()
                .zip(noise.data())
                .map(|(z, e)| z + RESET_NOISE * e)
                .collect();
            codebook.codes.data_mut()[j * d..(j + 1) * d].copy_from_slice(&row);
        }
    }
    codebook.usage.iter_mut().for_each(|u| *u = 0);
    if batch_z_e.rows() == 0 {
        return Vec::new();
    }
    dead
}
