//! Capacity sweep, scene-cut leakage and cycle-consistency protocols.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::ReprSequence;
use crate::error::{Error, Result};
use crate::lam::{l1_error, rollout_seq, window_row, LatentSource, ModelBundle};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::worldgen::{stitch_scene_cut, Episode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub digest: String,
    pub label: String,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn metric(&self, row: usize, name: &str) -> Option<f64> {
        self.rows.get(row).and_then(|r| r.metrics.get(name).copied())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One line per row; metric columns are the sorted union of names.
    pub fn to_csv(&self) -> String {
        let mut names: Vec<&String> = self.rows.iter().flat_map(|r| r.metrics.keys()).collect();
        names.sort();
        names.dedup();
        let mut out = String::from("protocol,digest,label");
        for n in &names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{},{}", self.protocol, r.digest, r.label);
            for n in &names {
                match r.metrics.get(*n) {
                    Some(v) => {
                        let _ = write!(out, ",{v:?}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    /// `x,y,label` series: x is the row index, one series per metric.
    pub fn plot_data(&self) -> String {
        let mut out = String::from("x,y,label\n");
        for (i, r) in self.rows.iter().enumerate() {
            for (name, v) in &r.metrics {
                let _ = writeln!(out, "{i},{v:?},{}:{name}", r.label);
            }
        }
        out
    }
}

fn encode_all(bundle: &ModelBundle, eps: &[Episode]) -> Result<Vec<ReprSequence>> {
    eps.par_iter().map(|ep| bundle.encoder.encode_episode(ep)).collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Teacher-forced one-step L1 errors of every transition, IDM latents.
fn one_step_errors(bundle: &ModelBundle, seq: &ReprSequence) -> Result<Vec<f64>> {
    let t = seq.rows();
    if t < 2 {
        return Ok(Vec::new());
    }
    let z = bundle.sequence_latents(seq)?;
    let rows: Vec<Vec<f64>> = (0..t - 1).map(|i| window_row(seq, i, bundle.window())).collect();
    let pred = bundle.predict(&Tensor::from_rows(&rows)?, &z)?;
    Ok((0..t - 1).map(|i| l1_error(pred.row(i), seq.row(i + 1))).collect())
}

fn same_encoder(a: &ModelBundle, b: &ModelBundle) -> bool {
    a.encoder.cfg() == b.encoder.cfg() && a.encoder.input_dim() == b.encoder.input_dim()
}

/// Mean one-step and IDM-rollout errors per bundle, rows ordered from least
/// to most constrained.
pub fn eval_capacity(bundles: &[&ModelBundle], episodes: &[Episode], ctx: usize) -> Result<EvalReport> {
    let first = *bundles.first().ok_or(Error::Empty("bundle list"))?;
    if episodes.is_empty() {
        return Err(Error::Empty("evaluation episodes"));
    }
    if bundles.iter().any(|b| !same_encoder(first, b)) {
        return Err(Error::Config("bundles use different encoders".into()));
    }
    let seqs = encode_all(first, episodes)?;
    let mut order: Vec<usize> = (0..bundles.len()).collect();
    order.sort_by(|&i, &j| {
        let (ki, kj) = (bundles[i].cfg.reg.strength_key(), bundles[j].cfg.reg.strength_key());
        ki.0.cmp(&kj.0).then(ki.1.total_cmp(&kj.1))
    });
    let mut rows = Vec::with_capacity(bundles.len());
    for i in order {
        let b = bundles[i];
        let per_ep: Vec<(f64, f64)> = seqs
            .par_iter()
            .map(|seq| -> Result<(f64, f64)> {
                Ok((
                    mean(&one_step_errors(b, seq)?),
                    rollout_seq(seq, b, ctx, LatentSource::Idm)?.mean_error(),
                ))
            })
            .collect::<Result<_>>()?;
        let one: Vec<f64> = per_ep.iter().map(|p| p.0).collect();
        let roll: Vec<f64> = per_ep.iter().map(|p| p.1).collect();
        rows.push(EvalRow {
            digest: b.digest.clone(),
            label: b.cfg.reg.label(),
            metrics: BTreeMap::from([
                ("one_step".to_string(), mean(&one)),
                ("rollout".to_string(), mean(&roll)),
            ]),
        });
    }
    Ok(EvalReport {
        protocol: "capacity".into(),
        seeds: Vec::new(),
        rows,
    })
}

/// Random ordered pairs `(a, b)` with `a ≠ b` when possible.
pub fn sample_pairs(n: usize, n_pairs: usize, seed: u64, label: &str) -> Vec<(usize, usize)> {
    let mut rng = Rng::new(seed, label);
    (0..n_pairs)
        .map(|_| {
            let a = rng.below(n);
            if n < 2 {
                return (a, a);
            }
            let mut b = rng.below(n - 1);
            if b >= a {
                b += 1;
            }
            (a, b)
        })
        .collect()
}

/// IDM one-step error predicting frame `k` of `seq`.
fn error_at(bundle: &ModelBundle, seq: &ReprSequence, k: usize) -> Result<f64> {
    let z = bundle.infer_latents(
        &Tensor::matrix(1, seq.cols(), seq.row(k - 1).to_vec())?,
        &Tensor::matrix(1, seq.cols(), seq.row(k).to_vec())?,
    )?;
    let w = window_row(seq, k - 1, bundle.window());
    let pred = bundle.predict(&Tensor::matrix(1, w.len(), w)?, &z)?;
    Ok(l1_error(pred.data(), seq.row(k)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairErrors {
    pub original: f64,
    pub other: f64,
}

/// Original and stitched errors at the cut for explicit pairs.
pub fn leakage_pairs(
    bundle: &ModelBundle,
    episodes: &[Episode],
    pairs: &[(usize, usize)],
    k: usize,
) -> Result<Vec<PairErrors>> {
    pairs
        .par_iter()
        .map(|&(a, b)| {
            let ea = &episodes[a];
            let stitched = stitch_scene_cut(ea, &episodes[b], k)?;
            let sa = bundle.encoder.encode_episode(ea)?;
            let ss = bundle.encoder.encode_episode(&stitched)?;
            Ok(PairErrors {
                original: error_at(bundle, &sa, k)?,
                other: error_at(bundle, &ss, k)?,
            })
        })
        .collect()
}

fn ratio_row(bundle: &ModelBundle, errs: &[PairErrors], names: [&str; 2]) -> EvalRow {
    let orig = mean(&errs.iter().map(|e| e.original).collect::<Vec<_>>());
    let other = mean(&errs.iter().map(|e| e.other).collect::<Vec<_>>());
    EvalRow {
        digest: bundle.digest.clone(),
        label: bundle.cfg.reg.label(),
        metrics: BTreeMap::from([
            (names[0].to_string(), orig),
            (names[1].to_string(), other),
            ("ratio".to_string(), other / orig),
            ("pairs".to_string(), errs.len() as f64),
        ]),
    }
}

/// Scene-cut leakage: error at the cut on stitched vs original videos.
/// `k = None` cuts at `T/2`.
pub fn eval_leakage(
    bundle: &ModelBundle,
    episodes: &[Episode],
    k: Option<usize>,
    n_pairs: usize,
    seed: u64,
) -> Result<EvalReport> {
    if episodes.is_empty() || n_pairs == 0 {
        return Err(Error::Empty("leakage pairs"));
    }
    let k = k.unwrap_or(episodes[0].len() / 2);
    let pairs = sample_pairs(episodes.len(), n_pairs, seed, "eval/leakage");
    let errs = leakage_pairs(bundle, episodes, &pairs, k)?;
    Ok(EvalReport {
        protocol: "leakage".into(),
        seeds: vec![seed],
        rows: vec![ratio_row(bundle, &errs, ["original", "stitched"])],
    })
}

/// Cycle errors for one pair over `horizon` transitions.
pub fn cycle_pair(bundle: &ModelBundle, a: &ReprSequence, b: &ReprSequence, horizon: usize) -> Result<PairErrors> {
    let t = horizon + 1;
    let cut = |s: &ReprSequence| Tensor::matrix(t, s.cols(), s.data()[..t * s.cols()].to_vec());
    let (a, b) = (cut(a)?, cut(b)?);
    let z1 = bundle.sequence_latents(&a)?;
    let orig = rollout_seq(&a, bundle, 1, LatentSource::Given(&z1))?;
    let b_hat = rollout_seq(&b, bundle, 1, LatentSource::Given(&z1))?;
    let mut b_states = b.row(0).to_vec();
    b_states.extend_from_slice(b_hat.predicted.data());
    let b_seq = Tensor::matrix(t, b.cols(), b_states)?;
    let z2 = bundle.sequence_latents(&b_seq)?;
    let back = rollout_seq(&a, bundle, 1, LatentSource::Given(&z2))?;
    Ok(PairErrors {
        original: orig.mean_error(),
        other: back.mean_error(),
    })
}

/// Cycle consistency: latents of A applied to B, re-inferred on the
/// prediction and applied back to A. `horizon = None` uses `T − 1`.
pub fn eval_cycle(
    bundle: &ModelBundle,
    episodes: &[Episode],
    n_pairs: usize,
    horizon: Option<usize>,
    seed: u64,
) -> Result<EvalReport> {
    if episodes.is_empty() || n_pairs == 0 {
        return Err(Error::Empty("cycle pairs"));
    }
    let horizon = horizon.unwrap_or(episodes[0].len() - 1);
    if horizon == 0 || horizon >= episodes[0].len() {
        return Err(Error::Config(format!("cycle horizon {horizon} out of range")));
    }
    let pairs = sample_pairs(episodes.len(), n_pairs, seed, "eval/cycle");
    let seqs = encode_all(bundle, episodes)?;
    let errs: Vec<PairErrors> = pairs
        .par_iter()
        .map(|&(a, b)| cycle_pair(bundle, &seqs[a], &seqs[b], horizon))
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        protocol: "cycle".into(),
        seeds: vec![seed],
        rows: vec![ratio_row(bundle, &errs, ["original", "cycle"])],
    })
}
