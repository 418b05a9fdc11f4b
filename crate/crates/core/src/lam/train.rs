//! Joint teacher-forced training of the IDM and forward model.

use serde::Serialize;

use crate::autodiff::Graph;
use crate::encoder::ReprSequence;
use crate::error::{Error, Result};
use crate::optim::{adamw_step, warmup_cosine};
use crate::rng::{Dist, Rng};
use crate::tensor::Tensor;
use crate::worldgen::Episode;

use super::{
    codebook_reset, reg_kl_loss, reg_sparse_loss, window_row, Codebook, InferMode, ModelBundle,
    RegKind,
};

/// Per-step scalars; one CSV row each.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossReport {
    pub step: u64,
    pub total: f64,
    pub pred: f64,
    pub reg: f64,
    pub vq: f64,
    pub dead_codes: usize,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,total,pred,reg,vq,dead_codes";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{}",
            self.step, self.total, self.pred, self.reg, self.vq, self.dead_codes
        )
    }
}

/// Row-aligned training rows: `windows: [n, W·R]`, `pairs: [n, 2R]`
/// (`s_t ‖ s_{t+1}`) and `targets: [n, R]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBatch {
    pub windows: Tensor,
    pub pairs: Tensor,
    pub targets: Tensor,
}

impl TransitionBatch {
    /// Every valid transition of the given sequences. `valid[i]` may be
    /// empty, meaning all transitions of sequence `i` are usable.
    pub fn build(seqs: &[&ReprSequence], valid: &[&[bool]], window: usize) -> Result<Self> {
        let mut windows = Vec::new();
        let mut pairs = Vec::new();
        let mut targets = Vec::new();
        for (i, seq) in seqs.iter().enumerate() {
            let mask = valid.get(i).copied().unwrap_or(&[]);
            for t in 0..seq.rows().saturating_sub(1) {
                if mask.get(t) == Some(&false) {
                    continue;
                }
                windows.push(window_row(seq, t, window));
                let mut pair = seq.row(t).to_vec();
                pair.extend_from_slice(seq.row(t + 1));
                pairs.push(pair);
                targets.push(seq.row(t + 1).to_vec());
            }
        }
        if targets.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        Ok(Self {
            windows: Tensor::from_rows(&windows)?,
            pairs: Tensor::from_rows(&pairs)?,
            targets: Tensor::from_rows(&targets)?,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One optimizer step on a batch of episodes.
pub fn train_step(bundle: &mut ModelBundle, batch: &[Episode]) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let seqs = batch
        .iter()
        .map(|ep| bundle.encoder.encode_episode(ep))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ReprSequence> = seqs.iter().collect();
    let masks: Vec<&[bool]> = batch.iter().map(|ep| ep.valid.as_slice()).collect();
    let rows = TransitionBatch::build(&refs, &masks, bundle.window())?;
    step_on_rows(bundle, &rows)
}

/// One optimizer step on pre-built transition rows.
pub fn step_on_rows(bundle: &mut ModelBundle, rows: &TransitionBatch) -> Result<LossReport> {
    let step = bundle.step;
    let seed = bundle.cfg.train.seed;
    let n = rows.len();
    let d = bundle.latent_dim();
    let noise = (bundle.kind() == RegKind::Noisy)
        .then(|| Rng::new(seed, &format!("train/noise/{step}")).draw(Dist::Normal, &[n, d]));

    let mut g = Graph::new();
    let pair = g.constant(rows.pairs.clone());
    let window = g.constant(rows.windows.clone());
    let target = g.constant(rows.targets.clone());
    let lat = bundle.latents_graph(&mut g, pair, InferMode::Train, noise.as_ref())?;
    let pred = bundle.forward_graph(&mut g, window, lat.z);
    let diff = g.sub(pred, target);
    let abs = g.abs(diff);
    let per_row = g.sum_cols(abs);
    let pred_loss = g.mean(per_row);

    let reg = &bundle.cfg.reg;
    let reg_loss = match reg.kind {
        RegKind::Sparse => Some(reg_sparse_loss(&mut g, lat.z, reg)?),
        RegKind::Noisy => Some(reg_kl_loss(
            &mut g,
            lat.mu.expect("noisy mean"),
            lat.log_sigma.expect("noisy log sigma"),
            reg.beta,
        )),
        _ => None,
    };
    let vq_loss = lat.quantized.as_ref().map(|q| q.loss);
    let mut total = pred_loss;
    for extra in [reg_loss, vq_loss].into_iter().flatten() {
        total = g.add(total, extra);
    }

    let grads = match g.grad(total, &bundle.params) {
        Ok(grads) => grads,
        Err(Error::NonFinite(what)) => {
            return Err(Error::NonFinite(format!(
                "step {step}: {what}; last finite param norms {}",
                norm_summary(bundle)
            )))
        }
        Err(e) => return Err(e),
    };
    let tc = &bundle.cfg.train;
    let lr = warmup_cosine(tc.lr, step, tc.steps, tc.warmup_frac);
    adamw_step(&mut bundle.params, &grads, &mut bundle.opt, lr)?;

    let mut report = LossReport {
        step,
        total: g.scalar(total),
        pred: g.scalar(pred_loss),
        reg: reg_loss.map_or(0.0, |v| g.scalar(v)),
        vq: vq_loss.map_or(0.0, |v| g.scalar(v)),
        dead_codes: 0,
    };

    if let (Some(q), Some(cb_id)) = (&lat.quantized, bundle.codebook_id()) {
        for &i in &q.indices {
            bundle.usage[i] += 1;
        }
        report.dead_codes = bundle.usage.iter().filter(|&&u| u == 0).count();
        let period = bundle.cfg.reg.reset_period;
        if period > 0 && (step + 1) % period == 0 && step + 1 < bundle.cfg.train.steps {
            let mut cb = Codebook {
                codes: bundle.params.get(cb_id).clone(),
                usage: std::mem::take(&mut bundle.usage),
            };
            let z_e = g.value(lat.z_e.expect("discrete pre-quantization latents"));
            let mut rng = Rng::new(seed, &format!("train/reset/{step}"));
            let reset = codebook_reset(&mut cb, z_e, &mut rng);
            *bundle.params.get_mut(cb_id) = cb.codes;
            bundle.usage = cb.usage;
            bundle.opt.reset_rows(cb_id.index(), &reset);
        }
    }
    bundle.step += 1;
    Ok(report)
}

fn norm_summary(bundle: &ModelBundle) -> String {
    bundle
        .params
        .iter()
        .map(|(_, name, t)| format!("{name}={:.3e}", t.data().iter().map(|v| v * v).sum::<f64>().sqrt()))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Encoded training set: one representation sequence per episode.
#[derive(Debug, Clone)]
pub struct EncodedSet {
    pub seqs: Vec<ReprSequence>,
    pub valid: Vec<Vec<bool>>,
}

impl EncodedSet {
    pub fn new(bundle: &ModelBundle, episodes: &[Episode]) -> Result<Self> {
        Ok(Self {
            seqs: episodes
                .iter()
                .map(|ep| bundle.encoder.encode_episode(ep))
                .collect::<Result<_>>()?,
            valid: episodes.iter().map(|ep| ep.valid.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    /// The episodes used at `step`: `batch` indices drawn with replacement
    /// from a stream addressed by step, so resumed runs see the same data.
    pub fn batch_indices(&self, seed: u64, step: u64, batch: usize) -> Vec<usize> {
        let mut rng = Rng::new(seed, "train/batch");
        rng.set_position(step * batch as u64);
        (0..batch).map(|_| rng.below(self.len())).collect()
    }

    pub fn rows(&self, idx: &[usize], window: usize) -> Result<TransitionBatch> {
        let seqs: Vec<&ReprSequence> = idx.iter().map(|&i| &self.seqs[i]).collect();
        let valid: Vec<&[bool]> = idx.iter().map(|&i| self.valid[i].as_slice()).collect();
        TransitionBatch::build(&seqs, &valid, window)
    }
}

/// Train until `bundle.step` reaches `cfg.train.steps`, calling `on_report`
/// after every step. Resuming a saved bundle continues the same run.
pub fn train(
    bundle: &mut ModelBundle,
    episodes: &[Episode],
    on_report: impl FnMut(&LossReport) -> Result<()>,
) -> Result<Vec<LossReport>> {
    let steps = bundle.cfg.train.steps;
    train_until(bundle, episodes, steps, on_report)
}

/// Like [`train`] but stops once `bundle.step` reaches `until`; the
/// learning-rate schedule still spans the configured step count.
pub fn train_until(
    bundle: &mut ModelBundle,
    episodes: &[Episode],
    until: u64,
    mut on_report: impl FnMut(&LossReport) -> Result<()>,
) -> Result<Vec<LossReport>> {
    if episodes.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let data = EncodedSet::new(bundle, episodes)?;
    let mut reports = Vec::new();
    while bundle.step < until.min(bundle.cfg.train.steps) {
        let idx = data.batch_indices(bundle.cfg.train.seed, bundle.step, bundle.cfg.train.batch);
        let rows = data.rows(&idx, bundle.window())?;
        let report = step_on_rows(bundle, &rows)?;
        on_report(&report)?;
        reports.push(report);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderCfg;
    use crate::lam::{sparse_loss_value, LamConfig, ModelCfg, RegularizerCfg, TrainCfg};
    use crate::worldgen::{make_dataset, WorldCfg};

    fn bundle(reg: RegularizerCfg, steps: u64) -> ModelBundle {
        let cfg = LamConfig {
            model: ModelCfg {
                idm_hidden: 32,
                fwd_hidden: 32,
                ..ModelCfg::default()
            },
            reg,
            train: TrainCfg {
                steps,
                batch: 4,
                seed: 11,
                ..TrainCfg::default()
            },
            encoder: EncoderCfg::default(),
        };
        ModelBundle::new(cfg, 256).unwrap()
    }

    fn data() -> Vec<Episode> {
        make_dataset(&WorldCfg::default(), 3, 8).unwrap()
    }

    #[test]
    fn reported_reg_matches_direct_evaluation() {
        let mut b = bundle(RegularizerCfg::sparse(0.05), 10);
        let eps = data();
        let before = b.clone();
        let report = train_step(&mut b, &eps[..3]).unwrap();
        let seqs: Vec<_> = eps[..3].iter().map(|e| before.encoder.encode_episode(e).unwrap()).collect();
        let refs: Vec<_> = seqs.iter().collect();
        let masks: Vec<&[bool]> = eps[..3].iter().map(|e| e.valid.as_slice()).collect();
        let rows = TransitionBatch::build(&refs, &masks, 2).unwrap();
        let z = before
            .infer_latents(
                &Tensor::matrix(rows.len(), 64, rows.pairs.data().chunks(128).flat_map(|c| c[..64].to_vec()).collect()).unwrap(),
                &rows.targets,
            )
            .unwrap();
        let direct = sparse_loss_value(&z, &before.cfg.reg).unwrap();
        assert!((report.reg - direct).abs() < 1e-12, "{} vs {}", report.reg, direct);
        assert!((report.total - report.pred - report.reg).abs() < 1e-12);
    }

    #[test]
    fn runs_are_bit_identical() {
        let eps = data();
        let run = || {
            let mut b = bundle(RegularizerCfg::noisy(1e-3), 6);
            let r = train(&mut b, &eps, |_| Ok(())).unwrap();
            (r, b)
        };
        let (r1, b1) = run();
        let (r2, b2) = run();
        assert_eq!(r1, r2);
        assert_eq!(b1.params, b2.params);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let eps = data();
        let mut full = bundle(RegularizerCfg::discrete(8, 3), 8);
        let all = train(&mut full, &eps, |_| Ok(())).unwrap();

        let mut part = bundle(RegularizerCfg::discrete(8, 3), 8);
        let first = train_until(&mut part, &eps, 4, |_| Ok(())).unwrap();
        let second = train(&mut part, &eps, |_| Ok(())).unwrap();
        assert_eq!([first, second].concat(), all);
        assert_eq!(part.params, full.params);
    }

    #[test]
    fn codebook_moves_with_training() {
        let eps = data();
        let mut b = bundle(RegularizerCfg::discrete(8, 0), 5);
        let before = b.codebook().unwrap().codes;
        let reports = train(&mut b, &eps, |_| Ok(())).unwrap();
        assert!(reports.iter().all(|r| r.vq >= 0.0));
        assert_ne!(b.codebook().unwrap().codes, before);
    }

    #[test]
    fn empty_batch_rejected() {
        let mut b = bundle(RegularizerCfg::default(), 1);
        assert!(train_step(&mut b, &[]).is_err());
    }

    #[test]
    fn csv_row_shape() {
        let r = LossReport {
            step: 3,
            total: 1.5,
            pred: 1.0,
            reg: 0.5,
            vq: 0.0,
            dead_codes: 2,
        };
        assert_eq!(r.csv_row().split(',').count(), LossReport::CSV_HEADER.split(',').count());
    }
}
