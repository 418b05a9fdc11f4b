//! Open-loop unrolling of the forward model from a ground-truth prefix.

use crate::encoder::ReprSequence;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;
use crate::worldgen::Episode;

use super::{window_of, InferMode, ModelBundle};

/// Where the latent for transition `t → t+1` comes from.
pub enum LatentSource<'a> {
    /// The IDM on ground-truth `(s_t, s_{t+1})`.
    Idm,
    /// One precomputed latent per transition, `[T-1, D]`.
    Given(&'a Tensor),
    /// `f(t, s_t)` where `s_t` is the model's current (possibly predicted)
    /// representation.
    Func(&'a dyn Fn(usize, &[f64]) -> Result<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub ctx: usize,
    /// Predictions for frames `ctx..T`, `[T-ctx, R]`.
    pub predicted: Tensor,
    /// L1 error per predicted frame.
    pub errors: Vec<f64>,
}

impl Rollout {
    pub fn mean_error(&self) -> f64 {
        if self.errors.is_empty() {
            return 0.0;
        }
        self.errors.iter().sum::<f64>() / self.errors.len() as f64
    }
}

pub fn l1_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

pub fn rollout(
    ep: &Episode,
    bundle: &ModelBundle,
    ctx: usize,
    source: LatentSource<'_>,
) -> Result<Rollout> {
    let seq = bundle.encoder.encode_episode(ep)?;
    rollout_seq(&seq, bundle, ctx, source)
}

/// [`rollout`] on an already encoded episode.
pub fn rollout_seq(
    seq: &ReprSequence,
    bundle: &ModelBundle,
    ctx: usize,
    source: LatentSource<'_>,
) -> Result<Rollout> {
    let t_len = seq.rows();
    if ctx == 0 {
        return Err(Error::Config("rollout context must be at least 1".into()));
    }
    if ctx > t_len {
        return Err(Error::Config(format!("context {ctx} exceeds episode length {t_len}")));
    }
    if let LatentSource::Given(z) = &source {
        if z.rows() + 1 < t_len || z.cols() != bundle.latent_dim() {
            return Err(shape_err(
                "rollout",
                format!("{:?} latents for {t_len} frames", z.shape()),
            ));
        }
    }
    let r = bundle.repr_dim();
    let mut states: Vec<Vec<f64>> = (0..ctx).map(|t| seq.row(t).to_vec()).collect();
    let mut predicted = Vec::with_capacity((t_len - ctx) * r);
    let mut errors = Vec::with_capacity(t_len - ctx);
    for t in ctx..t_len {
        let prev = t - 1;
        let z = match &source {
            LatentSource::Idm => {
                bundle
                    .idm_infer(seq.row(prev), seq.row(t), InferMode::Eval, None)?
                    .z
            }
            LatentSource::Given(zs) => zs.row(prev).to_vec(),
            LatentSource::Func(f) => f(prev, &states[prev])?,
        };
        if z.len() != bundle.latent_dim() {
            return Err(shape_err("rollout", "latent source returned wrong dimension"));
        }
        let window = window_of(&states, prev, bundle.window());
        let next = bundle
            .predict(
                &Tensor::matrix(1, window.len(), window)?,
                &Tensor::matrix(1, z.len(), z)?,
            )?
            .into_data();
        errors.push(l1_error(&next, seq.row(t)));
        predicted.extend_from_slice(&next);
        states.push(next);
    }
    Ok(Rollout {
        ctx,
        predicted: Tensor::matrix(t_len - ctx, r, predicted)?,
        errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderCfg;
    use crate::lam::{LamConfig, ModelCfg, RegKind, RegularizerCfg, TrainCfg};
    use crate::worldgen::{make_episode, WorldCfg};

    fn bundle() -> ModelBundle {
        let cfg = LamConfig {
            model: ModelCfg::default(),
            reg: RegularizerCfg::of_kind(RegKind::Sparse),
            train: TrainCfg::default(),
            encoder: EncoderCfg::default(),
        };
        let mut b = ModelBundle::new(cfg, 256).unwrap();
        // Open the gate so latents matter.
        let id = b.params.find("fwd.w_mod").unwrap();
        *b.params.get_mut(id) = b.params.get(id).map(|_| 0.05);
        b
    }

    #[test]
    fn full_context_predicts_nothing() {
        let ep = make_episode(&WorldCfg::default(), 1).unwrap();
        let r = rollout(&ep, &bundle(), ep.len(), LatentSource::Idm).unwrap();
        assert!(r.errors.is_empty());
        assert_eq!(r.predicted.rows(), 0);
    }

    #[test]
    fn given_idm_latents_match_idm_source() {
        let ep = make_episode(&WorldCfg::default(), 2).unwrap();
        let b = bundle();
        let seq = b.encoder.encode_episode(&ep).unwrap();
        let z = b.sequence_latents(&seq).unwrap();
        let a = rollout(&ep, &b, 1, LatentSource::Idm).unwrap();
        let g = rollout(&ep, &b, 1, LatentSource::Given(&z)).unwrap();
        assert_eq!(a, g);
        assert_eq!(a.errors.len(), ep.len() - 1);
    }

    #[test]
    fn func_source_sees_each_transition() {
        let ep = make_episode(&WorldCfg::default(), 3).unwrap();
        let b = bundle();
        let seen = std::cell::RefCell::new(Vec::new());
        let f = |t: usize, _s: &[f64]| {
            seen.borrow_mut().push(t);
            Ok(vec![0.0; 16])
        };
        rollout(&ep, &b, 4, LatentSource::Func(&f)).unwrap();
        assert_eq!(*seen.borrow(), (3..ep.len() - 1).collect::<Vec<_>>());
    }

    #[test]
    fn zero_context_rejected() {
        let ep = make_episode(&WorldCfg::default(), 4).unwrap();
        assert!(rollout(&ep, &bundle(), 0, LatentSource::Idm).is_err());
    }
}
