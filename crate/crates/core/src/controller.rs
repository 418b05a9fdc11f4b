//! Maps ground-truth actions (and the representation the action is applied
//! to) onto the latent-action space of a frozen bundle.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::{self, Container, SECTION_CONTROLLER};
use crate::encoder::ReprSequence;
use crate::error::{malformed, shape_err, Error, Result};
use crate::lam::{init_weight, rollout_seq, InferMode, LatentSource, ModelBundle, Rollout};
use crate::optim::{adamw_step, warmup_cosine, AdamWHyper, AdamWState};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::worldgen::Episode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerCfg {
    /// Feed the pre-transition representation alongside the action.
    pub context: bool,
    pub embed_dim: usize,
    pub hidden: usize,
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub seed: u64,
}

impl Default for ControllerCfg {
    fn default() -> Self {
        Self {
            context: true,
            embed_dim: 32,
            hidden: 64,
            steps: 3000,
            batch: 256,
            lr: 1e-3,
            weight_decay: 0.04,
            warmup_frac: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ids {
    w_e: ParamId,
    b_e: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    w_o: ParamId,
    b_o: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    pub cfg: ControllerCfg,
    pub action_dim: usize,
    pub repr_dim: usize,
    pub latent_dim: usize,
    pub params: ParamStore,
    ids: Ids,
    pub opt: AdamWState,
    pub step: u64,
    pub digest: String,
}

/// Training triples: context `s`, action `a`, target latent `z`, row-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerData {
    pub context: Tensor,
    pub actions: Tensor,
    pub targets: Tensor,
}

impl ControllerData {
    pub fn new(context: Tensor, actions: Tensor, targets: Tensor) -> Result<Self> {
        let n = targets.rows();
        if context.rows() != n || actions.rows() != n {
            return Err(shape_err("ControllerData", "row counts disagree"));
        }
        if n == 0 {
            return Err(Error::Empty("controller dataset"));
        }
        Ok(Self {
            context,
            actions,
            targets,
        })
    }

    /// Eval-mode IDM targets for every valid transition of `episodes`.
    pub fn from_episodes(bundle: &ModelBundle, episodes: &[Episode]) -> Result<Self> {
        let mut ctx = Vec::new();
        let mut acts = Vec::new();
        let mut tgts = Vec::new();
        for ep in episodes {
            let seq = bundle.encoder.encode_episode(ep)?;
            let z = bundle.sequence_latents(&seq)?;
            for t in 0..seq.rows().saturating_sub(1) {
                if !ep.valid[t] {
                    continue;
                }
                ctx.push(seq.row(t).to_vec());
                acts.push(ep.actions[t].clone());
                tgts.push(z.row(t).to_vec());
            }
        }
        if tgts.is_empty() {
            return Err(Error::Empty("controller dataset"));
        }
        Self::new(
            Tensor::from_rows(&ctx)?,
            Tensor::from_rows(&acts)?,
            Tensor::from_rows(&tgts)?,
        )
    }

    pub fn len(&self) -> usize {
        self.targets.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Result<(Tensor, Tensor, Tensor)> {
        let pick = |t: &Tensor| {
            let rows: Vec<&[f64]> = idx.iter().map(|&i| t.row(i)).collect();
            Tensor::from_rows(&rows)
        };
        Ok((pick(&self.context)?, pick(&self.actions)?, pick(&self.targets)?))
    }
}

impl Controller {
    pub fn new(cfg: ControllerCfg, action_dim: usize, repr_dim: usize, latent_dim: usize) -> Result<Self> {
        if action_dim == 0 || latent_dim == 0 || cfg.embed_dim == 0 || cfg.hidden == 0 {
            return Err(Error::Config("controller dimensions must be positive".into()));
        }
        let rng = Rng::new(cfg.seed, "controller/init");
        let relu = 2f64.sqrt();
        let fused = cfg.embed_dim + if cfg.context { repr_dim } else { 0 };
        let (e, h) = (cfg.embed_dim, cfg.hidden);
        let mut params = ParamStore::new();
        let ids = Ids {
            w_e: params.add("ctl.w_e", init_weight(&rng, "ctl.w_e", action_dim, e, relu)),
            b_e: params.add("ctl.b_e", Tensor::zeros(&[1, e])),
            w1: params.add("ctl.w1", init_weight(&rng, "ctl.w1", fused, h, relu)),
            b1: params.add("ctl.b1", Tensor::zeros(&[1, h])),
            w2: params.add("ctl.w2", init_weight(&rng, "ctl.w2", h, h, relu)),
            b2: params.add("ctl.b2", Tensor::zeros(&[1, h])),
            w_o: params.add("ctl.w_o", init_weight(&rng, "ctl.w_o", h, latent_dim, 1.0)),
            b_o: params.add("ctl.b_o", Tensor::zeros(&[1, latent_dim])),
        };
        let opt = AdamWState::new(
            &params,
            AdamWHyper {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                ..AdamWHyper::default()
            },
        );
        Ok(Self {
            cfg,
            action_dim,
            repr_dim,
            latent_dim,
            params,
            ids,
            opt,
            step: 0,
            digest: String::new(),
        })
    }

    /// A controller sized for `bundle` and episodes with `action_dim` actions.
    pub fn for_bundle(cfg: ControllerCfg, bundle: &ModelBundle, action_dim: usize) -> Result<Self> {
        Self::new(cfg, action_dim, bundle.repr_dim(), bundle.latent_dim())
    }

    fn graph(&self, g: &mut Graph, actions: Var, context: Var) -> Var {
        let p = &self.params;
        let ids = self.ids;
        let (w_e, b_e) = (g.param(p, ids.w_e), g.param(p, ids.b_e));
        let (w1, b1) = (g.param(p, ids.w1), g.param(p, ids.b1));
        let (w2, b2) = (g.param(p, ids.w2), g.param(p, ids.b2));
        let (w_o, b_o) = (g.param(p, ids.w_o), g.param(p, ids.b_o));
        let emb = g.linear(actions, w_e, b_e);
        let emb = g.relu(emb);
        let x = if self.cfg.context {
            g.concat_cols(&[emb, context])
        } else {
            emb
        };
        let h = g.linear(x, w1, b1);
        let h = g.relu(h);
        let h = g.linear(h, w2, b2);
        let h = g.relu(h);
        g.linear(h, w_o, b_o)
    }

    fn check_batch(&self, actions: &Tensor, context: &Tensor) -> Result<()> {
        if actions.cols() != self.action_dim {
            return Err(shape_err(
                "controller_forward",
                format!("action dim {} vs {}", actions.cols(), self.action_dim),
            ));
        }
        if context.cols() != self.repr_dim || context.rows() != actions.rows() {
            return Err(shape_err(
                "controller_forward",
                format!("context {:?} for actions {:?}", context.shape(), actions.shape()),
            ));
        }
        Ok(())
    }

    /// `ẑ` for a batch: `actions: [n, A]`, `context: [n, R]`.
    pub fn forward_batch(&self, actions: &Tensor, context: &Tensor) -> Result<Tensor> {
        self.check_batch(actions, context)?;
        let mut g = Graph::new();
        let a = g.constant(actions.clone());
        let s = g.constant(context.clone());
        let out = self.graph(&mut g, a, s);
        g.check_finite()?;
        Ok(g.value(out).clone())
    }

    pub fn forward(&self, action: &[f64], context: &[f64]) -> Result<Vec<f64>> {
        let a = Tensor::matrix(1, action.len(), action.to_vec())?;
        let s = Tensor::matrix(1, context.len(), context.to_vec())?;
        Ok(self.forward_batch(&a, &s)?.into_data())
    }

    pub fn mse(&self, data: &ControllerData) -> Result<f64> {
        let z = self.forward_batch(&data.actions, &data.context)?;
        let n = data.len() as f64;
        Ok(z.data()
            .iter()
            .zip(data.targets.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }

    /// One AdamW step on `‖ẑ − z‖²` averaged over rows. Returns the loss.
    pub fn train_step(&mut self, data: &ControllerData) -> Result<f64> {
        let idx = self.batch_indices(data.len());
        let (ctx, acts, tgts) = data.select(&idx)?;
        self.check_batch(&acts, &ctx)?;
        let mut g = Graph::new();
        let a = g.constant(acts);
        let s = g.constant(ctx);
        let t = g.constant(tgts);
        let z = self.graph(&mut g, a, s);
        let diff = g.sub(z, t);
        let sq = g.square(diff);
        let per_row = g.sum_cols(sq);
        let loss = g.mean(per_row);
        let grads = g.grad(loss, &self.params)?;
        let lr = warmup_cosine(self.cfg.lr, self.step, self.cfg.steps, self.cfg.warmup_frac);
        adamw_step(&mut self.params, &grads, &mut self.opt, lr)?;
        self.step += 1;
        Ok(g.scalar(loss))
    }

    fn batch_indices(&self, n: usize) -> Vec<usize> {
        if self.cfg.batch == 0 || self.cfg.batch >= n {
            return (0..n).collect();
        }
        let mut rng = Rng::new(self.cfg.seed, "controller/batch");
        rng.set_position(self.step * self.cfg.batch as u64);
        (0..self.cfg.batch).map(|_| rng.below(n)).collect()
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({
            "config": self.cfg,
            "action_dim": self.action_dim,
            "repr_dim": self.repr_dim,
            "latent_dim": self.latent_dim,
            "step": self.step,
            "adam_step": self.opt.step,
        });
        let mut tensors = Vec::new();
        checkpoint::push_params(&mut tensors, &self.params, &self.opt);
        Container {
            digest: self.digest.clone(),
            section: SECTION_CONTROLLER.into(),
            meta: meta.to_string(),
            tensors,
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            config: ControllerCfg,
            action_dim: usize,
            repr_dim: usize,
            latent_dim: usize,
            step: u64,
            adam_step: u64,
        }
        c.expect_section(SECTION_CONTROLLER)?;
        let m: Meta = serde_json::from_str(&c.meta)
            .map_err(|e| malformed("checkpoint", format!("controller meta: {e}")))?;
        let mut ctl = Self::new(m.config, m.action_dim, m.repr_dim, m.latent_dim)?;
        checkpoint::load_params(c, &mut ctl.params, &mut ctl.opt)?;
        ctl.step = m.step;
        ctl.opt.step = m.adam_step;
        ctl.digest = c.digest.clone();
        Ok(ctl)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::codec::write_atomic(path, &checkpoint::encode(&self.to_container()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_container(&checkpoint::decode(&std::fs::read(path)?)?)
    }
}

/// Train until `ctl.step` reaches `cfg.steps`; returns the per-step losses.
pub fn train_controller(
    ctl: &mut Controller,
    data: &ControllerData,
    mut on_step: impl FnMut(u64, f64) -> Result<()>,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Empty("controller dataset"));
    }
    let mut losses = Vec::new();
    while ctl.step < ctl.cfg.steps {
        let step = ctl.step;
        let loss = ctl.train_step(data)?;
        on_step(step, loss)?;
        losses.push(loss);
    }
    Ok(losses)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerRollout {
    pub controller: Rollout,
    pub idm: Rollout,
}

impl ControllerRollout {
    pub fn ratio(&self) -> f64 {
        self.controller.mean_error() / self.idm.mean_error()
    }
}

/// Rollout driven by the controller on the episode's true actions, alongside
/// the IDM rollout it is compared with.
pub fn rollout_controller(
    ep: &Episode,
    bundle: &ModelBundle,
    ctl: &Controller,
    ctx: usize,
) -> Result<ControllerRollout> {
    let seq = bundle.encoder.encode_episode(ep)?;
    rollout_controller_seq(&seq, ep, bundle, ctl, ctx)
}

pub fn rollout_controller_seq(
    seq: &ReprSequence,
    ep: &Episode,
    bundle: &ModelBundle,
    ctl: &Controller,
    ctx: usize,
) -> Result<ControllerRollout> {
    let f = |t: usize, s: &[f64]| ctl.forward(&ep.actions[t], s);
    Ok(ControllerRollout {
        controller: rollout_seq(seq, bundle, ctx, LatentSource::Func(&f))?,
        idm: rollout_seq(seq, bundle, ctx, LatentSource::Idm)?,
    })
}

/// Eval-mode IDM latent for one transition; convenience for callers that
/// compare controller outputs with their targets.
pub fn idm_target(bundle: &ModelBundle, s: &[f64], s_next: &[f64]) -> Result<Vec<f64>> {
    Ok(bundle.idm_infer(s, s_next, InferMode::Eval, None)?.z)
}
