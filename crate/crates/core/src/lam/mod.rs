//! Latent action model: inverse dynamics `g_φ(s_t, s_{t+1}) → z_t`, a
//! forward model conditioned frame-wise on `z_t`, and the regularizers that
//! bound how much information `z_t` can carry.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::{Encoder, EncoderCfg};
use crate::error::{shape_err, Error, Result};
use crate::optim::{AdamWHyper, AdamWState};
use crate::params::{ParamId, ParamStore};
use crate::rng::{Dist, Rng};
use crate::tensor::Tensor;

pub mod regularizers;
pub mod rollout;
pub mod train;

pub use regularizers::{
    codebook_reset, kl_loss_value, nearest_code, reg_kl_loss, reg_sparse_loss, sparse_energy,
    sparse_energy_grad, sparse_loss_value, vq_quantize, vq_quantize_value, Codebook, Quantized,
};
pub use rollout::{l1_error, rollout, rollout_seq, LatentSource, Rollout};
pub use train::{step_on_rows, train, train_step, train_until, EncodedSet, LossReport, TransitionBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegKind {
    Sparse,
    Noisy,
    Discrete,
    /// Unconstrained continuous latents.
    None,
    /// No latent at all: `z = 0`.
    Deterministic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularizerCfg {
    pub kind: RegKind,
    pub lambda_l1: f64,
    pub lambda_l2: f64,
    pub lambda_v: f64,
    pub lambda_c: f64,
    pub lambda_m: f64,
    pub beta: f64,
    pub codebook_size: usize,
    pub commitment: f64,
    /// Steps between dead-code resets; 0 disables resets. The final step
    /// never resets, so a trained bundle keeps its usage counts.
    pub reset_period: u64,
}

impl Default for RegularizerCfg {
    fn default() -> Self {
        Self {
            kind: RegKind::Sparse,
            lambda_l1: 0.01,
            lambda_l2: 1.0,
            lambda_v: 0.1,
            lambda_c: 0.001,
            lambda_m: 0.1,
            beta: 5e-5,
            codebook_size: 16,
            commitment: 0.25,
            reset_period: 200,
        }
    }
}

impl RegularizerCfg {
    pub fn of_kind(kind: RegKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn sparse(lambda_l1: f64) -> Self {
        Self {
            lambda_l1,
            ..Self::of_kind(RegKind::Sparse)
        }
    }

    pub fn noisy(beta: f64) -> Self {
        Self {
            beta,
            ..Self::of_kind(RegKind::Noisy)
        }
    }

    pub fn discrete(codebook_size: usize, reset_period: u64) -> Self {
        Self {
            codebook_size,
            reset_period,
            ..Self::of_kind(RegKind::Discrete)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let coeffs = [
            self.lambda_l1,
            self.lambda_l2,
            self.lambda_v,
            self.lambda_c,
            self.lambda_m,
            self.beta,
            self.commitment,
        ];
        if coeffs.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::Config("regularizer coefficients must be finite and >= 0".into()));
        }
        if self.kind == RegKind::Discrete && self.codebook_size == 0 {
            return Err(Error::Config("discrete head needs a non-empty codebook".into()));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self.kind {
            RegKind::Sparse => format!("sparse(l1={})", self.lambda_l1),
            RegKind::Noisy => format!("noisy(beta={})", self.beta),
            RegKind::Discrete => format!("discrete(C={})", self.codebook_size),
            RegKind::None => "unconstrained".into(),
            RegKind::Deterministic => "deterministic".into(),
        }
    }

    /// Sort key from least to most constrained. Families are not comparable
    /// with each other, so they are grouped between the two extremes.
    pub fn strength_key(&self) -> (u8, f64) {
        match self.kind {
            RegKind::None => (0, 0.0),
            RegKind::Sparse => (1, self.lambda_l1),
            RegKind::Noisy => (2, self.beta),
            RegKind::Discrete => (3, -(self.codebook_size as f64)),
            RegKind::Deterministic => (4, 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelCfg {
    pub latent_dim: usize,
    pub idm_hidden: usize,
    pub fwd_hidden: usize,
    /// Past representations seen by the forward model per prediction.
    pub window: usize,
    /// Predict `s_t` plus a learned change instead of `s_{t+1}` outright.
    pub residual: bool,
}

impl Default for ModelCfg {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            idm_hidden: 64,
            fwd_hidden: 64,
            window: 2,
            residual: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCfg {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub seed: u64,
}

impl Default for TrainCfg {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 32,
            lr: 6.25e-4,
            weight_decay: 0.04,
            warmup_frac: 0.1,
            seed: 0,
        }
    }
}

/// Everything that shapes a bundle's parameters and its training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LamConfig {
    pub model: ModelCfg,
    pub reg: RegularizerCfg,
    pub train: TrainCfg,
    pub encoder: EncoderCfg,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentAction {
    pub z: Vec<f64>,
    pub mu: Option<Vec<f64>>,
    pub log_sigma: Option<Vec<f64>>,
    pub code: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferMode {
    /// Noisy head returns its mean; no sampling.
    Eval,
    /// Noisy head samples `μ + σ·ε`.
    Train,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct IdmIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    w3: ParamId,
    b3: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct FwdIds {
    w_in: ParamId,
    b_in: ParamId,
    w_mod: ParamId,
    b_mod: ParamId,
    w_blk: ParamId,
    b_blk: ParamId,
    w_out: ParamId,
    b_out: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct NetIds {
    idm: Option<IdmIds>,
    fwd: FwdIds,
    codebook: Option<ParamId>,
}

pub(crate) fn init_weight(rng: &Rng, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
    let std = gain / (fan_in as f64).sqrt();
    rng.fork(name)
        .draw(Dist::Normal, &[fan_in, fan_out])
        .map(|w| w * std)
}

/// Parameters, frozen encoder, optimizer state and config of one latent
/// action world model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub cfg: LamConfig,
    pub encoder: Encoder,
    pub params: ParamStore,
    ids: NetIds,
    /// Codebook usage since the last reset (discrete head only).
    pub usage: Vec<u64>,
    pub opt: AdamWState,
    pub step: u64,
    /// Digest of the run config that produced this bundle.
    pub digest: String,
}

/// Rows of `[s_{t-W+1}, …, s_t]` (clamped at 0) used to predict `s_{t+1}`.
pub fn window_row(seq: &Tensor, t: usize, window: usize) -> Vec<f64> {
    let mut row = Vec::with_capacity(window * seq.cols());
    for k in (0..window).rev() {
        let idx = t.saturating_sub(k);
        row.extend_from_slice(seq.row(idx));
    }
    row
}

/// Like [`window_row`] over a list of (possibly predicted) states.
pub fn window_of(states: &[Vec<f64>], t: usize, window: usize) -> Vec<f64> {
    let mut row = Vec::with_capacity(window * states[0].len());
    for k in (0..window).rev() {
        row.extend_from_slice(&states[t.saturating_sub(k)]);
    }
    row
}

impl ModelBundle {
    pub fn new(cfg: LamConfig, input_dim: usize) -> Result<Self> {
        cfg.reg.validate()?;
        let m = &cfg.model;
        if m.latent_dim == 0 || m.window == 0 || m.idm_hidden == 0 || m.fwd_hidden == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        let encoder = Encoder::new(cfg.encoder.clone(), input_dim);
        let r = cfg.encoder.repr_dim;
        let d = m.latent_dim;
        let rng = Rng::new(cfg.train.seed, "lam/init");
        let mut params = ParamStore::new();
        let relu_gain = 2f64.sqrt();

        let idm = if cfg.reg.kind == RegKind::Deterministic {
            None
        } else {
            let out = if cfg.reg.kind == RegKind::Noisy { 2 * d } else { d };
            let h = m.idm_hidden;
            Some(IdmIds {
                w1: params.add("idm.w1", init_weight(&rng, "idm.w1", 2 * r, h, relu_gain)),
                b1: params.add("idm.b1", Tensor::zeros(&[1, h])),
                w2: params.add("idm.w2", init_weight(&rng, "idm.w2", h, h, relu_gain)),
                b2: params.add("idm.b2", Tensor::zeros(&[1, h])),
                w3: params.add("idm.w3", init_weight(&rng, "idm.w3", h, out, 1.0)),
                b3: params.add("idm.b3", Tensor::zeros(&[1, out])),
            })
        };

        let h = m.fwd_hidden;
        let mut w_mod = init_weight(&rng, "fwd.w_mod", d, 3 * h, 0.1);
        // Columns [2h, 3h) project the gate and start at exactly zero.
        for i in 0..d {
            w_mod.data_mut()[i * 3 * h + 2 * h..(i + 1) * 3 * h].fill(0.0);
        }
        let fwd = FwdIds {
            w_in: params.add("fwd.w_in", init_weight(&rng, "fwd.w_in", m.window * r, h, relu_gain)),
            b_in: params.add("fwd.b_in", Tensor::zeros(&[1, h])),
            w_mod: params.add("fwd.w_mod", w_mod),
            b_mod: params.add("fwd.b_mod", Tensor::zeros(&[1, 3 * h])),
            w_blk: params.add("fwd.w_blk", init_weight(&rng, "fwd.w_blk", h, h, relu_gain)),
            b_blk: params.add("fwd.b_blk", Tensor::zeros(&[1, h])),
            w_out: params.add("fwd.w_out", init_weight(&rng, "fwd.w_out", h, r, 1.0)),
            b_out: params.add("fwd.b_out", Tensor::zeros(&[1, r])),
        };

        let codebook = if cfg.reg.kind == RegKind::Discrete {
            let codes = rng
                .fork("codebook")
                .draw(Dist::Normal, &[cfg.reg.codebook_size, d]);
            Some(params.add("codebook", codes))
        } else {
            None
        };

        let usage = vec![0; if codebook.is_some() { cfg.reg.codebook_size } else { 0 }];
        let opt = AdamWState::new(
            &params,
            AdamWHyper {
                lr: cfg.train.lr,
                weight_decay: cfg.train.weight_decay,
                ..AdamWHyper::default()
            },
        );
        Ok(Self {
            cfg,
            encoder,
            params,
            ids: NetIds { idm, fwd, codebook },
            usage,
            opt,
            step: 0,
            digest: String::new(),
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.model.latent_dim
    }

    pub fn repr_dim(&self) -> usize {
        self.encoder.repr_dim()
    }

    pub fn window(&self) -> usize {
        self.cfg.model.window
    }

    pub fn kind(&self) -> RegKind {
        self.cfg.reg.kind
    }

    pub fn codebook_id(&self) -> Option<ParamId> {
        self.ids.codebook
    }

    pub fn codebook(&self) -> Option<Codebook> {
        self.ids.codebook.map(|id| Codebook {
            codes: self.params.get(id).clone(),
            usage: self.usage.clone(),
        })
    }

    /// Raw IDM head output for `pair: [n, 2R]`; `None` for the deterministic kind.
    fn idm_head(&self, g: &mut Graph, pair: Var) -> Option<Var> {
        let ids = self.ids.idm?;
        let p = &self.params;
        let (w1, b1) = (g.param(p, ids.w1), g.param(p, ids.b1));
        let (w2, b2) = (g.param(p, ids.w2), g.param(p, ids.b2));
        let (w3, b3) = (g.param(p, ids.w3), g.param(p, ids.b3));
        let h1 = g.linear(pair, w1, b1);
        let h1 = g.relu(h1);
        let h2 = g.linear(h1, w2, b2);
        let h2 = g.relu(h2);
        Some(g.linear(h2, w3, b3))
    }

    /// Latents for a batch of `(s_t, s_{t+1})` rows. `noise` (shape `[n, D]`)
    /// is required for the noisy head in training mode.
    pub(crate) fn latents_graph(
        &self,
        g: &mut Graph,
        pair: Var,
        mode: InferMode,
        noise: Option<&Tensor>,
    ) -> Result<LatentGraph> {
        let n = g.value(pair).rows();
        let d = self.latent_dim();
        let Some(head) = self.idm_head(g, pair) else {
            let z = g.constant(Tensor::zeros(&[n, d]));
            return Ok(LatentGraph::plain(z));
        };
        match self.kind() {
            RegKind::Sparse | RegKind::None => Ok(LatentGraph::plain(head)),
            RegKind::Noisy => {
                let mu = g.slice_cols(head, 0, d);
                let log_sigma = g.slice_cols(head, d, 2 * d);
                let z = match (mode, noise) {
                    (InferMode::Eval, _) => mu,
                    (InferMode::Train, Some(eps)) => {
                        let sigma = g.exp(log_sigma);
                        let e = g.constant(eps.clone());
                        let se = g.mul(sigma, e);
                        g.add(mu, se)
                    }
                    (InferMode::Train, None) => {
                        return Err(Error::Config("noisy head needs noise in train mode".into()))
                    }
                };
                Ok(LatentGraph {
                    z,
                    mu: Some(mu),
                    log_sigma: Some(log_sigma),
                    z_e: None,
                    quantized: None,
                })
            }
            RegKind::Discrete => {
                let codes = g.param(&self.params, self.ids.codebook.expect("discrete codebook"));
                let q = vq_quantize(g, head, codes, self.cfg.reg.commitment)?;
                Ok(LatentGraph {
                    z: q.z_q,
                    mu: None,
                    log_sigma: None,
                    z_e: Some(head),
                    quantized: Some(q),
                })
            }
            RegKind::Deterministic => unreachable!("handled above"),
        }
    }

    /// Forward model on `window: [n, W·R]` conditioned on `z: [n, D]`.
    ///
    /// Trunk `h = relu(x·W_in + b_in)`; the latent projects to
    /// `(scale, shift, gate)`; the block adds `gate ⊙ relu((LN(h)⊙(1+scale)+shift)·W_blk + b_blk)`
    /// to `h` before the output projection. The gate projection starts at zero.
    /// With `residual` the last frame of the window is added to the output.
    pub(crate) fn forward_graph(&self, g: &mut Graph, window: Var, z: Var) -> Var {
        let ids = self.ids.fwd;
        let p = &self.params;
        let h = self.cfg.model.fwd_hidden;
        let (w_in, b_in) = (g.param(p, ids.w_in), g.param(p, ids.b_in));
        let (w_mod, b_mod) = (g.param(p, ids.w_mod), g.param(p, ids.b_mod));
        let (w_blk, b_blk) = (g.param(p, ids.w_blk), g.param(p, ids.b_blk));
        let (w_out, b_out) = (g.param(p, ids.w_out), g.param(p, ids.b_out));

        let trunk = g.linear(window, w_in, b_in);
        let trunk = g.relu(trunk);
        let normed = g.layer_norm(trunk, 1e-5);
        let modulation = g.linear(z, w_mod, b_mod);
        let scale = g.slice_cols(modulation, 0, h);
        let shift = g.slice_cols(modulation, h, 2 * h);
        let gate = g.slice_cols(modulation, 2 * h, 3 * h);
        let scaled = g.mul(normed, scale);
        let modulated = g.add(normed, scaled);
        let modulated = g.add(modulated, shift);
        let block = g.linear(modulated, w_blk, b_blk);
        let block = g.relu(block);
        let gated = g.mul(gate, block);
        let hidden = g.add(trunk, gated);
        let out = g.linear(hidden, w_out, b_out);
        if self.cfg.model.residual {
            let r = self.repr_dim();
            let w = self.window();
            let last = g.slice_cols(window, (w - 1) * r, w * r);
            g.add(out, last)
        } else {
            out
        }
    }

    fn check_repr(&self, v: &[f64], what: &'static str) -> Result<()> {
        if v.len() != self.repr_dim() {
            return Err(shape_err(what, format!("{} vs repr dim {}", v.len(), self.repr_dim())));
        }
        Ok(())
    }

    /// `z_t = g_φ(s_t, s_{t+1})` for one transition.
    pub fn idm_infer(
        &self,
        s_t: &[f64],
        s_next: &[f64],
        mode: InferMode,
        rng: Option<&mut Rng>,
    ) -> Result<LatentAction> {
        self.check_repr(s_t, "idm_infer")?;
        self.check_repr(s_next, "idm_infer")?;
        let mut pair = s_t.to_vec();
        pair.extend_from_slice(s_next);
        let noise = match (mode, self.kind(), rng) {
            (InferMode::Train, RegKind::Noisy, Some(r)) => {
                Some(r.draw(Dist::Normal, &[1, self.latent_dim()]))
            }
            _ => None,
        };
        let mut g = Graph::new();
        let pv = g.constant(Tensor::matrix(1, pair.len(), pair)?);
        let out = self.latents_graph(&mut g, pv, mode, noise.as_ref())?;
        g.check_finite()?;
        Ok(LatentAction {
            z: g.value(out.z).data().to_vec(),
            mu: out.mu.map(|v| g.value(v).data().to_vec()),
            log_sigma: out.log_sigma.map(|v| g.value(v).data().to_vec()),
            code: out.quantized.map(|q| q.indices[0]),
        })
    }

    /// Eval-mode latents for row-aligned `s: [n, R]`, `s_next: [n, R]`.
    pub fn infer_latents(&self, s: &Tensor, s_next: &Tensor) -> Result<Tensor> {
        if s.shape() != s_next.shape() || s.cols() != self.repr_dim() {
            return Err(shape_err("infer_latents", "pair shapes disagree"));
        }
        let n = s.rows();
        let mut pair = Vec::with_capacity(n * 2 * self.repr_dim());
        for i in 0..n {
            pair.extend_from_slice(s.row(i));
            pair.extend_from_slice(s_next.row(i));
        }
        let mut g = Graph::new();
        let pv = g.constant(Tensor::matrix(n, 2 * self.repr_dim(), pair)?);
        let out = self.latents_graph(&mut g, pv, InferMode::Eval, None)?;
        g.check_finite()?;
        Ok(g.value(out.z).clone())
    }

    /// Eval-mode latents for every transition of a representation sequence.
    pub fn sequence_latents(&self, seq: &Tensor) -> Result<Tensor> {
        let t = seq.rows();
        if t < 2 {
            return Ok(Tensor::zeros(&[0, self.latent_dim()]));
        }
        let r = seq.cols();
        let head = Tensor::matrix(t - 1, r, seq.data()[..(t - 1) * r].to_vec())?;
        let tail = Tensor::matrix(t - 1, r, seq.data()[r..].to_vec())?;
        self.infer_latents(&head, &tail)
    }

    /// One-step predictions for `windows: [n, W·R]` and `z: [n, D]`.
    pub fn predict(&self, windows: &Tensor, z: &Tensor) -> Result<Tensor> {
        let wr = self.window() * self.repr_dim();
        if windows.cols() != wr || z.cols() != self.latent_dim() || windows.rows() != z.rows() {
            return Err(shape_err(
                "predict",
                format!("windows {:?}, latents {:?}", windows.shape(), z.shape()),
            ));
        }
        let mut g = Graph::new();
        let w = g.constant(windows.clone());
        let zv = g.constant(z.clone());
        let out = self.forward_graph(&mut g, w, zv);
        g.check_finite()?;
        Ok(g.value(out).clone())
    }

    /// Teacher-forced predictions `ŝ_{1..t+1}` from `s_{0..t}` and one latent
    /// per transition `z_{0..t}`.
    pub fn forward_predict(&self, reps: &Tensor, z: &Tensor) -> Result<Tensor> {
        if reps.rows() != z.rows() || reps.rows() == 0 {
            return Err(shape_err(
                "forward_predict",
                format!("{} representations vs {} latents", reps.rows(), z.rows()),
            ));
        }
        if reps.cols() != self.repr_dim() {
            return Err(shape_err("forward_predict", "representation dim"));
        }
        let rows: Vec<Vec<f64>> = (0..reps.rows())
            .map(|t| window_row(reps, t, self.window()))
            .collect();
        self.predict(&Tensor::from_rows(&rows)?, z)
    }

    /// Names of every trainable tensor.
    pub fn trainable_names(&self) -> Vec<String> {
        self.params.names().map(str::to_string).collect()
    }
}

pub(crate) struct LatentGraph {
    pub z: Var,
    pub mu: Option<Var>,
    pub log_sigma: Option<Var>,
    pub z_e: Option<Var>,
    pub quantized: Option<Quantized>,
}

impl LatentGraph {
    fn plain(z: Var) -> Self {
        Self {
            z,
            mu: None,
            log_sigma: None,
            z_e: None,
            quantized: None,
        }
    }
}
