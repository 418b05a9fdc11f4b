//! Frozen frame encoder: `s = tanh(W·x + b)` with seeded, never-trained
//! weights. The weights live outside any `ParamStore`, so no optimizer can
//! reach them.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::rng::Rng;
use crate::tensor::{gemm, Tensor};
use crate::worldgen::Episode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderCfg {
    pub repr_dim: usize,
    pub seed: u64,
    /// Std of the weight entries times `sqrt(input_dim)`.
    pub gain: f64,
}

impl Default for EncoderCfg {
    fn default() -> Self {
        Self {
            repr_dim: 64,
            seed: 0x5EED_0E4C,
            gain: 2.0,
        }
    }
}

/// One representation per frame, `[frames, repr_dim]`.
pub type ReprSequence = Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    cfg: EncoderCfg,
    input_dim: usize,
    /// `[input_dim, repr_dim]`, applied as `x·W`.
    weight: Tensor,
    bias: Tensor,
}

impl Encoder {
    pub fn new(cfg: EncoderCfg, input_dim: usize) -> Self {
        let mut rng = Rng::new(cfg.seed, "encoder");
        let scale = cfg.gain / (input_dim as f64).sqrt();
        let weight = rng
            .draw(crate::rng::Dist::Normal, &[input_dim, cfg.repr_dim])
            .map(|w| w * scale);
        let bias = rng
            .draw(crate::rng::Dist::Normal, &[1, cfg.repr_dim])
            .map(|b| 0.1 * b);
        Self {
            cfg,
            input_dim,
            weight,
            bias,
        }
    }

    /// Rebuild from stored weights (checkpoints carry them verbatim).
    pub fn from_parts(cfg: EncoderCfg, weight: Tensor, bias: Tensor) -> Result<Self> {
        let (input_dim, r) = weight.dims2()?;
        if r != cfg.repr_dim || bias.shape() != [1, r] {
            return Err(shape_err("Encoder::from_parts", "weight/bias/repr_dim disagree"));
        }
        Ok(Self {
            cfg,
            input_dim,
            weight,
            bias,
        })
    }

    pub fn cfg(&self) -> &EncoderCfg {
        &self.cfg
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn repr_dim(&self) -> usize {
        self.cfg.repr_dim
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn encode_frame(&self, frame: &[f64]) -> Result<Vec<f64>> {
        Ok(self.encode_frames(&[frame])?.into_data())
    }

    pub fn encode_frames<F: AsRef<[f64]>>(&self, frames: &[F]) -> Result<Tensor> {
        let n = frames.len();
        let mut x = Vec::with_capacity(n * self.input_dim);
        for f in frames {
            let f = f.as_ref();
            if f.len() != self.input_dim {
                return Err(shape_err(
                    "encode_frame",
                    format!("frame has {} pixels, encoder expects {}", f.len(), self.input_dim),
                ));
            }
            x.extend_from_slice(f);
        }
        let r = self.cfg.repr_dim;
        let mut out = vec![0.0; n * r];
        gemm(&x, self.weight.data(), n, self.input_dim, r, &mut out);
        for row in out.chunks_mut(r) {
            for (v, b) in row.iter_mut().zip(self.bias.data()) {
                *v = (*v + b).tanh();
            }
        }
        Tensor::matrix(n, r, out)
    }

    pub fn encode_episode(&self, ep: &Episode) -> Result<ReprSequence> {
        self.encode_frames(&ep.frames)
    }
}
