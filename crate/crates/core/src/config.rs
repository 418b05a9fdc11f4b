//! Run configuration: one TOML file drives every command, and its digest is
//! stamped into every artifact the run produces.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controller::ControllerCfg;
use crate::encoder::EncoderCfg;
use crate::error::{Error, Result};
use crate::lam::{LamConfig, ModelCfg, RegularizerCfg, TrainCfg};
use crate::planner::CemCfg;
use crate::rng::Rng;
use crate::sampler::SgldCfg;
use crate::worldgen::WorldCfg;

/// Largest config file accepted, in bytes.
pub const MAX_CONFIG_BYTES: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataCfg {
    pub train_episodes: usize,
    pub eval_episodes: usize,
}

impl Default for DataCfg {
    fn default() -> Self {
        Self {
            train_episodes: 1024,
            eval_episodes: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalCfg {
    /// Ground-truth frames given to rollouts before prediction starts.
    pub context: usize,
    pub pairs: usize,
    /// Scene-cut frame; 0 means half the episode length.
    pub cut: usize,
    /// Cycle horizon in transitions; 0 means the whole episode.
    pub cycle_horizon: usize,
}

impl Default for EvalCfg {
    fn default() -> Self {
        Self {
            context: 1,
            pairs: 128,
            cut: 0,
            cycle_horizon: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanCfg {
    pub episodes: usize,
    /// Overrides the preset chosen on the command line when present.
    pub cem: Option<CemCfg>,
}

impl Default for PlanCfg {
    fn default() -> Self {
        Self {
            episodes: 64,
            cem: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleCfg {
    pub n: usize,
    /// Restrict codebook draws to codes seen since the last reset.
    pub used_only: bool,
    pub sgld: SgldCfg,
}

impl Default for SampleCfg {
    fn default() -> Self {
        Self {
            n: 1000,
            used_only: true,
            sgld: SgldCfg::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub world: WorldCfg,
    pub data: DataCfg,
    pub encoder: EncoderCfg,
    pub model: ModelCfg,
    pub reg: RegularizerCfg,
    pub train: TrainCfg,
    pub controller: ControllerCfg,
    pub eval: EvalCfg,
    pub plan: PlanCfg,
    pub sample: SampleCfg,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        if text.len() > MAX_CONFIG_BYTES {
            return Err(Error::Config(format!("config larger than {MAX_CONFIG_BYTES} bytes")));
        }
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Canonical text: fields in declaration order, defaults filled in.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Hex SHA-256 of the canonical text, ignoring the output directory.
    pub fn digest(&self) -> String {
        let keyed = RunConfig {
            out: None,
            ..self.clone()
        };
        hex::encode(Sha256::digest(keyed.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.reg.validate()?;
        self.sample.sgld.validate()?;
        if let Some(c) = &self.plan.cem {
            c.validate()?;
        }
        if self.data.train_episodes == 0 {
            return Err(Error::Config("data.train_episodes must be positive".into()));
        }
        if self.encoder.repr_dim == 0 {
            return Err(Error::Config("encoder.repr_dim must be positive".into()));
        }
        if self.eval.context == 0 || self.eval.context >= self.world.frames {
            return Err(Error::Config(format!(
                "eval.context {} outside 1..{}",
                self.eval.context, self.world.frames
            )));
        }
        if self.eval.cut >= self.world.frames || self.eval.cycle_horizon >= self.world.frames {
            return Err(Error::Config("eval.cut and eval.cycle_horizon must be below world.frames".into()));
        }
        Ok(())
    }

    /// Copy with the run seed replaced; sub-seeds follow it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn sub_seed(&self, label: &str) -> u64 {
        Rng::new(self.seed, label).next_u64()
    }

    pub fn train_data_seed(&self) -> u64 {
        self.sub_seed("data/train")
    }

    pub fn eval_data_seed(&self) -> u64 {
        self.sub_seed("data/eval")
    }

    /// Bundle config; the training seed follows the run seed.
    pub fn lam_config(&self) -> LamConfig {
        LamConfig {
            model: self.model.clone(),
            reg: self.reg.clone(),
            train: TrainCfg {
                seed: self.sub_seed("train"),
                ..self.train.clone()
            },
            encoder: self.encoder.clone(),
        }
    }

    pub fn controller_config(&self) -> ControllerCfg {
        ControllerCfg {
            seed: self.sub_seed("controller"),
            ..self.controller.clone()
        }
    }

    pub fn cem(&self, preset: &str) -> Result<CemCfg> {
        match &self.plan.cem {
            Some(c) => Ok(c.clone()),
            None => CemCfg::preset(preset),
        }
    }
}
