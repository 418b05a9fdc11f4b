//! Checkpoint container shared by model bundles and controllers.
//!
//! Version 1 (little-endian):
//!
//! ```text
//! "LWCK" u16:version
//! str digest       config digest of the producing run
//! str section      "bundle" | "controller"
//! str meta         JSON
//! u32 count
//! count × { str name, u32 ndim, u64 dims[ndim], f64 data[prod(dims)] }
//! ```
//!
//! Strings are `u32` length + UTF-8 bytes. Floats are stored bit-exactly.

use serde::{Deserialize, Serialize};

use crate::codec::{ByteReader, ByteWriter};
use crate::encoder::Encoder;
use crate::error::{malformed, Error, Result};
use crate::lam::{LamConfig, ModelBundle};
use crate::optim::AdamWState;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LWCK";
pub const VERSION: u16 = 1;
pub const SECTION_BUNDLE: &str = "bundle";
pub const SECTION_CONTROLLER: &str = "controller";
const MAX_NDIM: u32 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub digest: String,
    pub section: String,
    pub meta: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| malformed("checkpoint", format!("missing tensor {name}")))
    }

    pub fn expect_section(&self, section: &str) -> Result<()> {
        if self.section != section {
            return Err(malformed(
                "checkpoint",
                format!("section {:?}, expected {section:?}", self.section),
            ));
        }
        Ok(())
    }
}

pub fn encode(c: &Container) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u16(VERSION);
    w.str(&c.digest);
    w.str(&c.section);
    w.str(&c.meta);
    w.u32(c.tensors.len() as u32);
    for (name, t) in &c.tensors {
        w.str(name);
        w.u32(t.shape().len() as u32);
        for &d in t.shape() {
            w.u64(d as u64);
        }
        w.f64s(t.data());
    }
    w.finish()
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    let mut r = ByteReader::new(bytes, "checkpoint");
    r.expect_magic(MAGIC)?;
    r.expect_version(VERSION)?;
    let digest = r.str()?;
    let section = r.str()?;
    let meta = r.str()?;
    let count = r.u32()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name = r.str()?;
        let ndim = r.u32()?;
        if ndim > MAX_NDIM {
            return Err(malformed("checkpoint", format!("tensor {name} has {ndim} dims")));
        }
        let mut shape = Vec::with_capacity(ndim as usize);
        let mut len: usize = 1;
        for _ in 0..ndim {
            let d = usize::try_from(r.u64()?)
                .map_err(|_| malformed("checkpoint", "dimension overflows usize"))?;
            len = len
                .checked_mul(d)
                .ok_or_else(|| malformed("checkpoint", "tensor size overflow"))?;
            shape.push(d);
        }
        let data = r.f64s(len)?;
        tensors.push((name, Tensor::new(shape, data)?));
    }
    r.finish()?;
    Ok(Container {
        digest,
        section,
        meta,
        tensors,
    })
}

pub(crate) fn push_params(out: &mut Vec<(String, Tensor)>, params: &ParamStore, opt: &AdamWState) {
    for (id, name, t) in params.iter() {
        out.push((name.to_string(), t.clone()));
        out.push((format!("adam.m/{name}"), opt.m[id.index()].clone()));
        out.push((format!("adam.v/{name}"), opt.v[id.index()].clone()));
    }
}

pub(crate) fn load_params(c: &Container, params: &mut ParamStore, opt: &mut AdamWState) -> Result<()> {
    let mut entries = Vec::with_capacity(params.len());
    for name in params.names() {
        entries.push((name.to_string(), c.tensor(name)?.clone()));
    }
    params.load(&entries)?;
    for (id, name, t) in params.iter() {
        for (moments, tag) in [(&mut opt.m, "m"), (&mut opt.v, "v")] {
            let stored = c.tensor(&format!("adam.{tag}/{name}"))?;
            if stored.shape() != t.shape() {
                return Err(malformed("checkpoint", format!("adam.{tag}/{name} shape")));
            }
            moments[id.index()] = stored.clone();
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    config: LamConfig,
    input_dim: usize,
    step: u64,
    adam_step: u64,
    usage: Vec<u64>,
}

pub fn bundle_to_container(b: &ModelBundle) -> Container {
    let meta = BundleMeta {
        config: b.cfg.clone(),
        input_dim: b.encoder.input_dim(),
        step: b.step,
        adam_step: b.opt.step,
        usage: b.usage.clone(),
    };
    let mut tensors = vec![
        ("encoder.weight".to_string(), b.encoder.weight().clone()),
        ("encoder.bias".to_string(), b.encoder.bias().clone()),
    ];
    push_params(&mut tensors, &b.params, &b.opt);
    Container {
        digest: b.digest.clone(),
        section: SECTION_BUNDLE.into(),
        meta: serde_json::to_string(&meta).expect("bundle meta serializes"),
        tensors,
    }
}

pub fn bundle_from_container(c: &Container) -> Result<ModelBundle> {
    c.expect_section(SECTION_BUNDLE)?;
    let meta: BundleMeta = serde_json::from_str(&c.meta)
        .map_err(|e| malformed("checkpoint", format!("bundle meta: {e}")))?;
    let mut b = ModelBundle::new(meta.config, meta.input_dim)?;
    b.encoder = Encoder::from_parts(
        b.cfg.encoder.clone(),
        c.tensor("encoder.weight")?.clone(),
        c.tensor("encoder.bias")?.clone(),
    )?;
    if b.encoder.input_dim() != meta.input_dim {
        return Err(malformed("checkpoint", "encoder input dim disagrees with meta"));
    }
    load_params(c, &mut b.params, &mut b.opt)?;
    if meta.usage.len() != b.usage.len() {
        return Err(malformed("checkpoint", "codebook usage length"));
    }
    b.usage = meta.usage;
    b.step = meta.step;
    b.opt.step = meta.adam_step;
    b.digest = c.digest.clone();
    Ok(b)
}

pub fn save_bundle(path: &std::path::Path, b: &ModelBundle) -> Result<()> {
    crate::codec::write_atomic(path, &encode(&bundle_to_container(b)))
}

pub fn load_bundle(path: &std::path::Path) -> Result<ModelBundle> {
    bundle_from_container(&decode(&std::fs::read(path)?)?)
}

/// Load a bundle and insist it came from the run with `digest`.
pub fn load_bundle_checked(path: &std::path::Path, digest: &str) -> Result<ModelBundle> {
    let b = load_bundle(path)?;
    if b.digest != digest {
        return Err(Error::DigestMismatch {
            expected: digest.to_string(),
            found: b.digest,
        });
    }
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderCfg;
    use crate::lam::{train, ModelCfg, RegularizerCfg, TrainCfg};
    use crate::worldgen::{make_dataset, WorldCfg};

    fn trained(reg: RegularizerCfg) -> ModelBundle {
        let cfg = LamConfig {
            model: ModelCfg {
                idm_hidden: 16,
                fwd_hidden: 16,
                ..ModelCfg::default()
            },
            reg,
            train: TrainCfg {
                steps: 3,
                batch: 2,
                ..TrainCfg::default()
            },
            encoder: EncoderCfg::default(),
        };
        let mut b = ModelBundle::new(cfg, 256).unwrap();
        b.digest = "abc".into();
        let eps = make_dataset(&WorldCfg::default(), 0, 3).unwrap();
        train(&mut b, &eps, |_| Ok(())).unwrap();
        b
    }

    #[test]
    fn bundle_round_trips_bit_exactly() {
        for reg in [RegularizerCfg::sparse(0.1), RegularizerCfg::noisy(1e-3), RegularizerCfg::discrete(4, 2)] {
            let b = trained(reg);
            let bytes = encode(&bundle_to_container(&b));
            let back = bundle_from_container(&decode(&bytes).unwrap()).unwrap();
            assert_eq!(back, b);
            assert_eq!(encode(&bundle_to_container(&back)), bytes);
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&bundle_to_container(&trained(RegularizerCfg::default())));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(Error::Version { .. })));
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode(&long).is_err());
    }

    #[test]
    fn wrong_section_rejected() {
        let mut c = bundle_to_container(&trained(RegularizerCfg::default()));
        c.section = SECTION_CONTROLLER.into();
        assert!(bundle_from_container(&c).is_err());
    }

    #[test]
    fn digest_checked_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ckpt");
        save_bundle(&path, &trained(RegularizerCfg::default())).unwrap();
        assert!(load_bundle_checked(&path, "abc").is_ok());
        assert!(matches!(
            load_bundle_checked(&path, "def"),
            Err(Error::DigestMismatch { .. })
        ));
    }
}
