//! `TDCK` checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "TDCK" | version u32 | meta_len u64 | meta (JSON, includes the config echo)
//! n_groups u64, then per group:
//!   name_len u32 | name | n_tensors u32
//!   per tensor: ndim u32 | dims u64 × ndim | payload f32 × prod(dims)
//! CRC32 (u32) of every byte after the magic
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::data::io::Reader;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numkernel::{AdamState, Mlp};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Run state that is not a tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub config_hash: String,
    pub d_x: usize,
    pub d_a: usize,
    pub num_classes: usize,
    /// Epochs completed.
    pub epoch: usize,
    pub mine_ema: Option<f32>,
    pub adam_steps: BTreeMap<String, u64>,
    pub best_epoch: Option<usize>,
    pub best_val_h: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub groups: Vec<(String, Vec<Tensor>)>,
}

pub(crate) fn net_tensors(net: &Mlp<f32>) -> Vec<Tensor> {
    net.layers()
        .iter()
        .flat_map(|l| {
            [
                Tensor {
                    dims: vec![l.in_dim(), l.out_dim()],
                    data: l.weight.iter().copied().collect(),
                },
                Tensor {
                    dims: vec![l.out_dim()],
                    data: l.bias.to_vec(),
                },
            ]
        })
        .collect()
}

pub(crate) fn load_net(net: &mut Mlp<f32>, name: &str, tensors: &[Tensor]) -> Result<()> {
    let shapes = net.param_shapes();
    if shapes.len() != tensors.len() || shapes.iter().zip(tensors).any(|(s, t)| *s != t.dims) {
        return Err(Error::shape(
            "checkpoint group",
            format!("{name}: {:?}", tensors.iter().map(|t| &t.dims).collect::<Vec<_>>()),
            shapes,
        ));
    }
    let flat: Vec<f32> = tensors.iter().flat_map(|t| t.data.iter().copied()).collect();
    net.set_flat_params(&flat)?;
    Ok(())
}

pub(crate) fn adam_tensors(net: &Mlp<f32>, state: &AdamState<f32>) -> (Vec<Tensor>, Vec<Tensor>) {
    let shapes = net.param_shapes();
    let wrap = |bufs: &[Vec<f32>]| {
        shapes
            .iter()
            .zip(bufs)
            .map(|(s, b)| Tensor {
                dims: s.clone(),
                data: b.clone(),
            })
            .collect()
    };
    (wrap(&state.first), wrap(&state.second))
}

pub(crate) fn load_adam(state: &mut AdamState<f32>, name: &str, first: &[Tensor], second: &[Tensor], step: u64) -> Result<()> {
    let fits = |ts: &[Tensor], bufs: &[Vec<f32>]| ts.len() == bufs.len() && ts.iter().zip(bufs).all(|(t, b)| t.data.len() == b.len());
    if !fits(first, &state.first) || !fits(second, &state.second) {
        return Err(Error::shape("checkpoint optimizer state", name.to_string(), state.first.len()));
    }
    state.first = first.iter().map(|t| t.data.clone()).collect();
    state.second = second.iter().map(|t| t.data.clone()).collect();
    state.step = step;
    Ok(())
}

impl Checkpoint {
    pub fn group(&self, name: &str) -> Result<&[Tensor]> {
        self.groups
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.as_slice())
            .ok_or_else(|| Error::format(0, format!("checkpoint has no group {name:?}")))
    }

    pub fn has_group(&self, name: &str) -> bool {
        self.groups.iter().any(|(n, _)| n == name)
    }

    /// Shape error unless the bundle has the dimensions the model was trained on.
    pub fn check_bundle(&self, bundle: &crate::data::DatasetBundle) -> Result<()> {
        let have = (bundle.feature_dim(), bundle.semantic_dim(), bundle.num_classes());
        let want = (self.meta.d_x, self.meta.d_a, self.meta.num_classes);
        if have != want {
            return Err(Error::shape("checkpoint vs bundle (D_x, D_a, classes)", want, have));
        }
        Ok(())
    }

    /// Rebuilds the model from the config echo and copies every parameter group
    /// (optionally those stored under `prefix`).
    pub fn model_with_prefix(&self, prefix: &str) -> Result<Model<f32>> {
        let cfg = &self.meta.config;
        let dims = cfg.model_dims(self.meta.d_x, self.meta.d_a);
        let mut model = Model::<f32>::new(dims, cfg.no_tfd, cfg.bilinear, &mut super::init_rng(cfg.seed))?;
        let names: Vec<String> = model.groups().into_iter().map(|(n, _)| n).collect();
        for name in names {
            let tensors = self.group(&format!("{prefix}{name}"))?;
            load_net(model.group_mut(&name).expect("known group"), &name, tensors)?;
        }
        model.mine_ema = self.meta.mine_ema;
        Ok(model)
    }

    /// The final model of the run.
    pub fn model(&self) -> Result<Model<f32>> {
        self.model_with_prefix("")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("meta serialises");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.groups.len() as u64).to_le_bytes());
        for (name, tensors) in &self.groups {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
            for t in tensors {
                out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
                for &d in &t.dims {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for v in &t.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&out[4..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}, expected \"TDCK\"")));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
        }
        // Validate the checksum before interpreting anything variable-length.
        if bytes.len() < 12 {
            return Err(Error::format(bytes.len() as u64, "truncated checkpoint"));
        }
        let body_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
        let actual = crc32fast::hash(&bytes[4..body_end]);
        if stored != actual {
            return Err(Error::format(
                body_end as u64,
                format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
            ));
        }
        let meta_len = r.count("meta length")?;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "meta")?)
            .map_err(|e| Error::format(16, format!("bad checkpoint metadata: {e}")))?;
        let n_groups = r.count("group count")?;
        let mut groups = Vec::with_capacity(n_groups.min(1024));
        for _ in 0..n_groups {
            let name_len = r.u32("group name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "group name")?.to_vec())
                .map_err(|_| Error::format(0, "group name is not UTF-8"))?;
            let n_tensors = r.u32("tensor count")? as usize;
            let mut tensors = Vec::with_capacity(n_tensors.min(64));
            for _ in 0..n_tensors {
                let ndim = r.u32("tensor rank")? as usize;
                let mut dims = Vec::with_capacity(ndim.min(8));
                for _ in 0..ndim {
                    dims.push(r.count("tensor dim")?);
                }
                let len = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).unwrap_or(usize::MAX);
                let data = r.f32s(len, &name)?;
                tensors.push(Tensor { dims, data });
            }
            groups.push((name, tensors));
        }
        r.finish_crc(4)?;
        Ok(Self { meta, groups })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Short content id: first 16 hex digits of the SHA-256 of the file bytes.
    pub fn id(&self) -> String {
        use sha2::{Digest, Sha256};
        Sha256::digest(self.to_bytes())
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
