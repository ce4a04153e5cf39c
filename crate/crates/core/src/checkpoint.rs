//! Single-file training checkpoint.
//!
//! ```text
//! b"SLOTSAM\0" | version u32 | header length u64 | header JSON
//!             | tensors (f64 LE, in header order) | SHA-256 of all preceding bytes
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::params::{Adam, ParamStore};
use crate::training::{init_state, ModelTriad, Phase, TrainState, TrainingReport};

pub const MAGIC: &[u8; 8] = b"SLOTSAM\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RoleTag {
    role: String,
    use_object_token: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Group {
    name: String,
    tensors: Vec<(String, [usize; 2])>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config_hash: String,
    stage: String,
    phase: Phase,
    best_val: Option<f64>,
    encoder_config: EncoderConfig,
    encoder_frozen: bool,
    roles: Vec<RoleTag>,
    optimizer: Option<OptimizerHeader>,
    groups: Vec<Group>,
    report: TrainingReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub state: TrainState,
}

const ROLES: [&str; 4] = ["source", "anchor", "student", "teacher"];

fn role<'a>(state: &'a TrainState, name: &str) -> &'a ModelParams {
    match name {
        "source" => &state.source,
        "anchor" => &state.triad.anchor,
        "student" => &state.triad.student,
        _ => &state.triad.teacher,
    }
}

fn stores(state: &TrainState) -> Vec<(String, &ParamStore)> {
    let mut out = vec![("encoder".to_string(), &state.encoder.store)];
    for r in ROLES {
        out.push((r.to_string(), &role(state, r).store));
    }
    if let Some(opt) = &state.optimizer {
        let (m, v) = opt.moments();
        out.push(("optimizer.m".into(), m));
        out.push(("optimizer.v".into(), v));
    }
    out
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Serialise without taking ownership of the state.
pub fn encode(config_hash: &str, s: &TrainState) -> Result<Vec<u8>> {
    let groups = stores(s);
    let header = Header {
        format_version: FORMAT_VERSION,
        config_hash: config_hash.to_string(),
        stage: s.stage_tag().to_string(),
        phase: s.phase,
        best_val: s.best_val,
        encoder_config: s.encoder.config.clone(),
        encoder_frozen: s.encoder.frozen,
        roles: ROLES
            .iter()
            .map(|r| RoleTag {
                role: r.to_string(),
                use_object_token: role(s, r).use_object_token,
            })
            .collect(),
        optimizer: s.optimizer.as_ref().map(|o| OptimizerHeader {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            step: o.step,
        }),
        groups: groups
            .iter()
            .map(|(n, st)| Group {
                name: n.clone(),
                tensors: st.descriptor(),
            })
            .collect(),
        report: s.report.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, st) in &groups {
        for (_, a) in st.iter() {
            for v in a.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Written to a sibling temporary file first so a crash never leaves a
/// partial checkpoint behind.
pub fn save_state(path: &Path, config_hash: &str, state: &TrainState) -> Result<()> {
    let bytes = encode(config_hash, state)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

impl Checkpoint {
    pub fn new(config_hash: impl Into<String>, state: TrainState) -> Self {
        Self {
            config_hash: config_hash.into(),
            state,
        }
    }

    pub fn stage(&self) -> &'static str {
        self.state.stage_tag()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode(&self.config_hash, &self.state)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let hend = 20usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(&body[20..hend])?;
        let mut cursor = hend;
        let mut read_group = |g: &Group| -> Result<ParamStore> {
            let mut st = ParamStore::new();
            for (name, [r, c]) in &g.tensors {
                let n = r * c;
                let end = cursor + n * 8;
                if end > body.len() {
                    return Err(corrupt(format!("truncated tensor `{name}`")));
                }
                let vals: Vec<f64> = body[cursor..end]
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect();
                cursor = end;
                st.insert(name.clone(), ndarray::Array2::from_shape_vec((*r, *c), vals).expect("sized"));
            }
            Ok(st)
        };
        let mut loaded = std::collections::BTreeMap::new();
        for g in &header.groups {
            loaded.insert(g.name.clone(), read_group(g)?);
        }
        if cursor != body.len() {
            return Err(corrupt("trailing bytes after tensors"));
        }
        let mut take = |n: &str| loaded.remove(n).ok_or_else(|| corrupt(format!("missing group `{n}`")));
        let flag = |r: &str| -> Result<bool> {
            header
                .roles
                .iter()
                .find(|t| t.role == r)
                .map(|t| t.use_object_token)
                .ok_or_else(|| corrupt(format!("missing role `{r}`")))
        };
        let encoder = EncoderParams {
            config: header.encoder_config.clone(),
            store: take("encoder")?,
            frozen: header.encoder_frozen,
        };
        let mut model = |r: &str| -> Result<ModelParams> {
            Ok(ModelParams {
                store: take(r)?,
                use_object_token: flag(r)?,
            })
        };
        let source = model("source")?;
        let anchor = model("anchor")?;
        let student = model("student")?;
        let teacher = model("teacher")?;
        let optimizer = match &header.optimizer {
            Some(o) => {
                let m = take("optimizer.m")?;
                let v = take("optimizer.v")?;
                let mut adam = Adam::new(o.lr).with_moments(m, v);
                adam.beta1 = o.beta1;
                adam.beta2 = o.beta2;
                adam.eps = o.eps;
                adam.step = o.step;
                Some(adam)
            }
            None => None,
        };
        Ok(Self {
            config_hash: header.config_hash,
            state: TrainState {
                encoder,
                source,
                triad: ModelTriad { anchor, student, teacher },
                phase: header.phase,
                optimizer,
                best_val: header.best_val,
                report: header.report,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_state(path, &self.config_hash, &self.state)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Refuse parameters whose names or shapes differ from what `config` builds.
    pub fn check_architecture(&self, config: &RunConfig) -> Result<()> {
        let fresh = init_state(config)?;
        if fresh.encoder.store.descriptor() != self.state.encoder.store.descriptor() {
            return Err(corrupt("encoder architecture differs from the configuration"));
        }
        let want = fresh.source.store.descriptor();
        for r in ROLES {
            if role(&self.state, r).store.descriptor() != want {
                return Err(corrupt(format!("{r} architecture differs from the configuration")));
            }
        }
        Ok(())
    }

    /// Architecture check plus configuration-hash equality.
    pub fn check_config(&self, config: &RunConfig) -> Result<()> {
        if self.config_hash != config.hash() {
            return Err(corrupt(format!(
                "checkpoint was trained with config {} but the given config hashes to {}",
                &self.config_hash[..12.min(self.config_hash.len())],
                &config.hash()[..12]
            )));
        }
        self.check_architecture(config)
    }

    pub fn role(&self, name: &str) -> Result<&ModelParams> {
        if !ROLES.contains(&name) {
            return Err(Error::Config(format!("unknown role `{name}` (expected one of {})", ROLES.join(", "))));
        }
        Ok(role(&self.state, name))
    }
}
