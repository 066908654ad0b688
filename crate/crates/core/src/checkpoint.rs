//! Role-tagged model checkpoints and their on-disk layout.
//!
//! A checkpoint directory holds `manifest.txt` plus one raw little-endian
//! `f64` file per parameter (row-major, no header, data starts at byte 0).
//! The manifest is line oriented:
//!
//! ```text
//! okapi-checkpoint 1
//! role sft
//! config n_layers 4
//! ...
//! layout f64-le row-major offset=0
//! param blocks.0.ln1.beta 64 blocks.0.ln1.beta.f64
//! provenance {"stage":"sft","epochs":"3",...}
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{init_params, ModelConfig, ParamStore, Tensor};

const MAGIC: &str = "okapi-checkpoint 1";
const LAYOUT: &str = "f64-le row-major offset=0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Base,
    Sft,
    Reward,
    Ppo,
}

impl Role {
    pub fn can_become(self, next: Role) -> bool {
        matches!(
            (self, next),
            (Role::Base, Role::Sft) | (Role::Sft, Role::Reward) | (Role::Sft, Role::Ppo)
        )
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Base => "base",
            Role::Sft => "sft",
            Role::Reward => "reward",
            Role::Ppo => "ppo",
        })
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Role::Base),
            "sft" => Ok(Role::Sft),
            "reward" => Ok(Role::Reward),
            "ppo" => Ok(Role::Ppo),
            other => Err(Error::invalid(format!("unknown role {other}"))),
        }
    }
}

/// One training stage's record: stage name plus flat key/value details.
pub type ProvenanceRecord = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub role: Role,
    pub provenance: Vec<ProvenanceRecord>,
}

impl Checkpoint {
    pub fn init(config: ModelConfig) -> Result<Self> {
        let params = init_params(&config)?;
        let mut record = ProvenanceRecord::new();
        record.insert("stage".into(), "init".into());
        record.insert("seed".into(), config.seed.to_string());
        Ok(Self {
            config,
            params,
            role: Role::Base,
            provenance: vec![record],
        })
    }

    pub fn expect_role(&self, role: Role) -> Result<()> {
        if self.role != role {
            return Err(Error::Role {
                expected: role.to_string(),
                found: self.role.to_string(),
            });
        }
        Ok(())
    }

    /// Copy carrying the next role in the base -> sft -> {reward, ppo} chain.
    pub fn derive(&self, role: Role, record: ProvenanceRecord) -> Result<Self> {
        if !self.role.can_become(role) {
            return Err(Error::Role {
                expected: format!("a role that can become {role}"),
                found: self.role.to_string(),
            });
        }
        let mut out = self.clone();
        out.role = role;
        out.provenance.push(record);
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let c = &self.config;
        let mut m = String::new();
        m.push_str(MAGIC);
        m.push('\n');
        m.push_str(&format!("role {}\n", self.role));
        for (k, v) in [
            ("n_layers", c.n_layers as u64),
            ("d_model", c.d_model as u64),
            ("n_heads", c.n_heads as u64),
            ("context_len", c.context_len as u64),
            ("vocab_size", c.vocab_size as u64),
            ("seed", c.seed),
        ] {
            m.push_str(&format!("config {k} {v}\n"));
        }
        m.push_str(&format!("layout {LAYOUT}\n"));
        for (name, t) in &self.params {
            let file = format!("{name}.f64");
            let shape = t.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
            m.push_str(&format!("param {name} {shape} {file}\n"));
            let mut bytes = Vec::with_capacity(t.data.len() * 8);
            for v in &t.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            let path = dir.join(&file);
            fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
        }
        for rec in &self.provenance {
            let json = serde_json::to_string(rec).expect("string map serializes");
            m.push_str(&format!("provenance {json}\n"));
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, m).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let bad = |line: usize, msg: String| Error::Parse {
            path: path.clone(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, MAGIC)) => {}
            _ => return Err(bad(1, "not a checkpoint manifest".into())),
        }
        let mut role = None;
        let mut cfg: BTreeMap<String, u64> = BTreeMap::new();
        let mut params = ParamStore::new();
        let mut provenance = Vec::new();
        for (i, line) in lines {
            let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
            match kind {
                "role" => role = Some(rest.parse::<Role>()?),
                "config" => {
                    let (k, v) = rest.split_once(' ').ok_or_else(|| bad(i + 1, line.into()))?;
                    let v = v.parse().map_err(|_| bad(i + 1, format!("bad value {v}")))?;
                    cfg.insert(k.to_string(), v);
                }
                "layout" if rest == LAYOUT => {}
                "layout" => return Err(bad(i + 1, format!("unsupported layout {rest}"))),
                "param" => {
                    let parts: Vec<&str> = rest.split(' ').collect();
                    let [name, shape, file] = parts[..] else {
                        return Err(bad(i + 1, line.into()));
                    };
                    let shape: Vec<usize> = shape
                        .split('x')
                        .map(|d| d.parse().map_err(|_| bad(i + 1, format!("bad shape {shape}"))))
                        .collect::<Result<_>>()?;
                    let fpath = dir.join(file);
                    let bytes = fs::read(&fpath).map_err(|e| Error::io(&fpath, e))?;
                    let n: usize = shape.iter().product();
                    if bytes.len() != n * 8 {
                        return Err(bad(
                            i + 1,
                            format!("{file}: {} bytes for shape {shape:?}", bytes.len()),
                        ));
                    }
                    let data = bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                        .collect();
                    params.insert(name.to_string(), Tensor { shape, data });
                }
                "provenance" => {
                    let rec = serde_json::from_str(rest).map_err(|e| bad(i + 1, e.to_string()))?;
                    provenance.push(rec);
                }
                "" => {}
                other => return Err(bad(i + 1, format!("unknown entry {other}"))),
            }
        }
        let get = |k: &str| {
            cfg.get(k)
                .copied()
                .ok_or_else(|| Error::Config(format!("{}: missing config {k}", path.display())))
        };
        let config = ModelConfig {
            n_layers: get("n_layers")? as usize,
            d_model: get("d_model")? as usize,
            n_heads: get("n_heads")? as usize,
            context_len: get("context_len")? as usize,
            vocab_size: get("vocab_size")? as usize,
            seed: get("seed")?,
        };
        config.validate()?;
        for (name, shape) in config.param_shapes() {
            match params.get(&name) {
                Some(t) if t.shape == shape => {}
                Some(t) => {
                    return Err(Error::invalid(format!(
                        "{name}: shape {:?} does not match config {shape:?}",
                        t.shape
                    )))
                }
                None => return Err(Error::invalid(format!("checkpoint lacks {name}"))),
            }
        }
        Ok(Self {
            config,
            params,
            role: role.ok_or_else(|| bad(0, "missing role".into()))?,
            provenance,
        })
    }

    /// SHA-256 over role, config and every parameter's bytes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.role.to_string());
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
