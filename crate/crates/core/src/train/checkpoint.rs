use super::adam::AdamState;
use super::config::TrainConfig;
use super::trainer::Trainer;
use crate::io::{ByteReader, Record};
use crate::numerics::{Element, Tensor};
use crate::vit::ModelParams;
use crate::{Error, Result};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"XSMAE1";
const CONFIG_RECORD: &str = "meta/config";

/// Everything needed to continue or evaluate a run. The random streams are
/// counter based, so `(seed, step)` is their complete state.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: TrainConfig,
    pub params: ModelParams<T>,
    pub adam: AdamState<T>,
    pub step: u64,
}

impl<T: Element> Checkpoint<T> {
    pub fn from_trainer(t: &Trainer<T>) -> Self {
        Checkpoint {
            config: t.config().clone(),
            params: t.params().clone(),
            adam: t.adam().clone(),
            step: t.step(),
        }
    }

    pub fn into_trainer(self) -> Result<Trainer<T>> {
        Trainer::from_parts(self.config, self.params, self.adam, self.step)
    }

    /// `magic, config hash, u32 count, (u32 len, name, record)…, seed, step`.
    pub fn encode(&self) -> Vec<u8> {
        let text = self.config.render();
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend_from_slice(&self.config.hash());
        let mut named: Vec<(String, Record)> = vec![(
            CONFIG_RECORD.to_string(),
            Record::from_bytes(text.into_bytes()),
        )];
        for (prefix, tensors) in [
            ("param", self.params.tensors()),
            ("adam_m", &self.adam.m),
            ("adam_v", &self.adam.v),
        ] {
            for (n, t) in self.params.names().iter().zip(tensors) {
                named.push((format!("{prefix}/{n}"), Record::from_tensor(t)));
            }
        }
        out.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, rec) in &named {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            rec.write(&mut out);
        }
        out.extend_from_slice(&self.config.seed.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(6).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let count = r.u32()? as usize;
        let mut named = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            named.push((name, Record::read(&mut r)?));
        }
        let seed = r.u64()?;
        let step = r.u64()?;
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        let mut it = named.into_iter();
        let text = match it.next() {
            Some((n, rec)) if n == CONFIG_RECORD => String::from_utf8(rec.bytes)
                .map_err(|_| Error::Format("config record is not UTF-8".into()))?,
            _ => return Err(Error::Format("config record missing".into())),
        };
        if <[u8; 32]>::from(Sha256::digest(text.as_bytes())) != hash {
            return Err(Error::Format(
                "config hash does not match stored config".into(),
            ));
        }
        let config = TrainConfig::from_kv(&text)?;
        if config.seed != seed {
            return Err(Error::Format("rng seed does not match config".into()));
        }
        let rest: Vec<(String, Record)> = it.collect();
        let n = rest.len() / 3;
        if rest.len() != 3 * n {
            return Err(Error::Format(
                "parameter and moment records do not line up".into(),
            ));
        }
        let group = |prefix: &str, part: &[(String, Record)]| -> Result<Vec<(String, Tensor<T>)>> {
            part.iter()
                .map(|(name, rec)| {
                    let bare = name
                        .strip_prefix(prefix)
                        .and_then(|s| s.strip_prefix('/'))
                        .ok_or_else(|| Error::Format(format!("unexpected record {name}")))?;
                    Ok((bare.to_string(), rec.to_tensor()?))
                })
                .collect()
        };
        let params = ModelParams::from_named(&config.model_config(), group("param", &rest[..n])?)?;
        let check = |g: Vec<(String, Tensor<T>)>| -> Result<Vec<Tensor<T>>> {
            g.into_iter()
                .zip(params.names().iter().zip(params.tensors()))
                .map(|((name, t), (want, p))| {
                    if &name != want || t.shape() != p.shape() {
                        Err(Error::Incompatible(format!(
                            "moment {name} does not match {want}"
                        )))
                    } else {
                        Ok(t)
                    }
                })
                .collect()
        };
        let m = check(group("adam_m", &rest[n..2 * n])?)?;
        let v = check(group("adam_v", &rest[2 * n..])?)?;
        Ok(Checkpoint {
            config,
            params,
            adam: AdamState { m, v, t: step },
            step,
        })
    }

    /// Write through a temporary file and rename, so a crash never leaves
    /// a half-written checkpoint at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Load and, when `expected` is given, insist on a matching config hash.
    pub fn load(path: &Path, expected: Option<&TrainConfig>) -> Result<Self> {
        let ck = Self::decode(&std::fs::read(path)?)?;
        if let Some(want) = expected {
            if want.hash() != ck.config.hash() {
                return Err(Error::Incompatible(
                    "checkpoint was written with a different config".into(),
                ));
            }
        }
        Ok(ck)
    }
}
