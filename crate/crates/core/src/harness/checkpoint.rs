//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u32` manifest length and a
//! JSON manifest listing the sections, then each section as a `u64` length
//! followed by its bytes. Parameter stores are stored as
//! `u32 count, (u32 name_len, name, u32 rank, u64 dims.., f64 data..)*`,
//! little-endian. Optimizer, predictor optimizer and run state are JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::agent::{Trainer, TrainerState};
use crate::diffcore::{Adam, ParameterStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CRLCKPT\0";
pub const VERSION: u32 = 1;

const CONFIG: &str = "config";
const MODEL: &str = "model";
const OPTIMIZER: &str = "optimizer";
const PREDICTOR: &str = "predictor";
const PREDICTOR_OPTIMIZER: &str = "predictor_optimizer";
const STATE: &str = "state";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionEntry {
    pub name: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub step: u64,
    pub sections: Vec<SectionEntry>,
}

/// Parsed checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub config: RunConfig,
    pub model: Vec<(String, Tensor)>,
    pub optimizer: Adam,
    pub predictor: Vec<(String, Tensor)>,
    pub predictor_optimizer: Adam,
    pub state: TrainerState,
}

fn encode_store(store: &ParameterStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn decode_store(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.filter(|&n| n <= bytes.len() / 8).ok_or_else(|| {
            Error::Checkpoint(format!("parameter {name}: implausible shape {shape:?}"))
        })?;
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("parameter {name}: {e}")))?;
        out.push((name, t));
    }
    if !r.done() {
        return Err(Error::Checkpoint("trailing bytes after parameter section".into()));
    }
    Ok(out)
}

fn store_from(entries: &[(String, Tensor)]) -> Result<ParameterStore> {
    let mut s = ParameterStore::new();
    for (name, t) in entries {
        s.insert(name, t.clone())?;
    }
    Ok(s)
}

/// Copies parameter values into `store`; names and shapes must match
/// exactly.
pub fn load_params(store: &mut ParameterStore, entries: &[(String, Tensor)]) -> Result<()> {
    store.load_values_from(&store_from(entries)?)
}

/// Serialises the full training state.
pub fn to_bytes(config: &RunConfig, trainer: &Trainer) -> Result<Vec<u8>> {
    let sections: Vec<(&str, Vec<u8>)> = vec![
        (CONFIG, config.to_text().into_bytes()),
        (MODEL, encode_store(&trainer.model.store)),
        (OPTIMIZER, serde_json::to_vec(&trainer.opt)?),
        (PREDICTOR, encode_store(&trainer.predictor.store)),
        (PREDICTOR_OPTIMIZER, serde_json::to_vec(&trainer.predictor.opt)?),
        (STATE, serde_json::to_vec(&trainer.state)?),
    ];
    let manifest = Manifest {
        version: VERSION,
        step: trainer.state.steps,
        sections: sections
            .iter()
            .map(|(n, b)| SectionEntry {
                name: n.to_string(),
                bytes: b.len() as u64,
            })
            .collect(),
    };
    let manifest = serde_json::to_vec(&manifest)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    for (_, b) in sections {
        out.extend_from_slice(&(b.len() as u64).to_le_bytes());
        out.extend_from_slice(&b);
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8).ok() != Some(&MAGIC[..]) {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let len = r.u32()? as usize;
    let manifest: Manifest = serde_json::from_slice(r.take(len)?)?;
    let mut found = std::collections::HashMap::new();
    for entry in &manifest.sections {
        let n = r.u64()?;
        if n != entry.bytes {
            return Err(Error::Checkpoint(format!("section {} length disagrees with manifest", entry.name)));
        }
        found.insert(entry.name.as_str(), r.take(n as usize)?);
    }
    if !r.done() {
        return Err(Error::Checkpoint("trailing bytes after last section".into()));
    }
    let get = |name: &str| {
        found
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing section {name}")))
    };
    let mut config = RunConfig::default();
    let text = std::str::from_utf8(get(CONFIG)?).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
    config.apply_text(text)?;
    Ok(Checkpoint {
        config,
        model: decode_store(get(MODEL)?)?,
        optimizer: serde_json::from_slice(get(OPTIMIZER)?)?,
        predictor: decode_store(get(PREDICTOR)?)?,
        predictor_optimizer: serde_json::from_slice(get(PREDICTOR_OPTIMIZER)?)?,
        state: serde_json::from_slice(get(STATE)?)?,
        manifest,
    })
}

pub fn save(path: &Path, config: &RunConfig, trainer: &Trainer) -> Result<()> {
    let bytes = to_bytes(config, trainer)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

impl Checkpoint {
    /// Rebuilds the trainer exactly as it was saved.
    pub fn restore(&self) -> Result<Trainer> {
        let c = &self.config;
        let mut t = Trainer::new(c.env_config(), c.encoder.clone(), c.train.clone(), c.mi.clone())?;
        load_params(&mut t.model.store, &self.model)?;
        self.optimizer.check_compatible(&t.model.store)?;
        t.opt = self.optimizer.clone();
        load_params(&mut t.predictor.store, &self.predictor)?;
        self.predictor_optimizer.check_compatible(&t.predictor.store)?;
        t.predictor.opt = self.predictor_optimizer.clone();
        if self.state.envs.len() != c.train.num_envs || self.state.noise.len() != c.train.num_envs {
            return Err(Error::Checkpoint("run state does not match train.num_envs".into()));
        }
        t.state = self.state.clone();
        Ok(t)
    }

    /// Initialises a fresh trainer's encoder, policy and predictor from this
    /// checkpoint; optimizer and run state stay fresh.
    pub fn transfer_into(&self, trainer: &mut Trainer) -> Result<()> {
        load_params(&mut trainer.model.store, &self.model)?;
        load_params(&mut trainer.predictor.store, &self.predictor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn small_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.train.n_steps = 3;
        c.train.num_envs = 2;
        c.encoder = EncoderConfig {
            d_t: 8,
            d_e: 8,
            d_c: 4,
            d_k: 8,
            gru_hidden: 8,
            ..Default::default()
        };
        c
    }

    fn trainer(c: &RunConfig) -> Trainer {
        Trainer::new(c.env_config(), c.encoder.clone(), c.train.clone(), c.mi.clone()).unwrap()
    }

    #[test]
    fn round_trip_restores_everything() {
        let c = small_config();
        let mut t = trainer(&c);
        t.train_step().unwrap();
        let ck = from_bytes(&to_bytes(&c, &t).unwrap()).unwrap();
        assert_eq!(ck.config, c);
        let mut u = ck.restore().unwrap();
        for (a, b) in t.model.store.iter().zip(u.model.store.iter()) {
            assert_eq!(a.value, b.value);
        }
        assert_eq!(t.state, u.state);
        assert_eq!(t.train_step().unwrap(), u.train_step().unwrap());
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let c = small_config();
        let t = trainer(&c);
        let bytes = to_bytes(&c, &t).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut bad = bytes;
        bad[8] = 99;
        assert!(matches!(from_bytes(&bad), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn shape_mismatch_is_a_migration_error() {
        let c = small_config();
        let ck = from_bytes(&to_bytes(&c, &trainer(&c)).unwrap()).unwrap();
        let mut other = small_config();
        other.encoder.d_c = 6;
        let mut t = trainer(&other);
        assert!(matches!(ck.transfer_into(&mut t), Err(Error::Migration(_))));
    }
}
