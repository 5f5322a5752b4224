//! Binary checkpoint format.
//!
//! Layout: magic `SEGADAPT`, format version (u32 LE), header length (u64 LE),
//! JSON header, little-endian `f32` payload for every tensor in header order,
//! and a trailing SHA-256 of everything before it. All persisted state is
//! kept at `f32` precision, so a round trip is lossless.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversary::DomainParams;
use crate::config::Phase;
use crate::error::{Error, Result};
use crate::model::{ArchConfig, ModelParams};
use crate::optim::Sgd;
use crate::params::ParamSet;
use crate::trainer::TrainState;

const MAGIC: &[u8; 8] = b"SEGADAPT";
const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config_hash: String,
    pub seed: u64,
    pub phase: Phase,
    pub epoch: usize,
    pub step: u64,
    pub arch: ArchConfig,
    pub domain_hidden: usize,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub seed: u64,
    pub state: TrainState,
}

const GROUPS: [&str; 4] = ["model", "domain", "model_momentum", "domain_momentum"];

fn groups(state: &TrainState) -> [&ParamSet; 4] {
    [
        &state.params.set,
        &state.dparams.set,
        state.model_opt.velocity(),
        state.domain_opt.velocity(),
    ]
}

/// Serialises a checkpoint to bytes.
pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let s = &ckpt.state;
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (group, set) in GROUPS.iter().zip(groups(s)) {
        for t in set.tensors() {
            tensors.push(TensorEntry {
                name: format!("{group}/{}", t.name),
                shape: t.shape.clone(),
            });
            for &v in &t.data {
                let f = v as f32;
                if f as f64 != v {
                    return Err(Error::Checkpoint(format!(
                        "{group}/{} holds a value not representable as f32",
                        t.name
                    )));
                }
                payload.extend_from_slice(&f.to_le_bytes());
            }
        }
    }
    let header = CheckpointHeader {
        config_hash: ckpt.config_hash.clone(),
        seed: ckpt.seed,
        phase: s.phase,
        epoch: s.epoch,
        step: s.step,
        arch: s.params.arch.clone(),
        domain_hidden: s.dparams.hidden,
        tensors,
    };
    let header = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(20 + header.len() + payload.len() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn fill(set: &mut ParamSet, group: &str, entries: &[TensorEntry], values: &mut impl Iterator<Item = f64>) -> Result<()> {
    let expected: Vec<_> = set.tensors().iter().map(|t| (format!("{group}/{}", t.name), t.shape.clone())).collect();
    if expected.len() != entries.len() {
        return Err(corrupt(format!("{group}: tensor count mismatch")));
    }
    for ((name, shape), e) in expected.iter().zip(entries) {
        if *name != e.name || *shape != e.shape {
            return Err(corrupt(format!("unexpected tensor {} {:?}", e.name, e.shape)));
        }
    }
    for t in set.tensors_mut() {
        for v in t.data.iter_mut() {
            *v = values.next().ok_or_else(|| corrupt("payload too short"))?;
        }
    }
    Ok(())
}

/// Parses bytes produced by [`encode`], verifying magic, version and digest.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 20 + DIGEST_LEN || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("digest mismatch: file is truncated or corrupted"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let rest = &body[20..];
    if hlen > rest.len() {
        return Err(corrupt("header length exceeds file"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&rest[..hlen]).map_err(|e| corrupt(format!("bad header: {e}")))?;
    let payload = &rest[hlen..];
    let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if payload.len() != total * 4 {
        return Err(corrupt("payload size does not match header"));
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);

    let mut params = ModelParams::zeros(&header.arch)?;
    let mut dparams = DomainParams::zeros(header.arch.feature_channels(), header.domain_hidden);
    let mut model_vel = params.set.zeros_like();
    let mut domain_vel = dparams.set.zeros_like();
    let mut entries = header.tensors.as_slice();
    for (group, set) in GROUPS.iter().zip([
        &mut params.set,
        &mut dparams.set,
        &mut model_vel,
        &mut domain_vel,
    ]) {
        let n = set.tensors().len();
        if entries.len() < n {
            return Err(corrupt("header lists too few tensors"));
        }
        fill(set, group, &entries[..n], &mut values)?;
        entries = &entries[n..];
    }
    if !entries.is_empty() {
        return Err(corrupt("header lists extra tensors"));
    }
    if !(params.set.is_finite() && dparams.set.is_finite()) {
        return Err(corrupt("non-finite parameter values"));
    }
    Ok(Checkpoint {
        config_hash: header.config_hash,
        seed: header.seed,
        state: TrainState {
            params,
            dparams,
            model_opt: Sgd::with_velocity(model_vel, 0.0, 0.0),
            domain_opt: Sgd::with_velocity(domain_vel, 0.0, 0.0),
            phase: header.phase,
            epoch: header.epoch,
            step: header.step,
        },
    })
}

/// Writes atomically: the bytes go to a sibling temporary file which is
/// then renamed over `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ckpt)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Loads a checkpoint for resuming a run, refusing one written under a
/// different configuration.
pub fn load_for_resume(path: &Path, config_hash: &str) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.config_hash != config_hash {
        return Err(Error::Checkpoint(format!(
            "{} was written under config {} but the current config hashes to {}; \
             resuming would mix two different runs",
            path.display(),
            ckpt.config_hash,
            config_hash
        )));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::model::forward_scores;
    use crate::testutil::{rand_image, rng, tiny_arch};

    fn sample() -> Checkpoint {
        let mut cfg = TrainConfig::new(3);
        cfg.arch = tiny_arch(3);
        let mut state = TrainState::init(&cfg).unwrap();
        state.phase = Phase::Ga;
        state.epoch = 2;
        state.step = 17;
        let g = state.params.set.clone();
        state.model_opt.lr = 0.1;
        state.model_opt.momentum = 0.9;
        state.model_opt.step(&mut state.params.set, &g).unwrap();
        Checkpoint {
            config_hash: cfg.hash(),
            seed: 3,
            state,
        }
    }

    #[test]
    fn round_trip_is_lossless() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b.ckpt");
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config_hash, ck.config_hash);
        assert_eq!(back.seed, 3);
        assert_eq!(back.state.params, ck.state.params);
        assert_eq!(back.state.dparams, ck.state.dparams);
        assert_eq!(back.state.model_opt.velocity(), ck.state.model_opt.velocity());
        assert_eq!((back.state.phase, back.state.epoch, back.state.step), (Phase::Ga, 2, 17));
        let im = rand_image(&mut rng(0), 8, 8);
        let a = forward_scores(&ck.state.params, &im).unwrap();
        let b = forward_scores(&back.state.params, &im).unwrap();
        assert!(a.tensor().data.iter().zip(&b.tensor().data).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(encode(&back).unwrap(), encode(&ck).unwrap());
    }

    #[test]
    fn corrupted_bytes_are_rejected() {
        let bytes = encode(&sample()).unwrap();
        for i in [0, 9, 30, bytes.len() / 2, bytes.len() - 1] {
            let mut b = bytes.clone();
            b[i] ^= 0x40;
            assert!(decode(&b).is_err(), "flipped byte {i}");
        }
        assert!(decode(&bytes[..bytes.len() - 5]).is_err());
        assert!(decode(&[]).is_err());
    }

    #[test]
    fn failed_load_leaves_previous_file_intact() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_checkpoint(&ck, &path).unwrap();
        let good = std::fs::read(&path).unwrap();
        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, &good[..100]).unwrap();
        let e = load_checkpoint(&bad).unwrap_err().to_string();
        assert!(e.contains("bad.ckpt"), "{e}");
        assert_eq!(std::fs::read(&path).unwrap(), good);
        assert!(!dir.path().join("x.ckpt.tmp").exists());
    }

    #[test]
    fn resume_refuses_a_different_config() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_checkpoint(&ck, &path).unwrap();
        assert!(load_for_resume(&path, &ck.config_hash).is_ok());
        let e = load_for_resume(&path, "deadbeef").unwrap_err().to_string();
        assert!(e.contains("deadbeef") && e.contains(&ck.config_hash));
    }

    #[test]
    fn values_beyond_f32_precision_are_refused() {
        let mut ck = sample();
        ck.state.params.set.set_value_at(0, 0.1);
        assert!(encode(&ck).is_err());
    }
}
