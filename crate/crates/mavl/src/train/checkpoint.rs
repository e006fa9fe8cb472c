//! Checkpoint format: JSON manifest + flat little-endian f64 payload.
//!
//! Layout: 8-byte magic, u64 LE manifest length, manifest JSON, payload.
//! The manifest records names, shapes and offsets (in f64 units) for every
//! tensor section (online parameters, momentum shadow, Adam moments), the
//! full config echo, the step/epoch counters, and the RNG state, so a loaded
//! run continues bit-identically.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{ModelParams, MomentumShadow};
use crate::train::config::FileConfig;
use crate::train::optimizer::AdamState;
use crate::train::trainer::TrainState;

use super::TrainError;

const MAGIC: &[u8; 8] = b"MAVLCKP1";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f64 units.
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct RngSnapshot {
    seed: Vec<u8>,
    word_pos: u128,
    stream: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: FileConfig,
    step: u64,
    epoch: usize,
    adam_step: u64,
    rng: RngSnapshot,
    payload_len: u64,
    tensors: Vec<TensorEntry>,
}

fn corrupt(msg: impl Into<String>) -> TrainError {
    TrainError::Corrupt(msg.into())
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<(), TrainError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let online = state.params.named_params();
    let shadow = state.shadow.named_tensors();

    let mut entries = Vec::new();
    let mut payload: Vec<f64> = Vec::new();
    let push = |name: String, shape: Vec<usize>, data: &[f64],
                    entries: &mut Vec<TensorEntry>,
                    payload: &mut Vec<f64>| {
        entries.push(TensorEntry {
            name,
            shape,
            offset: payload.len() as u64,
            len: data.len() as u64,
        });
        payload.extend_from_slice(data);
    };
    for (name, t) in &online {
        push(format!("online.{name}"), t.shape().to_vec(), &t.data(), &mut entries, &mut payload);
    }
    for (name, t) in &shadow {
        push(format!("shadow.{name}"), t.shape().to_vec(), &t.data(), &mut entries, &mut payload);
    }
    for (i, (name, _)) in online.iter().enumerate() {
        push(format!("adam_m.{name}"), vec![state.opt.m[i].len()], &state.opt.m[i], &mut entries, &mut payload);
        push(format!("adam_v.{name}"), vec![state.opt.v[i].len()], &state.opt.v[i], &mut entries, &mut payload);
    }

    let manifest = Manifest {
        version: VERSION,
        config: state.cfg.clone(),
        step: state.step,
        epoch: state.epoch,
        adam_step: state.opt.step,
        rng: RngSnapshot {
            seed: state.rng.get_seed().to_vec(),
            word_pos: state.rng.get_word_pos(),
            stream: state.rng.get_stream(),
        },
        payload_len: payload.len() as u64,
        tensors: entries,
    };
    let manifest_json = serde_json::to_vec(&manifest).map_err(|e| corrupt(e.to_string()))?;

    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(MAGIC)?;
        f.write_all(&(manifest_json.len() as u64).to_le_bytes())?;
        f.write_all(&manifest_json)?;
        for v in &payload {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState, TrainError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|_| corrupt("file too short for magic"))?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic; not a checkpoint file"));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)
        .map_err(|_| corrupt("file too short for manifest length"))?;
    let mlen = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_json = vec![0u8; mlen];
    f.read_exact(&mut manifest_json)
        .map_err(|_| corrupt("truncated manifest"))?;
    let manifest: Manifest =
        serde_json::from_slice(&manifest_json).map_err(|e| corrupt(format!("manifest parse: {e}")))?;
    if manifest.version != VERSION {
        return Err(corrupt(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }

    let mut raw = Vec::new();
    f.read_to_end(&mut raw)?;
    if raw.len() != manifest.payload_len as usize * 8 {
        return Err(corrupt(format!(
            "payload holds {} bytes, manifest expects {}",
            raw.len(),
            manifest.payload_len * 8
        )));
    }
    let payload: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let section = |name: &str| -> Result<&TensorEntry, TrainError> {
        manifest
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| corrupt(format!("missing tensor {name}")))
    };
    let slice_of = |e: &TensorEntry| -> Result<Vec<f64>, TrainError> {
        let (o, l) = (e.offset as usize, e.len as usize);
        if o + l > payload.len() {
            return Err(corrupt(format!("tensor {} overruns payload", e.name)));
        }
        Ok(payload[o..o + l].to_vec())
    };

    // rebuild parameter trees at the checkpoint's architecture, then fill
    let mut scratch_rng = ChaCha8Rng::seed_from_u64(0);
    let params = ModelParams::init(&manifest.config.model, &mut scratch_rng)
        .map_err(|e| corrupt(e.to_string()))?;
    let shadow = MomentumShadow::from_online(&params);
    for (name, t) in params.named_params() {
        let e = section(&format!("online.{name}"))?;
        if e.shape != t.shape() {
            return Err(corrupt(format!("shape mismatch on online.{name}")));
        }
        t.set_data(&slice_of(e)?).map_err(|er| corrupt(er.to_string()))?;
    }
    for (name, t) in shadow.named_tensors() {
        let e = section(&format!("shadow.{name}"))?;
        if e.shape != t.shape() {
            return Err(corrupt(format!("shape mismatch on shadow.{name}")));
        }
        t.set_data(&slice_of(e)?).map_err(|er| corrupt(er.to_string()))?;
    }
    let registry = params.named_params();
    let mut opt = AdamState::new(&registry);
    opt.step = manifest.adam_step;
    for (i, (name, _)) in registry.iter().enumerate() {
        let em = section(&format!("adam_m.{name}"))?;
        let ev = section(&format!("adam_v.{name}"))?;
        opt.m[i] = slice_of(em)?;
        opt.v[i] = slice_of(ev)?;
        if opt.m[i].len() != registry[i].1.numel() || opt.v[i].len() != registry[i].1.numel() {
            return Err(corrupt(format!("moment size mismatch on {name}")));
        }
    }

    if manifest.rng.seed.len() != 32 {
        return Err(corrupt("rng seed must be 32 bytes"));
    }
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&manifest.rng.seed);
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(manifest.rng.stream);
    rng.set_word_pos(manifest.rng.word_pos);

    Ok(TrainState {
        cfg: manifest.config,
        params,
        shadow,
        opt,
        rng,
        step: manifest.step,
        epoch: manifest.epoch,
    })
}
