//! Versioned binary checkpoint container: magic, version, a JSON header
//! (seed, epoch, step, config, parameter manifest), then raw little-endian
//! tensor data for parameters and optimizer moments.

use super::config::TrainConfig;
use super::step::TrainState;
use crate::error::{CosegError, Result};
use crate::scalar::Scalar;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"COSEGCK\0";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    artifact_version: String,
    scalar: String,
    seed: u64,
    epoch: u64,
    global_step: u64,
    optimizer_t: u64,
    config_hash: String,
    config_toml: String,
    params: Vec<ParamInfo>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamInfo {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint<F: Scalar>(state: &TrainState<F>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| CosegError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| CosegError::io(path, e);

    let header = Header {
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        scalar: F::NAME.to_string(),
        seed: state.cfg.seed,
        epoch: state.epoch,
        global_step: state.global_step,
        optimizer_t: state.optimizer.t,
        config_hash: state.cfg.config_hash(),
        config_toml: state.cfg.to_toml(),
        params: state
            .store
            .iter()
            .map(|(id, t)| ParamInfo {
                name: state.store.name(id).to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| CosegError::data(path, format!("header encode: {e}")))?;

    w.write_all(MAGIC).map_err(io_err)?;
    w.write_u32::<LittleEndian>(VERSION).map_err(io_err)?;
    w.write_u32::<LittleEndian>(header_bytes.len() as u32)
        .map_err(io_err)?;
    w.write_all(&header_bytes).map_err(io_err)?;

    let write_tensor = |w: &mut BufWriter<std::fs::File>,
                        t: &ndarray::ArrayD<F>|
     -> std::io::Result<()> {
        for v in t.iter() {
            w.write_f64::<LittleEndian>(v.as_f64())?;
        }
        Ok(())
    };
    for (_, t) in state.store.iter() {
        write_tensor(&mut w, t).map_err(io_err)?;
    }
    for m in &state.optimizer.m {
        write_tensor(&mut w, m).map_err(io_err)?;
    }
    for v in &state.optimizer.v {
        write_tensor(&mut w, v).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<TrainState<F>> {
    let file = std::fs::File::open(path).map_err(|e| CosegError::io(path, e))?;
    let mut r = BufReader::new(file);
    let io_err = |e: std::io::Error| CosegError::io(path, e);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(CosegError::CheckpointVersion {
            path: path.to_path_buf(),
            found: 0,
            expected: VERSION,
        });
    }
    let version = r.read_u32::<LittleEndian>().map_err(io_err)?;
    if version != VERSION {
        return Err(CosegError::CheckpointVersion {
            path: path.to_path_buf(),
            found: version,
            expected: VERSION,
        });
    }
    let header_len = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(io_err)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| CosegError::data(path, format!("header decode: {e}")))?;
    if header.scalar != F::NAME {
        return Err(CosegError::Config(format!(
            "checkpoint stores {} parameters but this run uses {}",
            header.scalar,
            F::NAME
        )));
    }

    let cfg = TrainConfig::from_toml(&header.config_toml)?;
    let mut state = TrainState::<F>::new(cfg)?;
    if state.store.len() != header.params.len() {
        return Err(CosegError::data(
            path,
            format!(
                "checkpoint has {} tensors, model expects {}",
                header.params.len(),
                state.store.len()
            ),
        ));
    }

    let read_into = |r: &mut BufReader<std::fs::File>,
                     t: &mut ndarray::ArrayD<F>|
     -> std::io::Result<()> {
        for v in t.iter_mut() {
            *v = F::of_f64(r.read_f64::<LittleEndian>()?);
        }
        Ok(())
    };
    for i in 0..header.params.len() {
        let id = crate::autodiff::ParamId(i);
        let expect = &header.params[i];
        if state.store.name(id) != expect.name
            || state.store.value(id).shape() != expect.shape.as_slice()
        {
            return Err(CosegError::data(
                path,
                format!("parameter {} does not match the rebuilt model", expect.name),
            ));
        }
        read_into(&mut r, state.store.value_mut(id)).map_err(io_err)?;
    }
    for m in &mut state.optimizer.m {
        read_into(&mut r, m).map_err(io_err)?;
    }
    for v in &mut state.optimizer.v {
        read_into(&mut r, v).map_err(io_err)?;
    }
    state.optimizer.t = header.optimizer_t;
    state.epoch = header.epoch;
    state.global_step = header.global_step;
    Ok(state)
}

/// Peek at a checkpoint's recorded seed/epoch/hash without rebuilding it.
pub fn checkpoint_summary(path: &Path) -> Result<(u64, u64, String)> {
    let file = std::fs::File::open(path).map_err(|e| CosegError::io(path, e))?;
    let mut r = BufReader::new(file);
    let io_err = |e: std::io::Error| CosegError::io(path, e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    let version = r.read_u32::<LittleEndian>().map_err(io_err)?;
    if &magic != MAGIC || version != VERSION {
        return Err(CosegError::CheckpointVersion {
            path: path.to_path_buf(),
            found: if &magic == MAGIC { version } else { 0 },
            expected: VERSION,
        });
    }
    let header_len = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(io_err)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| CosegError::data(path, format!("header decode: {e}")))?;
    Ok((header.seed, header.epoch, header.config_hash))
}
