//! Binary checkpoint archive.
//!
//! Layout (little endian): magic `CVMC\x01`, `u32` manifest length, manifest
//! JSON, `u32` tensor count, then per tensor a `u16` name length, the UTF-8
//! name, a `u8` rank, `u32` dims and `f32` data in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::Agent;
use crate::catalog::Catalog;
use crate::encoder::EncoderConfig;
use crate::params::ParamSet;
use crate::tensor::Matrix;
use crate::training::Mode;

pub const MAGIC: &[u8; 5] = b"CVMC\x01";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("truncated archive")]
    Truncated,
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("checkpoint does not match: {0}")]
    Mismatch(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub d: usize,
    #[serde(rename = "K")]
    pub heads: usize,
    #[serde(rename = "L_g")]
    pub gat_layers: usize,
    #[serde(rename = "L_a")]
    pub pos_layers: usize,
    #[serde(rename = "L_n")]
    pub neg_layers: usize,
    pub seq_layers: usize,
    pub max_positions: usize,
    pub catalog_fingerprint: String,
    pub n_users: usize,
    pub n_items: usize,
    pub n_values: usize,
    pub split_seed: u64,
    pub step: usize,
    pub mode: Mode,
    pub seed: u64,
}

impl Manifest {
    pub fn new(encoder: &EncoderConfig, max_positions: usize, catalog: &Catalog, split_seed: u64, step: usize, mode: Mode, seed: u64) -> Self {
        Self {
            d: encoder.d,
            heads: encoder.heads,
            gat_layers: encoder.gat_layers,
            pos_layers: encoder.pos_layers,
            neg_layers: encoder.neg_layers,
            seq_layers: encoder.seq_layers,
            max_positions,
            catalog_fingerprint: catalog.fingerprint(),
            n_users: catalog.n_users(),
            n_items: catalog.n_items(),
            n_values: catalog.n_values(),
            split_seed,
            step,
            mode,
            seed,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            d: self.d,
            heads: self.heads,
            gat_layers: self.gat_layers,
            pos_layers: self.pos_layers,
            neg_layers: self.neg_layers,
            seq_layers: self.seq_layers,
        }
    }
}

pub fn write(w: &mut impl Write, manifest: &Manifest, params: &ParamSet) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    let json = serde_json::to_vec(manifest)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (_, name, m) in params.iter() {
        let name = name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[2u8])?;
        w.write_all(&(m.rows() as u32).to_le_bytes())?;
        w.write_all(&(m.cols() as u32).to_le_bytes())?;
        for &v in m.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N], CheckpointError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| if e.kind() == std::io::ErrorKind::UnexpectedEof { CheckpointError::Truncated } else { e.into() })?;
    Ok(buf)
}

fn take_vec(r: &mut impl Read, n: usize) -> Result<Vec<u8>, CheckpointError> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| if e.kind() == std::io::ErrorKind::UnexpectedEof { CheckpointError::Truncated } else { e.into() })?;
    Ok(buf)
}

/// Reads the manifest and every named tensor.
pub fn read(r: &mut impl Read) -> Result<(Manifest, Vec<(String, Matrix)>), CheckpointError> {
    if &take::<5>(r)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let len = u32::from_le_bytes(take(r)?) as usize;
    let manifest: Manifest = serde_json::from_slice(&take_vec(r, len)?)?;
    let count = u32::from_le_bytes(take(r)?) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = u16::from_le_bytes(take(r)?) as usize;
        let name = String::from_utf8(take_vec(r, nlen)?).map_err(|_| CheckpointError::Mismatch("tensor name is not UTF-8".into()))?;
        let rank = take::<1>(r)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(take(r)?) as usize);
        }
        let (rows, cols) = match dims.as_slice() {
            [n] => (1, *n),
            [a, b] => (*a, *b),
            _ => return Err(CheckpointError::Mismatch(format!("tensor {name} has rank {rank}"))),
        };
        let raw = take_vec(r, rows * cols * 4)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
        tensors.push((name, Matrix::from_vec(rows, cols, data)));
    }
    Ok((manifest, tensors))
}

pub fn save(path: &Path, manifest: &Manifest, params: &ParamSet) -> Result<(), CheckpointError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write(&mut f, manifest, params)?;
    f.flush()?;
    Ok(())
}

/// A checkpoint bound to the catalog it was trained on.
pub struct Loaded {
    pub manifest: Manifest,
    pub agent: Agent,
    pub params: ParamSet,
}

/// Loads an archive and rebuilds the agent for `catalog`, refusing mismatched catalogs or layouts.
pub fn load(path: &Path, catalog: &Catalog) -> Result<Loaded, CheckpointError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let (manifest, tensors) = read(&mut f)?;
    if manifest.catalog_fingerprint != catalog.fingerprint() {
        return Err(CheckpointError::Mismatch(format!(
            "catalog fingerprint {} differs from checkpoint {}",
            catalog.fingerprint(),
            manifest.catalog_fingerprint
        )));
    }
    let config = manifest.encoder_config();
    config.validate().map_err(CheckpointError::Mismatch)?;
    let mut params = ParamSet::default();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let agent = Agent::register(&mut params, &config, catalog.entity_index(), manifest.max_positions, &mut rng);
    if tensors.len() != params.len() {
        return Err(CheckpointError::Mismatch(format!("expected {} tensors, found {}", params.len(), tensors.len())));
    }
    for (name, m) in tensors {
        let id = params.id(&name).ok_or_else(|| CheckpointError::Mismatch(format!("unknown tensor {name}")))?;
        if params.get(id).shape() != m.shape() {
            return Err(CheckpointError::Mismatch(format!("tensor {name} has shape {:?}, expected {:?}", m.shape(), params.get(id).shape())));
        }
        *params.get_mut(id) = m;
    }
    Ok(Loaded { manifest, agent, params })
}
