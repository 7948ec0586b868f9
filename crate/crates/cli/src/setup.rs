//! Config resolution and catalog/model loading shared by the subcommands.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use converse_core::agent::Agent;
use converse_core::catalog::{generate_synthetic, load_catalog, split_interactions, Catalog, Split};
use converse_core::checkpoint::{self, Manifest};
use converse_core::config::RunConfig;
use converse_core::params::ParamSet;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::Common;

/// Loads the config file (or defaults) and applies the common flags.
pub fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

pub fn catalog(cfg: &RunConfig, override_path: Option<&Path>) -> Result<Catalog> {
    match override_path.or(cfg.catalog.path.as_deref()) {
        Some(p) => load_catalog(p).with_context(|| format!("loading catalog {}", p.display())),
        None => generate_synthetic(&cfg.catalog.synthetic).context("generating the synthetic catalog"),
    }
}

pub fn split(cfg: &RunConfig, override_path: Option<&Path>) -> Result<Split> {
    Ok(split_interactions(&catalog(cfg, override_path)?, cfg.split_seed))
}

pub struct Model {
    pub manifest: Option<Manifest>,
    pub agent: Agent,
    pub params: ParamSet,
}

/// Loads a checkpoint bound to `train`, or initializes fresh parameters from `seed`.
pub fn model(cfg: &RunConfig, train: &Catalog, checkpoint: Option<&Path>, seed: u64) -> Result<Model> {
    match checkpoint {
        Some(p) => {
            let l = checkpoint::load(p, train).with_context(|| format!("loading checkpoint {}", p.display()))?;
            Ok(Model { manifest: Some(l.manifest), agent: l.agent, params: l.params })
        }
        None => {
            let mut params = ParamSet::default();
            let agent = Agent::register(&mut params, &cfg.encoder, train.entity_index(), cfg.episode.t_max + 1, &mut ChaCha8Rng::seed_from_u64(seed));
            Ok(Model { manifest: None, agent, params })
        }
    }
}

pub fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    Ok(cfg.out.clone())
}

pub fn parse_list<T: std::str::FromStr>(text: &str) -> Result<Vec<T>> {
    let items: Result<Vec<T>, _> = text.split(',').map(|s| s.trim().parse()).collect();
    match items {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => bail!("bad list {text:?}"),
    }
}
