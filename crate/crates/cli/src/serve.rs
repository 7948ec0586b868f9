use std::io::Write;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::Args;
use converse_core::checkpoint;
use converse_service::{AppState, Registry};

use crate::{setup, Common};

pub const CATALOG_ID: &str = "default";

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Checkpoint to load; repeatable. Its id is the file stem.
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Serve the web client's static assets from this directory.
    #[arg(long)]
    pub ui: Option<PathBuf>,
    /// Minutes before an untouched session is dropped.
    #[arg(long, default_value_t = 30)]
    pub idle_minutes: u64,
    /// Catalog file, overriding the config.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
}

pub fn run(common: &Common, args: ServeArgs) -> Result<()> {
    let cfg = setup::resolve(common)?;
    let split = setup::split(&cfg, args.catalog.as_deref())?;
    let mut registry = Registry::new();
    registry.add_catalog(CATALOG_ID, split.train.clone());
    for path in &args.checkpoints {
        let id = path.file_stem().and_then(|s| s.to_str()).context("checkpoint path has no file stem")?.to_string();
        let l = checkpoint::load(path, &split.train).with_context(|| format!("loading checkpoint {}", path.display()))?;
        registry.add_checkpoint(id, CATALOG_ID, l.manifest, l.agent, l.params)?;
    }
    if let Some(dir) = &args.ui {
        if !dir.is_dir() {
            bail!("--ui {} is not a directory", dir.display());
        }
    }
    let app = AppState::new(registry, cfg.episode.clone(), Duration::from_secs(args.idle_minutes * 60));
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&args.addr).await.with_context(|| format!("binding {}", args.addr))?;
        println!("listening on http://{}", listener.local_addr()?);
        std::io::stdout().flush()?;
        converse_service::serve(app, listener, args.ui.clone()).await?;
        Ok(())
    })
}
