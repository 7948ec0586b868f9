use anyhow::{Context, Result};
use clap::{error::ErrorKind, Args, CommandFactory};
use converse_core::catalog::generate_synthetic;

use crate::{setup, Cli, Common};

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub items: Option<usize>,
    #[arg(long)]
    pub types: Option<usize>,
    #[arg(long)]
    pub values_per_type: Option<usize>,
    #[arg(long)]
    pub values_per_item: Option<usize>,
    #[arg(long)]
    pub interactions: Option<usize>,
}

pub fn run(common: &Common, args: GenerateArgs) -> Result<()> {
    let Some(out) = common.out.clone() else {
        Cli::command().error(ErrorKind::MissingRequiredArgument, "generate needs --out <FILE>").exit();
    };
    let cfg = setup::resolve(&Common { out: None, ..common.clone() })?;
    let mut spec = cfg.catalog.synthetic.clone();
    if let Some(s) = common.seed {
        spec.seed = s;
    }
    spec.n_users = args.users.unwrap_or(spec.n_users);
    spec.n_items = args.items.unwrap_or(spec.n_items);
    spec.n_types = args.types.unwrap_or(spec.n_types);
    spec.n_values_per_type = args.values_per_type.unwrap_or(spec.n_values_per_type);
    spec.values_per_item = args.values_per_item.unwrap_or(spec.values_per_item);
    spec.interactions_per_user = args.interactions.unwrap_or(spec.interactions_per_user);
    let catalog = generate_synthetic(&spec)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    catalog.write(&out)?;
    println!(
        "wrote {} ({} users, {} items, {} values, {} interactions, fingerprint {})",
        out.display(),
        catalog.n_users(),
        catalog.n_items(),
        catalog.n_values(),
        catalog.interaction_count(),
        catalog.fingerprint()
    );
    Ok(())
}
