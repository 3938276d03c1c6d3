use std::path::PathBuf;

use clap::Args;
use inrmotion::motion::{generate_synthetic_dataset, Family, FamilyParams, FeatureStats, Skeleton};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io;

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub family: Option<Family>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// `stats.json` of a generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub count: usize,
    pub seed: u64,
    pub params: FamilyParams,
    pub features: FeatureStats,
}

pub fn gen_data(mut cfg: RunConfig, a: GenDataArgs) -> CliResult<()> {
    if let Some(f) = a.family {
        cfg.data.motion.family = f;
    }
    if let Some(c) = a.count {
        cfg.data.count = c;
    }
    if let Some(s) = a.seed {
        cfg.seeds.data = s;
    }
    if cfg.data.count == 0 {
        return Err(CliError::Config("count must be at least 1".into()));
    }
    let motions = generate_synthetic_dataset(&cfg.data.motion, cfg.data.count, cfg.seeds.data)?;
    let features = FeatureStats::compute(&motions)?;
    cfg.echo(&a.out)?;
    io::write_motions(&a.out, &motions, &Skeleton::humanoid())?;
    let stats = DatasetStats {
        count: motions.len(),
        seed: cfg.seeds.data,
        params: cfg.data.motion.clone(),
        features,
    };
    io::write_json(&a.out.join("stats.json"), &stats)?;
    println!("wrote {} motions to {}", motions.len(), a.out.display());
    Ok(())
}
