use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use clap::Args;
use inrmotion::inrvae::InrVae;
use inrmotion::metrics::{
    evaluate_set, foot_skating_ratio, trajectory_error, EvalInputs, EvalReport, EvalRow, JerkStats,
};
use inrmotion::motion::{KeyframeSpec, MotionSequence, Skeleton};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io;

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Generated motions (a `sample` output directory or any motion directory).
    #[arg(long)]
    pub gen_dir: PathBuf,
    /// Reference motions.
    #[arg(long)]
    pub ref_dir: PathBuf,
    /// VAE whose encoder provides the latent-FID and diversity features.
    #[arg(long)]
    pub vae: Option<PathBuf>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

/// A generated set with its conditions, ready to score.
pub struct EvalSet {
    pub generated: Vec<MotionSequence>,
    pub conditions: Vec<Option<KeyframeSpec>>,
    pub trajectories: Vec<Option<Vec<[f64; 2]>>>,
}

/// Score `set` once per repeat. Repeat `r` re-draws the stochastic parts of
/// evaluation (diversity pairs) with seed `seed + r`; all other metrics are
/// deterministic functions of the set.
pub fn evaluate_repeats(
    set: &EvalSet,
    reference: &[MotionSequence],
    vae: Option<&InrVae>,
    diversity_pairs: usize,
    repeats: usize,
    seed: u64,
    jobs: usize,
) -> CliResult<(Vec<u64>, Vec<EvalRow>)> {
    let skeleton = Skeleton::humanoid();
    let jerk = JerkStats::from_dataset(reference, &skeleton)?;
    let traj: Vec<f64> = set
        .generated
        .iter()
        .zip(&set.trajectories)
        .filter_map(|(g, p)| p.as_ref().map(|p| trajectory_error(g, p)))
        .collect::<Result<_, _>>()?;
    let seeds: Vec<u64> = (0..repeats as u64).map(|r| seed.wrapping_add(r)).collect();
    let rows = io::par_map(&seeds, jobs, |_, &s| {
        let inp = EvalInputs {
            generated: &set.generated,
            conditions: &set.conditions,
            reference,
            skeleton: &skeleton,
            jerk: &jerk,
            vae,
            diversity_pairs,
        };
        let mut row = evaluate_set(&inp, s)?;
        if !traj.is_empty() {
            row.insert("trajectory_error".into(), traj.iter().sum::<f64>() / traj.len() as f64);
        }
        Ok(row)
    })?;
    Ok((seeds, rows))
}

/// Real-data values for "closer is better" metrics.
pub fn reference_values(reference: &[MotionSequence]) -> CliResult<BTreeMap<String, f64>> {
    let skeleton = Skeleton::humanoid();
    let jerk = JerkStats::from_dataset(reference, &skeleton)?;
    let skate = reference
        .iter()
        .map(|m| foot_skating_ratio(m, &skeleton))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BTreeMap::from([
        ("peak_jerk".to_string(), jerk.peak_reference),
        (
            "foot_skating".to_string(),
            skate.iter().sum::<f64>() / skate.len() as f64,
        ),
    ]))
}

pub fn evaluate_cmd(mut cfg: RunConfig, a: EvaluateArgs) -> CliResult<()> {
    if let Some(r) = a.repeats {
        cfg.eval.repeats = r;
    }
    if let Some(s) = a.seed {
        cfg.seeds.eval = s;
    }
    if cfg.eval.repeats < 2 {
        return Err(CliError::Config("repeats must be at least 2".into()));
    }
    let (generated, skeleton) = io::read_motion_dir(&a.gen_dir)?;
    let (reference, _) = io::read_motion_dir(&a.ref_dir)?;
    let n = generated.len();
    let set = EvalSet {
        conditions: io::read_conditions(&a.gen_dir, n, skeleton.joint_count())?,
        trajectories: io::read_trajectories(&a.gen_dir, n)?,
        generated,
    };
    let vae = a.vae.as_deref().map(io::load_vae).transpose()?;
    let (seeds, rows) = evaluate_repeats(
        &set,
        &reference,
        vae.as_ref(),
        cfg.eval.diversity_pairs,
        cfg.eval.repeats,
        cfg.seeds.eval,
        a.jobs,
    )?;
    let meta = json!({
        "gen_dir": a.gen_dir,
        "ref_dir": a.ref_dir,
        "vae": a.vae,
        "generated": n,
        "reference": reference.len(),
        "eval": cfg.eval,
        "version": env!("CARGO_PKG_VERSION"),
    });
    let report = EvalReport::new(meta, seeds, rows, reference_values(&reference)?)?;
    cfg.echo(&a.out)?;
    io::write_json(&a.out.join("report.json"), &report)?;
    fs::write(a.out.join("repeats.csv"), report.repeats_csv()?)?;
    for (k, v) in &report.summary {
        println!("{k:>18}: {:.6} ± {:.6}", v.mean, v.std);
    }
    Ok(())
}
