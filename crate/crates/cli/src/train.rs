use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use inrmotion::checkpoint::Checkpoint;
use inrmotion::inrvae::{evaluate_vae, InrVae, VaeLossRecord, VaeTrainer};
use inrmotion::ldm::{LdmLossRecord, LdmTrainer};
use inrmotion::motion::FeatureStats;
use inrmotion::svg::{line_chart, Series};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io::{self, CHECKPOINT_FILE, LDM_FILE, VAE_FILE};

#[derive(Debug, Args)]
pub struct TrainVaeArgs {
    /// Motion directory from `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from `<out>/checkpoint.json`.
    #[arg(long)]
    pub resume: bool,
    /// Save and stop once this many steps are done (as if interrupted).
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainLdmArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Trained VAE checkpoint.
    #[arg(long)]
    pub vae: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub stop_after: Option<usize>,
}

/// Loss curve stored alongside the weights so a resumed run writes the same CSV.
fn curve_from<T: DeserializeOwned>(ck: &Checkpoint) -> CliResult<Vec<T>> {
    match ck.metrics.get("curve") {
        Some(v) => Ok(serde_json::from_value(v.clone())?),
        None => Ok(Vec::new()),
    }
}

fn resume_checkpoint(out: &Path) -> CliResult<Checkpoint> {
    io::load_checkpoint(&out.join(CHECKPOINT_FILE), "resumable checkpoint")
}

fn save_progress<T: Serialize>(out: &Path, ck: Checkpoint, curve: &[T]) -> CliResult<()> {
    let mut ck = ck;
    ck.metrics = json!({ "curve": curve });
    ck.save(&out.join(CHECKPOINT_FILE))?;
    io::write_csv(&out.join("loss.csv"), curve)?;
    Ok(())
}

/// Drive `step` until `total` or `stop`, checkpointing every `every` steps.
/// A divergence saves the last good state before aborting.
fn drive<T: Serialize>(
    out: &Path,
    total: usize,
    stop: Option<usize>,
    every: usize,
    mut done: impl FnMut() -> usize,
    mut step: impl FnMut() -> Result<(), inrmotion::Error>,
    mut snapshot: impl FnMut() -> (Checkpoint, Vec<T>),
) -> CliResult<bool> {
    let end = stop.map_or(total, |s| s.min(total));
    while done() < end {
        if let Err(e) = step() {
            let (ck, curve) = snapshot();
            save_progress(out, ck, &curve)?;
            return Err(e.into());
        }
        let n = done();
        if every > 0 && n % every == 0 && n < end {
            let (ck, curve) = snapshot();
            save_progress(out, ck, &curve)?;
        }
    }
    let (ck, curve) = snapshot();
    save_progress(out, ck, &curve)?;
    Ok(done() >= total)
}

pub fn train_vae(cfg: RunConfig, a: TrainVaeArgs) -> CliResult<()> {
    let (data, _) = io::read_motion_dir(&a.data)?;
    cfg.vae.model.validate()?;
    cfg.echo(&a.out)?;
    let mut tr = if a.resume {
        let ck = resume_checkpoint(&a.out)?;
        let curve: Vec<VaeLossRecord> = curve_from(&ck)?;
        let mut tr = VaeTrainer::resume(&ck, &data, cfg.vae.train.clone())?;
        tr.curve = curve;
        tr
    } else {
        let vae = InrVae::new(cfg.vae.model.clone(), FeatureStats::compute(&data)?)?;
        VaeTrainer::new(vae, &data, cfg.vae.train.clone())?
    };
    let tr_cell = std::cell::RefCell::new(&mut tr);
    let finished = drive(
        &a.out,
        cfg.vae.train.steps,
        a.stop_after,
        cfg.vae.checkpoint_every,
        || tr_cell.borrow().step_index(),
        || tr_cell.borrow_mut().step().map(|_| ()),
        || {
            let t = tr_cell.borrow();
            (t.checkpoint(json!({})), t.curve.clone())
        },
    )?;
    if !finished {
        println!("stopped at step {}", tr.step_index());
        return Ok(());
    }
    let metrics = evaluate_vae(&tr.vae, &data)?;
    tr.vae
        .to_checkpoint(Some(&tr.config), serde_json::to_value(&metrics)?)
        .save(&a.out.join(VAE_FILE))?;
    let pts = |f: fn(&VaeLossRecord) -> f64| tr.curve.iter().map(|r| (r.step as f64, f(r))).collect();
    let svg = line_chart(
        "VAE training loss",
        "step",
        "loss",
        &[
            Series::new("total", pts(|r| r.loss)),
            Series::new("reconstruction", pts(|r| r.recon)),
        ],
    );
    fs::write(a.out.join("loss.svg"), svg)?;
    println!(
        "vae: recon joint error {:.4} m over {} sequences",
        metrics.recon_joint_error, metrics.sequences
    );
    Ok(())
}

pub fn train_ldm(cfg: RunConfig, a: TrainLdmArgs) -> CliResult<()> {
    let (data, _) = io::read_motion_dir(&a.data)?;
    let vae = io::load_vae(&a.vae)?;
    cfg.echo(&a.out)?;
    let mut tr = if a.resume {
        let ck = resume_checkpoint(&a.out)?;
        let curve: Vec<LdmLossRecord> = curve_from(&ck)?;
        let mut tr = LdmTrainer::resume(&ck, &vae, &data, cfg.ldm.train.clone())?;
        tr.curve = curve;
        tr
    } else {
        LdmTrainer::new(
            &vae,
            &data,
            cfg.ldm.denoiser.clone(),
            cfg.ldm.schedule.clone(),
            cfg.ldm.train.clone(),
        )?
    };
    let tr_cell = std::cell::RefCell::new(&mut tr);
    let finished = drive(
        &a.out,
        cfg.ldm.train.steps,
        a.stop_after,
        cfg.ldm.checkpoint_every,
        || tr_cell.borrow().opt.step,
        || tr_cell.borrow_mut().step().map(|_| ()),
        || {
            let t = tr_cell.borrow();
            (t.checkpoint(json!({})), t.curve.clone())
        },
    )?;
    if !finished {
        println!("stopped at step {}", tr.opt.step);
        return Ok(());
    }
    let last = tr.curve.last().map(|r| r.loss).unwrap_or(f64::NAN);
    if !last.is_finite() {
        return Err(CliError::Numeric("final loss is not finite".into()));
    }
    tr.ldm
        .to_checkpoint(Some(&tr.config), json!({ "final_loss": last }))
        .save(&a.out.join(LDM_FILE))?;
    let pts = |f: fn(&LdmLossRecord) -> f64| tr.curve.iter().map(|r| (r.step as f64, f(r))).collect();
    let svg = line_chart(
        "Denoiser training loss",
        "step",
        "loss",
        &[
            Series::new("total", pts(|r| r.loss)),
            Series::new("latent", pts(|r| r.latent)),
            Series::new("geometric", pts(|r| r.geo)),
        ],
    );
    fs::write(a.out.join("loss.svg"), svg)?;
    println!("ldm: final loss {last:.4}");
    Ok(())
}
