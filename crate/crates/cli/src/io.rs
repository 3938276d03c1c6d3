//! Artifact directories and shared helpers.
//!
//! A motion directory holds `motions/NNNNNN.json`; sample directories add
//! `keyframes/`, `trajectories/` and `meta/` with the same file stems.

use std::fs;
use std::path::{Path, PathBuf};

use inrmotion::checkpoint::Checkpoint;
use inrmotion::inrvae::InrVae;
use inrmotion::ldm::Ldm;
use inrmotion::motion::{read_keyframes, read_motion, write_motion, KeyframeSpec, MotionSequence, Skeleton};
use serde::Serialize;

use crate::error::{CliError, CliResult};

pub const MOTIONS: &str = "motions";
pub const KEYFRAMES: &str = "keyframes";
pub const TRAJECTORIES: &str = "trajectories";
pub const META: &str = "meta";
pub const VAE_FILE: &str = "vae.json";
pub const LDM_FILE: &str = "ldm.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

pub fn stem(i: usize) -> String {
    format!("{i:06}")
}

pub fn require(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(format!("{what} not found at {}", path.display())))
    }
}

/// Sorted `.json` files of `dir/sub`.
pub fn list_json(dir: &Path, sub: &str) -> CliResult<Vec<PathBuf>> {
    let d = dir.join(sub);
    require(&d, &format!("{sub} directory"))?;
    let mut files: Vec<PathBuf> = fs::read_dir(&d)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    files.sort();
    Ok(files)
}

pub fn read_motion_dir(dir: &Path) -> CliResult<(Vec<MotionSequence>, Skeleton)> {
    let files = list_json(dir, MOTIONS)?;
    if files.is_empty() {
        return Err(CliError::Missing(format!(
            "no motions in {}",
            dir.join(MOTIONS).display()
        )));
    }
    let mut skeleton = None;
    let mut out = Vec::with_capacity(files.len());
    for f in &files {
        let (m, s) = read_motion(f).map_err(|e| CliError::Core(prefix(f, e)))?;
        if skeleton.as_ref().is_some_and(|k| k != &s) {
            return Err(CliError::Config(format!(
                "{}: skeleton differs from the rest of the directory",
                f.display()
            )));
        }
        skeleton.get_or_insert(s);
        out.push(m);
    }
    Ok((out, skeleton.expect("non-empty")))
}

pub fn write_motions(dir: &Path, motions: &[MotionSequence], skeleton: &Skeleton) -> CliResult<()> {
    let d = dir.join(MOTIONS);
    fs::create_dir_all(&d)?;
    for (i, m) in motions.iter().enumerate() {
        write_motion(&d.join(format!("{}.json", stem(i))), m, skeleton)?;
    }
    Ok(())
}

/// Keyframe condition for each motion of a sample directory, where present.
pub fn read_conditions(dir: &Path, n: usize, joints: usize) -> CliResult<Vec<Option<KeyframeSpec>>> {
    (0..n)
        .map(|i| {
            let p = dir.join(KEYFRAMES).join(format!("{}.json", stem(i)));
            if p.exists() {
                Ok(Some(
                    read_keyframes(&p, joints).map_err(|e| CliError::Core(prefix(&p, e)))?,
                ))
            } else {
                Ok(None)
            }
        })
        .collect()
}

pub fn read_trajectories(dir: &Path, n: usize) -> CliResult<Vec<Option<Vec<[f64; 2]>>>> {
    (0..n)
        .map(|i| {
            let p = dir.join(TRAJECTORIES).join(format!("{}.json", stem(i)));
            if p.exists() {
                Ok(Some(serde_json::from_str(&fs::read_to_string(&p)?)?))
            } else {
                Ok(None)
            }
        })
        .collect()
}

fn prefix(path: &Path, e: inrmotion::Error) -> inrmotion::Error {
    match e {
        inrmotion::Error::Schema(m) => inrmotion::Error::Schema(format!("{}: {m}", path.display())),
        other => other,
    }
}

pub fn load_checkpoint(path: &Path, what: &str) -> CliResult<Checkpoint> {
    require(path, what)?;
    Checkpoint::load(path).map_err(|e| CliError::Core(prefix(path, e)))
}

pub fn load_vae(path: &Path) -> CliResult<InrVae> {
    Ok(InrVae::from_checkpoint(&load_checkpoint(path, "VAE checkpoint")?)?)
}

pub fn load_ldm(path: &Path) -> CliResult<Ldm> {
    Ok(Ldm::from_checkpoint(&load_checkpoint(path, "LDM checkpoint")?)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(inrmotion::Error::from)?;
    for r in rows {
        w.serialize(r).map_err(inrmotion::Error::from)?;
    }
    w.flush()?;
    Ok(())
}

/// Map `f` over `items` on up to `jobs` threads. Results keep input order and
/// the first error (by index) wins, so output is independent of `jobs`.
pub fn par_map<T: Sync, R: Send>(
    items: &[T],
    jobs: usize,
    f: impl Fn(usize, &T) -> CliResult<R> + Sync,
) -> CliResult<Vec<R>> {
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let mut slots: Vec<Option<CliResult<R>>> = (0..items.len()).map(|_| None).collect();
    let chunk = items.len().div_ceil(jobs);
    std::thread::scope(|s| {
        for (c, out) in slots.chunks_mut(chunk).enumerate() {
            let f = &f;
            s.spawn(move || {
                for (k, slot) in out.iter_mut().enumerate() {
                    let i = c * chunk + k;
                    *slot = Some(f(i, &items[i]));
                }
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every slot filled")).collect()
}
