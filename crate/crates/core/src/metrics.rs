//! Evaluation metrics and the batch report.
//!
//! Joint-space metrics run forward kinematics on the generated rotations and
//! root transform. Distribution metrics compare encoder means of the frozen
//! VAE, so their values are only comparable within this repository.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::inrvae::InrVae;
use crate::motion::{forward_kinematics, KeyPose, KeyframeSpec, MotionSequence, Skeleton};
use crate::Error;

pub const FOOT_HEIGHT: f64 = 0.05;
pub const FOOT_SPEED: f64 = 0.2;
/// Diagonal loading of covariances estimated from fewer samples than dimensions.
pub const FID_SHRINKAGE: f64 = 1e-6;

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// World joint positions `T x J` by forward kinematics.
pub fn world_positions(m: &MotionSequence, skeleton: &Skeleton) -> Result<Vec<Vec<[f64; 3]>>, Error> {
    (0..m.len())
        .map(|t| forward_kinematics(skeleton, &m.joint_rot[t], &m.root_orient[t], &m.root_trans[t]))
        .collect()
}

fn keypose_world(p: &KeyPose, skeleton: &Skeleton) -> Result<Vec<[f64; 3]>, Error> {
    forward_kinematics(skeleton, &p.joint_rot, &p.root_orient, &p.root_trans)
}

/// Mean joint distance (meters) between `gen` and the keyframes.
pub fn keyframe_error(gen: &MotionSequence, y: &KeyframeSpec, skeleton: &Skeleton) -> Result<f64, Error> {
    if y.count() == 0 {
        return Err(Error::Keyframes("keyframe error needs at least one keyframe".into()));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for p in &y.poses {
        if p.index >= gen.len() {
            return Err(Error::Keyframes(format!(
                "keyframe {} beyond {} generated frames",
                p.index,
                gen.len()
            )));
        }
        let g = forward_kinematics(
            skeleton,
            &gen.joint_rot[p.index],
            &gen.root_orient[p.index],
            &gen.root_trans[p.index],
        )?;
        for (a, b) in g.iter().zip(keypose_world(p, skeleton)?) {
            sum += dist(a, &b);
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

/// Per-frame horizontal speed of each foot, central differences.
fn foot_speeds(world: &[Vec<[f64; 3]>], feet: &[usize], fps: f64) -> Vec<Vec<f64>> {
    let n = world.len();
    (0..n)
        .map(|t| {
            let (a, b) = (t.saturating_sub(1), (t + 1).min(n - 1));
            let span = (b - a).max(1) as f64 / fps;
            feet.iter()
                .map(|&f| {
                    let dx = world[b][f][0] - world[a][f][0];
                    let dz = world[b][f][2] - world[a][f][2];
                    (dx * dx + dz * dz).sqrt() / span
                })
                .collect()
        })
        .collect()
}

/// Fraction of frames where both feet are within 5 cm of the ground and a
/// foot moves horizontally faster than 0.2 m/s.
pub fn foot_skating_ratio(gen: &MotionSequence, skeleton: &Skeleton) -> Result<f64, Error> {
    if gen.len() < 2 {
        return Err(Error::InvalidParam("foot skating needs at least 2 frames".into()));
    }
    let world = world_positions(gen, skeleton)?;
    let feet = &skeleton.foot_joints;
    let speeds = foot_speeds(&world, feet, gen.fps);
    let count = (0..gen.len())
        .filter(|&t| feet.iter().all(|&f| world[t][f][1] < FOOT_HEIGHT) && speeds[t].iter().any(|&v| v > FOOT_SPEED))
        .count();
    Ok(count as f64 / gen.len() as f64)
}

/// Jerk magnitude per interior frame and joint, `(T - 4) x J`, from world positions.
pub fn jerk_magnitudes(world: &[Vec<[f64; 3]>], fps: f64) -> Result<Vec<Vec<f64>>, Error> {
    if world.len() < 5 {
        return Err(Error::InvalidParam(format!(
            "jerk needs at least 5 frames, got {}",
            world.len()
        )));
    }
    let f3 = fps.powi(3);
    Ok((2..world.len() - 2)
        .map(|t| {
            (0..world[t].len())
                .map(|j| {
                    let c = |k: usize| {
                        (world[t + 2][j][k] - 2.0 * world[t + 1][j][k] + 2.0 * world[t - 1][j][k] - world[t - 2][j][k])
                            * 0.5
                            * f3
                    };
                    (c(0).powi(2) + c(1).powi(2) + c(2).powi(2)).sqrt()
                })
                .collect()
        })
        .collect())
}

/// Dataset-average jerk profile and the real-data peak jerk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JerkStats {
    /// Mean jerk magnitude per interior frame and joint.
    pub profile: Vec<Vec<f64>>,
    /// Mean over motions of each motion's peak jerk.
    pub peak_reference: f64,
}

impl JerkStats {
    pub fn from_dataset(data: &[MotionSequence], skeleton: &Skeleton) -> Result<Self, Error> {
        let first = data
            .first()
            .ok_or_else(|| Error::InvalidParam("jerk stats need data".into()))?;
        let mut profile: Option<Vec<Vec<f64>>> = None;
        let mut peak = 0.0;
        for m in data {
            if m.len() != first.len() {
                return Err(Error::Shape("jerk stats need equal-length motions".into()));
            }
            let j = jerk_magnitudes(&world_positions(m, skeleton)?, m.fps)?;
            peak += j.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
            match &mut profile {
                None => profile = Some(j),
                Some(p) => p
                    .iter_mut()
                    .flatten()
                    .zip(j.iter().flatten())
                    .for_each(|(a, b)| *a += b),
            }
        }
        let n = data.len() as f64;
        let mut profile = profile.expect("non-empty");
        profile.iter_mut().flatten().for_each(|v| *v /= n);
        Ok(JerkStats {
            profile,
            peak_reference: peak / n,
        })
    }
}

/// `(peak jerk, AUJ)`. AUJ is the per-frame mean of the L1 distance over
/// joints between the motion's jerk magnitudes and the dataset profile.
pub fn jerk_metrics(gen: &MotionSequence, stats: &JerkStats, skeleton: &Skeleton) -> Result<(f64, f64), Error> {
    let j = jerk_magnitudes(&world_positions(gen, skeleton)?, gen.fps)?;
    if j.len() != stats.profile.len() {
        return Err(Error::Shape(format!(
            "jerk profile has {} frames, motion has {}",
            stats.profile.len(),
            j.len()
        )));
    }
    let peak = j.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
    let auj = j
        .iter()
        .zip(&stats.profile)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>())
        .sum::<f64>()
        / j.len() as f64;
    Ok((peak, auj))
}

// ---- distribution metrics ---------------------------------------------------------------

/// Sample mean and covariance (divisor `n - 1`) of row vectors.
pub fn mean_cov(set: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>), Error> {
    if set.len() < 2 {
        return Err(Error::InvalidParam("covariance needs at least 2 samples".into()));
    }
    let d = set[0].len();
    let x = DMatrix::from_fn(set.len(), d, |i, j| set[i][j]);
    let mu = x.row_mean().transpose();
    let centered = DMatrix::from_fn(set.len(), d, |i, j| x[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (set.len() - 1) as f64;
    Ok((mu, cov))
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians.
pub fn frechet_distance(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> f64 {
    let sa = sqrt_psd(cov_a);
    let inner = &sa * cov_b * &sa;
    let cross = sqrt_psd(&inner).trace();
    let d = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    d.max(0.0)
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid_from_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, Error> {
    let (mu_a, mut ca) = mean_cov(a)?;
    let (mu_b, mut cb) = mean_cov(b)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::Shape("feature sets differ in dimension".into()));
    }
    let d = mu_a.len();
    if a.len() <= d || b.len() <= d {
        ca += DMatrix::identity(d, d) * FID_SHRINKAGE;
        cb += DMatrix::identity(d, d) * FID_SHRINKAGE;
    }
    Ok(frechet_distance(&mu_a, &ca, &mu_b, &cb))
}

pub fn encode_set(vae: &InrVae, set: &[MotionSequence]) -> Result<Vec<Vec<f64>>, Error> {
    set.iter().map(|m| vae.encode_mean(m)).collect()
}

/// Fréchet distance of encoder means; at least 32 motions per set.
pub fn latent_fid(a: &[MotionSequence], b: &[MotionSequence], vae: &InrVae) -> Result<f64, Error> {
    if a.len() < 32 || b.len() < 32 {
        return Err(Error::InvalidParam(format!(
            "latent FID needs >= 32 motions per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    fid_from_features(&encode_set(vae, a)?, &encode_set(vae, b)?)
}

/// Mean L2 distance over `n_pairs` pairs drawn uniformly with replacement.
pub fn diversity_from_features(set: &[Vec<f64>], n_pairs: usize, seed: u64) -> Result<f64, Error> {
    if set.len() < 2 || n_pairs == 0 {
        return Err(Error::InvalidParam("diversity needs >= 2 items and >= 1 pair".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: f64 = (0..n_pairs)
        .map(|_| {
            let (i, j) = (rng.random_range(0..set.len()), rng.random_range(0..set.len()));
            set[i]
                .iter()
                .zip(&set[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / n_pairs as f64)
}

pub fn diversity(set: &[MotionSequence], vae: &InrVae, n_pairs: usize, seed: u64) -> Result<f64, Error> {
    diversity_from_features(&encode_set(vae, set)?, n_pairs, seed)
}

/// Mean diversity within groups of samples that share one condition.
pub fn conditional_diversity(groups: &[Vec<Vec<f64>>], n_pairs: usize, seed: u64) -> Result<f64, Error> {
    let usable: Vec<&Vec<Vec<f64>>> = groups.iter().filter(|g| g.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::InvalidParam(
            "conditional diversity needs a group with >= 2 samples".into(),
        ));
    }
    let mut sum = 0.0;
    for (i, g) in usable.iter().enumerate() {
        sum += diversity_from_features(g, n_pairs, seed.wrapping_add(i as u64))?;
    }
    Ok(sum / usable.len() as f64)
}

/// Mean XZ distance between the root and a target path.
pub fn trajectory_error(gen: &MotionSequence, path: &[[f64; 2]]) -> Result<f64, Error> {
    if path.len() != gen.len() || path.is_empty() {
        return Err(Error::Shape(format!(
            "path has {} frames, motion has {}",
            path.len(),
            gen.len()
        )));
    }
    Ok(gen
        .root_trans
        .iter()
        .zip(path)
        .map(|(r, p)| ((r[0] - p[0]).powi(2) + (r[2] - p[1]).powi(2)).sqrt())
        .sum::<f64>()
        / path.len() as f64)
}

// ---- report ----------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation; 0 for a single value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        MeanStd { mean, std }
    }
}

/// Metric values of one evaluation repeat.
pub type EvalRow = BTreeMap<String, f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub repeats: Vec<EvalRow>,
    pub summary: BTreeMap<String, MeanStd>,
    /// Real-data values for metrics reported as "closer is better".
    pub reference: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn new(
        config: serde_json::Value,
        seeds: Vec<u64>,
        repeats: Vec<EvalRow>,
        reference: BTreeMap<String, f64>,
    ) -> Result<Self, Error> {
        if repeats.len() < 2 {
            return Err(Error::InvalidParam("a report needs at least 2 repeats".into()));
        }
        let mut summary = BTreeMap::new();
        for key in repeats[0].keys() {
            let vals: Vec<f64> = repeats
                .iter()
                .map(|r| {
                    r.get(key)
                        .copied()
                        .ok_or_else(|| Error::Shape(format!("repeat is missing metric {key}")))
                })
                .collect::<Result<_, _>>()?;
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParam(format!("metric {key} is not finite")));
            }
            summary.insert(key.clone(), MeanStd::of(&vals));
        }
        Ok(EvalReport {
            config,
            seeds,
            repeats,
            summary,
            reference,
        })
    }

    /// One CSV row per repeat, columns sorted by metric name.
    pub fn repeats_csv(&self) -> Result<String, Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let keys: Vec<&String> = self.repeats[0].keys().collect();
        let mut header = vec!["repeat".to_string()];
        header.extend(keys.iter().map(|k| k.to_string()));
        w.write_record(&header)?;
        for (i, r) in self.repeats.iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(keys.iter().map(|k| r[*k].to_string()));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

/// Inputs for evaluating one generated set against references.
pub struct EvalInputs<'a> {
    pub generated: &'a [MotionSequence],
    /// Keyframe condition of each generated motion, if any.
    pub conditions: &'a [Option<KeyframeSpec>],
    pub reference: &'a [MotionSequence],
    pub skeleton: &'a Skeleton,
    pub jerk: &'a JerkStats,
    pub vae: Option<&'a InrVae>,
    pub diversity_pairs: usize,
}

/// Every applicable metric for one repeat.
pub fn evaluate_set(inp: &EvalInputs, seed: u64) -> Result<EvalRow, Error> {
    if inp.generated.is_empty() || inp.reference.is_empty() {
        return Err(Error::InvalidParam(
            "evaluation needs generated and reference motions".into(),
        ));
    }
    let mut row = EvalRow::new();
    let n = inp.generated.len() as f64;
    let kf: Vec<f64> = inp
        .generated
        .iter()
        .zip(inp.conditions)
        .filter_map(|(g, c)| c.as_ref().map(|y| keyframe_error(g, y, inp.skeleton)))
        .collect::<Result<_, _>>()?;
    if !kf.is_empty() {
        row.insert("keyframe_error".into(), kf.iter().sum::<f64>() / kf.len() as f64);
    }
    let mut skate = 0.0;
    let (mut peak, mut auj) = (0.0, 0.0);
    for g in inp.generated {
        skate += foot_skating_ratio(g, inp.skeleton)?;
        let (p, a) = jerk_metrics(g, inp.jerk, inp.skeleton)?;
        peak += p;
        auj += a;
    }
    row.insert("foot_skating".into(), skate / n);
    row.insert("peak_jerk".into(), peak / n);
    row.insert("auj".into(), auj / n);
    if let Some(vae) = inp.vae {
        let fa = encode_set(vae, inp.generated)?;
        let fb = encode_set(vae, inp.reference)?;
        row.insert("latent_fid".into(), fid_from_features(&fa, &fb)?);
        if fa.len() >= 2 {
            row.insert(
                "diversity".into(),
                diversity_from_features(&fa, inp.diversity_pairs, seed)?,
            );
        }
    }
    Ok(row)
}
