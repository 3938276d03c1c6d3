//! Sampling-time correction of the clean-latent estimate.
//!
//! [`img_update`] takes gradient steps on `ẑ_0` against the keyframe
//! geometric loss plus a pull towards `ẑ_inp`, the encoding of the decoded
//! estimate blended with the slerp reference near keyframes. [`dps_gradient`]
//! is the baseline that differentiates through the denoiser wrt `z_t`.

use std::fmt::Write as _;

use diffcore::{DiffError, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::inrvae::InrVae;
use crate::ldm::{Condition, Ldm};
use crate::motion::{KeyframeSpec, MotionSequence};
use crate::nn::Bound;
use crate::rotmath::{self, matrices_to_tensor, slerp_rot6d, tape_geodesic, tape_rot6d_to_matrix};
use crate::svg::{line_chart, Series};
use crate::Error;

// ---- geometric loss ---------------------------------------------------------------

/// Loss scales of the four geometric terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeoWeights {
    pub pos: f64,
    pub trans: f64,
    pub rot: f64,
    pub ori: f64,
}

impl Default for GeoWeights {
    fn default() -> Self {
        GeoWeights {
            pos: 1.0,
            trans: 1.0,
            rot: 0.5,
            ori: 0.5,
        }
    }
}

impl GeoWeights {
    pub fn zero() -> Self {
        GeoWeights {
            pos: 0.0,
            trans: 0.0,
            rot: 0.0,
            ori: 0.0,
        }
    }

    pub fn any(&self) -> bool {
        self.pos != 0.0 || self.trans != 0.0 || self.rot != 0.0 || self.ori != 0.0
    }

    fn validate(&self) -> Result<(), Error> {
        if [self.pos, self.trans, self.rot, self.ori]
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::InvalidParam(format!(
                "geometric weights must be >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Tape handles of the per-term keyframe losses.
///
/// `trans` and `pos` are L1 distances averaged per keyframe (and per joint);
/// `ori` and `rot` are mean geodesic angles.
#[derive(Clone, Copy, Debug)]
pub struct GeoTerms {
    pub trans: Var,
    pub pos: Var,
    pub ori: Var,
    pub rot: Var,
}

/// Plain values of [`GeoTerms`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GeoValues {
    pub trans: f64,
    pub pos: f64,
    pub ori: f64,
    pub rot: f64,
}

impl GeoTerms {
    pub fn weighted(&self, tape: &mut Tape, w: &GeoWeights) -> Result<Var, DiffError> {
        let a = tape.scale(self.trans, w.trans)?;
        let b = tape.scale(self.pos, w.pos)?;
        let c = tape.scale(self.ori, w.ori)?;
        let d = tape.scale(self.rot, w.rot)?;
        let ab = tape.add(a, b)?;
        let cd = tape.add(c, d)?;
        tape.add(ab, cd)
    }

    pub fn values(&self, tape: &Tape) -> GeoValues {
        GeoValues {
            trans: tape.value(self.trans).item(),
            pos: tape.value(self.pos).item(),
            ori: tape.value(self.ori).item(),
            rot: tape.value(self.rot).item(),
        }
    }
}

impl GeoValues {
    pub fn weighted(&self, w: &GeoWeights) -> f64 {
        w.trans * self.trans + w.pos * self.pos + w.ori * self.ori + w.rot * self.rot
    }
}

/// Measured keyframe tracks as constants: `(rt [K,3], jp [K*J,3], ro [K,9], jr [K*J,9])`.
fn keyframe_targets(y: &KeyframeSpec) -> Result<[Tensor; 4], Error> {
    let k = y.count();
    let rt: Vec<f64> = y.poses.iter().flat_map(|p| p.root_trans).collect();
    let jp: Vec<f64> = y
        .poses
        .iter()
        .flat_map(|p| p.joint_pos.iter().flatten().copied())
        .collect();
    let ro = y
        .poses
        .iter()
        .map(|p| rotmath::rot6d_to_matrix(&p.root_orient))
        .collect::<Result<Vec<_>, _>>()?;
    let jr = y
        .poses
        .iter()
        .flat_map(|p| p.joint_rot.iter().map(rotmath::rot6d_to_matrix))
        .collect::<Result<Vec<_>, _>>()?;
    let kj = jr.len();
    Ok([
        Tensor::new(vec![k, 3], rt)?,
        Tensor::new(vec![kj, 3], jp)?,
        matrices_to_tensor(&ro),
        matrices_to_tensor(&jr),
    ])
}

/// Frame times of the keyframes on the decoder's unit interval.
pub fn keyframe_times(y: &KeyframeSpec) -> Vec<f64> {
    let denom = (y.len().max(2) - 1) as f64;
    y.indices().iter().map(|&i| i as f64 / denom).collect()
}

/// Geometric terms of `D(z)` against the keyframes. `z` is `[1, dz]` in data units.
pub fn geometric_terms(tape: &mut Tape, vae: &InrVae, pv: &Bound, z: Var, y: &KeyframeSpec) -> Result<GeoTerms, Error> {
    if y.count() == 0 {
        return Err(Error::Keyframes("geometric loss needs at least one keyframe".into()));
    }
    if y.len() != vae.config.frames {
        return Err(Error::Shape(format!(
            "keyframe spec has {} frames, model has {}",
            y.len(),
            vae.config.frames
        )));
    }
    let k = y.count() as f64;
    let j = vae.config.joints as f64;
    let [rt_y, jp_y, ro_y, jr_y] = keyframe_targets(y)?;
    let dec = vae.decode_tape(tape, pv, z, &keyframe_times(y))?;
    let (ro, rt, jr, jp) = vae.split_pose(tape, dec.pose)?;
    let l1 = |tape: &mut Tape, a: Var, target: Tensor, denom: f64| -> Result<Var, DiffError> {
        let c = tape.constant(target);
        let d = tape.sub(a, c)?;
        let d = tape.abs(d)?;
        let s = tape.sum(d)?;
        tape.scale(s, 1.0 / denom)
    };
    let geo = |tape: &mut Tape, a: Var, target: Tensor| -> Result<Var, DiffError> {
        let m = tape_rot6d_to_matrix(tape, a)?;
        let c = tape.constant(target);
        let g = tape_geodesic(tape, m, c)?;
        tape.mean(g)
    };
    Ok(GeoTerms {
        trans: l1(tape, rt, rt_y, k)?,
        pos: l1(tape, jp, jp_y, k * j)?,
        ori: geo(tape, ro, ro_y)?,
        rot: geo(tape, jr, jr_y)?,
    })
}

/// Plain geometric terms of latent `z` (data units).
pub fn geometric_values(vae: &InrVae, z: &[f64], y: &KeyframeSpec) -> Result<GeoValues, Error> {
    let mut tape = Tape::new();
    let pv = vae.store.bind(&mut tape, false);
    let zv = tape.constant(Tensor::new(vec![1, z.len()], z.to_vec())?);
    Ok(geometric_terms(&mut tape, vae, &pv, zv, y)?.values(&tape))
}

/// Mean L1 distance between decoded root XZ and the target path over all frames.
pub fn trajectory_loss(tape: &mut Tape, vae: &InrVae, pv: &Bound, z: Var, path: &[[f64; 2]]) -> Result<Var, Error> {
    if path.len() != vae.config.frames {
        return Err(Error::Shape(format!(
            "trajectory has {} frames, model has {}",
            path.len(),
            vae.config.frames
        )));
    }
    let dec = vae.decode_tape(tape, pv, z, &vae.config.time_grid())?;
    let rt = tape.slice(dec.pose, 1, vae.layout().root_trans(), 3)?;
    let xz = tape.gather(rt, 1, &[0, 2])?;
    let target = tape.constant(Tensor::new(
        vec![path.len(), 2],
        path.iter().flatten().copied().collect(),
    )?);
    let d = tape.sub(xz, target)?;
    let d = tape.abs(d)?;
    let s = tape.sum(d)?;
    Ok(tape.scale(s, 1.0 / path.len() as f64)?)
}

/// Measurement loss of `z` (data units) for either condition kind.
pub fn measurement_loss(
    tape: &mut Tape,
    vae: &InrVae,
    pv: &Bound,
    z: Var,
    cond: &Condition,
    w: &GeoWeights,
) -> Result<Var, Error> {
    match cond {
        Condition::Keyframes(y) => Ok(geometric_terms(tape, vae, pv, z, y)?.weighted(tape, w)?),
        Condition::Trajectory(path) => trajectory_loss(tape, vae, pv, z, path),
    }
}

// ---- measurement operators ----------------------------------------------------------

/// Observation extractors `A(motion)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementOp {
    KeyframePose,
    RootTrajectory,
}

impl MeasurementOp {
    /// Apply to a motion. `mask` selects keyframes for [`MeasurementOp::KeyframePose`].
    pub fn apply(&self, m: &MotionSequence, mask: &[bool]) -> Result<Condition, Error> {
        match self {
            MeasurementOp::KeyframePose => Ok(Condition::Keyframes(m.keyframes(mask)?)),
            MeasurementOp::RootTrajectory => Ok(Condition::Trajectory(root_path(m))),
        }
    }
}

pub fn root_path(m: &MotionSequence) -> Vec<[f64; 2]> {
    m.root_trans.iter().map(|t| [t[0], t[2]]).collect()
}

// ---- configuration ------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceMode {
    None,
    Img,
    GeoOnly,
    Dps,
}

impl std::str::FromStr for GuidanceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "none" => Ok(GuidanceMode::None),
            "img" => Ok(GuidanceMode::Img),
            "geo-only" => Ok(GuidanceMode::GeoOnly),
            "dps" => Ok(GuidanceMode::Dps),
            _ => Err(Error::InvalidParam(format!(
                "unknown guidance mode {s:?} (none|img|geo-only|dps)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    /// Guide steps with schedule index `t <= t_on`; `None` means 30% of the schedule.
    pub t_on: Option<usize>,
    /// Geometric step size.
    pub lambda: f64,
    /// Manifold step size.
    pub gamma: f64,
    /// Gaussian kernel width; 0 disables the manifold term.
    pub kernel: usize,
    pub enable_geometric_term: bool,
    pub enable_manifold_term: bool,
    pub weights: GeoWeights,
    /// Step size of the DPS correction.
    pub dps_scale: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            mode: GuidanceMode::None,
            t_on: None,
            lambda: 0.07,
            gamma: 0.02,
            kernel: 9,
            enable_geometric_term: true,
            enable_manifold_term: true,
            weights: GeoWeights::default(),
            dps_scale: 0.3,
        }
    }
}

impl GuidanceConfig {
    pub fn t_on(&self, steps: usize) -> usize {
        self.t_on.unwrap_or_else(|| (0.3 * steps as f64).round() as usize)
    }

    pub fn validate(&self, steps: usize) -> Result<(), Error> {
        if self.t_on(steps) > steps {
            return Err(Error::InvalidParam(format!(
                "guidance t_on {} exceeds {steps} steps",
                self.t_on(steps)
            )));
        }
        if self.kernel != 0 && self.kernel % 2 == 0 {
            return Err(Error::InvalidParam(format!(
                "kernel width must be odd or 0, got {}",
                self.kernel
            )));
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("dps_scale", self.dps_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidParam(format!("guidance {name} must be >= 0, got {v}")));
            }
        }
        self.weights.validate()
    }

    fn geometric_active(&self) -> bool {
        self.enable_geometric_term && self.lambda > 0.0
    }

    fn manifold_active(&self) -> bool {
        self.mode == GuidanceMode::Img && self.enable_manifold_term && self.gamma > 0.0 && self.kernel > 0
    }
}

/// Summary of guidance activity over one sampling run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GuidanceTrace {
    pub guided_steps: usize,
    /// Steps whose update was dropped for a non-finite gradient.
    pub skipped_steps: usize,
}

// ---- manifold term --------------------------------------------------------------------

/// Mask smoothed by a peak-1 Gaussian of width `w` (std `w/6`), clamped to `[0, 1]`.
pub fn keyframe_weights(mask: &[bool], w: usize) -> Vec<f64> {
    if w == 0 {
        return vec![0.0; mask.len()];
    }
    let half = (w / 2) as isize;
    let sigma = w as f64 / 6.0;
    let kernel: Vec<f64> = (-half..=half)
        .map(|o| (-((o * o) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let n = mask.len() as isize;
    (0..n)
        .map(|f| {
            let s: f64 = (-half..=half)
                .filter(|o| (0..n).contains(&(f + o)) && mask[(f + o) as usize])
                .map(|o| kernel[(o + half) as usize])
                .sum();
            s.clamp(0.0, 1.0)
        })
        .collect()
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    std::array::from_fn(|i| a[i] + t * (b[i] - a[i]))
}

fn blend_rot(a: &[f64; 6], b: &[f64; 6], t: f64) -> Result<[f64; 6], Error> {
    if t == 0.0 {
        Ok(*a)
    } else if t == 1.0 {
        Ok(*b)
    } else {
        slerp_rot6d(a, b, t)
    }
}

/// Per-frame blend `w * reference + (1 - w) * decoded`: slerp for rotations,
/// linear for positions. Velocities are recomputed.
pub fn blend_motions(
    decoded: &MotionSequence,
    reference: &MotionSequence,
    weights: &[f64],
) -> Result<MotionSequence, Error> {
    if decoded.len() != reference.len() || weights.len() != decoded.len() {
        return Err(Error::Shape("blend needs equal-length motions and weights".into()));
    }
    let n = decoded.len();
    let mut ro = Vec::with_capacity(n);
    let mut rt = Vec::with_capacity(n);
    let mut jr = Vec::with_capacity(n);
    let mut jp = Vec::with_capacity(n);
    for f in 0..n {
        let w = weights[f];
        ro.push(blend_rot(&decoded.root_orient[f], &reference.root_orient[f], w)?);
        rt.push(lerp3(decoded.root_trans[f], reference.root_trans[f], w));
        jr.push(
            decoded.joint_rot[f]
                .iter()
                .zip(&reference.joint_rot[f])
                .map(|(a, b)| blend_rot(a, b, w))
                .collect::<Result<Vec<_>, _>>()?,
        );
        jp.push(
            decoded.joint_pos[f]
                .iter()
                .zip(&reference.joint_pos[f])
                .map(|(a, b)| lerp3(*a, *b, w))
                .collect(),
        );
    }
    MotionSequence::from_pose_tracks(decoded.fps, ro, rt, jr, jp)
}

/// `ẑ_inp`: encode-mean of the decoded estimate blended towards slerp(y).
/// `z` and the result are in data units.
pub fn manifold_target(vae: &InrVae, z: &[f64], y: &KeyframeSpec, w: usize) -> Result<Vec<f64>, Error> {
    let decoded = vae.decode_motion(z)?;
    let reference = rotmath::slerp_motion(y, &vae.skeleton, vae.config.fps)?;
    let blended = blend_motions(&decoded, &reference, &keyframe_weights(&y.mask, w))?;
    vae.encode_mean(&blended)
}

// ---- updates --------------------------------------------------------------------------

/// Guidance objective on a standardized estimate `z_std`:
/// `lambda * L(D(z)) + gamma * |z_std - z_inp|^2` with `z_inp` constant.
pub fn img_objective(
    tape: &mut Tape,
    ldm: &Ldm,
    vae: &InrVae,
    pv: &Bound,
    z_std: Var,
    cond: &Condition,
    z_inp: Option<&[f64]>,
    g: &GuidanceConfig,
) -> Result<Var, Error> {
    let d = ldm.latent_dim();
    let mut total = tape.scalar(0.0);
    if g.geometric_active() {
        let zd = ldm.latent.tape_unstandardize(tape, z_std)?;
        let l = measurement_loss(tape, vae, pv, zd, cond, &g.weights)?;
        let l = tape.scale(l, g.lambda)?;
        total = tape.add(total, l)?;
    }
    if let Some(target) = z_inp {
        let c = tape.constant(Tensor::new(vec![1, d], target.to_vec())?);
        let diff = tape.sub(z_std, c)?;
        let sq = tape.square(diff)?;
        let m = tape.sum(sq)?;
        let m = tape.scale(m, g.gamma)?;
        total = tape.add(total, m)?;
    }
    Ok(total)
}

/// One guided step on the standardized estimate. `None` means the update was
/// skipped because its gradient was not finite.
pub fn img_update(
    ldm: &Ldm,
    vae: &InrVae,
    z0: &[f64],
    cond: &Condition,
    g: &GuidanceConfig,
) -> Result<Option<Vec<f64>>, Error> {
    let geo = g.geometric_active() && g.mode != GuidanceMode::None;
    let manifold = g.manifold_active() && matches!(cond, Condition::Keyframes(_));
    if !geo && !manifold {
        return Ok(Some(z0.to_vec()));
    }
    let z_inp = match (manifold, cond) {
        (true, Condition::Keyframes(y)) => match manifold_target(vae, &ldm.latent.unstandardize(z0), y, g.kernel) {
            Ok(t) => Some(ldm.latent.standardize(&t)),
            Err(Error::Diff(_)) | Err(Error::DegenerateRotation(_)) => return Ok(None),
            Err(e) => return Err(e),
        },
        _ => None,
    };
    let cfg = GuidanceConfig {
        enable_geometric_term: geo && g.enable_geometric_term,
        ..g.clone()
    };
    let grad = match objective_gradient(ldm, vae, z0, cond, z_inp.as_deref(), &cfg) {
        Ok(gr) => gr,
        Err(Error::Diff(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    if !grad.iter().all(|v| v.is_finite()) {
        return Ok(None);
    }
    Ok(Some(z0.iter().zip(&grad).map(|(z, g)| z - g).collect()))
}

/// Gradient of [`img_objective`] wrt the standardized estimate.
pub fn objective_gradient(
    ldm: &Ldm,
    vae: &InrVae,
    z0: &[f64],
    cond: &Condition,
    z_inp: Option<&[f64]>,
    g: &GuidanceConfig,
) -> Result<Vec<f64>, Error> {
    let mut tape = Tape::new();
    let pv = vae.store.bind(&mut tape, false);
    let z = tape.leaf(Tensor::new(vec![1, z0.len()], z0.to_vec())?);
    let obj = img_objective(&mut tape, ldm, vae, &pv, z, cond, z_inp, g)?;
    Ok(tape.backward(obj, &[z])?.remove(0).into_data())
}

/// DPS: CFG estimate at `z_t` and the measurement-loss gradient wrt `z_t`,
/// back-propagated through the denoiser. The gradient is `None` when not finite.
#[allow(clippy::too_many_arguments)]
pub fn dps_gradient(
    ldm: &Ldm,
    vae: &InrVae,
    z_t: &[f64],
    t: usize,
    memory: Option<&Tensor>,
    cfg_scale: f64,
    cond: &Condition,
    g: &GuidanceConfig,
) -> Result<(Vec<f64>, Option<Vec<f64>>), Error> {
    let d = z_t.len();
    let mut tape = Tape::new();
    let p = ldm.denoiser.store.bind(&mut tape, false);
    let pv = vae.store.bind(&mut tape, false);
    let z = tape.leaf(Tensor::new(vec![1, d], z_t.to_vec())?);
    let u = ldm.denoiser.forward(&mut tape, &p, z, t, None)?;
    let est = match memory {
        Some(m) => {
            let c = ldm.denoiser.forward(&mut tape, &p, z, t, Some(m))?;
            let us = tape.scale(u, 1.0 - cfg_scale)?;
            let cs = tape.scale(c, cfg_scale)?;
            tape.add(us, cs)?
        }
        None => u,
    };
    let z0 = tape.value(est).data().to_vec();
    let zd = ldm.latent.tape_unstandardize(&mut tape, est)?;
    let loss = match measurement_loss(&mut tape, vae, &pv, zd, cond, &g.weights) {
        Ok(l) => l,
        Err(Error::Diff(_)) => return Ok((z0, None)),
        Err(e) => return Err(e),
    };
    let grad = match tape.backward(loss, &[z]) {
        Ok(mut gs) => gs.remove(0).into_data(),
        Err(_) => return Ok((z0, None)),
    };
    Ok((z0, grad.iter().all(|v| v.is_finite()).then_some(grad)))
}

/// `z_{t-1} - lambda * grad`.
pub fn dps_update(z_prev: &[f64], grad: &[f64], lambda: f64) -> Vec<f64> {
    z_prev.iter().zip(grad).map(|(z, g)| z - lambda * g).collect()
}

// ---- stage-1 ablation ------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub steps: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub kernel: usize,
    pub weights: GeoWeights,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            steps: 100,
            lambda: 0.07,
            gamma: 0.02,
            kernel: 9,
            weights: GeoWeights::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Row {
    pub step: usize,
    pub variant: String,
    #[serde(rename = "L_trans")]
    pub l_trans: f64,
    #[serde(rename = "L_pos")]
    pub l_pos: f64,
    #[serde(rename = "L_ori")]
    pub l_ori: f64,
    #[serde(rename = "L_rot")]
    pub l_rot: f64,
}

pub const VARIANT_GEO: &str = "geometric";
pub const VARIANT_FULL: &str = "geometric+manifold";

/// Optimize a latent directly (no denoiser) against the keyframes, once with
/// the geometric term only and once with the manifold term added. Latents
/// are standardized by `ldm_latent` when given, as during sampling.
pub fn stage1_ablation(
    vae: &InrVae,
    latent: &crate::ldm::LatentStats,
    z_init: &[f64],
    y: &KeyframeSpec,
    config: &Stage1Config,
) -> Result<Vec<Stage1Row>, Error> {
    let mut rows = Vec::with_capacity(2 * (config.steps + 1));
    for (variant, gamma) in [(VARIANT_GEO, 0.0), (VARIANT_FULL, config.gamma)] {
        let mut z = latent.standardize(z_init);
        for step in 0..=config.steps {
            let zd = latent.unstandardize(&z);
            let v = geometric_values(vae, &zd, y)?;
            rows.push(Stage1Row {
                step,
                variant: variant.to_string(),
                l_trans: v.trans,
                l_pos: v.pos,
                l_ori: v.ori,
                l_rot: v.rot,
            });
            if step == config.steps {
                break;
            }
            let z_inp = if gamma > 0.0 && config.kernel > 0 {
                Some(latent.standardize(&manifold_target(vae, &zd, y, config.kernel)?))
            } else {
                None
            };
            let grad = stage1_gradient(vae, latent, &z, y, z_inp.as_deref(), config, gamma)?;
            if grad.iter().all(|g| g.is_finite()) {
                z.iter_mut().zip(&grad).for_each(|(z, g)| *z -= g);
            }
        }
    }
    Ok(rows)
}

fn stage1_gradient(
    vae: &InrVae,
    latent: &crate::ldm::LatentStats,
    z: &[f64],
    y: &KeyframeSpec,
    z_inp: Option<&[f64]>,
    config: &Stage1Config,
    gamma: f64,
) -> Result<Vec<f64>, Error> {
    let mut tape = Tape::new();
    let pv = vae.store.bind(&mut tape, false);
    let zv = tape.leaf(Tensor::new(vec![1, z.len()], z.to_vec())?);
    let zd = latent.tape_unstandardize(&mut tape, zv)?;
    let terms = geometric_terms(&mut tape, vae, &pv, zd, y)?;
    let l = terms.weighted(&mut tape, &config.weights)?;
    let mut total = tape.scale(l, config.lambda)?;
    if let Some(t) = z_inp {
        let c = tape.constant(Tensor::new(vec![1, z.len()], t.to_vec())?);
        let diff = tape.sub(zv, c)?;
        let sq = tape.square(diff)?;
        let m = tape.sum(sq)?;
        let m = tape.scale(m, gamma)?;
        total = tape.add(total, m)?;
    }
    Ok(tape.backward(total, &[zv])?.remove(0).into_data())
}

/// First step at which `variant`'s rotation loss is at or below `target`.
pub fn steps_to_reach(rows: &[Stage1Row], variant: &str, target: f64) -> Option<usize> {
    rows.iter()
        .filter(|r| r.variant == variant)
        .find(|r| r.l_rot <= target)
        .map(|r| r.step)
}

/// Steps the full variant needs to reach the geometric-only variant's final
/// rotation loss, as a fraction of the steps the geometric-only variant needs.
/// `None` if the full variant never gets there.
pub fn stage1_step_ratio(rows: &[Stage1Row]) -> Option<f64> {
    let target = rows.iter().filter(|r| r.variant == VARIANT_GEO).last()?.l_rot;
    let geo = steps_to_reach(rows, VARIANT_GEO, target)?;
    let full = steps_to_reach(rows, VARIANT_FULL, target)?;
    Some(full as f64 / geo.max(1) as f64)
}

/// Per-step mean over runs with identical step/variant layout.
pub fn mean_stage1(runs: &[Vec<Stage1Row>]) -> Result<Vec<Stage1Row>, Error> {
    let first = runs
        .first()
        .ok_or_else(|| Error::InvalidParam("no stage-1 runs".into()))?;
    if runs.iter().any(|r| r.len() != first.len()) {
        return Err(Error::Shape("stage-1 runs differ in length".into()));
    }
    let n = runs.len() as f64;
    Ok((0..first.len())
        .map(|i| {
            let sum = |f: fn(&Stage1Row) -> f64| runs.iter().map(|r| f(&r[i])).sum::<f64>() / n;
            Stage1Row {
                step: first[i].step,
                variant: first[i].variant.clone(),
                l_trans: sum(|r| r.l_trans),
                l_pos: sum(|r| r.l_pos),
                l_ori: sum(|r| r.l_ori),
                l_rot: sum(|r| r.l_rot),
            }
        })
        .collect())
}

/// Trailing moving average with window `w`.
pub fn smooth(values: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

pub fn stage1_csv(rows: &[Stage1Row]) -> Result<String, Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// One chart per loss term, geometric-only against geometric+manifold.
pub fn stage1_svgs(rows: &[Stage1Row]) -> Vec<(String, String)> {
    let terms: [(&str, fn(&Stage1Row) -> f64); 4] = [
        ("L_trans", |r| r.l_trans),
        ("L_pos", |r| r.l_pos),
        ("L_ori", |r| r.l_ori),
        ("L_rot", |r| r.l_rot),
    ];
    terms
        .iter()
        .map(|(name, f)| {
            let series: Vec<Series> = [VARIANT_GEO, VARIANT_FULL]
                .iter()
                .map(|v| {
                    Series::new(
                        *v,
                        rows.iter()
                            .filter(|r| r.variant == *v)
                            .map(|r| (r.step as f64, f(r)))
                            .collect(),
                    )
                })
                .collect();
            let mut title = String::new();
            let _ = write!(title, "{name} per optimization step");
            (name.to_string(), line_chart(&title, "step", name, &series))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_weights_unit_width_is_the_mask() {
        let mask: Vec<bool> = (0..20).map(|i| i % 7 == 3).collect();
        let w = keyframe_weights(&mask, 1);
        assert_eq!(w, mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect::<Vec<_>>());
        assert!(keyframe_weights(&mask, 0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kernel_weights_match_explicit_gaussian() {
        let mut mask = vec![false; 128];
        mask[64] = true;
        let w = keyframe_weights(&mask, 9);
        let sigma: f64 = 1.5;
        for o in 0..=4i32 {
            let want = (-(o * o) as f64 / (2.0 * sigma * sigma)).exp();
            assert!((w[64 + o as usize] - want).abs() < 1e-15);
            assert_eq!(w[64 + o as usize], w[64 - o as usize]);
        }
        for (f, v) in w.iter().enumerate() {
            if !(60..=68).contains(&f) {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smooth(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("geo-only".parse::<GuidanceMode>().unwrap(), GuidanceMode::GeoOnly);
        assert!("fast".parse::<GuidanceMode>().is_err());
        assert!(GuidanceConfig {
            kernel: 4,
            ..Default::default()
        }
        .validate(1000)
        .is_err());
        assert!(GuidanceConfig {
            t_on: Some(2000),
            ..Default::default()
        }
        .validate(1000)
        .is_err());
        assert_eq!(GuidanceConfig::default().t_on(1000), 300);
        assert_eq!(GuidanceConfig::default().t_on(50), 15);
    }
}
