use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{fk, MotionSequence, Skeleton, DEFAULT_FPS, DEFAULT_FRAMES};
use crate::rotmath::{mat_mul, rot_x, rot_y, rot_z, Mat3, Rot6D};
use crate::Error;

/// Relative amplitude of the walking speed ripple at twice the stride rate.
pub const SPEED_RIPPLE: f64 = 0.05;
const LEG_LENGTH: f64 = 0.88;
const SUBSTEPS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Walk,
    Reach,
    /// Three walks for every reach.
    Mixed,
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "walk" => Ok(Family::Walk),
            "reach" => Ok(Family::Reach),
            "mixed" => Ok(Family::Mixed),
            _ => Err(Error::InvalidParam(format!(
                "unknown family {s:?} (walk, reach, mixed)"
            ))),
        }
    }
}

/// Sampling ranges for the procedural corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FamilyParams {
    pub family: Family,
    pub frames: usize,
    pub fps: f64,
    pub speed: [f64; 2],
    pub turn_rate: [f64; 2],
    pub stride_freq: [f64; 2],
    pub arm_swing: [f64; 2],
    pub raise_angle: [f64; 2],
}

impl Default for FamilyParams {
    fn default() -> Self {
        FamilyParams {
            family: Family::Mixed,
            frames: DEFAULT_FRAMES,
            fps: DEFAULT_FPS,
            speed: [0.8, 1.6],
            turn_rate: [-0.4, 0.4],
            stride_freq: [0.8, 1.2],
            arm_swing: [0.2, 0.6],
            raise_angle: [1.0, 2.2],
        }
    }
}

impl FamilyParams {
    pub fn validate(&self) -> Result<(), Error> {
        if self.frames < 4 {
            return Err(Error::InvalidParam("frames must be at least 4".into()));
        }
        if !(self.fps > 0.0) || !self.fps.is_finite() {
            return Err(Error::InvalidParam("fps must be positive".into()));
        }
        let ranges = [
            ("speed", self.speed),
            ("turn_rate", self.turn_rate),
            ("stride_freq", self.stride_freq),
            ("arm_swing", self.arm_swing),
            ("raise_angle", self.raise_angle),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidParam(format!(
                    "{name}: empty or non-finite range [{lo}, {hi}]"
                )));
            }
        }
        if self.speed[0] < 0.0 || self.stride_freq[0] <= 0.0 {
            return Err(Error::InvalidParam(
                "speed must be non-negative and stride_freq positive".into(),
            ));
        }
        Ok(())
    }
}

/// One walking clip.
#[derive(Clone, Debug, PartialEq)]
pub struct WalkParams {
    /// Mean forward speed, m/s.
    pub speed: f64,
    /// Heading change, rad/s.
    pub turn_rate: f64,
    /// Full gait cycles per second.
    pub stride_freq: f64,
    /// Shoulder swing amplitude, rad.
    pub arm_swing: f64,
    pub heading: f64,
    pub phase: f64,
    pub start: [f64; 2],
}

impl WalkParams {
    /// Instantaneous forward speed at time `t` seconds.
    pub fn speed_at(&self, t: f64) -> f64 {
        let w = 4.0 * std::f64::consts::PI * self.stride_freq;
        self.speed * (1.0 + SPEED_RIPPLE * (w * t + 2.0 * self.phase).sin())
    }

    fn heading_at(&self, t: f64) -> f64 {
        self.heading + self.turn_rate * t
    }

    fn hip_amplitude(&self) -> f64 {
        let step = self.speed / self.stride_freq / (4.0 * LEG_LENGTH);
        step.min(0.9).asin()
    }
}

/// One standing reach clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ReachParams {
    pub left: bool,
    pub right: bool,
    pub raise_angle: f64,
    pub lean: f64,
    pub knee_bend: f64,
    /// Raise start and duration, seconds.
    pub start: f64,
    pub duration: f64,
    /// Seconds held at the top before lowering.
    pub hold: f64,
    pub heading: f64,
    pub position: [f64; 2],
    pub sway_phase: f64,
}

fn r6(m: &Mat3) -> [f64; 6] {
    Rot6D::from_matrix(m).0
}

fn chain(ms: &[Mat3]) -> Mat3 {
    ms.iter().skip(1).fold(ms[0], |acc, m| mat_mul(&acc, m))
}

/// Quintic smoothstep on [0, 1].
fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
}

/// Assemble a sequence from per-frame local rotations, root heading and
/// horizontal root position; the root height puts the lowest foot on y=0.
fn assemble(
    skeleton: &Skeleton,
    fps: f64,
    joint_rot: Vec<Vec<[f64; 6]>>,
    heading: &[f64],
    root_xz: &[[f64; 2]],
) -> Result<MotionSequence, Error> {
    let mut joint_pos = Vec::with_capacity(joint_rot.len());
    let mut root_trans = Vec::with_capacity(joint_rot.len());
    let mut root_orient = Vec::with_capacity(joint_rot.len());
    for (f, rots) in joint_rot.iter().enumerate() {
        let pos = fk::local_positions(skeleton, rots)?;
        let lowest = skeleton
            .foot_joints
            .iter()
            .map(|&k| pos[k][1])
            .fold(f64::INFINITY, f64::min);
        root_trans.push([root_xz[f][0], -lowest, root_xz[f][1]]);
        root_orient.push(r6(&rot_y(heading[f])));
        joint_pos.push(pos);
    }
    MotionSequence::from_pose_tracks(fps, root_orient, root_trans, joint_rot, joint_pos)
}

/// Procedural walk on the ten-joint humanoid. Legs alternate in antiphase,
/// arms counter-swing, and the root follows the integrated speed profile
/// along the heading.
pub fn walk_motion(p: &WalkParams, frames: usize, fps: f64, skeleton: &Skeleton) -> Result<MotionSequence, Error> {
    let two_pi = 2.0 * std::f64::consts::PI;
    let amp = p.hip_amplitude();
    let dt = 1.0 / fps;
    let mut joint_rot = Vec::with_capacity(frames);
    let mut heading = Vec::with_capacity(frames);
    let mut root_xz = Vec::with_capacity(frames);
    let mut xz = p.start;
    for f in 0..frames {
        let t = f as f64 * dt;
        if f > 0 {
            // Simpson's rule over the previous frame interval
            let h = dt / SUBSTEPS as f64;
            let vel = |s: f64| {
                let (v, psi) = (p.speed_at(s), p.heading_at(s));
                [v * psi.sin(), v * psi.cos()]
            };
            let t0 = t - dt;
            for i in 0..SUBSTEPS {
                let a = t0 + i as f64 * h;
                let (va, vm, vb) = (vel(a), vel(a + 0.5 * h), vel(a + h));
                for c in 0..2 {
                    xz[c] += h / 6.0 * (va[c] + 4.0 * vm[c] + vb[c]);
                }
            }
        }
        let th = two_pi * p.stride_freq * t + p.phase;
        let (s, c) = th.sin_cos();
        let swing = |cs: f64| 0.08 + 0.65 * ((1.0 + cs) / 2.0).powi(4);
        let (hip_l, hip_r) = (-amp * s, amp * s);
        let (knee_l, knee_r) = (swing(c), swing(-c));
        let rots = vec![
            r6(&chain(&[rot_y(0.08 * s), rot_z(0.04 * s)])),
            r6(&chain(&[rot_y(-0.12 * s), rot_x(0.05)])),
            r6(&chain(&[rot_x(p.arm_swing * s), rot_z(0.1)])),
            r6(&chain(&[rot_x(-p.arm_swing * s), rot_z(-0.1)])),
            r6(&rot_x(hip_l)),
            r6(&rot_x(knee_l)),
            r6(&rot_x(-0.5 * (hip_l + knee_l))),
            r6(&rot_x(hip_r)),
            r6(&rot_x(knee_r)),
            r6(&rot_x(-0.5 * (hip_r + knee_r))),
        ];
        joint_rot.push(rots);
        heading.push(p.heading_at(t));
        root_xz.push(xz);
    }
    assemble(skeleton, fps, joint_rot, &heading, &root_xz)
}

/// Standing clip that raises one or both arms forward, leaning and bending
/// the knees, then lowers them again.
pub fn reach_motion(p: &ReachParams, frames: usize, fps: f64, skeleton: &Skeleton) -> Result<MotionSequence, Error> {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut joint_rot = Vec::with_capacity(frames);
    for f in 0..frames {
        let t = f as f64 / fps;
        let up = smoothstep((t - p.start) / p.duration);
        let down = smoothstep((t - p.start - p.duration - p.hold) / p.duration);
        let e = up - down;
        let sway = 0.02 * (two_pi * 0.3 * t + p.sway_phase).sin();
        let arm = |on: bool, side: f64| {
            let a = if on { -p.raise_angle * e } else { 0.05 * e };
            r6(&chain(&[rot_x(a), rot_z(side * 0.1)]))
        };
        let bend = p.knee_bend * e;
        joint_rot.push(vec![
            r6(&rot_z(sway)),
            r6(&rot_x(p.lean * e)),
            arm(p.left, 1.0),
            arm(p.right, -1.0),
            r6(&rot_x(-bend)),
            r6(&rot_x(2.0 * bend)),
            r6(&rot_x(-bend)),
            r6(&rot_x(-bend)),
            r6(&rot_x(2.0 * bend)),
            r6(&rot_x(-bend)),
        ]);
    }
    assemble(
        skeleton,
        fps,
        joint_rot,
        &vec![p.heading; frames],
        &vec![p.position; frames],
    )
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn sample_walk(rng: &mut ChaCha8Rng, fp: &FamilyParams) -> WalkParams {
    let two_pi = 2.0 * std::f64::consts::PI;
    WalkParams {
        speed: uniform(rng, fp.speed),
        turn_rate: uniform(rng, fp.turn_rate),
        stride_freq: uniform(rng, fp.stride_freq),
        arm_swing: uniform(rng, fp.arm_swing),
        heading: 0.0,
        phase: rng.random_range(0.0..two_pi),
        start: [0.0, 0.0],
    }
}

fn sample_reach(rng: &mut ChaCha8Rng, fp: &FamilyParams) -> ReachParams {
    let two_pi = 2.0 * std::f64::consts::PI;
    let span = fp.frames as f64 / fp.fps;
    let which = rng.random_range(0..3u32);
    let duration = span * rng.random_range(0.15..0.3);
    ReachParams {
        left: which != 1,
        right: which != 0,
        raise_angle: uniform(rng, fp.raise_angle),
        lean: rng.random_range(0.05..0.3),
        knee_bend: rng.random_range(0.0..0.3),
        start: span * rng.random_range(0.05..0.3),
        duration,
        hold: span * rng.random_range(0.0..0.2),
        heading: 0.0,
        position: [0.0, 0.0],
        sway_phase: rng.random_range(0.0..two_pi),
    }
}

/// `n` procedural clips on [`Skeleton::humanoid`]. Clip `i` depends only on
/// `(seed, i)`. Clips are canonical: they start at the origin facing +Z.
pub fn generate_synthetic_dataset(fp: &FamilyParams, n: usize, seed: u64) -> Result<Vec<MotionSequence>, Error> {
    if n == 0 {
        return Err(Error::InvalidParam("count must be at least 1".into()));
    }
    fp.validate()?;
    let skeleton = Skeleton::humanoid();
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let reach = match fp.family {
                Family::Walk => false,
                Family::Reach => true,
                Family::Mixed => rng.random_range(0..4u32) == 0,
            };
            if reach {
                reach_motion(&sample_reach(&mut rng, fp), fp.frames, fp.fps, &skeleton)
            } else {
                walk_motion(&sample_walk(&mut rng, fp), fp.frames, fp.fps, &skeleton)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::differentiate;

    fn straight(speed: f64) -> WalkParams {
        WalkParams {
            speed,
            turn_rate: 0.0,
            stride_freq: 1.0,
            arm_swing: 0.4,
            heading: 0.7,
            phase: 0.3,
            start: [0.2, -0.4],
        }
    }

    #[test]
    fn straight_walk_stays_on_a_line() {
        let m = walk_motion(&straight(1.2), 128, 30.0, &Skeleton::humanoid()).unwrap();
        let (s, c) = 0.7f64.sin_cos();
        for rt in &m.root_trans {
            let (dx, dz) = (rt[0] - 0.2, rt[2] + 0.4);
            assert!((dx * c - dz * s).abs() < 1e-9);
        }
    }

    #[test]
    fn displacement_matches_closed_form_speed_integral() {
        let p = straight(1.2);
        let m = walk_motion(&p, 128, 30.0, &Skeleton::humanoid()).unwrap();
        let t = 127.0 / 30.0;
        let w = 4.0 * std::f64::consts::PI * p.stride_freq;
        let want = p.speed * t - p.speed * SPEED_RIPPLE / w * ((w * t + 2.0 * p.phase).cos() - (2.0 * p.phase).cos());
        let (a, b) = (m.root_trans[0], m.root_trans[127]);
        let got = ((b[0] - a[0]).powi(2) + (b[2] - a[2]).powi(2)).sqrt();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        // 128 frames at 1.2 m/s nominally cover about 5.12 m
        assert!((got - 5.12).abs() < 0.06);
    }

    #[test]
    fn generated_data_is_consistent() {
        let fp = FamilyParams::default();
        let data = generate_synthetic_dataset(&fp, 8, 11).unwrap();
        let s = Skeleton::humanoid();
        for m in &data {
            assert_eq!(m.len(), 128);
            for t in 0..m.len() {
                let pos = fk::local_positions(&s, &m.joint_rot[t]).unwrap();
                for k in 0..10 {
                    for i in 0..3 {
                        assert!((pos[k][i] - m.joint_pos[t][k][i]).abs() < 1e-5);
                    }
                }
                let lowest = s.foot_joints.iter().map(|&k| m.root_trans[t][1] + m.joint_pos[t][k][1]);
                assert!(lowest.fold(f64::INFINITY, f64::min).abs() < 1e-12);
            }
            for k in 0..10 {
                let track: Vec<[f64; 3]> = m.joint_pos.iter().map(|f| f[k]).collect();
                for (t, v) in differentiate(&track, m.fps).iter().enumerate() {
                    for i in 0..3 {
                        assert!((v[i] - m.joint_vel[t][k][i]).abs() < 1e-6);
                    }
                }
            }
        }
        assert_eq!(data, generate_synthetic_dataset(&fp, 8, 11).unwrap());
        assert_ne!(data, generate_synthetic_dataset(&fp, 8, 12).unwrap());
    }

    #[test]
    fn feet_alternate_contact() {
        let m = walk_motion(&straight(1.2), 128, 30.0, &Skeleton::humanoid()).unwrap();
        let lower_left: Vec<bool> = (0..128).map(|t| m.joint_pos[t][6][1] < m.joint_pos[t][9][1]).collect();
        let switches = lower_left.windows(2).filter(|w| w[0] != w[1]).count();
        // about two contact changes per gait cycle over 4.2 cycles
        assert!((6..=10).contains(&switches), "{switches}");
    }

    #[test]
    fn invalid_params_are_rejected() {
        assert!(generate_synthetic_dataset(&FamilyParams::default(), 0, 0).is_err());
        let fp = FamilyParams {
            speed: [2.0, 1.0],
            ..Default::default()
        };
        assert!(generate_synthetic_dataset(&fp, 1, 0).is_err());
        assert!("run".parse::<Family>().is_err());
    }
}
