//! Skeleton, motion sequences, keyframe observations, forward kinematics and
//! the synthetic corpus.

mod dataset;
mod features;
mod fk;
mod io;

pub use dataset::{
    generate_synthetic_dataset, reach_motion, walk_motion, Family, FamilyParams, ReachParams, WalkParams,
};
pub use features::{FeatureLayout, FeatureStats};
pub use fk::{forward_kinematics, global_positions, local_positions, tape_fk};
pub use io::{parse_motion, read_keyframes, read_motion, write_keyframes, write_motion, KeyframeFile, MotionFile};

use serde::{Deserialize, Serialize};

use crate::rotmath::{self, Mat3, Quat, Rot6D};
use crate::Error;

pub const DEFAULT_FPS: f64 = 30.0;
pub const DEFAULT_FRAMES: usize = 128;

/// Joint hierarchy, sorted so that every parent precedes its children.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub joint_names: Vec<String>,
    pub parent: Vec<i64>,
    /// Rest translation from the parent joint, meters.
    pub offset: Vec<[f64; 3]>,
    pub foot_joints: Vec<usize>,
}

impl Skeleton {
    /// Ten-joint humanoid: pelvis root, spine, two single-joint arms and two
    /// hip-knee-ankle legs. The ankles are the foot joints.
    pub fn humanoid() -> Self {
        let joints: [(&str, i64, [f64; 3]); 10] = [
            ("pelvis", -1, [0.0, 0.0, 0.0]),
            ("spine", 0, [0.0, 0.25, 0.0]),
            ("l_shoulder", 1, [0.18, 0.25, 0.0]),
            ("r_shoulder", 1, [-0.18, 0.25, 0.0]),
            ("l_hip", 0, [0.1, -0.05, 0.0]),
            ("l_knee", 4, [0.0, -0.45, 0.0]),
            ("l_ankle", 5, [0.0, -0.43, 0.0]),
            ("r_hip", 0, [-0.1, -0.05, 0.0]),
            ("r_knee", 7, [0.0, -0.45, 0.0]),
            ("r_ankle", 8, [0.0, -0.43, 0.0]),
        ];
        Skeleton {
            joint_names: joints.iter().map(|j| j.0.to_string()).collect(),
            parent: joints.iter().map(|j| j.1).collect(),
            offset: joints.iter().map(|j| j.2).collect(),
            foot_joints: vec![6, 9],
        }
    }

    pub fn joint_count(&self) -> usize {
        self.parent.len()
    }

    pub fn validate(&self) -> Result<(), Error> {
        let j = self.parent.len();
        if self.joint_names.len() != j || self.offset.len() != j {
            return Err(Error::Schema(
                "skeleton: joint_names, parent and offset lengths differ".into(),
            ));
        }
        if j == 0 || self.parent[0] != -1 {
            return Err(Error::Schema("skeleton.parent: joint 0 must be the root".into()));
        }
        for (i, &p) in self.parent.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= i {
                return Err(Error::Schema(format!(
                    "skeleton.parent[{i}]: parent {p} must precede the joint"
                )));
            }
        }
        if self.foot_joints.len() < 2 || self.foot_joints.iter().any(|&f| f >= j) {
            return Err(Error::Schema(
                "skeleton.foot_joints: need at least two valid foot joints".into(),
            ));
        }
        Ok(())
    }
}

/// Fixed-rate skeletal motion.
///
/// `joint_pos` is expressed relative to the root, in the root's own frame, so
/// that world positions are `root_trans + R(root_orient) * joint_pos`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSequence {
    pub fps: f64,
    pub root_orient: Vec<[f64; 6]>,
    pub root_trans: Vec<[f64; 3]>,
    pub joint_rot: Vec<Vec<[f64; 6]>>,
    pub joint_pos: Vec<Vec<[f64; 3]>>,
    pub joint_vel: Vec<Vec<[f64; 3]>>,
    pub joint_angvel: Vec<Vec<[f64; 3]>>,
}

/// Central differences of a track, one-sided at the ends, scaled by `fps`.
pub fn differentiate<const N: usize>(track: &[[f64; N]], fps: f64) -> Vec<[f64; N]> {
    let n = track.len();
    (0..n)
        .map(|t| {
            if n < 2 {
                return [0.0; N];
            }
            let (a, b, span) = if t == 0 {
                (0, 1, 1.0)
            } else if t == n - 1 {
                (n - 2, n - 1, 1.0)
            } else {
                (t - 1, t + 1, 2.0)
            };
            std::array::from_fn(|k| (track[b][k] - track[a][k]) * fps / span)
        })
        .collect()
}

/// Angular velocity (rotation vector per second, in the joint's local frame).
pub fn angular_velocity(rots: &[Mat3], fps: f64) -> Vec<[f64; 3]> {
    let n = rots.len();
    (0..n)
        .map(|t| {
            if n < 2 {
                return [0.0; 3];
            }
            let (a, b, span) = if t == 0 {
                (0, 1, 1.0)
            } else if t == n - 1 {
                (n - 2, n - 1, 1.0)
            } else {
                (t - 1, t + 1, 2.0)
            };
            let rel = rotmath::mat_mul(&rotmath::transpose(&rots[a]), &rots[b]);
            let w = Quat::from_matrix(&rel).log();
            [w[0] * fps / span, w[1] * fps / span, w[2] * fps / span]
        })
        .collect()
}

impl MotionSequence {
    /// Build a sequence from pose tracks, deriving velocities by differencing.
    pub fn from_pose_tracks(
        fps: f64,
        root_orient: Vec<[f64; 6]>,
        root_trans: Vec<[f64; 3]>,
        joint_rot: Vec<Vec<[f64; 6]>>,
        joint_pos: Vec<Vec<[f64; 3]>>,
    ) -> Result<Self, Error> {
        if !(fps > 0.0) {
            return Err(Error::Schema("fps: must be positive".into()));
        }
        let t = root_orient.len();
        let j = joint_rot.first().map_or(0, Vec::len);
        let mut joint_vel = vec![vec![[0.0; 3]; j]; t];
        let mut joint_angvel = vec![vec![[0.0; 3]; j]; t];
        for k in 0..j {
            let pos: Vec<[f64; 3]> = joint_pos.iter().map(|f| f[k]).collect();
            let rots: Vec<Mat3> = joint_rot
                .iter()
                .map(|f| rotmath::rot6d_to_matrix(&f[k]))
                .collect::<Result<_, _>>()?;
            for (f, v) in differentiate(&pos, fps).into_iter().enumerate() {
                joint_vel[f][k] = v;
            }
            for (f, w) in angular_velocity(&rots, fps).into_iter().enumerate() {
                joint_angvel[f][k] = w;
            }
        }
        let m = MotionSequence {
            fps,
            root_orient,
            root_trans,
            joint_rot,
            joint_pos,
            joint_vel,
            joint_angvel,
        };
        m.validate(j)?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.root_orient.len()
    }

    pub fn is_empty(&self) -> bool {
        self.root_orient.is_empty()
    }

    pub fn joint_count(&self) -> usize {
        self.joint_rot.first().map_or(0, Vec::len)
    }

    /// Shape checks: every track has `T` frames of `joints` entries.
    pub fn validate(&self, joints: usize) -> Result<(), Error> {
        if !(self.fps > 0.0) {
            return Err(Error::Schema("fps: must be positive".into()));
        }
        let t = self.root_orient.len();
        if t == 0 {
            return Err(Error::Schema("frames: motion has no frames".into()));
        }
        if self.root_trans.len() != t {
            return Err(Error::Schema(format!("frames.root_trans: expected {t} frames")));
        }
        let tracks: [(&str, Vec<usize>); 4] = [
            ("joint_rot", self.joint_rot.iter().map(Vec::len).collect()),
            ("joint_pos", self.joint_pos.iter().map(Vec::len).collect()),
            ("joint_vel", self.joint_vel.iter().map(Vec::len).collect()),
            ("joint_angvel", self.joint_angvel.iter().map(Vec::len).collect()),
        ];
        for (name, lens) in tracks {
            if lens.len() != t {
                return Err(Error::Schema(format!(
                    "frames.{name}: expected {t} frames, got {}",
                    lens.len()
                )));
            }
            if let Some((f, l)) = lens.iter().enumerate().find(|(_, &l)| l != joints) {
                return Err(Error::Schema(format!(
                    "frames.{name}[{f}]: expected {joints} joints, got {l}"
                )));
            }
        }
        let all_finite = self.root_orient.iter().flatten().all(|v| v.is_finite())
            && self.root_trans.iter().flatten().all(|v| v.is_finite())
            && self.joint_rot.iter().flatten().flatten().all(|v| v.is_finite())
            && self.joint_pos.iter().flatten().flatten().all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::Schema("frames: non-finite values".into()));
        }
        Ok(())
    }

    pub fn root_orient_matrix(&self, t: usize) -> Result<Mat3, Error> {
        rotmath::rot6d_to_matrix(&self.root_orient[t])
    }

    /// Observation at the masked frames.
    pub fn keyframes(&self, mask: &[bool]) -> Result<KeyframeSpec, Error> {
        if mask.len() != self.len() {
            return Err(Error::Keyframes(format!(
                "mask has {} frames, motion has {}",
                mask.len(),
                self.len()
            )));
        }
        let poses = mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(index, _)| KeyPose {
                index,
                root_orient: self.root_orient[index],
                root_trans: self.root_trans[index],
                joint_rot: self.joint_rot[index].clone(),
                joint_pos: self.joint_pos[index].clone(),
            })
            .collect();
        let spec = KeyframeSpec {
            mask: mask.to_vec(),
            poses,
        };
        spec.validate(self.joint_count())?;
        Ok(spec)
    }

    /// Per-frame pose vector `[root_orient | root_trans | joint_rot | joint_pos]`.
    pub fn pose_vector(&self, t: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(FeatureLayout::new(self.joint_count()).pose_dim());
        v.extend_from_slice(&self.root_orient[t]);
        v.extend_from_slice(&self.root_trans[t]);
        v.extend(self.joint_rot[t].iter().flatten());
        v.extend(self.joint_pos[t].iter().flatten());
        v
    }

    /// Per-frame feature vector: the pose vector followed by joint linear and
    /// angular velocities.
    pub fn feature_vector(&self, t: usize) -> Vec<f64> {
        let mut v = self.pose_vector(t);
        v.extend(self.joint_vel[t].iter().flatten());
        v.extend(self.joint_angvel[t].iter().flatten());
        v
    }
}

/// Observed pose at one keyframe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyPose {
    pub index: usize,
    pub root_orient: [f64; 6],
    pub root_trans: [f64; 3],
    pub joint_rot: Vec<[f64; 6]>,
    pub joint_pos: Vec<[f64; 3]>,
}

impl KeyPose {
    pub fn pose_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(9 + 9 * self.joint_rot.len());
        v.extend_from_slice(&self.root_orient);
        v.extend_from_slice(&self.root_trans);
        v.extend(self.joint_rot.iter().flatten());
        v.extend(self.joint_pos.iter().flatten());
        v
    }
}

/// Frame mask plus observed poses at the masked frames, in frame order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyframeSpec {
    pub mask: Vec<bool>,
    pub poses: Vec<KeyPose>,
}

/// `k` distinct frames drawn uniformly without replacement.
pub fn random_mask(frames: usize, k: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Result<Vec<bool>, Error> {
    use rand::seq::index::sample;
    check_count(frames, k)?;
    let mut mask = vec![false; frames];
    for i in sample(rng, frames, k) {
        mask[i] = true;
    }
    Ok(mask)
}

/// The first `ceil(k/2)` and last `floor(k/2)` frames.
pub fn startend_mask(frames: usize, k: usize) -> Result<Vec<bool>, Error> {
    check_count(frames, k)?;
    let head = k - k / 2;
    Ok((0..frames).map(|i| i < head || i >= frames - k / 2).collect())
}

fn check_count(frames: usize, k: usize) -> Result<(), Error> {
    if k == 0 || k > frames {
        return Err(Error::Keyframes(format!("keyframe count {k} must lie in 1..={frames}")));
    }
    Ok(())
}

impl KeyframeSpec {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn count(&self) -> usize {
        self.poses.len()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.poses.iter().map(|p| p.index).collect()
    }

    pub fn validate(&self, joints: usize) -> Result<(), Error> {
        let expected: Vec<usize> = self
            .mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i)
            .collect();
        if expected.is_empty() {
            return Err(Error::Keyframes("at least one keyframe is required".into()));
        }
        if expected != self.indices() {
            return Err(Error::Keyframes(
                "poses must be given exactly for the masked frames, in order".into(),
            ));
        }
        for p in &self.poses {
            if p.joint_rot.len() != joints || p.joint_pos.len() != joints {
                return Err(Error::Keyframes(format!(
                    "keyframe {}: expected {joints} joints",
                    p.index
                )));
            }
            Rot6D(p.root_orient).to_matrix()?;
            for r in &p.joint_rot {
                Rot6D(*r).to_matrix()?;
            }
        }
        Ok(())
    }
}
