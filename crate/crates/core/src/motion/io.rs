use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{KeyPose, KeyframeSpec, MotionSequence, Skeleton};
use crate::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Frames {
    pub root_orient: Vec<[f64; 6]>,
    pub root_trans: Vec<[f64; 3]>,
    pub joint_rot: Vec<Vec<[f64; 6]>>,
    pub joint_pos: Vec<Vec<[f64; 3]>>,
    pub joint_vel: Vec<Vec<[f64; 3]>>,
    pub joint_angvel: Vec<Vec<[f64; 3]>>,
}

/// On-disk motion document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionFile {
    pub version: u32,
    pub fps: f64,
    pub joint_names: Vec<String>,
    pub parent: Vec<i64>,
    pub offset: Vec<[f64; 3]>,
    pub foot_joints: Vec<usize>,
    pub frames: Frames,
}

impl MotionFile {
    pub fn new(m: &MotionSequence, s: &Skeleton) -> Self {
        MotionFile {
            version: FORMAT_VERSION,
            fps: m.fps,
            joint_names: s.joint_names.clone(),
            parent: s.parent.clone(),
            offset: s.offset.clone(),
            foot_joints: s.foot_joints.clone(),
            frames: Frames {
                root_orient: m.root_orient.clone(),
                root_trans: m.root_trans.clone(),
                joint_rot: m.joint_rot.clone(),
                joint_pos: m.joint_pos.clone(),
                joint_vel: m.joint_vel.clone(),
                joint_angvel: m.joint_angvel.clone(),
            },
        }
    }

    pub fn into_parts(self) -> Result<(MotionSequence, Skeleton), Error> {
        if self.version != FORMAT_VERSION {
            return Err(Error::Schema(format!("version: unsupported version {}", self.version)));
        }
        if !(self.fps > 0.0) || !self.fps.is_finite() {
            return Err(Error::Schema(format!("fps: must be positive, got {}", self.fps)));
        }
        let skeleton = Skeleton {
            joint_names: self.joint_names,
            parent: self.parent,
            offset: self.offset,
            foot_joints: self.foot_joints,
        };
        skeleton.validate()?;
        let f = self.frames;
        let m = MotionSequence {
            fps: self.fps,
            root_orient: f.root_orient,
            root_trans: f.root_trans,
            joint_rot: f.joint_rot,
            joint_pos: f.joint_pos,
            joint_vel: f.joint_vel,
            joint_angvel: f.joint_angvel,
        };
        m.validate(skeleton.joint_count())?;
        for (t, (ro, jr)) in m.root_orient.iter().zip(&m.joint_rot).enumerate() {
            crate::rotmath::rot6d_to_matrix(ro).map_err(|e| Error::Schema(format!("frames.root_orient[{t}]: {e}")))?;
            for (k, r) in jr.iter().enumerate() {
                crate::rotmath::rot6d_to_matrix(r)
                    .map_err(|e| Error::Schema(format!("frames.joint_rot[{t}][{k}]: {e}")))?;
            }
        }
        Ok((m, skeleton))
    }
}

/// On-disk keyframe document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyframeFile {
    pub version: u32,
    /// Number of frames in the motion to complete.
    pub length: usize,
    pub frames: Vec<KeyPose>,
}

impl KeyframeFile {
    pub fn new(y: &KeyframeSpec) -> Self {
        KeyframeFile {
            version: FORMAT_VERSION,
            length: y.len(),
            frames: y.poses.clone(),
        }
    }

    pub fn into_spec(self, joints: usize) -> Result<KeyframeSpec, Error> {
        if self.version != FORMAT_VERSION {
            return Err(Error::Schema(format!("version: unsupported version {}", self.version)));
        }
        let mut mask = vec![false; self.length];
        for (i, p) in self.frames.iter().enumerate() {
            if p.index >= self.length {
                return Err(Error::Schema(format!(
                    "frames[{i}].index: {} is outside the motion",
                    p.index
                )));
            }
            if mask[p.index] {
                return Err(Error::Schema(format!("frames[{i}].index: duplicate frame {}", p.index)));
            }
            mask[p.index] = true;
        }
        let mut poses = self.frames;
        poses.sort_by_key(|p| p.index);
        let spec = KeyframeSpec { mask, poses };
        spec.validate(joints)?;
        Ok(spec)
    }
}

fn parse<T: DeserializeOwned>(text: &str) -> Result<T, Error> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Schema(format!("{path}: {}", e.into_inner()))
    })
}

pub fn parse_motion(text: &str) -> Result<(MotionSequence, Skeleton), Error> {
    parse::<MotionFile>(text)?.into_parts()
}

pub fn read_motion(path: &Path) -> Result<(MotionSequence, Skeleton), Error> {
    parse_motion(&fs::read_to_string(path)?)
}

pub fn write_motion(path: &Path, m: &MotionSequence, s: &Skeleton) -> Result<(), Error> {
    fs::write(path, serde_json::to_string(&MotionFile::new(m, s))?)?;
    Ok(())
}

pub fn read_keyframes(path: &Path, joints: usize) -> Result<KeyframeSpec, Error> {
    parse::<KeyframeFile>(&fs::read_to_string(path)?)?.into_spec(joints)
}

pub fn write_keyframes(path: &Path, y: &KeyframeSpec) -> Result<(), Error> {
    fs::write(path, serde_json::to_string_pretty(&KeyframeFile::new(y))?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{generate_synthetic_dataset, FamilyParams};

    fn sample() -> MotionSequence {
        generate_synthetic_dataset(&FamilyParams::default(), 1, 5)
            .unwrap()
            .remove(0)
    }

    #[test]
    fn motion_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let m = sample();
        let s = Skeleton::humanoid();
        write_motion(&path, &m, &s).unwrap();
        let (m2, s2) = read_motion(&path).unwrap();
        assert_eq!(m, m2);
        assert_eq!(s, s2);
    }

    #[test]
    fn missing_field_is_named() {
        let mut v = serde_json::to_value(MotionFile::new(&sample(), &Skeleton::humanoid())).unwrap();
        v["frames"].as_object_mut().unwrap().remove("joint_angvel");
        let err = parse_motion(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("joint_angvel"), "{err}");
    }

    #[test]
    fn bad_values_report_their_path() {
        let mut v = serde_json::to_value(MotionFile::new(&sample(), &Skeleton::humanoid())).unwrap();
        v["frames"]["root_trans"][3][1] = serde_json::json!("x");
        let err = parse_motion(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("frames.root_trans[3][1]"), "{err}");
    }

    #[test]
    fn zero_fps_is_rejected() {
        let mut f = MotionFile::new(&sample(), &Skeleton::humanoid());
        f.fps = 0.0;
        let err = parse_motion(&serde_json::to_string(&f).unwrap())
            .unwrap_err()
            .to_string();
        assert!(err.contains("fps"), "{err}");
    }

    #[test]
    fn keyframes_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.json");
        let m = sample();
        let mut mask = vec![false; m.len()];
        mask[0] = true;
        mask[77] = true;
        let y = m.keyframes(&mask).unwrap();
        write_keyframes(&path, &y).unwrap();
        assert_eq!(read_keyframes(&path, 10).unwrap(), y);
    }
}
