use serde::{Deserialize, Serialize};

use super::MotionSequence;
use crate::Error;

/// Channel offsets of the per-frame feature vector for `J` joints.
///
/// Layout: `[root_orient 6 | root_trans 3 | joint_rot 6J | joint_pos 3J |
/// joint_vel 3J | joint_angvel 3J]`. The first `pose_dim` channels form the
/// pose vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureLayout {
    pub joints: usize,
}

impl FeatureLayout {
    pub fn new(joints: usize) -> Self {
        FeatureLayout { joints }
    }
    pub fn root_orient(&self) -> usize {
        0
    }
    pub fn root_trans(&self) -> usize {
        6
    }
    pub fn joint_rot(&self) -> usize {
        9
    }
    pub fn joint_pos(&self) -> usize {
        9 + 6 * self.joints
    }
    pub fn joint_vel(&self) -> usize {
        9 + 9 * self.joints
    }
    pub fn joint_angvel(&self) -> usize {
        9 + 12 * self.joints
    }
    pub fn pose_dim(&self) -> usize {
        9 + 9 * self.joints
    }
    pub fn feature_dim(&self) -> usize {
        9 + 15 * self.joints
    }
}

/// Per-channel z-score statistics over a dataset's feature vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Standard deviations below this are replaced by 1.
pub const STD_FLOOR: f64 = 1e-6;

impl FeatureStats {
    pub fn compute(data: &[MotionSequence]) -> Result<Self, Error> {
        let first = data
            .first()
            .ok_or_else(|| Error::InvalidParam("empty dataset".into()))?;
        let dim = FeatureLayout::new(first.joint_count()).feature_dim();
        let mut sum = vec![0.0; dim];
        let mut count = 0usize;
        for m in data {
            for t in 0..m.len() {
                let f = m.feature_vector(t);
                if f.len() != dim {
                    return Err(Error::Shape("sequences have different joint counts".into()));
                }
                for (s, v) in sum.iter_mut().zip(&f) {
                    *s += v;
                }
                count += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; dim];
        for m in data {
            for t in 0..m.len() {
                for ((s, v), mu) in sq.iter_mut().zip(m.feature_vector(t)).zip(&mean) {
                    *s += (v - mu) * (v - mu);
                }
            }
        }
        let std = sq
            .iter()
            .map(|s| {
                let sd = (s / count as f64).sqrt();
                if sd < STD_FLOOR {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(FeatureStats { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Normalize the leading channels of `v` (which may be a pose vector).
    pub fn normalize(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    pub fn denormalize(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| x * s + m)
            .collect()
    }

    /// Normalized `T x feature_dim` matrix, row-major.
    pub fn normalized_features(&self, m: &MotionSequence) -> Vec<f64> {
        (0..m.len())
            .flat_map(|t| self.normalize(&m.feature_vector(t)))
            .collect()
    }
}
