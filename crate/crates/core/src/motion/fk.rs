use diffcore::{DiffError, Tape, Tensor, Var};

use super::{MotionSequence, Skeleton};
use crate::rotmath::{self, Mat3};
use crate::Error;

/// Root-relative joint positions in the root's frame (identity root orientation).
pub fn local_positions(skeleton: &Skeleton, joint_rot: &[[f64; 6]]) -> Result<Vec<[f64; 3]>, Error> {
    let j = skeleton.joint_count();
    if joint_rot.len() != j {
        return Err(Error::Shape(format!(
            "expected {j} joint rotations, got {}",
            joint_rot.len()
        )));
    }
    let mut global: Vec<Mat3> = Vec::with_capacity(j);
    let mut pos: Vec<[f64; 3]> = Vec::with_capacity(j);
    for k in 0..j {
        let local = rotmath::rot6d_to_matrix(&joint_rot[k])?;
        if skeleton.parent[k] < 0 {
            global.push(local);
            pos.push(skeleton.offset[k]);
        } else {
            let p = skeleton.parent[k] as usize;
            let o = rotmath::mat_vec(&global[p], skeleton.offset[k]);
            pos.push([pos[p][0] + o[0], pos[p][1] + o[1], pos[p][2] + o[2]]);
            global.push(rotmath::mat_mul(&global[p], &local));
        }
    }
    Ok(pos)
}

/// World-space joint positions of one frame.
pub fn forward_kinematics(
    skeleton: &Skeleton,
    joint_rot: &[[f64; 6]],
    root_orient: &[f64; 6],
    root_trans: &[f64; 3],
) -> Result<Vec<[f64; 3]>, Error> {
    let r = rotmath::rot6d_to_matrix(root_orient)?;
    Ok(local_positions(skeleton, joint_rot)?
        .into_iter()
        .map(|p| {
            let g = rotmath::mat_vec(&r, p);
            [g[0] + root_trans[0], g[1] + root_trans[1], g[2] + root_trans[2]]
        })
        .collect())
}

/// World-space positions `T x J` from a sequence's stored root-relative
/// positions and root transform.
pub fn global_positions(m: &MotionSequence) -> Result<Vec<Vec<[f64; 3]>>, Error> {
    (0..m.len())
        .map(|t| {
            let r = m.root_orient_matrix(t)?;
            let rt = m.root_trans[t];
            Ok(m.joint_pos[t]
                .iter()
                .map(|&p| {
                    let g = rotmath::mat_vec(&r, p);
                    [g[0] + rt[0], g[1] + rt[1], g[2] + rt[2]]
                })
                .collect())
        })
        .collect()
}

/// Differentiable forward kinematics for one frame.
///
/// `joint_rot` is `[J, 6]`, `root_orient` `[1, 6]`, `root_trans` `[1, 3]`;
/// returns world positions `[J, 3]`. Passing `None` for the root transform
/// yields root-relative positions.
pub fn tape_fk(
    tape: &mut Tape,
    skeleton: &Skeleton,
    joint_rot: Var,
    root: Option<(Var, Var)>,
) -> Result<Var, DiffError> {
    let j = skeleton.joint_count();
    let mats = rotmath::tape_rot6d_to_matrix(tape, joint_rot)?;
    let mut global: Vec<Var> = Vec::with_capacity(j);
    let mut pos: Vec<Var> = Vec::with_capacity(j);
    for k in 0..j {
        let local = tape.slice(mats, 0, k, 1)?;
        let off = tape.constant(Tensor::new(vec![1, 3], skeleton.offset[k].to_vec())?);
        if skeleton.parent[k] < 0 {
            global.push(local);
            pos.push(off);
        } else {
            let p = skeleton.parent[k] as usize;
            let o = tape.bmv3(global[p], off)?;
            pos.push(tape.add(pos[p], o)?);
            global.push(tape.bmm3(global[p], local)?);
        }
    }
    let local_pos = tape.concat(&pos, 0)?;
    match root {
        None => Ok(local_pos),
        Some((ro, rt)) => {
            let rm = rotmath::tape_rot6d_to_matrix(tape, ro)?;
            let rms = tape.repeat_rows(rm, j)?;
            let rotated = tape.bmv3(rms, local_pos)?;
            let shift = tape.repeat_rows(rt, j)?;
            tape.add(rotated, shift)
        }
    }
}
