//! Rotation representations: continuous 6D form, 3x3 matrices, unit
//! quaternions, geodesic distance and spherical interpolation.
//!
//! Matrices are `[[f64; 3]; 3]` indexed `[row][col]`. On a tape they are laid
//! out as `[n, 9]` row-major, which is what [`tape_rot6d_to_matrix`] produces
//! and [`tape_geodesic`] consumes.

use diffcore::{DiffError, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::motion::{KeyframeSpec, MotionSequence, Skeleton};
use crate::Error;

pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Orthonormality tolerance for inputs to [`geodesic_distance`].
pub const ORTHONORMAL_TOL: f64 = 1e-6;

/// First two columns of a rotation matrix, column-major: `[c0x, c0y, c0z, c1x, c1y, c1z]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rot6D(pub [f64; 6]);

impl Rot6D {
    pub fn identity() -> Self {
        Rot6D([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    }

    pub fn from_matrix(m: &Mat3) -> Self {
        Rot6D([m[0][0], m[1][0], m[2][0], m[0][1], m[1][1], m[2][1]])
    }

    pub fn to_matrix(&self) -> Result<Mat3, Error> {
        rot6d_to_matrix(&self.0)
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

/// Gram-Schmidt construction of a rotation from its 6D form.
pub fn rot6d_to_matrix(v: &[f64; 6]) -> Result<Mat3, Error> {
    let a1 = [v[0], v[1], v[2]];
    let a2 = [v[3], v[4], v[5]];
    let n1 = norm(a1);
    if !(n1 > 1e-8) {
        return Err(Error::DegenerateRotation("first 6D column has near-zero norm".into()));
    }
    let b1 = [a1[0] / n1, a1[1] / n1, a1[2] / n1];
    let d = dot(b1, a2);
    let u2 = [a2[0] - d * b1[0], a2[1] - d * b1[1], a2[2] - d * b1[2]];
    let n2 = norm(u2);
    if !(n2 > 1e-8 * norm(a2).max(1.0)) {
        return Err(Error::DegenerateRotation("6D columns are parallel".into()));
    }
    let b2 = [u2[0] / n2, u2[1] / n2, u2[2] / n2];
    let b3 = cross(b1, b2);
    Ok([[b1[0], b2[0], b3[0]], [b1[1], b2[1], b3[1]], [b1[2], b2[2], b3[2]]])
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat_vec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [dot(a[0], v), dot(a[1], v), dot(a[2], v)]
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn determinant(a: &Mat3) -> f64 {
    dot(a[0], cross(a[1], a[2]))
}

/// Largest deviation of `aᵀa` from the identity.
pub fn orthonormality_error(a: &Mat3) -> f64 {
    let p = mat_mul(&transpose(a), a);
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((p[i][j] - target).abs());
        }
    }
    worst
}

/// Rotation about a unit axis by `angle` radians.
pub fn axis_angle(axis: [f64; 3], angle: f64) -> Mat3 {
    let n = norm(axis);
    let [x, y, z] = [axis[0] / n, axis[1] / n, axis[2] / n];
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

pub fn rot_x(angle: f64) -> Mat3 {
    axis_angle([1.0, 0.0, 0.0], angle)
}

pub fn rot_y(angle: f64) -> Mat3 {
    axis_angle([0.0, 1.0, 0.0], angle)
}

pub fn rot_z(angle: f64) -> Mat3 {
    axis_angle([0.0, 0.0, 1.0], angle)
}

/// Angle of `r1 r2⁻¹`, `arccos((tr(r1 r2ᵀ) - 1) / 2)`, in `[0, π]`.
pub fn geodesic_distance(r1: &Mat3, r2: &Mat3) -> Result<f64, Error> {
    for (name, r) in [("first", r1), ("second", r2)] {
        let err = orthonormality_error(r);
        if err > ORTHONORMAL_TOL || determinant(r) < 0.0 {
            return Err(Error::NotOrthonormal(format!("{name} rotation deviates by {err:e}")));
        }
    }
    let tr: f64 = (0..3).map(|i| (0..3).map(|j| r1[i][j] * r2[i][j]).sum::<f64>()).sum();
    Ok(((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos())
}

/// Unit quaternion, scalar first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Self {
        let n = norm(axis);
        let (s, c) = (angle / 2.0).sin_cos();
        Quat::new(c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n)
    }

    pub fn dot(&self, o: &Quat) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&self, s: f64) -> Quat {
        Quat::new(self.w * s, self.x * s, self.y * s, self.z * s)
    }

    pub fn normalized(&self) -> Quat {
        self.scale(1.0 / self.norm())
    }

    pub fn neg(&self) -> Quat {
        self.scale(-1.0)
    }

    pub fn conj(&self) -> Quat {
        Quat::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn mul(&self, o: &Quat) -> Quat {
        Quat::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    /// Representative with `w >= 0`.
    pub fn canonical(&self) -> Quat {
        if self.w < 0.0 {
            self.neg()
        } else {
            *self
        }
    }

    pub fn from_matrix(m: &Mat3) -> Quat {
        let tr = m[0][0] + m[1][1] + m[2][2];
        let q = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            Quat::new(
                0.25 * s,
                (m[2][1] - m[1][2]) / s,
                (m[0][2] - m[2][0]) / s,
                (m[1][0] - m[0][1]) / s,
            )
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            Quat::new(
                (m[2][1] - m[1][2]) / s,
                0.25 * s,
                (m[0][1] + m[1][0]) / s,
                (m[0][2] + m[2][0]) / s,
            )
        } else if m[1][1] > m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            Quat::new(
                (m[0][2] - m[2][0]) / s,
                (m[0][1] + m[1][0]) / s,
                0.25 * s,
                (m[1][2] + m[2][1]) / s,
            )
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            Quat::new(
                (m[1][0] - m[0][1]) / s,
                (m[0][2] + m[2][0]) / s,
                (m[1][2] + m[2][1]) / s,
                0.25 * s,
            )
        };
        q.normalized().canonical()
    }

    pub fn to_matrix(&self) -> Mat3 {
        let Quat { w, x, y, z } = *self;
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    /// Rotation vector (axis times angle, angle in `[0, π]`).
    pub fn log(&self) -> [f64; 3] {
        let q = self.canonical();
        let s = (q.x * q.x + q.y * q.y + q.z * q.z).sqrt();
        if s < 1e-12 {
            return [2.0 * q.x, 2.0 * q.y, 2.0 * q.z];
        }
        let angle = 2.0 * s.atan2(q.w);
        [q.x / s * angle, q.y / s * angle, q.z / s * angle]
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        let l = self.log();
        norm(l)
    }

    /// Angle of the relative rotation between two quaternions.
    pub fn angle_to(&self, o: &Quat) -> f64 {
        self.conj().mul(o).angle()
    }
}

/// Shortest-arc spherical interpolation; `t` in `[0, 1]`.
pub fn slerp(q0: &Quat, q1: &Quat, t: f64) -> Quat {
    let mut q1 = *q1;
    let mut d = q0.dot(&q1);
    if d < 0.0 {
        q1 = q1.neg();
        d = -d;
    }
    let theta = d.clamp(-1.0, 1.0).acos();
    if theta < 1e-6 {
        let lerp = Quat::new(
            q0.w + t * (q1.w - q0.w),
            q0.x + t * (q1.x - q0.x),
            q0.y + t * (q1.y - q0.y),
            q0.z + t * (q1.z - q0.z),
        );
        return lerp.normalized();
    }
    let s = theta.sin();
    let a = ((1.0 - t) * theta).sin() / s;
    let b = (t * theta).sin() / s;
    Quat::new(
        a * q0.w + b * q1.w,
        a * q0.x + b * q1.x,
        a * q0.y + b * q1.y,
        a * q0.z + b * q1.z,
    )
}

/// Slerp between two rotations given in 6D form.
pub fn slerp_rot6d(a: &[f64; 6], b: &[f64; 6], t: f64) -> Result<[f64; 6], Error> {
    let qa = Quat::from_matrix(&rot6d_to_matrix(a)?);
    let qb = Quat::from_matrix(&rot6d_to_matrix(b)?);
    Ok(Rot6D::from_matrix(&slerp(&qa, &qb, t).to_matrix()).0)
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + t * (b[0] - a[0]),
        a[1] + t * (b[1] - a[1]),
        a[2] + t * (b[2] - a[2]),
    ]
}

/// Reference motion interpolated through the keyframes.
///
/// Rotations are slerped between temporally adjacent keyframes, root
/// translation and joint positions are interpolated linearly, and frames
/// outside the keyframe span hold the nearest keyframe pose. Velocities are
/// recomputed by differencing.
pub fn slerp_motion(y: &KeyframeSpec, skeleton: &Skeleton, fps: f64) -> Result<MotionSequence, Error> {
    if y.poses.is_empty() {
        return Err(Error::Keyframes("cannot interpolate an empty keyframe set".into()));
    }
    y.validate(skeleton.joint_count())?;
    let n = y.len();
    let j = skeleton.joint_count();
    let mut root_orient = Vec::with_capacity(n);
    let mut root_trans = Vec::with_capacity(n);
    let mut joint_rot = Vec::with_capacity(n);
    let mut joint_pos = Vec::with_capacity(n);
    let poses = &y.poses;
    let mut seg = 0;
    for f in 0..n {
        while seg + 1 < poses.len() && poses[seg + 1].index <= f {
            seg += 1;
        }
        let (a, b, t) = if f <= poses[0].index {
            (&poses[0], &poses[0], 0.0)
        } else if seg + 1 >= poses.len() {
            (&poses[seg], &poses[seg], 0.0)
        } else {
            let (pa, pb) = (&poses[seg], &poses[seg + 1]);
            (pa, pb, (f - pa.index) as f64 / (pb.index - pa.index) as f64)
        };
        root_orient.push(slerp_rot6d(&a.root_orient, &b.root_orient, t)?);
        root_trans.push(lerp3(a.root_trans, b.root_trans, t));
        let mut rots = Vec::with_capacity(j);
        let mut pos = Vec::with_capacity(j);
        for k in 0..j {
            rots.push(slerp_rot6d(&a.joint_rot[k], &b.joint_rot[k], t)?);
            pos.push(lerp3(a.joint_pos[k], b.joint_pos[k], t));
        }
        joint_rot.push(rots);
        joint_pos.push(pos);
    }
    MotionSequence::from_pose_tracks(fps, root_orient, root_trans, joint_rot, joint_pos)
}

// ---- differentiable versions ----------------------------------------------

/// `[m, 6] -> [m, 9]` row-major rotation matrices by Gram-Schmidt.
pub fn tape_rot6d_to_matrix(tape: &mut Tape, v: Var) -> Result<Var, DiffError> {
    let a1 = tape.slice(v, 1, 0, 3)?;
    let a2 = tape.slice(v, 1, 3, 3)?;
    let b1 = tape_normalize_rows(tape, a1)?;
    let p = tape.mul(b1, a2)?;
    let d = tape.sum_axis(p, 1)?;
    let d3 = tape.repeat_cols(d, 3)?;
    let proj = tape.mul(d3, b1)?;
    let u2 = tape.sub(a2, proj)?;
    let b2 = tape_normalize_rows(tape, u2)?;
    let b3 = tape_cross(tape, b1, b2)?;
    let cols = tape.concat(&[b1, b2, b3], 1)?;
    tape.gather(cols, 1, &[0, 3, 6, 1, 4, 7, 2, 5, 8])
}

fn tape_normalize_rows(tape: &mut Tape, a: Var) -> Result<Var, DiffError> {
    let sq = tape.square(a)?;
    let s = tape.sum_axis(sq, 1)?;
    let n = tape.sqrt(s)?;
    let n3 = tape.repeat_cols(n, 3)?;
    tape.div(a, n3)
}

fn tape_cross(tape: &mut Tape, a: Var, b: Var) -> Result<Var, DiffError> {
    let a_yzx = tape.gather(a, 1, &[1, 2, 0])?;
    let a_zxy = tape.gather(a, 1, &[2, 0, 1])?;
    let b_yzx = tape.gather(b, 1, &[1, 2, 0])?;
    let b_zxy = tape.gather(b, 1, &[2, 0, 1])?;
    let l = tape.mul(a_yzx, b_zxy)?;
    let r = tape.mul(a_zxy, b_yzx)?;
    tape.sub(l, r)
}

/// Per-row geodesic angle between `[m, 9]` rotation matrices, as `[m, 1]`.
pub fn tape_geodesic(tape: &mut Tape, r1: Var, r2: Var) -> Result<Var, DiffError> {
    let p = tape.mul(r1, r2)?;
    let tr = tape.sum_axis(p, 1)?;
    let c = tape.affine(tr, 0.5, -0.5)?;
    tape.acos(c)
}

/// Row-major `[m, 9]` tensor of plain matrices.
pub fn matrices_to_tensor(ms: &[Mat3]) -> Tensor {
    let data = ms.iter().flat_map(|m| m.iter().flatten().copied()).collect();
    Tensor::new(vec![ms.len(), 9], data).expect("matrix tensor")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_quat(rng: &mut ChaCha8Rng) -> Quat {
        loop {
            let q = Quat::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if q.norm() > 0.1 {
                return q.normalized();
            }
        }
    }

    fn close(a: &Mat3, b: &Mat3, tol: f64) -> bool {
        (0..3).all(|i| (0..3).all(|j| (a[i][j] - b[i][j]).abs() <= tol))
    }

    #[test]
    fn canonical_6d_is_identity() {
        assert_eq!(rot6d_to_matrix(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap(), IDENTITY);
        assert_eq!(rot6d_to_matrix(&[2.0, 0.0, 0.0, 0.0, 3.0, 0.0]).unwrap(), IDENTITY);
    }

    #[test]
    fn degenerate_6d_is_an_error() {
        assert!(rot6d_to_matrix(&[0.0; 6]).is_err());
        assert!(rot6d_to_matrix(&[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]).is_err());
    }

    #[test]
    fn random_6d_round_trips_through_the_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let v: [f64; 6] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let m = rot6d_to_matrix(&v).unwrap();
            assert!(orthonormality_error(&m) < 1e-12);
            assert!((determinant(&m) - 1.0).abs() < 1e-12);
            let again = Rot6D::from_matrix(&m).to_matrix().unwrap();
            assert!(close(&m, &again, 1e-9));
        }
    }

    #[test]
    fn geodesic_analytic_cases() {
        let r = Quat::from_axis_angle([1.0, 2.0, -0.5], 0.7).to_matrix();
        assert!(geodesic_distance(&r, &r).unwrap() < 1e-7);
        for theta in [0.1, 1.0, 2.0, 3.0] {
            assert!((geodesic_distance(&IDENTITY, &rot_z(theta)).unwrap() - theta).abs() < 1e-9);
        }
        assert!(
            (geodesic_distance(&IDENTITY, &rot_x(std::f64::consts::PI)).unwrap() - std::f64::consts::PI).abs() < 1e-9
        );
    }

    #[test]
    fn geodesic_rejects_non_rotations() {
        let mut m = IDENTITY;
        m[0][0] = 1.1;
        assert!(matches!(
            geodesic_distance(&m, &IDENTITY),
            Err(Error::NotOrthonormal(_))
        ));
    }

    #[test]
    fn slerp_endpoints_and_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = random_quat(&mut rng);
        for t in [0.0, 0.3, 1.0] {
            assert!(slerp(&q, &q, t).angle_to(&q) < 1e-9);
        }
        let half = slerp(
            &Quat::IDENTITY,
            &Quat::from_matrix(&rot_z(std::f64::consts::FRAC_PI_2)),
            0.5,
        );
        assert!(close(&half.to_matrix(), &rot_z(std::f64::consts::FRAC_PI_4), 1e-12));
    }

    #[test]
    fn slerp_takes_the_short_arc() {
        let q0 = Quat::from_axis_angle([0.0, 1.0, 0.0], 0.2);
        let q1 = Quat::from_axis_angle([0.0, 1.0, 0.0], 0.6).neg();
        let mid = slerp(&q0, &q1, 0.5);
        assert!((mid.angle_to(&Quat::from_axis_angle([0.0, 1.0, 0.0], 0.4))).abs() < 1e-12);
    }

    #[test]
    fn quaternion_matrix_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let q = random_quat(&mut rng).canonical();
            let back = Quat::from_matrix(&q.to_matrix());
            assert!((back.dot(&q).abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_rotation_matches_plain_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vs: Vec<[f64; 6]> = (0..4)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(vec![4, 6], vs.iter().flatten().copied().collect()).unwrap());
        let m = tape_rot6d_to_matrix(&mut tape, v).unwrap();
        let plain: Vec<Mat3> = vs.iter().map(|v| rot6d_to_matrix(v).unwrap()).collect();
        assert!(tape.value(m).max_abs_diff(&matrices_to_tensor(&plain)) < 1e-14);

        let rots = tape.constant(matrices_to_tensor(&plain));
        let ident = tape.constant(matrices_to_tensor(&[IDENTITY; 4]));
        let g = tape_geodesic(&mut tape, rots, ident).unwrap();
        for (k, r) in plain.iter().enumerate() {
            let expect = geodesic_distance(r, &IDENTITY).unwrap();
            assert!((tape.value(g).data()[k] - expect).abs() < 1e-9);
        }
    }
}
