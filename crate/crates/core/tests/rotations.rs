use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use inrmotion::motion::{KeyPose, KeyframeSpec, Skeleton};
use inrmotion::rotmath::{
    geodesic_distance, mat_mul, rot6d_to_matrix, rot_x, rot_y, rot_z, slerp, slerp_motion, transpose, Mat3, Quat, Rot6D,
};
use proptest::prelude::*;

fn quat() -> impl Strategy<Value = Quat> {
    prop::array::uniform4(-1.0f64..1.0)
        .prop_filter("away from zero", |v| v.iter().map(|x| x * x).sum::<f64>() > 0.05)
        .prop_map(|v| Quat::new(v[0], v[1], v[2], v[3]).normalized())
}

/// Rotation angle of `q` computed from scratch: `2 atan2(|v|, |w|)`.
fn quat_angle(q: &Quat) -> f64 {
    2.0 * (q.x * q.x + q.y * q.y + q.z * q.z).sqrt().atan2(q.w.abs())
}

fn relative(a: &Quat, b: &Quat) -> Quat {
    // conj(a) * b, written out.
    Quat::new(
        a.w * b.w + a.x * b.x + a.y * b.y + a.z * b.z,
        a.w * b.x - a.x * b.w - a.y * b.z + a.z * b.y,
        a.w * b.y + a.x * b.z - a.y * b.w - a.z * b.x,
        a.w * b.z - a.x * b.y + a.y * b.x - a.z * b.w,
    )
}

fn max_diff(a: &Mat3, b: &Mat3) -> f64 {
    (0..3)
        .flat_map(|i| (0..3).map(move |j| (a[i][j] - b[i][j]).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn six_d_examples() {
    let i = rot6d_to_matrix(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
    assert_eq!(i, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    assert_eq!(rot6d_to_matrix(&[2.0, 0.0, 0.0, 0.0, 3.0, 0.0]).unwrap(), i);
    assert!(rot6d_to_matrix(&[0.0; 6]).is_err());
    assert!(rot6d_to_matrix(&[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]).is_err());
}

#[test]
fn geodesic_examples() {
    let i = rot_z(0.0);
    for theta in [0.1, 1.0, 2.0, 3.0] {
        assert!((geodesic_distance(&i, &rot_z(theta)).unwrap() - theta).abs() < 1e-12);
    }
    assert!((geodesic_distance(&i, &rot_x(PI)).unwrap() - PI).abs() < 1e-7);
    let r = mat_mul(&rot_x(0.3), &rot_y(1.1));
    assert_eq!(geodesic_distance(&r, &r).unwrap(), 0.0);
}

#[test]
fn slerp_examples() {
    let q = Quat::from_matrix(&mat_mul(&rot_y(0.4), &rot_x(-1.2)));
    for t in [0.0, 0.3, 1.0] {
        let s = slerp(&q, &q, t);
        assert!((s.dot(&q) - 1.0).abs() < 1e-12);
    }
    let half = slerp(&Quat::IDENTITY, &Quat::from_matrix(&rot_z(FRAC_PI_2)), 0.5);
    assert!(max_diff(&half.to_matrix(), &rot_z(FRAC_PI_4)) < 1e-12);
}

fn pose(index: usize, yaw: f64, x: f64) -> KeyPose {
    let sk = Skeleton::humanoid();
    KeyPose {
        index,
        root_orient: Rot6D::from_matrix(&rot_y(yaw)).0,
        root_trans: [x, 0.9, 0.0],
        joint_rot: vec![Rot6D::identity().0; sk.joint_count()],
        joint_pos: sk.offset.clone(),
    }
}

fn spec(frames: usize, poses: Vec<KeyPose>) -> KeyframeSpec {
    let mut mask = vec![false; frames];
    poses.iter().for_each(|p| mask[p.index] = true);
    KeyframeSpec { mask, poses }
}

#[test]
fn slerp_motion_examples() {
    let sk = Skeleton::humanoid();
    let same = slerp_motion(&spec(40, vec![pose(5, 0.7, 0.2), pose(30, 0.7, 0.2)]), &sk, 30.0).unwrap();
    for t in 0..40 {
        assert!(max_diff(&same.root_orient_matrix(t).unwrap(), &rot_y(0.7)) < 1e-12);
        assert!((same.root_trans[t][0] - 0.2).abs() < 1e-15);
    }

    let m = slerp_motion(
        &spec(101, vec![pose(0, 0.0, 0.0), pose(100, FRAC_PI_2, 1.0)]),
        &sk,
        30.0,
    )
    .unwrap();
    assert!((m.root_trans[50][0] - 0.5).abs() < 1e-12);
    assert!(max_diff(&m.root_orient_matrix(50).unwrap(), &rot_y(FRAC_PI_4)) < 1e-12);

    // Constant hold outside the keyframe span.
    let held = slerp_motion(&spec(20, vec![pose(5, 0.3, 1.0), pose(10, 0.6, 2.0)]), &sk, 30.0).unwrap();
    assert_eq!(held.root_trans[0], held.root_trans[5]);
    assert_eq!(held.root_trans[19], held.root_trans[10]);
    let single = slerp_motion(&spec(8, vec![pose(3, 0.3, 1.0)]), &sk, 30.0).unwrap();
    assert!(single.root_trans.iter().all(|r| *r == [1.0, 0.9, 0.0]));

    assert!(slerp_motion(&spec(8, vec![]), &sk, 30.0).is_err());
}

proptest! {
    #[test]
    fn geodesic_matches_quaternion_log(a in quat(), b in quat()) {
        let g = geodesic_distance(&a.to_matrix(), &b.to_matrix()).unwrap();
        let oracle = quat_angle(&relative(&a, &b));
        // acos loses precision near 0 and pi; the oracle does not.
        prop_assume!(oracle > 1e-3 && oracle < PI - 1e-3);
        prop_assert!((g - oracle).abs() < 1e-9, "{g} vs {oracle}");
        prop_assert!((g - geodesic_distance(&b.to_matrix(), &a.to_matrix()).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn six_d_round_trip_is_exact(v in prop::array::uniform6(-2.0f64..2.0)) {
        let m = match rot6d_to_matrix(&v) {
            Ok(m) => m,
            Err(_) => return Ok(()),
        };
        let ident = mat_mul(&transpose(&m), &m);
        prop_assert!(max_diff(&ident, &rot_z(0.0)) < 1e-12);
        prop_assert!(max_diff(&rot6d_to_matrix(&Rot6D::from_matrix(&m).0).unwrap(), &m) < 1e-9);
    }

    #[test]
    fn six_d_is_scale_invariant(v in prop::array::uniform6(-2.0f64..2.0), a in 0.01f64..100.0, b in 0.01f64..100.0) {
        let Ok(m) = rot6d_to_matrix(&v) else { return Ok(()) };
        let s = [a * v[0], a * v[1], a * v[2], b * v[3], b * v[4], b * v[5]];
        prop_assert!(max_diff(&rot6d_to_matrix(&s).unwrap(), &m) < 1e-12);
    }

    #[test]
    fn slerp_has_constant_angular_velocity(q0 in quat(), q1 in quat(), t in 0.0f64..1.0) {
        let total = quat_angle(&relative(&q0, &q1));
        prop_assume!(total > 1e-3);
        let s = slerp(&q0, &q1, t);
        prop_assert!((quat_angle(&relative(&q0, &s)) - t * total).abs() < 1e-9);
    }

    #[test]
    fn slerp_stays_on_the_sphere(q0 in quat(), q1 in quat()) {
        for i in 0..=100 {
            let s = slerp(&q0, &q1, i as f64 / 100.0);
            prop_assert!((s.norm() - 1.0).abs() < 1e-9);
        }
        prop_assert!(slerp(&q0, &q1, 0.0).dot(&q0) > 1.0 - 1e-12);
        prop_assert!(slerp(&q0, &q1, 1.0).dot(&q1).abs() > 1.0 - 1e-12);
    }
}
