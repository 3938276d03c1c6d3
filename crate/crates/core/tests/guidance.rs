use std::f64::consts::PI;

use inrmotion::guidance::{
    blend_motions, geometric_values, img_update, keyframe_weights, manifold_target, root_path, stage1_ablation,
    stage1_step_ratio, GuidanceConfig, GuidanceMode, MeasurementOp, Stage1Config, Stage1Row, VARIANT_FULL, VARIANT_GEO,
};
use inrmotion::inrvae::{InrVae, VaeConfig};
use inrmotion::ldm::{Condition, DenoiserConfig, LatentStats, Ldm, ScheduleConfig};
use inrmotion::motion::{
    generate_synthetic_dataset, startend_mask, FamilyParams, FeatureStats, KeyframeSpec, MotionSequence,
};
use inrmotion::rotmath::{axis_angle, mat_mul, rot6d_to_matrix, slerp_motion, Rot6D};
use proptest::prelude::*;

fn vae() -> (InrVae, Vec<MotionSequence>) {
    let data = generate_synthetic_dataset(&FamilyParams::default(), 4, 5).unwrap();
    let config = VaeConfig {
        hidden: 32,
        depth: 3,
        enc_channels: 16,
        ..VaeConfig::default()
    };
    (
        InrVae::new(config, FeatureStats::compute(&data).unwrap()).unwrap(),
        data,
    )
}

/// A latent and keyframes taken from its own decoding.
fn exact_fit(vae: &InrVae, m: &MotionSequence) -> (Vec<f64>, MotionSequence, KeyframeSpec) {
    let z = vae.encode_mean(m).unwrap();
    let dec = vae.decode_motion(&z).unwrap();
    let mask: Vec<bool> = (0..dec.len()).map(|f| [3, 30, 64, 90, 127].contains(&f)).collect();
    let y = dec.keyframes(&mask).unwrap();
    (z, dec, y)
}

fn max_abs(a: &MotionSequence, b: &MotionSequence) -> f64 {
    let rows = |m: &MotionSequence| -> Vec<f64> { (0..m.len()).flat_map(|t| m.pose_vector(t)).collect() };
    rows(a)
        .iter()
        .zip(rows(b))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn geometric_loss_analytic_cases() {
    let (vae, data) = vae();
    let (z, _, y) = exact_fit(&vae, &data[0]);
    let v = geometric_values(&vae, &z, &y).unwrap();
    assert_eq!((v.trans, v.pos), (0.0, 0.0));
    // Clamped arccos bottoms out at acos(1 - 1e-7) ~ 4.5e-4 rad.
    assert!(v.ori < 1e-3 && v.rot < 1e-3);

    let mut shifted = y.clone();
    shifted.poses.iter_mut().for_each(|p| p.root_trans[2] += 0.1);
    let v = geometric_values(&vae, &z, &shifted).unwrap();
    assert!((v.trans - 0.1).abs() < 1e-12, "{}", v.trans);
    assert_eq!(v.pos, 0.0);

    let turn = axis_angle([0.3, -1.0, 0.5], PI / 6.0);
    let mut rotated = y.clone();
    for p in &mut rotated.poses {
        for r in &mut p.joint_rot {
            *r = Rot6D::from_matrix(&mat_mul(&rot6d_to_matrix(r).unwrap(), &turn)).0;
        }
    }
    let v = geometric_values(&vae, &z, &rotated).unwrap();
    assert!((v.rot - PI / 6.0).abs() < 1e-9, "{}", v.rot);

    let none = KeyframeSpec {
        mask: vec![false; 128],
        poses: vec![],
    };
    assert!(geometric_values(&vae, &z, &none).is_err());
}

#[test]
fn kernel_weights_have_gaussian_support() {
    let mut mask = vec![false; 128];
    mask[64] = true;
    let w = keyframe_weights(&mask, 9);
    for (f, v) in w.iter().enumerate() {
        let o = f as f64 - 64.0;
        if o.abs() > 4.0 {
            assert_eq!(*v, 0.0);
        } else {
            assert!((v - (-o * o / (2.0 * 1.5 * 1.5)).exp()).abs() < 1e-15);
            assert_eq!(*v, w[(128 - f) % 128]);
        }
    }
    assert_eq!(keyframe_weights(&mask, 0), vec![0.0; 128]);
}

proptest! {
    #[test]
    fn kernel_weights_peak_at_keyframes(mask in prop::collection::vec(any::<bool>(), 40), half in 0usize..7) {
        let w = 2 * half + 1;
        let k = keyframe_weights(&mask, w);
        if w == 1 {
            prop_assert_eq!(k.clone(), mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect::<Vec<_>>());
        }
        for (f, &v) in k.iter().enumerate() {
            prop_assert!((0.0..=1.0).contains(&v));
            if mask[f] {
                prop_assert_eq!(v, 1.0);
            }
            let near = (f.saturating_sub(half)..(f + half + 1).min(40)).any(|g| mask[g]);
            prop_assert_eq!(v > 0.0, near);
        }
    }
}

#[test]
fn manifold_blend_identities() {
    let (vae, data) = vae();
    let (z, dec, y) = exact_fit(&vae, &data[1]);
    let reference = slerp_motion(&y, &vae.skeleton, vae.config.fps).unwrap();
    let n = dec.len();
    assert_eq!(blend_motions(&dec, &reference, &vec![0.0; n]).unwrap(), dec);
    assert!(max_abs(&blend_motions(&dec, &reference, &vec![1.0; n]).unwrap(), &reference) < 1e-12);
    let w = keyframe_weights(&y.mask, 9);
    assert!(max_abs(&blend_motions(&reference, &reference, &w).unwrap(), &reference) < 1e-12);

    // No kernel: the target is the estimate's own round trip.
    let round_trip = vae.encode_mean(&vae.decode_motion(&z).unwrap()).unwrap();
    assert_eq!(manifold_target(&vae, &z, &y, 0).unwrap(), round_trip);
}

#[test]
fn update_without_step_sizes_is_identity() {
    let (vae, data) = vae();
    let (z, _, y) = exact_fit(&vae, &data[2]);
    let ldm = Ldm::new(
        DenoiserConfig {
            width: 16,
            blocks: 1,
            heads: 2,
            ..DenoiserConfig::default()
        },
        ScheduleConfig::default(),
        LatentStats::identity(80),
    )
    .unwrap();
    let cond = Condition::Keyframes(y);
    let z0: Vec<f64> = z.iter().map(|v| v + 0.3).collect();
    let zero = GuidanceConfig {
        mode: GuidanceMode::Img,
        lambda: 0.0,
        gamma: 0.0,
        ..GuidanceConfig::default()
    };
    assert_eq!(img_update(&ldm, &vae, &z0, &cond, &zero).unwrap().unwrap(), z0);
    let on = GuidanceConfig {
        mode: GuidanceMode::Img,
        lambda: 0.1,
        gamma: 0.1,
        ..GuidanceConfig::default()
    };
    assert_ne!(img_update(&ldm, &vae, &z0, &cond, &on).unwrap().unwrap(), z0);
}

#[test]
fn measurements_reproduce_their_source() {
    let (_, data) = vae();
    let m = &data[0];
    let mask = startend_mask(m.len(), 4).unwrap();
    assert_eq!(
        MeasurementOp::KeyframePose.apply(m, &mask).unwrap(),
        Condition::Keyframes(m.keyframes(&mask).unwrap())
    );
    let Condition::Trajectory(path) = MeasurementOp::RootTrajectory.apply(m, &mask).unwrap() else {
        panic!()
    };
    assert_eq!(path, root_path(m));
    assert!(path
        .iter()
        .zip(&m.root_trans)
        .all(|(p, r)| p[0] == r[0] && p[1] == r[2]));
}

#[test]
fn stage1_geometric_variant_from_the_answer_stays_at_zero() {
    let (vae, data) = vae();
    let (z, _, y) = exact_fit(&vae, &data[3]);
    let config = Stage1Config {
        steps: 5,
        lambda: 0.05,
        gamma: 0.02,
        ..Stage1Config::default()
    };
    let rows = stage1_ablation(&vae, &LatentStats::identity(80), &z, &y, &config).unwrap();
    assert_eq!(rows.len(), 12);
    // The geometric variant sits at its clamped floor; the manifold variant
    // needs a trained round trip and is checked in the acceptance suite.
    let geo: Vec<&Stage1Row> = rows.iter().filter(|r| r.variant == VARIANT_GEO).collect();
    assert!(geo
        .iter()
        .all(|r| r.l_trans == 0.0 && r.l_pos == 0.0 && r.l_rot < 1e-3 && r.l_ori < 1e-3));
}

#[test]
fn step_ratio_counts_steps_to_the_geometric_final_rotation_error() {
    let row = |step, variant: &str, l_rot| Stage1Row {
        step,
        variant: variant.into(),
        l_trans: 0.0,
        l_pos: 0.0,
        l_ori: 0.0,
        l_rot,
    };
    let geo = [1.0, 0.8, 0.6, 0.5, 0.4];
    let full = [1.0, 0.5, 0.3, 0.2, 0.1];
    let mut rows: Vec<Stage1Row> = geo.iter().enumerate().map(|(i, &v)| row(i, VARIANT_GEO, v)).collect();
    rows.extend(full.iter().enumerate().map(|(i, &v)| row(i, VARIANT_FULL, v)));
    // geometric reaches 0.4 at step 4, full at step 2
    assert_eq!(stage1_step_ratio(&rows), Some(0.5));
    rows.iter_mut()
        .filter(|r| r.variant == VARIANT_FULL)
        .for_each(|r| r.l_rot = 0.9);
    assert_eq!(stage1_step_ratio(&rows), None);
}
