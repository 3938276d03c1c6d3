//! Finite-difference checks of every differentiable composite.
//!
//! Each case builds a scalar from random inputs drawn from `seed`, then
//! compares the tape gradient with central differences (`h = 1e-5`).

use diffcore::fdcheck::{central_gradient, max_relative_error};
use diffcore::{Tape, Tensor, Var};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::guidance::{img_objective, manifold_target, GeoWeights, GuidanceConfig, GuidanceMode};
use crate::inrvae::{InrVae, VaeConfig};
use crate::ldm::{Condition, DenoiserConfig, KeyframeEmbedding, LatentStats, Ldm, ScheduleConfig};
use crate::motion::{generate_synthetic_dataset, random_mask, tape_fk, FamilyParams, FeatureStats, Skeleton};
use crate::rotmath::{tape_geodesic, tape_rot6d_to_matrix};
use crate::Error;

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// A named composite with its check.
pub struct Composite {
    pub name: &'static str,
    pub check: fn(u64) -> Result<f64, Error>,
}

/// The registered composites.
pub fn composites() -> Vec<Composite> {
    vec![
        Composite {
            name: "geodesic loss",
            check: geodesic,
        },
        Composite {
            name: "forward kinematics",
            check: fk_chain,
        },
        Composite {
            name: "INR decoder",
            check: decoder,
        },
        Composite {
            name: "attention block",
            check: attention,
        },
        Composite {
            name: "guidance objective",
            check: guidance_objective,
        },
    ]
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Max relative error of `build`'s gradient wrt its single leaf at `x`.
pub fn compare(x: &Tensor, build: impl Fn(&mut Tape, Var) -> Result<Var, Error>) -> Result<f64, Error> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = build(&mut tape, v)?;
    let ad = tape.backward(out, &[v])?.remove(0);
    let mut failure = None;
    let fd = central_gradient(
        |p| {
            let mut t = Tape::new();
            let v = t.leaf(p.clone());
            match build(&mut t, v) {
                Ok(o) => t.value(o).item(),
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        x,
        FD_STEP,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(max_relative_error(&ad, &fd))
}

/// Random projection so that no output component cancels another.
fn project(tape: &mut Tape, out: Var, rng: &mut ChaCha8Rng) -> Result<Var, Error> {
    let w = uniform(rng, tape.value(out).shape(), 0.5, 1.5);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p)?)
}

/// Rotation pairs kept away from the clamped ends of arccos.
fn geodesic(seed: u64) -> Result<f64, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &[8, 6], -1.0, 1.0);
    let target = tape_target(&x, &mut rng);
    compare(&x, |tape, v| {
        let m = tape_rot6d_to_matrix(tape, v)?;
        let t = tape.constant(target.clone());
        let g = tape_geodesic(tape, m, t)?;
        Ok(tape.mean(g)?)
    })
}

/// Rotations at 0.3 to 2.5 rad from those of `x`, as `[m, 9]`.
fn tape_target(x: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    use crate::rotmath::{axis_angle, mat_mul, matrices_to_tensor, rot6d_to_matrix};
    let ms: Vec<_> = (0..x.shape()[0])
        .map(|r| {
            let row: [f64; 6] = x.row(r).try_into().unwrap();
            let base = rot6d_to_matrix(&row).expect("random 6D is non-degenerate");
            let axis = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.2..1.0),
            ];
            mat_mul(&base, &axis_angle(axis, rng.random_range(0.3..2.5)))
        })
        .collect();
    matrices_to_tensor(&ms)
}

fn fk_chain(seed: u64) -> Result<f64, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sk = Skeleton::humanoid();
    let j = sk.joint_count();
    let x = uniform(&mut rng, &[j + 1, 6], -1.0, 1.0);
    let rt = uniform(&mut rng, &[1, 3], -1.0, 1.0);
    let wseed = rng.random::<u64>();
    compare(&x, |tape, v| {
        let jr = tape.slice(v, 0, 0, j)?;
        let ro = tape.slice(v, 0, j, 1)?;
        let rtv = tape.constant(rt.clone());
        let pos = tape_fk(tape, &sk, jr, Some((ro, rtv)))?;
        project(tape, pos, &mut ChaCha8Rng::seed_from_u64(wseed))
    })
}

/// A small randomly initialized VAE fitted to two clips' statistics.
fn small_vae(seed: u64) -> Result<InrVae, Error> {
    let data = generate_synthetic_dataset(&FamilyParams::default(), 2, seed)?;
    let config = VaeConfig {
        hidden: 32,
        depth: 3,
        enc_channels: 16,
        seed,
        ..VaeConfig::default()
    };
    InrVae::new(config, FeatureStats::compute(&data)?)
}

fn decoder(seed: u64) -> Result<f64, Error> {
    let vae = small_vae(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = uniform(&mut rng, &[1, vae.latent_dim()], -1.0, 1.0);
    let times: Vec<f64> = {
        let mut t: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
        t.sort_by(f64::total_cmp);
        t
    };
    let wseed = rng.random::<u64>();
    compare(&z, |tape, v| {
        let p = vae.store.bind(tape, false);
        let d = vae.decode_tape(tape, &p, v, &times)?;
        project(tape, d.pose, &mut ChaCha8Rng::seed_from_u64(wseed))
    })
}

/// One cross-attention transformer block with every gate switched on.
fn attention(seed: u64) -> Result<f64, Error> {
    let config = DenoiserConfig {
        width: 16,
        blocks: 1,
        heads: 2,
        seed,
        ..DenoiserConfig::default()
    };
    let mut ldm = Ldm::new(config, ScheduleConfig::default(), LatentStats::identity(80))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in ldm.denoiser.store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
    let width = KeyframeEmbedding::width(ldm.denoiser.config.pose_dim, ldm.denoiser.config.frame_enc);
    let memory = uniform(&mut rng, &[3, width], -1.0, 1.0);
    let z = uniform(&mut rng, &[1, 80], -1.5, 1.5);
    let t = rng.random_range(1..=1000);
    let wseed = rng.random::<u64>();
    compare(&z, |tape, v| {
        let p = ldm.denoiser.store.bind(tape, false);
        let out = ldm.denoiser.forward(tape, &p, v, t, Some(&memory))?;
        project(tape, out, &mut ChaCha8Rng::seed_from_u64(wseed))
    })
}

/// The full guidance objective: weighted geometric loss of the decoded,
/// unstandardized estimate plus the manifold penalty.
fn guidance_objective(seed: u64) -> Result<f64, Error> {
    let vae = small_vae(seed)?;
    let ldm = {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let latent = LatentStats {
            mean: (0..80).map(|_| rng.random_range(-0.5..0.5)).collect(),
            std: (0..80).map(|_| rng.random_range(0.5..1.5)).collect(),
        };
        Ldm::new(
            DenoiserConfig {
                width: 16,
                blocks: 1,
                heads: 2,
                ..DenoiserConfig::default()
            },
            ScheduleConfig::default(),
            latent,
        )?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xface);
    let clip = &generate_synthetic_dataset(&FamilyParams::default(), 1, seed + 100)?[0];
    let y = clip.keyframes(&random_mask(clip.len(), 3, &mut rng)?)?;
    let z = uniform(&mut rng, &[1, 80], -1.0, 1.0);
    let z_inp = ldm
        .latent
        .standardize(&manifold_target(&vae, &ldm.latent.unstandardize(z.data()), &y, 9)?);
    let z_inp = z_inp.as_slice();
    let g = GuidanceConfig {
        mode: GuidanceMode::Img,
        lambda: 0.7,
        gamma: 0.3,
        weights: GeoWeights {
            pos: 1.0,
            trans: 1.0,
            rot: 0.5,
            ori: 0.5,
        },
        ..GuidanceConfig::default()
    };
    let cond = Condition::Keyframes(y);
    compare(&z, |tape, v| {
        let pv = vae.store.bind(tape, false);
        img_objective(tape, &ldm, &vae, &pv, v, &cond, Some(z_inp), &g)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_composite_passes_one_seed() {
        for c in composites() {
            let err = (c.check)(3).unwrap();
            assert!(err <= TOLERANCE, "{}: {err:e}", c.name);
        }
    }
}
