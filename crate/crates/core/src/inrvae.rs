//! Motion INR variational autoencoder.
//!
//! The encoder maps a whole normalized feature sequence to the mean and log
//! variance of `z = [z_l | z_g]`. The decoder is a pair of coordinate MLPs
//! evaluated at continuous times `t` in `[0, 1]`: the local net maps
//! `z_l` and time features to joint rotations and root-relative positions,
//! the global net maps `z_g` and time features to the root transform.

use diffcore::{DiffError, Tape, Tensor, Var};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::motion::{FeatureLayout, FeatureStats, MotionSequence, Skeleton};
use crate::nn::{Adam, AdamConfig, Bound, Linear, Mlp, ParamStore};
use crate::rotmath::{self, Rot6D};
use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub joints: usize,
    pub frames: usize,
    pub fps: f64,
    pub latent_local: usize,
    pub latent_global: usize,
    /// Width of the encoder convolutions.
    pub enc_channels: usize,
    /// Number of cosine pooling functions over the downsampled sequence.
    pub pool_basis: usize,
    pub hidden: usize,
    /// Linear layers per decoder MLP.
    pub depth: usize,
    pub freq_bands: usize,
    /// Initial bias of the log-variance head.
    pub logvar_init: f64,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            joints: 10,
            frames: 128,
            fps: 30.0,
            latent_local: 64,
            latent_global: 16,
            enc_channels: 64,
            pool_basis: 16,
            hidden: 256,
            depth: 4,
            freq_bands: 8,
            logvar_init: -5.0,
            seed: 0,
        }
    }
}

impl VaeConfig {
    pub fn latent_dim(&self) -> usize {
        self.latent_local + self.latent_global
    }

    fn pooled_len(&self) -> usize {
        let half = |n: usize| (n - 1) / 2 + 1;
        half(half(self.frames))
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.frames < 4 || self.joints == 0 || self.depth < 2 || self.hidden == 0 {
            return Err(Error::InvalidParam(
                "vae: frames >= 4, joints >= 1, depth >= 2 required".into(),
            ));
        }
        if self.latent_local == 0 || self.latent_global == 0 || self.enc_channels == 0 {
            return Err(Error::InvalidParam(
                "vae: latent and channel sizes must be positive".into(),
            ));
        }
        if self.pool_basis == 0 || self.pool_basis > self.pooled_len() {
            return Err(Error::InvalidParam(format!(
                "vae.pool_basis must be in 1..={}",
                self.pooled_len()
            )));
        }
        if !(self.fps > 0.0) {
            return Err(Error::InvalidParam("vae.fps must be positive".into()));
        }
        Ok(())
    }

    /// Training time grid `t_i = i / (T - 1)`.
    pub fn time_grid(&self) -> Vec<f64> {
        (0..self.frames).map(|i| i as f64 / (self.frames - 1) as f64).collect()
    }
}

/// `[t, sin(w_k t), cos(w_k t)]` with `w_k` geometric from pi to 32 pi.
pub fn time_features(times: &[f64], bands: usize) -> Tensor {
    let pi = std::f64::consts::PI;
    let freqs: Vec<f64> = (0..bands)
        .map(|k| {
            let f = if bands > 1 { k as f64 / (bands - 1) as f64 } else { 0.0 };
            pi * 32f64.powf(f)
        })
        .collect();
    let width = 1 + 2 * bands;
    let mut data = Vec::with_capacity(times.len() * width);
    for &t in times {
        data.push(t);
        for w in &freqs {
            data.push((w * t).sin());
        }
        for w in &freqs {
            data.push((w * t).cos());
        }
    }
    Tensor::new(vec![times.len(), width], data).expect("time features")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Encoder {
    conv: [Linear; 3],
    mu: Linear,
    logvar: Linear,
}

/// Tape handles of a decoded batch of `(z, t)` rows.
#[derive(Clone, Copy, Debug)]
pub struct Decoded {
    /// `[N, pose_dim]` in normalized units.
    pub norm_pose: Var,
    /// `[N, pose_dim]` in data units: `[ro 6 | rt 3 | jr 6J | jp 3J]`.
    pub pose: Var,
}

/// Plain decoded tracks.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedPoses {
    pub root_orient: Vec<[f64; 6]>,
    pub root_trans: Vec<[f64; 3]>,
    pub joint_rot: Vec<Vec<[f64; 6]>>,
    pub joint_pos: Vec<Vec<[f64; 3]>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InrVae {
    pub config: VaeConfig,
    pub stats: FeatureStats,
    pub skeleton: Skeleton,
    pub store: ParamStore,
    encoder: Encoder,
    local: Mlp,
    global: Mlp,
}

fn conv1d(tape: &mut Tape, p: &Bound, x: Var, lin: &Linear, stride: usize) -> Result<Var, DiffError> {
    let (t, c) = (tape.shape(x)[0], tape.shape(x)[1]);
    let zero = tape.constant(Tensor::zeros(&[1, c]));
    let padded = tape.concat(&[zero, x, zero], 0)?;
    let out = (t - 1) / stride + 1;
    let taps: Vec<Var> = (0..3)
        .map(|k| {
            let idx: Vec<usize> = (0..out).map(|i| i * stride + k).collect();
            tape.gather(padded, 0, &idx)
        })
        .collect::<Result<_, _>>()?;
    let cat = tape.concat(&taps, 1)?;
    lin.forward(tape, p, cat)
}

impl InrVae {
    pub fn new(config: VaeConfig, stats: FeatureStats) -> Result<Self, Error> {
        config.validate()?;
        let layout = FeatureLayout::new(config.joints);
        if stats.dim() != layout.feature_dim() {
            return Err(Error::Shape(format!(
                "feature stats have {} channels, expected {}",
                stats.dim(),
                layout.feature_dim()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (c, fd) = (config.enc_channels, layout.feature_dim());
        let conv = [
            Linear::new(&mut store, "enc.conv0", 3 * fd, c, &mut rng),
            Linear::new(&mut store, "enc.conv1", 3 * c, c, &mut rng),
            Linear::new(&mut store, "enc.conv2", 3 * c, c, &mut rng),
        ];
        let pooled = config.pool_basis * c;
        let dz = config.latent_dim();
        let mu = Linear::new(&mut store, "enc.mu", pooled, dz, &mut rng);
        let logvar = Linear::new(&mut store, "enc.logvar", pooled, dz, &mut rng);
        store.get_mut(logvar.b).data_mut().fill(config.logvar_init);
        let tf = 1 + 2 * config.freq_bands;
        let h = config.hidden;
        let dims = |input: usize, output: usize| {
            let mut d = vec![input];
            d.extend(std::iter::repeat_n(h, config.depth - 1));
            d.push(output);
            d
        };
        let ldims = dims(config.latent_local + tf, 9 * config.joints);
        let gdims = dims(config.latent_global + tf, 9);
        let local = Mlp::new(&mut store, "dec.local", &ldims, &mut rng);
        let global = Mlp::new(&mut store, "dec.global", &gdims, &mut rng);
        Ok(InrVae {
            config,
            stats,
            skeleton: Skeleton::humanoid(),
            store,
            encoder: Encoder { conv, mu, logvar },
            local,
            global,
        })
    }

    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout::new(self.config.joints)
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim()
    }

    /// Mean and log variance `[1, dz]` of a normalized `[T, feature_dim]` input.
    pub fn encode_tape(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<(Var, Var), DiffError> {
        let t = tape.shape(x)[0];
        if t != self.config.frames {
            return Err(DiffError::Shape(format!(
                "encoder expects {} frames, got {t}",
                self.config.frames
            )));
        }
        let e = &self.encoder;
        let h = conv1d(tape, p, x, &e.conv[0], 1)?;
        let h = tape.silu(h)?;
        let h = conv1d(tape, p, h, &e.conv[1], 2)?;
        let h = tape.silu(h)?;
        let h = conv1d(tape, p, h, &e.conv[2], 2)?;
        let h = tape.silu(h)?;
        let l = tape.shape(h)[0];
        let basis = tape.constant(pool_basis(l, self.config.pool_basis));
        let pooled = tape.matmul(basis, h)?;
        let flat = tape.reshape(pooled, &[1, self.config.pool_basis * self.config.enc_channels])?;
        let mu = e.mu.forward(tape, p, flat)?;
        let logvar = e.logvar.forward(tape, p, flat)?;
        Ok((mu, logvar))
    }

    /// Decode `[N, dz]` latent rows at the matching rows of `times` features.
    pub fn decode_rows(&self, tape: &mut Tape, p: &Bound, z: Var, tfeat: &Tensor) -> Result<Decoded, DiffError> {
        let n = tape.shape(z)[0];
        let (dl, dg) = (self.config.latent_local, self.config.latent_global);
        let zl = tape.slice(z, 1, 0, dl)?;
        let zg = tape.slice(z, 1, dl, dg)?;
        let tf = tape.constant(tfeat.clone());
        let lin = tape.concat(&[zl, tf], 1)?;
        let gin = tape.concat(&[zg, tf], 1)?;
        let lout = self.local.forward(tape, p, lin)?;
        let gout = self.global.forward(tape, p, gin)?;
        let norm_pose = tape.concat(&[gout, lout], 1)?;
        let pd = self.layout().pose_dim();
        let std = tape.constant(Tensor::new(vec![1, pd], self.stats.std[..pd].to_vec())?);
        let mean = tape.constant(Tensor::new(vec![1, pd], self.stats.mean[..pd].to_vec())?);
        let std = tape.repeat_rows(std, n)?;
        let mean = tape.repeat_rows(mean, n)?;
        let scaled = tape.mul(norm_pose, std)?;
        let pose = tape.add(scaled, mean)?;
        Ok(Decoded { norm_pose, pose })
    }

    /// Decode one latent `[1, dz]` at `times`.
    pub fn decode_tape(&self, tape: &mut Tape, p: &Bound, z: Var, times: &[f64]) -> Result<Decoded, DiffError> {
        let rows = tape.repeat_rows(z, times.len())?;
        self.decode_rows(tape, p, rows, &time_features(times, self.config.freq_bands))
    }

    /// Split a decoded `[N, pose_dim]` var into `(ro [N,6], rt [N,3], jr [N*J,6], jp [N*J,3])`.
    pub fn split_pose(&self, tape: &mut Tape, pose: Var) -> Result<(Var, Var, Var, Var), DiffError> {
        let n = tape.shape(pose)[0];
        let j = self.config.joints;
        let l = self.layout();
        let ro = tape.slice(pose, 1, l.root_orient(), 6)?;
        let rt = tape.slice(pose, 1, l.root_trans(), 3)?;
        let jr = tape.slice(pose, 1, l.joint_rot(), 6 * j)?;
        let jp = tape.slice(pose, 1, l.joint_pos(), 3 * j)?;
        let jr = tape.reshape(jr, &[n * j, 6])?;
        let jp = tape.reshape(jp, &[n * j, 3])?;
        Ok((ro, rt, jr, jp))
    }

    fn input_tensor(&self, m: &MotionSequence) -> Result<Tensor, Error> {
        if m.len() != self.config.frames || m.joint_count() != self.config.joints {
            return Err(Error::Shape(format!(
                "motion has {} frames and {} joints, model expects {} and {}",
                m.len(),
                m.joint_count(),
                self.config.frames,
                self.config.joints
            )));
        }
        Ok(Tensor::new(
            vec![m.len(), self.layout().feature_dim()],
            self.stats.normalized_features(m),
        )?)
    }

    /// Mean and log variance of `E(m)`.
    pub fn encode(&self, m: &MotionSequence) -> Result<(Vec<f64>, Vec<f64>), Error> {
        let x = self.input_tensor(m)?;
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let xv = tape.constant(x);
        let (mu, lv) = self.encode_tape(&mut tape, &p, xv)?;
        Ok((tape.value(mu).data().to_vec(), tape.value(lv).data().to_vec()))
    }

    /// Deterministic inference path.
    pub fn encode_mean(&self, m: &MotionSequence) -> Result<Vec<f64>, Error> {
        Ok(self.encode(m)?.0)
    }

    /// Reparameterized sample `mu + exp(logvar / 2) * eps`.
    pub fn encode_sample(&self, m: &MotionSequence, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, Error> {
        let (mu, lv) = self.encode(m)?;
        Ok(mu
            .iter()
            .zip(&lv)
            .map(|(m, l)| {
                let e: f64 = StandardNormal.sample(rng);
                m + (0.5 * l).exp() * e
            })
            .collect())
    }

    fn check_latent(&self, z: &[f64]) -> Result<(), Error> {
        if z.len() != self.latent_dim() {
            return Err(Error::Shape(format!(
                "latent has {} dims, expected {}",
                z.len(),
                self.latent_dim()
            )));
        }
        Ok(())
    }

    /// Decode `z` at arbitrary sorted times in `[0, 1]`.
    pub fn decode_poses(&self, z: &[f64], times: &[f64]) -> Result<DecodedPoses, Error> {
        self.check_latent(z)?;
        if times.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::InvalidParam("decode times must lie in [0, 1]".into()));
        }
        if times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidParam("decode times must be sorted".into()));
        }
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let zv = tape.constant(Tensor::new(vec![1, z.len()], z.to_vec())?);
        let d = self.decode_tape(&mut tape, &p, zv, times)?;
        Ok(self.poses_from_values(tape.value(d.pose)))
    }

    pub(crate) fn poses_from_values(&self, pose: &Tensor) -> DecodedPoses {
        let l = self.layout();
        let j = self.config.joints;
        let n = pose.shape()[0];
        let mut out = DecodedPoses {
            root_orient: Vec::with_capacity(n),
            root_trans: Vec::with_capacity(n),
            joint_rot: Vec::with_capacity(n),
            joint_pos: Vec::with_capacity(n),
        };
        for r in 0..n {
            let row = pose.row(r);
            out.root_orient.push(std::array::from_fn(|i| row[l.root_orient() + i]));
            out.root_trans.push(std::array::from_fn(|i| row[l.root_trans() + i]));
            out.joint_rot.push(
                (0..j)
                    .map(|k| std::array::from_fn(|i| row[l.joint_rot() + 6 * k + i]))
                    .collect(),
            );
            out.joint_pos.push(
                (0..j)
                    .map(|k| std::array::from_fn(|i| row[l.joint_pos() + 3 * k + i]))
                    .collect(),
            );
        }
        out
    }

    /// Motion on the training grid. 6D outputs are replaced by the first two
    /// columns of their Gram-Schmidt rotation; velocities are differenced.
    pub fn decode_motion(&self, z: &[f64]) -> Result<MotionSequence, Error> {
        let d = self.decode_poses(z, &self.config.time_grid())?;
        self.poses_to_motion(d)
    }

    pub fn poses_to_motion(&self, d: DecodedPoses) -> Result<MotionSequence, Error> {
        let ortho =
            |v: &[f64; 6]| -> Result<[f64; 6], Error> { Ok(Rot6D::from_matrix(&rotmath::rot6d_to_matrix(v)?).0) };
        let root_orient = d.root_orient.iter().map(ortho).collect::<Result<_, _>>()?;
        let joint_rot = d
            .joint_rot
            .iter()
            .map(|f| f.iter().map(ortho).collect::<Result<Vec<_>, _>>())
            .collect::<Result<_, _>>()?;
        MotionSequence::from_pose_tracks(self.config.fps, root_orient, d.root_trans, joint_rot, d.joint_pos)
    }

    pub fn to_checkpoint(&self, train: Option<&VaeTrainConfig>, metrics: serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint::new(
            "vae",
            json!({ "model": self.config, "train": train }),
            json!({ "features": self.stats }),
            &self.store,
        );
        ck.metrics = metrics;
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, Error> {
        ck.expect_kind("vae")?;
        let config: VaeConfig = serde_json::from_value(ck.config["model"].clone())
            .map_err(|e| Error::Schema(format!("config.model: {e}")))?;
        let stats: FeatureStats = serde_json::from_value(ck.stats["features"].clone())
            .map_err(|e| Error::Schema(format!("stats.features: {e}")))?;
        let mut vae = InrVae::new(config, stats)?;
        ck.load_params(&mut vae.store)?;
        Ok(vae)
    }
}

/// `[P, L]` cosine pooling weights `cos(pi p (i + 1/2) / L) / L`; row 0 is
/// the plain temporal mean.
fn pool_basis(l: usize, p: usize) -> Tensor {
    let pi = std::f64::consts::PI;
    let data = (0..p)
        .flat_map(|k| (0..l).map(move |i| (pi * k as f64 * (i as f64 + 0.5) / l as f64).cos() / l as f64))
        .collect();
    Tensor::new(vec![p, l], data).expect("pool basis")
}

// ---- training ---------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeTrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Random frames decoded per sequence and step; the full grid if >= T.
    pub frames_per_step: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub beta: f64,
    /// Fraction of steps over which beta ramps linearly from 0.
    pub beta_warmup: f64,
    pub geo_weight: f64,
    /// Extra weight of the root translation channels in the reconstruction MSE.
    pub root_weight: f64,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        VaeTrainConfig {
            steps: 2000,
            batch: 4,
            frames_per_step: 32,
            lr: 1e-3,
            clip_norm: 1.0,
            beta: 1e-4,
            beta_warmup: 0.1,
            geo_weight: 0.5,
            root_weight: 30.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeLossRecord {
    pub step: usize,
    pub loss: f64,
    pub recon: f64,
    pub geo: f64,
    pub kl: f64,
    pub beta: f64,
    pub grad_norm: f64,
}

struct Prepared {
    input: Tensor,
    norm_pose: Vec<Vec<f64>>,
    root_mats: Vec<[f64; 9]>,
    joint_mats: Vec<Vec<[f64; 9]>>,
}

fn flat(m: &rotmath::Mat3) -> [f64; 9] {
    std::array::from_fn(|i| m[i / 3][i % 3])
}

/// Per-step RNG, so that a resumed run draws the same numbers.
pub(crate) fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

pub struct VaeTrainer {
    pub vae: InrVae,
    pub opt: Adam,
    pub config: VaeTrainConfig,
    pub curve: Vec<VaeLossRecord>,
    data: Vec<Prepared>,
}

impl VaeTrainer {
    pub fn new(vae: InrVae, data: &[MotionSequence], config: VaeTrainConfig) -> Result<Self, Error> {
        if data.is_empty() || config.batch == 0 || config.frames_per_step == 0 {
            return Err(Error::InvalidParam(
                "vae training needs data, batch >= 1 and frames_per_step >= 1".into(),
            ));
        }
        let pd = vae.layout().pose_dim();
        let data = data
            .iter()
            .map(|m| {
                let input = vae.input_tensor(m)?;
                let norm_pose = (0..m.len()).map(|t| input.row(t)[..pd].to_vec()).collect();
                let root_mats = (0..m.len())
                    .map(|t| Ok(flat(&m.root_orient_matrix(t)?)))
                    .collect::<Result<_, Error>>()?;
                let joint_mats = m
                    .joint_rot
                    .iter()
                    .map(|f| f.iter().map(|r| Ok(flat(&rotmath::rot6d_to_matrix(r)?))).collect())
                    .collect::<Result<_, Error>>()?;
                Ok(Prepared {
                    input,
                    norm_pose,
                    root_mats,
                    joint_mats,
                })
            })
            .collect::<Result<_, Error>>()?;
        let adam = AdamConfig {
            lr: config.lr,
            clip_norm: config.clip_norm,
            total_steps: config.steps,
            ..Default::default()
        };
        let opt = Adam::new(adam, &vae.store);
        Ok(VaeTrainer {
            vae,
            opt,
            config,
            curve: Vec::new(),
            data,
        })
    }

    pub fn step_index(&self) -> usize {
        self.opt.step
    }

    pub fn beta_at(&self, step: usize) -> f64 {
        let warm = self.config.beta_warmup * self.config.steps as f64;
        if warm <= 0.0 {
            self.config.beta
        } else {
            self.config.beta * (step as f64 / warm).min(1.0)
        }
    }

    /// Loss on a fixed batch with explicit noise, for tests and gradient checks.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        items: &[(usize, Vec<usize>, Vec<f64>)],
        beta: f64,
    ) -> Result<(Var, [f64; 3]), DiffError> {
        let vae = &self.vae;
        let j = vae.config.joints;
        let dz = vae.latent_dim();
        let mut z_rows = Vec::new();
        let mut kls = Vec::new();
        let mut times = Vec::new();
        let mut target = Vec::new();
        let mut rmats = Vec::new();
        let mut jmats = Vec::new();
        let grid = vae.config.time_grid();
        for (idx, frames, eps) in items {
            let d = &self.data[*idx];
            let x = tape.constant(d.input.clone());
            let (mu, lv) = vae.encode_tape(tape, p, x)?;
            let half = tape.scale(lv, 0.5)?;
            let sd = tape.exp(half)?;
            let e = tape.constant(Tensor::new(vec![1, dz], eps.clone())?);
            let noise = tape.mul(sd, e)?;
            let z = tape.add(mu, noise)?;
            // KL(N(mu, sd^2) || N(0, I)) summed over dims
            let mu2 = tape.square(mu)?;
            let var = tape.exp(lv)?;
            let a = tape.add(mu2, var)?;
            let b = tape.sub(a, lv)?;
            let s = tape.sum(b)?;
            kls.push(tape.affine(s, 0.5, -0.5 * dz as f64)?);
            z_rows.push(tape.repeat_rows(z, frames.len())?);
            for &f in frames {
                times.push(grid[f]);
                target.extend_from_slice(&d.norm_pose[f]);
                rmats.extend_from_slice(&d.root_mats[f]);
                for k in 0..j {
                    jmats.extend_from_slice(&d.joint_mats[f][k]);
                }
            }
        }
        let n = times.len();
        let zs = tape.concat(&z_rows, 0)?;
        let dec = vae.decode_rows(tape, p, zs, &time_features(&times, vae.config.freq_bands))?;
        let pd = vae.layout().pose_dim();
        let tgt = tape.constant(Tensor::new(vec![n, pd], target)?);
        let diff = tape.sub(dec.norm_pose, tgt)?;
        let sq = tape.square(diff)?;
        let mut w = vec![1.0; pd];
        let rt0 = vae.layout().root_trans();
        w[rt0..rt0 + 3].fill(self.config.root_weight);
        let wsum: f64 = w.iter().sum();
        let wrow = tape.constant(Tensor::new(
            vec![pd, 1],
            w.iter().map(|x| x / (wsum * n as f64)).collect(),
        )?);
        let per_row = tape.matmul(sq, wrow)?;
        let recon = tape.sum(per_row)?;
        let (ro, _, jr, _) = vae.split_pose(tape, dec.pose)?;
        let rm = rotmath::tape_rot6d_to_matrix(tape, ro)?;
        let jm = rotmath::tape_rot6d_to_matrix(tape, jr)?;
        let rt = tape.constant(Tensor::new(vec![n, 9], rmats)?);
        let jt = tape.constant(Tensor::new(vec![n * j, 9], jmats)?);
        let gr = rotmath::tape_geodesic(tape, rm, rt)?;
        let gj = rotmath::tape_geodesic(tape, jm, jt)?;
        let g = tape.concat(&[gr, gj], 0)?;
        let geo = tape.mean(g)?;
        let mut kl = kls[0];
        for &k in &kls[1..] {
            kl = tape.add(kl, k)?;
        }
        let kl = tape.scale(kl, 1.0 / kls.len() as f64)?;
        let wg = tape.scale(geo, self.config.geo_weight)?;
        let mut loss = tape.add(recon, wg)?;
        if beta != 0.0 {
            // KL enters per latent dimension, matching the mean-reduced reconstruction
            let wk = tape.scale(kl, beta / dz as f64)?;
            loss = tape.add(loss, wk)?;
        }
        let parts = [tape.value(recon).item(), tape.value(geo).item(), tape.value(kl).item()];
        Ok((loss, parts))
    }

    fn sample_batch(&self, step: usize) -> Vec<(usize, Vec<usize>, Vec<f64>)> {
        let mut rng = step_rng(self.config.seed, step);
        let n = self.data.len();
        let seqs: Vec<usize> = if n <= self.config.batch {
            (0..n).collect()
        } else {
            index::sample(&mut rng, n, self.config.batch).into_vec()
        };
        let t = self.vae.config.frames;
        seqs.into_iter()
            .map(|s| {
                let mut frames: Vec<usize> = if self.config.frames_per_step >= t {
                    (0..t).collect()
                } else {
                    index::sample(&mut rng, t, self.config.frames_per_step).into_vec()
                };
                frames.sort_unstable();
                let eps = (0..self.vae.latent_dim())
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                (s, frames, eps)
            })
            .collect()
    }

    /// One optimizer step. On a non-finite loss or gradient the parameters
    /// are left untouched and an error is returned.
    pub fn step(&mut self) -> Result<&VaeLossRecord, Error> {
        let step = self.opt.step;
        let items = self.sample_batch(step);
        let beta = self.beta_at(step);
        let mut tape = Tape::new();
        let p = self.vae.store.bind(&mut tape, true);
        let diverged = |detail: String| Error::Diverged { step, detail };
        let (loss, parts) = self
            .batch_loss(&mut tape, &p, &items, beta)
            .map_err(|e| diverged(e.to_string()))?;
        let grads = tape.backward(loss, &p.vars).map_err(|e| diverged(e.to_string()))?;
        if !grads.iter().all(Tensor::is_finite) {
            return Err(diverged("non-finite gradient".into()));
        }
        let loss_value = tape.value(loss).item();
        let grad_norm = self.opt.update(&mut self.vae.store, &grads);
        self.curve.push(VaeLossRecord {
            step,
            loss: loss_value,
            recon: parts[0],
            geo: parts[1],
            kl: parts[2],
            beta,
            grad_norm,
        });
        Ok(self.curve.last().unwrap())
    }

    pub fn run(&mut self) -> Result<(), Error> {
        while self.opt.step < self.config.steps {
            self.step()?;
        }
        Ok(())
    }

    pub fn checkpoint(&self, metrics: serde_json::Value) -> Checkpoint {
        self.vae
            .to_checkpoint(Some(&self.config), metrics)
            .with_optimizer(&self.vae.store, &self.opt)
    }

    /// Continue from a checkpoint written by [`VaeTrainer::checkpoint`].
    pub fn resume(ck: &Checkpoint, data: &[MotionSequence], config: VaeTrainConfig) -> Result<Self, Error> {
        let vae = InrVae::from_checkpoint(ck)?;
        let mut tr = VaeTrainer::new(vae, data, config)?;
        if let Some(opt) = ck.restore_optimizer(&tr.vae.store)? {
            tr.opt = opt;
        }
        Ok(tr)
    }
}

// ---- evaluation ---------------------------------------------------------------

/// Mean Euclidean distance between world joint positions of two motions.
pub fn mean_joint_error(a: &MotionSequence, b: &MotionSequence) -> Result<f64, Error> {
    let ga = crate::motion::global_positions(a)?;
    let gb = crate::motion::global_positions(b)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (fa, fb) in ga.iter().zip(&gb) {
        for (pa, pb) in fa.iter().zip(fb) {
            sum += ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2) + (pa[2] - pb[2]).powi(2)).sqrt();
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeMetrics {
    /// Mean world joint position error of `D(E(m))`, meters.
    pub recon_joint_error: f64,
    /// Mean and max of `|E(D(z)) - z| / |z|` with `z = E(m)`.
    pub round_trip_rel_l2: f64,
    pub round_trip_rel_l2_max: f64,
    /// Mean KL of the posterior.
    pub kl: f64,
    pub sequences: usize,
}

pub fn evaluate_vae(vae: &InrVae, data: &[MotionSequence]) -> Result<VaeMetrics, Error> {
    let (mut err, mut rt, mut rt_max, mut kl) = (0.0, 0.0, 0.0f64, 0.0);
    for m in data {
        let (mu, lv) = vae.encode(m)?;
        kl += 0.5 * mu.iter().zip(&lv).map(|(m, l)| m * m + l.exp() - l - 1.0).sum::<f64>();
        let rec = vae.decode_motion(&mu)?;
        err += mean_joint_error(&rec, m)?;
        let z2 = vae.encode_mean(&rec)?;
        let num = mu.iter().zip(&z2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den = mu.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        rt += num / den;
        rt_max = rt_max.max(num / den);
    }
    let n = data.len() as f64;
    Ok(VaeMetrics {
        recon_joint_error: err / n,
        round_trip_rel_l2: rt / n,
        round_trip_rel_l2_max: rt_max,
        kl: kl / n,
        sequences: data.len(),
    })
}
