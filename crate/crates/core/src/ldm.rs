//! Keyframe-conditioned latent diffusion over `z = [z_l | z_g]`.
//!
//! The denoiser predicts `z_0` directly. Latents are standardized per
//! dimension before diffusion; [`LatentStats`] maps between the two spaces.

use diffcore::{DiffError, Tape, Tensor, Var};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::guidance::{self, GeoWeights, GuidanceConfig, GuidanceMode, GuidanceTrace};
use crate::inrvae::{step_rng, InrVae};
use crate::motion::{FeatureStats, KeyframeSpec, MotionSequence};
use crate::nn::{Adam, AdamConfig, Bound, Linear, Mlp, ParamId, ParamStore};
use crate::Error;

// ---- noise schedule -----------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Linear-beta schedule. Index `t` runs over `1..=steps`; `alpha_bar(0) = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub config: ScheduleConfig,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self, Error> {
        let (n, b0, b1) = (config.steps, config.beta_start, config.beta_end);
        if n == 0 || !(0.0 < b0 && b0 <= b1 && b1 < 1.0) {
            return Err(Error::InvalidParam(format!(
                "schedule: need steps >= 1 and 0 < beta_start <= beta_end < 1, got {config:?}"
            )));
        }
        let mut betas = vec![0.0];
        betas.extend((0..n).map(|i| {
            if n == 1 {
                b0
            } else {
                b0 + (b1 - b0) * i as f64 / (n - 1) as f64
            }
        }));
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = vec![1.0];
        for t in 1..=n {
            alpha_bars.push(alpha_bars[t - 1] * alphas[t]);
        }
        Ok(NoiseSchedule {
            config,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// DDIM standard deviation for the jump `t -> prev`.
    pub fn sigma(&self, t: usize, prev: usize, eta: f64) -> f64 {
        let (a, ap) = (self.alpha_bar(t), self.alpha_bar(prev));
        eta * ((1.0 - ap) / (1.0 - a)).sqrt() * (1.0 - a / ap).sqrt()
    }

    /// `sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
    pub fn q_sample(&self, z0: &[f64], t: usize, eps: &[f64]) -> Vec<f64> {
        let a = self.alpha_bar(t);
        z0.iter()
            .zip(eps)
            .map(|(z, e)| a.sqrt() * z + (1.0 - a).sqrt() * e)
            .collect()
    }

    /// `n` descending timesteps from `steps` down to at least 1, evenly spaced.
    pub fn timesteps(&self, n: usize) -> Vec<usize> {
        let total = self.steps();
        let n = n.clamp(1, total);
        let mut ts: Vec<usize> = (0..n).map(|i| ((n - i) * total).div_ceil(n)).collect();
        ts.dedup();
        ts
    }
}

/// One DDIM update from `z_t` towards `prev` given the clean estimate `z0`.
pub fn ddim_step(
    z_t: &[f64],
    z0: &[f64],
    alpha_bar_t: f64,
    alpha_bar_prev: f64,
    sigma: f64,
    noise: &[f64],
) -> Result<Vec<f64>, Error> {
    let dir = 1.0 - alpha_bar_prev - sigma * sigma;
    if dir < 0.0 {
        return Err(Error::InvalidParam(format!(
            "schedule: 1 - abar_prev - sigma^2 = {dir:e} is negative"
        )));
    }
    let (sa, s1a) = (alpha_bar_t.sqrt(), (1.0 - alpha_bar_t).sqrt());
    Ok(z_t
        .iter()
        .zip(z0)
        .zip(noise)
        .map(|((zt, z0), n)| {
            let eps = if s1a > 0.0 { (zt - sa * z0) / s1a } else { 0.0 };
            alpha_bar_prev.sqrt() * z0 + dir.sqrt() * eps + sigma * n
        })
        .collect())
}

/// Classifier-free guidance `u + s (c - u)`, evaluated as `(1 - s) u + s c`
/// so that `s = 1` and `s = 0` are exact and the taped DPS path agrees bitwise.
pub fn cfg_combine(cond: &[f64], uncond: &[f64], s: f64) -> Vec<f64> {
    cond.iter().zip(uncond).map(|(c, u)| u * (1.0 - s) + c * s).collect()
}

/// Score implied by a clean estimate: `-(z_t - sqrt(abar) z0) / (1 - abar)`.
pub fn score_from_z0(z_t: &[f64], z0: &[f64], alpha_bar: f64) -> Vec<f64> {
    z_t.iter()
        .zip(z0)
        .map(|(z, x)| -(z - alpha_bar.sqrt() * x) / (1.0 - alpha_bar))
        .collect()
}

/// Tweedie estimate from a score: `(z_t + (1 - abar) s) / sqrt(abar)`.
pub fn z0_from_score(z_t: &[f64], score: &[f64], alpha_bar: f64) -> Vec<f64> {
    z_t.iter()
        .zip(score)
        .map(|(z, s)| (z + (1.0 - alpha_bar) * s) / alpha_bar.sqrt())
        .collect()
}

// ---- latent standardization ---------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentStats {
    pub fn compute(latents: &[Vec<f64>]) -> Result<Self, Error> {
        let first = latents
            .first()
            .ok_or_else(|| Error::InvalidParam("no latents".into()))?;
        let (n, d) = (latents.len() as f64, first.len());
        let mean: Vec<f64> = (0..d).map(|i| latents.iter().map(|z| z[i]).sum::<f64>() / n).collect();
        let std = (0..d)
            .map(|i| {
                let v = latents.iter().map(|z| (z[i] - mean[i]).powi(2)).sum::<f64>() / n;
                if v.sqrt() < 1e-6 {
                    1.0
                } else {
                    v.sqrt()
                }
            })
            .collect();
        Ok(LatentStats { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        LatentStats {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn standardize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((z, m), s)| (z - m) / s)
            .collect()
    }

    pub fn unstandardize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((z, m), s)| z * s + m)
            .collect()
    }

    /// Differentiable `z * std + mean` for a `[1, d]` var.
    pub fn tape_unstandardize(&self, tape: &mut Tape, z: Var) -> Result<Var, DiffError> {
        let d = self.mean.len();
        let s = tape.constant(Tensor::new(vec![1, d], self.std.clone())?);
        let m = tape.constant(Tensor::new(vec![1, d], self.mean.clone())?);
        let zs = tape.mul(z, s)?;
        tape.add(zs, m)
    }
}

// ---- keyframe embedding ---------------------------------------------------------

/// Sinusoidal encoding of a frame index, `enc` channels.
pub fn frame_encoding(frame: usize, enc: usize) -> Vec<f64> {
    let half = enc / 2;
    let mut v = Vec::with_capacity(enc);
    for i in 0..half {
        let w = 100f64.powf(-(i as f64) / (half.max(2) - 1) as f64);
        v.push((w * frame as f64).sin());
        v.push((w * frame as f64).cos());
    }
    v.resize(enc, 0.0);
    v
}

/// Per-frame conditioning rows `[normalized pose | frame encoding | mask]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyframeEmbedding {
    /// `[T, E]`; rows at non-keyframes are all zero.
    pub full: Tensor,
}

impl KeyframeEmbedding {
    pub fn width(pose_dim: usize, enc: usize) -> usize {
        pose_dim + enc + 1
    }

    pub fn new(y: &KeyframeSpec, stats: &FeatureStats, enc: usize) -> Result<Self, Error> {
        let pose_dim = y.poses.first().map_or(0, |p| p.pose_vector().len());
        let e = Self::width(pose_dim, enc);
        let mut data = vec![0.0; y.len() * e];
        for p in &y.poses {
            let row = &mut data[p.index * e..(p.index + 1) * e];
            let pose = stats.normalize(&p.pose_vector());
            row[..pose_dim].copy_from_slice(&pose);
            row[pose_dim..pose_dim + enc].copy_from_slice(&frame_encoding(p.index, enc));
            row[e - 1] = 1.0;
        }
        Ok(KeyframeEmbedding {
            full: Tensor::new(vec![y.len(), e], data)?,
        })
    }

    /// Attention memory: the rows whose mask channel is set.
    pub fn memory(&self) -> Tensor {
        let e = self.full.shape()[1];
        let rows: Vec<f64> = (0..self.full.shape()[0])
            .filter(|&r| self.full.row(r)[e - 1] != 0.0)
            .flat_map(|r| self.full.row(r).to_vec())
            .collect();
        let k = rows.len() / e;
        Tensor::new(vec![k, e], rows).expect("memory rows")
    }
}

// ---- denoiser -------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub latent_dim: usize,
    pub tokens: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Channels of the keyframe frame-index encoding.
    pub frame_enc: usize,
    /// Per-frame pose channels of the keyframe embedding.
    pub pose_dim: usize,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            latent_dim: 80,
            tokens: 16,
            width: 64,
            blocks: 4,
            heads: 4,
            mlp_ratio: 4,
            frame_enc: 16,
            pose_dim: 99,
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn token_dim(&self) -> usize {
        self.latent_dim / self.tokens
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.tokens == 0 || self.latent_dim % self.tokens != 0 {
            return Err(Error::InvalidParam("denoiser: tokens must divide latent_dim".into()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::InvalidParam("denoiser: heads must divide width".into()));
        }
        if self.width == 0 || self.blocks == 0 || self.mlp_ratio == 0 || self.frame_enc % 2 != 0 {
            return Err(Error::InvalidParam(
                "denoiser: width, blocks, mlp_ratio >= 1 and even frame_enc".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    modulation: Linear,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub store: ParamStore,
    token_proj: Linear,
    pos: ParamId,
    time_mlp: Mlp,
    kf_proj: Linear,
    null: ParamId,
    blocks: Vec<Block>,
    out_proj: Linear,
}

/// Sinusoidal diffusion-step embedding of width `d`.
pub fn timestep_embedding(t: usize, d: usize) -> Tensor {
    let half = d / 2;
    let mut v = Vec::with_capacity(d);
    for i in 0..half {
        let w = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        v.push((t as f64 * w).sin());
    }
    for i in 0..half {
        let w = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        v.push((t as f64 * w).cos());
    }
    v.resize(d, 0.0);
    Tensor::new(vec![1, d], v).expect("timestep embedding")
}

/// Multiply-adds of one cross-attention layer with `n` query tokens, `k`
/// memory rows and width `d`: projections plus scores and weighted sum.
pub fn attention_macs(n: usize, k: usize, d: usize) -> usize {
    2 * n * d * d + 2 * k * d * d + 2 * n * k * d
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self, Error> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.width;
        let token_proj = Linear::new(&mut store, "token_proj", config.token_dim(), d, &mut rng);
        let pos_init: Vec<f64> = normal_vec(&mut rng, config.tokens * d)
            .iter()
            .map(|v| 0.02 * v)
            .collect();
        let pos = store.add("pos_emb", Tensor::new(vec![config.tokens, d], pos_init)?);
        let time_mlp = Mlp::new(&mut store, "time_mlp", &[d, d, d], &mut rng);
        let e = KeyframeEmbedding::width(config.pose_dim, config.frame_enc);
        let kf_proj = Linear::new(&mut store, "kf_proj", e, d, &mut rng);
        let null_init: Vec<f64> = normal_vec(&mut rng, d).iter().map(|v| 0.02 * v).collect();
        let null = store.add("null_kf", Tensor::new(vec![1, d], null_init)?);
        let blocks = (0..config.blocks)
            .map(|i| Block {
                modulation: Linear::zeros(&mut store, &format!("block{i}.adaln"), d, 6 * d),
                q: Linear::new(&mut store, &format!("block{i}.q"), d, d, &mut rng),
                k: Linear::new(&mut store, &format!("block{i}.k"), d, d, &mut rng),
                v: Linear::new(&mut store, &format!("block{i}.v"), d, d, &mut rng),
                o: Linear::new(&mut store, &format!("block{i}.o"), d, d, &mut rng),
                fc1: Linear::new(&mut store, &format!("block{i}.fc1"), d, config.mlp_ratio * d, &mut rng),
                fc2: Linear::new(&mut store, &format!("block{i}.fc2"), config.mlp_ratio * d, d, &mut rng),
            })
            .collect();
        let out_proj = Linear::new(&mut store, "out_proj", d, config.token_dim(), &mut rng);
        Ok(Denoiser {
            config,
            store,
            token_proj,
            pos,
            time_mlp,
            kf_proj,
            null,
            blocks,
            out_proj,
        })
    }

    fn attention(&self, tape: &mut Tape, p: &Bound, b: &Block, h: Var, mem: Var) -> Result<Var, DiffError> {
        let d = self.config.width;
        let dh = d / self.config.heads;
        let q = b.q.forward(tape, p, h)?;
        let k = b.k.forward(tape, p, mem)?;
        let v = b.v.forward(tape, p, mem)?;
        let mut heads = Vec::with_capacity(self.config.heads);
        for i in 0..self.config.heads {
            let qh = tape.slice(q, 1, i * dh, dh)?;
            let kh = tape.slice(k, 1, i * dh, dh)?;
            let vh = tape.slice(v, 1, i * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, 1.0 / (dh as f64).sqrt())?;
            let a = tape.softmax(s, 1)?;
            heads.push(tape.matmul(a, vh)?);
        }
        let cat = tape.concat(&heads, 1)?;
        b.o.forward(tape, p, cat)
    }

    /// One adaLN-Zero block over tokens `x` with conditioning `sc = silu(c)`.
    fn block(&self, tape: &mut Tape, p: &Bound, b: &Block, x: Var, sc: Var, mem: Var) -> Result<Var, DiffError> {
        let n = tape.shape(x)[0];
        let d = self.config.width;
        let m = b.modulation.forward(tape, p, sc)?;
        let mut parts = Vec::with_capacity(6);
        for i in 0..6 {
            let s = tape.slice(m, 1, i * d, d)?;
            parts.push(tape.repeat_rows(s, n)?);
        }
        let modulate = |tape: &mut Tape, x: Var, shift: Var, scale: Var| -> Result<Var, DiffError> {
            let h = tape.layer_norm(x, 1e-6)?;
            let hs = tape.mul(h, scale)?;
            let h = tape.add(h, hs)?;
            tape.add(h, shift)
        };
        let h = modulate(tape, x, parts[0], parts[1])?;
        let a = self.attention(tape, p, b, h, mem)?;
        let ga = tape.mul(parts[2], a)?;
        let x = tape.add(x, ga)?;
        let h = modulate(tape, x, parts[3], parts[4])?;
        let f = b.fc1.forward(tape, p, h)?;
        let f = tape.silu(f)?;
        let f = b.fc2.forward(tape, p, f)?;
        let gf = tape.mul(parts[5], f)?;
        tape.add(x, gf)
    }

    /// `z_0` estimate `[1, latent_dim]` from `z_t`. `memory` holds the
    /// keyframe rows; `None` selects the learned null embedding.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        z_t: Var,
        t: usize,
        memory: Option<&Tensor>,
    ) -> Result<Var, DiffError> {
        let c = &self.config;
        let tok = tape.reshape(z_t, &[c.tokens, c.token_dim()])?;
        let x = self.token_proj.forward(tape, p, tok)?;
        let mut x = tape.add(x, p.var(self.pos))?;
        let temb = tape.constant(timestep_embedding(t, c.width));
        let cvec = self.time_mlp.forward(tape, p, temb)?;
        let sc = tape.silu(cvec)?;
        let mem = match memory {
            Some(m) if m.shape()[0] > 0 => {
                let mv = tape.constant(m.clone());
                self.kf_proj.forward(tape, p, mv)?
            }
            _ => p.var(self.null),
        };
        for b in &self.blocks {
            x = self.block(tape, p, b, x, sc, mem)?;
        }
        let out = self.out_proj.forward(tape, p, x)?;
        tape.reshape(out, &[1, c.latent_dim])
    }

    /// Plain evaluation.
    pub fn predict(&self, z_t: &[f64], t: usize, memory: Option<&Tensor>) -> Result<Vec<f64>, Error> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let z = tape.constant(Tensor::new(vec![1, z_t.len()], z_t.to_vec())?);
        let out = self.forward(&mut tape, &p, z, t, memory)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Output at initialization ignores keyframes and timestep:
    /// `out_proj(token_proj(z) + pos)`, exposed for the identity check.
    pub fn projection_path(&self, z_t: &[f64]) -> Result<Vec<f64>, Error> {
        let c = &self.config;
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let z = tape.constant(Tensor::new(vec![c.tokens, c.token_dim()], z_t.to_vec())?);
        let x = self.token_proj.forward(&mut tape, &p, z)?;
        let x = tape.add(x, p.var(self.pos))?;
        let out = self.out_proj.forward(&mut tape, &p, x)?;
        Ok(tape.value(out).data().to_vec())
    }
}

// ---- model bundle and checkpoints -------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Ldm {
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    pub latent: LatentStats,
}

impl Ldm {
    pub fn new(config: DenoiserConfig, schedule: ScheduleConfig, latent: LatentStats) -> Result<Self, Error> {
        if latent.mean.len() != config.latent_dim {
            return Err(Error::Shape("latent stats do not match the denoiser width".into()));
        }
        Ok(Ldm {
            denoiser: Denoiser::new(config)?,
            schedule: NoiseSchedule::new(schedule)?,
            latent,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.denoiser.config.latent_dim
    }

    pub fn memory(&self, y: &KeyframeSpec, vae: &InrVae) -> Result<Tensor, Error> {
        Ok(KeyframeEmbedding::new(y, &vae.stats, self.denoiser.config.frame_enc)?.memory())
    }

    pub fn to_checkpoint(&self, train: Option<&LdmTrainConfig>, metrics: serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint::new(
            "ldm",
            json!({ "denoiser": self.denoiser.config, "schedule": self.schedule.config, "train": train }),
            json!({ "latent": self.latent }),
            &self.denoiser.store,
        );
        ck.metrics = metrics;
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, Error> {
        ck.expect_kind("ldm")?;
        let field = |v: &serde_json::Value, name: &str| -> Result<serde_json::Value, Error> {
            Ok(v.get(name)
                .cloned()
                .ok_or_else(|| Error::Schema(format!("missing {name}")))?)
        };
        let config: DenoiserConfig = serde_json::from_value(field(&ck.config, "denoiser")?)
            .map_err(|e| Error::Schema(format!("config.denoiser: {e}")))?;
        let schedule: ScheduleConfig = serde_json::from_value(field(&ck.config, "schedule")?)
            .map_err(|e| Error::Schema(format!("config.schedule: {e}")))?;
        let latent: LatentStats = serde_json::from_value(field(&ck.stats, "latent")?)
            .map_err(|e| Error::Schema(format!("stats.latent: {e}")))?;
        let mut ldm = Ldm::new(config, schedule, latent)?;
        ck.load_params(&mut ldm.denoiser.store)?;
        Ok(ldm)
    }
}

// ---- training -------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LdmTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub clip_norm: f64,
    /// Bernoulli keyframe probability per frame.
    pub keyframe_prob: f64,
    pub cond_drop: f64,
    pub lambda_z: f64,
    pub weights: GeoWeights,
    /// Use one fixed keyframe mask per training motion.
    pub fixed_masks: bool,
    pub seed: u64,
}

impl Default for LdmTrainConfig {
    fn default() -> Self {
        LdmTrainConfig {
            steps: 10000,
            batch: 8,
            lr: 1e-3,
            clip_norm: 1.0,
            keyframe_prob: 5.0 / 128.0,
            cond_drop: 0.1,
            lambda_z: 1.0,
            weights: GeoWeights::default(),
            fixed_masks: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdmLossRecord {
    pub step: usize,
    pub loss: f64,
    pub latent: f64,
    pub geo: f64,
    pub grad_norm: f64,
}

/// Bernoulli keyframe mask with at least one keyframe.
pub fn bernoulli_mask(rng: &mut ChaCha8Rng, frames: usize, p: f64) -> Vec<bool> {
    loop {
        let m: Vec<bool> = (0..frames).map(|_| rng.random_bool(p.clamp(0.0, 1.0))).collect();
        if m.iter().any(|&b| b) {
            return m;
        }
    }
}

pub struct LdmTrainer<'a> {
    pub ldm: Ldm,
    pub vae: &'a InrVae,
    pub opt: Adam,
    pub config: LdmTrainConfig,
    pub curve: Vec<LdmLossRecord>,
    motions: Vec<MotionSequence>,
    latents: Vec<Vec<f64>>,
    masks: Vec<Vec<bool>>,
}

pub struct TrainItem {
    pub motion: usize,
    pub t: usize,
    pub eps: Vec<f64>,
    pub mask: Vec<bool>,
    pub cond: bool,
}

impl<'a> LdmTrainer<'a> {
    /// Encodes the training set with the frozen VAE and fits latent statistics.
    pub fn new(
        vae: &'a InrVae,
        data: &[MotionSequence],
        denoiser: DenoiserConfig,
        schedule: ScheduleConfig,
        config: LdmTrainConfig,
    ) -> Result<Self, Error> {
        if data.is_empty() || config.batch == 0 {
            return Err(Error::InvalidParam("ldm training needs data and batch >= 1".into()));
        }
        let raw: Vec<Vec<f64>> = data.iter().map(|m| vae.encode_mean(m)).collect::<Result<_, _>>()?;
        let latent = LatentStats::compute(&raw)?;
        let ldm = Ldm::new(
            DenoiserConfig {
                latent_dim: vae.latent_dim(),
                pose_dim: vae.layout().pose_dim(),
                ..denoiser
            },
            schedule,
            latent,
        )?;
        Self::with_model(vae, data, ldm, config)
    }

    pub fn with_model(
        vae: &'a InrVae,
        data: &[MotionSequence],
        ldm: Ldm,
        config: LdmTrainConfig,
    ) -> Result<Self, Error> {
        let latents = data
            .iter()
            .map(|m| Ok(ldm.latent.standardize(&vae.encode_mean(m)?)))
            .collect::<Result<_, Error>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(u64::MAX);
        let masks = data
            .iter()
            .map(|m| bernoulli_mask(&mut rng, m.len(), config.keyframe_prob))
            .collect();
        let adam = AdamConfig {
            lr: config.lr,
            clip_norm: config.clip_norm,
            total_steps: config.steps,
            ..Default::default()
        };
        let opt = Adam::new(adam, &ldm.denoiser.store);
        Ok(LdmTrainer {
            ldm,
            vae,
            opt,
            config,
            curve: Vec::new(),
            motions: data.to_vec(),
            latents,
            masks,
        })
    }

    /// The fixed mask of training motion `i`.
    pub fn fixed_mask(&self, i: usize) -> &[bool] {
        &self.masks[i]
    }

    pub fn sample_items(&self, step: usize) -> Vec<TrainItem> {
        let mut rng = step_rng(self.config.seed, step);
        let steps = self.ldm.schedule.steps();
        (0..self.config.batch)
            .map(|_| {
                let motion = rng.random_range(0..self.motions.len());
                let t = rng.random_range(1..=steps);
                let eps = (0..self.ldm.latent_dim())
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                let mask = if self.config.fixed_masks {
                    self.masks[motion].clone()
                } else {
                    bernoulli_mask(&mut rng, self.motions[motion].len(), self.config.keyframe_prob)
                };
                let cond = !rng.random_bool(self.config.cond_drop.clamp(0.0, 1.0));
                TrainItem {
                    motion,
                    t,
                    eps,
                    mask,
                    cond,
                }
            })
            .collect()
    }

    /// Batch loss of Eq.-style objective: latent MSE plus keyframe geometric
    /// terms on the decoded estimate (conditioned items only).
    pub fn batch_loss(&self, tape: &mut Tape, p: &Bound, items: &[TrainItem]) -> Result<(Var, [f64; 2]), Error> {
        let w = &self.config.weights;
        let use_geo = w.any();
        let pv = if use_geo {
            Some(self.vae.store.bind(tape, false))
        } else {
            None
        };
        let d = self.ldm.latent_dim();
        let mut total: Option<Var> = None;
        let (mut lat_sum, mut geo_sum) = (0.0, 0.0);
        for it in items {
            let z0 = &self.latents[it.motion];
            let zt = self.ldm.schedule.q_sample(z0, it.t, &it.eps);
            let ztv = tape.constant(Tensor::new(vec![1, d], zt)?);
            let y = self.motions[it.motion].keyframes(&it.mask)?;
            let mem = if it.cond {
                Some(self.ldm.memory(&y, self.vae)?)
            } else {
                None
            };
            let pred = self.ldm.denoiser.forward(tape, p, ztv, it.t, mem.as_ref())?;
            let target = tape.constant(Tensor::new(vec![1, d], z0.clone())?);
            let diff = tape.sub(pred, target)?;
            let sq = tape.square(diff)?;
            let mse = tape.mean(sq)?;
            lat_sum += tape.value(mse).item();
            let mut li = tape.scale(mse, self.config.lambda_z)?;
            if let (true, Some(pv)) = (it.cond, &pv) {
                let zd = self.ldm.latent.tape_unstandardize(tape, pred)?;
                let terms = guidance::geometric_terms(tape, self.vae, pv, zd, &y)?;
                let g = terms.weighted(tape, w)?;
                geo_sum += tape.value(g).item();
                li = tape.add(li, g)?;
            }
            total = Some(match total {
                None => li,
                Some(t) => tape.add(t, li)?,
            });
        }
        let n = items.len() as f64;
        let loss = tape.scale(total.expect("non-empty batch"), 1.0 / n)?;
        Ok((loss, [lat_sum / n, geo_sum / n]))
    }

    pub fn step(&mut self) -> Result<&LdmLossRecord, Error> {
        let step = self.opt.step;
        let items = self.sample_items(step);
        let mut tape = Tape::new();
        let p = self.ldm.denoiser.store.bind(&mut tape, true);
        let diverged = |detail: String| Error::Diverged { step, detail };
        let (loss, parts) = self
            .batch_loss(&mut tape, &p, &items)
            .map_err(|e| diverged(e.to_string()))?;
        let grads = tape.backward(loss, &p.vars).map_err(|e| diverged(e.to_string()))?;
        if !grads.iter().all(Tensor::is_finite) {
            return Err(diverged("non-finite gradient".into()));
        }
        let loss_value = tape.value(loss).item();
        let grad_norm = self.opt.update(&mut self.ldm.denoiser.store, &grads);
        self.curve.push(LdmLossRecord {
            step,
            loss: loss_value,
            latent: parts[0],
            geo: parts[1],
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
        self.ldm
            .to_checkpoint(Some(&self.config), metrics)
            .with_optimizer(&self.ldm.denoiser.store, &self.opt)
    }

    pub fn resume(
        ck: &Checkpoint,
        vae: &'a InrVae,
        data: &[MotionSequence],
        config: LdmTrainConfig,
    ) -> Result<Self, Error> {
        let ldm = Ldm::from_checkpoint(ck)?;
        let mut tr = LdmTrainer::with_model(vae, data, ldm, config)?;
        if let Some(opt) = ck.restore_optimizer(&tr.ldm.denoiser.store)? {
            tr.opt = opt;
        }
        Ok(tr)
    }
}

// ---- sampling -------------------------------------------------------------------

/// What the sample must satisfy.
#[derive(Clone, Debug, PartialEq)]
pub enum Condition {
    Keyframes(KeyframeSpec),
    /// Root XZ path over every frame; sampled unconditionally and guided.
    Trajectory(Vec<[f64; 2]>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub ddim_steps: usize,
    pub cfg_scale: f64,
    pub eta: f64,
    pub guidance: GuidanceConfig,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            ddim_steps: 1000,
            cfg_scale: 1.2,
            eta: 1.0,
            guidance: GuidanceConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub motion: MotionSequence,
    /// Final latent in data units.
    pub z0: Vec<f64>,
    pub trace: GuidanceTrace,
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Draw one motion by DDIM from seeded noise.
///
/// Randomness is drawn from per-step streams of `seed`, so guidance never
/// shifts the noise sequence.
pub fn sample(
    ldm: &Ldm,
    vae: &InrVae,
    cond: &Condition,
    config: &SampleConfig,
    seed: u64,
) -> Result<SampleOutput, Error> {
    let d = ldm.latent_dim();
    let sched = &ldm.schedule;
    let g = &config.guidance;
    g.validate(sched.steps())?;
    let memory = match cond {
        Condition::Keyframes(y) => Some(ldm.memory(y, vae)?),
        Condition::Trajectory(path) => {
            if path.len() != vae.config.frames {
                return Err(Error::Shape(format!(
                    "trajectory has {} frames, expected {}",
                    path.len(),
                    vae.config.frames
                )));
            }
            None
        }
    };
    let mut z = normal_vec(&mut step_rng(seed, 0), d);
    let ts = sched.timesteps(config.ddim_steps);
    let mut trace = GuidanceTrace::default();
    for (i, &t) in ts.iter().enumerate() {
        let prev = ts.get(i + 1).copied().unwrap_or(0);
        let (ab, abp) = (sched.alpha_bar(t), sched.alpha_bar(prev));
        let sigma = sched.sigma(t, prev, config.eta);
        let noise = normal_vec(&mut step_rng(seed, i + 1), d);
        let active = g.mode != GuidanceMode::None && t <= g.t_on(sched.steps());
        if active && g.mode == GuidanceMode::Dps {
            let (z0, grad) = guidance::dps_gradient(ldm, vae, &z, t, memory.as_ref(), config.cfg_scale, cond, g)?;
            let mut next = ddim_step(&z, &z0, ab, abp, sigma, &noise)?;
            match grad {
                Some(gr) => {
                    next = guidance::dps_update(&next, &gr, g.dps_scale);
                    trace.guided_steps += 1;
                }
                None => trace.skipped_steps += 1,
            }
            z = next;
            continue;
        }
        let mut z0 = predict_z0(ldm, &z, t, memory.as_ref(), config.cfg_scale)?;
        if active {
            match guidance::img_update(ldm, vae, &z0, cond, g)? {
                Some(updated) => {
                    z0 = updated;
                    trace.guided_steps += 1;
                }
                None => trace.skipped_steps += 1,
            }
        }
        z = ddim_step(&z, &z0, ab, abp, sigma, &noise)?;
    }
    let z0 = ldm.latent.unstandardize(&z);
    let motion = vae.decode_motion(&z0)?;
    Ok(SampleOutput { motion, z0, trace })
}

/// CFG-combined clean estimate in standardized units. Without keyframes the
/// unconditional prediction is returned.
pub fn predict_z0(ldm: &Ldm, z: &[f64], t: usize, memory: Option<&Tensor>, cfg_scale: f64) -> Result<Vec<f64>, Error> {
    let uncond = ldm.denoiser.predict(z, t, None)?;
    match memory {
        Some(m) => {
            let c = ldm.denoiser.predict(z, t, Some(m))?;
            Ok(cfg_combine(&c, &uncond, cfg_scale))
        }
        None => Ok(uncond),
    }
}
