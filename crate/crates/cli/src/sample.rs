use std::fs;
use std::path::PathBuf;
use std::str::FromStr;

use clap::Args;
use inrmotion::guidance::{root_path, GuidanceMode, GuidanceTrace};
use inrmotion::inrvae::InrVae;
use inrmotion::ldm::{sample, Condition, Ldm, SampleConfig};
use inrmotion::motion::{
    random_mask, read_keyframes, startend_mask, write_keyframes, write_motion, KeyframeSpec, MotionSequence, Skeleton,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io::{self, stem, KEYFRAMES, META, MOTIONS, TRAJECTORIES};

/// Where the condition of each sample comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum KeyframeSource {
    File(PathBuf),
    Random(usize),
    StartEnd(usize),
    /// Root XZ path of the reference motion.
    Trajectory,
}

impl FromStr for KeyframeSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let count = |k: &str| k.parse::<usize>().map_err(|_| format!("bad keyframe count {k:?}"));
        if let Some(k) = s.strip_prefix("random:") {
            Ok(KeyframeSource::Random(count(k)?))
        } else if let Some(k) = s.strip_prefix("startend:") {
            Ok(KeyframeSource::StartEnd(count(k)?))
        } else if s == "trajectory" {
            Ok(KeyframeSource::Trajectory)
        } else {
            Ok(KeyframeSource::File(PathBuf::from(s)))
        }
    }
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub vae: PathBuf,
    #[arg(long)]
    pub ldm: PathBuf,
    /// `<file>`, `random:K`, `startend:K` or `trajectory`.
    #[arg(long)]
    pub keyframes: KeyframeSource,
    /// Motion directory the conditions are taken from (cycled over samples).
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub guidance: Option<GuidanceMode>,
    #[arg(long)]
    pub cfg_scale: Option<f64>,
    /// DDIM steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

/// `meta/NNNNNN.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub index: usize,
    pub seed: u64,
    /// Reference motion the condition was taken from.
    pub reference: Option<usize>,
    pub keyframes: Option<Vec<usize>>,
    pub guidance: GuidanceMode,
    pub trace: GuidanceTrace,
}

/// One planned sample.
#[derive(Clone, Debug)]
pub struct Job {
    pub seed: u64,
    pub reference: Option<usize>,
    pub condition: Condition,
}

pub fn sample_config(cfg: &RunConfig) -> SampleConfig {
    SampleConfig {
        ddim_steps: cfg.ldm.sample.ddim_steps,
        cfg_scale: cfg.ldm.sample.cfg_scale,
        eta: cfg.ldm.sample.eta,
        guidance: cfg.guidance.clone(),
    }
}

/// Mask RNG of sample `seed`, on a stream the sampler never uses.
pub fn mask_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

/// Conditions for `count` samples; sample `i` uses seed `seed + i` and
/// reference `i mod len(refs)`.
pub fn plan(
    source: &KeyframeSource,
    refs: &[MotionSequence],
    joints: usize,
    seed: u64,
    count: usize,
) -> CliResult<Vec<Job>> {
    let from_file = match source {
        KeyframeSource::File(p) => {
            io::require(p, "keyframe file")?;
            Some(read_keyframes(p, joints)?)
        }
        _ => {
            if refs.is_empty() {
                return Err(CliError::Missing(
                    "--ref motions are required for generated conditions".into(),
                ));
            }
            None
        }
    };
    (0..count)
        .map(|i| {
            let s = seed.wrapping_add(i as u64);
            if let Some(y) = &from_file {
                return Ok(Job {
                    seed: s,
                    reference: None,
                    condition: Condition::Keyframes(y.clone()),
                });
            }
            let r = i % refs.len();
            let m = &refs[r];
            let key = |mask: Vec<bool>| -> CliResult<Condition> { Ok(Condition::Keyframes(m.keyframes(&mask)?)) };
            let condition = match source {
                KeyframeSource::Random(k) => key(random_mask(m.len(), *k, &mut mask_rng(s)).map_err(keyframe_err)?)?,
                KeyframeSource::StartEnd(k) => key(startend_mask(m.len(), *k).map_err(keyframe_err)?)?,
                KeyframeSource::Trajectory => Condition::Trajectory(root_path(m)),
                KeyframeSource::File(_) => unreachable!(),
            };
            Ok(Job {
                seed: s,
                reference: Some(r),
                condition,
            })
        })
        .collect()
}

fn keyframe_err(e: inrmotion::Error) -> CliError {
    CliError::Config(e.to_string())
}

pub fn run_jobs(
    ldm: &Ldm,
    vae: &InrVae,
    jobs: &[Job],
    config: &SampleConfig,
    threads: usize,
) -> CliResult<Vec<(MotionSequence, GuidanceTrace)>> {
    io::par_map(jobs, threads, |_, j| {
        let out = sample(ldm, vae, &j.condition, config, j.seed)?;
        if !out.z0.iter().all(|v| v.is_finite()) {
            return Err(CliError::Numeric(format!(
                "sample with seed {} produced a non-finite latent",
                j.seed
            )));
        }
        Ok((out.motion, out.trace))
    })
}

pub fn sample_cmd(mut cfg: RunConfig, a: SampleArgs) -> CliResult<()> {
    if let Some(g) = a.guidance {
        cfg.guidance.mode = g;
    }
    if let Some(c) = a.cfg_scale {
        cfg.ldm.sample.cfg_scale = c;
    }
    if let Some(s) = a.steps {
        cfg.ldm.sample.ddim_steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seeds.sample = s;
    }
    if a.count == 0 {
        return Err(CliError::Config("count must be at least 1".into()));
    }
    let vae = io::load_vae(&a.vae)?;
    let ldm = io::load_ldm(&a.ldm)?;
    let steps = cfg.ldm.sample.ddim_steps;
    if steps == 0 || steps > ldm.schedule.steps() {
        return Err(CliError::Config(format!(
            "steps must lie in 1..={}",
            ldm.schedule.steps()
        )));
    }
    cfg.guidance.validate(ldm.schedule.steps())?;
    let skeleton = Skeleton::humanoid();
    let refs = match &a.reference {
        Some(d) => io::read_motion_dir(d)?.0,
        None => Vec::new(),
    };
    let jobs = plan(&a.keyframes, &refs, skeleton.joint_count(), cfg.seeds.sample, a.count)?;
    let config = sample_config(&cfg);
    let results = run_jobs(&ldm, &vae, &jobs, &config, a.jobs)?;

    cfg.echo(&a.out)?;
    for sub in [MOTIONS, META] {
        fs::create_dir_all(a.out.join(sub))?;
    }
    for (i, (job, (motion, trace))) in jobs.iter().zip(&results).enumerate() {
        let name = format!("{}.json", stem(i));
        write_motion(&a.out.join(MOTIONS).join(&name), motion, &skeleton)?;
        let keyframes = match &job.condition {
            Condition::Keyframes(y) => {
                fs::create_dir_all(a.out.join(KEYFRAMES))?;
                write_keyframes(&a.out.join(KEYFRAMES).join(&name), y)?;
                Some(y.indices())
            }
            Condition::Trajectory(path) => {
                fs::create_dir_all(a.out.join(TRAJECTORIES))?;
                io::write_json(&a.out.join(TRAJECTORIES).join(&name), path)?;
                None
            }
        };
        let meta = SampleMeta {
            index: i,
            seed: job.seed,
            reference: job.reference,
            keyframes,
            guidance: cfg.guidance.mode,
            trace: trace.clone(),
        };
        io::write_json(&a.out.join(META).join(&name), &meta)?;
    }
    println!("wrote {} samples to {}", results.len(), a.out.display());
    Ok(())
}

/// Keyframe spec of a planned job, if it has one.
pub fn job_keyframes(j: &Job) -> Option<&KeyframeSpec> {
    match &j.condition {
        Condition::Keyframes(y) => Some(y),
        Condition::Trajectory(_) => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyframe_sources_parse() {
        assert_eq!("random:5".parse(), Ok(KeyframeSource::Random(5)));
        assert_eq!("startend:8".parse(), Ok(KeyframeSource::StartEnd(8)));
        assert_eq!("trajectory".parse(), Ok(KeyframeSource::Trajectory));
        assert_eq!("k.json".parse(), Ok(KeyframeSource::File("k.json".into())));
        assert!("random:x".parse::<KeyframeSource>().is_err());
    }
}
