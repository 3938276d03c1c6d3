use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use inrmotion::guidance::{
    mean_stage1, stage1_ablation, stage1_csv, stage1_step_ratio, stage1_svgs, GuidanceMode, Stage1Config,
};
use inrmotion::ldm::SampleConfig;
use inrmotion::motion::random_mask;
use inrmotion::svg::{line_chart, Series};
use rand::RngExt;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::evaluate::{evaluate_repeats, EvalSet};
use crate::io;
use crate::sample::{job_keyframes, mask_rng, plan, run_jobs, sample_config, KeyframeSource};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblateMode {
    /// Direct latent optimization, geometric-only against geometric+manifold.
    Stage1,
    /// Full sampling over a grid of one guidance parameter.
    Sweep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParam {
    /// Guidance window `t_on`.
    Steps,
    /// Manifold kernel width `w`.
    Kernel,
    /// Multiplier on the geometric step size.
    GeoScale,
    Cfg,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Steps => "steps",
            SweepParam::Kernel => "kernel",
            SweepParam::GeoScale => "geo-scale",
            SweepParam::Cfg => "cfg",
        }
    }

    pub fn default_grid(self) -> Vec<f64> {
        match self {
            SweepParam::Steps => vec![100.0, 300.0, 500.0, 1000.0],
            SweepParam::Kernel => vec![0.0, 1.0, 5.0, 9.0, 13.0],
            SweepParam::GeoScale => vec![1.0, 5.0, 10.0],
            SweepParam::Cfg => vec![1.0, 1.2, 1.5, 2.0],
        }
    }

    /// Apply grid value `v` to a sampler configuration.
    pub fn apply(self, base: &SampleConfig, v: f64, schedule_steps: usize) -> CliResult<SampleConfig> {
        let bad = |why: &str| CliError::Config(format!("invalid {} value {v}: {why}", self.name()));
        if !v.is_finite() {
            return Err(bad("not finite"));
        }
        let mut c = base.clone();
        let int = || {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(bad("expected a non-negative integer"))
            }
        };
        match self {
            SweepParam::Steps => {
                let t = int()?;
                if t == 0 || t > schedule_steps {
                    return Err(bad(&format!("must lie in 1..={schedule_steps}")));
                }
                c.guidance.t_on = Some(t);
            }
            SweepParam::Kernel => {
                let w = int()?;
                if w != 0 && w % 2 == 0 {
                    return Err(bad("kernel width must be odd or 0"));
                }
                c.guidance.kernel = w;
            }
            SweepParam::GeoScale => {
                if v <= 0.0 {
                    return Err(bad("must be positive"));
                }
                c.guidance.lambda = base.guidance.lambda * v;
            }
            SweepParam::Cfg => {
                if v < 0.0 {
                    return Err(bad("must be non-negative"));
                }
                c.cfg_scale = v;
            }
        }
        c.guidance.validate(schedule_steps).map_err(|e| bad(&e.to_string()))?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub mode: AblateMode,
    #[arg(long, value_enum)]
    pub param: Option<SweepParam>,
    /// Override the grid, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<f64>>,
    #[arg(long)]
    pub vae: PathBuf,
    #[arg(long)]
    pub ldm: PathBuf,
    /// Motions the keyframes are drawn from (and the FID reference).
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Keyframes per condition.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Samples per grid point, or stage-1 runs.
    #[arg(long, default_value_t = 32)]
    pub count: usize,
    /// Stage-1 optimization steps.
    #[arg(long, default_value_t = 100)]
    pub opt_steps: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

/// One row of a sweep table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub keyframe_error: f64,
    pub latent_fid: f64,
    pub diversity: f64,
    pub foot_skating: f64,
    pub peak_jerk: f64,
    pub auj: f64,
}

pub fn ablate_cmd(mut cfg: RunConfig, a: AblateArgs) -> CliResult<()> {
    if let Some(s) = a.seed {
        cfg.seeds.sample = s;
    }
    if a.count == 0 {
        return Err(CliError::Config("count must be at least 1".into()));
    }
    let vae = io::load_vae(&a.vae)?;
    let ldm = io::load_ldm(&a.ldm)?;
    let (refs, skeleton) = io::read_motion_dir(&a.reference)?;
    match a.mode {
        AblateMode::Stage1 => {
            let config = Stage1Config {
                steps: a.opt_steps,
                lambda: cfg.guidance.lambda,
                gamma: cfg.guidance.gamma,
                kernel: cfg.guidance.kernel,
                weights: cfg.guidance.weights.clone(),
            };
            let seeds: Vec<u64> = (0..a.count as u64).map(|i| cfg.seeds.sample.wrapping_add(i)).collect();
            let runs = io::par_map(&seeds, a.jobs, |_, &s| {
                let mut rng = mask_rng(s);
                let m = &refs[rng.random_range(0..refs.len())];
                let y =
                    m.keyframes(&random_mask(m.len(), a.k, &mut rng).map_err(|e| CliError::Config(e.to_string()))?)?;
                Ok(stage1_ablation(&vae, &ldm.latent, &ldm.latent.mean, &y, &config)?)
            })?;
            let ratios: Vec<Option<f64>> = runs.iter().map(|r| stage1_step_ratio(r)).collect();
            let mean = mean_stage1(&runs)?;
            cfg.echo(&a.out)?;
            fs::write(a.out.join("stage1.csv"), stage1_csv(&mean)?)?;
            for (name, svg) in stage1_svgs(&mean) {
                fs::write(a.out.join(format!("stage1_{name}.svg")), svg)?;
            }
            let summary = json!({
                "seeds": seeds,
                "config": config,
                "step_ratio": ratios,
                "median_step_ratio": median(&ratios),
            });
            io::write_json(&a.out.join("stage1_summary.json"), &summary)?;
            println!("median step ratio {:?}", median(&ratios));
        }
        AblateMode::Sweep => {
            let param = a
                .param
                .ok_or_else(|| CliError::Config("--param is required for sweep".into()))?;
            let grid = a.values.clone().unwrap_or_else(|| param.default_grid());
            if grid.is_empty() {
                return Err(CliError::Config("empty grid".into()));
            }
            let mut base = sample_config(&cfg);
            if base.guidance.mode == GuidanceMode::None {
                base.guidance.mode = GuidanceMode::Img;
            }
            let configs = grid
                .iter()
                .map(|&v| param.apply(&base, v, ldm.schedule.steps()))
                .collect::<CliResult<Vec<_>>>()?;
            let jobs = plan(
                &KeyframeSource::Random(a.k),
                &refs,
                skeleton.joint_count(),
                cfg.seeds.sample,
                a.count,
            )?;
            let mut rows = Vec::new();
            for (&v, c) in grid.iter().zip(&configs) {
                let out = run_jobs(&ldm, &vae, &jobs, c, a.jobs)?;
                let set = EvalSet {
                    generated: out.into_iter().map(|(m, _)| m).collect(),
                    conditions: jobs.iter().map(|j| job_keyframes(j).cloned()).collect(),
                    trajectories: vec![None; jobs.len()],
                };
                let (_, r) = evaluate_repeats(&set, &refs, Some(&vae), cfg.eval.diversity_pairs, 1, cfg.seeds.eval, 1)?;
                let r = &r[0];
                let get = |k: &str| r.get(k).copied().unwrap_or(f64::NAN);
                let row = SweepRow {
                    param: param.name().into(),
                    value: v,
                    keyframe_error: get("keyframe_error"),
                    latent_fid: get("latent_fid"),
                    diversity: get("diversity"),
                    foot_skating: get("foot_skating"),
                    peak_jerk: get("peak_jerk"),
                    auj: get("auj"),
                };
                println!(
                    "{} = {v}: keyframe error {:.4}, latent FID {:.4}",
                    param.name(),
                    row.keyframe_error,
                    row.latent_fid
                );
                rows.push(row);
            }
            cfg.echo(&a.out)?;
            let name = format!("sweep_{}", param.name());
            io::write_csv(&a.out.join(format!("{name}.csv")), &rows)?;
            let series = |label: &str, f: fn(&SweepRow) -> f64| {
                Series::new(label, rows.iter().map(|r| (r.value, f(r))).collect())
            };
            let svg = line_chart(
                &format!("Guidance sweep over {}", param.name()),
                param.name(),
                "metric",
                &[
                    series("keyframe error", |r| r.keyframe_error),
                    series("latent FID", |r| r.latent_fid),
                ],
            );
            fs::write(a.out.join(format!("{name}.svg")), svg)?;
            let table: BTreeMap<String, &SweepRow> = rows.iter().map(|r| (format!("{}", r.value), r)).collect();
            io::write_json(
                &a.out.join(format!("{name}.json")),
                &json!({ "base": base, "rows": table }),
            )?;
        }
    }
    Ok(())
}

fn median(values: &[Option<f64>]) -> Option<f64> {
    // A run that never reaches the target counts as infinitely slow.
    let mut v: Vec<f64> = values.iter().map(|r| r.unwrap_or(f64::INFINITY)).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let m = if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    };
    m.is_finite().then_some(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_values_are_validated() {
        let base = SampleConfig::default();
        assert!(SweepParam::Kernel.apply(&base, 4.0, 1000).is_err());
        assert!(SweepParam::Kernel.apply(&base, 1.5, 1000).is_err());
        assert_eq!(SweepParam::Kernel.apply(&base, 13.0, 1000).unwrap().guidance.kernel, 13);
        assert!(SweepParam::Steps.apply(&base, 1001.0, 1000).is_err());
        assert_eq!(
            SweepParam::Steps.apply(&base, 300.0, 1000).unwrap().guidance.t_on,
            Some(300)
        );
        assert_eq!(
            SweepParam::GeoScale.apply(&base, 5.0, 1000).unwrap().guidance.lambda,
            5.0 * base.guidance.lambda
        );
        assert!(SweepParam::Cfg.apply(&base, -1.0, 1000).is_err());
        for p in [
            SweepParam::Steps,
            SweepParam::Kernel,
            SweepParam::GeoScale,
            SweepParam::Cfg,
        ] {
            for v in p.default_grid() {
                p.apply(&base, v, 1000).unwrap();
            }
        }
    }

    #[test]
    fn median_treats_misses_as_slowest() {
        assert_eq!(median(&[Some(0.5), None, Some(0.2)]), Some(0.5));
        assert_eq!(median(&[Some(0.5), None]), None);
        assert_eq!(median(&[Some(0.2), Some(0.4)]), Some(0.30000000000000004));
    }
}
