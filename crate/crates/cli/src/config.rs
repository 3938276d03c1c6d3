//! Run configuration: TOML file, `IMGMOTION_*` environment overrides, echo.

use std::fs;
use std::path::Path;

use inrmotion::guidance::GuidanceConfig;
use inrmotion::inrvae::{VaeConfig, VaeTrainConfig};
use inrmotion::ldm::{DenoiserConfig, LdmTrainConfig, ScheduleConfig};
use inrmotion::motion::FamilyParams;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const ENV_PREFIX: &str = "IMGMOTION_";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub vae: VaeSection,
    pub ldm: LdmSection,
    pub guidance: GuidanceConfig,
    pub eval: EvalSection,
    pub seeds: Seeds,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub count: usize,
    pub motion: FamilyParams,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            count: 200,
            motion: FamilyParams::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeSection {
    pub model: VaeConfig,
    pub train: VaeTrainConfig,
    /// Save a resumable checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LdmSection {
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub train: LdmTrainConfig,
    pub sample: SamplerSection,
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub ddim_steps: usize,
    pub cfg_scale: f64,
    pub eta: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            ddim_steps: 1000,
            cfg_scale: 1.2,
            eta: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub repeats: usize,
    pub diversity_pairs: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            repeats: 10,
            diversity_pairs: 200,
        }
    }
}

/// Seeds applied on top of the per-module seed fields.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub data: u64,
    pub vae: u64,
    pub ldm: u64,
    pub sample: u64,
    pub eval: u64,
}

impl RunConfig {
    /// Defaults, then the file (if any), then environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        Self::load_with_env(path, std::env::vars())
    }

    pub fn load_with_env(
        path: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Missing(format!("config file {}: {e}", p.display())))?;
                toml::from_str::<RunConfig>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        let mut overrides: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        if !overrides.is_empty() {
            overrides.sort();
            let mut tree = toml::Value::try_from(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
            for (k, v) in &overrides {
                apply_override(&mut tree, &k[ENV_PREFIX.len()..].to_ascii_lowercase(), v)
                    .map_err(|e| CliError::Config(format!("{k}: {e}")))?;
            }
            cfg = tree
                .try_into()
                .map_err(|e: toml::de::Error| CliError::Config(format!("environment override: {e}")))?;
        }
        cfg.apply_seeds();
        Ok(cfg)
    }

    /// Push `[seeds]` into the module configs.
    pub fn apply_seeds(&mut self) {
        self.vae.model.seed = self.seeds.vae;
        self.vae.train.seed = self.seeds.vae;
        self.ldm.denoiser.seed = self.seeds.ldm;
        self.ldm.train.seed = self.seeds.ldm;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Write the resolved config as `config.toml` in `dir`.
    pub fn echo(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), self.to_toml())?;
        Ok(())
    }
}

/// Set the leaf named by `key` (`section_sub_field`, lowercase) to `raw`.
///
/// Keys may themselves contain underscores, so the path is resolved by
/// matching existing table keys greedily from the left.
fn apply_override(tree: &mut toml::Value, key: &str, raw: &str) -> Result<(), String> {
    let table = tree.as_table_mut().ok_or("not a table")?;
    let mut names: Vec<String> = table.keys().cloned().collect();
    names.sort_by_key(|n| std::cmp::Reverse(n.len()));
    for name in names {
        if key == name {
            let old = &table[&name];
            if old.is_table() {
                return Err(format!("{name} is a section, not a value"));
            }
            table.insert(name, parse_value(raw, old));
            return Ok(());
        }
        if let Some(rest) = key.strip_prefix(&name).and_then(|r| r.strip_prefix('_')) {
            if table[&name].is_table() {
                return apply_override(table.get_mut(&name).unwrap(), rest, raw);
            }
        }
    }
    if key == "guidance_t_on" || key == "t_on" {
        table.insert("t_on".into(), parse_value(raw, &toml::Value::Integer(0)));
        return Ok(());
    }
    Err(format!("unknown config key {key:?}"))
}

fn parse_value(raw: &str, like: &toml::Value) -> toml::Value {
    if like.is_str() {
        return toml::Value::String(raw.to_string());
    }
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "[vae.train]\nstepz = 3\n").unwrap();
        let err = RunConfig::load_with_env(Some(&p), env(&[])).unwrap_err();
        assert!(matches!(err, CliError::Config(ref m) if m.contains("stepz")), "{err}");
        fs::write(&p, "[vea]\n").unwrap();
        assert!(matches!(
            RunConfig::load_with_env(Some(&p), env(&[])),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn environment_overrides_nested_keys() {
        let cfg = RunConfig::load_with_env(
            None,
            env(&[
                ("IMGMOTION_VAE_TRAIN_STEPS", "17"),
                ("IMGMOTION_LDM_SAMPLE_CFG_SCALE", "1.5"),
                ("IMGMOTION_GUIDANCE_MODE", "geo-only"),
                ("IMGMOTION_DATA_MOTION_FAMILY", "walk"),
                ("IMGMOTION_SEEDS_VAE", "9"),
                ("OTHER_VAR", "x"),
            ]),
        )
        .unwrap();
        assert_eq!(cfg.vae.train.steps, 17);
        assert_eq!(cfg.ldm.sample.cfg_scale, 1.5);
        assert_eq!(cfg.guidance.mode, inrmotion::guidance::GuidanceMode::GeoOnly);
        assert_eq!(cfg.data.motion.family, inrmotion::motion::Family::Walk);
        assert_eq!((cfg.vae.model.seed, cfg.vae.train.seed), (9, 9));
        let bad = RunConfig::load_with_env(None, env(&[("IMGMOTION_VAE_TRAIN_NOPE", "1")]));
        assert!(matches!(bad, Err(CliError::Config(_))));
        let t_on = RunConfig::load_with_env(None, env(&[("IMGMOTION_GUIDANCE_T_ON", "120")])).unwrap();
        assert_eq!(t_on.guidance.t_on, Some(120));
    }
}
