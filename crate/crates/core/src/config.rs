//! One configuration for every pipeline stage, read from TOML or JSON.
//!
//! Every section is optional and falls back to its defaults; unknown keys
//! anywhere are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::control::ControlConfig;
use crate::dataset::RecordingConfig;
use crate::error::ConfigError;
use crate::eval::AblationConfig;
use crate::expert::ExpertConfig;
use crate::neural::TrainConfig;
use crate::teleop::TeleopConfig;
use crate::world::World;

/// Environment variable naming the default config path.
pub const CONFIG_ENV: &str = "SERVOCLONE_CONFIG";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed for demonstration generation.
    pub seed: u64,
    pub world: World,
    pub expert: ExpertConfig,
    pub recording: RecordingConfig,
    pub train: TrainConfig,
    pub control: ControlConfig,
    pub ablation: AblationConfig,
    pub teleop: TeleopConfig,
}

impl RunConfig {
    /// Parses `.toml` files as TOML and anything else as JSON.
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let parse_err = |reason: String| ConfigError::Parse { path: path.into(), reason };
        let cfg: RunConfig = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml")) {
            toml::from_str(&text).map_err(|e| parse_err(e.message().to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `explicit`, else the file named by `SERVOCLONE_CONFIG`, else
    /// the defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<RunConfig, ConfigError> {
        let from_env = std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
        match explicit.map(Path::to_path_buf).or(from_env) {
            Some(path) => RunConfig::load(&path),
            None => {
                let cfg = RunConfig::default();
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.world.validate().map_err(|e| invalid(&e))?;
        self.expert.validate().map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        self.control.validate().map_err(|e| invalid(&e))?;
        self.ablation.validate().map_err(|e| invalid(&e))?;
        let r = &self.recording;
        if !(r.record_rate > 0.0 && r.record_rate <= self.control.rate) {
            return Err(ConfigError::Invalid(format!(
                "recording.record_rate must lie in (0, {}] Hz",
                self.control.rate
            )));
        }
        if !(r.max_episode_time > 0.0) || !(0.0..=1.0).contains(&r.near_fraction) {
            return Err(ConfigError::Invalid(
                "recording.max_episode_time must be positive and near_fraction in [0, 1]".into(),
            ));
        }
        r.perturbation.validate().map_err(|e| ConfigError::Invalid(format!("recording.{e}")))?;
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Writes the resolved configuration as `config.json` in `dir`.
    pub fn echo_to(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&self.to_json())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn partial_toml_and_json() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.toml", "seed = 7\n[train]\nepochs = 3\n[world.scene]\ncup_height = 0.09\n");
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.world.scene.cup_height, 0.09);

        let p = write(dir.path(), "b.json", r#"{"control": {"rate": 15.0}}"#);
        assert_eq!(RunConfig::load(&p).unwrap().control.rate, 15.0);
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = RunConfig::default();
        let dir = tempfile::tempdir().unwrap();
        cfg.echo_to(dir.path()).unwrap();
        assert_eq!(RunConfig::load(&dir.path().join("config.json")).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.toml", "[train]\nepochs = 3\nlearning_rte = 0.1\n");
        assert!(matches!(RunConfig::load(&p), Err(ConfigError::Parse { .. })));
        let p = write(dir.path(), "b.toml", "bogus = 1\n");
        assert!(matches!(RunConfig::load(&p), Err(ConfigError::Parse { .. })));
        let p = write(dir.path(), "c.toml", "[train]\nepochs = 0\n");
        assert!(matches!(RunConfig::load(&p), Err(ConfigError::Invalid(_))));
        let p = write(dir.path(), "d.toml", "[recording]\nrecord_rate = 60.0\n");
        assert!(matches!(RunConfig::load(&p), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::load(&dir.path().join("missing.toml")), Err(ConfigError::Io { .. })));
    }
}
