//! The serialized run configuration: every knob a command can read, with
//! defaults, loaded from `--config` and then overridden by flags.

use crate::error::CliError;
use hazeforge::committee::{AblationMode, TrainConfig};
use hazeforge::eval::NiqeConfig;
use hazeforge::synth::DatasetConfig;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const SEED_ENV: &str = "HAZEFORGE_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSettings {
    pub modes: Vec<AblationMode>,
    /// Number of consecutive seeds starting at the master seed.
    pub seeds: usize,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            modes: AblationMode::ALL.to_vec(),
            seeds: 3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
    pub reference: Option<PathBuf>,
    pub niqe_corpus: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed; propagated into the dataset and training seeds.
    pub seed: u64,
    pub threads: usize,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub ablation: AblationSettings,
    pub niqe: NiqeConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            ablation: AblationSettings::default(),
            niqe: NiqeConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path` (if any) and resolves the master seed: `flag`, then the
    /// file's `seed`, then `HAZEFORGE_SEED`, then 0.
    pub fn load(path: Option<&Path>, seed_flag: Option<u64>) -> Result<Self, CliError> {
        let (mut cfg, file_seed) = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                let value: serde_json::Value = serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                let file_seed = value.get("seed").and_then(|s| s.as_u64());
                let cfg: RunConfig =
                    serde_json::from_value(value).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                (cfg, file_seed)
            }
            None => (RunConfig::default(), None),
        };
        let env_seed = match std::env::var(SEED_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
            ),
            Err(_) => None,
        };
        cfg.set_seed(seed_flag.or(file_seed).or(env_seed).unwrap_or(0));
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.dataset.seed = seed;
        self.train.seed = seed;
    }

    pub fn ablation_seeds(&self) -> Vec<u64> {
        (0..self.ablation.seeds as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }

    /// Writes the exact configuration next to a command's outputs.
    pub fn write_to(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(RUN_CONFIG_FILE);
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults_and_seed_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"seed": 9, "train": {"phase2_epochs": 4}}"#).unwrap();
        let c = RunConfig::load(Some(&p), None).unwrap();
        assert_eq!((c.seed, c.dataset.seed, c.train.seed), (9, 9, 9));
        assert_eq!(c.train.phase2_epochs, 4);
        assert_eq!(c.train.phase1_epochs, 30);
        assert_eq!(c.dataset.train_count, 512);
        let c = RunConfig::load(Some(&p), Some(3)).unwrap();
        assert_eq!(c.seed, 3);
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig::default();
        c.set_seed(5);
        c.paths.inputs = vec!["a.png".into()];
        let dir = tempfile::tempdir().unwrap();
        c.write_to(dir.path()).unwrap();
        let back = RunConfig::load(Some(&dir.path().join(RUN_CONFIG_FILE)), None).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn malformed_file_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"train": {"mode": "m9"}}"#).unwrap();
        assert!(matches!(RunConfig::load(Some(&p), None), Err(CliError::Config(_))));
    }
}
