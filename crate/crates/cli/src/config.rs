//! Experiment configuration: a TOML document binding corpus, split, detector,
//! and training settings. Unknown keys are rejected; omitted keys take the
//! documented defaults. Selected fields can be overridden through `SSDET_*`
//! environment variables and command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ssdet::data::SceneSpec;
use ssdet::detector::DetectorConfig;
use ssdet::error::{Error, Result};
use ssdet::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub gen_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            train_scenes: 2000,
            eval_scenes: 200,
            gen_seed: 2024,
        }
    }
}

impl CorpusConfig {
    pub fn total_scenes(&self) -> usize {
        self.train_scenes + self.eval_scenes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub labeled_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            labeled_fraction: 0.10,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_name: String,
    pub out_dir: PathBuf,
    pub corpus_dir: PathBuf,
    pub scene: SceneSpec,
    pub corpus: CorpusConfig,
    pub split: SplitConfig,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn defaults() -> ExperimentConfig {
        ExperimentConfig {
            run_name: "run".into(),
            out_dir: PathBuf::from("runs"),
            corpus_dir: PathBuf::from("corpus"),
            scene: SceneSpec::default(),
            corpus: CorpusConfig::default(),
            split: SplitConfig::default(),
            detector: DetectorConfig::default(),
            train: TrainConfig::default(),
        }
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if cfg.run_name.is_empty() {
            cfg.run_name = "run".into();
        }
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `SSDET_*` environment overrides, applied after file parsing.
    pub fn apply_env(&mut self) -> Result<()> {
        fn get<T: std::str::FromStr>(key: &str) -> Result<Option<T>> {
            match std::env::var(key) {
                Ok(v) => v.parse::<T>().map(Some).map_err(|_| {
                    Error::Config(format!("environment variable {key} has invalid value {v:?}"))
                }),
                Err(_) => Ok(None),
            }
        }
        if let Some(v) = get::<u64>("SSDET_SEED")? {
            self.train.seed = v;
        }
        if let Some(v) = get::<String>("SSDET_OUT_DIR")? {
            self.out_dir = PathBuf::from(v);
        }
        if let Some(v) = get::<String>("SSDET_RUN_NAME")? {
            self.run_name = v;
        }
        if let Some(v) = get::<String>("SSDET_CORPUS_DIR")? {
            self.corpus_dir = PathBuf::from(v);
        }
        if let Some(v) = get::<u64>("SSDET_TOTAL_ITERS")? {
            self.train.total_iters = v;
        }
        if let Some(v) = get::<u64>("SSDET_BURN_IN_ITERS")? {
            self.train.burn_in_iters = v;
        }
        if let Some(v) = get::<f64>("SSDET_BETA")? {
            self.train.beta = v;
        }
        if let Some(v) = get::<f64>("SSDET_ALPHA")? {
            self.train.alpha = v;
        }
        if let Some(v) = get::<usize>("SSDET_N_PROPOSALS")? {
            self.train.n_proposals = v;
        }
        if let Some(v) = get::<f64>("SSDET_THETA")? {
            self.train.theta = v;
        }
        if let Some(v) = get::<f64>("SSDET_LR")? {
            self.train.lr = v;
        }
        if let Some(v) = get::<f64>("SSDET_LABELED_FRACTION")? {
            self.split.labeled_fraction = v;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.detector.validate()?;
        self.train.validate()?;
        if self.corpus.train_scenes == 0 {
            return Err(Error::Config("corpus.train_scenes must be >= 1".into()));
        }
        if self.corpus.eval_scenes == 0 {
            return Err(Error::Config("corpus.eval_scenes must be >= 1".into()));
        }
        if !(self.split.labeled_fraction > 0.0 && self.split.labeled_fraction <= 1.0) {
            return Err(Error::Config(
                "split.labeled_fraction must be in (0, 1]".into(),
            ));
        }
        if self.scene.num_classes != self.detector.num_classes {
            return Err(Error::Config(format!(
                "scene.num_classes ({}) != detector.num_classes ({})",
                self.scene.num_classes, self.detector.num_classes
            )));
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_name)
    }

    /// Serialize the fully resolved configuration (written next to outputs).
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize config: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = ExperimentConfig::defaults();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn paper_defaults_are_in_place() {
        let cfg = ExperimentConfig::defaults();
        assert_eq!(cfg.train.beta, 0.5);
        assert_eq!(cfg.train.alpha, 0.999);
        assert_eq!(cfg.train.n_proposals, 640);
        assert_eq!(cfg.train.theta, 0.7);
        assert_eq!(cfg.train.copy_k, 10_000);
        assert_eq!(cfg.corpus.train_scenes, 2000);
        assert_eq!(cfg.corpus.eval_scenes, 200);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let res: std::result::Result<ExperimentConfig, _> =
            toml::from_str("definitely_not_a_key = 1");
        assert!(res.is_err());
        let res: std::result::Result<ExperimentConfig, _> =
            toml::from_str("[train]\nnot_a_train_key = 2");
        assert!(res.is_err());
    }

    #[test]
    fn omitted_keys_take_defaults() {
        let cfg: ExperimentConfig = toml::from_str("[train]\nbeta = 0.25").unwrap();
        assert_eq!(cfg.train.beta, 0.25);
        assert_eq!(cfg.train.alpha, 0.999);
        assert_eq!(cfg.corpus.train_scenes, 2000);
    }
}
