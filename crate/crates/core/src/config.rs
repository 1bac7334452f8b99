//! Run configuration: one JSON document with `model`, `train`, `synth`,
//! `paths` and an optional top-level `seed`. Every section is optional and
//! falls back to its defaults; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synth::SyntheticSpec;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SyntheticSpec,
    pub paths: Paths,
    /// When set, overrides the training and generator seeds and seeds
    /// parameter initialisation.
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()
    }

    /// Applies the top-level seed to the nested sections.
    pub fn resolve_seed(&mut self) {
        if let Some(seed) = self.seed {
            self.train.seed = seed;
            self.synth.seed = seed;
        }
    }

    /// Seed for parameter initialisation.
    pub fn init_seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Parses and validates a config document. Type errors and unknown keys
/// are reported with the dotted path of the offending key.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        Error::config(if key == "." { "<root>".to_string() } else { key }, e.into_inner().to_string())
    })?;
    cfg.resolve_seed();
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PsiKind;

    fn key_of(e: Error) -> String {
        match e {
            Error::Config { key, .. } => key,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = parse_config_str("{}").unwrap();
        let t = cfg.model.tiling;
        assert_eq!((t.n, t.m, t.d, cfg.model.heads), (49, 49, 256, 4));
        assert_eq!((t.bag_px, t.word_px), (1792, 256));
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn indivisible_heads_are_rejected() {
        let e = parse_config_str(r#"{"model": {"heads": 5}}"#).unwrap_err();
        assert_eq!(key_of(e), "heads");
    }

    #[test]
    fn errors_name_the_key() {
        let e = parse_config_str(r#"{"train": {"lr_peak": "fast"}}"#).unwrap_err();
        assert_eq!(key_of(e), "train.lr_peak");
        let e = parse_config_str(r#"{"model": {"tiling": {"n": 4, "colour": 1}}}"#).unwrap_err();
        let text = e.to_string();
        let key = key_of(e);
        assert!(key.starts_with("model.tiling"), "{key}");
        assert!(text.contains("colour"));
        let e = parse_config_str(r#"{"train": {"accum_steps": 0}}"#).unwrap_err();
        assert_eq!(key_of(e), "accum_steps");
    }

    #[test]
    fn round_trip_is_identity() {
        let mut cfg = RunConfig::default();
        cfg.model.psi = PsiKind::Manhattan;
        cfg.model.tiling.d = 32;
        cfg.train.accum_steps = 2;
        cfg.synth.noise = 0.1;
        cfg.paths.out = Some("runs/a".into());
        let text = cfg.to_json().unwrap();
        assert_eq!(parse_config_str(&text).unwrap(), cfg);
    }

    #[test]
    fn top_level_seed_propagates() {
        let cfg = parse_config_str(r#"{"seed": 11, "train": {"seed": 2}}"#).unwrap();
        assert_eq!((cfg.train.seed, cfg.synth.seed, cfg.init_seed()), (11, 11, 11));
    }
}
