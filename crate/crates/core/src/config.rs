//! Dataset presets and the flat `key = value` run configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{ModelDims, ModelVariant};
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Ped2,
    Avenue,
    Shanghaitech,
    Synthetic,
}

/// Per-dataset constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PresetValues {
    pub memory_size: usize,
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub image_size: usize,
    pub learning_rate: f64,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Self::Ped2, Self::Avenue, Self::Shanghaitech, Self::Synthetic];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ped2 => "ped2",
            Self::Avenue => "avenue",
            Self::Shanghaitech => "shanghaitech",
            Self::Synthetic => "synthetic",
        }
    }

    pub fn values(self) -> PresetValues {
        let bench = |memory_size, lambda_c, lambda_s, lambda, gamma| PresetValues {
            memory_size,
            lambda_c,
            lambda_s,
            lambda,
            gamma,
            epochs: 60,
            image_size: 256,
            learning_rate: 2e-4,
        };
        match self {
            Self::Ped2 => bench(10, 10.0, 5.0, 0.6, 0.009),
            Self::Avenue => bench(10, 10.0, 2.0, 0.5, 0.006),
            Self::Shanghaitech => bench(200, 1.0, 1.0, 0.8, 0.0135),
            Self::Synthetic => PresetValues {
                memory_size: 10,
                lambda_c: 0.1,
                lambda_s: 0.1,
                lambda: 0.6,
                gamma: 0.1,
                epochs: 5,
                image_size: 64,
                learning_rate: 1e-3,
            },
        }
    }

    pub fn dims(self) -> ModelDims {
        match self {
            Self::Synthetic => ModelDims::synthetic(),
            _ => ModelDims::full(),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}` (expected ped2, avenue, shanghaitech or synthetic)")))
    }
}

/// Every setting a command may need, after merging preset, file and flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub memory_size: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub alpha: f64,
    pub n_inputs: usize,
    pub variant: ModelVariant,
    pub image_size: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub data_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

pub const KEYS: [&str; 17] = [
    "preset",
    "memory_size",
    "lambda",
    "gamma",
    "lambda_c",
    "lambda_s",
    "alpha",
    "n_inputs",
    "variant",
    "image_size",
    "learning_rate",
    "batch_size",
    "epochs",
    "seed",
    "data_dir",
    "output_dir",
    "checkpoint",
];

/// Key-value pairs with their 1-based source line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    pub path: String,
    pub entries: Vec<(usize, String, String)>,
}

impl ConfigFile {
    pub fn parse(path: &str, text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| Error::ConfigParse {
                path: path.to_string(),
                line: i + 1,
                reason,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(err(format!("unknown key `{key}`")));
            }
            if value.is_empty() {
                return Err(err(format!("key `{key}` has no value")));
            }
            entries.push((i + 1, key.to_string(), value.to_string()));
        }
        Ok(Self {
            path: path.to_string(),
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&path.display().to_string(), &std::fs::read_to_string(path)?)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().rev().find(|(_, k, _)| k == key).map(|(_, _, v)| v.as_str())
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value `{value}` for `{key}`: {e}")))
}

impl RunConfig {
    pub fn from_preset(preset: Preset) -> Self {
        let v = preset.values();
        let train = TrainConfig::default();
        Self {
            preset,
            memory_size: v.memory_size,
            lambda: v.lambda,
            gamma: v.gamma,
            lambda_c: v.lambda_c,
            lambda_s: v.lambda_s,
            alpha: LossWeights::default().alpha,
            n_inputs: 4,
            variant: ModelVariant::LgnNet,
            image_size: v.image_size,
            learning_rate: v.learning_rate,
            batch_size: train.batch_size,
            epochs: v.epochs,
            seed: train.seed,
            data_dir: None,
            output_dir: None,
            checkpoint: None,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "preset" => {
                let p: Preset = value.parse()?;
                if p != self.preset {
                    return Err(Error::Config(format!(
                        "preset `{p}` must be chosen before other settings are applied"
                    )));
                }
            }
            "memory_size" => self.memory_size = parse_value(key, value)?,
            "lambda" => self.lambda = parse_value(key, value)?,
            "gamma" => self.gamma = parse_value(key, value)?,
            "lambda_c" => self.lambda_c = parse_value(key, value)?,
            "lambda_s" => self.lambda_s = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "n_inputs" => self.n_inputs = parse_value(key, value)?,
            "variant" => self.variant = value.parse()?,
            "image_size" => self.image_size = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "data_dir" => self.data_dir = Some(value.into()),
            "output_dir" => self.output_dir = Some(value.into()),
            "checkpoint" => self.checkpoint = Some(value.into()),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Merge in precedence order: `overrides` beat `file` which beats the preset.
    /// The preset itself comes from the overrides, then the file, then `fallback`.
    pub fn resolve(fallback: Preset, file: Option<&ConfigFile>, overrides: &[(String, String)]) -> Result<Self> {
        let preset_str = overrides
            .iter()
            .rev()
            .find(|(k, _)| k == "preset")
            .map(|(_, v)| v.as_str())
            .or_else(|| file.and_then(|f| f.get("preset")));
        let preset = match preset_str {
            Some(p) => p.parse()?,
            None => fallback,
        };
        let mut cfg = Self::from_preset(preset);
        if let Some(f) = file {
            for (line, k, v) in &f.entries {
                if k == "preset" {
                    continue;
                }
                cfg.set(k, v).map_err(|e| Error::ConfigParse {
                    path: f.path.clone(),
                    line: *line,
                    reason: e.to_string(),
                })?;
            }
        }
        for (k, v) in overrides {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} is outside [0, 1]", self.lambda)));
        }
        if self.gamma < 0.0 || self.gamma.is_nan() {
            return Err(Error::Config(format!("gamma {} must be non-negative", self.gamma)));
        }
        if self.memory_size < 2 {
            return Err(Error::Config("memory_size must be at least 2".into()));
        }
        self.dims().validate()?;
        self.train_config().validate()
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            image_size: self.image_size,
            n_inputs: self.n_inputs,
            ..self.preset.dims()
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_c: self.lambda_c,
            lambda_s: self.lambda_s,
            alpha: self.alpha,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            loss: self.loss_weights(),
            ..TrainConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmark_presets() {
        let v = Preset::Ped2.values();
        assert_eq!((v.memory_size, v.lambda_c, v.lambda_s, v.lambda, v.gamma), (10, 10.0, 5.0, 0.6, 0.009));
        let v = Preset::Avenue.values();
        assert_eq!((v.memory_size, v.lambda_c, v.lambda_s, v.lambda, v.gamma), (10, 10.0, 2.0, 0.5, 0.006));
        let v = Preset::Shanghaitech.values();
        assert_eq!((v.memory_size, v.lambda_c, v.lambda_s, v.lambda, v.gamma), (200, 1.0, 1.0, 0.8, 0.0135));
        assert_eq!(Preset::Ped2.values().epochs, 60);
        assert_eq!(Preset::Synthetic.values().epochs, 5);
    }

    #[test]
    fn parse_reports_line_numbers() {
        let err = ConfigFile::parse("run.cfg", "# header\nlambda = 0.5\n\nnonsense line\n").unwrap_err();
        assert!(matches!(err, Error::ConfigParse { line: 4, .. }), "{err}");
        let err = ConfigFile::parse("run.cfg", "colour = red\n").unwrap_err();
        assert!(err.to_string().starts_with("run.cfg:1:"), "{err}");
    }

    #[test]
    fn bad_values_report_their_line() {
        let f = ConfigFile::parse("run.cfg", "gamma = 0.1\nepochs = many\n").unwrap();
        let err = RunConfig::resolve(Preset::Ped2, Some(&f), &[]).unwrap_err();
        assert!(matches!(err, Error::ConfigParse { line: 2, .. }), "{err}");
    }

    #[test]
    fn flags_beat_file_beats_preset() {
        let f = ConfigFile::parse("c", "preset = avenue\ngamma = 0.5 # inline comment\nlambda = 0.3\n").unwrap();
        let flags = vec![("lambda".to_string(), "0.9".to_string())];
        let c = RunConfig::resolve(Preset::Ped2, Some(&f), &flags).unwrap();
        assert_eq!(c.preset, Preset::Avenue);
        assert_eq!(c.gamma, 0.5);
        assert_eq!(c.lambda, 0.9);
        assert_eq!(c.lambda_s, 2.0);
        let flags = vec![("preset".to_string(), "shanghaitech".to_string())];
        let c = RunConfig::resolve(Preset::Ped2, Some(&f), &flags).unwrap();
        assert_eq!((c.preset, c.memory_size, c.gamma), (Preset::Shanghaitech, 200, 0.5));
    }

    #[test]
    fn out_of_range_lambda_is_rejected() {
        let flags = vec![("lambda".to_string(), "1.5".to_string())];
        assert!(RunConfig::resolve(Preset::Ped2, None, &flags).is_err());
    }
}
