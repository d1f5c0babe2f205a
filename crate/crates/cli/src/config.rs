//! Run configuration: a TOML file with one table per concern, overridden by
//! `SMOTION_<SECTION>_<KEY>` environment variables, then by command flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spatial_motion::audio::FeatureConfig;
use spatial_motion::denoiser::{DenoiserConfig, TrainConfig};
use spatial_motion::eval::{
    EvalOptions, ExtractorConfig, ExtractorTrainConfig, CI_RESAMPLES, CONTRASTIVE_MARGIN, DIVERSITY_SUBSET,
    R_PRECISION_POOL,
};
use spatial_motion::losses::{FootLossMode, LossWeights};
use spatial_motion::math::AdamWConfig;

use crate::CliError;

pub const ENV_PREFIX: &str = "SMOTION_";
const SECTIONS: [&str; 7] = ["paths", "model", "schedule", "training", "features", "extractor", "eval"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset root holding `manifest.json`.
    pub dataset: PathBuf,
    /// Feature cache directory; no caching when absent.
    pub cache: Option<PathBuf>,
    /// Where checkpoints, logs and the fitted normalizer go.
    pub checkpoints: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            cache: None,
            checkpoints: PathBuf::from("checkpoints"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    /// Training diffusion steps.
    pub diffusion_steps: usize,
    /// Reverse steps used when sampling (a strided subset when smaller).
    pub sample_steps: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            diffusion_steps: 1000,
            sample_steps: 1000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Training {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub max_grad_norm: Option<f64>,
    pub foot_mode: FootLossMode,
    pub weights: LossWeights,
}

impl Default for Training {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.optimizer.lr,
            weight_decay: t.optimizer.weight_decay,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            max_grad_norm: t.max_grad_norm,
            foot_mode: t.foot_mode,
            weights: t.weights,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Eval {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub margin: f64,
    pub pool: usize,
    pub diversity_subset: usize,
    pub resamples: usize,
    pub seed: u64,
}

impl Default for Eval {
    fn default() -> Self {
        let t = ExtractorTrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.optimizer.lr,
            margin: CONTRASTIVE_MARGIN,
            pool: R_PRECISION_POOL,
            diversity_subset: DIVERSITY_SUBSET,
            resamples: CI_RESAMPLES,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub model: DenoiserConfig,
    pub schedule: Schedule,
    pub training: Training,
    pub features: FeatureConfig,
    pub extractor: ExtractorConfig,
    pub eval: Eval,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses an override value as a TOML scalar or array, falling back to a
/// bare string.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `SMOTION_<SECTION>_<KEY>=value` pairs to a parsed table.
/// Nested keys use a double underscore, e.g. `SMOTION_TRAINING_WEIGHTS__ROT`.
pub fn apply_env<I>(table: &mut toml::Table, vars: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = (String, String)>,
{
    for (name, raw) in vars {
        let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let rest = rest.to_ascii_lowercase();
        let Some(section) = SECTIONS.iter().find(|s| rest.starts_with(&format!("{s}_"))) else {
            return Err(usage(format!("environment variable {name} names no config section")));
        };
        let key = &rest[section.len() + 1..];
        let path: Vec<&str> = key.split("__").collect();
        let mut node = table
            .entry(section.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        for part in &path[..path.len() - 1] {
            node = node
                .as_table_mut()
                .ok_or_else(|| usage(format!("{name}: {section} is not a table")))?
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        node.as_table_mut()
            .ok_or_else(|| usage(format!("{name}: parent is not a table")))?
            .insert(path[path.len() - 1].to_string(), parse_value(&raw));
    }
    Ok(())
}

impl RunConfig {
    /// Reads the file (if any), applies environment overrides and validates.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_text(&text, std::env::vars())
    }

    pub fn from_text<I>(text: &str, env: I) -> Result<Self, CliError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table: toml::Table = text.parse().map_err(|e| usage(format!("config: {e}")))?;
        apply_env(&mut table, env)?;
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| usage(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let core = |e: spatial_motion::Error| usage(e.to_string());
        self.model.validate().map_err(core)?;
        self.features.validate().map_err(core)?;
        self.extractor.validate().map_err(core)?;
        self.train_config().validate().map_err(core)?;
        let s = &self.schedule;
        if s.diffusion_steps == 0 || s.sample_steps == 0 || s.sample_steps > s.diffusion_steps {
            return Err(usage(format!(
                "schedule: need 1 <= sample_steps ({}) <= diffusion_steps ({})",
                s.sample_steps, s.diffusion_steps
            )));
        }
        let t = &self.training;
        if !(t.lr > 0.0 && t.lr <= 1.0) || !(t.weight_decay >= 0.0) {
            return Err(usage("training: lr must be in (0, 1] and weight_decay >= 0"));
        }
        if t.max_grad_norm.is_some_and(|g| !(g > 0.0)) {
            return Err(usage("training: max_grad_norm must be positive"));
        }
        let e = &self.eval;
        if e.epochs == 0 || e.batch_size == 0 || !(e.lr > 0.0 && e.lr <= 1.0) || !(e.margin > 0.0) {
            return Err(usage("eval: epochs, batch_size, lr and margin must be positive (lr <= 1)"));
        }
        if e.pool < 2 || e.diversity_subset == 0 || e.resamples == 0 {
            return Err(usage("eval: pool >= 2, diversity_subset >= 1 and resamples >= 1 required"));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            optimizer: AdamWConfig {
                lr: t.lr,
                weight_decay: t.weight_decay,
                ..AdamWConfig::default()
            },
            seed: t.seed,
            diffusion_steps: self.schedule.diffusion_steps,
            weights: t.weights,
            foot_mode: t.foot_mode,
            checkpoint_every: t.checkpoint_every,
            max_grad_norm: t.max_grad_norm,
        }
    }

    pub fn extractor_train_config(&self) -> ExtractorTrainConfig {
        let e = &self.eval;
        ExtractorTrainConfig {
            epochs: e.epochs,
            batch_size: e.batch_size,
            optimizer: AdamWConfig {
                lr: e.lr,
                ..AdamWConfig::default()
            },
            seed: e.seed,
            freeze_epoch: None,
            margin: e.margin,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        let e = &self.eval;
        EvalOptions {
            pool: e.pool,
            diversity_subset: e.diversity_subset,
            resamples: e.resamples,
            seed: e.seed,
            ..EvalOptions::default()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn empty_config_is_the_default() {
        assert_eq!(RunConfig::from_text("", env(&[])).unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_tables_keep_other_defaults() {
        let cfg = RunConfig::from_text("[training]\nepochs = 12\n[model]\nlatent_dim = 64\nheads = 4\n", env(&[])).unwrap();
        assert_eq!(cfg.training.epochs, 12);
        assert_eq!(cfg.training.batch_size, 8);
        assert_eq!(cfg.model.latent_dim, 64);
        assert_eq!(cfg.model.layers, 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["[training]\nepoch = 3\n", "[nope]\nx = 1\n", "top = 1\n", "[training.weights]\nspeed = 2.0\n"] {
            assert!(matches!(RunConfig::from_text(text, env(&[])), Err(CliError::Usage(_))), "{text}");
        }
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        for text in [
            "[training]\nlr = 0.0\n",
            "[training]\nepochs = 0\n",
            "[schedule]\nsample_steps = 2000\n",
            "[model]\nlatent_dim = 30\nheads = 4\n",
            "[eval]\npool = 1\n",
        ] {
            assert!(RunConfig::from_text(text, env(&[])).is_err(), "{text}");
        }
    }

    #[test]
    fn environment_overrides_the_file() {
        let cfg = RunConfig::from_text(
            "[training]\nepochs = 12\n",
            env(&[
                ("SMOTION_TRAINING_EPOCHS", "30"),
                ("SMOTION_TRAINING_BATCH_SIZE", "4"),
                ("SMOTION_TRAINING_WEIGHTS__ROT", "2.5"),
                ("SMOTION_PATHS_DATASET", "/tmp/data"),
                ("SMOTION_MODEL_SSL_MODE", "static"),
                ("UNRELATED", "1"),
            ]),
        )
        .unwrap();
        assert_eq!(cfg.training.epochs, 30);
        assert_eq!(cfg.training.batch_size, 4);
        assert_eq!(cfg.training.weights.rot, 2.5);
        assert_eq!(cfg.paths.dataset, PathBuf::from("/tmp/data"));
        assert_eq!(cfg.model.ssl_mode, spatial_motion::denoiser::SslMode::Static);
    }

    #[test]
    fn bad_environment_overrides_are_usage_errors() {
        assert!(RunConfig::from_text("", env(&[("SMOTION_BOGUS_X", "1")])).is_err());
        assert!(RunConfig::from_text("", env(&[("SMOTION_TRAINING_EPOCHZ", "1")])).is_err());
        assert!(RunConfig::from_text("", env(&[("SMOTION_TRAINING_EPOCHS", "many")])).is_err());
    }

    #[test]
    fn toml_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.training.max_grad_norm = Some(1.0);
        cfg.paths.cache = Some(PathBuf::from("cache"));
        assert_eq!(RunConfig::from_text(&cfg.to_toml(), env(&[])).unwrap(), cfg);
    }
}
