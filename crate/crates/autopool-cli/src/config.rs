//! Run configuration: a TOML file with flat key/value sections, overridable
//! by `AUTOPOOL_*` environment variables, which are in turn overridden by
//! command-line flags (flags win).

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use autopool::model::Architecture;
use autopool::objective::{Operator, TrainConfig};
use autopool::synthdata::{preset_by_name, ClassProfile, DurationDist, SynthConfig};

/// Prefix for environment overrides, e.g. `AUTOPOOL_SEED=7`.
pub const ENV_PREFIX: &str = "AUTOPOOL_";

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// One of `sparse-short`, `dense-long`, `short-long`, or `custom`.
    pub preset: Option<String>,
    pub num_train_bags: Option<usize>,
    pub num_val_bags: Option<usize>,
    pub num_test_bags: Option<usize>,
    pub bag_duration: Option<f64>,
    pub frame_rate: Option<f64>,
    pub feature_dim: Option<usize>,
    pub noise_sigma: Option<f64>,
    pub weak_label_min_active: Option<f64>,
    // Custom-mode class layout: `num_classes` one-hot-ish templates sharing
    // one event-rate/duration/gain setting.
    pub num_classes: Option<usize>,
    pub event_rate: Option<f64>,
    pub duration_lo: Option<f64>,
    pub duration_hi: Option<f64>,
    pub template_gain: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub operator: Option<String>,
    pub architecture: Option<String>,
    pub hidden: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub early_stop_patience: Option<usize>,
    pub lr_reduce_patience: Option<usize>,
    pub lr_reduce_factor: Option<f64>,
    pub alpha_init: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub segment_duration: Option<f64>,
    pub threshold: Option<f64>,
    pub split: Option<String>,
}

pub fn load_file_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let config: FileConfig =
        toml::from_str(&text).with_context(|| format!("cannot parse config {}", path.display()))?;
    Ok(config)
}

fn env_var(name: &str) -> Option<String> {
    std::env::var(format!("{ENV_PREFIX}{name}")).ok()
}

/// Seed resolution: flag > env > config file > default 0.
pub fn resolve_seed(flag: Option<u64>, file: &FileConfig) -> Result<u64> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    if let Some(text) = env_var("SEED") {
        return text
            .parse()
            .with_context(|| format!("cannot parse {ENV_PREFIX}SEED={text}"));
    }
    Ok(file.seed.unwrap_or(0))
}

/// Operator resolution: flag > env > config file > auto.
pub fn resolve_operator(flag: Option<&str>, file: &FileConfig) -> Result<Operator> {
    let text = match flag {
        Some(t) => t.to_string(),
        None => match env_var("OPERATOR") {
            Some(t) => t,
            None => file
                .train
                .operator
                .clone()
                .unwrap_or_else(|| "auto".to_string()),
        },
    };
    Ok(text.parse::<Operator>()?)
}

pub fn resolve_segment_duration(flag: Option<f64>, file: &FileConfig) -> Result<f64> {
    if let Some(v) = flag {
        return Ok(v);
    }
    if let Some(text) = env_var("SEGMENT_DURATION") {
        return text
            .parse()
            .with_context(|| format!("cannot parse {ENV_PREFIX}SEGMENT_DURATION={text}"));
    }
    Ok(file.eval.segment_duration.unwrap_or(1.0))
}

/// Build the dataset config from the `[data]` section. A preset provides the
/// base; explicit keys override its fields. Without a preset (or with
/// `preset = "custom"`), the custom keys define a homogeneous class layout.
pub fn build_synth_config(data: &DataSection, seed: u64) -> Result<SynthConfig> {
    let preset_name = data.preset.as_deref().unwrap_or("custom");
    let mut config = if preset_name == "custom" {
        let num_classes = data.num_classes.unwrap_or(2);
        let feature_dim = data.feature_dim.unwrap_or(num_classes.max(2));
        let bag_duration = data.bag_duration.unwrap_or(10.0);
        let lo = data.duration_lo.unwrap_or(1.0);
        let hi = data.duration_hi.unwrap_or(3.0);
        let duration = if hi > lo {
            DurationDist::Uniform { lo, hi }
        } else {
            DurationDist::Fixed(lo)
        };
        let profiles = (0..num_classes)
            .map(|i| {
                let mut template = vec![0.0; feature_dim];
                template[i % feature_dim] = 1.0;
                ClassProfile {
                    name: format!("class_{i}"),
                    event_rate: data.event_rate.unwrap_or(1.0),
                    duration,
                    feature_template: template,
                    template_gain: data.template_gain.unwrap_or(1.5),
                }
            })
            .collect();
        SynthConfig {
            num_train_bags: 200,
            num_val_bags: 50,
            num_test_bags: 50,
            bag_duration,
            frame_rate: data.frame_rate.unwrap_or(2.7),
            feature_dim,
            noise_sigma: data.noise_sigma.unwrap_or(0.25),
            profiles,
            weak_label_min_active: data.weak_label_min_active.unwrap_or(0.10),
            seed,
        }
    } else {
        let mut preset = preset_by_name(preset_name, seed)?;
        if let Some(v) = data.frame_rate {
            preset.frame_rate = v;
        }
        if let Some(v) = data.bag_duration {
            preset.bag_duration = v;
        }
        if let Some(v) = data.noise_sigma {
            preset.noise_sigma = v;
        }
        if let Some(v) = data.weak_label_min_active {
            preset.weak_label_min_active = v;
        }
        if data.num_classes.is_some()
            || data.feature_dim.is_some()
            || data.event_rate.is_some()
            || data.duration_lo.is_some()
            || data.duration_hi.is_some()
            || data.template_gain.is_some()
        {
            bail!("class-layout keys (num_classes, feature_dim, event_rate, duration_*, template_gain) require preset = \"custom\"");
        }
        preset
    };
    if let Some(v) = data.num_train_bags {
        config.num_train_bags = v;
    }
    if let Some(v) = data.num_val_bags {
        config.num_val_bags = v;
    }
    if let Some(v) = data.num_test_bags {
        config.num_test_bags = v;
    }
    config.validate()?;
    Ok(config)
}

/// Build the training config from the `[train]` section plus resolved
/// operator and seed.
pub fn build_train_config(
    section: &TrainSection,
    operator: Operator,
    seed: u64,
) -> Result<TrainConfig> {
    let architecture = match section.architecture.as_deref().unwrap_or("linear") {
        "linear" => Architecture::Linear,
        "mlp" => Architecture::Mlp {
            hidden: section.hidden.unwrap_or(16),
        },
        other => bail!("unknown architecture {other}; expected linear or mlp"),
    };
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        operator,
        architecture,
        learning_rate: section.learning_rate.unwrap_or(defaults.learning_rate),
        batch_size: section.batch_size.unwrap_or(defaults.batch_size),
        max_epochs: section.max_epochs.unwrap_or(defaults.max_epochs),
        early_stop_patience: section
            .early_stop_patience
            .unwrap_or(defaults.early_stop_patience),
        lr_reduce_patience: section
            .lr_reduce_patience
            .unwrap_or(defaults.lr_reduce_patience),
        lr_reduce_factor: section.lr_reduce_factor.unwrap_or(defaults.lr_reduce_factor),
        alpha_init: section.alpha_init.unwrap_or(defaults.alpha_init),
        seed,
    };
    config.validate()?;
    Ok(config)
}
