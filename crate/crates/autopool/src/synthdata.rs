//! Seeded synthetic multi-label event-detection data: bags of frame-level
//! feature vectors with both weak (bag) and strong (frame) labels, so models
//! trained from weak labels can be compared against a strong-label oracle.
//!
//! Events are sampled per bag and class: a Poisson count of events, each with
//! a sampled duration, placed uniformly over the feasible start range (an
//! event at least as long as the bag spans it entirely). Active frames add a
//! per-class feature template on top of Gaussian background noise.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DurationDist {
    /// Every event lasts exactly this many seconds.
    Fixed(f64),
    /// Durations drawn uniformly from [lo, hi) seconds.
    Uniform { lo: f64, hi: f64 },
}

impl DurationDist {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            DurationDist::Fixed(v) => v,
            DurationDist::Uniform { lo, hi } => {
                if hi > lo {
                    rng.random_range(lo..hi)
                } else {
                    lo
                }
            }
        }
    }

    fn max(&self) -> f64 {
        match *self {
            DurationDist::Fixed(v) => v,
            DurationDist::Uniform { hi, .. } => hi,
        }
    }

    fn min(&self) -> f64 {
        match *self {
            DurationDist::Fixed(v) => v,
            DurationDist::Uniform { lo, .. } => lo,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub name: String,
    /// Expected number of events per bag (Poisson mean).
    pub event_rate: f64,
    pub duration: DurationDist,
    pub feature_template: Vec<f64>,
    pub template_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_train_bags: usize,
    pub num_val_bags: usize,
    pub num_test_bags: usize,
    pub bag_duration: f64,
    pub frame_rate: f64,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub profiles: Vec<ClassProfile>,
    /// A class's weak label is 1 iff at least this fraction of frames is
    /// active (and at least one frame is). 0 recovers strict any-instance
    /// semantics.
    pub weak_label_min_active: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn num_classes(&self) -> usize {
        self.profiles.len()
    }

    pub fn frames_per_bag(&self) -> usize {
        (self.frame_rate * self.bag_duration).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.profiles.is_empty() {
            return Err(Error::InvalidConfig("no class profiles".to_string()));
        }
        if !(self.bag_duration > 0.0) || !(self.frame_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "bag_duration {} and frame_rate {} must be positive",
                self.bag_duration, self.frame_rate
            )));
        }
        if self.frames_per_bag() < 1 {
            return Err(Error::InvalidConfig(
                "frame_rate * bag_duration rounds to zero frames".to_string(),
            ));
        }
        if self.feature_dim < 1 {
            return Err(Error::InvalidConfig("feature_dim must be >= 1".to_string()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "noise_sigma must be nonnegative, got {}",
                self.noise_sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.weak_label_min_active) {
            return Err(Error::InvalidConfig(format!(
                "weak_label_min_active must lie in [0, 1], got {}",
                self.weak_label_min_active
            )));
        }
        for p in &self.profiles {
            if p.feature_template.len() != self.feature_dim {
                return Err(Error::InvalidConfig(format!(
                    "template for {} has length {}, expected {}",
                    p.name,
                    p.feature_template.len(),
                    self.feature_dim
                )));
            }
            if !(p.event_rate >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "event_rate for {} must be nonnegative",
                    p.name
                )));
            }
            if !(p.template_gain > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "template_gain for {} must be positive",
                    p.name
                )));
            }
            if p.duration.min() < 0.0 || p.duration.max() > self.bag_duration {
                return Err(Error::InvalidConfig(format!(
                    "durations for {} must lie within [0, bag_duration]",
                    p.name
                )));
            }
        }
        Ok(())
    }
}

/// One weakly labeled example: an m×d feature matrix, per-class weak labels,
/// and (optionally) per-frame strong labels for oracle comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub bag_id: String,
    pub features: Array2<f64>,
    pub weak_labels: Vec<u8>,
    pub strong_labels: Option<Array2<u8>>,
}

impl Bag {
    pub fn num_instances(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.weak_labels.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Bag>,
    pub validation: Vec<Bag>,
    pub test: Vec<Bag>,
    pub class_names: Vec<String>,
    pub frame_rate: f64,
    pub bag_duration: f64,
}

/// Weak label from a strong-label column under the min-active-fraction rule.
pub fn weak_label_from_counts(active: usize, total: usize, min_active: f64) -> u8 {
    let fraction = active as f64 / total as f64;
    u8::from(active > 0 && fraction >= min_active)
}

fn generate_bag<R: Rng + ?Sized>(
    config: &SynthConfig,
    bag_id: String,
    rng: &mut R,
) -> Result<Bag> {
    let m = config.frames_per_bag();
    let d = config.feature_dim;
    let c = config.num_classes();

    let mut features = Array2::zeros((m, d));
    if config.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, config.noise_sigma).expect("positive sigma");
        for v in features.iter_mut() {
            *v = noise.sample(rng);
        }
    }

    let mut strong = Array2::<u8>::zeros((m, c));
    let mut weak = vec![0u8; c];
    for (class, profile) in config.profiles.iter().enumerate() {
        let n_events = if profile.event_rate > 0.0 {
            let poisson = Poisson::new(profile.event_rate).map_err(|e| {
                Error::InvalidConfig(format!("bad event rate {}: {e}", profile.event_rate))
            })?;
            poisson.sample(rng) as usize
        } else {
            0
        };
        let mut intervals = Vec::with_capacity(n_events);
        for _ in 0..n_events {
            let duration = profile.duration.sample(rng).min(config.bag_duration);
            let start = if duration >= config.bag_duration {
                0.0
            } else {
                rng.random_range(0.0..(config.bag_duration - duration))
            };
            intervals.push((start, (start + duration).min(config.bag_duration)));
        }
        let mut active = 0usize;
        for frame in 0..m {
            let midpoint = (frame as f64 + 0.5) / config.frame_rate;
            if intervals.iter().any(|&(s, e)| midpoint >= s && midpoint < e) {
                strong[[frame, class]] = 1;
                active += 1;
                for (k, t) in profile.feature_template.iter().enumerate() {
                    features[[frame, k]] += profile.template_gain * t;
                }
            }
        }
        weak[class] = weak_label_from_counts(active, m, config.weak_label_min_active);
    }

    Ok(Bag {
        bag_id,
        features,
        weak_labels: weak,
        strong_labels: Some(strong),
    })
}

fn generate_split<R: Rng + ?Sized>(
    config: &SynthConfig,
    split: &str,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Bag>> {
    (0..count)
        .map(|i| generate_bag(config, format!("{split}-{i:05}"), rng))
        .collect()
}

/// Generate the train/validation/test splits. Fully deterministic given the
/// config (each split draws from its own sub-seeded stream).
pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let mut root = ChaCha8Rng::seed_from_u64(config.seed);
    let seeds: Vec<u64> = (0..3).map(|_| root.random()).collect();
    let mut rng_train = ChaCha8Rng::seed_from_u64(seeds[0]);
    let mut rng_val = ChaCha8Rng::seed_from_u64(seeds[1]);
    let mut rng_test = ChaCha8Rng::seed_from_u64(seeds[2]);
    Ok(Dataset {
        train: generate_split(config, "train", config.num_train_bags, &mut rng_train)?,
        validation: generate_split(config, "val", config.num_val_bags, &mut rng_val)?,
        test: generate_split(config, "test", config.num_test_bags, &mut rng_test)?,
        class_names: config.profiles.iter().map(|p| p.name.clone()).collect(),
        frame_rate: config.frame_rate,
        bag_duration: config.bag_duration,
    })
}

/// Per-class statistics of contiguous active runs in the strong labels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DurationSummary {
    pub class: usize,
    pub name: String,
    pub event_count: usize,
    pub mean_seconds: Option<f64>,
    pub min_seconds: Option<f64>,
    pub max_seconds: Option<f64>,
}

pub fn summarize_durations(
    bags: &[Bag],
    class_names: &[String],
    frame_rate: f64,
) -> Result<Vec<DurationSummary>> {
    let c = class_names.len();
    let mut runs: Vec<Vec<usize>> = vec![Vec::new(); c];
    for bag in bags {
        let strong = bag.strong_labels.as_ref().ok_or_else(|| {
            Error::MissingStrongLabels(format!("bag {} has no strong labels", bag.bag_id))
        })?;
        for class in 0..c {
            let mut run = 0usize;
            for frame in 0..strong.nrows() {
                if strong[[frame, class]] != 0 {
                    run += 1;
                } else if run > 0 {
                    runs[class].push(run);
                    run = 0;
                }
            }
            if run > 0 {
                runs[class].push(run);
            }
        }
    }
    Ok(runs
        .into_iter()
        .enumerate()
        .map(|(class, lengths)| {
            let count = lengths.len();
            let to_secs = |frames: usize| frames as f64 / frame_rate;
            let (mean, min, max) = if count > 0 {
                let total: usize = lengths.iter().sum();
                (
                    Some(to_secs(total) / count as f64),
                    lengths.iter().copied().min().map(to_secs),
                    lengths.iter().copied().max().map(to_secs),
                )
            } else {
                (None, None, None)
            };
            DurationSummary {
                class,
                name: class_names[class].clone(),
                event_count: count,
                mean_seconds: mean,
                min_seconds: min,
                max_seconds: max,
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Presets

fn basis_template(dim: usize, index: usize) -> Vec<f64> {
    let mut t = vec![0.0; dim];
    t[index % dim] = 1.0;
    t
}

/// Short, sparse events: durations at most 30% of the bag. 5 classes,
/// 10 s bags at 2.7 Hz (27 frames), 2000/500/500 bags.
pub fn preset_sparse_short(seed: u64) -> SynthConfig {
    let dim = 8;
    let rates = [0.6, 0.8, 1.0, 1.2, 1.4];
    SynthConfig {
        num_train_bags: 2000,
        num_val_bags: 500,
        num_test_bags: 500,
        bag_duration: 10.0,
        frame_rate: 2.7,
        feature_dim: dim,
        noise_sigma: 0.25,
        profiles: (0..5)
            .map(|i| ClassProfile {
                name: format!("short_{i}"),
                event_rate: rates[i],
                duration: DurationDist::Uniform { lo: 1.5, hi: 3.0 },
                feature_template: basis_template(dim, i),
                template_gain: 1.5,
            })
            .collect(),
        weak_label_min_active: 0.10,
        seed,
    }
}

/// Long events covering at least 40% of the bag, often all of it.
pub fn preset_dense_long(seed: u64) -> SynthConfig {
    let dim = 8;
    let rates = [0.5, 0.7, 0.9, 1.1, 1.3];
    SynthConfig {
        num_train_bags: 2000,
        num_val_bags: 500,
        num_test_bags: 500,
        bag_duration: 10.0,
        frame_rate: 2.7,
        feature_dim: dim,
        noise_sigma: 0.25,
        profiles: (0..5)
            .map(|i| ClassProfile {
                name: format!("long_{i}"),
                event_rate: rates[i],
                duration: DurationDist::Uniform { lo: 4.0, hi: 10.0 },
                feature_template: basis_template(dim, i),
                template_gain: 1.5,
            })
            .collect(),
        weak_label_min_active: 0.10,
        seed,
    }
}

/// Two classes with opposite temporal character: one short-event class
/// (durations at most 20% of the bag) and one full-duration class.
pub fn preset_short_long(seed: u64) -> SynthConfig {
    let dim = 6;
    SynthConfig {
        num_train_bags: 300,
        num_val_bags: 100,
        num_test_bags: 100,
        bag_duration: 10.0,
        frame_rate: 2.7,
        feature_dim: dim,
        noise_sigma: 0.25,
        profiles: vec![
            ClassProfile {
                name: "short".to_string(),
                event_rate: 1.2,
                duration: DurationDist::Uniform { lo: 1.2, hi: 2.0 },
                feature_template: basis_template(dim, 0),
                template_gain: 1.5,
            },
            ClassProfile {
                name: "long".to_string(),
                event_rate: 0.7,
                duration: DurationDist::Fixed(10.0),
                feature_template: basis_template(dim, 1),
                template_gain: 1.5,
            },
        ],
        weak_label_min_active: 0.10,
        seed,
    }
}

pub fn preset_by_name(name: &str, seed: u64) -> Result<SynthConfig> {
    match name {
        "sparse-short" => Ok(preset_sparse_short(seed)),
        "dense-long" => Ok(preset_dense_long(seed)),
        "short-long" => Ok(preset_short_long(seed)),
        other => Err(Error::InvalidConfig(format!(
            "unknown preset {other}; expected sparse-short, dense-long, or short-long"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Dataset files: one JSON document per line per bag, plus a sidecar manifest.

#[derive(Debug, Serialize, Deserialize)]
struct BagRow {
    bag_id: String,
    num_instances: usize,
    feature_dim: usize,
    /// Row-major m×d feature values.
    features: Vec<f64>,
    weak_labels: Vec<u8>,
    /// Row-major m×C strong labels, absent for weak-only data.
    strong_labels: Option<Vec<u8>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitEntry {
    pub path: String,
    pub num_bags: usize,
}

/// Sidecar manifest describing a generated dataset. Deterministic content:
/// rewriting with the same config and seed is byte-identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub seed: u64,
    pub frame_rate: f64,
    pub bag_duration: f64,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub splits: Vec<(String, SplitEntry)>,
    pub config: SynthConfig,
}

const DATASET_FORMAT: &str = "autopool-dataset-v1";

fn write_split(path: &Path, bags: &[Bag]) -> Result<()> {
    let mut file = fs::File::create(path)?;
    for bag in bags {
        let row = BagRow {
            bag_id: bag.bag_id.clone(),
            num_instances: bag.num_instances(),
            feature_dim: bag.feature_dim(),
            features: bag.features.iter().copied().collect(),
            weak_labels: bag.weak_labels.clone(),
            strong_labels: bag.strong_labels.as_ref().map(|s| s.iter().copied().collect()),
        };
        let line = serde_json::to_string(&row).map_err(|e| Error::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        file.write_all(line.as_bytes())?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

/// Write all three splits plus `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, dataset: &Dataset, config: &SynthConfig) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let splits = [
        ("train", &dataset.train),
        ("validation", &dataset.validation),
        ("test", &dataset.test),
    ];
    let mut entries = Vec::new();
    for (name, bags) in splits {
        let file_name = format!("{name}.jsonl");
        write_split(&dir.join(&file_name), bags)?;
        entries.push((
            name.to_string(),
            SplitEntry {
                path: file_name,
                num_bags: bags.len(),
            },
        ));
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.to_string(),
        seed: config.seed,
        frame_rate: config.frame_rate,
        bag_duration: config.bag_duration,
        feature_dim: config.feature_dim,
        num_classes: config.num_classes(),
        class_names: dataset.class_names.clone(),
        splits: entries,
        config: config.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format {
        path: dir.join("manifest.json").display().to_string(),
        message: e.to_string(),
    })?;
    text.push('\n');
    fs::write(dir.join("manifest.json"), text)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path)?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::Format {
            path: path.display().to_string(),
            message: format!("unknown format tag {}", manifest.format),
        });
    }
    Ok(manifest)
}

/// Read one split file (line-delimited bag documents).
pub fn read_split(path: &Path) -> Result<Vec<Bag>> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut bags = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: BagRow = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.display().to_string(),
            message: format!("line {}: {e}", i + 1),
        })?;
        let m = row.num_instances;
        let d = row.feature_dim;
        let c = row.weak_labels.len();
        if row.features.len() != m * d {
            return Err(Error::Format {
                path: path.display().to_string(),
                message: format!("bag {}: feature length mismatch", row.bag_id),
            });
        }
        let strong = match row.strong_labels {
            Some(values) => {
                if values.len() != m * c {
                    return Err(Error::Format {
                        path: path.display().to_string(),
                        message: format!("bag {}: strong label length mismatch", row.bag_id),
                    });
                }
                Some(Array2::from_shape_vec((m, c), values).expect("length checked"))
            }
            None => None,
        };
        bags.push(Bag {
            bag_id: row.bag_id,
            features: Array2::from_shape_vec((m, d), row.features).expect("length checked"),
            weak_labels: row.weak_labels,
            strong_labels: strong,
        });
    }
    Ok(bags)
}

/// Convenience: read a whole dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(Dataset, DatasetManifest)> {
    let manifest = read_manifest(dir)?;
    let by_name = |name: &str| -> Result<Vec<Bag>> {
        let entry = manifest
            .splits
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Format {
                path: dir.display().to_string(),
                message: format!("manifest lacks split {name}"),
            })?;
        read_split(&dir.join(&entry.1.path))
    };
    let dataset = Dataset {
        train: by_name("train")?,
        validation: by_name("validation")?,
        test: by_name("test")?,
        class_names: manifest.class_names.clone(),
        frame_rate: manifest.frame_rate,
        bag_duration: manifest.bag_duration,
    };
    Ok((dataset, manifest))
}
