//! Experiment configuration files.
//!
//! A config is a TOML document. Top-level keys:
//!
//! | key            | type    | default          |
//! |----------------|---------|------------------|
//! | `algorithm`    | string  | required         |
//! | `memory_size`  | integer | required         |
//! | `init_cls`     | integer | required         |
//! | `increment`    | integer | required         |
//! | `convnet_type` | string  | required         |
//! | `seed`         | integer | 1993             |
//! | `output_dir`   | string  | `runs/<algorithm>` |
//!
//! Sections: `[dataset]` (required, selected by `kind`), `[optimizer]`
//! (optional) and one optional section named after the algorithm holding its
//! hyper-parameters, e.g. `[icarl]`. Relative paths are resolved against the
//! directory containing the config file. Any key not listed here is rejected.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use cil_core::engine::{Milestone, OptimConfig};
use cil_core::learners::{build_learner, Algorithm, AlgorithmConfig, Learner, LearnerConfig};
use cil_core::model::{BackboneSpec, BACKBONE_REGISTRY};
use cil_core::stream::{load_dataset, DataSource, StreamConfig, SyntheticSpec, TaskStream};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::error::{LabError, Result};

pub const DEFAULT_SEED: u64 = cil_core::stream::DEFAULT_SEED;

const TOP_LEVEL_KEYS: &[&str] = &[
    "algorithm",
    "memory_size",
    "init_cls",
    "increment",
    "convnet_type",
    "seed",
    "output_dir",
    "dataset",
    "optimizer",
];

const REQUIRED_KEYS: &[&str] = &["algorithm", "memory_size", "init_cls", "increment", "convnet_type", "dataset"];

const DATASET_KINDS: &[&str] = &["synthetic", "csv", "idx"];

const OPTIMIZER_KEYS: &[&str] = &["lr", "momentum", "weight_decay", "epochs", "batch_size", "milestones", "lr_decay"];

/// Where the instances come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        num_classes: usize,
        dim: usize,
        train_per_class: usize,
        test_per_class: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default = "default_std")]
        std: f64,
        /// Seed of the generator; the experiment seed when omitted.
        #[serde(default)]
        seed: Option<u64>,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        header: bool,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

fn default_separation() -> f64 {
    3.0
}

fn default_std() -> f64 {
    1.0
}

impl DatasetConfig {
    fn keys(kind: &str) -> (&'static [&'static str], &'static [&'static str]) {
        match kind {
            "synthetic" => (
                &["kind", "num_classes", "dim", "train_per_class", "test_per_class", "separation", "std", "seed"],
                &["num_classes", "dim", "train_per_class", "test_per_class"],
            ),
            "csv" => (&["kind", "train", "test", "header"], &["train", "test"]),
            _ => (
                &["kind", "train_images", "train_labels", "test_images", "test_labels"],
                &["train_images", "train_labels", "test_images", "test_labels"],
            ),
        }
    }

    /// Number of classes when it is known without reading any file.
    pub fn declared_classes(&self) -> Option<usize> {
        match self {
            DatasetConfig::Synthetic { num_classes, .. } => Some(*num_classes),
            _ => None,
        }
    }

    pub fn source(&self, experiment_seed: u64) -> DataSource {
        match self.clone() {
            DatasetConfig::Synthetic {
                num_classes,
                dim,
                train_per_class,
                test_per_class,
                separation,
                std,
                seed,
            } => DataSource::Synthetic(SyntheticSpec {
                num_classes,
                dim,
                train_per_class,
                test_per_class,
                separation,
                std,
                seed: seed.unwrap_or(experiment_seed),
            }),
            DatasetConfig::Csv { train, test, header } => DataSource::Csv { train, test, header },
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            },
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DatasetConfig::Synthetic { .. } => {}
            DatasetConfig::Csv { train, test, .. } => {
                fix(train);
                fix(test);
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                fix(train_images);
                fix(train_labels);
                fix(test_images);
                fix(test_labels);
            }
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct OptimizerSection {
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    epochs: usize,
    batch_size: usize,
    /// Epochs at which the learning rate is multiplied by `lr_decay`. When
    /// omitted the rate is halved at 60% and 80% of the epochs.
    milestones: Option<Vec<usize>>,
    lr_decay: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 30,
            batch_size: 32,
            milestones: None,
            lr_decay: 0.5,
        }
    }
}

impl OptimizerSection {
    fn into_optim(self) -> OptimConfig {
        let mut cfg = OptimConfig::with_default_schedule(self.lr, self.epochs, self.batch_size);
        cfg.momentum = self.momentum;
        cfg.weight_decay = self.weight_decay;
        if let Some(ms) = self.milestones {
            cfg.milestones = ms
                .into_iter()
                .map(|epoch| Milestone {
                    epoch,
                    factor: self.lr_decay,
                })
                .collect();
        }
        cfg
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopLevel {
    memory_size: usize,
    init_cls: usize,
    increment: usize,
    convnet_type: String,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    output_dir: Option<PathBuf>,
}

/// A fully resolved experiment: every default applied, every path absolute
/// or relative to the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub memory_size: usize,
    pub init_cls: usize,
    pub increment: usize,
    pub convnet_type: String,
    pub dataset: DatasetConfig,
    pub optimizer: OptimConfig,
    pub algorithm: AlgorithmConfig,
    pub output_dir: PathBuf,
}

/// Everything needed to start training, built only after validation passed.
pub struct Prepared {
    pub stream: TaskStream,
    pub learner_config: LearnerConfig,
    pub learner: Box<dyn Learner>,
}

/// Closest candidate by edit distance; ties go to the alphabetically first.
pub fn nearest_key<'a>(key: &str, candidates: impl IntoIterator<Item = &'a str>) -> String {
    candidates
        .into_iter()
        .min_by_key(|c| (strsim::levenshtein(key, c), *c))
        .unwrap_or_default()
        .to_string()
}

fn check_keys(path: &Path, prefix: &str, table: &Table, allowed: &[&str]) -> Result<()> {
    for key in table.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(LabError::UnknownKey {
                path: path.to_path_buf(),
                key: format!("{prefix}{key}"),
                suggestion: format!("{prefix}{}", nearest_key(key, allowed.iter().copied())),
            });
        }
    }
    Ok(())
}

fn check_required(path: &Path, prefix: &str, table: &Table, required: &[&str]) -> Result<()> {
    match required.iter().find(|k| !table.contains_key(**k)) {
        Some(k) => Err(LabError::MissingKey {
            path: path.to_path_buf(),
            key: format!("{prefix}{k}"),
        }),
        None => Ok(()),
    }
}

fn take_table(path: &Path, root: &mut Table, key: &str) -> Result<Option<Table>> {
    match root.remove(key) {
        None => Ok(None),
        Some(Value::Table(t)) => Ok(Some(t)),
        Some(other) => Err(LabError::config(
            path,
            format!("`{key}` must be a table, found {}", other.type_str()),
        )),
    }
}

fn decode<T: serde::de::DeserializeOwned>(path: &Path, section: &str, table: Table) -> Result<T> {
    Value::Table(table).try_into().map_err(|e: toml::de::Error| {
        let msg = e.message().replace('\n', " ");
        if section.is_empty() {
            LabError::config(path, msg)
        } else {
            LabError::config(path, format!("[{section}]: {msg}"))
        }
    })
}

/// Hyper-parameter names accepted in the section of `algorithm`.
pub fn algorithm_keys(algorithm: Algorithm) -> Vec<String> {
    let value = serde_json::to_value(AlgorithmConfig::default_for(algorithm)).expect("configs serialize");
    value
        .as_object()
        .map(|o| o.keys().filter(|k| *k != "name").cloned().collect())
        .unwrap_or_default()
}

/// Reads and validates a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    ExperimentConfig::from_toml_str(&text, path, base)
}

impl ExperimentConfig {
    /// Parses TOML text. `origin` names the source in error messages and
    /// `base` anchors relative paths.
    pub fn from_toml_str(text: &str, origin: &Path, base: &Path) -> Result<Self> {
        let mut root: Table = text
            .parse()
            .map_err(|e: toml::de::Error| LabError::config(origin, e.to_string().trim().replace('\n', " ")))?;

        let section_names: Vec<&str> = Algorithm::ALL.iter().map(|a| a.name()).collect();
        let allowed: Vec<&str> = TOP_LEVEL_KEYS.iter().chain(&section_names).copied().collect();
        check_keys(origin, "", &root, &allowed)?;
        check_required(origin, "", &root, REQUIRED_KEYS)?;

        let algorithm = match root.get("algorithm") {
            Some(Value::String(name)) => name.parse::<Algorithm>().map_err(|_| {
                LabError::config(
                    origin,
                    format!(
                        "unknown algorithm `{name}`, did you mean `{}`?",
                        nearest_key(name, section_names.iter().copied())
                    ),
                )
            })?,
            Some(other) => {
                return Err(LabError::config(
                    origin,
                    format!("`algorithm` must be a string, found {}", other.type_str()),
                ))
            }
            None => unreachable!("checked as required"),
        };
        if let Some(stray) = section_names
            .iter()
            .find(|s| **s != algorithm.name() && root.contains_key(**s))
        {
            return Err(LabError::config(
                origin,
                format!("section [{stray}] does not apply to algorithm `{algorithm}`"),
            ));
        }

        let dataset_table = take_table(origin, &mut root, "dataset")?.expect("checked as required");
        let kind = match dataset_table.get("kind") {
            Some(Value::String(k)) if DATASET_KINDS.contains(&k.as_str()) => k.clone(),
            Some(Value::String(k)) => {
                return Err(LabError::config(
                    origin,
                    format!(
                        "unknown dataset kind `{k}`, did you mean `{}`?",
                        nearest_key(k, DATASET_KINDS.iter().copied())
                    ),
                ))
            }
            Some(_) => return Err(LabError::config(origin, "`dataset.kind` must be a string")),
            None => {
                return Err(LabError::MissingKey {
                    path: origin.to_path_buf(),
                    key: "dataset.kind".into(),
                })
            }
        };
        let (known, required) = DatasetConfig::keys(&kind);
        check_keys(origin, "dataset.", &dataset_table, known)?;
        check_required(origin, "dataset.", &dataset_table, required)?;
        let mut dataset: DatasetConfig = decode(origin, "dataset", dataset_table)?;
        dataset.resolve_paths(base);

        let optimizer = match take_table(origin, &mut root, "optimizer")? {
            Some(t) => {
                check_keys(origin, "optimizer.", &t, OPTIMIZER_KEYS)?;
                decode::<OptimizerSection>(origin, "optimizer", t)?
            }
            None => OptimizerSection::default(),
        }
        .into_optim();

        let mut algo_table = take_table(origin, &mut root, algorithm.name())?.unwrap_or_default();
        let algo_keys = algorithm_keys(algorithm);
        let prefix = format!("{}.", algorithm.name());
        check_keys(origin, &prefix, &algo_table, &algo_keys.iter().map(String::as_str).collect::<Vec<_>>())?;
        algo_table.insert("name".into(), Value::String(algorithm.name().into()));
        let algorithm_config: AlgorithmConfig = decode(origin, algorithm.name(), algo_table)?;

        root.remove("algorithm");
        let top: TopLevel = decode(origin, "", root)?;
        let output_dir = top
            .output_dir
            .unwrap_or_else(|| PathBuf::from("runs").join(algorithm.name()));
        let output_dir = if output_dir.is_relative() { base.join(output_dir) } else { output_dir };

        let seed = top.seed.unwrap_or(DEFAULT_SEED);
        if let DatasetConfig::Synthetic { seed: data_seed, .. } = &mut dataset {
            data_seed.get_or_insert(seed);
        }
        let cfg = ExperimentConfig {
            seed,
            memory_size: top.memory_size,
            init_cls: top.init_cls,
            increment: top.increment,
            convnet_type: top.convnet_type,
            dataset,
            optimizer,
            algorithm: algorithm_config,
            output_dir,
        };
        cfg.validate_static().map_err(|msg| LabError::config(origin, msg))?;
        Ok(cfg)
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algorithm.algorithm()
    }

    /// Checks that need no data: backbone name, optimizer, and for datasets
    /// with a declared class count the stream arithmetic and memory budget.
    pub fn validate_static(&self) -> std::result::Result<(), String> {
        if !BACKBONE_REGISTRY.iter().any(|(n, _)| *n == self.convnet_type) {
            let names = BACKBONE_REGISTRY.iter().map(|(n, _)| *n);
            return Err(format!(
                "unknown convnet_type `{}`, did you mean `{}`?",
                self.convnet_type,
                nearest_key(&self.convnet_type, names)
            ));
        }
        self.optimizer.validate().map_err(|e| e.to_string())?;
        if let Some(total) = self.dataset.declared_classes() {
            self.check_classes(total)?;
        }
        Ok(())
    }

    fn check_classes(&self, total: usize) -> std::result::Result<(), String> {
        self.stream_config(total).validate().map_err(|e| e.to_string())?;
        if self.memory_size < total {
            return Err(format!(
                "memory_size {} is smaller than the {total} classes of the stream",
                self.memory_size
            ));
        }
        Ok(())
    }

    pub fn stream_config(&self, total_classes: usize) -> StreamConfig {
        StreamConfig {
            init_cls: self.init_cls,
            increment: self.increment,
            seed: self.seed,
            total_classes,
        }
    }

    /// Number of stages implied by the config, when the class count is declared.
    pub fn num_stages(&self) -> Option<usize> {
        let total = self.dataset.declared_classes()?;
        let s = self.stream_config(total);
        s.validate().ok()?;
        Some(s.num_tasks())
    }

    /// Loads the data, builds the stream and a fresh learner. Fails before
    /// any training or output when anything is inconsistent.
    pub fn prepare(&self) -> Result<Prepared> {
        self.validate_static().map_err(LabError::Invalid)?;
        let (train, test) = load_dataset(&self.dataset.source(self.seed))?;
        self.check_classes(train.num_classes()).map_err(LabError::Invalid)?;
        let stream = TaskStream::build(&train, &test, &self.stream_config(train.num_classes()))?;
        let learner_config = LearnerConfig {
            backbone: BackboneSpec::from_registry(&self.convnet_type, train.dim())?,
            optim: self.optimizer.clone(),
            memory_size: self.memory_size,
            seed: self.seed,
            algorithm: self.algorithm.clone(),
        };
        let learner = build_learner(&learner_config)?;
        Ok(Prepared {
            stream,
            learner_config,
            learner,
        })
    }

    /// SHA-256 of the canonical JSON of every setting except the output
    /// directory.
    pub fn fingerprint(&self) -> String {
        let mut value = serde_json::to_value(self).expect("configs serialize");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("output_dir");
        }
        let canonical = serde_json::to_string(&value).expect("values serialize");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// The settings that decide which instances each stage sees.
    pub fn stream_key(&self) -> serde_json::Value {
        serde_json::json!({
            "dataset": self.dataset,
            "init_cls": self.init_cls,
            "increment": self.increment,
            "seed": self.seed,
        })
    }
}

/// Keys a config may contain, for documentation and error messages.
pub fn all_known_keys() -> BTreeSet<String> {
    let mut keys: BTreeSet<String> = TOP_LEVEL_KEYS.iter().map(|k| k.to_string()).collect();
    for kind in DATASET_KINDS {
        keys.extend(DatasetConfig::keys(kind).0.iter().map(|k| format!("dataset.{k}")));
    }
    keys.extend(OPTIMIZER_KEYS.iter().map(|k| format!("optimizer.{k}")));
    for alg in Algorithm::ALL {
        keys.extend(algorithm_keys(alg).into_iter().map(|k| format!("{}.{k}", alg.name())));
    }
    keys
}
