//! Experiment configuration files (TOML, `schema_version = 1`).
//!
//! Unknown keys are rejected everywhere. Relative dataset paths resolve
//! against the directory holding the configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::idx::load_idx;
use super::{synth_blobs, Dataset};
use crate::attack::AttackConfig;
use crate::bounds::PriorSpec;
use crate::defense::DefenseSpec;
use crate::error::{Error, Result};
use crate::fl::{BoundRows, FLConfig, ParamSource, PerClient, SweepConfig};
use crate::nn::{Batch, Model, ModelSpec, Tensor};
use crate::rng;

pub const SCHEMA_VERSION: u32 = 1;

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub id: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Fill the `wall_time` column; makes outputs run-dependent.
    #[serde(default)]
    pub record_wall_time: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ParamsInit {
    /// Uniform fan-in initialization from each run's seed.
    #[default]
    Random,
    Explicit {
        values: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    Inline {
        /// One row per sample, flattened.
        inputs: Vec<Vec<f64>>,
        /// Per-sample shape; defaults to `[row length]`.
        #[serde(default)]
        sample_shape: Option<Vec<usize>>,
        #[serde(default)]
        labels: Option<Vec<usize>>,
        #[serde(default)]
        targets: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        num_classes: Option<usize>,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
    },
    SynthBlobs {
        sample_shape: Vec<usize>,
        classes: usize,
        n: usize,
        spread: f64,
        #[serde(default)]
        seed: u64,
    },
}

/// Samples `offset..offset + size` form the batch of `bound` and `attack` runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchSelect {
    pub offset: usize,
    pub size: usize,
}

impl Default for BatchSelect {
    fn default() -> Self {
        Self { offset: 0, size: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundSection {
    pub prior: PriorSpec,
    pub rows: BoundRows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub rounds: usize,
    pub peak: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            rounds: 5,
            peak: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment: ExperimentSection,
    pub model: ModelSpec,
    #[serde(default)]
    pub params: ParamsInit,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub batch: BatchSelect,
    /// Defense of `bound`, `attack` and `train` runs.
    #[serde(default)]
    pub defense: DefenseSpec,
    /// Per-client training defenses; overrides `defense` in `train`.
    #[serde(default)]
    pub client_defenses: Option<Vec<DefenseSpec>>,
    /// Defenses compared by `sweep`.
    #[serde(default)]
    pub grid: Vec<DefenseSpec>,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub fl: FLConfig,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub bound: BoundSection,
    /// Directory that relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.experiment.id.is_empty() {
            return Err(Error::config("experiment.id must not be empty"));
        }
        if self.experiment.seeds.is_empty() {
            return Err(Error::config("experiment.seeds must not be empty"));
        }
        let model = Model::new(self.model.clone())?;
        if let ParamsInit::Explicit { values } = &self.params {
            model.params(values.clone())?;
        }
        self.defense.validate()?;
        for d in self
            .grid
            .iter()
            .chain(self.client_defenses.iter().flatten())
        {
            d.validate()?;
        }
        if self.batch.size == 0 {
            return Err(Error::config("batch.size must be at least 1"));
        }
        self.attack.validate()?;
        self.fl_config(0)?.validate()?;
        self.bound.prior.validate()?;
        if let BoundRows::Sketch { k: 0 } | BoundRows::Auto { k: 0 } = self.bound.rows {
            return Err(Error::config("bound.rows needs k ≥ 1"));
        }
        if self.sweep.rounds == 0 || !(self.sweep.peak > 0.0) {
            return Err(Error::config(
                "sweep.rounds must be ≥ 1 and sweep.peak positive",
            ));
        }
        if let DatasetSpec::Inline { .. } | DatasetSpec::SynthBlobs { .. } = self.dataset {
            let ds = self.load_dataset()?;
            self.check_shape(&ds)?;
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<Model> {
        Model::new(self.model.clone())
    }

    pub fn param_source(&self, model: &Model) -> Result<ParamSource> {
        match &self.params {
            ParamsInit::Random => Ok(ParamSource::Seeded),
            ParamsInit::Explicit { values } => {
                Ok(ParamSource::Fixed(model.params(values.clone())?))
            }
        }
    }

    /// FL settings with the experiment's training defenses and `seed`.
    pub fn fl_config(&self, seed: u64) -> Result<FLConfig> {
        let defense = match &self.client_defenses {
            Some(list) => PerClient::Each(list.clone()),
            None => PerClient::All(self.defense.clone()),
        };
        Ok(FLConfig {
            defense,
            seed,
            ..self.fl.clone()
        })
    }

    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            experiment_id: self.experiment.id.clone(),
            seeds: self.experiment.seeds.clone(),
            rounds: self.sweep.rounds,
            prior: self.bound.prior,
            bound_rows: self.bound.rows,
            peak: self.sweep.peak,
        }
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn check_shape(&self, ds: &Dataset) -> Result<()> {
        if ds.sample_shape() != self.model.input_shape.as_slice() {
            return Err(Error::config(format!(
                "dataset samples have shape {:?}, the model expects {:?}",
                ds.sample_shape(),
                self.model.input_shape
            )));
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let ds = match &self.dataset {
            DatasetSpec::Inline {
                inputs,
                sample_shape,
                labels,
                targets,
                num_classes,
            } => {
                let n = inputs.len();
                let width = inputs.first().map_or(0, Vec::len);
                if n == 0 || inputs.iter().any(|r| r.len() != width) {
                    return Err(Error::config(
                        "inline inputs must be non-empty rows of equal length",
                    ));
                }
                let mut shape = vec![n];
                shape.extend(sample_shape.clone().unwrap_or_else(|| vec![width]));
                let x = Tensor::new(shape, inputs.concat())?;
                match (labels, targets) {
                    (None, Some(t)) => {
                        let k = t.first().map_or(0, Vec::len);
                        if t.iter().any(|r| r.len() != k) {
                            return Err(Error::config("inline targets must have equal length"));
                        }
                        Dataset::regression(
                            "inline",
                            x,
                            Tensor::new(vec![t.len(), k], t.concat())?,
                        )?
                    }
                    (Some(l), None) => {
                        let classes =
                            num_classes.unwrap_or_else(|| l.iter().max().map_or(1, |m| m + 1));
                        Dataset::new("inline", x, l.clone(), classes)?
                    }
                    _ => {
                        return Err(Error::config(
                            "inline dataset needs exactly one of labels or targets",
                        ))
                    }
                }
            }
            DatasetSpec::Idx {
                images,
                labels,
                limit,
            } => {
                let ds = load_idx(&self.resolve(images), &self.resolve(labels))?;
                match limit {
                    Some(n) => ds.truncated(*n)?,
                    None => ds,
                }
            }
            DatasetSpec::SynthBlobs {
                sample_shape,
                classes,
                n,
                spread,
                seed,
            } => synth_blobs(
                sample_shape,
                *classes,
                *n,
                *spread,
                &mut rng::stream(*seed, &[]),
            )?,
        };
        self.check_shape(&ds)?;
        Ok(ds)
    }

    /// The batch selected by `[batch]`.
    pub fn select_batch(&self, ds: &Dataset) -> Result<Batch> {
        let BatchSelect { offset, size } = self.batch;
        if offset + size > ds.len() {
            return Err(Error::config(format!(
                "batch {offset}..{} exceeds the {} samples",
                offset + size,
                ds.len()
            )));
        }
        ds.batch(&(offset..offset + size).collect::<Vec<_>>())
    }
}
