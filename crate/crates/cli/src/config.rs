//! Run configuration: built-in profile, then a TOML file, then `--set` flags.

use std::path::{Path, PathBuf};

use gafield::data::synth::{CorpusSpec, REFERENCE_SPEED};
use gafield::data::{FeatureRecipe, Normalizer, Task, TaskSpec};
use gafield::model::ModelConfig;
use gafield::pointcloud::Point;
use gafield::tensor::Real;
use gafield::training::TrainConfig;
use gafield::{Error, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Small network and short schedule for synthetic corpora on one CPU.
    #[default]
    Desk,
    /// Full-size network and schedule for vehicle datasets.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory of sample files used by `train`.
    pub dir: PathBuf,
    /// Points drawn from each training sample; 0 keeps them all.
    pub points: usize,
    /// Every k-th sample in name order goes to validation; 0 disables.
    pub holdout_every: usize,
    /// When non-empty, validation is exactly these categories.
    pub val_categories: Vec<String>,
    /// Corpus written by `synth`.
    pub corpus: CorpusSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            points: 2048,
            holdout_every: 4,
            val_categories: Vec::new(),
            corpus: CorpusSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: Task,
    pub inflow: Point,
    pub recipe: FeatureRecipe,
    /// Output normalization; leave both empty to fit it on the training targets.
    pub norm_mean: Vec<Real>,
    pub norm_std: Vec<Real>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: Task::Pressure,
            inflow: [1.0, 0.0, 0.0],
            recipe: FeatureRecipe::Surface,
            norm_mean: vec![0.0],
            // dynamic pressure at the reference speed, so normalized targets are Cp
            norm_std: vec![0.5 * REFERENCE_SPEED * REFERENCE_SPEED],
        }
    }
}

impl TaskConfig {
    pub fn spec(&self) -> Result<TaskSpec> {
        TaskSpec::new(self.kind, self.inflow, self.recipe).map_err(|e| Error::Config(e.to_string()))
    }

    /// The configured normalizer, or `None` when it should be fitted.
    pub fn normalizer(&self) -> Result<Option<Normalizer>> {
        if self.norm_mean.is_empty() && self.norm_std.is_empty() {
            return Ok(None);
        }
        if self.norm_mean.len() != self.kind.out_width() {
            return Err(Error::Config(format!(
                "task.norm_mean needs {} entries for {:?}",
                self.kind.out_width(),
                self.kind
            )));
        }
        Normalizer::new(self.norm_mean.clone(), self.norm_std.clone())
            .map(Some)
            .map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub task: TaskConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Desk)
    }
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self {
                profile,
                model: ModelConfig::desk(),
                train: TrainConfig::desk(),
                data: DataConfig::default(),
                task: TaskConfig::default(),
            },
            Profile::Full => Self {
                profile,
                model: ModelConfig::default(),
                train: TrainConfig::full_scale(),
                data: DataConfig {
                    points: 32_768,
                    holdout_every: 0,
                    ..DataConfig::default()
                },
                task: TaskConfig {
                    norm_mean: vec![Normalizer::PRESSURE_MEAN],
                    norm_std: vec![Normalizer::PRESSURE_STD],
                    ..TaskConfig::default()
                },
            },
        }
    }

    /// Profile defaults, overlaid by `file`, overlaid by `key=value` overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut layer = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                toml::from_str::<Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for o in overrides {
            let (path, value) = parse_override(o)?;
            set_path(&mut layer, &path, value)?;
        }
        let profile = match layer.get("profile") {
            Some(v) => v
                .clone()
                .try_into::<Profile>()
                .map_err(|e| Error::Config(format!("profile: {e}")))?,
            None => Profile::default(),
        };
        let mut merged = Table::try_from(Self::for_profile(profile)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, layer);
        let config: Self = merged.try_into().map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let spec = self.task.spec()?;
        if self.model.in_features != spec.recipe.width() {
            return Err(Error::Config(format!(
                "model.in_features = {} but the {:?} recipe yields {} features",
                self.model.in_features,
                spec.recipe,
                spec.recipe.width()
            )));
        }
        if self.model.out_width != spec.out_width() {
            return Err(Error::Config(format!(
                "model.out_width = {} but {:?} has {} channels",
                self.model.out_width,
                spec.task,
                spec.out_width()
            )));
        }
        self.task.normalizer()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Splits `a.b.c=value`; the value is read as TOML, falling back to a bare string.
pub fn parse_override(text: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {text:?} is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((path, value))
}

fn set_path(table: &mut Table, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut t = table;
    for (depth, key) in parents.iter().enumerate() {
        let entry = t.entry(key.clone()).or_insert_with(|| Value::Table(Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{} is not a section", path[..=depth].join("."))))?;
    }
    t.insert(last.clone(), value);
    Ok(())
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
