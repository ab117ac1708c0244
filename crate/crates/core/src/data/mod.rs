//! Samples, feature recipes, normalization, subsampling and splits.

pub mod io;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{dot, norm, Point, PointCloud};
use crate::tensor::{Array, Real};

/// Field holding per-point surface areas when the cloud also has shell points.
pub const AREA_FIELD: &str = "area";

/// Predicted physical field.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Pressure,
    Wss,
    Velocity,
}

impl Task {
    pub fn out_width(self) -> usize {
        match self {
            Task::Pressure => 1,
            Task::Wss | Task::Velocity => 3,
        }
    }

    /// Name of the sample field holding this task's target.
    pub fn field(self) -> &'static str {
        match self {
            Task::Pressure => "pressure",
            Task::Wss => "wss",
            Task::Velocity => "velocity",
        }
    }

    /// Surface tasks use only points flagged as surface.
    pub fn on_surface(self) -> bool {
        !matches!(self, Task::Velocity)
    }
}

/// How per-point input features are assembled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureRecipe {
    /// `[x, n, cos θ]`, 7 channels.
    #[default]
    Surface,
    /// `[x, v₀]`, 6 channels.
    Volume,
    /// `[x, v₀, sdf]`, 7 channels.
    VolumeSdf,
}

impl FeatureRecipe {
    pub fn width(self) -> usize {
        match self {
            FeatureRecipe::Volume => 6,
            FeatureRecipe::Surface | FeatureRecipe::VolumeSdf => 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: Task,
    /// Unit free-stream direction.
    pub inflow: Point,
    pub recipe: FeatureRecipe,
}

impl TaskSpec {
    pub fn new(task: Task, inflow: Point, recipe: FeatureRecipe) -> Result<Self> {
        if (norm(&inflow) - 1.0).abs() > 1e-9 {
            return Err(Error::arg(format!("inflow direction {inflow:?} is not unit length")));
        }
        if task.on_surface() && recipe != FeatureRecipe::Surface {
            return Err(Error::arg("surface tasks use the surface feature recipe"));
        }
        Ok(Self { task, inflow, recipe })
    }

    pub fn out_width(&self) -> usize {
        self.task.out_width()
    }
}

/// Descriptive fields stored alongside a cloud.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleMeta {
    pub name: String,
    pub category: String,
    /// Free-stream speed in m/s.
    pub speed: Real,
    /// Flow-condition vector fed to the network.
    pub condition: Vec<Real>,
    /// Display names indexed by part label.
    pub part_names: Vec<String>,
}

/// One shape: geometry channels in `cloud` plus named physical fields.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub meta: SampleMeta,
    pub cloud: PointCloud,
    pub fields: BTreeMap<String, Array>,
}

impl Sample {
    pub fn field(&self, name: &str) -> Result<&Array> {
        self.fields
            .get(name)
            .ok_or_else(|| Error::format(format!("sample {} has no {name} field", self.meta.name)))
    }

    /// Rows `indices` of the cloud and every field.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let cloud = self.cloud.select(indices)?;
        let fields = self
            .fields
            .iter()
            .map(|(k, a)| (k.clone(), select_rows(a, indices)))
            .collect();
        Ok(Self {
            meta: self.meta.clone(),
            cloud,
            fields,
        })
    }

    /// Indices of the points a task is defined on.
    pub fn task_points(&self, task: Task) -> Vec<usize> {
        match (task.on_surface(), self.cloud.surface_flags()) {
            (true, Some(flags)) => (0..flags.len()).filter(|&i| flags[i]).collect(),
            _ => (0..self.cloud.len()).collect(),
        }
    }

    /// Cloud with task features and targets, restricted to the task's points.
    pub fn task_cloud(&self, spec: &TaskSpec) -> Result<PointCloud> {
        let sub = self.select(&self.task_points(spec.task))?;
        let target = sub.field(spec.task.field())?.clone();
        if target.cols() != spec.out_width() {
            return Err(Error::format(format!(
                "{} field has width {}, expected {}",
                spec.task.field(),
                target.cols(),
                spec.out_width()
            )));
        }
        sub.task_inputs_all(spec)?.with_targets(target)
    }

    /// Like [`Sample::task_cloud`] but without targets, for clouds with no fields.
    pub fn task_inputs(&self, spec: &TaskSpec) -> Result<PointCloud> {
        self.select(&self.task_points(spec.task))?.task_inputs_all(spec)
    }

    fn task_inputs_all(self, spec: &TaskSpec) -> Result<PointCloud> {
        let mut sub = self;
        if spec.task.on_surface() && sub.cloud.areas().is_none() {
            if let Some(a) = sub.fields.get(AREA_FIELD) {
                sub.cloud = sub.cloud.with_areas(a.data().to_vec())?;
            }
        }
        if sub.cloud.is_empty() {
            return Err(Error::cloud(format!(
                "sample {} has no points for {:?}",
                sub.meta.name, spec.task
            )));
        }
        let features = match spec.recipe {
            FeatureRecipe::Surface => surface_features(&sub.cloud, spec.inflow)?,
            FeatureRecipe::Volume | FeatureRecipe::VolumeSdf => {
                let u = spec.inflow.map(|d| d * sub.meta.speed);
                let flags = sub
                    .cloud
                    .surface_flags()
                    .ok_or_else(|| Error::cloud("volume features need surface flags"))?;
                let sdf = match spec.recipe {
                    FeatureRecipe::VolumeSdf => Some(
                        sub.cloud
                            .sdf()
                            .ok_or_else(|| Error::cloud("missing signed distance channel"))?,
                    ),
                    _ => None,
                };
                volume_features(sub.cloud.positions(), u, flags, sdf)?
            }
        };
        sub.cloud.with_features(features)
    }
}

pub(crate) fn select_rows(a: &Array, indices: &[usize]) -> Array {
    let c = a.cols();
    let mut data = Vec::with_capacity(indices.len() * c);
    for &i in indices {
        data.extend_from_slice(a.row(i));
    }
    Array::new(vec![indices.len(), c], data).expect("row selection keeps width")
}

/// `[x, n, cos θ]` per point with `cos θ = n · d`.
pub fn surface_features(pc: &PointCloud, inflow: Point) -> Result<Array> {
    let normals = pc
        .normals()
        .ok_or_else(|| Error::cloud("surface features need normals"))?;
    let mut data = Vec::with_capacity(pc.len() * 7);
    for (x, n) in pc.positions().iter().zip(normals) {
        data.extend_from_slice(x);
        data.extend_from_slice(n);
        data.push(dot(n, &inflow));
    }
    Ok(Array::new(vec![pc.len(), 7], data)?)
}

/// `[x, v₀]` (plus `sdf` when given) with `v₀ = 0` on the surface and `u∞` elsewhere.
pub fn volume_features(positions: &[Point], u_inf: Point, surface: &[bool], sdf: Option<&[Real]>) -> Result<Array> {
    let n = positions.len();
    if surface.len() != n {
        return Err(Error::cloud(format!("{} surface flags for {n} points", surface.len())));
    }
    if let Some(s) = sdf {
        if s.len() != n {
            return Err(Error::cloud(format!("{} distance values for {n} points", s.len())));
        }
    }
    let width = if sdf.is_some() { 7 } else { 6 };
    let mut data = Vec::with_capacity(n * width);
    for i in 0..n {
        data.extend_from_slice(&positions[i]);
        data.extend_from_slice(&if surface[i] { [0.0; 3] } else { u_inf });
        if let Some(s) = sdf {
            data.push(s[i]);
        }
    }
    Ok(Array::new(vec![n, width], data)?)
}

/// Row-wise Euclidean norm of an `N × 3` field.
pub fn wss_magnitude(tau: &Array) -> Result<Array> {
    if tau.rank() != 2 || tau.cols() != 3 {
        return Err(Error::arg(format!(
            "expected N × 3 shear stress, got {:?}",
            tau.shape()
        )));
    }
    let data = (0..tau.rows())
        .map(|i| {
            let r = tau.row(i);
            (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt()
        })
        .collect();
    Ok(Array::new(vec![tau.rows(), 1], data)?)
}

/// Per-channel affine normalization `(v − mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalizer {
    pub mean: Vec<Real>,
    pub std: Vec<Real>,
}

impl Normalizer {
    pub const PRESSURE_MEAN: Real = -94.5;
    pub const PRESSURE_STD: Real = 117.25;

    pub fn new(mean: Vec<Real>, std: Vec<Real>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::arg("normalizer needs one mean and one std per channel"));
        }
        if let Some(s) = std.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::arg(format!("normalizer std must be positive, got {s}")));
        }
        Ok(Self { mean, std })
    }

    /// Same statistics on every channel.
    pub fn uniform(width: usize, mean: Real, std: Real) -> Result<Self> {
        Self::new(vec![mean; width], vec![std; width])
    }

    /// Surface-pressure statistics of the full-scale vehicle corpus.
    pub fn pressure() -> Self {
        Self::new(vec![Self::PRESSURE_MEAN], vec![Self::PRESSURE_STD]).expect("positive std")
    }

    pub fn identity(width: usize) -> Self {
        Self::uniform(width, 0.0, 1.0).expect("positive std")
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, a: &Array) -> Result<()> {
        if a.rank() != 2 || a.cols() != self.width() {
            return Err(Error::arg(format!(
                "normalizer has {} channels, values have shape {:?}",
                self.width(),
                a.shape()
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, a: &Array) -> Result<Array> {
        self.check(a)?;
        let c = self.width();
        let mut out = a.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v - self.mean[k % c]) / self.std[k % c];
        }
        Ok(out)
    }

    pub fn denormalize(&self, a: &Array) -> Result<Array> {
        self.check(a)?;
        let c = self.width();
        let mut out = a.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * self.std[k % c] + self.mean[k % c];
        }
        Ok(out)
    }
}

/// Draws `n` points uniformly; the flag reports sampling with replacement
/// (requested `n` larger than the cloud).
pub fn sample_points(pc: &PointCloud, n: usize, seed: u64) -> Result<(PointCloud, bool)> {
    let (idx, replaced) = sample_indices(pc.len(), n, seed)?;
    Ok((pc.select(&idx)?, replaced))
}

/// Index draw behind [`sample_points`], reusable for aligned side channels.
pub fn sample_indices(len: usize, n: usize, seed: u64) -> Result<(Vec<usize>, bool)> {
    if n == 0 {
        return Err(Error::arg("cannot sample zero points"));
    }
    if len == 0 {
        return Err(Error::cloud("cannot sample from an empty cloud"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if n <= len {
        Ok((index::sample(&mut rng, len, n).into_vec(), false))
    } else {
        Ok(((0..n).map(|_| rng.random_range(0..len)).collect(), true))
    }
}

/// Partitions samples by category label.
pub fn split_by_category(samples: Vec<Sample>, train: &[&str], test: &[&str]) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::arg("both category lists must be non-empty"));
    }
    let tr: BTreeSet<&str> = train.iter().copied().collect();
    let te: BTreeSet<&str> = test.iter().copied().collect();
    if let Some(c) = tr.intersection(&te).next() {
        return Err(Error::arg(format!("category {c} is on both sides of the split")));
    }
    let mut a = Vec::new();
    let mut b = Vec::new();
    for s in samples {
        if tr.contains(s.meta.category.as_str()) {
            a.push(s);
        } else if te.contains(s.meta.category.as_str()) {
            b.push(s);
        }
    }
    Ok((a, b))
}
