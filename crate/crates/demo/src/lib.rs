//! Browser demo. Each view is a plain function returning a serializable
//! result; the `wasm-bindgen` wrappers hand those to JavaScript as JSON.

use gafield::aero::{drag_from_fields, AIR_DENSITY};
use gafield::data::synth::{fibonacci_sphere, synth_ellipsoid_flow, synth_sphere_flow, FlowSpec, REFERENCE_SPEED};
use gafield::data::{FeatureRecipe, Task, TaskSpec};
use gafield::metrics;
use gafield::model::{GaField, Injection, ModelConfig};
use gafield::pointcloud::{bbox_min, grid_clusters, Point};
use gafield::tensor::Real;
use gafield::training::{Dataset, Example, TrainConfig, Trainer};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const MAX_POINTS: usize = 20_000;

fn check_points(points: usize) -> gafield::Result<()> {
    if !(16..=MAX_POINTS).contains(&points) {
        return Err(gafield::Error::InvalidArgument(format!(
            "point count must lie in 16..={MAX_POINTS}"
        )));
    }
    Ok(())
}

fn ellipsoid_axes(aspect: Real) -> gafield::Result<Point> {
    if !(aspect.is_finite() && (0.2..=5.0).contains(&aspect)) {
        return Err(gafield::Error::InvalidArgument(format!(
            "aspect ratio must lie in [0.2, 5], got {aspect}"
        )));
    }
    Ok([aspect.cbrt().powi(2), 1.0 / aspect.cbrt(), 1.0 / aspect.cbrt()])
}

#[derive(Debug, Serialize)]
pub struct PoolingView {
    pub points: Vec<Point>,
    /// Cell index of every point.
    pub cluster: Vec<usize>,
    pub centroids: Vec<Point>,
    /// Largest cell population.
    pub max_members: usize,
}

/// Grid clustering of an axis-aligned ellipsoid surface with volume `4π/3`.
pub fn pooling_view(aspect: Real, grid: Real, points: usize) -> gafield::Result<PoolingView> {
    check_points(points)?;
    let axes = ellipsoid_axes(aspect)?;
    let cloud: Vec<Point> = fibonacci_sphere(points)
        .into_iter()
        .map(|u| [axes[0] * u[0], axes[1] * u[1], axes[2] * u[2]])
        .collect();
    let origin = bbox_min(&cloud).expect("non-empty cloud");
    let cl = grid_clusters(&cloud, None, grid, origin)?;
    Ok(PoolingView {
        cluster: cl.index_map().to_vec(),
        centroids: cl.centroids(&cloud),
        max_members: cl.segments.groups().map(<[usize]>::len).max().unwrap_or(0),
        points: cloud,
    })
}

#[derive(Debug, Serialize)]
pub struct PartRow {
    pub part: String,
    pub pressure: Real,
    pub shear: Real,
    pub area: Real,
}

#[derive(Debug, Serialize)]
pub struct FlowView {
    pub points: Vec<Point>,
    pub cp: Vec<Real>,
    pub inflow: Point,
    pub parts: Vec<PartRow>,
    pub total_pressure: Real,
    pub total_shear: Real,
    /// Drag coefficient on the frontal area of a unit sphere.
    pub cd: Real,
}

/// Potential-flow surface pressure on an ellipsoid and its part-wise drag.
/// The inflow lies in the horizontal plane at `yaw_deg` from the x axis.
pub fn flow_view(aspect: Real, yaw_deg: Real, speed: Real, points: usize, seed: u64) -> gafield::Result<FlowView> {
    check_points(points)?;
    let yaw = yaw_deg.to_radians();
    let inflow = [yaw.cos(), yaw.sin(), 0.0];
    let flow = FlowSpec {
        n_surface: points,
        n_volume: 0,
        speed,
        inflow,
    };
    let sample = synth_ellipsoid_flow(ellipsoid_axes(aspect)?, &flow, seed)?;
    let q = 0.5 * speed * speed;
    let cp = sample.field("pressure")?.data().iter().map(|p| p / q).collect();
    let spec = TaskSpec::new(Task::Pressure, inflow, FeatureRecipe::Surface)?;
    let report = drag_from_fields(&sample, &spec, AIR_DENSITY)?;
    let total = report.total();
    let frontal = std::f64::consts::PI as Real;
    Ok(FlowView {
        points: sample.cloud.positions().to_vec(),
        cp,
        inflow,
        parts: report
            .rows
            .iter()
            .map(|r| PartRow {
                part: r.part.clone(),
                pressure: r.pressure,
                shear: r.shear,
                area: r.area,
            })
            .collect(),
        total_pressure: total.pressure,
        total_shear: total.shear,
        cd: (total.pressure + total.shear) / (AIR_DENSITY * q * frontal),
    })
}

#[derive(Debug, Serialize)]
pub struct TrainView {
    pub epoch: usize,
    pub epochs: usize,
    pub loss: Real,
    pub rel_l2: Real,
    pub points: Vec<Point>,
    /// Target and prediction, both in units of `Cp`.
    pub truth: Vec<Real>,
    pub prediction: Vec<Real>,
}

/// A small network fitting the pressure on one sphere, a few epochs per call.
pub struct MicroSession {
    trainer: Trainer,
    data: Dataset,
    points: Vec<Point>,
}

impl MicroSession {
    pub fn new(points: usize, epochs: usize, lr: Real, seed: u64) -> gafield::Result<Self> {
        check_points(points)?;
        let flow = FlowSpec {
            n_surface: points,
            ..FlowSpec::default()
        };
        let sample = synth_sphere_flow(1.0, &flow, seed)?;
        let spec = TaskSpec::new(Task::Pressure, flow.inflow, FeatureRecipe::Surface)?;
        let pc = sample.task_cloud(&spec)?;
        let model = GaField::new(
            ModelConfig {
                grid_sizes: vec![0.3, 0.6],
                channels: vec![8, 16],
                blocks_per_stage: 1,
                group_size: 4,
                token_size: 0.6,
                embed_width: 8,
                ..ModelConfig::default()
            },
            seed,
        )?;
        let q = 0.5 * REFERENCE_SPEED * REFERENCE_SPEED;
        let example = Example {
            name: "sphere".into(),
            input: model.prepare(&pc, &sample.meta.condition)?,
            target: pc.targets().expect("task cloud has targets").map(|p| p / q),
        };
        let config = TrainConfig {
            lr,
            warmup: (epochs / 10).max(1),
            epochs,
            batch_size: 1,
            ..TrainConfig::desk()
        };
        Ok(Self {
            trainer: Trainer::new(model, config)?,
            data: Dataset {
                train: vec![example],
                val: Vec::new(),
            },
            points: pc.positions().to_vec(),
        })
    }

    /// Runs up to `epochs` more epochs and reports the current fit.
    pub fn advance(&mut self, epochs: usize) -> gafield::Result<TrainView> {
        let log = self.trainer.fit_for(&self.data, epochs, |_, _, _| Ok(()))?;
        let ex = &self.data.train[0];
        let pred = self.trainer.model.predict(&ex.input, Injection::Full)?;
        Ok(TrainView {
            epoch: self.trainer.epoch,
            epochs: self.trainer.config.epochs,
            loss: log.last().map_or(Real::NAN, |r| r.train_loss),
            rel_l2: metrics::rel_l2(pred.data(), ex.target.data())?,
            points: self.points.clone(),
            truth: ex.target.data().to_vec(),
            prediction: pred.into_data(),
        })
    }
}

fn to_js<T: Serialize>(r: gafield::Result<T>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = poolCloud)]
pub fn pool_cloud(aspect: f64, grid: f64, points: usize) -> Result<String, JsError> {
    to_js(pooling_view(aspect as Real, grid as Real, points))
}

#[wasm_bindgen(js_name = flowField)]
pub fn flow_field(aspect: f64, yaw_deg: f64, speed: f64, points: usize, seed: u32) -> Result<String, JsError> {
    to_js(flow_view(
        aspect as Real,
        yaw_deg as Real,
        speed as Real,
        points,
        seed as u64,
    ))
}

#[wasm_bindgen]
pub struct MicroTrainer(MicroSession);

#[wasm_bindgen]
impl MicroTrainer {
    #[wasm_bindgen(constructor)]
    pub fn new(points: usize, epochs: usize, lr: f64, seed: u32) -> Result<MicroTrainer, JsError> {
        MicroSession::new(points, epochs, lr as Real, seed as u64)
            .map(MicroTrainer)
            .map_err(|e| JsError::new(&e.to_string()))
    }

    pub fn advance(&mut self, epochs: usize) -> Result<String, JsError> {
        to_js(self.0.advance(epochs))
    }
}
