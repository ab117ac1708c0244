//! Analytic potential-flow samples around spheres and triaxial ellipsoids.
//!
//! Sphere labels are exact incompressible potential flow. Ellipsoid labels
//! reuse the sphere solution evaluated at the point's preimage on the unit
//! sphere, which gives smooth shape-dependent targets but is not a flow
//! solution.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Sample, SampleMeta, AREA_FIELD};
use crate::error::{Error, Result};
use crate::pointcloud::{dot, norm, Point, PointCloud};
use crate::tensor::{Array, Real};

/// Skin-friction coefficient of the shear-stress label model.
pub const SKIN_FRICTION: Real = 0.005;
/// Speed that maps to a unit flow condition.
pub const REFERENCE_SPEED: Real = 30.0;

pub const PART_NAMES: [&str; 4] = ["Front", "Side", "Rear", "Volume"];

/// Surface pressure coefficient at polar angle `θ` from the stagnation point.
pub fn sphere_cp(cos_theta: Real) -> Real {
    1.0 - 2.25 * (1.0 - cos_theta * cos_theta)
}

/// Potential-flow velocity around a sphere of radius `radius` centered at the origin.
pub fn sphere_velocity(x: Point, radius: Real, speed: Real, inflow: Point) -> Point {
    let r = norm(&x);
    let rh = x.map(|v| v / r);
    let k = speed * radius.powi(3) / (2.0 * r.powi(3));
    let dr = dot(&inflow, &rh);
    [0, 1, 2].map(|a| speed * inflow[a] - k * (3.0 * dr * rh[a] - inflow[a]))
}

/// `n` nearly uniform points on the unit sphere.
pub fn fibonacci_sphere(n: usize) -> Vec<Point> {
    let golden = PI * (3.0 - (5.0 as Real).sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2 * i + 1) as Real / n as Real;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden as Real * i as Real;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

/// Uniformly random rotation matrix (rows) from a random unit quaternion.
pub fn random_rotation(rng: &mut ChaCha8Rng) -> [Point; 3] {
    let (u1, u2, u3): (Real, Real, Real) = (rng.random(), rng.random(), rng.random());
    let tau = 2.0 * PI as Real;
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let (w, x, y, z) = (
        a * (tau * u2).sin(),
        a * (tau * u2).cos(),
        b * (tau * u3).sin(),
        b * (tau * u3).cos(),
    );
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - z * w),
            2.0 * (x * z + y * w),
        ],
        [
            2.0 * (x * y + z * w),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - x * w),
        ],
        [
            2.0 * (x * z - y * w),
            2.0 * (y * z + x * w),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

fn rotate(m: &[Point; 3], v: Point) -> Point {
    [dot(&m[0], &v), dot(&m[1], &v), dot(&m[2], &v)]
}

fn unit(v: Point) -> Point {
    let r = norm(&v);
    v.map(|x| x / r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSpec {
    pub n_surface: usize,
    pub n_volume: usize,
    pub speed: Real,
    pub inflow: Point,
}

impl Default for FlowSpec {
    fn default() -> Self {
        Self {
            n_surface: 2048,
            n_volume: 0,
            speed: REFERENCE_SPEED,
            inflow: [1.0, 0.0, 0.0],
        }
    }
}

/// Surface and shell points around the ellipsoid with semi-axes `axes`.
pub fn synth_ellipsoid_flow(axes: Point, flow: &FlowSpec, seed: u64) -> Result<Sample> {
    if flow.n_surface == 0 {
        return Err(Error::arg("surface point count must be positive"));
    }
    if axes.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
        return Err(Error::arg(format!("semi-axes must be positive, got {axes:?}")));
    }
    if !(flow.speed.is_finite() && flow.speed > 0.0) {
        return Err(Error::arg("speed must be positive"));
    }
    if (norm(&flow.inflow) - 1.0).abs() > 1e-9 {
        return Err(Error::arg("inflow direction must be unit length"));
    }
    let d = flow.inflow;
    let speed = flow.speed;
    let q = 0.5 * speed * speed;
    let [a, b, c] = axes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rot = random_rotation(&mut rng);

    let n = flow.n_surface;
    let total = n + flow.n_volume;
    let mut positions = Vec::with_capacity(total);
    let mut normals = Vec::with_capacity(total);
    let mut areas = Vec::with_capacity(total);
    let mut parts = Vec::with_capacity(total);
    let mut flags = Vec::with_capacity(total);
    let mut sdf = Vec::with_capacity(total);
    let mut pressure = Vec::with_capacity(total);
    let mut wss = Vec::with_capacity(3 * total);
    let mut velocity = Vec::with_capacity(3 * total);

    let cell = 4.0 * PI as Real / n as Real;
    for u in fibonacci_sphere(n) {
        let u = rotate(&rot, u);
        let x = [a * u[0], b * u[1], c * u[2]];
        let nrm = unit([u[0] / a, u[1] / b, u[2] / c]);
        let area = cell * ((b * c * u[0]).powi(2) + (a * c * u[1]).powi(2) + (a * b * u[2]).powi(2)).sqrt();
        let ud = dot(&u, &d);
        let slip = [0, 1, 2].map(|k| 1.5 * speed * (d[k] - dot(&d, &nrm) * nrm[k]));
        let slip_mag = norm(&slip);
        positions.push(x);
        normals.push(nrm);
        areas.push(area);
        parts.push(if ud < -0.5 {
            0
        } else if ud > 0.5 {
            2
        } else {
            1
        });
        flags.push(true);
        sdf.push(0.0);
        pressure.push(q * sphere_cp(-ud));
        wss.extend(slip.map(|s| 0.5 * SKIN_FRICTION * slip_mag * s));
        velocity.extend(slip);
    }
    let min_axis = a.min(b).min(c);
    for _ in 0..flow.n_volume {
        let u = loop {
            let v: Point = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let r = norm(&v);
            if r > 0.1 && r <= 1.0 {
                break v.map(|x| x / r);
            }
        };
        let rho: Real = rng.random_range(1.0..3.0);
        let s = u.map(|x| x * rho);
        let vel = sphere_velocity(s, 1.0, speed, d);
        positions.push([a * s[0], b * s[1], c * s[2]]);
        normals.push(u);
        areas.push(0.0);
        parts.push(3);
        flags.push(false);
        sdf.push((rho - 1.0) * min_axis);
        pressure.push(0.5 * (speed * speed - dot(&vel, &vel)));
        wss.extend([0.0; 3]);
        velocity.extend(vel);
    }

    // shell points have no area; with a shell present, surface areas travel
    // as a field and are attached when the surface is selected
    let mut cloud = PointCloud::new(positions)?
        .with_normals(normals)?
        .with_parts(parts)?
        .with_surface_flags(flags)?
        .with_sdf(sdf)?;
    if flow.n_volume == 0 {
        cloud = cloud.with_areas(areas.clone())?;
    }
    let mut fields = BTreeMap::new();
    if flow.n_volume > 0 {
        fields.insert(AREA_FIELD.to_string(), Array::new(vec![total, 1], areas)?);
    }
    fields.insert("pressure".to_string(), Array::new(vec![total, 1], pressure)?);
    fields.insert("wss".to_string(), Array::new(vec![total, 3], wss)?);
    fields.insert("velocity".to_string(), Array::new(vec![total, 3], velocity)?);
    Ok(Sample {
        meta: SampleMeta {
            name: String::new(),
            category: String::new(),
            speed,
            condition: vec![speed / REFERENCE_SPEED],
            part_names: PART_NAMES.iter().map(|s| s.to_string()).collect(),
        },
        cloud,
        fields,
    })
}

pub fn synth_sphere_flow(radius: Real, flow: &FlowSpec, seed: u64) -> Result<Sample> {
    let mut s = synth_ellipsoid_flow([radius; 3], flow, seed)?;
    s.meta.category = "sphere".into();
    Ok(s)
}

/// Shape family of the synthetic corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Sphere,
    /// Elongated along the flow.
    Prolate,
    /// Flattened along the flow.
    Oblate,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Sphere, Shape::Prolate, Shape::Oblate];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Sphere => "sphere",
            Shape::Prolate => "prolate",
            Shape::Oblate => "oblate",
        }
    }

    fn base_axes(self) -> Point {
        match self {
            Shape::Sphere => [1.0, 1.0, 1.0],
            Shape::Prolate => [1.5, 0.8, 0.8],
            Shape::Oblate => [0.6, 1.1, 1.1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub count: usize,
    pub shapes: Vec<Shape>,
    pub flow: FlowSpec,
    /// Relative size jitter per sample.
    pub jitter: Real,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            count: 8,
            shapes: Shape::ALL.to_vec(),
            flow: FlowSpec::default(),
            jitter: 0.1,
            seed: 0,
        }
    }
}

/// Samples cycling through the shape families, each with its own size and point layout.
pub fn synth_corpus(spec: &CorpusSpec) -> Result<Vec<Sample>> {
    if spec.count == 0 || spec.shapes.is_empty() {
        return Err(Error::arg("corpus needs a positive count and at least one shape"));
    }
    if !(0.0..1.0).contains(&spec.jitter) {
        return Err(Error::arg("jitter must lie in [0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.count)
        .map(|k| {
            let shape = spec.shapes[k % spec.shapes.len()];
            let mut jit = || 1.0 + spec.jitter * rng.random_range(-1.0..1.0);
            let scale = jit();
            let base = shape.base_axes();
            let axes = match shape {
                Shape::Sphere => [scale; 3],
                _ => {
                    let along = jit();
                    [base[0] * scale * along, base[1] * scale, base[2] * scale]
                }
            };
            let seed = rng.random();
            let mut s = synth_ellipsoid_flow(axes, &spec.flow, seed)?;
            s.meta.name = format!("{}_{k:03}", shape.name());
            s.meta.category = shape.name().into();
            Ok(s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_pressure_coefficient() {
        assert_eq!(sphere_cp(1.0), 1.0);
        assert_eq!(sphere_cp(0.0), -1.25);
        assert_eq!(sphere_cp(-1.0), 1.0);
    }

    #[test]
    fn surface_velocity_is_tangential_slip() {
        let d = [1.0, 0.0, 0.0];
        let u = sphere_velocity([0.0, 2.0, 0.0], 2.0, 10.0, d);
        assert!((u[0] - 15.0).abs() < 1e-12 && u[1].abs() < 1e-12);
        let stag = sphere_velocity([-2.0, 0.0, 0.0], 2.0, 10.0, d);
        assert!(norm(&stag) < 1e-12);
        let far = sphere_velocity([1e4, 3e4, 0.0], 1.0, 10.0, d);
        assert!((far[0] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn sphere_sample_invariants() {
        let flow = FlowSpec {
            n_surface: 500,
            n_volume: 0,
            ..FlowSpec::default()
        };
        let s = synth_sphere_flow(1.5, &flow, 3).unwrap();
        let pc = &s.cloud;
        let areas = pc.areas().unwrap();
        let total: Real = areas.iter().sum();
        assert!((total - 4.0 * PI * 2.25).abs() < 1e-9);
        let q = 0.5 * flow.speed * flow.speed;
        let p = s.field("pressure").unwrap();
        for (i, (x, n)) in pc.positions().iter().zip(pc.normals().unwrap()).enumerate() {
            assert!((norm(n) - 1.0).abs() < 1e-9);
            assert!((norm(x) - 1.5).abs() < 1e-12);
            assert!(areas[i] > 0.0);
            let cos = -dot(n, &flow.inflow);
            assert!((p.get(i, 0) / q - (1.0 - 2.25 * (1.0 - cos * cos))).abs() < 1e-12);
        }
        assert_eq!(s, synth_sphere_flow(1.5, &flow, 3).unwrap());
        assert_ne!(s.cloud, synth_sphere_flow(1.5, &flow, 4).unwrap().cloud);
    }

    #[test]
    fn ellipsoid_normals_and_areas() {
        let axes = [1.4, 0.7, 0.9];
        let flow = FlowSpec {
            n_surface: 4000,
            ..FlowSpec::default()
        };
        let s = synth_ellipsoid_flow(axes, &flow, 1).unwrap();
        for (x, n) in s.cloud.positions().iter().zip(s.cloud.normals().unwrap()) {
            let g = [x[0] / axes[0].powi(2), x[1] / axes[1].powi(2), x[2] / axes[2].powi(2)];
            let lvl: Real = (0..3).map(|k| (x[k] / axes[k]).powi(2)).sum();
            assert!((lvl - 1.0).abs() < 1e-12);
            let gn = unit(g);
            assert!((0..3).all(|k| (gn[k] - n[k]).abs() < 1e-12));
            assert!((norm(n) - 1.0).abs() < 1e-9);
        }
        // Knud Thomsen's approximation, accurate to about 1%
        let p = 1.6075;
        let [a, b, c] = axes;
        let approx = 4.0 * PI * (((a * b).powf(p) + (a * c).powf(p) + (b * c).powf(p)) / 3.0).powf(1.0 / p);
        let total: Real = s.cloud.areas().unwrap().iter().sum();
        assert!((total - approx).abs() / approx < 0.015, "{total} vs {approx}");
    }

    #[test]
    fn volume_points_follow_potential_flow() {
        let flow = FlowSpec {
            n_surface: 100,
            n_volume: 300,
            ..FlowSpec::default()
        };
        let s = synth_sphere_flow(1.0, &flow, 9).unwrap();
        let flags = s.cloud.surface_flags().unwrap();
        let vel = s.field("velocity").unwrap();
        let sdf = s.cloud.sdf().unwrap();
        assert_eq!(flags.iter().filter(|f| !**f).count(), 300);
        for i in 100..400 {
            let x = s.cloud.positions()[i];
            let r = norm(&x);
            assert!((1.0..=3.0).contains(&r));
            assert!((sdf[i] - (r - 1.0)).abs() < 1e-12);
            let u = sphere_velocity(x, 1.0, flow.speed, flow.inflow);
            assert!((0..3).all(|k| (u[k] - vel.get(i, k)).abs() < 1e-9));
        }
        assert!(s.cloud.areas().is_none());
        let spec = super::super::TaskSpec::new(
            super::super::Task::Pressure,
            flow.inflow,
            super::super::FeatureRecipe::Surface,
        )
        .unwrap();
        let surf = s.task_cloud(&spec).unwrap();
        assert_eq!(surf.len(), 100);
        let total: Real = surf.areas().unwrap().iter().sum();
        assert!((total - 4.0 * PI).abs() < 1e-9);
    }

    #[test]
    fn corpus_layout() {
        let spec = CorpusSpec {
            count: 7,
            flow: FlowSpec {
                n_surface: 64,
                ..FlowSpec::default()
            },
            ..CorpusSpec::default()
        };
        let c = synth_corpus(&spec).unwrap();
        let cats: Vec<&str> = c.iter().map(|s| s.meta.category.as_str()).collect();
        assert_eq!(
            cats,
            ["sphere", "prolate", "oblate", "sphere", "prolate", "oblate", "sphere"]
        );
        assert_eq!(c, synth_corpus(&spec).unwrap());
        assert!(c.iter().all(|s| s.meta.condition == vec![1.0]));
        assert!(synth_corpus(&CorpusSpec { count: 0, ..spec }).is_err());
    }
}
