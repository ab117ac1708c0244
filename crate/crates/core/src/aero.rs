//! Part-wise drag from surface pressure and wall shear stress.
//!
//! Fields are kinematic (divided by density), so forces carry a factor `ρ`.

use serde::{Deserialize, Serialize};

use crate::data::{Normalizer, Sample, TaskSpec};
use crate::error::{Error, Result};
use crate::model::{GaField, Injection};
use crate::pointcloud::{dot, norm, Point, PointCloud};
use crate::tensor::{Array, Real};

/// Sea-level air density in kg/m³.
pub const AIR_DENSITY: Real = 1.225;

const UNIT_TOL: Real = 1e-6;

/// Pressure and shear drag of one surface cell.
pub fn cell_drag(normal: Point, p: Real, tau: Point, area: Real, inflow: Point, rho: Real) -> Result<(Real, Real)> {
    if (norm(&normal) - 1.0).abs() > UNIT_TOL || (norm(&inflow) - 1.0).abs() > UNIT_TOL {
        return Err(Error::arg("normal and inflow direction must be unit vectors"));
    }
    if !(area > 0.0 && rho > 0.0) {
        return Err(Error::arg("area and density must be positive"));
    }
    Ok(cell_drag_unchecked(&normal, p, &tau, area, &inflow, rho))
}

fn cell_drag_unchecked(n: &Point, p: Real, tau: &Point, area: Real, d: &Point, rho: Real) -> (Real, Real) {
    (-dot(n, d) * p * area * rho, dot(tau, d) * area * rho)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartDrag {
    pub part: String,
    /// Newtons.
    pub pressure: Real,
    /// Newtons.
    pub shear: Real,
    /// Square meters.
    pub area: Real,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DragReport {
    pub rows: Vec<PartDrag>,
    /// Areas came from the uniform fallback rather than per-point data.
    pub approximate_area: bool,
}

impl DragReport {
    pub fn total(&self) -> PartDrag {
        let mut t = PartDrag {
            part: "Total".into(),
            pressure: 0.0,
            shear: 0.0,
            area: 0.0,
        };
        for r in &self.rows {
            t.pressure += r.pressure;
            t.shear += r.shear;
            t.area += r.area;
        }
        t
    }

    pub fn row(&self, part: &str) -> Option<&PartDrag> {
        self.rows.iter().find(|r| r.part == part)
    }

    /// Rows merged under new names; rows mapped to the same name are summed in order.
    pub fn merge(&self, rename: impl Fn(&str) -> String) -> Self {
        let mut rows: Vec<PartDrag> = Vec::new();
        for r in &self.rows {
            let name = rename(&r.part);
            match rows.iter_mut().find(|x| x.part == name) {
                Some(x) => {
                    x.pressure += r.pressure;
                    x.shear += r.shear;
                    x.area += r.area;
                }
                None => rows.push(PartDrag {
                    part: name,
                    ..r.clone()
                }),
            }
        }
        Self {
            rows,
            approximate_area: self.approximate_area,
        }
    }

    pub const HEADER: [&'static str; 4] = ["part", "pressure_drag_N", "shear_drag_N", "area_m2"];
    const APPROX_NOTE: &'static str = "# areas approximate: uniform total area / point count";

    /// CSV with one row per part then a `Total` row; values in shortest round-trip form.
    pub fn to_csv(&self) -> Result<String> {
        let mut out = String::new();
        if self.approximate_area {
            out.push_str(Self::APPROX_NOTE);
            out.push('\n');
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::HEADER)?;
        for r in self.rows.iter().chain(std::iter::once(&self.total())) {
            w.write_record([
                r.part.clone(),
                format!("{:?}", r.pressure),
                format!("{:?}", r.shear),
                format!("{:?}", r.area),
            ])?;
        }
        let body = w.into_inner().map_err(|e| Error::format(e.to_string()))?;
        out.push_str(std::str::from_utf8(&body).expect("csv writes UTF-8"));
        Ok(out)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let (approximate_area, body) = match text.strip_prefix(Self::APPROX_NOTE) {
            Some(rest) => (true, rest.trim_start_matches('\n')),
            None => (false, text),
        };
        let mut rd = csv::Reader::from_reader(body.as_bytes());
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        if header != Self::HEADER {
            return Err(Error::format(format!("unexpected drag report header {header:?}")));
        }
        let num = |s: &str| -> Result<Real> { s.parse().map_err(|_| Error::format(format!("bad number {s:?}"))) };
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            if rec.len() != 4 {
                return Err(Error::format("drag rows need four columns"));
            }
            if &rec[0] == "Total" {
                continue;
            }
            rows.push(PartDrag {
                part: rec[0].to_string(),
                pressure: num(&rec[1])?,
                shear: num(&rec[2])?,
                area: num(&rec[3])?,
            });
        }
        Ok(Self { rows, approximate_area })
    }

    /// Bar-chart series for external plotting.
    pub fn chart_json(&self) -> String {
        let parts: Vec<&str> = self.rows.iter().map(|r| r.part.as_str()).collect();
        let col = |f: fn(&PartDrag) -> Real| self.rows.iter().map(f).collect::<Vec<_>>();
        serde_json::json!({
            "parts": parts,
            "pressure_drag_N": col(|r| r.pressure),
            "shear_drag_N": col(|r| r.shear),
            "area_m2": col(|r| r.area),
            "approximate_area": self.approximate_area,
        })
        .to_string()
    }
}

/// Part-wise sums of [`cell_drag`] over a labelled surface cloud.
///
/// `pressure` is `N × 1`, `wss` is `N × 3` (zero shear when absent). Parts are
/// reported in label order; labels beyond `part_names` are named `part<k>`.
pub fn partwise_drag(
    pc: &PointCloud,
    pressure: &Array,
    wss: Option<&Array>,
    inflow: Point,
    rho: Real,
    part_names: &[String],
) -> Result<DragReport> {
    let n = pc.len();
    let normals = pc.normals().ok_or_else(|| Error::cloud("drag needs normals"))?;
    let parts = pc.parts().ok_or_else(|| Error::cloud("drag needs part labels"))?;
    let areas = pc
        .areas()
        .ok_or_else(|| Error::cloud("drag needs per-point areas (see partwise_drag_uniform)"))?;
    drag_with_areas(normals, parts, areas, pressure, wss, inflow, rho, part_names, false, n)
}

/// Like [`partwise_drag`] but spreading `total_area` evenly over the points;
/// the report is flagged approximate.
pub fn partwise_drag_uniform(
    pc: &PointCloud,
    total_area: Real,
    pressure: &Array,
    wss: Option<&Array>,
    inflow: Point,
    rho: Real,
    part_names: &[String],
) -> Result<DragReport> {
    let n = pc.len();
    if n == 0 || !(total_area > 0.0) {
        return Err(Error::arg("uniform areas need points and a positive total area"));
    }
    let normals = pc.normals().ok_or_else(|| Error::cloud("drag needs normals"))?;
    let parts = pc.parts().ok_or_else(|| Error::cloud("drag needs part labels"))?;
    let areas = vec![total_area / n as Real; n];
    drag_with_areas(normals, parts, &areas, pressure, wss, inflow, rho, part_names, true, n)
}

#[allow(clippy::too_many_arguments)]
fn drag_with_areas(
    normals: &[Point],
    parts: &[u32],
    areas: &[Real],
    pressure: &Array,
    wss: Option<&Array>,
    inflow: Point,
    rho: Real,
    part_names: &[String],
    approximate_area: bool,
    n: usize,
) -> Result<DragReport> {
    if pressure.shape() != [n, 1] {
        return Err(Error::arg(format!(
            "pressure must be {n} × 1, got {:?}",
            pressure.shape()
        )));
    }
    if let Some(t) = wss {
        if t.shape() != [n, 3] {
            return Err(Error::arg(format!("shear stress must be {n} × 3, got {:?}", t.shape())));
        }
    }
    if (norm(&inflow) - 1.0).abs() > UNIT_TOL {
        return Err(Error::arg("inflow direction must be a unit vector"));
    }
    if !(rho > 0.0) {
        return Err(Error::arg("density must be positive"));
    }
    let labels = parts.iter().copied().max().map_or(0, |m| m as usize + 1);
    let mut rows: Vec<PartDrag> = (0..labels)
        .map(|k| PartDrag {
            part: part_names.get(k).cloned().unwrap_or_else(|| format!("part{k}")),
            pressure: 0.0,
            shear: 0.0,
            area: 0.0,
        })
        .collect();
    let mut present = vec![false; labels];
    for i in 0..n {
        let tau = wss.map_or([0.0; 3], |t| [t.get(i, 0), t.get(i, 1), t.get(i, 2)]);
        let (fp, ft) = cell_drag_unchecked(&normals[i], pressure.get(i, 0), &tau, areas[i], &inflow, rho);
        let r = &mut rows[parts[i] as usize];
        r.pressure += fp;
        r.shear += ft;
        r.area += areas[i];
        present[parts[i] as usize] = true;
    }
    let rows = rows
        .into_iter()
        .zip(present)
        .filter(|(_, p)| *p)
        .map(|(r, _)| r)
        .collect();
    Ok(DragReport { rows, approximate_area })
}

/// A trained field model together with how its inputs and outputs are scaled.
#[derive(Clone, Copy, Debug)]
pub struct FieldModel<'a> {
    pub model: &'a GaField,
    pub normalizer: &'a Normalizer,
    pub spec: &'a TaskSpec,
}

impl FieldModel<'_> {
    /// Denormalized prediction on the task's points of `sample`.
    pub fn predict(&self, sample: &Sample) -> Result<(PointCloud, Array)> {
        let pc = sample.task_inputs(self.spec)?;
        let input = self.model.prepare(&pc, &sample.meta.condition)?;
        let out = self.model.predict(&input, Injection::Full)?;
        Ok((pc, self.normalizer.denormalize(&out)?))
    }
}

/// Drag report from predicted pressure and shear fields on the sample surface.
///
/// With `total_area` the per-point areas are replaced by the uniform fallback.
pub fn drag_from_prediction(
    pressure: FieldModel,
    wss: FieldModel,
    sample: &Sample,
    rho: Real,
    total_area: Option<Real>,
) -> Result<DragReport> {
    use crate::data::Task;
    if pressure.spec.task != Task::Pressure || wss.spec.task != Task::Wss {
        return Err(Error::arg("drag needs a pressure model and a wall-shear-stress model"));
    }
    let (pc, p) = pressure.predict(sample)?;
    let (_, t) = wss.predict(sample)?;
    let names = &sample.meta.part_names;
    match total_area {
        Some(a) => partwise_drag_uniform(&pc, a, &p, Some(&t), pressure.spec.inflow, rho, names),
        None => partwise_drag(&pc, &p, Some(&t), pressure.spec.inflow, rho, names),
    }
}

/// Drag report from the sample's own pressure and shear fields.
pub fn drag_from_fields(sample: &Sample, spec: &TaskSpec, rho: Real) -> Result<DragReport> {
    let idx = sample.task_points(spec.task);
    let sub = sample.select(&idx)?;
    let pc = sample.task_cloud(spec)?;
    let p = sub.field("pressure")?;
    let t = sub.field("wss").ok();
    partwise_drag(&pc, p, t, spec.inflow, rho, &sample.meta.part_names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_sphere_flow, FlowSpec};
    use crate::data::{FeatureRecipe, Task};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(rng: &mut ChaCha8Rng) -> Point {
        loop {
            let v: Point = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let r = norm(&v);
            if r > 0.1 && r <= 1.0 {
                return v.map(|x| x / r);
            }
        }
    }

    #[test]
    fn cell_examples() {
        let d = [1.0, 0.0, 0.0];
        assert_eq!(
            cell_drag([0.0, 1.0, 0.0], 5.0, [0.0; 3], 2.0, d, 1.2).unwrap(),
            (0.0, 0.0)
        );
        assert_eq!(
            cell_drag([-1.0, 0.0, 0.0], 1.0, [0.0; 3], 1.0, d, 1.0).unwrap(),
            (1.0, 0.0)
        );
        assert!(cell_drag([1.0, 1.0, 0.0], 1.0, [0.0; 3], 1.0, d, 1.0).is_err());
        assert!(cell_drag([1.0, 0.0, 0.0], 1.0, [0.0; 3], 0.0, d, 1.0).is_err());
    }

    #[test]
    fn cell_matches_scalar_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let n = unit(&mut rng);
            let d = unit(&mut rng);
            let tau: Point = [
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            ];
            let p: Real = rng.random_range(-500.0..500.0);
            let a: Real = rng.random_range(1e-4..1.0);
            let rho: Real = rng.random_range(0.5..2.0);
            let (fp, ft) = cell_drag(n, p, tau, a, d, rho).unwrap();
            let ndot = n[0] * d[0] + n[1] * d[1] + n[2] * d[2];
            let tdot = tau[0] * d[0] + tau[1] * d[1] + tau[2] * d[2];
            assert_eq!(fp, -ndot * p * a * rho);
            assert_eq!(ft, tdot * a * rho);
        }
    }

    fn sphere() -> (Sample, TaskSpec) {
        let flow = FlowSpec {
            n_surface: 2000,
            ..FlowSpec::default()
        };
        let s = synth_sphere_flow(1.0, &flow, 2).unwrap();
        let spec = TaskSpec::new(Task::Pressure, flow.inflow, FeatureRecipe::Surface).unwrap();
        (s, spec)
    }

    #[test]
    fn report_properties() {
        let (s, spec) = sphere();
        let r = drag_from_fields(&s, &spec, AIR_DENSITY).unwrap();
        let names: Vec<&str> = r.rows.iter().map(|r| r.part.as_str()).collect();
        assert_eq!(names, ["Front", "Side", "Rear"]);
        let total = r.total();
        assert_eq!(total.pressure, r.rows.iter().map(|x| x.pressure).sum::<Real>());
        assert!(r.rows.iter().all(|x| x.area >= 0.0));

        let pc = s.task_cloud(&spec).unwrap();
        let p = s.field("pressure").unwrap();
        let t = s.field("wss").unwrap();
        let one = PointCloud::new(pc.positions().to_vec())
            .unwrap()
            .with_normals(pc.normals().unwrap().to_vec())
            .unwrap()
            .with_areas(pc.areas().unwrap().to_vec())
            .unwrap()
            .with_parts(vec![0; pc.len()])
            .unwrap();
        let whole = partwise_drag(&one, p, Some(t), spec.inflow, AIR_DENSITY, &["Body".into()]).unwrap();
        assert_eq!(whole.rows.len(), 1);
        let direct = (0..pc.len()).fold((0.0, 0.0), |acc, i| {
            let (a, b) = cell_drag(
                pc.normals().unwrap()[i],
                p.get(i, 0),
                [t.get(i, 0), t.get(i, 1), t.get(i, 2)],
                pc.areas().unwrap()[i],
                spec.inflow,
                AIR_DENSITY,
            )
            .unwrap();
            (acc.0 + a, acc.1 + b)
        });
        assert_eq!((whole.rows[0].pressure, whole.rows[0].shear), direct);

        // linearity and direction reversal
        let scaled = p.map(|v| v * 2.0);
        let r2 = partwise_drag(&pc, &scaled, Some(t), spec.inflow, AIR_DENSITY, &s.meta.part_names).unwrap();
        let r1 = partwise_drag(&pc, p, Some(t), spec.inflow, AIR_DENSITY, &s.meta.part_names).unwrap();
        for (a, b) in r1.rows.iter().zip(&r2.rows) {
            assert_eq!(b.pressure, 2.0 * a.pressure);
            assert_eq!(b.shear, a.shear);
        }
        let back = partwise_drag(&pc, p, Some(t), [-1.0, 0.0, 0.0], AIR_DENSITY, &s.meta.part_names).unwrap();
        for (a, b) in r1.rows.iter().zip(&back.rows) {
            assert_eq!(b.pressure, -a.pressure);
            assert_eq!(b.shear, -a.shear);
        }

        // merging two parts sums their rows
        let merged = r1.merge(|n| if n == "Rear" { "Side".into() } else { n.into() });
        assert_eq!(merged.rows.len(), 2);
        let side = merged.row("Side").unwrap();
        assert_eq!(
            side.pressure,
            r1.row("Side").unwrap().pressure + r1.row("Rear").unwrap().pressure
        );
    }

    #[test]
    fn sphere_has_no_net_pressure_drag() {
        let (s, spec) = sphere();
        let r = drag_from_fields(&s, &spec, AIR_DENSITY).unwrap();
        let q = 0.5 * s.meta.speed * s.meta.speed;
        let scale = AIR_DENSITY * q * std::f64::consts::PI as Real;
        assert!(r.total().pressure.abs() <= 0.02 * scale);
        // the front alone pushes downstream at a sizable fraction of the scale
        assert!(r.row("Front").unwrap().pressure > 0.1 * scale);
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let report = DragReport {
            rows: vec![
                PartDrag {
                    part: "Mirrors_Glass".into(),
                    pressure: 9.924,
                    shear: 0.006,
                    area: 0.037,
                },
                PartDrag {
                    part: "Hood".into(),
                    pressure: -13.1,
                    shear: 0.25,
                    area: 1.2,
                },
            ],
            approximate_area: false,
        };
        let text = report.to_csv().unwrap();
        assert!(text.contains("Mirrors_Glass,9.924,0.006,0.037\n"));
        let back = DragReport::from_csv(&text).unwrap();
        assert_eq!(back, report);
        let row = back.row("Mirrors_Glass").unwrap();
        assert_eq!(row.pressure.to_bits(), (9.924 as Real).to_bits());
        let approx = DragReport {
            approximate_area: true,
            ..report
        };
        assert_eq!(DragReport::from_csv(&approx.to_csv().unwrap()).unwrap(), approx);
        assert!(approx.chart_json().contains("\"parts\":[\"Mirrors_Glass\",\"Hood\"]"));
    }

    #[test]
    fn uniform_area_fallback_is_flagged() {
        let (s, spec) = sphere();
        let pc = s.task_cloud(&spec).unwrap();
        let p = s.field("pressure").unwrap();
        let r = partwise_drag_uniform(&pc, 4.0 * std::f64::consts::PI as Real, p, None, spec.inflow, 1.0, &[]).unwrap();
        assert!(r.approximate_area);
        assert_eq!(r.rows[0].part, "part0");
        assert!(r.to_csv().unwrap().starts_with("# areas approximate"));
        let bare = PointCloud::new(pc.positions().to_vec()).unwrap();
        assert!(partwise_drag(&bare, p, None, spec.inflow, 1.0, &[]).is_err());
    }

    #[test]
    fn zero_models_give_zero_forces() {
        use crate::model::ModelConfig;
        let (s, spec) = sphere();
        let small = s.select(&(0..200).collect::<Vec<_>>()).unwrap();
        let cfg = ModelConfig {
            grid_sizes: vec![0.4, 0.8],
            channels: vec![8, 8],
            blocks_per_stage: 1,
            group_size: 4,
            embed_width: 8,
            ..ModelConfig::default()
        };
        let mut pm = GaField::new(cfg.clone(), 0).unwrap();
        pm.zero_heads();
        let mut wm = GaField::new(ModelConfig { out_width: 3, ..cfg }, 1).unwrap();
        wm.zero_heads();
        let wspec = TaskSpec::new(Task::Wss, spec.inflow, FeatureRecipe::Surface).unwrap();
        let n1 = Normalizer::uniform(1, 0.0, 450.0).unwrap();
        let n3 = Normalizer::uniform(3, 0.0, 1.0).unwrap();
        let r = drag_from_prediction(
            FieldModel {
                model: &pm,
                normalizer: &n1,
                spec: &spec,
            },
            FieldModel {
                model: &wm,
                normalizer: &n3,
                spec: &wspec,
            },
            &small,
            AIR_DENSITY,
            None,
        )
        .unwrap();
        assert!(r.rows.iter().all(|x| x.pressure == 0.0 && x.shear == 0.0));
    }
}
