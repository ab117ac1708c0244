//! Pointwise error metrics, per sample and averaged over a test set.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::wss_magnitude;
use crate::error::{Error, Result};
use crate::tensor::{Array, Real};

fn check(pred: &[Real], truth: &[Real]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::arg(format!(
            "prediction has {} values, ground truth {}",
            pred.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::arg("metrics need at least one value"));
    }
    Ok(())
}

pub fn mse(pred: &[Real], truth: &[Real]) -> Result<Real> {
    check(pred, truth)?;
    let s: Real = pred.iter().zip(truth).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok(s / truth.len() as Real)
}

pub fn mae(pred: &[Real], truth: &[Real]) -> Result<Real> {
    check(pred, truth)?;
    let s: Real = pred.iter().zip(truth).map(|(p, y)| (p - y).abs()).sum();
    Ok(s / truth.len() as Real)
}

pub fn maxae(pred: &[Real], truth: &[Real]) -> Result<Real> {
    check(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, y)| (p - y).abs()).fold(0.0, Real::max))
}

/// Coefficient of determination; undefined for constant ground truth.
pub fn r2(pred: &[Real], truth: &[Real]) -> Result<Real> {
    check(pred, truth)?;
    let mean = truth.iter().sum::<Real>() / truth.len() as Real;
    let ss_tot: Real = truth.iter().map(|y| (y - mean) * (y - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedMetric("r2: ground truth is constant"));
    }
    let ss_res: Real = pred.iter().zip(truth).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn rel_l2(pred: &[Real], truth: &[Real]) -> Result<Real> {
    check(pred, truth)?;
    let den: Real = truth.iter().map(|y| y * y).sum::<Real>().sqrt();
    if den == 0.0 {
        return Err(Error::UndefinedMetric("rel_l2: ground truth is all zero"));
    }
    let num: Real = pred
        .iter()
        .zip(truth)
        .map(|(p, y)| (p - y) * (p - y))
        .sum::<Real>()
        .sqrt();
    Ok(num / den)
}

pub fn rel_l1(pred: &[Real], truth: &[Real]) -> Result<Real> {
    check(pred, truth)?;
    let den: Real = truth.iter().map(|y| y.abs()).sum();
    if den == 0.0 {
        return Err(Error::UndefinedMetric("rel_l1: ground truth is all zero"));
    }
    let num: Real = pred.iter().zip(truth).map(|(p, y)| (p - y).abs()).sum();
    Ok(num / den)
}

/// All six metrics of one comparison.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: Real,
    pub mae: Real,
    pub maxae: Real,
    pub r2: Real,
    pub rel_l2: Real,
    pub rel_l1: Real,
}

impl Metrics {
    pub fn compute(pred: &[Real], truth: &[Real]) -> Result<Self> {
        Ok(Self {
            mse: mse(pred, truth)?,
            mae: mae(pred, truth)?,
            maxae: maxae(pred, truth)?,
            r2: r2(pred, truth)?,
            rel_l2: rel_l2(pred, truth)?,
            rel_l1: rel_l1(pred, truth)?,
        })
    }

    fn values(&self) -> [Real; 6] {
        [self.mse, self.mae, self.maxae, self.r2, self.rel_l2, self.rel_l1]
    }

    fn from_values(v: [Real; 6]) -> Self {
        Self {
            mse: v[0],
            mae: v[1],
            maxae: v[2],
            r2: v[3],
            rel_l2: v[4],
            rel_l1: v[5],
        }
    }
}

/// How multi-channel fields are compared.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VectorMode {
    /// Per-point Euclidean norm of three components.
    #[default]
    Magnitude,
    /// Each channel separately.
    Components,
}

/// Labelled metric rows of one sample: a single row for scalar fields or
/// magnitude mode, one row per channel in component mode.
pub fn sample_metrics(pred: &Array, truth: &Array, mode: VectorMode) -> Result<Vec<(String, Metrics)>> {
    if pred.shape() != truth.shape() || pred.rank() != 2 {
        return Err(Error::arg(format!(
            "prediction shape {:?} does not match ground truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let c = truth.cols();
    if c == 1 {
        return Ok(vec![("value".into(), Metrics::compute(pred.data(), truth.data())?)]);
    }
    match mode {
        VectorMode::Magnitude => {
            let (p, y) = (wss_magnitude(pred)?, wss_magnitude(truth)?);
            Ok(vec![("magnitude".into(), Metrics::compute(p.data(), y.data())?)])
        }
        VectorMode::Components => (0..c)
            .map(|k| {
                let col = |a: &Array| (0..a.rows()).map(|i| a.get(i, k)).collect::<Vec<_>>();
                Ok((format!("component{k}"), Metrics::compute(&col(pred), &col(truth))?))
            })
            .collect(),
    }
}

/// Test-set metrics: each row is the mean over samples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<(String, Metrics)>,
    pub sample_count: usize,
}

impl MetricReport {
    /// Averages per-sample rows, which must carry the same labels in the same order.
    pub fn average(samples: &[Vec<(String, Metrics)>]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::arg("no samples to average"))?;
        let mut sums: Vec<[Real; 6]> = vec![[0.0; 6]; first.len()];
        for s in samples {
            if s.len() != first.len() || s.iter().zip(first).any(|(a, b)| a.0 != b.0) {
                return Err(Error::arg("samples report different metric rows"));
            }
            for (acc, (_, m)) in sums.iter_mut().zip(s) {
                for (a, v) in acc.iter_mut().zip(m.values()) {
                    *a += v;
                }
            }
        }
        let n = samples.len() as Real;
        Ok(Self {
            rows: first
                .iter()
                .zip(sums)
                .map(|((label, _), s)| (label.clone(), Metrics::from_values(s.map(|v| v / n))))
                .collect(),
            sample_count: samples.len(),
        })
    }

    pub fn row(&self, label: &str) -> Option<&Metrics> {
        self.rows.iter().find(|(l, _)| l == label).map(|(_, m)| m)
    }

    pub const HEADER: [&'static str; 8] = ["field", "mse", "mae", "maxae", "r2", "rel_l2", "rel_l1", "samples"];

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::HEADER)?;
        for (label, m) in &self.rows {
            let mut rec = vec![label.clone()];
            rec.extend(m.values().iter().map(|v| format!("{v:?}")));
            rec.push(self.sample_count.to_string());
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv writes UTF-8"))
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<12} {:>12} {:>12} {:>12} {:>10} {:>10} {:>10}",
            "field", "MSE", "MAE", "MaxAE", "R2", "RelL2 %", "RelL1 %"
        )?;
        for (label, m) in &self.rows {
            writeln!(
                f,
                "{:<12} {:>12.4e} {:>12.4e} {:>12.4e} {:>10.4} {:>10.2} {:>10.2}",
                label,
                m.mse,
                m.mae,
                m.maxae,
                m.r2,
                100.0 * m.rel_l2,
                100.0 * m.rel_l1
            )?;
        }
        write!(f, "averaged over {} samples", self.sample_count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_computed_fixture() {
        let y = [1.0, 2.0, 3.0];
        let p = [1.0, 2.0, 5.0];
        let m = Metrics::compute(&p, &y).unwrap();
        assert_eq!(m.mse, 4.0 / 3.0);
        assert_eq!(m.mae, 2.0 / 3.0);
        assert_eq!(m.maxae, 2.0);
        assert_eq!(m.rel_l2, 2.0 / (14.0 as Real).sqrt());
        assert_eq!(m.rel_l1, 2.0 / 6.0);
        assert_eq!(m.r2, -1.0);
    }

    #[test]
    fn perfect_and_mean_predictors() {
        let y = [0.3, -1.2, 4.5, 2.0, 0.0];
        let m = Metrics::compute(&y, &y).unwrap();
        assert_eq!((m.mse, m.mae, m.maxae, m.rel_l2, m.rel_l1), (0.0, 0.0, 0.0, 0.0, 0.0));
        assert_eq!(m.r2, 1.0);
        let mean = y.iter().sum::<Real>() / 5.0;
        assert!(r2(&[mean; 5], &y).unwrap().abs() < 1e-12);
    }

    #[test]
    fn undefined_cases_are_errors() {
        assert!(matches!(
            rel_l2(&[1.0, 2.0], &[0.0, 0.0]),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(matches!(
            rel_l1(&[1.0, 2.0], &[0.0, 0.0]),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(matches!(r2(&[1.0, 2.0], &[3.0, 3.0]), Err(Error::UndefinedMetric(_))));
        assert!(mse(&[], &[]).is_err());
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn squared_and_absolute_error_ordering() {
        // equal residual magnitudes: mse = mae²
        let m = Metrics::compute(&[2.0, 1.0, 4.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m.mse, m.mae * m.mae);
        // unequal residuals (0, 2): mse = 2 > mae² = 1
        let m = Metrics::compute(&[1.0, 4.0], &[1.0, 2.0]).unwrap();
        assert!(m.mse > m.mae * m.mae);
        // mse and mae themselves are not ordered: residuals below one give mse < mae
        let m = Metrics::compute(&[1.0, 2.5], &[1.0, 2.0]).unwrap();
        assert!(m.mse < m.mae);
    }

    #[test]
    fn vector_modes() {
        let y = Array::matrix(3, 3, vec![3.0, 4.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
        let p = Array::matrix(3, 3, vec![0.0, 5.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 3.0]).unwrap();
        let mag = sample_metrics(&p, &y, VectorMode::Magnitude).unwrap();
        assert_eq!(mag.len(), 1);
        assert_eq!(mag[0].1.mae, 1.0 / 3.0);
        let comp = sample_metrics(&p, &y, VectorMode::Components).unwrap();
        assert_eq!(comp.len(), 3);
        assert_eq!(comp[0].1, Metrics::compute(&[0.0, 0.0, 0.0], &[3.0, 1.0, 0.0]).unwrap());
        assert!(sample_metrics(&p, &Array::zeros(&[3, 1]), VectorMode::Magnitude).is_err());
    }

    #[test]
    fn report_averages_samples() {
        let a = vec![(
            "value".to_string(),
            Metrics::compute(&[1.0, 2.0, 5.0], &[1.0, 2.0, 3.0]).unwrap(),
        )];
        let b = vec![(
            "value".to_string(),
            Metrics::compute(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(),
        )];
        let r = MetricReport::average(&[a.clone(), b]).unwrap();
        assert_eq!(r.sample_count, 2);
        let m = r.row("value").unwrap();
        assert_eq!(m.maxae, 1.0);
        assert_eq!(m.r2, 0.0);
        let csv = r.to_csv().unwrap();
        assert!(csv.starts_with("field,mse,mae,maxae,r2,rel_l2,rel_l1,samples\n"));
        assert!(r.to_string().contains("averaged over 2 samples"));
        let other = vec![("magnitude".to_string(), Metrics::default())];
        assert!(MetricReport::average(&[a, other]).is_err());
        assert!(MetricReport::average(&[]).is_err());
    }

    proptest! {
        #[test]
        fn relative_metrics_are_scale_invariant(
            vals in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 2..30),
            c in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0],
        ) {
            let p: Vec<Real> = vals.iter().map(|v| v.0 as Real).collect();
            let y: Vec<Real> = vals.iter().map(|v| v.1 as Real).collect();
            prop_assume!(y.iter().any(|v| v.abs() > 1e-3));
            let ps: Vec<Real> = p.iter().map(|v| v * c as Real).collect();
            let ys: Vec<Real> = y.iter().map(|v| v * c as Real).collect();
            prop_assert!((rel_l2(&ps, &ys).unwrap() - rel_l2(&p, &y).unwrap()).abs() < 1e-12);
            prop_assert!((rel_l1(&ps, &ys).unwrap() - rel_l1(&p, &y).unwrap()).abs() < 1e-12);
            let (m1, m2) = (mae(&p, &y).unwrap(), mse(&p, &y).unwrap());
            prop_assert!(maxae(&p, &y).unwrap() >= m1);
            prop_assert!(m2 >= m1 * m1 * (1.0 - 1e-12));
        }

        #[test]
        fn metrics_are_permutation_invariant(
            vals in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 2..30),
            rot in 0usize..30,
        ) {
            let p: Vec<Real> = vals.iter().map(|v| v.0 as Real).collect();
            let y: Vec<Real> = vals.iter().map(|v| v.1 as Real).collect();
            prop_assume!(y.iter().any(|v| (v - y[0]).abs() > 1e-3));
            let k = rot % p.len();
            let mut pr = p.clone();
            let mut yr = y.clone();
            pr.rotate_left(k);
            yr.rotate_left(k);
            let a = Metrics::compute(&p, &y).unwrap();
            let b = Metrics::compute(&pr, &yr).unwrap();
            for (u, v) in a.values().iter().zip(b.values()) {
                prop_assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()));
            }
            prop_assert_eq!(a.maxae, b.maxae);
        }
    }
}
