use gafield_demo::{flow_view, pooling_view, MicroSession};

#[test]
fn pooling_partitions_the_cloud() {
    let v = pooling_view(2.0, 0.4, 500).unwrap();
    assert_eq!(v.points.len(), 500);
    assert_eq!(v.cluster.len(), 500);
    let m = v.centroids.len();
    assert!(v.cluster.iter().all(|&c| c < m));
    let mut counts = vec![0; m];
    for &c in &v.cluster {
        counts[c] += 1;
    }
    assert!(counts.iter().all(|&n| n > 0));
    assert_eq!(v.max_members, *counts.iter().max().unwrap());
    // coarser grids never produce more cells
    assert!(pooling_view(2.0, 0.8, 500).unwrap().centroids.len() <= m);
    assert!(pooling_view(2.0, 0.4, 3).is_err());
    assert!(pooling_view(9.0, 0.4, 500).is_err());
}

#[test]
fn sphere_flow_has_stagnation_and_no_pressure_drag() {
    let v = flow_view(1.0, 30.0, 30.0, 4000, 1).unwrap();
    let max = v.cp.iter().cloned().fold(f64::MIN, f64::max);
    let min = v.cp.iter().cloned().fold(f64::MAX, f64::min);
    assert!((max - 1.0).abs() < 0.01, "{max}");
    assert!((min + 1.25).abs() < 0.01, "{min}");
    let scale = 1.225 * 450.0 * std::f64::consts::PI;
    assert!(v.total_pressure.abs() < 0.02 * scale);
    assert!(v.total_shear > 0.0);
    assert_eq!(v.parts.len(), 3);
    assert!((v.inflow[0] - 30f64.to_radians().cos()).abs() < 1e-15);
}

#[test]
fn micro_session_reduces_error() {
    let mut s = MicroSession::new(300, 60, 1e-2, 0).unwrap();
    let first = s.advance(1).unwrap();
    assert_eq!(first.epoch, 1);
    assert_eq!(first.prediction.len(), first.truth.len());
    let last = s.advance(100).unwrap();
    assert_eq!(last.epoch, 60);
    assert!(last.rel_l2 < first.rel_l2, "{} -> {}", first.rel_l2, last.rel_l2);
    // past the schedule nothing changes
    let after = s.advance(5).unwrap();
    assert_eq!(after.prediction, last.prediction);
    assert!(after.loss.is_nan());
}
