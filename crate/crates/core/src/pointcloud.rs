//! Point-set container, grid pooling with fine→coarse index maps, and neighborhood queries.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Array, Real, Segments};

pub type Point = [Real; 3];

const UNIT_TOL: Real = 1e-6;

/// Positions plus aligned per-point channels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    positions: Vec<Point>,
    features: Array,
    normals: Option<Vec<Point>>,
    areas: Option<Vec<Real>>,
    parts: Option<Vec<u32>>,
    targets: Option<Array>,
    surface_flags: Option<Vec<bool>>,
    sdf: Option<Vec<Real>>,
}

impl PointCloud {
    /// A cloud with positions only (zero-width features).
    pub fn new(positions: Vec<Point>) -> Result<Self> {
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::cloud("non-finite position"));
        }
        let n = positions.len();
        Ok(Self {
            positions,
            features: Array::zeros(&[n, 0]),
            normals: None,
            areas: None,
            parts: None,
            targets: None,
            surface_flags: None,
            sdf: None,
        })
    }

    fn check_rows(&self, what: &str, rows: usize) -> Result<()> {
        if rows != self.len() {
            return Err(Error::cloud(format!(
                "{what} has {rows} rows, cloud has {} points",
                self.len()
            )));
        }
        Ok(())
    }

    pub fn with_features(mut self, features: Array) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::cloud("features must be a matrix"));
        }
        self.check_rows("features", features.rows())?;
        self.features = features;
        Ok(self)
    }

    pub fn with_normals(mut self, normals: Vec<Point>) -> Result<Self> {
        self.check_rows("normals", normals.len())?;
        for (i, n) in normals.iter().enumerate() {
            if (norm(n) - 1.0).abs() > UNIT_TOL {
                return Err(Error::cloud(format!("normal {i} is not unit length")));
            }
        }
        self.normals = Some(normals);
        Ok(self)
    }

    pub fn with_areas(mut self, areas: Vec<Real>) -> Result<Self> {
        self.check_rows("areas", areas.len())?;
        if let Some(i) = areas.iter().position(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::cloud(format!("area {i} is not strictly positive")));
        }
        self.areas = Some(areas);
        Ok(self)
    }

    pub fn with_parts(mut self, parts: Vec<u32>) -> Result<Self> {
        self.check_rows("parts", parts.len())?;
        self.parts = Some(parts);
        Ok(self)
    }

    pub fn with_targets(mut self, targets: Array) -> Result<Self> {
        if targets.rank() != 2 {
            return Err(Error::cloud("targets must be a matrix"));
        }
        self.check_rows("targets", targets.rows())?;
        self.targets = Some(targets);
        Ok(self)
    }

    pub fn with_surface_flags(mut self, flags: Vec<bool>) -> Result<Self> {
        self.check_rows("surface flags", flags.len())?;
        self.surface_flags = Some(flags);
        Ok(self)
    }

    pub fn with_sdf(mut self, sdf: Vec<Real>) -> Result<Self> {
        self.check_rows("sdf", sdf.len())?;
        self.sdf = Some(sdf);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Point] {
        &self.positions
    }

    pub fn features(&self) -> &Array {
        &self.features
    }

    pub fn feature_width(&self) -> usize {
        self.features.cols()
    }

    pub fn normals(&self) -> Option<&[Point]> {
        self.normals.as_deref()
    }

    pub fn areas(&self) -> Option<&[Real]> {
        self.areas.as_deref()
    }

    pub fn parts(&self) -> Option<&[u32]> {
        self.parts.as_deref()
    }

    pub fn targets(&self) -> Option<&Array> {
        self.targets.as_ref()
    }

    pub fn surface_flags(&self) -> Option<&[bool]> {
        self.surface_flags.as_deref()
    }

    pub fn sdf(&self) -> Option<&[Real]> {
        self.sdf.as_deref()
    }

    pub fn take_targets(&mut self) -> Option<Array> {
        self.targets.take()
    }

    /// A new cloud made of rows `indices` (repeats allowed), every channel kept aligned.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::cloud(format!("index {bad} out of range")));
        }
        let rows = |a: &Array| -> Array {
            let c = a.cols();
            let mut data = Vec::with_capacity(indices.len() * c);
            for &i in indices {
                data.extend_from_slice(a.row(i));
            }
            Array::new(vec![indices.len(), c], data).expect("row selection keeps width")
        };
        let pick = |v: &[Point]| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Ok(Self {
            positions: pick(&self.positions),
            features: rows(&self.features),
            normals: self.normals.as_deref().map(pick),
            areas: self.areas.as_ref().map(|a| indices.iter().map(|&i| a[i]).collect()),
            parts: self.parts.as_ref().map(|a| indices.iter().map(|&i| a[i]).collect()),
            targets: self.targets.as_ref().map(rows),
            surface_flags: self
                .surface_flags
                .as_ref()
                .map(|a| indices.iter().map(|&i| a[i]).collect()),
            sdf: self.sdf.as_ref().map(|a| indices.iter().map(|&i| a[i]).collect()),
        })
    }

    /// Axis-wise minimum of the bounding box.
    pub fn bbox_min(&self) -> Option<Point> {
        bbox_min(&self.positions)
    }

    /// Centroid accumulated in canonical point order (independent of storage order).
    pub fn centroid(&self) -> Option<Point> {
        if self.is_empty() {
            return None;
        }
        let order = canonical_order(&self.positions, Some(&self.features));
        let mut acc = [0.0; 3];
        for &i in &order {
            for (a, x) in acc.iter_mut().zip(self.positions[i]) {
                *a += x;
            }
        }
        let n = self.len() as Real;
        Some(acc.map(|a| a / n))
    }
}

pub fn norm(v: &Point) -> Real {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub fn dot(a: &Point, b: &Point) -> Real {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn bbox_min(points: &[Point]) -> Option<Point> {
    let first = *points.first()?;
    Some(
        points
            .iter()
            .fold(first, |m, p| [m[0].min(p[0]), m[1].min(p[1]), m[2].min(p[2])]),
    )
}

/// Integer cell of `x` in a grid of side `size` anchored at `origin`.
pub fn cell_key(x: &Point, origin: &Point, size: Real) -> [i64; 3] {
    [0, 1, 2].map(|a| ((x[a] - origin[a]) / size).floor() as i64)
}

fn cmp_points(a: &Point, b: &Point) -> Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}

fn cmp_rows(a: &[Real], b: &[Real]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => {}
            o => return o,
        }
    }
    Ordering::Equal
}

/// Order of points by (position, feature row, index).
///
/// Two points that tie on position and features carry identical values, so
/// any reduction walked in this order gives the same bits for every
/// permutation of the input.
pub fn canonical_order(positions: &[Point], features: Option<&Array>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..positions.len()).collect();
    order.sort_by(|&i, &j| {
        cmp_points(&positions[i], &positions[j])
            .then_with(|| match features {
                Some(f) if f.cols() > 0 => cmp_rows(f.row(i), f.row(j)),
                _ => Ordering::Equal,
            })
            .then(i.cmp(&j))
    });
    order
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureReduce {
    Mean,
    #[default]
    Max,
}

/// Cell assignment of a point set: occupied cells in ascending key order, members in canonical order.
#[derive(Clone, Debug)]
pub struct GridClusters {
    pub segments: Arc<Segments>,
    pub keys: Vec<[i64; 3]>,
    pub origin: Point,
    pub size: Real,
}

impl GridClusters {
    pub fn index_map(&self) -> &[usize] {
        self.segments.index_map()
    }

    pub fn num_clusters(&self) -> usize {
        self.segments.num_groups()
    }

    /// Member-mean positions, accumulated in member order.
    pub fn centroids(&self, positions: &[Point]) -> Vec<Point> {
        self.segments
            .groups()
            .map(|members| {
                let mut acc = [0.0; 3];
                for &i in members {
                    for (a, x) in acc.iter_mut().zip(positions[i]) {
                        *a += x;
                    }
                }
                let n = members.len() as Real;
                acc.map(|a| a / n)
            })
            .collect()
    }
}

/// Buckets points into cubic cells of side `size` anchored at `origin`.
pub fn grid_clusters(positions: &[Point], features: Option<&Array>, size: Real, origin: Point) -> Result<GridClusters> {
    if !(size > 0.0 && size.is_finite()) {
        return Err(Error::arg(format!("grid size must be positive, got {size}")));
    }
    if positions.is_empty() {
        return Err(Error::cloud("cannot pool an empty cloud"));
    }
    let mut cells: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for i in canonical_order(positions, features) {
        cells.entry(cell_key(&positions[i], &origin, size)).or_default().push(i);
    }
    let keys = cells.keys().copied().collect();
    let groups: Vec<Vec<usize>> = cells.into_values().collect();
    Ok(GridClusters {
        segments: Arc::new(Segments::from_groups(&groups)?),
        keys,
        origin,
        size,
    })
}

/// Downsampled cloud plus the total, surjective fine→coarse map.
#[derive(Clone, Debug)]
pub struct PoolResult {
    pub coarse: PointCloud,
    pub clusters: GridClusters,
}

impl PoolResult {
    pub fn index_map(&self) -> &[usize] {
        self.clusters.index_map()
    }

    pub fn grid_size(&self) -> Real {
        self.clusters.size
    }

    pub fn origin(&self) -> Point {
        self.clusters.origin
    }

    pub fn segments(&self) -> &Arc<Segments> {
        &self.clusters.segments
    }
}

/// Grid pooling with the origin at the cloud's bounding-box minimum.
pub fn grid_pool(pc: &PointCloud, size: Real, reduce: FeatureReduce) -> Result<PoolResult> {
    let origin = pc
        .bbox_min()
        .ok_or_else(|| Error::cloud("cannot pool an empty cloud"))?;
    grid_pool_with_origin(pc, size, origin, reduce)
}

/// Grid pooling on an explicit grid origin.
///
/// The coarse cloud carries centroid positions and reduced features; other
/// optional channels are not carried over.
pub fn grid_pool_with_origin(pc: &PointCloud, size: Real, origin: Point, reduce: FeatureReduce) -> Result<PoolResult> {
    let clusters = grid_clusters(pc.positions(), Some(pc.features()), size, origin)?;
    let positions = clusters.centroids(pc.positions());
    let f = pc.features();
    let c = f.cols();
    let mut data = Vec::with_capacity(positions.len() * c);
    for members in clusters.segments.groups() {
        for j in 0..c {
            let v = match reduce {
                FeatureReduce::Mean => members.iter().map(|&i| f.get(i, j)).sum::<Real>() / members.len() as Real,
                FeatureReduce::Max => members.iter().map(|&i| f.get(i, j)).fold(Real::NEG_INFINITY, Real::max),
            };
            data.push(v);
        }
    }
    let m = positions.len();
    let coarse = PointCloud::new(positions)?.with_features(Array::new(vec![m, c], data)?)?;
    Ok(PoolResult { coarse, clusters })
}

/// `out[i] = coarse[map[i]]`.
pub fn unpool(coarse: &Array, map: &[usize]) -> Result<Array> {
    let m = coarse.rows();
    let c = coarse.cols();
    let mut data = Vec::with_capacity(map.len() * c);
    for &j in map {
        if j >= m {
            return Err(Error::arg(format!("index {j} out of range for {m} coarse points")));
        }
        data.extend_from_slice(coarse.row(j));
    }
    Ok(Array::new(vec![map.len(), c], data)?)
}

/// All fine indices sharing point `i`'s cluster, `i` included, in canonical order.
pub fn cluster_neighborhood(pr: &PoolResult, i: usize) -> Result<Vec<usize>> {
    let n = pr.index_map().len();
    if i >= n {
        return Err(Error::arg(format!("index {i} out of range for {n} points")));
    }
    Ok(pr.segments().group(pr.index_map()[i]).to_vec())
}

/// `k` nearest references per query (Euclidean), ties to the lower index.
pub fn knn(queries: &[Point], refs: &[Point], k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::arg("k must be at least 1"));
    }
    if k > refs.len() {
        return Err(Error::arg(format!("k = {k} exceeds {} references", refs.len())));
    }
    Ok(queries
        .iter()
        .map(|q| {
            let mut d: Vec<(Real, usize)> = refs
                .iter()
                .enumerate()
                .map(|(j, r)| {
                    let v = [q[0] - r[0], q[1] - r[1], q[2] - r[2]];
                    (dot(&v, &v), j)
                })
                .collect();
            let cmp = |a: &(Real, usize), b: &(Real, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < d.len() {
                d.select_nth_unstable_by(k - 1, cmp);
                d.truncate(k);
            }
            d.sort_by(cmp);
            d.into_iter().map(|(_, j)| j).collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, width: usize) -> PointCloud {
        let pos: Vec<Point> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let f = Array::new(
            vec![n, width],
            (0..n * width).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        PointCloud::new(pos).unwrap().with_features(f).unwrap()
    }

    /// Brute force: integer keys, group by key, clusters ordered by key.
    fn oracle_groups(pc: &PointCloud, size: Real) -> Vec<Vec<usize>> {
        let origin = pc.bbox_min().unwrap();
        let keys: Vec<[i64; 3]> = pc
            .positions()
            .iter()
            .map(|p| {
                [
                    ((p[0] - origin[0]) / size).floor() as i64,
                    ((p[1] - origin[1]) / size).floor() as i64,
                    ((p[2] - origin[2]) / size).floor() as i64,
                ]
            })
            .collect();
        let mut distinct = keys.clone();
        distinct.sort();
        distinct.dedup();
        distinct
            .iter()
            .map(|k| (0..pc.len()).filter(|&i| keys[i] == *k).collect())
            .collect()
    }

    #[test]
    fn single_cell_pool() {
        let pc = PointCloud::new(vec![[0., 0., 0.], [1., 0., 0.], [0., 2., 0.], [1., 2., 4.]]).unwrap();
        let pr = grid_pool(&pc, 10.0, FeatureReduce::Mean).unwrap();
        assert_eq!(pr.coarse.len(), 1);
        assert_eq!(pr.index_map(), &[0, 0, 0, 0]);
        assert_eq!(pr.coarse.positions()[0], [0.5, 1.0, 1.0]);
        let nb = cluster_neighborhood(&pr, 2).unwrap();
        let mut sorted = nb.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
    }

    #[test]
    fn one_point_per_cell_is_bijection() {
        let pc = PointCloud::new(vec![[0., 0., 0.], [1., 0., 0.], [0., 1., 0.]]).unwrap();
        let pr = grid_pool(&pc, 0.5, FeatureReduce::Max).unwrap();
        assert_eq!(pr.coarse.len(), 3);
        let mut seen = pr.index_map().to_vec();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2]);
        for i in 0..3 {
            assert_eq!(cluster_neighborhood(&pr, i).unwrap(), vec![i]);
        }
    }

    #[test]
    fn pool_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pc = random_cloud(&mut rng, 1000, 2);
        let pr = grid_pool(&pc, 0.25, FeatureReduce::Mean).unwrap();
        let oracle = oracle_groups(&pc, 0.25);
        assert_eq!(pr.coarse.len(), oracle.len());
        for (g, expect) in oracle.iter().enumerate() {
            let mut got = pr.segments().group(g).to_vec();
            got.sort();
            assert_eq!(&got, expect);
        }
    }

    #[test]
    fn pool_errors() {
        let pc = PointCloud::new(vec![[0., 0., 0.]]).unwrap();
        assert!(grid_pool(&pc, 0.0, FeatureReduce::Max).is_err());
        assert!(grid_pool(&pc, -1.0, FeatureReduce::Max).is_err());
        let empty = PointCloud::new(vec![]).unwrap();
        assert!(grid_pool(&empty, 1.0, FeatureReduce::Max).is_err());
        // degenerate single point pools to itself
        let pr = grid_pool(&pc, 0.1, FeatureReduce::Max).unwrap();
        assert_eq!(pr.coarse.positions(), pc.positions());
    }

    #[test]
    fn unpool_examples() {
        let c = Array::matrix(1, 1, vec![7.0]).unwrap();
        let u = unpool(&c, &[0, 0, 0]).unwrap();
        assert_eq!(u.data(), &[7., 7., 7.]);
        let c = Array::matrix(3, 1, vec![1., 2., 3.]).unwrap();
        assert_eq!(unpool(&c, &[2, 0, 1]).unwrap().data(), &[3., 1., 2.]);
        assert!(unpool(&c, &[3]).is_err());
    }

    #[test]
    fn unpooled_positions_are_cluster_centroids() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pc = random_cloud(&mut rng, 300, 0);
        let pr = grid_pool(&pc, 0.3, FeatureReduce::Mean).unwrap();
        let rows: Vec<Vec<Real>> = pr.coarse.positions().iter().map(|p| p.to_vec()).collect();
        let up = unpool(&Array::from_rows(&rows).unwrap(), pr.index_map()).unwrap();
        let groups = oracle_groups(&pc, 0.3);
        for members in groups {
            let mut c = [0.0; 3];
            for &i in &members {
                for a in 0..3 {
                    c[a] += pc.positions()[i][a] / members.len() as Real;
                }
            }
            for &i in &members {
                for a in 0..3 {
                    assert!((up.get(i, a) - c[a]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn neighborhood_matches_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pc = random_cloud(&mut rng, 200, 1);
        let pr = grid_pool(&pc, 0.4, FeatureReduce::Max).unwrap();
        let map = pr.index_map();
        for i in 0..pc.len() {
            let mut got = cluster_neighborhood(&pr, i).unwrap();
            got.sort();
            let expect: Vec<usize> = (0..pc.len()).filter(|&j| map[j] == map[i]).collect();
            assert_eq!(got, expect);
            assert!(got.contains(&i));
        }
        assert!(cluster_neighborhood(&pr, pc.len()).is_err());
    }

    #[test]
    fn max_and_mean_reduction() {
        let pc = PointCloud::new(vec![[0., 0., 0.], [0.1, 0., 0.]])
            .unwrap()
            .with_features(Array::matrix(2, 2, vec![1., -4., 3., 2.]).unwrap())
            .unwrap();
        let mx = grid_pool(&pc, 1.0, FeatureReduce::Max).unwrap();
        assert_eq!(mx.coarse.features().data(), &[3., 2.]);
        let mn = grid_pool(&pc, 1.0, FeatureReduce::Mean).unwrap();
        assert_eq!(mn.coarse.features().data(), &[2., -1.]);
    }

    #[test]
    fn composition_with_shared_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let pc = random_cloud(&mut rng, 800, 0);
        let origin = pc.bbox_min().unwrap();
        let s = 0.1;
        let p1 = grid_pool_with_origin(&pc, s, origin, FeatureReduce::Mean).unwrap();
        let p2 = grid_pool_with_origin(&p1.coarse, 2.0 * s, origin, FeatureReduce::Mean).unwrap();
        for (i, x) in pc.positions().iter().enumerate() {
            let c2 = p2.index_map()[p1.index_map()[i]];
            assert_eq!(p2.clusters.keys[c2], cell_key(x, &origin, 2.0 * s));
        }
    }

    #[test]
    fn mean_pool_of_unpooled_field_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let pc = random_cloud(&mut rng, 400, 3);
        let pr = grid_pool(&pc, 0.3, FeatureReduce::Mean).unwrap();
        let up = unpool(pr.coarse.features(), pr.index_map()).unwrap();
        let again = PointCloud::new(pc.positions().to_vec())
            .unwrap()
            .with_features(up)
            .unwrap();
        let pr2 = grid_pool(&again, 0.3, FeatureReduce::Mean).unwrap();
        // identical values averaged: exact up to the division of a repeated sum
        for (a, b) in pr2.coarse.features().data().iter().zip(pr.coarse.features().data()) {
            assert!((a - b).abs() <= 4.0 * Real::EPSILON * b.abs());
        }
    }

    #[test]
    fn knn_examples_and_oracle() {
        let refs = vec![[0., 0., 0.], [1., 0., 0.], [2., 0., 0.], [3., 0., 0.]];
        assert_eq!(knn(&[[2., 0., 0.]], &refs, 1).unwrap(), vec![vec![2]]);
        assert_eq!(knn(&[[0.9, 0., 0.]], &refs, 2).unwrap(), vec![vec![1, 0]]);
        // equidistant: lower index first
        assert_eq!(knn(&[[1.5, 0., 0.]], &refs, 2).unwrap(), vec![vec![1, 2]]);
        assert!(knn(&[[0., 0., 0.]], &refs, 0).is_err());
        assert!(knn(&[[0., 0., 0.]], &refs, 5).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let q: Vec<Point> = (0..30).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let r: Vec<Point> = (0..50).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let got = knn(&q, &r, 5).unwrap();
        for (qi, row) in got.iter().enumerate() {
            let mut all: Vec<(Real, usize)> = r
                .iter()
                .enumerate()
                .map(|(j, p)| {
                    let d: Real = (0..3).map(|a| (q[qi][a] - p[a]).powi(2)).sum();
                    (d, j)
                })
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let expect: Vec<usize> = all[..5].iter().map(|x| x.1).collect();
            assert_eq!(row, &expect);
        }
    }

    #[test]
    fn cloud_invariants_enforced() {
        let pc = PointCloud::new(vec![[0., 0., 0.], [1., 1., 1.]]).unwrap();
        assert!(pc.clone().with_normals(vec![[1., 0., 0.], [0., 2., 0.]]).is_err());
        assert!(pc.clone().with_areas(vec![1.0, 0.0]).is_err());
        assert!(pc.clone().with_parts(vec![1]).is_err());
        assert!(pc.clone().with_features(Array::zeros(&[3, 2])).is_err());
        assert!(pc.with_normals(vec![[1., 0., 0.], [0., 0., -1.]]).is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn pool_is_permutation_equivariant(seed in 0u64..1000, n in 1usize..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pc = random_cloud(&mut rng, n, 2);
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let shuffled = pc.select(&perm).unwrap();
            let a = grid_pool(&pc, 0.2, FeatureReduce::Max).unwrap();
            let b = grid_pool(&shuffled, 0.2, FeatureReduce::Max).unwrap();
            // coarse clouds identical bit for bit (key order, canonical member order)
            prop_assert_eq!(&a.coarse, &b.coarse);
            for (k, &src) in perm.iter().enumerate() {
                prop_assert_eq!(b.index_map()[k], a.index_map()[src]);
            }
        }
    }
}
