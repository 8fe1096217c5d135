//! Uniform empirical measures stored as `d × N` coordinate matrices.
//!
//! A cloud of `N` points in `R^d` stands for the measure `(1/N) Σ δ_{x_j}`.
//! Column `j` is point `x_j`. Two clouds that differ only by a column
//! permutation represent the same measure; [`PointCloud::canonical_form`]
//! gives an order-independent view for comparisons.

use std::cmp::Ordering;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    coords: Array2<f64>,
}

impl PointCloud {
    /// Wraps a `d × N` matrix. Rejects empty shapes and non-finite entries.
    pub fn new(coords: Array2<f64>) -> Result<Self> {
        let (d, n) = coords.dim();
        if d == 0 || n == 0 {
            return Err(Error::shape(format!("point cloud must be non-empty, got {d}x{n}")));
        }
        if let Some(bad) = coords.iter().find(|v| !v.is_finite()) {
            return Err(Error::input(format!("point cloud contains non-finite value {bad}")));
        }
        Ok(Self { coords })
    }

    /// Builds a cloud from a list of points, each of length `d`.
    pub fn from_points<P: AsRef<[f64]>>(points: &[P]) -> Result<Self> {
        let n = points.len();
        let d = points.first().map(|p| p.as_ref().len()).unwrap_or(0);
        let mut coords = Array2::zeros((d, n));
        for (j, p) in points.iter().enumerate() {
            let p = p.as_ref();
            if p.len() != d {
                return Err(Error::shape(format!(
                    "point {j} has dimension {}, expected {d}",
                    p.len()
                )));
            }
            for (i, &v) in p.iter().enumerate() {
                coords[[i, j]] = v;
            }
        }
        Self::new(coords)
    }

    /// Builds a cloud from row-major `d × n` data (all first coordinates, then
    /// all second coordinates, ...).
    pub fn from_row_major(d: usize, n: usize, data: Vec<f64>) -> Result<Self> {
        let coords = Array2::from_shape_vec((d, n), data)
            .map_err(|e| Error::shape(format!("cannot shape {d}x{n} cloud: {e}")))?;
        Self::new(coords)
    }

    /// Skips validation; callers guarantee a non-empty finite matrix.
    pub(crate) fn from_array_unchecked(coords: Array2<f64>) -> Self {
        debug_assert!(coords.nrows() > 0 && coords.ncols() > 0);
        Self { coords }
    }

    pub fn dim(&self) -> usize {
        self.coords.nrows()
    }

    pub fn count(&self) -> usize {
        self.coords.ncols()
    }

    pub fn coords(&self) -> ArrayView2<'_, f64> {
        self.coords.view()
    }

    pub fn point(&self, j: usize) -> ArrayView1<'_, f64> {
        self.coords.column(j)
    }

    pub fn into_array(self) -> Array2<f64> {
        self.coords
    }

    /// Coordinates in row-major order, as stored on disk.
    pub fn to_row_major(&self) -> Vec<f64> {
        self.coords.iter().copied().collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        self.coords.mean_axis(Axis(1)).expect("cloud is non-empty").to_vec()
    }

    /// Points sorted lexicographically; equal for clouds that represent the
    /// same measure.
    pub fn canonical_form(&self) -> Vec<Vec<f64>> {
        let mut pts: Vec<Vec<f64>> = (0..self.count()).map(|j| self.point(j).to_vec()).collect();
        pts.sort_by(|a, b| lex_cmp(a, b));
        pts
    }

    /// Equality as measures: same multiset of points within `tol` per entry.
    pub fn approx_eq_unordered(&self, other: &PointCloud, tol: f64) -> bool {
        if self.dim() != other.dim() || self.count() != other.count() {
            return false;
        }
        self.canonical_form()
            .iter()
            .zip(other.canonical_form().iter())
            .all(|(a, b)| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol))
    }

    /// Smallest distance between two distinct columns (infinite for `N = 1`).
    pub fn min_pairwise_gap(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.count() {
            for j in (i + 1)..self.count() {
                let d2: f64 = self
                    .point(i)
                    .iter()
                    .zip(self.point(j).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                best = best.min(d2.sqrt());
            }
        }
        best
    }
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

/// A bijection of `0..N`. Applied to a cloud, output column `i` is input
/// column `map[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Permutation {
    map: Vec<usize>,
}

impl Permutation {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let n = map.len();
        let mut seen = vec![false; n];
        for &m in &map {
            if m >= n || seen[m] {
                return Err(Error::input(format!("not a permutation of 0..{n}: {map:?}")));
            }
            seen[m] = true;
        }
        Ok(Self { map })
    }

    pub(crate) fn from_vec_unchecked(map: Vec<usize>) -> Self {
        debug_assert!(Permutation::new(map.clone()).is_ok());
        Self { map }
    }

    pub fn identity(n: usize) -> Self {
        Self { map: (0..n).collect() }
    }

    pub fn reversed(n: usize) -> Self {
        Self {
            map: (0..n).rev().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(i, &m)| i == m)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.map
    }

    pub fn get(&self, i: usize) -> usize {
        self.map[i]
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.map.len()];
        for (i, &m) in self.map.iter().enumerate() {
            inv[m] = i;
        }
        Self { map: inv }
    }

    /// Uniformly random permutation.
    pub fn random<R: rand::Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        use rand::seq::SliceRandom;
        let mut map: Vec<usize> = (0..n).collect();
        map.shuffle(rng);
        Self { map }
    }
}

/// A batch of clouds sharing one ambient dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaBatch {
    clouds: Vec<PointCloud>,
}

impl MetaBatch {
    pub fn new(clouds: Vec<PointCloud>) -> Result<Self> {
        let Some(first) = clouds.first() else {
            return Err(Error::input("meta batch must contain at least one cloud"));
        };
        let d = first.dim();
        if let Some((b, c)) = clouds.iter().enumerate().find(|(_, c)| c.dim() != d) {
            return Err(Error::shape(format!(
                "cloud {b} has dimension {}, batch dimension is {d}",
                c.dim()
            )));
        }
        Ok(Self { clouds })
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.clouds[0].dim()
    }

    pub fn clouds(&self) -> &[PointCloud] {
        &self.clouds
    }

    pub fn get(&self, i: usize) -> &PointCloud {
        &self.clouds[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, PointCloud> {
        self.clouds.iter()
    }

    pub fn into_clouds(self) -> Vec<PointCloud> {
        self.clouds
    }

    /// Common point count, if every cloud has the same one.
    pub fn uniform_count(&self) -> Option<usize> {
        let n = self.clouds[0].count();
        self.clouds.iter().all(|c| c.count() == n).then_some(n)
    }
}

fn check_same_shape(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.dim() != b.dim() || a.count() != b.count() {
        return Err(Error::shape(format!(
            "clouds have shapes {}x{} and {}x{}",
            a.dim(),
            a.count(),
            b.dim(),
            b.count()
        )));
    }
    Ok(())
}

/// Column-wise linear interpolation `(1 - t) a_j + t b_j`.
pub fn interpolate(a: &PointCloud, b: &PointCloud, t: f64) -> Result<PointCloud> {
    check_same_shape(a, b)?;
    let mut out = a.coords.clone();
    ndarray::Zip::from(&mut out)
        .and(&b.coords)
        .for_each(|x, &y| *x = (1.0 - t) * *x + t * y);
    Ok(PointCloud::from_array_unchecked(out))
}

pub fn apply_permutation(p: &Permutation, c: &PointCloud) -> Result<PointCloud> {
    if p.len() != c.count() {
        return Err(Error::shape(format!(
            "permutation of size {} applied to cloud of {} points",
            p.len(),
            c.count()
        )));
    }
    Ok(PointCloud::from_array_unchecked(c.coords.select(Axis(1), p.as_slice())))
}

/// Matrix of squared Euclidean distances, `C[i, j] = ‖a_i - b_j‖²`.
pub fn squared_euclidean_cost(a: &PointCloud, b: &PointCloud) -> Result<Array2<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!(
            "cost between clouds of dimension {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let (d, na, nb) = (a.dim(), a.count(), b.count());
    let mut cost = Array2::zeros((na, nb));
    let ac = a.coords();
    let bc = b.coords();
    for i in 0..na {
        for j in 0..nb {
            let mut s = 0.0;
            for k in 0..d {
                let diff = ac[[k, i]] - bc[[k, j]];
                s += diff * diff;
            }
            cost[[i, j]] = s;
        }
    }
    Ok(cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn random_cloud(d: usize, n: usize, seed: u64) -> PointCloud {
        let mut rng = seed::rng(seed);
        let data = (0..d * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        PointCloud::from_row_major(d, n, data).unwrap()
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        assert!(PointCloud::from_points(&[[0.0, f64::NAN]]).is_err());
        assert!(PointCloud::new(Array2::zeros((2, 0))).is_err());
        assert!(Permutation::new(vec![0, 0]).is_err());
        assert!(Permutation::new(vec![1, 2]).is_err());
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let a = random_cloud(2, 5, 1);
        let b = random_cloud(2, 5, 2);
        assert_eq!(interpolate(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap(), b);

        let a = PointCloud::from_points(&[[0.0, 0.0]]).unwrap();
        let b = PointCloud::from_points(&[[2.0, 4.0]]).unwrap();
        let m = interpolate(&a, &b, 0.5).unwrap();
        assert_eq!(m.point(0).to_vec(), vec![1.0, 2.0]);

        let c = random_cloud(2, 4, 3);
        assert!(matches!(interpolate(&a, &c, 0.5), Err(Error::Shape(_))));
    }

    #[test]
    fn permutation_laws() {
        let c = random_cloud(3, 3, 4);
        assert_eq!(apply_permutation(&Permutation::identity(3), &c).unwrap(), c);
        let r = apply_permutation(&Permutation::reversed(3), &c).unwrap();
        for j in 0..3 {
            assert_eq!(r.point(j), c.point(2 - j));
        }
        let p = Permutation::new(vec![2, 0, 1]).unwrap();
        let back = apply_permutation(&p, &apply_permutation(&p.inverse(), &c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(r.approx_eq_unordered(&c, 0.0));
        assert!(apply_permutation(&Permutation::identity(2), &c).is_err());
    }

    #[test]
    fn cost_matrix_examples() {
        let a = PointCloud::from_points(&[[0.0, 0.0], [1.0, 0.0]]).unwrap();
        let c = squared_euclidean_cost(&a, &a).unwrap();
        assert_eq!(c, ndarray::array![[0.0, 1.0], [1.0, 0.0]]);

        let a = PointCloud::from_points(&[[0.0, 0.0]]).unwrap();
        let b = PointCloud::from_points(&[[3.0, 4.0]]).unwrap();
        assert_eq!(squared_euclidean_cost(&a, &b).unwrap()[[0, 0]], 25.0);

        let one_d = PointCloud::from_points(&[[1.0]]).unwrap();
        assert!(squared_euclidean_cost(&a, &one_d).is_err());
    }

    #[test]
    fn cost_matrix_matches_scalar_loop() {
        let a = random_cloud(3, 4, 10);
        let b = random_cloud(3, 5, 11);
        let c = squared_euclidean_cost(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += (a.coords()[[k, i]] - b.coords()[[k, j]]).powi(2);
                }
                assert!((c[[i, j]] - s).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn self_cost_is_symmetric_with_zero_diagonal() {
        let a = random_cloud(2, 9, 12);
        let c = squared_euclidean_cost(&a, &a).unwrap();
        for i in 0..9 {
            assert_eq!(c[[i, i]], 0.0);
            for j in 0..9 {
                assert!((c[[i, j]] - c[[j, i]]).abs() <= 1e-12);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn interpolation_is_pointwise_affine(seed in 0u64..1000, t in 0.0f64..=1.0) {
            let a = random_cloud(2, 6, seed);
            let b = random_cloud(2, 6, seed + 1);
            let m = interpolate(&a, &b, t).unwrap();
            for j in 0..6 {
                for k in 0..2 {
                    let expect = (1.0 - t) * a.coords()[[k, j]] + t * b.coords()[[k, j]];
                    proptest::prop_assert!((m.coords()[[k, j]] - expect).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn permutation_preserves_multiset(seed in 0u64..1000) {
            let c = random_cloud(2, 7, seed);
            let mut rng = seed::rng(seed);
            let p = Permutation::random(7, &mut rng);
            let pc = apply_permutation(&p, &c).unwrap();
            proptest::prop_assert_eq!(pc.canonical_form(), c.canonical_form());
        }
    }
}
