//! Monte Carlo sliced Wasserstein distance and sliced transport plans.
//!
//! Both clouds are projected onto random unit directions; in one dimension
//! optimal transport between uniform measures is the monotone (sorted)
//! matching. Distances average the 1D costs over directions, plans average
//! the 1D matchings lifted back to the original points.

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::measures::{Permutation, PointCloud};
use crate::ot::InnerPlan;
use crate::seed;

/// Default number of slices used by sliced couplings.
pub const DEFAULT_SLICES: usize = 8;

/// `L` unit vectors in `R^d`, stored as the rows of an `L × d` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionSet {
    vectors: Array2<f64>,
}

impl DirectionSet {
    /// Wraps explicit directions, normalizing each row.
    pub fn new(mut vectors: Array2<f64>) -> Result<Self> {
        if vectors.nrows() == 0 || vectors.ncols() == 0 {
            return Err(Error::shape("direction set must be non-empty"));
        }
        for mut row in vectors.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::input("direction vectors must be finite and nonzero"));
            }
            row /= norm;
        }
        Ok(Self { vectors })
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn count(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn direction(&self, l: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(l)
    }
}

fn draw_direction<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    loop {
        let mut norm2 = 0.0;
        for v in out.iter_mut() {
            *v = rng.sample(StandardNormal);
            norm2 += *v * *v;
        }
        if norm2 > 1e-300 {
            let norm = norm2.sqrt();
            out.iter_mut().for_each(|v| *v /= norm);
            return;
        }
    }
}

/// `count` i.i.d. directions, uniform on the sphere `S^{dim-1}`.
pub fn sample_directions(dim: usize, count: usize, seed: u64) -> DirectionSet {
    assert!(dim >= 1 && count >= 1, "need at least one direction in dimension >= 1");
    let mut rng = seed::rng(seed);
    let mut vectors = Array2::zeros((count, dim));
    for mut row in vectors.rows_mut() {
        draw_direction(&mut rng, row.as_slice_mut().expect("rows are contiguous"));
    }
    DirectionSet { vectors }
}

fn check(a: &PointCloud, b: &PointCloud, dim: usize) -> Result<()> {
    if a.dim() != b.dim() || a.count() != b.count() {
        return Err(Error::shape(format!(
            "sliced transport needs equal shapes, got {}x{} and {}x{}",
            a.dim(),
            a.count(),
            b.dim(),
            b.count()
        )));
    }
    if dim != a.dim() {
        return Err(Error::shape(format!(
            "directions live in dimension {dim}, clouds in {}",
            a.dim()
        )));
    }
    Ok(())
}

/// Reusable buffers for projecting and sorting.
struct Slicer {
    proj_a: Vec<f64>,
    proj_b: Vec<f64>,
    order_a: Vec<usize>,
    order_b: Vec<usize>,
}

impl Slicer {
    fn new(n: usize) -> Self {
        Self {
            proj_a: vec![0.0; n],
            proj_b: vec![0.0; n],
            order_a: (0..n).collect(),
            order_b: (0..n).collect(),
        }
    }

    fn project(&mut self, a: &PointCloud, b: &PointCloud, theta: &[f64]) {
        let (ac, bc) = (a.coords(), b.coords());
        for j in 0..a.count() {
            let mut pa = 0.0;
            let mut pb = 0.0;
            for (k, &t) in theta.iter().enumerate() {
                pa += t * ac[[k, j]];
                pb += t * bc[[k, j]];
            }
            self.proj_a[j] = pa;
            self.proj_b[j] = pb;
        }
    }

    /// 1D squared W₂ between the current projections.
    fn cost(&mut self) -> f64 {
        self.proj_a.sort_unstable_by(f64::total_cmp);
        self.proj_b.sort_unstable_by(f64::total_cmp);
        let n = self.proj_a.len() as f64;
        self.proj_a
            .iter()
            .zip(&self.proj_b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n
    }

    /// Monotone matching of the current projections, ties by point index.
    fn matching(&mut self) -> Vec<usize> {
        let n = self.proj_a.len();
        for (i, o) in self.order_a.iter_mut().enumerate() {
            *o = i;
        }
        for (i, o) in self.order_b.iter_mut().enumerate() {
            *o = i;
        }
        let (pa, pb) = (&self.proj_a, &self.proj_b);
        // Stable sorts keep index order among equal projections.
        self.order_a.sort_by(|&i, &j| pa[i].total_cmp(&pa[j]));
        self.order_b.sort_by(|&i, &j| pb[i].total_cmp(&pb[j]));
        let mut sigma = vec![0usize; n];
        for k in 0..n {
            sigma[self.order_a[k]] = self.order_b[k];
        }
        sigma
    }
}

/// Per-direction 1D squared Wasserstein costs.
pub fn sliced_costs(a: &PointCloud, b: &PointCloud, dirs: &DirectionSet) -> Result<Vec<f64>> {
    check(a, b, dirs.dim())?;
    let mut slicer = Slicer::new(a.count());
    Ok(dirs
        .vectors
        .rows()
        .into_iter()
        .map(|theta| {
            slicer.project(a, b, theta.as_slice().expect("rows are contiguous"));
            slicer.cost()
        })
        .collect())
}

/// Monte Carlo estimate of `SW₂²(a, b)` over the given directions.
pub fn sliced_w2(a: &PointCloud, b: &PointCloud, dirs: &DirectionSet) -> Result<f64> {
    let costs = sliced_costs(a, b, dirs)?;
    Ok(costs.iter().sum::<f64>() / costs.len() as f64)
}

/// Same estimate as `sliced_w2(a, b, &sample_directions(d, count, seed))`
/// without materializing the directions; for very large `count`.
pub fn sliced_w2_streaming(a: &PointCloud, b: &PointCloud, count: usize, seed: u64) -> Result<f64> {
    check(a, b, a.dim())?;
    assert!(count >= 1);
    let mut rng = seed::rng(seed);
    let mut slicer = Slicer::new(a.count());
    let mut theta = vec![0.0; a.dim()];
    let mut total = 0.0;
    for _ in 0..count {
        draw_direction(&mut rng, &mut theta);
        slicer.project(a, b, &theta);
        total += slicer.cost();
    }
    Ok(total / count as f64)
}

/// Average of the 1D monotone matchings along each direction.
///
/// Kept as a mixture of permutation plans; when every direction yields the
/// same matching the result is that permutation plan.
pub fn sliced_plan(a: &PointCloud, b: &PointCloud, dirs: &DirectionSet) -> Result<InnerPlan> {
    check(a, b, dirs.dim())?;
    let mut slicer = Slicer::new(a.count());
    let perms = dirs
        .vectors
        .rows()
        .into_iter()
        .map(|theta| {
            slicer.project(a, b, theta.as_slice().expect("rows are contiguous"));
            Permutation::from_vec_unchecked(slicer.matching())
        })
        .collect();
    InnerPlan::mixture(perms)
}
