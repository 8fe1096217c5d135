//! Chamfer and OT nearest-neighbour accuracy, and KDE grids for plots.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::measures::{MetaBatch, PointCloud};
use crate::ot::{wasserstein2, Solver};

/// Symmetric Chamfer distance with squared Euclidean terms, summed over both
/// clouds: `Σ_i min_j |a_i - b_j|² + Σ_j min_i |b_j - a_i|²`.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!(
            "chamfer between dimensions {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let (x, y) = (a.coords(), b.coords());
    let mut row_min = vec![f64::INFINITY; a.count()];
    let mut col_min = vec![f64::INFINITY; b.count()];
    for i in 0..a.count() {
        for j in 0..b.count() {
            let d: f64 = x
                .column(i)
                .iter()
                .zip(y.column(j))
                .map(|(p, q)| (p - q) * (p - q))
                .sum();
            row_min[i] = row_min[i].min(d);
            col_min[j] = col_min[j].min(d);
        }
    }
    Ok(row_min.iter().sum::<f64>() + col_min.iter().sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NnaMetric {
    Chamfer,
    Ot,
}

impl NnaMetric {
    pub fn as_str(&self) -> &'static str {
        match self {
            NnaMetric::Chamfer => "chamfer",
            NnaMetric::Ot => "ot",
        }
    }
}

impl fmt::Display for NnaMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NnaMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "chamfer" => Ok(NnaMetric::Chamfer),
            "ot" => Ok(NnaMetric::Ot),
            other => Err(Error::config(format!(
                "unknown metric '{other}' (expected chamfer or ot)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NnaReport {
    pub metric: NnaMetric,
    pub accuracy: f64,
    pub n_generated: usize,
    pub n_real: usize,
}

fn distance(a: &PointCloud, b: &PointCloud, metric: NnaMetric, solver: Solver) -> Result<f64> {
    match metric {
        NnaMetric::Chamfer => chamfer(a, b),
        NnaMetric::Ot => wasserstein2(a, b, solver).map(|(d, _)| d),
    }
}

/// Symmetric pairwise distance matrix with a zero diagonal.
pub fn distance_matrix(clouds: &[PointCloud], metric: NnaMetric, solver: Solver) -> Result<Array2<f64>> {
    let m = clouds.len();
    let rows = (0..m)
        .into_par_iter()
        .map(|i| {
            ((i + 1)..m)
                .map(|j| distance(&clouds[i], &clouds[j], metric, solver))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut d = Array2::zeros((m, m));
    for (i, row) in rows.into_iter().enumerate() {
        for (k, v) in row.into_iter().enumerate() {
            d[[i, i + 1 + k]] = v;
            d[[i + 1 + k, i]] = v;
        }
    }
    Ok(d)
}

/// Leave-one-out 1-NN accuracy over the pooled clouds (generated first, then
/// real). Each cloud is labelled by its nearest other cloud, ties going to
/// the lowest pooled index. 0.5 means the two sets are indistinguishable.
pub fn nna(generated: &MetaBatch, real: &MetaBatch, metric: NnaMetric, solver: Solver) -> Result<NnaReport> {
    let (g, r) = (generated.len(), real.len());
    if g < 2 || r < 2 {
        return Err(Error::input(format!(
            "nna needs at least 2 clouds per side, got {g} and {r}"
        )));
    }
    if generated.dim() != real.dim() {
        return Err(Error::shape(format!(
            "generated dimension {} differs from real dimension {}",
            generated.dim(),
            real.dim()
        )));
    }
    let pooled: Vec<PointCloud> = generated.iter().chain(real.iter()).cloned().collect();
    let d = distance_matrix(&pooled, metric, solver)?;
    let m = g + r;
    let correct = (0..m)
        .filter(|&i| {
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            for j in (0..m).filter(|&j| j != i) {
                if d[[i, j]] < best_d {
                    best_d = d[[i, j]];
                    best = j;
                }
            }
            (best < g) == (i < g)
        })
        .count();
    Ok(NnaReport {
        metric,
        accuracy: correct as f64 / m as f64,
        n_generated: g,
        n_real: r,
    })
}

/// Mean and standard deviation over repetitions, as one CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct NnaSummary {
    pub metric: NnaMetric,
    pub euler_steps: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub n: usize,
    pub seed: u64,
}

impl NnaSummary {
    /// Population standard deviation over `accuracies`.
    pub fn from_accuracies(metric: NnaMetric, euler_steps: usize, accuracies: &[f64], n: usize, seed: u64) -> Self {
        let k = accuracies.len().max(1) as f64;
        let mean = accuracies.iter().sum::<f64>() / k;
        let var = accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / k;
        Self {
            metric,
            euler_steps,
            accuracy_mean: mean,
            accuracy_std: var.sqrt(),
            n,
            seed,
        }
    }
}

pub fn write_nna_csv<W: Write>(mut out: W, rows: &[NnaSummary]) -> Result<()> {
    writeln!(out, "metric,euler_steps,accuracy_mean,accuracy_std,n,seed")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:.6},{:.6},{},{}",
            r.metric, r.euler_steps, r.accuracy_mean, r.accuracy_std, r.n, r.seed
        )?;
    }
    Ok(())
}

pub const KDE_RESOLUTION: usize = 64;
pub const KDE_PADDING: f64 = 0.15;

/// Gaussian KDE of a 2D cloud on a `resolution × resolution` grid of cell
/// centres over `[0, 1]²`; row 0 is the top (largest `y`).
///
/// The kernel is isotropic with standard deviation `h · s`, where
/// `h = 0.9 · N^{-1/6}` and `s` is the pooled standard deviation of the
/// cloud (1 if the cloud has no spread). The grid is laid out over the
/// domain padded by `padding_frac` per side, normalized there, and cropped.
pub fn kde_grid(c: &PointCloud, resolution: usize, padding_frac: f64) -> Result<Array2<f64>> {
    if c.dim() != 2 {
        return Err(Error::shape(format!(
            "kde_grid needs a 2D cloud, got dimension {}",
            c.dim()
        )));
    }
    if resolution == 0 || !(padding_frac >= 0.0) {
        return Err(Error::input("kde_grid needs resolution >= 1 and non-negative padding"));
    }
    let n = c.count();
    let h = 0.9 * (n as f64).powf(-1.0 / 6.0);
    let x = c.coords();
    let mean = c.mean();
    let var = (0..2)
        .map(|k| x.row(k).iter().map(|v| (v - mean[k]).powi(2)).sum::<f64>() / n as f64)
        .sum::<f64>()
        / 2.0;
    let spread = if var > 0.0 { var.sqrt() } else { 1.0 };
    let bw = h * spread;

    let pad = (padding_frac * resolution as f64).round() as usize;
    let full = resolution + 2 * pad;
    let cell = 1.0 / resolution as f64;
    let centre = |k: usize| (k as f64 - pad as f64 + 0.5) * cell;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * bw * bw * n as f64);
    let mut grid = Array2::zeros((full, full));
    for ((r, col), v) in grid.indexed_iter_mut() {
        let gx = centre(col);
        let gy = centre(full - 1 - r);
        *v = norm
            * (0..n)
                .map(|j| {
                    let (dx, dy) = (gx - x[[0, j]], gy - x[[1, j]]);
                    (-(dx * dx + dy * dy) / (2.0 * bw * bw)).exp()
                })
                .sum::<f64>();
    }
    let total: f64 = grid.sum() * cell * cell;
    if total > 0.0 {
        grid /= total;
    }
    Ok(grid
        .slice(ndarray::s![pad..pad + resolution, pad..pad + resolution])
        .to_owned())
}

/// ASCII PGM ("P2"), values scaled linearly so the maximum maps to 255.
pub fn write_pgm<W: Write>(mut out: W, grid: &Array2<f64>) -> Result<()> {
    let (rows, cols) = grid.dim();
    let max = grid.iter().cloned().fold(0.0, f64::max);
    writeln!(out, "P2\n{cols} {rows}\n255")?;
    for row in grid.rows() {
        let line: Vec<String> = row
            .iter()
            .map(|&v| {
                let s = if max > 0.0 { (v / max * 255.0).round() } else { 0.0 };
                format!("{}", s.clamp(0.0, 255.0) as u8)
            })
            .collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn random_cloud(d: usize, n: usize, shift: f64, seed: u64) -> PointCloud {
        let mut rng = seed::rng(seed);
        PointCloud::from_row_major(d, n, (0..d * n).map(|_| shift + rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn batch(d: usize, n: usize, b: usize, shift: f64, seed: u64) -> MetaBatch {
        MetaBatch::new(
            (0..b as u64)
                .map(|k| random_cloud(d, n, shift, seed * 1000 + k))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn chamfer_examples() {
        let a = random_cloud(2, 10, 0.0, 1);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        let a = PointCloud::from_points(&[[0.0]]).unwrap();
        let b = PointCloud::from_points(&[[1.0], [2.0]]).unwrap();
        assert_eq!(chamfer(&a, &b).unwrap(), 6.0);
        for s in 0..20 {
            let a = random_cloud(3, 7, 0.0, s);
            let b = random_cloud(3, 9, 0.3, 100 + s);
            assert_eq!(chamfer(&a, &b).unwrap(), chamfer(&b, &a).unwrap());
            assert!(chamfer(&a, &b).unwrap() > 0.0);
        }
        assert!(chamfer(&a, &random_cloud(2, 3, 0.0, 1)).is_err());
    }

    #[test]
    fn nna_examples() {
        let g = batch(2, 8, 10, 0.0, 1);
        let r = batch(2, 8, 10, 100.0, 2);
        for metric in [NnaMetric::Chamfer, NnaMetric::Ot] {
            assert_eq!(nna(&g, &r, metric, Solver::Exact).unwrap().accuracy, 1.0);
            assert_eq!(nna(&r, &r, metric, Solver::Exact).unwrap().accuracy, 0.0);
        }
        let one = batch(2, 8, 1, 0.0, 3);
        assert!(nna(&one, &r, NnaMetric::Chamfer, Solver::Exact).is_err());
    }

    #[test]
    fn nna_symmetric_in_labels() {
        for s in 0..5 {
            let g = batch(2, 6, 12, 0.0, 10 + s);
            let r = batch(2, 6, 12, 0.1, 20 + s);
            for metric in [NnaMetric::Chamfer, NnaMetric::Ot] {
                let a = nna(&g, &r, metric, Solver::Exact).unwrap().accuracy;
                let b = nna(&r, &g, metric, Solver::Exact).unwrap().accuracy;
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn ot_distance_matrix_matches_brute_force() {
        fn perms(n: usize) -> Vec<Vec<usize>> {
            if n == 0 {
                return vec![vec![]];
            }
            perms(n - 1)
                .into_iter()
                .flat_map(|p| {
                    (0..n).map(move |pos| {
                        let mut q = p.clone();
                        q.insert(pos, n - 1);
                        q
                    })
                })
                .collect()
        }
        let clouds: Vec<_> = (0..5).map(|k| random_cloud(2, 6, 0.0, k)).collect();
        let d = distance_matrix(&clouds, NnaMetric::Ot, Solver::Exact).unwrap();
        let all = perms(6);
        for i in 0..5 {
            for j in 0..5 {
                let cost = crate::measures::squared_euclidean_cost(&clouds[i], &clouds[j]).unwrap();
                let best = all
                    .iter()
                    .map(|p| p.iter().enumerate().map(|(a, &b)| cost[[a, b]]).sum::<f64>() / 6.0)
                    .fold(f64::INFINITY, f64::min);
                assert!((d[[i, j]] - best).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn kde_examples() {
        let c = PointCloud::from_points(&[[0.5, 0.5]]).unwrap();
        let g = kde_grid(&c, 64, 0.15).unwrap();
        assert_eq!(g.dim(), (64, 64));
        let argmax = g
            .indexed_iter()
            .fold(((0, 0), f64::MIN), |b, (k, &v)| if v > b.1 { (k, v) } else { b })
            .0;
        assert!(
            [31, 32].contains(&argmax.0) && [31, 32].contains(&argmax.1),
            "{argmax:?}"
        );

        let c = PointCloud::from_points(&[[0.2, 0.8], [0.8, 0.2]]).unwrap();
        let g = kde_grid(&c, 64, 0.15).unwrap();
        assert!(g.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!(g.sum() > 0.0);
        let is_local_max = |r: usize, col: usize| {
            let v = g[[r, col]];
            (r - 1..=r + 1).all(|a| (col - 1..=col + 1).all(|b| g[[a, b]] <= v))
        };
        // (0.2, 0.8) is near the top-left, (0.8, 0.2) near the bottom-right.
        assert!(is_local_max(12, 12));
        assert!(is_local_max(51, 51));
        assert!(kde_grid(&random_cloud(3, 4, 0.0, 1), 64, 0.15).is_err());
    }

    #[test]
    fn pgm_layout() {
        let g = kde_grid(&random_cloud(2, 20, 0.0, 1), 64, 0.15).unwrap();
        let mut buf = Vec::new();
        write_pgm(&mut buf, &g).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("P2"));
        assert_eq!(lines.next(), Some("64 64"));
        assert_eq!(lines.next(), Some("255"));
        let values: Vec<u32> = lines
            .flat_map(|l| l.split(' ').map(|v| v.parse().unwrap()).collect::<Vec<_>>())
            .collect();
        assert_eq!(values.len(), 64 * 64);
        assert_eq!(values.iter().max(), Some(&255));
    }

    #[test]
    fn nna_csv_row() {
        let s = NnaSummary::from_accuracies(NnaMetric::Ot, 5, &[0.5, 0.7], 64, 3);
        let mut buf = Vec::new();
        write_nna_csv(&mut buf, &[s]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "metric,euler_steps,accuracy_mean,accuracy_std,n,seed\not,5,0.600000,0.100000,64,3\n"
        );
    }
}
