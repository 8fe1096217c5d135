//! Barycenter reference measure and the lazy linear divergence.
//!
//! Every target cloud is aligned once, by exact OT, to a fixed reference
//! cloud `ρ`. A source cloud that is already ordered like `ρ` can then be
//! compared with any aligned target by a plain column-wise Euclidean cost,
//! with no OT solve at training time. When the source lies close enough to
//! `ρ` this cost coincides with the exact `W₂²`.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::measures::{squared_euclidean_cost, MetaBatch, Permutation, PointCloud};
use crate::ot::{linear_assignment, InnerPlan};
use crate::seed;

/// Columns closer than this are treated as duplicates.
const DUPLICATE_RADIUS: f64 = 1e-12;
const DUPLICATE_JITTER: f64 = 1e-9;

/// A reference cloud with pairwise distinct columns. Its column order is the
/// canonical ordering that aligned clouds follow.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceMeasure {
    cloud: PointCloud,
}

impl ReferenceMeasure {
    pub fn new(cloud: PointCloud) -> Result<Self> {
        if let Some((i, j)) = first_duplicate(&cloud) {
            return Err(Error::input(format!(
                "reference columns {i} and {j} coincide; reference points must be distinct"
            )));
        }
        Ok(Self { cloud })
    }

    pub fn cloud(&self) -> &PointCloud {
        &self.cloud
    }

    pub fn count(&self) -> usize {
        self.cloud.count()
    }

    pub fn dim(&self) -> usize {
        self.cloud.dim()
    }
}

fn first_duplicate(c: &PointCloud) -> Option<(usize, usize)> {
    for i in 0..c.count() {
        for j in (i + 1)..c.count() {
            let d2: f64 = c
                .point(i)
                .iter()
                .zip(c.point(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d2.sqrt() <= DUPLICATE_RADIUS {
                return Some((i, j));
            }
        }
    }
    None
}

/// Output of [`compute_barycenter`].
#[derive(Debug, Clone)]
pub struct Barycenter {
    pub reference: ReferenceMeasure,
    /// `Σ_b W₂²(ρ_k, ν_b)` for each iterate, starting at the initialization.
    pub objectives: Vec<f64>,
    pub iterations: usize,
    /// Set when duplicate columns had to be separated by jitter.
    pub jittered: bool,
}

fn assignments(rho: &PointCloud, samples: &MetaBatch) -> Result<Vec<(Permutation, f64)>> {
    samples
        .clouds()
        .par_iter()
        .map(|nu| {
            let cost = squared_euclidean_cost(rho, nu)?;
            let (sigma, total) = linear_assignment(cost.view())?;
            Ok((sigma, total / rho.count() as f64))
        })
        .collect()
}

/// Free-support barycenter with a fixed number of support points.
///
/// Lloyd-type fixed point: starting from one of the samples (chosen by
/// `seed`), match the current support to every sample by exact OT and move
/// each support point to the mean of its matched points. The objective
/// `Σ_b W₂²(ρ, ν_b)` never increases. Stops once no coordinate moves by
/// more than `tol` or after `max_iter` updates.
pub fn compute_barycenter(
    samples: &MetaBatch,
    support_size: usize,
    max_iter: usize,
    tol: f64,
    seed: u64,
) -> Result<Barycenter> {
    let b = samples.len();
    if let Some((k, c)) = samples.iter().enumerate().find(|(_, c)| c.count() != support_size) {
        return Err(Error::shape(format!(
            "sample {k} has {} points, barycenter support size is {support_size}",
            c.count()
        )));
    }
    let mut rng = seed::child_rng(seed, "barycenter-init", 0);
    let mut rho = samples.get(rng.random_range(0..b)).clone();
    let (d, n) = (rho.dim(), rho.count());

    let mut matches = assignments(&rho, samples)?;
    let mut objectives = vec![matches.iter().map(|(_, c)| c).sum::<f64>()];
    let mut iterations = 0;
    while iterations < max_iter {
        let mut next = ndarray::Array2::<f64>::zeros((d, n));
        for ((sigma, _), nu) in matches.iter().zip(samples.iter()) {
            for j in 0..n {
                let src = nu.point(sigma.get(j));
                for k in 0..d {
                    next[[k, j]] += src[k];
                }
            }
        }
        next /= b as f64;
        let movement = next
            .iter()
            .zip(rho.coords().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        rho = PointCloud::from_array_unchecked(next);
        iterations += 1;
        matches = assignments(&rho, samples)?;
        objectives.push(matches.iter().map(|(_, c)| c).sum::<f64>());
        if movement < tol {
            break;
        }
    }

    let (rho, jittered) = separate_duplicates(rho, seed);
    Ok(Barycenter {
        reference: ReferenceMeasure::new(rho)?,
        objectives,
        iterations,
        jittered,
    })
}

fn separate_duplicates(cloud: PointCloud, seed: u64) -> (PointCloud, bool) {
    let mut rng = seed::child_rng(seed, "barycenter-jitter", 0);
    let mut coords = cloud.into_array();
    let mut jittered = false;
    let mut round = 0;
    loop {
        let c = PointCloud::from_array_unchecked(coords.clone());
        let Some((_, j)) = first_duplicate(&c) else {
            return (c, jittered);
        };
        jittered = true;
        round += 1;
        assert!(round < 10_000, "could not separate duplicate barycenter columns");
        for k in 0..coords.nrows() {
            coords[[k, j]] += DUPLICATE_JITTER * rng.random_range(-1.0..1.0);
        }
    }
}

/// Permutation `σ` aligning `c` to the reference: column `i` of
/// `apply_permutation(σ, c)` is the point of `c` matched to reference point `i`
/// by exact OT.
pub fn align_to_reference(c: &PointCloud, reference: &ReferenceMeasure) -> Result<Permutation> {
    let r = reference.cloud();
    if c.dim() != r.dim() || c.count() != r.count() {
        return Err(Error::shape(format!(
            "cloud {}x{} cannot be aligned to reference {}x{}",
            c.dim(),
            c.count(),
            r.dim(),
            r.count()
        )));
    }
    let cost = squared_euclidean_cost(r, c)?;
    Ok(linear_assignment(cost.view())?.0)
}

fn check_llw(x_mu: &PointCloud, x_nu: &PointCloud, perm_nu: &Permutation) -> Result<()> {
    if x_mu.dim() != x_nu.dim() || x_mu.count() != x_nu.count() || perm_nu.len() != x_nu.count() {
        return Err(Error::shape(format!(
            "lazy linear cost between {}x{} and {}x{} with permutation of size {}",
            x_mu.dim(),
            x_mu.count(),
            x_nu.dim(),
            x_nu.count(),
            perm_nu.len()
        )));
    }
    Ok(())
}

/// Lazy linear divergence: mean squared distance between column `i` of the
/// (reference-ordered) source and the target point aligned to reference
/// column `i`. Normalized by `1/N` like [`crate::ot::wasserstein2`].
pub fn llw2(x_mu: &PointCloud, x_nu: &PointCloud, perm_nu: &Permutation) -> Result<f64> {
    check_llw(x_mu, x_nu, perm_nu)?;
    let (a, b) = (x_mu.coords(), x_nu.coords());
    let mut total = 0.0;
    for (i, &j) in perm_nu.as_slice().iter().enumerate() {
        for k in 0..x_mu.dim() {
            let diff = a[[k, i]] - b[[k, j]];
            total += diff * diff;
        }
    }
    Ok(total / x_mu.count() as f64)
}

/// The coupling evaluated by [`llw2`], as a permutation plan.
pub fn llw_inner_plan(x_mu: &PointCloud, x_nu: &PointCloud, perm_nu: &Permutation) -> Result<InnerPlan> {
    check_llw(x_mu, x_nu, perm_nu)?;
    Ok(InnerPlan::from_permutation(perm_nu.clone()))
}
