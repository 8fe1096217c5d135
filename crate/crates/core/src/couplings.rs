//! Outer and inner couplings and the training-pair sampler.
//!
//! A training step pairs a batch of `B` source clouds with `B` target clouds
//! through an outer plan (a `B × B` coupling between the two batches), draws
//! `B` cloud pairs from it, and couples the points of every drawn pair with
//! an inner plan. The resulting matched points are the regression data of the
//! flow-matching loss.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linearized::{llw2, llw_inner_plan, ReferenceMeasure};
use crate::measures::{apply_permutation, squared_euclidean_cost, MetaBatch, Permutation, PointCloud};
use crate::ot::{linear_assignment, wasserstein2, InnerPlan, Solver};
use crate::seed;
use crate::sliced::{sample_directions, sliced_plan, sliced_w2, DEFAULT_SLICES};

/// Coupling family used for the outer or the inner plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CouplingKind {
    /// Independent (product) coupling.
    Ind,
    /// Exact (or entropic) Wasserstein coupling.
    W,
    /// Sliced Wasserstein coupling.
    Sw,
    /// Lazy linear coupling through a barycenter reference.
    Llw,
}

impl CouplingKind {
    pub const ALL: [CouplingKind; 4] = [CouplingKind::Ind, CouplingKind::W, CouplingKind::Sw, CouplingKind::Llw];

    pub fn as_str(&self) -> &'static str {
        match self {
            CouplingKind::Ind => "ind",
            CouplingKind::W => "w",
            CouplingKind::Sw => "sw",
            CouplingKind::Llw => "llw",
        }
    }
}

impl fmt::Display for CouplingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CouplingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ind" => Ok(CouplingKind::Ind),
            "w" => Ok(CouplingKind::W),
            "sw" => Ok(CouplingKind::Sw),
            "llw" => Ok(CouplingKind::Llw),
            other => Err(Error::config(format!(
                "unknown coupling '{other}' (expected ind, w, sw or llw)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingConfig {
    pub outer: CouplingKind,
    pub inner: CouplingKind,
    /// Directions per sliced estimate.
    pub slices: usize,
    /// Entropic regularization for `w` couplings; `None` selects the exact solver.
    pub sinkhorn_reg: Option<f64>,
}

impl Default for CouplingConfig {
    fn default() -> Self {
        Self {
            outer: CouplingKind::Ind,
            inner: CouplingKind::Ind,
            slices: DEFAULT_SLICES,
            sinkhorn_reg: None,
        }
    }
}

impl CouplingConfig {
    pub fn new(outer: CouplingKind, inner: CouplingKind) -> Self {
        Self {
            outer,
            inner,
            ..Self::default()
        }
    }

    pub fn uses_llw(&self) -> bool {
        self.outer == CouplingKind::Llw || self.inner == CouplingKind::Llw
    }

    pub fn solver(&self) -> Solver {
        match self.sinkhorn_reg {
            Some(reg) => Solver::sinkhorn(reg),
            None => Solver::Exact,
        }
    }

    pub fn validate(&self, reference: Option<&ReferenceMeasure>) -> Result<()> {
        if self.slices == 0 {
            return Err(Error::config("slices must be at least 1"));
        }
        if let Some(reg) = self.sinkhorn_reg {
            if !(reg > 0.0) || !reg.is_finite() {
                return Err(Error::config(format!("sinkhorn_reg must be positive, got {reg}")));
            }
        }
        if self.uses_llw() && reference.is_none() {
            return Err(Error::config("llw couplings require a reference measure (--ref)"));
        }
        Ok(())
    }
}

/// A `B × B` coupling between two batches with uniform marginals `1/B`.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterPlan {
    weights: Array2<f64>,
}

impl OuterPlan {
    pub fn independent(b: usize) -> Self {
        Self {
            weights: Array2::from_elem((b, b), 1.0 / (b * b) as f64),
        }
    }

    pub fn from_permutation(p: &Permutation) -> Self {
        let b = p.len();
        let mut weights = Array2::zeros((b, b));
        for (i, &j) in p.as_slice().iter().enumerate() {
            weights[[i, j]] = 1.0 / b as f64;
        }
        Self { weights }
    }

    pub fn size(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> ArrayView2<'_, f64> {
        self.weights.view()
    }

    pub fn marginal_violation(&self) -> f64 {
        crate::ot::marginal_violation(self.weights.view())
    }

    /// `Σ_{ii'} Π_{ii'} C_{ii'}`.
    pub fn expected_cost(&self, cost: ArrayView2<'_, f64>) -> f64 {
        (&self.weights * &cost).sum()
    }
}

/// Optimal outer plan for uniform marginals, solved as an assignment.
pub fn solve_outer(cost: ArrayView2<'_, f64>) -> Result<OuterPlan> {
    let (perm, _) = linear_assignment(cost)?;
    Ok(OuterPlan::from_permutation(&perm))
}

fn check_batches(src: &MetaBatch, tgt: &MetaBatch) -> Result<()> {
    if src.len() != tgt.len() {
        return Err(Error::shape(format!(
            "source batch has {} clouds, target batch {}",
            src.len(),
            tgt.len()
        )));
    }
    if src.dim() != tgt.dim() {
        return Err(Error::shape(format!(
            "source dimension {} differs from target dimension {}",
            src.dim(),
            tgt.dim()
        )));
    }
    Ok(())
}

fn target_perm(perms: Option<&[Permutation]>, j: usize) -> Result<&Permutation> {
    perms
        .and_then(|p| p.get(j))
        .ok_or_else(|| Error::config("llw couplings require alignment permutations for every target"))
}

/// Pairwise divergences between source and target clouds for the outer
/// coupling in `cfg`. Entries are computed in parallel and collected in a
/// fixed order.
///
/// `target_perms[j]` aligns target `j` to the reference; it is required for
/// `llw`, whose sources must already be ordered like the reference.
pub fn outer_cost_matrix(
    src: &MetaBatch,
    tgt: &MetaBatch,
    cfg: &CouplingConfig,
    target_perms: Option<&[Permutation]>,
    seed: u64,
) -> Result<Array2<f64>> {
    check_batches(src, tgt)?;
    let b = src.len();
    if cfg.outer == CouplingKind::Llw {
        return llw_cost_matrix(src, tgt, target_perms);
    }
    let dirs = (cfg.outer == CouplingKind::Sw)
        .then(|| sample_directions(src.dim(), cfg.slices, seed::derive(seed, "outer-slices", 0)));
    let solver = cfg.solver();
    let entries: Vec<f64> = (0..b * b)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / b, k % b);
            let (mu, nu) = (src.get(i), tgt.get(j));
            match cfg.outer {
                CouplingKind::Ind => Err(Error::input("the independent outer coupling has no cost matrix")),
                CouplingKind::W => wasserstein2(mu, nu, solver).map(|(d, _)| d),
                CouplingKind::Sw => sliced_w2(mu, nu, dirs.as_ref().expect("directions drawn")),
                CouplingKind::Llw => llw2(mu, nu, target_perm(target_perms, j)?),
            }
        })
        .collect::<Result<_>>()?;
    Ok(Array2::from_shape_vec((b, b), entries).expect("b*b entries"))
}

/// `llw2` for all pairs, with each target aligned once up front.
fn llw_cost_matrix(src: &MetaBatch, tgt: &MetaBatch, target_perms: Option<&[Permutation]>) -> Result<Array2<f64>> {
    let b = src.len();
    let n = src.get(0).count();
    // point-major flattening: entry `i * d + k` is coordinate `k` of point `i`
    let flatten = |c: &PointCloud, order: &[usize]| -> Vec<f64> {
        let a = c.coords();
        order
            .iter()
            .flat_map(|&j| (0..a.nrows()).map(move |k| a[[k, j]]))
            .collect()
    };
    let identity: Vec<usize> = (0..n).collect();
    let mut sources = Vec::with_capacity(b);
    let mut aligned = Vec::with_capacity(b);
    for k in 0..b {
        let perm = target_perm(target_perms, k)?;
        let (mu, nu) = (src.get(k), tgt.get(k));
        if mu.count() != n || nu.count() != n || perm.len() != n {
            return Err(Error::shape(format!(
                "lazy linear costs need {n}-point clouds and permutations; pair {k} has {}, {} and {}",
                mu.count(),
                nu.count(),
                perm.len()
            )));
        }
        sources.push(flatten(mu, &identity));
        aligned.push(flatten(nu, perm.as_slice()));
    }
    let entries: Vec<f64> = (0..b * b)
        .into_par_iter()
        .map(|k| {
            let (x, y) = (&sources[k / b], &aligned[k % b]);
            x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / n as f64
        })
        .collect();
    Ok(Array2::from_shape_vec((b, b), entries).expect("b*b entries"))
}

/// Inner plan between two clouds for the inner coupling in `cfg`.
pub fn inner_plan(
    a: &PointCloud,
    b: &PointCloud,
    cfg: &CouplingConfig,
    reference: Option<&ReferenceMeasure>,
    target_perm: Option<&Permutation>,
    seed: u64,
) -> Result<InnerPlan> {
    if a.dim() != b.dim() || a.count() != b.count() {
        return Err(Error::shape(format!(
            "inner plan between {}x{} and {}x{} clouds",
            a.dim(),
            a.count(),
            b.dim(),
            b.count()
        )));
    }
    match cfg.inner {
        CouplingKind::Ind => Ok(InnerPlan::independent(a.count())),
        CouplingKind::W => {
            let cost = squared_euclidean_cost(a, b)?;
            Ok(cfg.solver().solve(cost.view())?.0)
        }
        CouplingKind::Sw => sliced_plan(a, b, &sample_directions(a.dim(), cfg.slices, seed)),
        CouplingKind::Llw => {
            if reference.is_none() {
                return Err(Error::config("llw inner plans require a reference measure"));
            }
            let perm = target_perm
                .ok_or_else(|| Error::config("llw inner plans require the target's alignment permutation"))?;
            llw_inner_plan(a, b, perm)
        }
    }
}

/// One drawn training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub source: PointCloud,
    pub target: PointCloud,
    pub inner: InnerPlan,
    /// Batch indices the pair was drawn from.
    pub source_index: usize,
    pub target_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedBatch {
    pub pairs: Vec<Pair>,
}

/// Outer plan for a batch under `cfg`.
pub fn outer_plan(
    src: &MetaBatch,
    tgt: &MetaBatch,
    cfg: &CouplingConfig,
    target_perms: Option<&[Permutation]>,
    seed: u64,
) -> Result<OuterPlan> {
    check_batches(src, tgt)?;
    match cfg.outer {
        CouplingKind::Ind => Ok(OuterPlan::independent(src.len())),
        _ => solve_outer(outer_cost_matrix(src, tgt, cfg, target_perms, seed)?.view()),
    }
}

/// Draws `B` i.i.d. `(source, target)` index pairs from the outer plan by
/// multinomial sampling over its `B²` entries, then attaches the inner plan
/// of every drawn pair.
pub fn sample_paired_batch(
    src: &MetaBatch,
    tgt: &MetaBatch,
    cfg: &CouplingConfig,
    reference: Option<&ReferenceMeasure>,
    target_perms: Option<&[Permutation]>,
    seed: u64,
) -> Result<PairedBatch> {
    cfg.validate(reference)?;
    if cfg.uses_llw() {
        for j in 0..tgt.len() {
            target_perm(target_perms, j)?;
        }
    }
    let plan = outer_plan(src, tgt, cfg, target_perms, seed)?;
    let b = plan.size();
    let mut rng = seed::child_rng(seed, "outer-draws", 0);
    let draws: Vec<(usize, usize)> = (0..b).map(|_| sample_outer(&plan, &mut rng)).collect();

    let pairs = draws
        .into_iter()
        .enumerate()
        .map(|(k, (i, j))| {
            let (source, target) = (src.get(i), tgt.get(j));
            let perm = target_perms.and_then(|p| p.get(j));
            let inner = inner_plan(
                source,
                target,
                cfg,
                reference,
                perm,
                seed::derive(seed, "inner", k as u64),
            )?;
            Ok(Pair {
                source: source.clone(),
                target: target.clone(),
                inner,
                source_index: i,
                target_index: j,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PairedBatch { pairs })
}

fn sample_outer<R: Rng + ?Sized>(plan: &OuterPlan, rng: &mut R) -> (usize, usize) {
    let total = plan.weights.sum();
    let mut u = rng.random_range(0.0..total);
    let mut last = (0, 0);
    for ((i, j), &w) in plan.weights.indexed_iter() {
        if w <= 0.0 {
            continue;
        }
        if u < w {
            return (i, j);
        }
        u -= w;
        last = (i, j);
    }
    last
}

/// Column-aligned matched points of a pair.
///
/// Permutation plans contribute each matched pair exactly once; other plans
/// contribute `N` i.i.d. draws from the `N²` plan entries.
pub fn draw_matched_points(pair: &Pair, seed: u64) -> (PointCloud, PointCloud) {
    if let Some(sigma) = pair.inner.permutation() {
        let aligned = apply_permutation(sigma, &pair.target).expect("plan size matches cloud");
        return (pair.source.clone(), aligned);
    }
    let n = pair.inner.size();
    let d = pair.source.dim();
    let mut rng = seed::child_rng(seed, "inner-draws", 0);
    let mut x = Array2::zeros((d, n));
    let mut y = Array2::zeros((d, n));
    for col in 0..n {
        let (i, j) = pair.inner.sample_pair(&mut rng);
        x.column_mut(col).assign(&pair.source.point(i));
        y.column_mut(col).assign(&pair.target.point(j));
    }
    (PointCloud::from_array_unchecked(x), PointCloud::from_array_unchecked(y))
}
