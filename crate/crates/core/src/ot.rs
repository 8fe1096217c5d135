//! Optimal transport between equal-size uniform empirical measures.
//!
//! With uniform weights `1/N` on both sides, the Kantorovich problem has a
//! permutation among its minimizers, so the exact solver is a linear
//! assignment solver. The entropic solver runs Sinkhorn iterations on the dual
//! potentials in the log domain.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::measures::{squared_euclidean_cost, Permutation, PointCloud};

/// Default iteration cap for [`solve_sinkhorn`].
pub const SINKHORN_MAX_ITER: usize = 10_000;
/// Default marginal-violation tolerance for [`solve_sinkhorn`].
pub const SINKHORN_TOL: f64 = 1e-9;

/// Sinkhorn sweeps at the target regularization before Newton refinement.
const NEWTON_AFTER_SWEEPS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
enum PlanRepr {
    Permutation(Permutation),
    /// Uniform product coupling of size `n`.
    Independent(usize),
    /// Equal-weight average of permutation plans.
    Mixture(Vec<Permutation>),
    Dense(Array2<f64>),
}

/// An `N × N` coupling between two clouds with uniform marginals `1/N`.
///
/// Row `i` refers to point `i` of the first cloud and column `j` to point `j`
/// of the second. A permutation plan `σ` puts mass `1/N` on each `(i, σ(i))`.
/// Independent plans and averages of permutation plans are kept in factored
/// form; [`InnerPlan::to_dense`] materializes any plan.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerPlan {
    repr: PlanRepr,
}

impl InnerPlan {
    pub fn from_permutation(p: Permutation) -> Self {
        Self {
            repr: PlanRepr::Permutation(p),
        }
    }

    /// Dense plan; validated against the marginal constraints at `1e-9`.
    pub fn from_dense(weights: Array2<f64>) -> Result<Self> {
        let (r, c) = weights.dim();
        if r != c || r == 0 {
            return Err(Error::shape(format!("inner plan must be square, got {r}x{c}")));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || marginal_violation(weights.view()) > 1e-9 {
            return Err(Error::input("weights do not form a coupling of uniform marginals"));
        }
        Ok(Self::dense_unchecked(weights))
    }

    pub(crate) fn dense_unchecked(weights: Array2<f64>) -> Self {
        Self {
            repr: PlanRepr::Dense(weights),
        }
    }

    /// Uniform product coupling `1/N²`.
    pub fn independent(n: usize) -> Self {
        assert!(n > 0, "plan size must be positive");
        Self {
            repr: PlanRepr::Independent(n),
        }
    }

    /// Equal-weight average of permutation plans of one size.
    pub fn mixture(perms: Vec<Permutation>) -> Result<Self> {
        let Some(first) = perms.first() else {
            return Err(Error::input("mixture needs at least one permutation"));
        };
        if perms.iter().any(|p| p.len() != first.len()) {
            return Err(Error::shape("mixture permutations differ in size"));
        }
        if perms.iter().all(|p| p == first) {
            return Ok(Self::from_permutation(first.clone()));
        }
        Ok(Self {
            repr: PlanRepr::Mixture(perms),
        })
    }

    pub fn size(&self) -> usize {
        match &self.repr {
            PlanRepr::Permutation(p) => p.len(),
            PlanRepr::Independent(n) => *n,
            PlanRepr::Mixture(ps) => ps[0].len(),
            PlanRepr::Dense(w) => w.nrows(),
        }
    }

    pub fn is_permutation(&self) -> bool {
        matches!(self.repr, PlanRepr::Permutation(_))
    }

    pub fn permutation(&self) -> Option<&Permutation> {
        match &self.repr {
            PlanRepr::Permutation(p) => Some(p),
            _ => None,
        }
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let n = self.size() as f64;
        match &self.repr {
            PlanRepr::Permutation(p) => {
                if p.get(i) == j {
                    1.0 / n
                } else {
                    0.0
                }
            }
            PlanRepr::Independent(_) => 1.0 / (n * n),
            PlanRepr::Mixture(ps) => {
                let hits = ps.iter().filter(|p| p.get(i) == j).count();
                hits as f64 / (n * ps.len() as f64)
            }
            PlanRepr::Dense(w) => w[[i, j]],
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.size();
        match &self.repr {
            PlanRepr::Permutation(p) => {
                let mut w = Array2::zeros((n, n));
                for (i, &j) in p.as_slice().iter().enumerate() {
                    w[[i, j]] = 1.0 / n as f64;
                }
                w
            }
            PlanRepr::Independent(_) => Array2::from_elem((n, n), 1.0 / (n * n) as f64),
            PlanRepr::Mixture(ps) => {
                let share = 1.0 / (n as f64 * ps.len() as f64);
                let mut w = Array2::zeros((n, n));
                for p in ps {
                    for (i, &j) in p.as_slice().iter().enumerate() {
                        w[[i, j]] += share;
                    }
                }
                w
            }
            PlanRepr::Dense(w) => w.clone(),
        }
    }

    /// Largest deviation of any row or column sum from `1/N`.
    pub fn marginal_violation(&self) -> f64 {
        match &self.repr {
            PlanRepr::Permutation(_) => 0.0,
            PlanRepr::Dense(w) => marginal_violation(w.view()),
            _ => marginal_violation(self.to_dense().view()),
        }
    }

    /// Draws one `(row, column)` pair with probability equal to its weight.
    pub fn sample_pair<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let n = self.size();
        match &self.repr {
            PlanRepr::Permutation(p) => {
                let i = rng.random_range(0..n);
                (i, p.get(i))
            }
            PlanRepr::Independent(_) => (rng.random_range(0..n), rng.random_range(0..n)),
            PlanRepr::Mixture(ps) => {
                let p = &ps[rng.random_range(0..ps.len())];
                let i = rng.random_range(0..n);
                (i, p.get(i))
            }
            PlanRepr::Dense(w) => {
                let total: f64 = w.sum();
                let mut u = rng.random_range(0.0..total);
                for ((i, j), &x) in w.indexed_iter() {
                    if u < x {
                        return (i, j);
                    }
                    u -= x;
                }
                // Rounding left a sliver of mass past the last entry.
                w.indexed_iter()
                    .filter(|(_, &x)| x > 0.0)
                    .map(|(ij, _)| ij)
                    .last()
                    .expect("plan has positive mass")
            }
        }
    }

    /// `⟨plan, cost⟩`.
    pub fn transport_cost(&self, cost: ArrayView2<'_, f64>) -> f64 {
        let n = self.size() as f64;
        let perm_cost = |p: &Permutation| p.as_slice().iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum::<f64>() / n;
        match &self.repr {
            PlanRepr::Permutation(p) => perm_cost(p),
            PlanRepr::Independent(_) => cost.sum() / (n * n),
            PlanRepr::Mixture(ps) => ps.iter().map(perm_cost).sum::<f64>() / ps.len() as f64,
            PlanRepr::Dense(w) => (w * &cost).sum(),
        }
    }
}

pub(crate) fn marginal_violation(w: ArrayView2<'_, f64>) -> f64 {
    let n = w.nrows();
    let target = 1.0 / n as f64;
    let rows = w.rows().into_iter().map(|r| (r.sum() - target).abs());
    let cols = w.columns().into_iter().map(|c| (c.sum() - target).abs());
    rows.chain(cols).fold(0.0, f64::max)
}

fn check_cost(cost: ArrayView2<'_, f64>) -> Result<usize> {
    let (r, c) = cost.dim();
    if r != c || r == 0 {
        return Err(Error::input(format!(
            "cost matrix must be square and non-empty, got {r}x{c}"
        )));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("cost matrix contains non-finite entries"));
    }
    Ok(r)
}

/// Minimum-cost perfect matching on a square cost matrix.
///
/// Returns `σ` with row `i` assigned to column `σ(i)` and the summed cost
/// `Σ_i cost[i, σ(i)]`. Shortest augmenting paths with dual potentials,
/// `O(n³)`; among equally short candidates the lowest column index is taken,
/// so the output is deterministic.
pub fn linear_assignment(cost: ArrayView2<'_, f64>) -> Result<(Permutation, f64)> {
    let n = check_cost(cost)?;
    // 1-based arrays with column 0 as the virtual root of each search.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0f64; n + 1];
    let mut used = vec![false; n + 1];

    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|b| *b = false);
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let row = cost.row(i0 - 1);
            let ui0 = u[i0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - ui0 - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut col_of_row = vec![0usize; n];
    for j in 1..=n {
        col_of_row[row_of_col[j] - 1] = j - 1;
    }
    let total = col_of_row.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
    Ok((Permutation::from_vec_unchecked(col_of_row), total))
}

/// Exact OT between two uniform `N`-point measures given their cost matrix.
///
/// Returns a permutation plan and `(1/N) Σ_i cost[i, σ(i)]`, which for a
/// squared Euclidean cost is `W₂²`.
pub fn solve_exact(cost: ArrayView2<'_, f64>) -> Result<(InnerPlan, f64)> {
    if cost.iter().any(|&c| c < 0.0) {
        return Err(Error::input("cost matrix must be nonnegative"));
    }
    let (perm, total) = linear_assignment(cost)?;
    let n = perm.len() as f64;
    Ok((InnerPlan::from_permutation(perm), total / n))
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Dual potentials of the entropic problem at a fixed regularization.
struct Potentials<'a> {
    cost: ArrayView2<'a, f64>,
    eps: f64,
    f: Vec<f64>,
    g: Vec<f64>,
}

impl Potentials<'_> {
    fn n(&self) -> usize {
        self.f.len()
    }

    /// One alternating projection sweep; columns are exact afterwards.
    fn sinkhorn_sweep(&mut self) {
        let (n, eps) = (self.n(), self.eps);
        let log_w = -(n as f64).ln();
        for i in 0..n {
            let row = self.cost.row(i);
            let g = &self.g;
            self.f[i] = eps * log_w - eps * log_sum_exp((0..n).map(|j| (g[j] - row[j]) / eps));
        }
        for j in 0..n {
            let col = self.cost.column(j);
            let f = &self.f;
            self.g[j] = eps * log_w - eps * log_sum_exp((0..n).map(|i| (f[i] - col[i]) / eps));
        }
    }

    fn plan_with(&self, f: &[f64], g: &[f64]) -> Array2<f64> {
        Array2::from_shape_fn((self.n(), self.n()), |(i, j)| {
            ((f[i] + g[j] - self.cost[[i, j]]) / self.eps).exp()
        })
    }

    fn plan(&self) -> Array2<f64> {
        self.plan_with(&self.f, &self.g)
    }

    /// Concave dual objective `⟨f, a⟩ + ⟨g, b⟩ - ε Σ P`.
    fn dual(&self, f: &[f64], g: &[f64], plan: &Array2<f64>) -> f64 {
        let n = self.n() as f64;
        (f.iter().sum::<f64>() + g.iter().sum::<f64>()) / n - self.eps * plan.sum()
    }

    /// Newton ascent step on the dual with backtracking. Returns `false` when
    /// no step improved the objective.
    fn newton_step(&mut self) -> bool {
        let n = self.n();
        let eps = self.eps;
        let target = 1.0 / n as f64;
        let plan = self.plan();
        let r: Vec<f64> = plan.rows().into_iter().map(|row| row.sum()).collect();
        let c: Vec<f64> = plan.columns().into_iter().map(|col| col.sum()).collect();
        if r.iter().any(|&x| !(x > 0.0)) {
            return false;
        }
        let ra: Vec<f64> = r.iter().map(|&x| eps * (target - x)).collect();
        let cb: Vec<f64> = c.iter().map(|&x| eps * (target - x)).collect();

        // Eliminate the f-block; the Schur complement in g is PSD with the
        // constant vector in its kernel, so a small ridge makes it definite.
        let mut schur = Array2::<f64>::zeros((n, n));
        for k in 0..n {
            for l in k..n {
                let s: f64 = (0..n).map(|i| plan[[i, k]] * plan[[i, l]] / r[i]).sum();
                schur[[k, l]] = -s;
                schur[[l, k]] = -s;
            }
        }
        let ridge = 1e-12 * c.iter().fold(0.0f64, |m, &x| m.max(x));
        for k in 0..n {
            schur[[k, k]] += c[k] + ridge;
        }
        let rhs: Vec<f64> = (0..n)
            .map(|k| cb[k] - (0..n).map(|i| plan[[i, k]] * ra[i] / r[i]).sum::<f64>())
            .collect();
        let Some(dg) = cholesky_solve(schur, rhs) else {
            return false;
        };
        let df: Vec<f64> = (0..n)
            .map(|i| (ra[i] - (0..n).map(|j| plan[[i, j]] * dg[j]).sum::<f64>()) / r[i])
            .collect();

        let base = self.dual(&self.f, &self.g, &plan);
        let slope: f64 = (0..n).map(|k| (target - r[k]) * df[k] + (target - c[k]) * dg[k]).sum();
        let mut step = 1.0;
        while step > 1e-10 {
            let f: Vec<f64> = self.f.iter().zip(&df).map(|(a, d)| a + step * d).collect();
            let g: Vec<f64> = self.g.iter().zip(&dg).map(|(a, d)| a + step * d).collect();
            let value = self.dual(&f, &g, &self.plan_with(&f, &g));
            if value.is_finite() && value >= base + 1e-4 * step * slope {
                self.f = f;
                self.g = g;
                return true;
            }
            step *= 0.5;
        }
        false
    }
}

/// Solves `A x = b` for symmetric positive definite `A`.
fn cholesky_solve(mut a: Array2<f64>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= a[[j, k]] * a[[j, k]];
        }
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        a[[j, j]] = d;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= a[[i, k]] * a[[j, k]];
            }
            a[[i, j]] = s / d;
        }
    }
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= a[[i, k]] * b[k];
        }
        b[i] = s / a[[i, i]];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= a[[k, i]] * b[k];
        }
        b[i] = s / a[[i, i]];
    }
    Some(b)
}

/// Entropic OT in the log domain.
///
/// The regularization is annealed geometrically from the cost scale down to
/// `reg`, warm-starting the dual potentials at each stage. At the final `reg`
/// the Sinkhorn sweeps are followed by damped Newton steps on the dual, which
/// keeps small regularizations (`1e-3` and below) converging. Each sweep or
/// Newton step counts as one iteration.
///
/// Returns the plan and its transport cost `⟨plan, cost⟩` (the entropy term
/// is not included). Fails with [`Error::Convergence`] if the marginal
/// violation is still above `tol` after `max_iter` iterations.
pub fn solve_sinkhorn(cost: ArrayView2<'_, f64>, reg: f64, max_iter: usize, tol: f64) -> Result<(InnerPlan, f64)> {
    let n = check_cost(cost)?;
    if !(reg > 0.0) || !reg.is_finite() {
        return Err(Error::input(format!(
            "sinkhorn regularization must be positive, got {reg}"
        )));
    }
    let scale = cost.iter().fold(0.0f64, |m, &c| m.max(c));
    let mut pot = Potentials {
        cost,
        eps: scale.max(reg),
        f: vec![0.0; n],
        g: vec![0.0; n],
    };
    let mut iterations = 0usize;
    let mut violation = f64::INFINITY;

    // Annealing stages.
    while iterations < max_iter {
        let last_stage = pot.eps <= reg;
        let stage_tol = if last_stage { tol } else { 1e-3 / n as f64 };
        let mut sweeps = 0;
        while iterations < max_iter {
            pot.sinkhorn_sweep();
            iterations += 1;
            sweeps += 1;
            violation = marginal_violation(pot.plan().view());
            if violation <= stage_tol {
                break;
            }
            if last_stage && (sweeps >= NEWTON_AFTER_SWEEPS || violation <= 1e-6 / n as f64) {
                break;
            }
        }
        if last_stage {
            break;
        }
        pot.eps = (pot.eps * 0.5).max(reg);
    }

    while violation > tol && iterations < max_iter {
        if !pot.newton_step() {
            pot.sinkhorn_sweep();
        }
        iterations += 1;
        violation = marginal_violation(pot.plan().view());
    }

    if violation > tol {
        return Err(Error::Convergence { iterations, violation });
    }
    let plan = pot.plan();
    let total = (&plan * &cost).sum();
    Ok((InnerPlan::dense_unchecked(plan), total))
}

/// Which solver backs a Wasserstein computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Solver {
    Exact,
    Sinkhorn { reg: f64, max_iter: usize, tol: f64 },
}

impl Solver {
    pub fn sinkhorn(reg: f64) -> Self {
        Solver::Sinkhorn {
            reg,
            max_iter: SINKHORN_MAX_ITER,
            tol: SINKHORN_TOL,
        }
    }

    pub fn solve(&self, cost: ArrayView2<'_, f64>) -> Result<(InnerPlan, f64)> {
        match *self {
            Solver::Exact => solve_exact(cost),
            Solver::Sinkhorn { reg, max_iter, tol } => solve_sinkhorn(cost, reg, max_iter, tol),
        }
    }
}

/// Squared 2-Wasserstein distance between two equal-size clouds and the plan
/// realizing it.
pub fn wasserstein2(a: &PointCloud, b: &PointCloud, solver: Solver) -> Result<(f64, InnerPlan)> {
    if a.count() != b.count() {
        return Err(Error::shape(format!(
            "transport between clouds of {} and {} points is unsupported",
            a.count(),
            b.count()
        )));
    }
    let cost = squared_euclidean_cost(a, b)?;
    let (plan, total) = solver.solve(cost.view())?;
    Ok((total.max(0.0), plan))
}
