//! Per-step transport solver timings on synthetic uniform clouds.

use std::io::Write;
use std::time::Instant;

use rand::Rng;

use crate::couplings::{inner_plan, outer_plan, CouplingConfig, CouplingKind};
use crate::error::{Error, Result};
use crate::linearized::ReferenceMeasure;
use crate::measures::{MetaBatch, Permutation, PointCloud};
use crate::seed;

/// An `(outer, inner)` combination; `inner = None` times the outer plan alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Combo {
    pub outer: CouplingKind,
    pub inner: Option<CouplingKind>,
}

impl Combo {
    pub fn new(outer: CouplingKind, inner: Option<CouplingKind>) -> Self {
        Self { outer, inner }
    }

    pub fn label(&self) -> (String, String) {
        (
            self.outer.to_string(),
            self.inner.map_or_else(|| "-".to_string(), |k| k.to_string()),
        )
    }
}

/// The rows of the solver timing table.
pub fn default_combos() -> Vec<Combo> {
    use CouplingKind::*;
    vec![
        Combo::new(W, Some(W)),
        Combo::new(Sw, Some(Sw)),
        Combo::new(Llw, None),
        Combo::new(Ind, Some(Ind)),
    ]
}

/// The `(B, N)` columns of the solver timing table.
pub fn default_grid() -> Vec<(usize, usize)> {
    vec![(8, 64), (8, 1024), (32, 1024)]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub combo: Combo,
    pub b: usize,
    pub n: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub reps: usize,
}

fn uniform_batch(d: usize, n: usize, b: usize, seed: u64) -> Result<MetaBatch> {
    let clouds = (0..b as u64)
        .map(|k| {
            let mut rng = seed::child_rng(seed, "bench-cloud", k);
            PointCloud::from_row_major(d, n, (0..d * n).map(|_| rng.random_range(0.0..1.0)).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    MetaBatch::new(clouds)
}

/// Wall-clock time of building the outer plan and every inner plan it
/// selects, averaged over `reps` batches of uniform clouds in `[0, 1]^d`.
///
/// For `llw` the target alignments are precomputed outside the timed region,
/// as they are during training.
pub fn time_combo(combo: Combo, b: usize, n: usize, d: usize, reps: usize, seed: u64) -> Result<Timing> {
    if reps == 0 || b == 0 || n == 0 {
        return Err(Error::input("timing needs reps, b and n to be positive"));
    }
    let inner = combo.inner.unwrap_or(CouplingKind::Ind);
    let cfg = CouplingConfig::new(combo.outer, inner);
    let uses_llw = combo.outer == CouplingKind::Llw || combo.inner == Some(CouplingKind::Llw);
    let mut samples = Vec::with_capacity(reps);
    for r in 0..reps as u64 {
        let rep_seed = seed::derive(seed, "bench-rep", r);
        let src = uniform_batch(d, n, b, seed::derive(rep_seed, "src", 0))?;
        let tgt = uniform_batch(d, n, b, seed::derive(rep_seed, "tgt", 0))?;
        let (reference, perms) = if uses_llw {
            let mut rng = seed::child_rng(rep_seed, "perms", 0);
            let perms: Vec<_> = (0..b).map(|_| Permutation::random(n, &mut rng)).collect();
            (Some(ReferenceMeasure::new(src.get(0).clone())?), Some(perms))
        } else {
            (None, None)
        };

        let started = Instant::now();
        let plan = outer_plan(&src, &tgt, &cfg, perms.as_deref(), rep_seed)?;
        if combo.inner.is_some() {
            // One inner plan per source, paired with its first supported target.
            let w = plan.weights();
            for i in 0..b {
                let j = (0..b).find(|&j| w[[i, j]] > 0.0).expect("outer plan rows carry mass");
                let perm = perms.as_ref().map(|p| &p[j]);
                let seed = seed::derive(rep_seed, "inner", i as u64);
                inner_plan(src.get(i), tgt.get(j), &cfg, reference.as_ref(), perm, seed)?;
            }
        }
        samples.push(started.elapsed().as_secs_f64() * 1e3);
    }
    let mean = samples.iter().sum::<f64>() / reps as f64;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / reps as f64;
    Ok(Timing {
        combo,
        b,
        n,
        mean_ms: mean,
        std_ms: var.sqrt(),
        reps,
    })
}

/// One row per combination, mean and std columns per grid point.
pub fn write_timing_csv<W: Write>(mut out: W, grid: &[(usize, usize)], timings: &[Timing]) -> Result<()> {
    write!(out, "op,ip")?;
    for (b, n) in grid {
        write!(out, ",b{b}_n{n}_mean_ms,b{b}_n{n}_std_ms")?;
    }
    writeln!(out)?;
    let mut combos: Vec<Combo> = Vec::new();
    for t in timings {
        if !combos.contains(&t.combo) {
            combos.push(t.combo);
        }
    }
    for combo in combos {
        let (op, ip) = combo.label();
        write!(out, "{op},{ip}")?;
        for &(b, n) in grid {
            match timings.iter().find(|t| t.combo == combo && t.b == b && t.n == n) {
                Some(t) => write!(out, ",{:.4},{:.4}", t.mean_ms, t.std_ms)?,
                None => write!(out, ",,")?,
            }
        }
        writeln!(out)?;
    }
    Ok(())
}
