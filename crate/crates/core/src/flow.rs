//! Flow-matching training and Euler sampling of the learned non-local field.

use std::io::Write;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::couplings::{draw_matched_points, sample_paired_batch, CouplingConfig, PairedBatch};
use crate::data::{draw_one, SourceSpec};
use crate::error::{Error, Result};
use crate::linearized::ReferenceMeasure;
use crate::measures::{interpolate, MetaBatch, Permutation, PointCloud};
use crate::net::{adam_step, AdamState, NetConfig, Params, VelocityNet};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub coupling: CouplingConfig,
    pub net: NetConfig,
    /// Cloud size range; one `N ~ Unif{n_min..=n_max}` per step.
    pub n_min: usize,
    pub n_max: usize,
    pub seed: u64,
    /// Call the checkpoint hook every this many steps (0 disables it).
    pub checkpoint_every: usize,
}

impl TrainConfig {
    /// Circles defaults: 7500 steps, `B = 8`, Adam step size `5e-4`, `N = 30`.
    pub fn circles(coupling: CouplingConfig) -> Self {
        Self {
            steps: 7500,
            batch_size: 8,
            lr: 5e-4,
            coupling,
            net: NetConfig::circles(),
            n_min: 30,
            n_max: 30,
            seed: 0,
            checkpoint_every: 0,
        }
    }

    /// Steps covering `epochs` passes over a dataset of `len` clouds.
    pub fn steps_for_epochs(epochs: usize, len: usize, batch_size: usize) -> usize {
        epochs * (len / batch_size.max(1)).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.n_min == 0 || self.n_min > self.n_max {
            return Err(Error::config(format!(
                "cloud size range [{}, {}] must satisfy 1 <= n_min <= n_max",
                self.n_min, self.n_max
            )));
        }
        if self.n_min <= self.net.k_local {
            return Err(Error::config(format!(
                "n_min = {} must exceed k_local = {}",
                self.n_min, self.net.k_local
            )));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        self.net.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub coupling_ms: f64,
    pub step_ms: f64,
}

pub fn write_log_csv<W: Write>(mut out: W, rows: &[LogRow]) -> Result<()> {
    writeln!(out, "step,loss,coupling_ms,step_ms")?;
    for r in rows {
        writeln!(out, "{},{},{:.4},{:.4}", r.step, r.loss, r.coupling_ms, r.step_ms)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub net: VelocityNet,
    pub log: Vec<LogRow>,
}

/// Flow-matching loss of a paired batch at time `t` and its parameter gradients.
///
/// Each pair contributes the mean over points of `|V(t, x_t) - (x' - x)|²`
/// with `x_t = (1 - t) x + t x'`; pairs are averaged.
pub fn fm_loss(net: &VelocityNet, paired: &PairedBatch, t: f64, seed: u64) -> Result<(f64, Params)> {
    let b = paired.pairs.len();
    if b == 0 {
        return Err(Error::input("empty paired batch"));
    }
    let per_pair = paired
        .pairs
        .par_iter()
        .enumerate()
        .map(|(k, pair)| {
            let (x, y) = draw_matched_points(pair, seed::derive(seed, "match", k as u64));
            let xt = interpolate(&x, &y, t)?;
            let (out, tape) = net.forward_tape(t, &xt)?;
            let diff = out - (&y.coords() - &x.coords()).t();
            let n = x.count() as f64;
            let loss = diff.mapv(|v| v * v).sum() / n;
            let grads = net.backward_tape(&tape, &(diff * (2.0 / (n * b as f64))));
            Ok((loss, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut grads = Params::zeros_like(&net.params);
    for (loss, g) in &per_pair {
        total += loss;
        grads.add_scaled(g, 1.0);
    }
    Ok((total / b as f64, grads))
}

/// Cycles through dataset indices, reshuffling at every epoch.
struct EpochSampler {
    len: usize,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
}

impl EpochSampler {
    fn new(len: usize, seed: u64) -> Self {
        Self {
            len,
            order: Vec::new(),
            pos: 0,
            epoch: 0,
            seed,
        }
    }

    fn next_batch(&mut self, b: usize) -> Vec<usize> {
        (0..b)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order = (0..self.len).collect();
                    self.order
                        .shuffle(&mut seed::rng(seed::derive(self.seed, "epoch", self.epoch)));
                    self.epoch += 1;
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Draws batches from a metameasure; dataset-backed ones go without replacement per epoch.
struct BatchStream<'a> {
    spec: &'a SourceSpec,
    sampler: Option<EpochSampler>,
    label: &'static str,
    seed: u64,
}

impl<'a> BatchStream<'a> {
    fn new(spec: &'a SourceSpec, label: &'static str, seed: u64) -> Self {
        let sampler = match spec {
            SourceSpec::Empirical { dataset } => Some(EpochSampler::new(dataset.len(), seed::derive(seed, label, 0))),
            _ => None,
        };
        Self {
            spec,
            sampler,
            label,
            seed,
        }
    }

    fn draw(&mut self, n: usize, b: usize, step: usize) -> Result<(MetaBatch, Option<Vec<usize>>)> {
        let step_seed = seed::derive(self.seed, self.label, step as u64 + 1);
        let indices = self.sampler.as_mut().map(|s| s.next_batch(b));
        let clouds = (0..b)
            .map(|k| {
                draw_one(
                    self.spec,
                    n,
                    indices.as_ref().map(|i| i[k]),
                    seed::derive(step_seed, "cloud", k as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((MetaBatch::new(clouds)?, indices))
    }
}

fn check_inputs(
    cfg: &TrainConfig,
    source: &SourceSpec,
    target: &SourceSpec,
    reference: Option<&ReferenceMeasure>,
) -> Result<()> {
    cfg.validate()?;
    cfg.coupling.validate(reference)?;
    for (name, spec) in [("source", source), ("target", target)] {
        if spec.dim() != cfg.net.dim {
            return Err(Error::config(format!(
                "{name} dimension {} differs from net dimension {}",
                spec.dim(),
                cfg.net.dim
            )));
        }
        if let SourceSpec::Empirical { dataset } = spec {
            if let Some((k, c)) = dataset.clouds().iter().enumerate().find(|(_, c)| c.count() < cfg.n_max) {
                return Err(Error::config(format!(
                    "{name} cloud {k} has {} points, fewer than n_max = {}",
                    c.count(),
                    cfg.n_max
                )));
            }
        }
    }
    if let Some(reference) = reference.filter(|_| cfg.coupling.uses_llw()) {
        let n = reference.count();
        if cfg.n_min != n || cfg.n_max != n {
            return Err(Error::config(format!(
                "llw couplings need a fixed cloud size equal to the reference size {n}"
            )));
        }
        match target {
            SourceSpec::Empirical { dataset }
                if dataset.permutations().is_some() && dataset.uniform_count() == Some(n) => {}
            _ => {
                return Err(Error::config(
                    "llw couplings need a target dataset of reference-sized clouds with alignment permutations",
                ))
            }
        }
    }
    Ok(())
}

/// Trains a fresh network with `cfg`.
pub fn train(
    cfg: &TrainConfig,
    source: &SourceSpec,
    target: &SourceSpec,
    reference: Option<&ReferenceMeasure>,
) -> Result<TrainOutput> {
    train_with_hook(cfg, source, target, reference, |_, _| Ok(()))
}

/// Like [`train`], calling `hook(step, net)` every `cfg.checkpoint_every` steps.
pub fn train_with_hook(
    cfg: &TrainConfig,
    source: &SourceSpec,
    target: &SourceSpec,
    reference: Option<&ReferenceMeasure>,
    mut hook: impl FnMut(usize, &VelocityNet) -> Result<()>,
) -> Result<TrainOutput> {
    check_inputs(cfg, source, target, reference)?;
    let mut net = VelocityNet::new(cfg.net.clone(), seed::derive(cfg.seed, "net", 0))?;
    let mut adam = AdamState::new(&net.params, cfg.lr);
    let mut sources = BatchStream::new(source, "source", cfg.seed);
    let mut targets = BatchStream::new(target, "target", cfg.seed);
    let all_perms = match target {
        SourceSpec::Empirical { dataset } => dataset.permutations(),
        _ => None,
    };
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let started = Instant::now();
        let step_seed = seed::derive(cfg.seed, "step", step as u64);
        let mut rng = seed::rng(step_seed);
        let t: f64 = rng.random_range(0.0..1.0);
        let n = rng.random_range(cfg.n_min..=cfg.n_max);
        let (src, _) = sources.draw(n, cfg.batch_size, step)?;
        let (tgt, idx) = targets.draw(n, cfg.batch_size, step)?;
        let perms: Option<Vec<Permutation>> = match (all_perms, idx) {
            (Some(p), Some(idx)) if cfg.coupling.uses_llw() => Some(idx.iter().map(|&i| p[i].clone()).collect()),
            _ => None,
        };

        let coupling_started = Instant::now();
        let paired = sample_paired_batch(
            &src,
            &tgt,
            &cfg.coupling,
            reference,
            perms.as_deref(),
            seed::derive(step_seed, "coupling", 0),
        )?;
        let coupling_ms = coupling_started.elapsed().as_secs_f64() * 1e3;

        let (loss, grads) = fm_loss(&net, &paired, t, seed::derive(step_seed, "loss", 0))?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite {
                step,
                seed: step_seed,
                message: format!("loss {loss} at t = {t}, n = {n}"),
            });
        }
        adam_step(&mut adam, &mut net.params, &grads)?;
        log.push(LogRow {
            step,
            loss,
            coupling_ms,
            step_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            hook(step + 1, &net)?;
        }
    }
    Ok(TrainOutput { net, log })
}

/// A velocity field `V(t, x)` returning a `d × N` matrix for a `d × N` cloud.
pub trait VelocityField {
    fn velocity(&self, t: f64, x: &PointCloud) -> Result<Array2<f64>>;
}

impl VelocityField for VelocityNet {
    fn velocity(&self, t: f64, x: &PointCloud) -> Result<Array2<f64>> {
        self.forward(t, x)
    }
}

impl<F: Fn(f64, &PointCloud) -> Array2<f64>> VelocityField for F {
    fn velocity(&self, t: f64, x: &PointCloud) -> Result<Array2<f64>> {
        Ok(self(t, x))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<PointCloud>,
}

impl Trajectory {
    pub fn start(&self) -> &PointCloud {
        &self.states[0]
    }

    pub fn end(&self) -> &PointCloud {
        self.states.last().expect("trajectory has states")
    }
}

/// Explicit Euler with `steps` uniform steps on `[0, 1]`; the field sees the
/// whole current cloud at every step.
pub fn euler_sample<F: VelocityField + ?Sized>(field: &F, x0: &PointCloud, steps: usize) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::input("euler_sample needs at least one step"));
    }
    let h = 1.0 / steps as f64;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    times.push(0.0);
    states.push(x0.clone());
    for k in 0..steps {
        let t = k as f64 * h;
        let x = &states[k];
        let v = field.velocity(t, x)?;
        if v.dim() != (x.dim(), x.count()) {
            return Err(Error::shape(format!(
                "field returned {:?} for a {}x{} cloud",
                v.dim(),
                x.dim(),
                x.count()
            )));
        }
        let next = &x.coords() + &(v * h);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: k + 1,
                seed: 0,
                message: format!("euler state became non-finite at t = {}", t + h),
            });
        }
        states.push(PointCloud::new(next)?);
        times.push(if k + 1 == steps { 1.0 } else { (k + 1) as f64 * h });
    }
    Ok(Trajectory { times, states })
}

/// Mean over points of `|x_K - x_0| / Σ_n |x_{n+1} - x_n|`; 1 for straight
/// paths and for points that never move.
pub fn straightness(traj: &Trajectory) -> Result<f64> {
    if traj.states.len() < 2 {
        return Err(Error::input("straightness needs at least two states"));
    }
    let n = traj.start().count();
    let dist = |a: &PointCloud, b: &PointCloud, j: usize| -> f64 {
        a.point(j)
            .iter()
            .zip(b.point(j).iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let mut total = 0.0;
    for j in 0..n {
        let path: f64 = traj.states.windows(2).map(|w| dist(&w[0], &w[1], j)).sum();
        total += if path > 0.0 {
            dist(traj.start(), traj.end(), j) / path
        } else {
            1.0
        };
    }
    Ok(total / n as f64)
}

/// One row per `(time, cloud, point)`.
pub fn write_trajectories_csv<W: Write>(mut out: W, trajs: &[Trajectory]) -> Result<()> {
    let d = trajs.first().map(|t| t.start().dim()).unwrap_or(0);
    let coords: Vec<String> = (0..d).map(|k| format!("c{k}")).collect();
    writeln!(out, "t,cloud_id,point_id,{}", coords.join(","))?;
    for (id, traj) in trajs.iter().enumerate() {
        for (t, state) in traj.times.iter().zip(&traj.states) {
            for j in 0..state.count() {
                write!(out, "{t},{id},{j}")?;
                for v in state.point(j) {
                    write!(out, ",{v}")?;
                }
                writeln!(out)?;
            }
        }
    }
    Ok(())
}
