use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use wowfm_core::bench::{default_combos, time_combo, write_timing_csv};
use wowfm_core::data::{draw_source, image_to_cloud, read_dataset, read_idx, write_dataset, Circles};
use wowfm_core::eval::{kde_grid, nna, write_nna_csv, write_pgm, NnaSummary, KDE_PADDING, KDE_RESOLUTION};
use wowfm_core::flow::{euler_sample, train_with_hook, write_log_csv, write_trajectories_csv};
use wowfm_core::linearized::{align_to_reference, compute_barycenter};
use wowfm_core::seed;
use wowfm_core::{
    CloudDataset, CouplingConfig, MetaBatch, PointCloud, ReferenceMeasure, Solver, SourceSpec, TrainConfig, VelocityNet,
};

use crate::config::{RunConfig, SourceKind, TargetKind};
use crate::CliError;

const LOSS_WINDOW: usize = 100;

fn required<'a>(value: &'a Option<PathBuf>, field: &str) -> Result<&'a Path, CliError> {
    let p = value
        .as_deref()
        .ok_or_else(|| CliError::Config(format!("`{field}` is not set")))?;
    if !p.exists() {
        return Err(CliError::Config(format!("`{field}`: {} does not exist", p.display())));
    }
    Ok(p)
}

fn load_dataset(value: &Option<PathBuf>, field: &str) -> Result<CloudDataset, CliError> {
    let p = required(value, field)?;
    read_dataset(p).map_err(|e| CliError::Data(format!("`{field}` ({}): {e}", p.display())))
}

fn load_reference(value: &Option<PathBuf>) -> Result<Option<ReferenceMeasure>, CliError> {
    if value.is_none() {
        return Ok(None);
    }
    let ds = load_dataset(value, "ref")?;
    if ds.len() != 1 {
        return Err(CliError::Data(format!(
            "`ref` must hold exactly one cloud, found {}",
            ds.len()
        )));
    }
    Ok(Some(ReferenceMeasure::new(ds.get(0).clone())?))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", path.display())))
}

fn source_spec(cfg: &RunConfig, reference: Option<&ReferenceMeasure>) -> Result<SourceSpec, CliError> {
    Ok(match cfg.source {
        SourceKind::Circles => SourceSpec::Circles(Circles::source()),
        SourceKind::PureNoise => SourceSpec::pure_noise(cfg.sigma_min, cfg.sigma_max, cfg.net.dim)?,
        SourceKind::BarycentricNoise => {
            let reference = reference.ok_or_else(|| {
                CliError::Config("source = barycentric_noise requires a reference: set `ref` (--ref)".into())
            })?;
            SourceSpec::barycentric_noise(cfg.sigma_min, cfg.sigma_max, reference.clone())?
        }
        SourceKind::Empirical => SourceSpec::empirical(Arc::new(load_dataset(&cfg.source_data, "source_data")?))?,
    })
}

fn coupling(cfg: &RunConfig) -> CouplingConfig {
    CouplingConfig {
        outer: cfg.outer,
        inner: cfg.inner,
        slices: cfg.slices,
        sinkhorn_reg: cfg.sinkhorn_reg,
    }
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let coupling = coupling(cfg);
    if coupling.uses_llw() && cfg.reference.is_none() {
        return Err(CliError::Config(
            "llw couplings require a reference measure: set `ref` (--ref)".into(),
        ));
    }
    let reference = load_reference(&cfg.reference)?;
    let (target, len) = match cfg.target {
        TargetKind::Circles => (SourceSpec::Circles(Circles::target()), None),
        TargetKind::Dataset => {
            let ds = load_dataset(&cfg.dataset, "dataset")?;
            let len = ds.len();
            (SourceSpec::empirical(Arc::new(ds))?, Some(len))
        }
    };
    let source = source_spec(cfg, reference.as_ref())?;
    let steps = match (cfg.epochs, len) {
        (0, _) => cfg.steps,
        (e, Some(len)) => TrainConfig::steps_for_epochs(e, len, cfg.batch_size),
        (_, None) => return Err(CliError::Config("`epochs` needs target = dataset".into())),
    };
    let tc = TrainConfig {
        steps,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        coupling,
        net: cfg.net.clone(),
        n_min: cfg.n_min,
        n_max: cfg.n_max,
        seed: cfg.seed,
        checkpoint_every: cfg.checkpoint_every,
    };
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("model.ckpt"));
    let hook_base = out.clone();
    let result = train_with_hook(&tc, &source, &target, reference.as_ref(), |step, net| {
        net.save(format!("{}.step{step}", hook_base.display()))
    })?;
    result.net.save(&out)?;
    let log_path = cfg
        .log
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.log.csv", out.display())));
    let mut w = create(&log_path)?;
    write_log_csv(&mut w, &result.log)?;
    w.flush()?;

    let tail = &result.log[result.log.len().saturating_sub(LOSS_WINDOW)..];
    let mean = tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64;
    println!("final {}-step mean loss: {mean:.6}", tail.len());
    println!("checkpoint: {}", out.display());
    println!("log: {}", log_path.display());
    Ok(())
}

pub fn generate(cfg: &RunConfig, traj_path: Option<&Path>) -> Result<(), CliError> {
    let ckpt = required(&cfg.checkpoint, "checkpoint")?;
    let net = VelocityNet::load(ckpt).map_err(|e| CliError::Data(format!("`checkpoint`: {e}")))?;
    if cfg.euler_steps == 0 {
        return Err(CliError::Config("`euler_steps` must be at least 1".into()));
    }
    let reference = load_reference(&cfg.reference)?;
    let source = source_spec(cfg, reference.as_ref())?;
    let nc = net.config();
    if source.dim() != nc.dim {
        return Err(CliError::Config(format!(
            "source dimension {} does not match checkpoint dimension {}",
            source.dim(),
            nc.dim
        )));
    }
    if cfg.gen_points <= nc.k_local {
        return Err(CliError::Config(format!(
            "`gen_points` = {} must exceed the checkpoint's k_local = {}",
            cfg.gen_points, nc.k_local
        )));
    }
    let x0 = draw_source(
        &source,
        cfg.gen_points,
        cfg.gen_count,
        seed::derive(cfg.seed, "generate", 0),
    )?;
    let trajs = x0
        .iter()
        .map(|c| euler_sample(&net, c, cfg.euler_steps))
        .collect::<Result<Vec<_>, _>>()?;
    let ends: Vec<PointCloud> = trajs.iter().map(|t| t.end().clone()).collect();
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("generated.wds"));
    write_dataset(&out, &CloudDataset::new(nc.dim, ends)?)?;
    if let Some(p) = traj_path {
        let mut w = create(p)?;
        write_trajectories_csv(&mut w, &trajs)?;
        w.flush()?;
    }
    println!("wrote {} clouds to {}", trajs.len(), out.display());
    Ok(())
}

/// `k` distinct clouds of `ds`, chosen by `seed`.
fn pick(clouds: &[PointCloud], k: usize, seed: u64) -> Vec<PointCloud> {
    use rand::seq::index::sample;
    let mut rng = seed::rng(seed);
    sample(&mut rng, clouds.len(), k.min(clouds.len()))
        .into_iter()
        .map(|i| clouds[i].clone())
        .collect()
}

pub fn eval(cfg: &RunConfig, split: bool, kde_dir: Option<&Path>) -> Result<(), CliError> {
    if cfg.metrics.is_empty() {
        return Err(CliError::Config("`metrics` is empty".into()));
    }
    if cfg.repetitions == 0 {
        return Err(CliError::Config("`repetitions` must be at least 1".into()));
    }
    let real = load_dataset(&cfg.real, "real")?;
    let (gen_pool, real_pool): (Vec<PointCloud>, Vec<PointCloud>) = if split {
        let shuffled = pick(real.clouds(), real.len(), seed::derive(cfg.seed, "eval-split", 0));
        let half = shuffled.len() / 2;
        (shuffled[..half].to_vec(), shuffled[half..].to_vec())
    } else {
        let generated = load_dataset(&cfg.generated, "generated")?;
        if generated.dim() != real.dim() {
            return Err(CliError::Data(format!(
                "generated clouds are {}-dimensional, real clouds {}-dimensional",
                generated.dim(),
                real.dim()
            )));
        }
        (generated.clouds().to_vec(), real.clouds().to_vec())
    };
    let n = cfg.eval_n.min(gen_pool.len()).min(real_pool.len());
    if n < 2 {
        return Err(CliError::Data(format!(
            "need at least 2 clouds per side, have {} generated and {} real",
            gen_pool.len(),
            real_pool.len()
        )));
    }
    let solver = match cfg.sinkhorn_reg {
        Some(r) => Solver::sinkhorn(r),
        None => Solver::Exact,
    };

    let mut rows = Vec::new();
    for &metric in &cfg.metrics {
        let mut acc = Vec::with_capacity(cfg.repetitions);
        for r in 0..cfg.repetitions as u64 {
            let g = MetaBatch::new(pick(&gen_pool, n, seed::derive(cfg.seed, "eval-gen", r)))?;
            let x = MetaBatch::new(pick(&real_pool, n, seed::derive(cfg.seed, "eval-real", r)))?;
            acc.push(nna(&g, &x, metric, solver)?.accuracy);
        }
        rows.push(NnaSummary::from_accuracies(metric, cfg.euler_steps, &acc, n, cfg.seed));
    }
    match &cfg.out {
        Some(p) => {
            let mut w = create(p)?;
            write_nna_csv(&mut w, &rows)?;
            w.flush()?;
        }
        None => write_nna_csv(std::io::stdout().lock(), &rows)?,
    }

    if let Some(dir) = kde_dir {
        std::fs::create_dir_all(dir)?;
        for (i, c) in gen_pool.iter().enumerate() {
            if c.dim() != 2 {
                return Err(CliError::Data("KDE images need 2-dimensional clouds".into()));
            }
            let grid = kde_grid(c, KDE_RESOLUTION, KDE_PADDING)?;
            let mut w = create(&dir.join(format!("cloud_{i:05}.pgm")))?;
            write_pgm(&mut w, &grid)?;
            w.flush()?;
        }
    }
    Ok(())
}

pub fn barycenter(cfg: &RunConfig, ref_out: Option<&Path>) -> Result<(), CliError> {
    let ds = load_dataset(&cfg.dataset, "dataset")?;
    let n = ds
        .uniform_count()
        .ok_or_else(|| CliError::Data("barycenter needs clouds of equal size".into()))?;
    let samples = match cfg.bary_samples {
        0 => ds.clouds().to_vec(),
        k => pick(ds.clouds(), k, seed::derive(cfg.seed, "bary-samples", 0)),
    };
    let bc = compute_barycenter(&MetaBatch::new(samples)?, n, cfg.bary_iters, cfg.bary_tol, cfg.seed)?;
    let perms = ds
        .clouds()
        .iter()
        .map(|c| align_to_reference(c, &bc.reference))
        .collect::<Result<Vec<_>, _>>()?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("aligned.wds"));
    let ref_path = ref_out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(format!("{}.ref", out.display())));
    let aligned = CloudDataset::new(ds.dim(), ds.clouds().to_vec())?.with_permutations(perms)?;
    write_dataset(&out, &aligned)?;
    write_dataset(
        &ref_path,
        &CloudDataset::new(ds.dim(), vec![bc.reference.cloud().clone()])?,
    )?;
    println!(
        "barycenter: {} iterations, objective {:.6} -> {:.6}",
        bc.iterations,
        bc.objectives.first().copied().unwrap_or(f64::NAN),
        bc.objectives.last().copied().unwrap_or(f64::NAN)
    );
    println!("aligned dataset: {}", out.display());
    println!("reference: {}", ref_path.display());
    Ok(())
}

pub fn bench(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.bench_reps == 0 {
        return Err(CliError::Config("`bench_reps` must be at least 1".into()));
    }
    let mut timings = Vec::new();
    for combo in default_combos() {
        for &(b, n) in &cfg.bench_grid {
            timings.push(time_combo(combo, b, n, cfg.bench_dim, cfg.bench_reps, cfg.seed)?);
        }
    }
    match &cfg.out {
        Some(p) => {
            let mut w = create(p)?;
            write_timing_csv(&mut w, &cfg.bench_grid, &timings)?;
            w.flush()?;
        }
        None => write_timing_csv(std::io::stdout().lock(), &cfg.bench_grid, &timings)?,
    }
    Ok(())
}

pub fn convert_idx(cfg: &RunConfig, input: &Path, n: usize, limit: Option<usize>) -> Result<(), CliError> {
    if !input.exists() {
        return Err(CliError::Config(format!("`input`: {} does not exist", input.display())));
    }
    let images = read_idx(input)?;
    let take = limit.unwrap_or(images.len()).min(images.len());
    let clouds = images[..take]
        .iter()
        .enumerate()
        .map(|(k, im)| image_to_cloud(im.view(), n, seed::derive(cfg.seed, "img", k as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("images.wds"));
    write_dataset(&out, &CloudDataset::new(2, clouds)?)?;
    println!("wrote {take} clouds of {n} points to {}", out.display());
    Ok(())
}
