mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

/// Train, sample and evaluate flow-matching models on point-cloud datasets.
#[derive(Debug, Parser)]
#[command(name = "wowfm", version)]
struct Cli {
    #[command(flatten)]
    shared: Shared,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Shared {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", short = 's', global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for cost matrices and distance matrices (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    dump_config: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a velocity network and write a checkpoint plus a CSV log.
    Train {
        #[arg(long)]
        outer: Option<String>,
        #[arg(long)]
        inner: Option<String>,
        /// Reference cloud (single-cloud WOWDS1 file).
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        /// Target dataset (WOWDS1).
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Integrate source clouds through a trained network.
    Generate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Euler steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Number of clouds.
        #[arg(long)]
        count: Option<usize>,
        /// Points per cloud.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        /// Also write every intermediate state as CSV.
        #[arg(long)]
        traj: Option<PathBuf>,
    },
    /// Nearest-neighbour accuracy between generated and real clouds.
    Eval {
        #[arg(long)]
        generated: Option<PathBuf>,
        #[arg(long)]
        real: Option<PathBuf>,
        /// Split `--real` into two random halves instead of reading `--generated`.
        #[arg(long)]
        split: bool,
        /// `chamfer` or `ot`; repeatable.
        #[arg(long = "metric")]
        metrics: Vec<String>,
        /// Clouds drawn from each side per repetition.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        repetitions: Option<usize>,
        /// Euler step count recorded in the CSV.
        #[arg(long)]
        euler_steps: Option<usize>,
        /// Directory for per-cloud KDE images (PGM).
        #[arg(long)]
        kde: Option<PathBuf>,
    },
    /// Free-support barycenter and per-cloud alignments.
    Barycenter {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Where to write the reference cloud.
        #[arg(long = "ref-out")]
        ref_out: Option<PathBuf>,
        /// Clouds used for the barycenter (0 = all).
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Time the coupling solvers on uniform clouds.
    Bench {
        #[arg(long)]
        reps: Option<usize>,
        /// Comma-separated `BxN` entries.
        #[arg(long)]
        grid: Option<String>,
    },
    /// Convert an IDX image file into a WOWDS1 dataset.
    ConvertIdx {
        #[arg(long)]
        input: PathBuf,
        /// Points per cloud.
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// Convert only the first this many images.
        #[arg(long)]
        limit: Option<usize>,
    },
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<wowfm_core::Error> for CliError {
    fn from(e: wowfm_core::Error) -> Self {
        use wowfm_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) => CliError::Config(msg),
            E::NonFinite { .. } | E::Convergence { .. } => CliError::Numeric(msg),
            E::Shape(_) | E::Input(_) | E::Format { .. } | E::Io(_) => CliError::Data(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.shared.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("config: cannot read {}: {e}", path.display())))?;
        cfg.apply_text(&text, &path.display().to_string())?;
    }
    for item in &cli.shared.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got `{item}`")))?;
        cfg.set(k.trim(), v)?;
    }
    let sh = &cli.shared;
    if let Some(s) = sh.seed {
        cfg.seed = s;
    }
    if let Some(t) = sh.threads {
        cfg.threads = t;
    }
    if let Some(o) = &sh.out {
        cfg.out = Some(o.clone());
    }
    let set_path = |slot: &mut Option<PathBuf>, v: &Option<PathBuf>| {
        if let Some(p) = v {
            *slot = Some(p.clone());
        }
    };
    match &cli.command {
        Command::Train {
            outer,
            inner,
            reference,
            dataset,
        } => {
            if let Some(o) = outer {
                cfg.set("outer", o)?;
            }
            if let Some(i) = inner {
                cfg.set("inner", i)?;
            }
            set_path(&mut cfg.reference, reference);
            if dataset.is_some() {
                set_path(&mut cfg.dataset, dataset);
                cfg.target = config::TargetKind::Dataset;
            }
        }
        Command::Generate {
            checkpoint,
            steps,
            count,
            n,
            reference,
            ..
        } => {
            set_path(&mut cfg.checkpoint, checkpoint);
            set_path(&mut cfg.reference, reference);
            cfg.euler_steps = steps.unwrap_or(cfg.euler_steps);
            cfg.gen_count = count.unwrap_or(cfg.gen_count);
            cfg.gen_points = n.unwrap_or(cfg.gen_points);
        }
        Command::Eval {
            generated,
            real,
            metrics,
            n,
            repetitions,
            euler_steps,
            ..
        } => {
            set_path(&mut cfg.generated, generated);
            set_path(&mut cfg.real, real);
            if !metrics.is_empty() {
                cfg.set("metrics", &metrics.join(","))?;
            }
            cfg.eval_n = n.unwrap_or(cfg.eval_n);
            cfg.repetitions = repetitions.unwrap_or(cfg.repetitions);
            cfg.euler_steps = euler_steps.unwrap_or(cfg.euler_steps);
        }
        Command::Barycenter { dataset, samples, .. } => {
            set_path(&mut cfg.dataset, dataset);
            cfg.bary_samples = samples.unwrap_or(cfg.bary_samples);
        }
        Command::Bench { reps, grid } => {
            cfg.bench_reps = reps.unwrap_or(cfg.bench_reps);
            if let Some(g) = grid {
                cfg.set("bench_grid", g)?;
            }
        }
        Command::ConvertIdx { .. } => {}
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve(&cli)?;
    if cli.shared.dump_config {
        print!("{}", cfg.dump());
        return Ok(());
    }
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| CliError::Config(format!("threads: {e}")))?;
    }
    match &cli.command {
        Command::Train { .. } => commands::train(&cfg),
        Command::Generate { traj, .. } => commands::generate(&cfg, traj.as_deref()),
        Command::Eval { split, kde, .. } => commands::eval(&cfg, *split, kde.as_deref()),
        Command::Barycenter { ref_out, .. } => commands::barycenter(&cfg, ref_out.as_deref()),
        Command::Bench { .. } => commands::bench(&cfg),
        Command::ConvertIdx { input, n, limit } => commands::convert_idx(&cfg, input, *n, *limit),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
