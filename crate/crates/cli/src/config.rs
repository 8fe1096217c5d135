//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use wowfm_core::{CouplingKind, NetConfig, NnaMetric};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Circles,
    Mnist,
}

impl Preset {
    fn as_str(self) -> &'static str {
        match self {
            Preset::Circles => "circles",
            Preset::Mnist => "mnist",
        }
    }

    fn net(self) -> NetConfig {
        match self {
            Preset::Circles => NetConfig::circles(),
            Preset::Mnist => NetConfig::mnist(),
        }
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "circles" => Ok(Preset::Circles),
            "mnist" => Ok(Preset::Mnist),
            _ => Err(format!("unknown preset `{s}` (expected circles or mnist)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    Circles,
    PureNoise,
    BarycentricNoise,
    Empirical,
}

impl SourceKind {
    fn as_str(self) -> &'static str {
        match self {
            SourceKind::Circles => "circles",
            SourceKind::PureNoise => "pure_noise",
            SourceKind::BarycentricNoise => "barycentric_noise",
            SourceKind::Empirical => "empirical",
        }
    }
}

impl FromStr for SourceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "circles" => Ok(SourceKind::Circles),
            "pure_noise" => Ok(SourceKind::PureNoise),
            "barycentric_noise" => Ok(SourceKind::BarycentricNoise),
            "empirical" => Ok(SourceKind::Empirical),
            _ => Err(format!(
                "unknown source `{s}` (expected circles, pure_noise, barycentric_noise or empirical)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    Circles,
    Dataset,
}

impl TargetKind {
    fn as_str(self) -> &'static str {
        match self {
            TargetKind::Circles => "circles",
            TargetKind::Dataset => "dataset",
        }
    }
}

impl FromStr for TargetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "circles" => Ok(TargetKind::Circles),
            "dataset" => Ok(TargetKind::Dataset),
            _ => Err(format!("unknown target `{s}` (expected circles or dataset)")),
        }
    }
}

/// Everything a subcommand may need. Unset paths are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,

    pub outer: CouplingKind,
    pub inner: CouplingKind,
    pub slices: usize,
    pub sinkhorn_reg: Option<f64>,

    pub source: SourceKind,
    pub source_data: Option<PathBuf>,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub target: TargetKind,
    pub dataset: Option<PathBuf>,
    pub reference: Option<PathBuf>,

    pub steps: usize,
    /// When positive, replaces `steps` with this many passes over the dataset.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub n_min: usize,
    pub n_max: usize,
    pub checkpoint_every: usize,

    pub preset: Preset,
    pub net: NetConfig,

    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub euler_steps: usize,
    pub gen_count: usize,
    pub gen_points: usize,

    pub generated: Option<PathBuf>,
    pub real: Option<PathBuf>,
    pub metrics: Vec<NnaMetric>,
    pub eval_n: usize,
    pub repetitions: usize,

    pub bary_samples: usize,
    pub bary_iters: usize,
    pub bary_tol: f64,

    pub bench_reps: usize,
    pub bench_dim: usize,
    pub bench_grid: Vec<(usize, usize)>,

    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            outer: CouplingKind::Ind,
            inner: CouplingKind::Ind,
            slices: 8,
            sinkhorn_reg: None,
            source: SourceKind::Circles,
            source_data: None,
            sigma_min: 0.05,
            sigma_max: 0.15,
            target: TargetKind::Circles,
            dataset: None,
            reference: None,
            steps: 7500,
            epochs: 0,
            batch_size: 8,
            lr: 5e-4,
            n_min: 30,
            n_max: 30,
            checkpoint_every: 0,
            preset: Preset::Circles,
            net: NetConfig::circles(),
            checkpoint: None,
            log: None,
            euler_steps: 5,
            gen_count: 64,
            gen_points: 30,
            generated: None,
            real: None,
            metrics: vec![NnaMetric::Chamfer, NnaMetric::Ot],
            eval_n: 512,
            repetitions: 5,
            bary_samples: 0,
            bary_iters: 100,
            bary_tol: 1e-9,
            bench_reps: 5,
            bench_dim: 2,
            bench_grid: wowfm_core::bench::default_grid(),
            out: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| CliError::Config(format!("{key}: cannot parse `{value}`: {e}")))
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn parse_grid(key: &str, value: &str) -> Result<Vec<(usize, usize)>, CliError> {
    value
        .split(',')
        .map(|item| {
            let (b, n) = item
                .trim()
                .split_once('x')
                .ok_or_else(|| CliError::Config(format!("{key}: expected BxN entries, got `{item}`")))?;
            Ok((parse(key, b.trim())?, parse(key, n.trim())?))
        })
        .collect()
}

impl RunConfig {
    /// Sets one key. `preset` resets every net field to the preset's values.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            "outer" => self.outer = parse(key, v)?,
            "inner" => self.inner = parse(key, v)?,
            "slices" => self.slices = parse(key, v)?,
            "sinkhorn_reg" => self.sinkhorn_reg = if v.is_empty() { None } else { Some(parse(key, v)?) },
            "source" => self.source = parse(key, v)?,
            "source_data" => self.source_data = path(v),
            "sigma_min" => self.sigma_min = parse(key, v)?,
            "sigma_max" => self.sigma_max = parse(key, v)?,
            "target" => self.target = parse(key, v)?,
            "dataset" => self.dataset = path(v),
            "ref" => self.reference = path(v),
            "steps" => self.steps = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "n_min" => self.n_min = parse(key, v)?,
            "n_max" => self.n_max = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "preset" => {
                self.preset = parse(key, v)?;
                self.net = self.preset.net();
            }
            "dim" => self.net.dim = parse(key, v)?,
            "k_local" => self.net.k_local = parse(key, v)?,
            "mlp_layers" => self.net.mlp_layers = parse(key, v)?,
            "hidden_width" => self.net.hidden_width = parse(key, v)?,
            "attn_heads" => self.net.attn_heads = parse(key, v)?,
            "attn_dim" => self.net.attn_dim = parse(key, v)?,
            "time_embed_dim" => self.net.time_embed_dim = parse(key, v)?,
            "time_max_freq" => self.net.time_max_freq = parse(key, v)?,
            "input_scale" => self.net.input_scale = parse(key, v)?,
            "checkpoint" => self.checkpoint = path(v),
            "log" => self.log = path(v),
            "euler_steps" => self.euler_steps = parse(key, v)?,
            "gen_count" => self.gen_count = parse(key, v)?,
            "gen_points" => self.gen_points = parse(key, v)?,
            "generated" => self.generated = path(v),
            "real" => self.real = path(v),
            "metrics" => {
                self.metrics = v
                    .split(',')
                    .filter(|m| !m.trim().is_empty())
                    .map(|m| parse(key, m.trim()))
                    .collect::<Result<_, _>>()?
            }
            "eval_n" => self.eval_n = parse(key, v)?,
            "repetitions" => self.repetitions = parse(key, v)?,
            "bary_samples" => self.bary_samples = parse(key, v)?,
            "bary_iters" => self.bary_iters = parse(key, v)?,
            "bary_tol" => self.bary_tol = parse(key, v)?,
            "bench_reps" => self.bench_reps = parse(key, v)?,
            "bench_dim" => self.bench_dim = parse(key, v)?,
            "bench_grid" => self.bench_grid = parse_grid(key, v)?,
            "out" => self.out = path(v),
            _ => return Err(CliError::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("{origin}:{}: expected `key = value`, got `{line}`", lineno + 1))
            })?;
            self.set(key.trim(), value)
                .map_err(|e| CliError::Config(format!("{origin}:{}: {}", lineno + 1, e.message())))?;
        }
        Ok(())
    }

    #[cfg(test)]
    pub fn parse_text(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        cfg.apply_text(text, "<config>")?;
        Ok(cfg)
    }

    /// Renders every key; the output parses back to an equal config.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("threads", self.threads.to_string());
        kv("outer", self.outer.to_string());
        kv("inner", self.inner.to_string());
        kv("slices", self.slices.to_string());
        kv(
            "sinkhorn_reg",
            self.sinkhorn_reg.map(|r| r.to_string()).unwrap_or_default(),
        );
        kv("source", self.source.as_str().into());
        kv("source_data", show_path(&self.source_data));
        kv("sigma_min", self.sigma_min.to_string());
        kv("sigma_max", self.sigma_max.to_string());
        kv("target", self.target.as_str().into());
        kv("dataset", show_path(&self.dataset));
        kv("ref", show_path(&self.reference));
        kv("steps", self.steps.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", self.lr.to_string());
        kv("n_min", self.n_min.to_string());
        kv("n_max", self.n_max.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        // preset first: setting it resets the net fields that follow
        kv("preset", self.preset.as_str().into());
        kv("dim", self.net.dim.to_string());
        kv("k_local", self.net.k_local.to_string());
        kv("mlp_layers", self.net.mlp_layers.to_string());
        kv("hidden_width", self.net.hidden_width.to_string());
        kv("attn_heads", self.net.attn_heads.to_string());
        kv("attn_dim", self.net.attn_dim.to_string());
        kv("time_embed_dim", self.net.time_embed_dim.to_string());
        kv("time_max_freq", self.net.time_max_freq.to_string());
        kv("input_scale", self.net.input_scale.to_string());
        kv("checkpoint", show_path(&self.checkpoint));
        kv("log", show_path(&self.log));
        kv("euler_steps", self.euler_steps.to_string());
        kv("gen_count", self.gen_count.to_string());
        kv("gen_points", self.gen_points.to_string());
        kv("generated", show_path(&self.generated));
        kv("real", show_path(&self.real));
        kv(
            "metrics",
            self.metrics.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(","),
        );
        kv("eval_n", self.eval_n.to_string());
        kv("repetitions", self.repetitions.to_string());
        kv("bary_samples", self.bary_samples.to_string());
        kv("bary_iters", self.bary_iters.to_string());
        kv("bary_tol", self.bary_tol.to_string());
        kv("bench_reps", self.bench_reps.to_string());
        kv("bench_dim", self.bench_dim.to_string());
        kv(
            "bench_grid",
            self.bench_grid
                .iter()
                .map(|(b, n)| format!("{b}x{n}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("out", show_path(&self.out));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_reparses_to_same_config() {
        let mut cfg = RunConfig::default();
        cfg.set("preset", "mnist").unwrap();
        cfg.set("hidden_width", "128").unwrap();
        cfg.set("outer", "llw").unwrap();
        cfg.set("sinkhorn_reg", "0.01").unwrap();
        cfg.set("dataset", "a b/c.wds").unwrap();
        cfg.set("metrics", "ot").unwrap();
        cfg.set("lr", "0.00123456789").unwrap();
        let again = RunConfig::parse_text(&cfg.dump()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = RunConfig::parse_text("# header\n\nsteps = 12  # inline\nouter=w\n").unwrap();
        assert_eq!(cfg.steps, 12);
        assert_eq!(cfg.outer, CouplingKind::W);
    }

    #[test]
    fn unknown_key_names_line() {
        let err = RunConfig::parse_text("steps = 1\nbogus = 2\n").unwrap_err();
        assert!(err.message().contains(":2:"), "{}", err.message());
        assert!(err.message().contains("bogus"));
    }

    #[test]
    fn preset_resets_net_fields() {
        let cfg = RunConfig::parse_text("hidden_width = 7\npreset = mnist\n").unwrap();
        assert_eq!(cfg.net, NetConfig::mnist());
    }

    #[test]
    fn grid_parse() {
        let cfg = RunConfig::parse_text("bench_grid = 8x64, 32x1024").unwrap();
        assert_eq!(cfg.bench_grid, vec![(8, 64), (32, 1024)]);
        assert!(RunConfig::parse_text("bench_grid = 8-64").is_err());
    }
}
