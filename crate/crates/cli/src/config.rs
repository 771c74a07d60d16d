//! Experiment configuration: a preset chosen by `benchmark` and `scale`,
//! overridden by flat `key = value` lines with dotted keys.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use dsflow_core::benchmarks::BenchmarkSpec;
use dsflow_core::integrators::{IntegratorKind, IntegratorSpec};
use dsflow_core::model::ModelSpec;
use dsflow_core::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub benchmark: BenchmarkSpec,
    pub scale: Scale,
    pub rounds: usize,
    pub pairs: usize,
    pub n_gen: usize,
    pub hidden_widths: Vec<usize>,
    /// Integrator of the DS method; the vanilla method always uses Euler.
    pub integrator: IntegratorSpec,
    pub warm_start: bool,
    pub train: TrainConfig,
    pub eval_nfes: Vec<usize>,
    pub eval_samples: usize,
    pub timing_samples: usize,
    pub timing_batches: usize,
    pub swd_projections: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub mechanism_points: usize,
    pub mechanism_steps: usize,
    pub helmholtz_resolution: usize,
    pub helmholtz_t: f64,
    pub helmholtz_half_width: f64,
}

impl ExperimentConfig {
    pub fn preset(benchmark: &str, scale: Scale) -> Result<Self> {
        let bench = match benchmark {
            "checkerboard" => BenchmarkSpec::checkerboard(),
            "gmm" => BenchmarkSpec::gmm(),
            other => bail!("unknown benchmark {other:?} (expected checkerboard or gmm)"),
        };
        let gmm = matches!(bench, BenchmarkSpec::Gmm(_));
        let (pairs, widths, train, eval_samples, timing, projections) = match scale {
            Scale::Desk => (50_000, vec![128; 3], TrainConfig::desk(0), 10_000, 10_000, 500),
            Scale::Paper => {
                (if gmm { 100_000 } else { 200_000 }, vec![512; 3], TrainConfig::paper(0), 10_000, 100_000, 2000)
            }
        };
        Ok(Self {
            benchmark: bench,
            scale,
            rounds: 2,
            pairs,
            n_gen: 20,
            hidden_widths: widths,
            integrator: IntegratorSpec::ds_project_2d(20, 0.5),
            warm_start: false,
            train,
            eval_nfes: vec![1, 5, 10, 15, 20],
            eval_samples,
            timing_samples: timing,
            timing_batches: 5,
            swd_projections: projections,
            seeds: match scale {
                Scale::Desk => vec![0, 1, 2],
                Scale::Paper => vec![0],
            },
            output_dir: PathBuf::from("runs").join(benchmark),
            mechanism_points: 6400,
            mechanism_steps: 20,
            helmholtz_resolution: 64,
            helmholtz_t: 0.5,
            helmholtz_half_width: if gmm { 18.0 } else { 4.5 },
        })
    }

    /// Parses a config file. `benchmark` and `scale` select the preset
    /// (defaults: checkerboard, desk); every other key overrides it.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`, got {raw:?}", lineno + 1))?;
            entries.push((lineno + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let lookup = |key: &str| entries.iter().rev().find(|e| e.1 == key).map(|e| e.2.clone());
        let scale = match lookup("scale").as_deref() {
            None | Some("desk") => Scale::Desk,
            Some("paper") => Scale::Paper,
            Some(other) => bail!("scale: unknown value {other:?} (expected desk or paper)"),
        };
        let mut cfg = Self::preset(lookup("benchmark").as_deref().unwrap_or("checkerboard"), scale)?;
        for (lineno, k, v) in &entries {
            cfg.set(k, v).with_context(|| format!("line {lineno}: key `{k}`"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(v: &str) -> Result<T> {
            v.parse::<T>().map_err(|_| anyhow!("cannot parse {v:?}"))
        }
        fn list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>> {
            v.split(',').map(|s| num(s.trim())).collect()
        }
        let flag = |v: &str| match v {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(anyhow!("expected true or false, got {v:?}")),
        };
        match key {
            "benchmark" | "scale" => {}
            "rounds" => self.rounds = num(value)?,
            "pairs" => self.pairs = num(value)?,
            "n_gen" => {
                self.n_gen = num(value)?;
                self.integrator.n_steps = self.n_gen;
            }
            "seeds" => self.seeds = list(value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "model.hidden_widths" => self.hidden_widths = list(value)?,
            "reflow.warm_start" => self.warm_start = flag(value)?,
            "train.iterations" => self.train.iterations = num(value)?,
            "train.batch_size" => self.train.batch_size = num(value)?,
            "train.learning_rate" => self.train.learning_rate = num(value)?,
            "train.adam_beta1" => self.train.adam_beta1 = num(value)?,
            "train.adam_beta2" => self.train.adam_beta2 = num(value)?,
            "train.adam_eps" => self.train.adam_eps = num(value)?,
            "train.log_every" => self.train.log_every = num(value)?,
            "integrator.kind" => {
                let kind = IntegratorKind::parse(value).ok_or_else(|| anyhow!("unknown integrator {value:?}"))?;
                self.set_integrator_kind(kind);
            }
            "integrator.alpha" => self.integrator.alpha = num(value)?,
            "integrator.fd_step" => self.integrator.fd_step = num(value)?,
            "integrator.delta" => self.integrator.delta = num(value)?,
            "integrator.candidates" => self.integrator.candidates = num(value)?,
            "integrator.hutch_probes" => self.integrator.hutch_probes = num(value)?,
            "integrator.t_stop" => self.integrator.t_stop = num(value)?,
            "integrator.rk_tol" => self.integrator.rk_tol = num(value)?,
            "integrator.div_budget" => self.integrator.div_budget = num(value)?,
            "eval.nfes" => self.eval_nfes = list(value)?,
            "eval.samples" => self.eval_samples = num(value)?,
            "eval.timing_samples" => self.timing_samples = num(value)?,
            "eval.timing_batches" => self.timing_batches = num(value)?,
            "eval.swd_projections" => self.swd_projections = num(value)?,
            "mechanism.points" => self.mechanism_points = num(value)?,
            "mechanism.n_steps" => self.mechanism_steps = num(value)?,
            "helmholtz.resolution" => self.helmholtz_resolution = num(value)?,
            "helmholtz.t" => self.helmholtz_t = num(value)?,
            "helmholtz.half_width" => self.helmholtz_half_width = num(value)?,
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    /// Switches the DS integrator, restoring the kind's own default for
    /// `t_stop` (every step for the planar projection, the search default for
    /// the search variants).
    pub fn set_integrator_kind(&mut self, kind: IntegratorKind) {
        let t_stop = match kind {
            IntegratorKind::DsProject2d => 1.0,
            _ => IntegratorSpec::default().t_stop,
        };
        self.integrator = IntegratorSpec { kind, t_stop, n_steps: self.n_gen, ..self.integrator.clone() };
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate().context("train")?;
        self.integrator.validate().context("integrator")?;
        self.model_spec()?;
        let checks = [
            (self.rounds >= 1, "rounds must be >= 1"),
            (self.pairs >= 1, "pairs must be >= 1"),
            (self.n_gen >= 1, "n_gen must be >= 1"),
            (!self.seeds.is_empty(), "seeds must be nonempty"),
            (!self.eval_nfes.is_empty() && self.eval_nfes.iter().all(|&n| n >= 1), "eval.nfes must be positive"),
            (self.eval_samples >= 1, "eval.samples must be >= 1"),
            (self.timing_batches >= 2, "eval.timing_batches must be >= 2 (the first is warmup)"),
            (self.timing_samples >= self.timing_batches, "eval.timing_samples must cover every batch"),
            (self.swd_projections >= 1, "eval.swd_projections must be >= 1"),
            (self.mechanism_points >= 1 && self.mechanism_steps >= 2, "mechanism settings"),
            (self.helmholtz_half_width > 0.0, "helmholtz.half_width must be positive"),
        ];
        for (ok, msg) in checks {
            if !ok {
                bail!("{msg}");
            }
        }
        if self.helmholtz_resolution < dsflow_core::helmholtz::MIN_GRID {
            bail!("helmholtz.resolution must be >= {}", dsflow_core::helmholtz::MIN_GRID);
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        Ok(ModelSpec::new(2, self.hidden_widths.clone())?)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.train.clone() }
    }
}
