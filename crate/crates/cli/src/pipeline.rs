//! Pipeline stages. Each stage reads and writes artifacts under the
//! configured output directory and skips work whose artifacts already exist.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use dsflow_core::benchmarks::write_samples_csv;
use dsflow_core::coupling::{load_coupling, save_coupling, Coupling};
use dsflow_core::helmholtz::{decompose, grid_divergence, grid_sample_field, orthogonality, write_grid_csv, GridSpec};
use dsflow_core::integrators::{euler, generate_coupling, integrate, IntegratorKind, IntegratorSpec, SampleStreams};
use dsflow_core::mechanism::{mechanism_study, MechanismResult};
use dsflow_core::metrics::{forbidden_fraction, sliced_wasserstein, write_metric_csv, MetricReport};
use dsflow_core::model::{load_checkpoint, save_checkpoint, ModelParams, VelocityField};
use dsflow_core::ndcore::{sample_gaussian, RandomSource};
use dsflow_core::training::{init_for_round, make_independent_coupling, train, LossLog};
use ndarray::{s, Array2};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Vanilla,
    Ds,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Ds => "ds",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Method::Vanilla),
            "ds" => Ok(Method::Ds),
            _ => bail!("unknown method {s:?} (expected vanilla or ds)"),
        }
    }
}

// Stream ids under a seed's root. Both methods share the reflow source
// streams so their couplings start from the same x0.
const STREAM_INDEPENDENT: u64 = 0;
const STREAM_REFLOW: u64 = 100;
const STREAM_EVAL_SOURCE: u64 = 2000;
const STREAM_EVAL_REFERENCE: u64 = 2001;
const STREAM_EVAL_PROJECTIONS: u64 = 2002;
const STREAM_EVAL_CONTROL: u64 = 2003;
const STREAM_GENERATE: u64 = 3000;

fn root(seed: u64) -> RandomSource {
    RandomSource::new(seed, 0)
}

/// Artifact paths.
#[derive(Clone, Debug)]
pub struct Layout {
    pub out: PathBuf,
}

impl Layout {
    pub fn new(out: &Path) -> Self {
        Self { out: out.to_path_buf() }
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out.join(format!("seed{seed}"))
    }

    pub fn base_checkpoint(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("base.ckpt")
    }

    pub fn coupling(&self, seed: u64, method: Method, round: usize) -> PathBuf {
        self.seed_dir(seed).join(method.tag()).join(format!("round{round}.pairs"))
    }

    pub fn checkpoint(&self, seed: u64, method: Method, round: usize) -> PathBuf {
        self.seed_dir(seed).join(method.tag()).join(format!("round{round}.ckpt"))
    }

    pub fn metrics(&self) -> PathBuf {
        self.out.join("metrics.csv")
    }

    pub fn mechanism(&self) -> PathBuf {
        self.out.join("mechanism.csv")
    }

    pub fn helmholtz(&self) -> PathBuf {
        self.out.join("helmholtz.csv")
    }

    pub fn manifest(&self) -> PathBuf {
        self.out.join("manifest.json")
    }
}

fn loss_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("loss.csv")
}

fn ensure_parent(p: &Path) -> Result<()> {
    if let Some(d) = p.parent() {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    Ok(())
}

fn save_model(params: &ModelParams, log: &LossLog, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    save_checkpoint(params, path).with_context(|| format!("writing {}", path.display()))?;
    log.write_csv(&loss_path(path)).with_context(|| format!("writing loss log for {}", path.display()))?;
    Ok(())
}

fn load_model(cfg: &ExperimentConfig, path: &Path) -> Result<ModelParams> {
    load_checkpoint(path, Some(&cfg.model_spec()?)).with_context(|| format!("loading {}", path.display()))
}

/// Base model on the independent coupling; loaded if already trained.
pub fn train_base(cfg: &ExperimentConfig, seed: u64) -> Result<ModelParams> {
    let path = Layout::new(&cfg.output_dir).base_checkpoint(seed);
    if path.exists() {
        log::info!("seed {seed}: base checkpoint present, skipping");
        return load_model(cfg, &path);
    }
    log::info!("seed {seed}: training base model");
    let coupling = make_independent_coupling(&cfg.benchmark, &root(seed).split(STREAM_INDEPENDENT), cfg.pairs)?;
    let (params, log) = train(init_for_round(&cfg.model_spec()?, seed, 0), &coupling, &cfg.train_config(seed))
        .context("training base model")?;
    save_model(&params, &log, &path)?;
    Ok(params)
}

/// Integrator used to regenerate couplings for a method.
pub fn generator_for(cfg: &ExperimentConfig, method: Method) -> IntegratorSpec {
    match method {
        Method::Vanilla => IntegratorSpec::euler(cfg.n_gen),
        Method::Ds => IntegratorSpec { n_steps: cfg.n_gen, ..cfg.integrator.clone() },
    }
}

/// All rounds of one method; returns the round-`k` models in order.
pub fn reflow(cfg: &ExperimentConfig, seed: u64, method: Method) -> Result<Vec<ModelParams>> {
    let layout = Layout::new(&cfg.output_dir);
    let base = load_model(cfg, &layout.base_checkpoint(seed)).context("reflow needs a trained base model")?;
    let spec = cfg.model_spec()?;
    let generator = generator_for(cfg, method);
    let mut prev = base;
    let mut models = Vec::with_capacity(cfg.rounds);
    for k in 1..=cfg.rounds {
        let (cpath, mpath) = (layout.coupling(seed, method, k), layout.checkpoint(seed, method, k));
        if mpath.exists() && cpath.exists() {
            log::info!("seed {seed} {} round {k}: artifacts present, skipping", method.tag());
            prev = load_model(cfg, &mpath)?;
            models.push(prev.clone());
            continue;
        }
        let coupling: Coupling = if cpath.exists() {
            load_coupling(&cpath).with_context(|| format!("loading {}", cpath.display()))?
        } else {
            log::info!(
                "seed {seed} {} round {k}: generating {} pairs with {}",
                method.tag(),
                cfg.pairs,
                generator.kind
            );
            let c = generate_coupling(&prev, &root(seed).split(STREAM_REFLOW + k as u64), cfg.pairs, &generator, k)
                .with_context(|| format!("generating round-{k} coupling"))?;
            ensure_parent(&cpath)?;
            save_coupling(&c, &cpath).with_context(|| format!("writing {}", cpath.display()))?;
            c
        };
        log::info!("seed {seed} {} round {k}: training", method.tag());
        let init = if cfg.warm_start { prev.clone() } else { init_for_round(&spec, seed, k) };
        let (params, log) =
            train(init, &coupling, &cfg.train_config(seed)).with_context(|| format!("training round {k}"))?;
        save_model(&params, &log, &mpath)?;
        prev = params;
        models.push(prev.clone());
    }
    Ok(models)
}

/// A trained model found on disk, tagged for reporting.
pub struct NamedModel {
    pub method: String,
    pub round: usize,
    pub seed: u64,
    pub params: ModelParams,
}

/// Base and reflowed checkpoints present for `seed`, in a fixed order.
pub fn discover_models(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<NamedModel>> {
    let layout = Layout::new(&cfg.output_dir);
    let mut out = Vec::new();
    let base = layout.base_checkpoint(seed);
    if base.exists() {
        out.push(NamedModel { method: "base".into(), round: 0, seed, params: load_model(cfg, &base)? });
    }
    for method in [Method::Vanilla, Method::Ds] {
        for k in 1..=cfg.rounds {
            let p = layout.checkpoint(seed, method, k);
            if p.exists() {
                out.push(NamedModel { method: method.tag().into(), round: k, seed, params: load_model(cfg, &p)? });
            }
        }
    }
    Ok(out)
}

/// Seconds spent integrating `timing_samples` sources in equal batches, with
/// the first batch excluded as warmup.
fn time_euler<F: VelocityField + ?Sized>(
    cfg: &ExperimentConfig,
    field: &F,
    x0: &Array2<f64>,
    nfe: usize,
) -> Result<f64> {
    let per = x0.nrows() / cfg.timing_batches;
    let mut total = 0.0;
    for b in 0..cfg.timing_batches {
        let batch = x0.slice(s![b * per..(b + 1) * per, ..]).to_owned();
        let start = Instant::now();
        let out = euler(field, &batch, nfe)?;
        let dt = start.elapsed().as_secs_f64();
        std::hint::black_box(out);
        if b > 0 {
            total += dt;
        }
    }
    Ok(total)
}

/// Metrics for one model at every configured NFE.
pub fn evaluate_model(cfg: &ExperimentConfig, model: &NamedModel) -> Result<Vec<MetricReport>> {
    let r = root(model.seed);
    let x0 = sample_gaussian(&mut r.split(STREAM_EVAL_SOURCE), cfg.eval_samples, 2);
    let reference = cfg.benchmark.sample_target(&mut r.split(STREAM_EVAL_REFERENCE), cfg.eval_samples);
    let timing_x0 = sample_gaussian(&mut r.split(STREAM_EVAL_SOURCE).split(1), cfg.timing_samples, 2);
    let mut rows = Vec::new();
    for &nfe in &cfg.eval_nfes {
        let samples = euler(&model.params, &x0, nfe)?;
        let swd = sliced_wasserstein(&samples, &reference, cfg.swd_projections, &mut r.split(STREAM_EVAL_PROJECTIONS))?;
        let ff = cfg.benchmark.checkerboard_spec().map(|cb| forbidden_fraction(&samples, cb)).transpose()?;
        rows.push(MetricReport {
            method: model.method.clone(),
            round: model.round,
            nfe: nfe as u64,
            swd,
            forbidden_frac: ff,
            wall_time_s: time_euler(cfg, &model.params, &timing_x0, nfe)?,
            n_samples: cfg.eval_samples,
            seed: model.seed,
        });
    }
    Ok(rows)
}

/// Self-distance control: SWD between a reference sample and itself.
pub fn control_row(cfg: &ExperimentConfig, seed: u64) -> Result<MetricReport> {
    let r = root(seed);
    let reference = cfg.benchmark.sample_target(&mut r.split(STREAM_EVAL_REFERENCE), cfg.eval_samples);
    let swd =
        sliced_wasserstein(&reference, &reference.clone(), cfg.swd_projections, &mut r.split(STREAM_EVAL_CONTROL))?;
    let ff = cfg.benchmark.checkerboard_spec().map(|cb| forbidden_fraction(&reference, cb)).transpose()?;
    Ok(MetricReport {
        method: "control".into(),
        round: 0,
        nfe: 0,
        swd,
        forbidden_frac: ff,
        wall_time_s: 0.0,
        n_samples: cfg.eval_samples,
        seed,
    })
}

/// Evaluates every checkpoint on disk and writes `metrics.csv`.
pub fn eval(cfg: &ExperimentConfig) -> Result<Vec<MetricReport>> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let models = discover_models(cfg, seed)?;
        if models.is_empty() {
            bail!("seed {seed}: no checkpoints under {}", cfg.output_dir.display());
        }
        rows.push(control_row(cfg, seed)?);
        for m in &models {
            log::info!("seed {seed}: evaluating {}-k{}", m.method, m.round);
            rows.extend(evaluate_model(cfg, m)?);
        }
    }
    let path = Layout::new(&cfg.output_dir).metrics();
    ensure_parent(&path)?;
    write_metric_csv(&path, &rows)?;
    Ok(rows)
}

pub const MECHANISM_SUMMARY_HEADER: &str = "model,pearson,spearman,mean_abs_div,crossing_frac,capped";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "undefined".into())
}

/// Mechanism study over the given models; writes the summary table and one
/// per-point dump per model.
pub fn mechanism_for(
    cfg: &ExperimentConfig,
    models: &[(String, &ModelParams)],
    seed: u64,
) -> Result<Vec<MechanismResult>> {
    let refs: Vec<(&str, &dyn VelocityField)> =
        models.iter().map(|(n, p)| (n.as_str(), *p as &dyn VelocityField)).collect();
    let results = mechanism_study(&refs, cfg.mechanism_points, cfg.mechanism_steps, seed)?;
    let layout = Layout::new(&cfg.output_dir);
    ensure_parent(&layout.mechanism())?;
    let mut f = std::io::BufWriter::new(fs::File::create(layout.mechanism())?);
    writeln!(f, "{MECHANISM_SUMMARY_HEADER}")?;
    for r in &results {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            r.name,
            fmt_opt(r.pearson),
            fmt_opt(r.spearman),
            r.mean_abs_div,
            r.crossing_frac,
            r.capped
        )?;
        r.write_csv(&cfg.output_dir.join(format!("mechanism_{}.csv", r.name)))?;
    }
    f.flush()?;
    Ok(results)
}

/// Base, vanilla-k1 and DS-k1 of the first seed (whichever exist).
pub fn mechanism(cfg: &ExperimentConfig) -> Result<Vec<MechanismResult>> {
    let seed = cfg.seeds[0];
    let layout = Layout::new(&cfg.output_dir);
    let mut models = Vec::new();
    let candidates = [
        ("base".to_string(), layout.base_checkpoint(seed)),
        ("vanilla-k1".to_string(), layout.checkpoint(seed, Method::Vanilla, 1)),
        ("ds-k1".to_string(), layout.checkpoint(seed, Method::Ds, 1)),
    ];
    for (name, path) in candidates {
        if path.exists() {
            models.push((name, load_model(cfg, &path)?));
        }
    }
    if models.is_empty() {
        bail!("no checkpoints for the mechanism study under {}", cfg.output_dir.display());
    }
    let refs: Vec<(String, &ModelParams)> = models.iter().map(|(n, p)| (n.clone(), p)).collect();
    mechanism_for(cfg, &refs, seed)
}

/// Residuals of the decomposition written by [`helmholtz`].
#[derive(Clone, Copy, Debug)]
pub struct HelmholtzCheck {
    pub reconstruction: f64,
    pub transport_divergence: f64,
    /// See [`dsflow_core::helmholtz::orthogonality`].
    pub orthogonality: f64,
}

pub fn helmholtz_of<F: VelocityField + ?Sized>(
    cfg: &ExperimentConfig,
    field: &F,
    out: &Path,
) -> Result<HelmholtzCheck> {
    let w = cfg.helmholtz_half_width;
    let n = cfg.helmholtz_resolution;
    let grid = GridSpec::new(n, n, (-w, w), (-w, w))?;
    let v = grid_sample_field(field, cfg.helmholtz_t, &grid)?;
    let dec = decompose(&v)?;
    ensure_parent(out)?;
    write_grid_csv(out, &v, &dec)?;
    let rec = (&dec.transport.vx + &dec.dipole.vx - &v.vx)
        .iter()
        .chain((&dec.transport.vy + &dec.dipole.vy - &v.vy).iter())
        .fold(0.0f64, |m, x| m.max(x.abs()));
    let div = grid_divergence(&dec.transport)?.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    Ok(HelmholtzCheck { reconstruction: rec, transport_divergence: div, orthogonality: orthogonality(&v, &dec) })
}

/// Decomposes a checkpoint's field (default: the first seed's base model).
pub fn helmholtz(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<HelmholtzCheck> {
    let layout = Layout::new(&cfg.output_dir);
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| layout.base_checkpoint(cfg.seeds[0]));
    let params = load_model(cfg, &path)?;
    helmholtz_of(cfg, &params, &layout.helmholtz())
}

/// Samples from a checkpoint with any integrator, written as `x,y` CSV.
pub fn generate(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    spec: &IntegratorSpec,
    n: usize,
    seed: u64,
    out: &Path,
) -> Result<Array2<f64>> {
    let params = load_model(cfg, checkpoint)?;
    let r = root(seed).split(STREAM_GENERATE);
    let x0 = sample_gaussian(&mut r.split(0), n, 2);
    let mut streams = SampleStreams::for_rows(&r, 0, n);
    let x1 = integrate(&params, &x0, spec, &mut streams)?;
    ensure_parent(out)?;
    write_samples_csv(out, &x1)?;
    Ok(x1)
}

/// Integrator for `generate`: the configured DS settings with the requested
/// kind.
pub fn integrator_of_kind(cfg: &ExperimentConfig, kind: IntegratorKind) -> IntegratorSpec {
    let mut c = cfg.clone();
    c.set_integrator_kind(kind);
    c.integrator
}

#[derive(Serialize)]
struct Manifest {
    files: BTreeMap<String, String>,
}

fn collect_files(dir: &Path, acc: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, acc)?;
        } else {
            acc.push(path);
        }
    }
    Ok(())
}

/// Writes `manifest.json`: every file under the output directory with its
/// SHA-256.
pub fn write_manifest(out: &Path) -> Result<BTreeMap<String, String>> {
    let manifest_path = Layout::new(out).manifest();
    let mut files = Vec::new();
    collect_files(out, &mut files)?;
    let mut map = BTreeMap::new();
    for f in files {
        if f == manifest_path {
            continue;
        }
        let bytes = fs::read(&f)?;
        let rel = f.strip_prefix(out).unwrap_or(&f).to_string_lossy().replace('\\', "/");
        map.insert(rel, hex::encode(Sha256::digest(&bytes)));
    }
    let text = serde_json::to_string_pretty(&Manifest { files: map.clone() })?;
    fs::write(&manifest_path, text + "\n")?;
    Ok(map)
}

/// Every stage in order.
pub fn run_all(cfg: &ExperimentConfig) -> Result<()> {
    for &seed in &cfg.seeds {
        train_base(cfg, seed)?;
        reflow(cfg, seed, Method::Vanilla)?;
        reflow(cfg, seed, Method::Ds)?;
    }
    eval(cfg)?;
    mechanism(cfg)?;
    helmholtz(cfg, None)?;
    write_manifest(&cfg.output_dir)?;
    Ok(())
}
