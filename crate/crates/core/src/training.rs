//! Conditional flow matching on a coupling, Adam, and the reflow driver.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmarks::BenchmarkSpec;
use crate::coupling::{Coupling, Provenance};
use crate::integrators::{generate_coupling, IntegratorSpec};
use crate::model::{Gradients, ModelParams, ModelSpec, VelocityField};
use crate::ndcore::{sample_gaussian, RandomSource};
use crate::{Error, Result};

pub const ADAM_MAGIC: &[u8] = b"DSRFADAM\n";
/// Rows per gradient shard; shards are summed pairwise in index order.
const SHARD_ROWS: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl TrainConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            iterations: 6000,
            batch_size: 1024,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed,
            log_every: 100,
        }
    }

    pub fn paper(seed: u64) -> Self {
        Self { iterations: 20_000, ..Self::desk(seed) }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.iterations > 0
            && self.batch_size > 0
            && self.learning_rate > 0.0
            && self.adam_eps > 0.0
            && self.log_every > 0
            && (0.0..1.0).contains(&self.adam_beta1)
            && self.adam_beta1 > 0.0
            && (0.0..1.0).contains(&self.adam_beta2)
            && self.adam_beta2 > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid training config {self:?}")))
        }
    }
}

/// Adam moments, one buffer per parameter buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.buffers().iter().map(|b| vec![0.0; b.len()]).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }

    /// One bias-corrected Adam update.
    pub fn update(&mut self, params: &mut ModelParams, grads: &Gradients, cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let gbufs: Vec<&[f64]> =
            grads.layers.iter().flat_map(|l| [l.weight.as_slice().unwrap(), l.bias.as_slice().unwrap()]).collect();
        for (((p, g), m), v) in params.buffers_mut().into_iter().zip(gbufs).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_eps);
            }
        }
    }

    /// `DSRFADAM\n`, a `step=<int> len=<int>\n` line, then `m` and `v` as
    /// little-endian f64 in parameter order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let len: usize = self.m.iter().map(Vec::len).sum();
        let mut buf = Vec::with_capacity(32 + 16 * len);
        buf.extend_from_slice(ADAM_MAGIC);
        buf.extend_from_slice(format!("step={} len={len}\n", self.step).as_bytes());
        for b in self.m.iter().chain(&self.v) {
            for x in b {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path, params: &ModelParams) -> Result<Self> {
        let bytes = fs::read(path)?;
        let p = path.to_path_buf();
        if !bytes.starts_with(ADAM_MAGIC) {
            return Err(Error::BadMagic { path: p, expected: "DSRFADAM".into() });
        }
        let rest = &bytes[ADAM_MAGIC.len()..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Truncated { path: p.clone(), detail: "header line not terminated".into() })?;
        let header = std::str::from_utf8(&rest[..nl]).unwrap_or("");
        let mut step = None;
        let mut len = None;
        for tok in header.split_whitespace() {
            match tok.split_once('=') {
                Some(("step", v)) => step = v.parse::<u64>().ok(),
                Some(("len", v)) => len = v.parse::<usize>().ok(),
                _ => {}
            }
        }
        let (Some(step), Some(len)) = (step, len) else {
            return Err(Error::BadHeader { path: p, detail: header.to_string() });
        };
        let mut state = Self::new(params);
        let expected: usize = state.m.iter().map(Vec::len).sum();
        if len != expected {
            return Err(Error::ShapeMismatch {
                path: p,
                found: format!("{len} moments"),
                expected: format!("{expected}"),
            });
        }
        let body = &rest[nl + 1..];
        if body.len() != 16 * len {
            return Err(Error::Truncated {
                path: p,
                detail: format!("{} payload bytes, expected {}", body.len(), 16 * len),
            });
        }
        let mut vals = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        for b in state.m.iter_mut().chain(state.v.iter_mut()) {
            for x in b.iter_mut() {
                *x = vals.next().unwrap();
            }
        }
        state.step = step;
        Ok(state)
    }
}

/// Round-0 coupling: `x0 ~ N(0, I)` from `root.split(0)`, `x1` from the
/// target on `root.split(1)`, paired by index.
pub fn make_independent_coupling(benchmark: &BenchmarkSpec, root: &RandomSource, n: usize) -> Result<Coupling> {
    if n == 0 {
        return Err(Error::InvalidInput("n must be >= 1".into()));
    }
    let x0 = sample_gaussian(&mut root.split(0), n, 2);
    let x1 = benchmark.sample_target(&mut root.split(1), n);
    Coupling::new(x0, x1, Provenance { round: 0, generator: "independent".into(), seed: root.seed() })
}

/// Interpolants `x_t` and regression targets `x1 - x0` for the given rows.
pub fn cfm_batch(coupling: &Coupling, indices: &[usize], t: &[f64]) -> (Array2<f64>, Array2<f64>) {
    let d = coupling.dim();
    let mut xt = Array2::zeros((indices.len(), d));
    let mut target = Array2::zeros((indices.len(), d));
    for (r, (&i, &ti)) in indices.iter().zip(t).enumerate() {
        for k in 0..d {
            let (a, b) = (coupling.x0[[i, k]], coupling.x1[[i, k]]);
            xt[[r, k]] = (1.0 - ti) * a + ti * b;
            target[[r, k]] = b - a;
        }
    }
    (xt, target)
}

/// Mean over the batch of `||v(t, x_t) - (x1 - x0)||^2`.
pub fn cfm_loss(params: &ModelParams, coupling: &Coupling, indices: &[usize], t: &[f64]) -> Result<f64> {
    if indices.is_empty() || indices.len() != t.len() {
        return Err(Error::InvalidInput("need one t draw per batch index".into()));
    }
    if t.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidInput("t draws must lie in [0, 1]".into()));
    }
    if indices.iter().any(|&i| i >= coupling.len()) {
        return Err(Error::InvalidInput("batch index out of range".into()));
    }
    let (xt, target) = cfm_batch(coupling, indices, t);
    Ok(params.mean_squared_residual(t, &xt, &target))
}

fn add_grads(mut a: (f64, Gradients), b: (f64, Gradients)) -> (f64, Gradients) {
    a.0 += b.0;
    for (la, lb) in a.1.layers.iter_mut().zip(b.1.layers) {
        la.weight += &lb.weight;
        la.bias += &lb.bias;
    }
    a
}

fn tree_sum(mut parts: Vec<(f64, Gradients)>) -> (f64, Gradients) {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(a) = it.next() {
            next.push(match it.next() {
                Some(b) => add_grads(a, b),
                None => a,
            });
        }
        parts = next;
    }
    parts.pop().expect("at least one shard")
}

/// Batch loss and gradient, sharded across threads with a fixed reduction
/// order so the result does not depend on the thread count.
fn batch_gradient(params: &ModelParams, t: &[f64], xt: &Array2<f64>, target: &Array2<f64>) -> (f64, Gradients) {
    let n = xt.nrows();
    let starts: Vec<usize> = (0..n).step_by(SHARD_ROWS).collect();
    let parts: Vec<(f64, Gradients)> = starts
        .par_iter()
        .map(|&lo| {
            let hi = (lo + SHARD_ROWS).min(n);
            let w = (hi - lo) as f64 / n as f64;
            let (loss, mut g) = params.loss_and_gradient(
                &t[lo..hi],
                &xt.slice(ndarray::s![lo..hi, ..]).to_owned(),
                &target.slice(ndarray::s![lo..hi, ..]).to_owned(),
            );
            for l in &mut g.layers {
                l.weight *= w;
                l.bias *= w;
            }
            (loss * w, g)
        })
        .collect();
    tree_sum(parts)
}

/// Loss recorded every `log_every` iterations (and at the last one).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub entries: Vec<(usize, f64)>,
}

impl LossLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(f, "iter,loss")?;
        for (i, l) in &self.entries {
            writeln!(f, "{i},{l}")?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Minibatch for iteration `iter`: indices with replacement and fresh
/// `t ~ U[0, 1]` per example, from the iteration's own stream.
fn draw_batch(cfg: &TrainConfig, n: usize, iter: usize) -> (Vec<usize>, Vec<f64>) {
    let mut rng = RandomSource::new(cfg.seed, 0x7472_6169_6e00).split(iter as u64);
    let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.below(n)).collect();
    let t: Vec<f64> = (0..cfg.batch_size).map(|_| rng.uniform()).collect();
    (idx, t)
}

/// Runs iterations `start..end` of the schedule in `cfg`. Each iteration
/// draws from its own stream, so splitting a run into ranges and carrying
/// `(params, adam)` across reproduces the uninterrupted run exactly.
pub fn train_range(
    params: &mut ModelParams,
    adam: &mut AdamState,
    coupling: &Coupling,
    cfg: &TrainConfig,
    start: usize,
    end: usize,
    log: &mut LossLog,
) -> Result<()> {
    cfg.validate()?;
    if coupling.dim() != params.spec().output_dim {
        return Err(Error::InvalidInput("coupling and model dimensions differ".into()));
    }
    for iter in start..end.min(cfg.iterations) {
        let (idx, t) = draw_batch(cfg, coupling.len(), iter);
        let (xt, target) = cfm_batch(coupling, &idx, &t);
        let (loss, grads) = batch_gradient(params, &t, &xt, &target);
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: iter, loss });
        }
        if iter % cfg.log_every == 0 || iter + 1 == cfg.iterations {
            log.entries.push((iter, loss));
            log::debug!("iter {iter} loss {loss:.6}");
        }
        adam.update(params, &grads, cfg);
        if !params.is_finite() {
            return Err(Error::Diverged { iteration: iter, loss: f64::NAN });
        }
    }
    Ok(())
}

/// Fits `params` to `coupling` with the full schedule in `cfg`.
pub fn train(mut params: ModelParams, coupling: &Coupling, cfg: &TrainConfig) -> Result<(ModelParams, LossLog)> {
    let mut adam = AdamState::new(&params);
    let mut log = LossLog::default();
    train_range(&mut params, &mut adam, coupling, cfg, 0, cfg.iterations, &mut log)?;
    Ok((params, log))
}

/// Fresh initialisation for a given round; round `k` uses its own stream.
pub fn init_for_round(spec: &ModelSpec, seed: u64, round: usize) -> ModelParams {
    ModelParams::init(spec, &mut RandomSource::new(seed, 0x696e_6974).split(round as u64))
}

#[derive(Clone, Debug)]
pub struct ReflowOptions {
    pub round: usize,
    pub n_pairs: usize,
    pub integrator: IntegratorSpec,
    /// Start the trainee from `prev` instead of a fresh initialisation.
    pub warm_start: bool,
}

/// One rectification round: integrate `n_pairs` fresh sources under `prev`
/// with the given integrator, then fit a model to the new coupling.
pub fn reflow_round<F: VelocityField + ?Sized>(
    prev: &F,
    prev_params: Option<&ModelParams>,
    spec: &ModelSpec,
    root: &RandomSource,
    opts: &ReflowOptions,
    cfg: &TrainConfig,
) -> Result<(Coupling, ModelParams, LossLog)> {
    let coupling = generate_coupling(prev, root, opts.n_pairs, &opts.integrator, opts.round)?;
    let init = match (opts.warm_start, prev_params) {
        (true, Some(p)) => p.clone(),
        (true, None) => return Err(Error::InvalidInput("warm start needs the previous parameters".into())),
        (false, _) => init_for_round(spec, cfg.seed, opts.round),
    };
    let (params, log) = train(init, &coupling, cfg)?;
    Ok((coupling, params, log))
}

/// Fraction of rows whose endpoints differ by more than `tol` in max norm.
pub fn endpoint_change_fraction(a: &Coupling, b: &Coupling, tol: f64) -> f64 {
    let diff = &a.x1 - &b.x1;
    let moved = diff.axis_iter(Axis(0)).filter(|r| r.iter().fold(0.0f64, |m, v| m.max(v.abs())) > tol).count();
    moved as f64 / a.len() as f64
}
