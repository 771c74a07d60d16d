//! Forward solvers for sampling and offline coupling generation.
//!
//! * plain Euler;
//! * Euler with the planar first-order divergence correction of the velocity
//!   (`ds_project_2d`);
//! * Euler that steps from the lowest-|div| state among Gaussian neighbours
//!   ranked by the Hutchinson estimate (`ds_search`);
//! * adaptive Runge-Kutta-Fehlberg 4(5), optionally with the neighbour search
//!   applied once per accepted step (`rkf45_ds`).
//!
//! Batched solvers take one state per row. Randomised corrections draw from
//! per-row streams ([`SampleStreams`]) so a row's result does not depend on
//! which batch it was integrated in.

use ndarray::{concatenate, s, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupling::{Coupling, Provenance};
use crate::model::{exact_divergence, hutchinson_divergence, VelocityField};
use crate::ndcore::{sample_gaussian, sample_unit_sphere, RandomSource};
use crate::{Error, Result};

/// Below this |div| the projected correction is skipped (`sign(0) = 0`).
pub const PROJECT_DIV_EPS: f64 = 1e-10;
/// Below this ||g|| the divergence is locally flat and the correction is
/// skipped.
pub const PROJECT_GRAD_EPS: f64 = 1e-8;
pub const RK_MIN_STEP: f64 = 1e-10;

const COUPLING_CHUNK: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegratorKind {
    Euler,
    DsProject2d,
    DsSearch,
    Rkf45,
    Rkf45Ds,
}

impl IntegratorKind {
    pub const ALL: [IntegratorKind; 5] = [Self::Euler, Self::DsProject2d, Self::DsSearch, Self::Rkf45, Self::Rkf45Ds];

    pub fn tag(self) -> &'static str {
        match self {
            Self::Euler => "euler",
            Self::DsProject2d => "ds_project_2d",
            Self::DsSearch => "ds_search",
            Self::Rkf45 => "rkf45",
            Self::Rkf45Ds => "rkf45_ds",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == s)
    }

    pub fn uses_search(self) -> bool {
        matches!(self, Self::DsSearch | Self::Rkf45Ds)
    }
}

impl std::fmt::Display for IntegratorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Solver configuration. Fields not used by `kind` are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorSpec {
    pub kind: IntegratorKind,
    /// Fixed-step count `N` (`dt = 1 / N`).
    pub n_steps: usize,
    /// Strength of the projected correction, in `[0, 1]`.
    pub alpha: f64,
    /// Finite-difference probe length for the projected correction.
    pub fd_step: f64,
    /// Search radius of the neighbour search.
    pub delta: f64,
    /// Number of perturbed candidates `m`.
    pub candidates: usize,
    /// Rademacher probes `n_h` per divergence estimate.
    pub hutch_probes: usize,
    /// Corrections apply only up to this time.
    pub t_stop: f64,
    pub rk_tol: f64,
    /// Optional compressibility budget: when positive, states whose estimated
    /// |div| is already within it are not searched.
    pub div_budget: f64,
}

impl Default for IntegratorSpec {
    fn default() -> Self {
        Self {
            kind: IntegratorKind::Euler,
            n_steps: 20,
            alpha: 0.5,
            fd_step: 1e-3,
            delta: 0.05,
            candidates: 8,
            hutch_probes: 8,
            t_stop: 0.5,
            rk_tol: 1e-5,
            div_budget: 0.0,
        }
    }
}

impl IntegratorSpec {
    pub fn euler(n_steps: usize) -> Self {
        Self { kind: IntegratorKind::Euler, n_steps, ..Self::default() }
    }

    /// Projected correction at every step.
    pub fn ds_project_2d(n_steps: usize, alpha: f64) -> Self {
        Self { kind: IntegratorKind::DsProject2d, n_steps, alpha, t_stop: 1.0, ..Self::default() }
    }

    /// Neighbour search with the default hyperparameters
    /// (delta 0.05, m 8, n_h 8, t_stop 0.5, N 20).
    pub fn ds_search() -> Self {
        Self { kind: IntegratorKind::DsSearch, ..Self::default() }
    }

    pub fn rkf45(tol: f64) -> Self {
        Self { kind: IntegratorKind::Rkf45, rk_tol: tol, ..Self::default() }
    }

    pub fn rkf45_ds(tol: f64) -> Self {
        Self { kind: IntegratorKind::Rkf45Ds, rk_tol: tol, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if !(0.0..=1.0).contains(&self.t_stop) {
            return bad(format!("t_stop = {} outside [0, 1]", self.t_stop));
        }
        match self.kind {
            IntegratorKind::Euler | IntegratorKind::DsProject2d | IntegratorKind::DsSearch if self.n_steps == 0 => {
                return bad("n_steps must be >= 1".into())
            }
            _ => {}
        }
        if self.kind == IntegratorKind::DsProject2d {
            if !(0.0..=1.0).contains(&self.alpha) {
                return bad(format!("alpha = {} outside [0, 1]", self.alpha));
            }
            if !(self.fd_step > 0.0) {
                return bad("fd_step must be positive".into());
            }
        }
        if self.kind.uses_search() {
            if !(self.delta >= 0.0) || !self.delta.is_finite() {
                return bad("delta must be >= 0".into());
            }
            if self.hutch_probes == 0 {
                return bad("hutch_probes must be >= 1".into());
            }
            if !(self.div_budget >= 0.0) {
                return bad("div_budget must be >= 0".into());
            }
        }
        if matches!(self.kind, IntegratorKind::Rkf45 | IntegratorKind::Rkf45Ds) && !(self.rk_tol > 0.0) {
            return bad("rk_tol must be positive".into());
        }
        Ok(())
    }

    /// Number of leading fixed steps that are corrected: steps with index
    /// `i < ceil(t_stop * N)`.
    pub fn corrected_steps(&self) -> usize {
        let raw = self.t_stop * self.n_steps as f64;
        // Guard against t_stop * N landing a hair above an integer.
        ((raw - 1e-9).ceil().max(0.0) as usize).min(self.n_steps)
    }

    /// Model passes per corrected step of the neighbour search:
    /// `(m + 1)(1 + n_h)`.
    pub fn search_passes_per_step(&self) -> u64 {
        (self.candidates as u64 + 1) * (1 + self.hutch_probes as u64)
    }
}

/// Per-row random streams for randomised corrections. Search perturbations
/// and Hutchinson probes come from distinct families; both are independent
/// of the source draws.
#[derive(Clone, Debug)]
pub struct SampleStreams {
    pub search: Vec<RandomSource>,
    pub probe: Vec<RandomSource>,
}

impl SampleStreams {
    /// Streams for global rows `offset..offset + n` under `root`.
    pub fn for_rows(root: &RandomSource, offset: usize, n: usize) -> Self {
        let search_root = root.split(1);
        let probe_root = root.split(2);
        Self {
            search: (offset..offset + n).map(|i| search_root.split(i as u64)).collect(),
            probe: (offset..offset + n).map(|i| probe_root.split(i as u64)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.search.len()
    }

    pub fn is_empty(&self) -> bool {
        self.search.is_empty()
    }
}

/// States visited by a batched fixed-step rollout.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Array2<f64>>,
    /// Whether step `i` (from `times[i]` to `times[i + 1]`) was corrected.
    pub corrected: Vec<bool>,
}

fn step_time(i: usize, n: usize) -> f64 {
    i as f64 / n as f64
}

fn check_finite(x: &Array2<f64>, step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::IntegrationNonFinite { step })
    }
}

fn euler_update(x: &mut Array2<f64>, v: &Array2<f64>, dt: f64) {
    x.scaled_add(dt, v);
}

/// First `steps` Euler steps of an `n_steps` grid (`dt = 1 / n_steps`).
pub fn euler_partial<F: VelocityField + ?Sized>(
    field: &F,
    x0: &Array2<f64>,
    n_steps: usize,
    steps: usize,
) -> Result<Array2<f64>> {
    if n_steps == 0 {
        return Err(Error::InvalidInput("N must be >= 1".into()));
    }
    let dt = 1.0 / n_steps as f64;
    let mut x = x0.clone();
    for i in 0..steps.min(n_steps) {
        let v = field.velocity(step_time(i, n_steps), &x);
        euler_update(&mut x, &v, dt);
        check_finite(&x, i)?;
    }
    Ok(x)
}

/// `x_{t+dt} = x_t + dt v(t, x_t)` on the grid `{0, 1/N, ..., (N-1)/N}`.
pub fn euler<F: VelocityField + ?Sized>(field: &F, x0: &Array2<f64>, n_steps: usize) -> Result<Array2<f64>> {
    euler_partial(field, x0, n_steps, n_steps)
}

pub fn euler_trajectory<F: VelocityField + ?Sized>(field: &F, x0: &Array2<f64>, n_steps: usize) -> Result<Trajectory> {
    if n_steps == 0 {
        return Err(Error::InvalidInput("N must be >= 1".into()));
    }
    let dt = 1.0 / n_steps as f64;
    let mut states = vec![x0.clone()];
    let mut x = x0.clone();
    for i in 0..n_steps {
        let v = field.velocity(step_time(i, n_steps), &x);
        euler_update(&mut x, &v, dt);
        check_finite(&x, i)?;
        states.push(x.clone());
    }
    Ok(Trajectory {
        times: (0..=n_steps).map(|i| step_time(i, n_steps)).collect(),
        states,
        corrected: vec![false; n_steps],
    })
}

/// Projected velocity with caller-chosen unit probe directions (one per row).
///
/// `v0 - alpha ||v0|| / ||g|| sign(d0) g` with `g = (d_u div) u` estimated by a
/// forward difference of length `h` along `u`.
pub fn ds_project_2d_with_directions<F: VelocityField + ?Sized>(
    field: &F,
    x: &Array2<f64>,
    t: f64,
    alpha: f64,
    h: f64,
    directions: &Array2<f64>,
) -> Result<Array2<f64>> {
    let d = field.dim();
    if d != 2 {
        return Err(Error::InvalidInput(format!("the projected correction is planar (got d = {d})")));
    }
    let (mut v, d0) = exact_divergence(field, t, x)?;
    let probe = x + &(directions * h);
    let (_, d1) = exact_divergence(field, t, &probe)?;
    for i in 0..x.nrows() {
        let du = (d1[i] - d0[i]) / h;
        let g = [du * directions[[i, 0]], du * directions[[i, 1]]];
        let g_norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
        if d0[i].abs() < PROJECT_DIV_EPS || g_norm < PROJECT_GRAD_EPS {
            continue;
        }
        let v_norm = (v[[i, 0]].powi(2) + v[[i, 1]].powi(2)).sqrt();
        let scale = alpha * v_norm / g_norm * d0[i].signum();
        v[[i, 0]] -= scale * g[0];
        v[[i, 1]] -= scale * g[1];
    }
    Ok(v)
}

/// Projected velocity with a fresh uniform direction per row.
pub fn ds_project_2d<F: VelocityField + ?Sized>(
    field: &F,
    x: &Array2<f64>,
    t: f64,
    spec: &IntegratorSpec,
    streams: &mut [RandomSource],
) -> Result<Array2<f64>> {
    if streams.len() != x.nrows() {
        return Err(Error::InvalidInput("need one stream per row".into()));
    }
    let d = field.dim();
    let mut dirs = Array2::zeros(x.dim());
    for (i, rng) in streams.iter_mut().enumerate() {
        for (k, u) in sample_unit_sphere(rng, d).into_iter().enumerate() {
            dirs[[i, k]] = u;
        }
    }
    ds_project_2d_with_directions(field, x, t, spec.alpha, spec.fd_step, &dirs)
}

/// Euler with the projected velocity on the first `ceil(t_stop N)` steps.
pub fn euler_project_2d<F: VelocityField + ?Sized>(
    field: &F,
    x0: &Array2<f64>,
    spec: &IntegratorSpec,
    streams: &mut SampleStreams,
) -> Result<Array2<f64>> {
    let n = spec.n_steps;
    let dt = 1.0 / n as f64;
    let corrected = spec.corrected_steps();
    let mut x = x0.clone();
    for i in 0..n {
        let t = step_time(i, n);
        let v =
            if i < corrected { ds_project_2d(field, &x, t, spec, &mut streams.search)? } else { field.velocity(t, &x) };
        euler_update(&mut x, &v, dt);
        check_finite(&x, i)?;
    }
    Ok(x)
}

/// Result of one neighbour search over a batch.
#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub x: Array2<f64>,
    pub v: Array2<f64>,
    /// Estimate at the selected state.
    pub estimate: Vec<f64>,
    /// Estimate at the incumbent (unperturbed) state.
    pub incumbent_estimate: Vec<f64>,
    /// Rows whose state was replaced by a candidate.
    pub moved: Vec<bool>,
}

/// Low-|div| neighbour search: estimate the divergence at `x` and at `m`
/// Gaussian perturbations `x + delta xi`, keep the state with the smallest
/// |estimate| (strict improvement required), and return it with its velocity.
pub fn hutchinson_search_correct<F: VelocityField + ?Sized>(
    field: &F,
    x: &Array2<f64>,
    t: f64,
    spec: &IntegratorSpec,
    streams: &mut SampleStreams,
) -> Result<SearchOutcome> {
    let rows = x.nrows();
    if streams.len() != rows {
        return Err(Error::InvalidInput("need one stream pair per row".into()));
    }
    let d = field.dim();
    let first = hutchinson_divergence(field, t, x, &mut streams.probe, spec.hutch_probes)?;
    let incumbent_estimate = first.values.clone();
    let mut best_x = x.clone();
    let mut best_v = first.velocity;
    let mut best_d = first.values;
    let mut moved = vec![false; rows];
    let active: Vec<bool> = if spec.div_budget > 0.0 {
        best_d.iter().map(|e| e.abs() > spec.div_budget).collect()
    } else {
        vec![true; rows]
    };
    if !active.iter().any(|&a| a) {
        return Ok(SearchOutcome { x: best_x, v: best_v, estimate: best_d, incumbent_estimate, moved });
    }
    for _ in 0..spec.candidates {
        let mut cand = x.clone();
        for (i, rng) in streams.search.iter_mut().enumerate() {
            for k in 0..d {
                cand[[i, k]] += spec.delta * rng.gaussian();
            }
        }
        let est = hutchinson_divergence(field, t, &cand, &mut streams.probe, spec.hutch_probes)?;
        for i in 0..rows {
            if active[i] && est.values[i].abs() < best_d[i].abs() {
                best_d[i] = est.values[i];
                best_x.row_mut(i).assign(&cand.row(i));
                best_v.row_mut(i).assign(&est.velocity.row(i));
                moved[i] = true;
            }
        }
    }
    Ok(SearchOutcome { x: best_x, v: best_v, estimate: best_d, incumbent_estimate, moved })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DsStats {
    pub corrected_steps: usize,
    /// Row-steps on which the search replaced the state.
    pub moved: usize,
}

/// Euler that, on the first `ceil(t_stop N)` steps, advances from the
/// searched state: `x <- x* + dt v(t, x*)`.
pub fn euler_ds<F: VelocityField + ?Sized>(
    field: &F,
    x0: &Array2<f64>,
    spec: &IntegratorSpec,
    streams: &mut SampleStreams,
) -> Result<(Array2<f64>, DsStats)> {
    let n = spec.n_steps;
    let dt = 1.0 / n as f64;
    let corrected = spec.corrected_steps();
    let mut stats = DsStats::default();
    let mut x = x0.clone();
    for i in 0..n {
        let t = step_time(i, n);
        if i < corrected {
            let out = hutchinson_search_correct(field, &x, t, spec, streams)?;
            stats.corrected_steps += 1;
            stats.moved += out.moved.iter().filter(|&&m| m).count();
            x = out.x;
            euler_update(&mut x, &out.v, dt);
        } else {
            let v = field.velocity(t, &x);
            euler_update(&mut x, &v, dt);
        }
        check_finite(&x, i)?;
    }
    Ok((x, stats))
}

/// Counters from one adaptive solve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RkStats {
    pub accepted: usize,
    pub rejected: usize,
    /// Passes spent on Runge-Kutta stages and slope caching.
    pub rk_passes: u64,
    pub corrected_steps: usize,
    /// Passes spent on the neighbour search.
    pub search_passes: u64,
    /// Slope re-evaluations after the search replaced the state.
    pub recompute_passes: u64,
}

impl RkStats {
    pub fn total_passes(&self) -> u64 {
        self.rk_passes + self.search_passes + self.recompute_passes
    }
}

// Fehlberg 4(5) tableau.
const RK_C: [f64; 6] = [0.0, 0.25, 0.375, 12.0 / 13.0, 1.0, 0.5];
const RK_A: [[f64; 5]; 6] = [
    [0.0, 0.0, 0.0, 0.0, 0.0],
    [0.25, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 32.0, 9.0 / 32.0, 0.0, 0.0, 0.0],
    [1932.0 / 2197.0, -7200.0 / 2197.0, 7296.0 / 2197.0, 0.0, 0.0],
    [439.0 / 216.0, -8.0, 3680.0 / 513.0, -845.0 / 4104.0, 0.0],
    [-8.0 / 27.0, 2.0, -3544.0 / 2565.0, 1859.0 / 4104.0, -11.0 / 40.0],
];
const RK_B4: [f64; 6] = [25.0 / 216.0, 0.0, 1408.0 / 2565.0, 2197.0 / 4104.0, -0.2, 0.0];
const RK_B5: [f64; 6] = [16.0 / 135.0, 0.0, 6656.0 / 12825.0, 28561.0 / 56430.0, -9.0 / 50.0, 2.0 / 55.0];
const RK_SAFETY: f64 = 0.9;
const RK_MIN_FACTOR: f64 = 0.2;
const RK_MAX_FACTOR: f64 = 5.0;

fn eval_point<F: VelocityField + ?Sized>(field: &F, t: f64, x: &[f64]) -> Vec<f64> {
    let xa = Array2::from_shape_vec((1, x.len()), x.to_vec()).unwrap();
    field.velocity(t, &xa).into_raw_vec_and_offset().0
}

fn rkf45_impl<F: VelocityField + ?Sized>(
    field: &F,
    x0: &[f64],
    tol: f64,
    mut search: Option<(&IntegratorSpec, &mut RandomSource, &mut RandomSource)>,
) -> Result<(Vec<f64>, RkStats)> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput("tol must be positive".into()));
    }
    let d = x0.len();
    let mut stats = RkStats::default();
    let mut t = 0.0f64;
    let mut x = x0.to_vec();
    let mut h = 1.0f64;
    let mut k1 = eval_point(field, t, &x);
    stats.rk_passes += 1;
    while t < 1.0 {
        h = h.min(1.0 - t);
        if h < RK_MIN_STEP {
            return Err(Error::StepUnderflow { t, h });
        }
        let mut k: Vec<Vec<f64>> = vec![k1.clone()];
        for stage in 1..6 {
            let xs: Vec<f64> =
                (0..d).map(|c| x[c] + h * (0..stage).map(|j| RK_A[stage][j] * k[j][c]).sum::<f64>()).collect();
            k.push(eval_point(field, t + RK_C[stage] * h, &xs));
            stats.rk_passes += 1;
        }
        let err = (0..d)
            .map(|c| (h * (0..6).map(|j| (RK_B5[j] - RK_B4[j]) * k[j][c]).sum::<f64>()).abs())
            .fold(0.0, f64::max);
        if !err.is_finite() {
            return Err(Error::IntegrationNonFinite { step: stats.accepted });
        }
        let factor = if err == 0.0 {
            RK_MAX_FACTOR
        } else {
            (RK_SAFETY * (tol / err).powf(0.2)).clamp(RK_MIN_FACTOR, RK_MAX_FACTOR)
        };
        if err <= tol {
            for c in 0..d {
                x[c] += h * (0..6).map(|j| RK_B4[j] * k[j][c]).sum::<f64>();
            }
            t = if 1.0 - (t + h) < 1e-14 { 1.0 } else { t + h };
            stats.accepted += 1;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::IntegrationNonFinite { step: stats.accepted });
            }
            let mut replaced = false;
            if let Some((spec, search_rng, probe_rng)) = search.as_mut() {
                if t <= spec.t_stop {
                    let mut streams =
                        SampleStreams { search: vec![(*search_rng).clone()], probe: vec![(*probe_rng).clone()] };
                    let xa = Array2::from_shape_vec((1, d), x.clone()).unwrap();
                    let out = hutchinson_search_correct(field, &xa, t, spec, &mut streams)?;
                    **search_rng = streams.search.pop().unwrap();
                    **probe_rng = streams.probe.pop().unwrap();
                    stats.corrected_steps += 1;
                    stats.search_passes +=
                        if spec.div_budget > 0.0 && out.incumbent_estimate[0].abs() <= spec.div_budget {
                            1 + spec.hutch_probes as u64
                        } else {
                            spec.search_passes_per_step()
                        };
                    if out.moved[0] {
                        x = out.x.row(0).to_vec();
                        replaced = true;
                    }
                }
            }
            if t < 1.0 {
                k1 = eval_point(field, t, &x);
                if replaced {
                    stats.recompute_passes += 1;
                } else {
                    stats.rk_passes += 1;
                }
            }
        } else {
            stats.rejected += 1;
        }
        h *= factor;
    }
    Ok((x, stats))
}

/// Adaptive RKF45 from `t = 0` to `t = 1` with absolute tolerance `tol`.
pub fn rkf45<F: VelocityField + ?Sized>(field: &F, x0: &[f64], tol: f64) -> Result<(Vec<f64>, RkStats)> {
    rkf45_impl(field, x0, tol, None)
}

/// RKF45 with the neighbour search applied to every accepted state with
/// `t <= t_stop`; the cached slope is recomputed when the state moves.
pub fn rkf45_ds<F: VelocityField + ?Sized>(
    field: &F,
    x0: &[f64],
    spec: &IntegratorSpec,
    search: &mut RandomSource,
    probe: &mut RandomSource,
) -> Result<(Vec<f64>, RkStats)> {
    rkf45_impl(field, x0, spec.rk_tol, Some((spec, search, probe)))
}

/// Integrates every row of `x0` from `t = 0` to `t = 1` under `spec`.
pub fn integrate<F: VelocityField + ?Sized>(
    field: &F,
    x0: &Array2<f64>,
    spec: &IntegratorSpec,
    streams: &mut SampleStreams,
) -> Result<Array2<f64>> {
    spec.validate()?;
    match spec.kind {
        IntegratorKind::Euler => euler(field, x0, spec.n_steps),
        IntegratorKind::DsProject2d => euler_project_2d(field, x0, spec, streams),
        IntegratorKind::DsSearch => euler_ds(field, x0, spec, streams).map(|r| r.0),
        IntegratorKind::Rkf45 | IntegratorKind::Rkf45Ds => {
            let mut out = Array2::zeros(x0.dim());
            for i in 0..x0.nrows() {
                let row = x0.row(i).to_vec();
                let (end, _) = if spec.kind == IntegratorKind::Rkf45 {
                    rkf45(field, &row, spec.rk_tol)?
                } else {
                    rkf45_ds(field, &row, spec, &mut streams.search[i], &mut streams.probe[i])?
                };
                out.row_mut(i).assign(&ndarray::ArrayView1::from(&end));
            }
            Ok(out)
        }
    }
}

/// Draws `n` sources from `N(0, I)` on `root.split(0)` and integrates each
/// under `spec`; corrections draw from `root.split(1)` / `root.split(2)`.
pub fn generate_coupling<F: VelocityField + ?Sized>(
    field: &F,
    root: &RandomSource,
    n: usize,
    spec: &IntegratorSpec,
    round: usize,
) -> Result<Coupling> {
    if n == 0 {
        return Err(Error::InvalidInput("n must be >= 1".into()));
    }
    spec.validate()?;
    let x0 = sample_gaussian(&mut root.split(0), n, field.dim());
    let starts: Vec<usize> = (0..n).step_by(COUPLING_CHUNK).collect();
    let parts: Vec<Result<Array2<f64>>> = starts
        .par_iter()
        .map(|&lo| {
            let hi = (lo + COUPLING_CHUNK).min(n);
            let chunk = x0.slice(s![lo..hi, ..]).to_owned();
            let mut streams = SampleStreams::for_rows(root, lo, hi - lo);
            integrate(field, &chunk, spec, &mut streams)
        })
        .collect();
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let x1 = concatenate(Axis(0), &views).expect("chunks share a width");
    Coupling::new(x0, x1, Provenance { round, generator: spec.kind.tag().to_string(), seed: root.seed() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fields::{AnalyticField, ConstantField, LinearField};
    use crate::model::{Counted, ModelParams, ModelSpec};
    use ndarray::array;

    fn identity_field() -> LinearField {
        LinearField::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]])
    }

    #[test]
    fn euler_on_constant_field_is_exact() {
        let f = ConstantField(vec![0.5, -1.0]);
        let x0 = array![[0.25, 2.0]];
        for n in [1, 3, 8] {
            let x = euler(&f, &x0, n).unwrap();
            assert!((x[[0, 0]] - 0.75).abs() < 1e-14 && (x[[0, 1]] - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn euler_on_identity_field_matches_compound_growth() {
        let x0 = array![[1.0, -2.0]];
        let x = euler(&identity_field(), &x0, 20).unwrap();
        let growth = (1.0f64 + 1.0 / 20.0).powi(20);
        assert!((growth - 2.65330).abs() < 5e-6);
        assert!((x[[0, 0]] - growth).abs() < 1e-12 && (x[[0, 1]] + 2.0 * growth).abs() < 1e-12);
    }

    #[test]
    fn single_euler_step() {
        let f = AnalyticField::quadratic_shear();
        let x0 = array![[1.5, 0.3]];
        let x = euler(&f, &x0, 1).unwrap();
        assert_eq!(x, array![[1.5 + 2.25, 0.3]]);
    }

    #[test]
    fn euler_reports_non_finite_step() {
        let f = LinearField::new(vec![vec![1e200, 0.0], vec![0.0, 0.0]]);
        let err = euler(&f, &array![[1e200, 0.0]], 4).unwrap_err();
        assert!(matches!(err, Error::IntegrationNonFinite { step: 0 }));
    }

    #[test]
    fn projection_leaves_divergence_free_fields_alone() {
        let f = AnalyticField::rotation();
        let x = array![[0.3, -0.8]];
        let spec = IntegratorSpec::ds_project_2d(20, 0.5);
        let mut s = vec![RandomSource::new(1, 1)];
        let v = ds_project_2d(&f, &x, 0.2, &spec, &mut s).unwrap();
        assert_eq!(v, f.velocity(0.2, &x));
    }

    #[test]
    fn projection_skips_constant_divergence() {
        let f = LinearField::new(vec![vec![2.0, 1.0], vec![0.0, 3.0]]);
        let x = array![[0.3, -0.8], [1.0, 2.0]];
        let spec = IntegratorSpec::ds_project_2d(20, 0.5);
        let mut s = vec![RandomSource::new(1, 1), RandomSource::new(1, 2)];
        assert_eq!(ds_project_2d(&f, &x, 0.2, &spec, &mut s).unwrap(), f.velocity(0.2, &x));
    }

    #[test]
    fn projection_hand_example() {
        // v = (x1^2, 0) at (1, 0), probe u = e1: g = (2, 0), v0 = (1, 0).
        let f = AnalyticField::quadratic_shear();
        let v = ds_project_2d_with_directions(&f, &array![[1.0, 0.0]], 0.0, 0.5, 1e-3, &array![[1.0, 0.0]]).unwrap();
        assert!((v[[0, 0]] - 0.5).abs() < 1e-12 && v[[0, 1]].abs() < 1e-12, "{v}");
        // The opposite probe gives the same correction: g flips with u.
        let w = ds_project_2d_with_directions(&f, &array![[1.0, 0.0]], 0.0, 0.5, 1e-3, &array![[-1.0, 0.0]]).unwrap();
        assert!((w[[0, 0]] - 0.5).abs() < 1e-9, "{w}");
    }

    #[test]
    fn search_with_no_candidates_is_identity() {
        let f = AnalyticField::cubic_shear();
        let x = array![[0.5, 0.2]];
        let spec = IntegratorSpec { candidates: 0, ..IntegratorSpec::ds_search() };
        let mut st = SampleStreams::for_rows(&RandomSource::new(3, 0), 0, 1);
        let out = hutchinson_search_correct(&f, &x, 0.1, &spec, &mut st).unwrap();
        assert_eq!(out.x, x);
        assert_eq!(out.v, f.velocity(0.1, &x));
        assert!(!out.moved[0]);
    }

    #[test]
    fn search_ties_keep_incumbent_on_linear_fields() {
        // d = 1: every Rademacher probe gives e^2 J = J exactly, so all
        // candidates tie with the incumbent.
        let f = LinearField::new(vec![vec![3.0]]);
        let x = array![[0.7], [-1.2]];
        let spec = IntegratorSpec { delta: 0.5, ..IntegratorSpec::ds_search() };
        let mut st = SampleStreams::for_rows(&RandomSource::new(4, 0), 0, 2);
        let out = hutchinson_search_correct(&f, &x, 0.3, &spec, &mut st).unwrap();
        assert_eq!(out.x, x);
        assert_eq!(out.moved, vec![false, false]);
        assert_eq!(out.estimate, vec![3.0, 3.0]);
    }

    #[test]
    fn search_moves_towards_low_divergence() {
        // div = x1^2 is minimised on x1 = 0; with d = 2 the estimate is
        // (e1^2 x1^2) / 2 = x1^2 / 2 for every probe, so it is exact.
        let f = AnalyticField::cubic_shear();
        let spec = IntegratorSpec { delta: 0.3, candidates: 32, hutch_probes: 4, ..IntegratorSpec::ds_search() };
        let mut closer = 0;
        for seed in 0..100 {
            let mut st = SampleStreams::for_rows(&RandomSource::new(seed, 0), 0, 1);
            let out = hutchinson_search_correct(&f, &array![[0.5, 0.0]], 0.0, &spec, &mut st).unwrap();
            if out.x[[0, 0]].abs() < 0.5 {
                closer += 1;
            }
            assert!(out.estimate[0].abs() <= out.incumbent_estimate[0].abs());
        }
        assert!(closer >= 99, "{closer} / 100");
    }

    fn tiny_net(seed: u64) -> ModelParams {
        ModelParams::init(&ModelSpec::new(2, vec![16, 16]).unwrap(), &mut RandomSource::new(seed, 0))
    }

    #[test]
    fn euler_ds_reduces_to_euler() {
        let net = tiny_net(2);
        let x0 = sample_gaussian(&mut RandomSource::new(5, 5), 12, 2);
        let plain = euler(&net, &x0, 20).unwrap();
        for spec in [
            IntegratorSpec { delta: 0.0, ..IntegratorSpec::ds_search() },
            IntegratorSpec { candidates: 0, ..IntegratorSpec::ds_search() },
            IntegratorSpec { t_stop: 0.0, ..IntegratorSpec::ds_search() },
        ] {
            let mut st = SampleStreams::for_rows(&RandomSource::new(9, 0), 0, 12);
            let (x, _) = euler_ds(&net, &x0, &spec, &mut st).unwrap();
            assert_eq!(x, plain, "{spec:?}");
        }
    }

    #[test]
    fn default_search_corrects_ten_of_twenty_steps_at_81_passes_each() {
        let spec = IntegratorSpec::ds_search();
        assert_eq!(spec.corrected_steps(), 10);
        assert_eq!(spec.search_passes_per_step(), 81);
        let net = Counted::new(tiny_net(3));
        let x0 = sample_gaussian(&mut RandomSource::new(1, 1), 4, 2);
        let mut st = SampleStreams::for_rows(&RandomSource::new(2, 0), 0, 4);
        let (_, stats) = euler_ds(&net, &x0, &spec, &mut st).unwrap();
        assert_eq!(stats.corrected_steps, 10);
        // 10 corrected steps at 81 passes plus 10 plain forward passes.
        assert_eq!(net.counts().total(), 10 * 81 + 10);

        net.reset();
        let mut st = SampleStreams::for_rows(&RandomSource::new(2, 0), 0, 4);
        hutchinson_search_correct(&net, &x0, 0.0, &spec, &mut st).unwrap();
        assert_eq!(net.counts().total(), 81);
    }

    #[test]
    fn budget_gate_skips_in_budget_states() {
        let f = AnalyticField::cubic_shear();
        let spec = IntegratorSpec { delta: 0.3, candidates: 16, div_budget: 1.0, ..IntegratorSpec::ds_search() };
        let mut st = SampleStreams::for_rows(&RandomSource::new(1, 0), 0, 1);
        // Estimate x1^2 / 2 = 0.125 is within the budget.
        let out = hutchinson_search_correct(&f, &array![[0.5, 0.0]], 0.0, &spec, &mut st).unwrap();
        assert!(!out.moved[0]);
    }

    #[test]
    fn rkf45_constant_field_takes_one_step() {
        let f = ConstantField(vec![1.0, -2.0]);
        let (x, stats) = rkf45(&f, &[0.5, 0.5], 1e-6).unwrap();
        assert_eq!(stats.accepted, 1);
        assert!((x[0] - 1.5).abs() < 1e-14 && (x[1] + 1.5).abs() < 1e-14);
    }

    #[test]
    fn rkf45_exponential_growth() {
        let x0 = [1.0, -0.5];
        let (x, _) = rkf45(&identity_field(), &x0, 1e-8).unwrap();
        for k in 0..2 {
            let exact = x0[k] * std::f64::consts::E;
            assert!(((x[k] - exact) / exact).abs() <= 1e-6);
        }
        let mut last = f64::INFINITY;
        for tol in [1e-4, 1e-5, 1e-6, 1e-7, 1e-8] {
            let (x, _) = rkf45(&identity_field(), &[1.0, 0.0], tol).unwrap();
            let err = (x[0] - std::f64::consts::E).abs();
            assert!(err < last, "tol {tol}: {err} !< {last}");
            last = err;
        }
    }

    #[test]
    fn rkf45_ds_reduces_to_rkf45() {
        let net = tiny_net(4);
        let (plain, _) = rkf45(&net, &[0.3, -0.4], 1e-6).unwrap();
        for spec in [
            IntegratorSpec { delta: 0.0, ..IntegratorSpec::rkf45_ds(1e-6) },
            IntegratorSpec { t_stop: 0.0, ..IntegratorSpec::rkf45_ds(1e-6) },
        ] {
            let (x, _) =
                rkf45_ds(&net, &[0.3, -0.4], &spec, &mut RandomSource::new(1, 1), &mut RandomSource::new(1, 2))
                    .unwrap();
            assert_eq!(x, plain);
        }
    }

    #[test]
    fn rkf45_ds_pass_accounting() {
        let net = Counted::new(tiny_net(5));
        let spec = IntegratorSpec { delta: 0.2, ..IntegratorSpec::rkf45_ds(1e-7) };
        let (_, stats) =
            rkf45_ds(&net, &[0.1, 0.9], &spec, &mut RandomSource::new(2, 1), &mut RandomSource::new(2, 2)).unwrap();
        assert!(stats.corrected_steps > 0);
        assert_eq!(stats.search_passes, stats.corrected_steps as u64 * 81);
        assert_eq!(net.counts().total(), stats.rk_passes + stats.corrected_steps as u64 * 81 + stats.recompute_passes);
    }

    #[test]
    fn generate_coupling_matches_direct_euler() {
        let net = tiny_net(6);
        let root = RandomSource::new(12, 0);
        let c = generate_coupling(&net, &root, 5, &IntegratorSpec::euler(20), 1).unwrap();
        let x0 = sample_gaussian(&mut root.split(0), 5, 2);
        assert_eq!(c.x0, x0);
        assert_eq!(c.x1, euler(&net, &x0, 20).unwrap());
        assert_eq!(c.provenance.generator, "euler");
    }

    #[test]
    fn corrections_do_not_perturb_sources() {
        let net = tiny_net(7);
        let root = RandomSource::new(13, 0);
        let a = generate_coupling(&net, &root, 6, &IntegratorSpec::euler(20), 1).unwrap();
        let spec = IntegratorSpec { delta: 0.3, ..IntegratorSpec::ds_search() };
        let b = generate_coupling(&net, &root, 6, &spec, 1).unwrap();
        assert_eq!(a.x0, b.x0);
        assert_ne!(a.x1, b.x1);
    }

    #[test]
    fn validation() {
        assert!(IntegratorSpec { t_stop: 1.5, ..IntegratorSpec::ds_search() }.validate().is_err());
        assert!(IntegratorSpec { hutch_probes: 0, ..IntegratorSpec::ds_search() }.validate().is_err());
        assert!(IntegratorSpec::euler(0).validate().is_err());
        assert!(IntegratorSpec { alpha: 2.0, ..IntegratorSpec::ds_project_2d(20, 0.5) }.validate().is_err());
        for k in IntegratorKind::ALL {
            assert_eq!(IntegratorKind::parse(k.tag()), Some(k));
        }
    }
}
