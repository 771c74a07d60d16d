//! Why the divergence search helps: relate where a field contracts volume
//! instantaneously to how much the flow map has compressed it by mid-flight.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::integrators::euler_partial;
use crate::metrics::{crossing_proxy, pearson, spearman, CROSSING_RADIUS};
use crate::model::{exact_divergence, VelocityField};
use crate::ndcore::{det, sample_gaussian, RandomSource};
use crate::{Error, Result};

pub const MECHANISM_CSV_HEADER: &str = "x0_x,x0_y,xh_x,xh_y,convergence,compression";
/// Determinants below this are treated as singular.
pub const MIN_ABS_DET: f64 = 1e-300;
pub const DEFAULT_FD_EPS: f64 = 0.05;
const ROW_CHUNK: usize = 512;

/// `max(0, -div v(t, x))` per row.
pub fn convergence_field<F: VelocityField + ?Sized>(field: &F, points: &Array2<f64>, t: f64) -> Result<Vec<f64>> {
    let (_, div) = exact_divergence(field, t, points)?;
    Ok(div.into_iter().map(|d| (-d).max(0.0)).collect())
}

pub fn mean_abs_divergence<F: VelocityField + ?Sized>(field: &F, points: &Array2<f64>, t: f64) -> Result<f64> {
    if points.nrows() == 0 {
        return Err(Error::InvalidInput("no points".into()));
    }
    let (_, div) = exact_divergence(field, t, points)?;
    Ok(div.iter().map(|d| d.abs()).sum::<f64>() / div.len() as f64)
}

/// Compression score of each start point.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressionScores {
    /// `max(0, -ln|det J|)`.
    pub scores: Vec<f64>,
    /// Rows whose `|det J|` fell below [`MIN_ABS_DET`]; their score is capped
    /// at `-ln MIN_ABS_DET`.
    pub capped: Vec<bool>,
}

/// `max(0, -ln|det J|)` where `J` is the central-difference Jacobian (step
/// `fd_eps` along each axis) of the Euler flow map over the first `N / 2`
/// steps of an `N`-step grid.
pub fn compression_score<F: VelocityField + ?Sized>(
    field: &F,
    x0: &Array2<f64>,
    n_steps: usize,
    fd_eps: f64,
) -> Result<CompressionScores> {
    if !(fd_eps > 0.0) {
        return Err(Error::InvalidInput("fd_eps must be positive".into()));
    }
    let (n, d) = x0.dim();
    // Rows ordered as [x + eps e_0, x - eps e_0, x + eps e_1, ...] per point.
    let mut probes = Array2::zeros((n * 2 * d, d));
    for i in 0..n {
        for k in 0..d {
            for (sgn, off) in [(1.0, 0), (-1.0, 1)] {
                let r = i * 2 * d + 2 * k + off;
                probes.row_mut(r).assign(&x0.row(i));
                probes[[r, k]] += sgn * fd_eps;
            }
        }
    }
    let mapped = map_rows(field, &probes, n_steps, n_steps / 2)?;
    let cap = -MIN_ABS_DET.ln();
    let mut scores = Vec::with_capacity(n);
    let mut capped = Vec::with_capacity(n);
    for i in 0..n {
        let jac: Vec<Vec<f64>> = (0..d)
            .map(|row| {
                (0..d)
                    .map(|k| {
                        let base = i * 2 * d + 2 * k;
                        (mapped[[base, row]] - mapped[[base + 1, row]]) / (2.0 * fd_eps)
                    })
                    .collect()
            })
            .collect();
        let dj = det(jac).abs();
        if dj < MIN_ABS_DET || !dj.is_finite() {
            scores.push(cap);
            capped.push(true);
        } else {
            scores.push((-dj.ln()).max(0.0));
            capped.push(false);
        }
    }
    Ok(CompressionScores { scores, capped })
}

fn map_rows<F: VelocityField + ?Sized>(
    field: &F,
    x: &Array2<f64>,
    n_steps: usize,
    steps: usize,
) -> Result<Array2<f64>> {
    let starts: Vec<usize> = (0..x.nrows()).step_by(ROW_CHUNK).collect();
    let parts = starts
        .par_iter()
        .map(|&lo| {
            let hi = (lo + ROW_CHUNK).min(x.nrows());
            euler_partial(field, &x.slice(s![lo..hi, ..]).to_owned(), n_steps, steps)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(ndarray::concatenate(ndarray::Axis(0), &views).expect("chunks share a width"))
}

/// `ln|det J|` of the Euler flow map over `steps` steps of an `N`-step grid,
/// accumulated exactly as `sum_i ln|det(I + dt Dv(t_i, x_i))|` with forward
/// tangents. Returns the end states alongside.
pub fn flow_map_logdet<F: VelocityField + ?Sized>(
    field: &F,
    x0: &Array2<f64>,
    n_steps: usize,
    steps: usize,
) -> Result<(Array2<f64>, Vec<f64>)> {
    if n_steps == 0 {
        return Err(Error::InvalidInput("N must be >= 1".into()));
    }
    let (n, d) = x0.dim();
    let dt = 1.0 / n_steps as f64;
    let basis: Vec<Array2<f64>> =
        (0..d).map(|k| Array2::from_shape_fn((n, d), |(_, j)| if j == k { 1.0 } else { 0.0 })).collect();
    let mut x = x0.clone();
    let mut logdet = vec![0.0; n];
    for i in 0..steps.min(n_steps) {
        let (v, cols) = field.velocity_jvps(i as f64 * dt, &x, &basis);
        for r in 0..n {
            let m: Vec<Vec<f64>> = (0..d)
                .map(|a| (0..d).map(|b| if a == b { 1.0 } else { 0.0 } + dt * cols[b][[r, a]]).collect())
                .collect();
            logdet[r] += det(m).abs().ln();
        }
        x.scaled_add(dt, &v);
    }
    Ok((x, logdet))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MechanismRecord {
    pub x0: [f64; 2],
    pub x_half: [f64; 2],
    pub convergence: f64,
    pub compression: f64,
}

/// Statistics for one model.
#[derive(Clone, Debug)]
pub struct MechanismResult {
    pub name: String,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    /// Mean |div v(0.5, .)| over the mid-flight states.
    pub mean_abs_div: f64,
    pub crossing_frac: f64,
    pub capped: usize,
    pub records: Vec<MechanismRecord>,
}

impl MechanismResult {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{MECHANISM_CSV_HEADER}")?;
        for r in &self.records {
            writeln!(f, "{},{},{},{},{},{}", r.x0[0], r.x0[1], r.x_half[0], r.x_half[1], r.convergence, r.compression)?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Sample `n` sources from `seed`, run Euler over the first half of an
/// `N`-step grid under every model, and relate convergence at the mid-flight
/// state to the compression score of its source. All models share sources.
pub fn mechanism_study(
    models: &[(&str, &dyn VelocityField)],
    n: usize,
    n_steps: usize,
    seed: u64,
) -> Result<Vec<MechanismResult>> {
    if n == 0 || n_steps < 2 {
        return Err(Error::InvalidInput("need n >= 1 and N >= 2".into()));
    }
    let x0 = sample_gaussian(&mut RandomSource::new(seed, 0).split(0), n, 2);
    let t_half = (n_steps / 2) as f64 / n_steps as f64;
    models
        .iter()
        .map(|(name, field)| {
            let field: &dyn VelocityField = *field;
            if field.dim() != 2 {
                return Err(Error::InvalidInput(format!("{name}: the study is planar")));
            }
            let xh = map_rows(field, &x0, n_steps, n_steps / 2)?;
            let (v, div) = exact_divergence(field, t_half, &xh)?;
            let conv: Vec<f64> = div.iter().map(|d| (-d).max(0.0)).collect();
            let comp = compression_score(field, &x0, n_steps, DEFAULT_FD_EPS)?;
            let records = (0..n)
                .map(|i| MechanismRecord {
                    x0: [x0[[i, 0]], x0[[i, 1]]],
                    x_half: [xh[[i, 0]], xh[[i, 1]]],
                    convergence: conv[i],
                    compression: comp.scores[i],
                })
                .collect();
            Ok(MechanismResult {
                name: name.to_string(),
                pearson: pearson(&conv, &comp.scores),
                spearman: spearman(&conv, &comp.scores),
                mean_abs_div: div.iter().map(|d| d.abs()).sum::<f64>() / n as f64,
                crossing_frac: crossing_proxy(&xh, &v, CROSSING_RADIUS)?,
                capped: comp.capped.iter().filter(|&&c| c).count(),
                records,
            })
        })
        .collect()
}
