//! Sample-quality metrics and the statistics used by the mechanism study.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmarks::CheckerboardSpec;
use crate::ndcore::{sample_unit_sphere, RandomSource, Vec2};
use crate::{Error, Result};

pub const METRIC_CSV_HEADER: &str = "method,round,nfe,swd,forbidden_frac,wall_time_s,n_samples,seed";

/// Per-slice transport cost.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwdOrder {
    W1,
    #[default]
    W2,
}

/// Mean over `n_proj` uniform directions of the 1-D Wasserstein distance
/// between sorted projections. Directions are drawn in order from `rng`.
pub fn sliced_wasserstein(a: &Array2<f64>, b: &Array2<f64>, n_proj: usize, rng: &mut RandomSource) -> Result<f64> {
    sliced_wasserstein_with(a, b, n_proj, rng, SwdOrder::W2)
}

pub fn sliced_wasserstein_with(
    a: &Array2<f64>,
    b: &Array2<f64>,
    n_proj: usize,
    rng: &mut RandomSource,
    order: SwdOrder,
) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::InvalidInput(format!("sample sets differ in shape: {:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.nrows() == 0 || n_proj == 0 {
        return Err(Error::InvalidInput("need nonempty samples and n_proj >= 1".into()));
    }
    let d = a.ncols();
    let dirs: Vec<Vec<f64>> = (0..n_proj).map(|_| sample_unit_sphere(rng, d)).collect();
    let project = |m: &Array2<f64>, th: &[f64]| -> Vec<f64> {
        let mut p: Vec<f64> = m.rows().into_iter().map(|r| r.iter().zip(th).map(|(x, w)| x * w).sum()).collect();
        p.sort_unstable_by(f64::total_cmp);
        p
    };
    let n = a.nrows() as f64;
    let slices: Vec<f64> = dirs
        .par_iter()
        .map(|th| {
            let (pa, pb) = (project(a, th), project(b, th));
            match order {
                SwdOrder::W2 => (pa.iter().zip(&pb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n).sqrt(),
                SwdOrder::W1 => pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum::<f64>() / n,
            }
        })
        .collect();
    Ok(slices.iter().sum::<f64>() / n_proj as f64)
}

/// Share of samples outside the black cells of `board`.
pub fn forbidden_fraction(samples: &Array2<f64>, board: &CheckerboardSpec) -> Result<f64> {
    if samples.nrows() == 0 || samples.ncols() != 2 {
        return Err(Error::InvalidInput("need a nonempty planar sample set".into()));
    }
    let inside = samples.rows().into_iter().filter(|r| board.in_black_cell(Vec2::new(r[0], r[1]))).count();
    Ok(1.0 - inside as f64 / samples.nrows() as f64)
}

/// Sample Pearson correlation; `None` when either input has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average-tied ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.is_empty() {
        return None;
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Default neighbourhood radius of [`crossing_proxy`].
pub const CROSSING_RADIUS: f64 = 0.05;

/// Fraction of points with a neighbour within `radius` whose velocity points
/// more than 90 degrees away from their own.
pub fn crossing_proxy(states: &Array2<f64>, velocities: &Array2<f64>, radius: f64) -> Result<f64> {
    if states.dim() != velocities.dim() || states.nrows() == 0 {
        return Err(Error::InvalidInput("states and velocities must be aligned and nonempty".into()));
    }
    let n = states.nrows();
    let d = states.ncols();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| states[[a, 0]].total_cmp(&states[[b, 0]]));
    let r2 = radius * radius;
    let mut flagged = vec![false; n];
    for (pos, &i) in order.iter().enumerate() {
        for &j in &order[pos + 1..] {
            if states[[j, 0]] - states[[i, 0]] > radius {
                break;
            }
            let dist2: f64 = (0..d).map(|k| (states[[i, k]] - states[[j, k]]).powi(2)).sum();
            if dist2 > r2 {
                continue;
            }
            let dot: f64 = (0..d).map(|k| velocities[[i, k]] * velocities[[j, k]]).sum();
            if dot < 0.0 {
                flagged[i] = true;
                flagged[j] = true;
            }
        }
    }
    Ok(flagged.iter().filter(|&&f| f).count() as f64 / n as f64)
}

/// One row of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub round: usize,
    pub nfe: u64,
    pub swd: f64,
    /// `None` off the checkerboard.
    pub forbidden_frac: Option<f64>,
    pub wall_time_s: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl MetricReport {
    pub fn csv_row(&self) -> String {
        let ff = self.forbidden_frac.map(|f| f.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.method, self.round, self.nfe, self.swd, ff, self.wall_time_s, self.n_samples, self.seed
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::InvalidInput(format!("malformed metrics row {line:?}"));
        if f.len() != 8 {
            return Err(bad());
        }
        Ok(Self {
            method: f[0].to_string(),
            round: f[1].parse().map_err(|_| bad())?,
            nfe: f[2].parse().map_err(|_| bad())?,
            swd: f[3].parse().map_err(|_| bad())?,
            forbidden_frac: if f[4].is_empty() { None } else { Some(f[4].parse().map_err(|_| bad())?) },
            wall_time_s: f[5].parse().map_err(|_| bad())?,
            n_samples: f[6].parse().map_err(|_| bad())?,
            seed: f[7].parse().map_err(|_| bad())?,
        })
    }
}

pub fn write_metric_csv(path: &Path, rows: &[MetricReport]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{METRIC_CSV_HEADER}")?;
    for r in rows {
        writeln!(f, "{}", r.csv_row())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_metric_csv(path: &Path) -> Result<Vec<MetricReport>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(METRIC_CSV_HEADER) {
        return Err(Error::InvalidInput(format!("{} lacks the metrics header", path.display())));
    }
    lines.filter(|l| !l.trim().is_empty()).map(MetricReport::parse_csv_row).collect()
}
