//! The two planar targets: a 4x4 checkerboard and a rotated three-mode
//! Gaussian mixture. Both sources are the standard Gaussian.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::ndcore::{RandomSource, Vec2};
use crate::Result;

/// Checkerboard on `[-0.9, 0.9)^2`: 4x4 cells of side 0.45 with half-open
/// intervals `[lo, hi)`. Cell `(i, j)` (column `i` along x, row `j` along y)
/// is black when `(i + j) % 2 == black_parity`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckerboardSpec {
    pub grid: usize,
    pub cell_side: f64,
    pub origin: Vec2,
    pub black_parity: usize,
}

impl Default for CheckerboardSpec {
    fn default() -> Self {
        Self { grid: 4, cell_side: 0.45, origin: Vec2::new(-0.9, -0.9), black_parity: 0 }
    }
}

impl CheckerboardSpec {
    /// The complementary colouring.
    pub fn flipped(&self) -> Self {
        Self { black_parity: 1 - self.black_parity, ..self.clone() }
    }

    fn edge(&self, origin: f64, i: i64) -> f64 {
        origin + self.cell_side * i as f64
    }

    /// Index of the half-open cell containing `v` along one axis, if inside
    /// the grid.
    fn cell_index(&self, origin: f64, v: f64) -> Option<usize> {
        if !v.is_finite() {
            return None;
        }
        let f = ((v - origin) / self.cell_side).floor();
        if !(-2.0..=self.grid as f64 + 2.0).contains(&f) {
            return None;
        }
        let mut i = f as i64;
        // Align with the edges used by the sampler.
        while v < self.edge(origin, i) {
            i -= 1;
        }
        while v >= self.edge(origin, i + 1) {
            i += 1;
        }
        (0..self.grid as i64).contains(&i).then_some(i as usize)
    }

    pub fn black_cells(&self) -> Vec<(usize, usize)> {
        let mut cells = Vec::new();
        for j in 0..self.grid {
            for i in 0..self.grid {
                if (i + j) % 2 == self.black_parity {
                    cells.push((i, j));
                }
            }
        }
        cells
    }

    pub fn black_area(&self) -> f64 {
        self.black_cells().len() as f64 * self.cell_side * self.cell_side
    }

    pub fn in_black_cell(&self, p: Vec2) -> bool {
        match (self.cell_index(self.origin.x, p.x), self.cell_index(self.origin.y, p.y)) {
            (Some(i), Some(j)) => (i + j) % 2 == self.black_parity,
            _ => false,
        }
    }

    /// Which black cell (by position in [`Self::black_cells`]) contains `p`.
    pub fn black_cell_of(&self, p: Vec2) -> Option<usize> {
        let i = self.cell_index(self.origin.x, p.x)?;
        let j = self.cell_index(self.origin.y, p.y)?;
        self.black_cells().iter().position(|&c| c == (i, j))
    }

    fn uniform_in(&self, rng: &mut RandomSource, origin: f64, i: usize) -> f64 {
        let lo = self.edge(origin, i as i64);
        let hi = self.edge(origin, i as i64 + 1);
        let v = lo + self.cell_side * rng.uniform();
        if v >= hi {
            lo
        } else {
            v
        }
    }

    /// `n` points, each uniform in a uniformly chosen black cell.
    pub fn sample(&self, rng: &mut RandomSource, n: usize) -> Array2<f64> {
        let cells = self.black_cells();
        let mut out = Array2::zeros((n, 2));
        for r in 0..n {
            let (i, j) = cells[rng.below(cells.len())];
            out[[r, 0]] = self.uniform_in(rng, self.origin.x, i);
            out[[r, 1]] = self.uniform_in(rng, self.origin.y, j);
        }
        out
    }
}

pub fn in_black_cell(p: Vec2) -> bool {
    CheckerboardSpec::default().in_black_cell(p)
}

pub fn sample_checkerboard(rng: &mut RandomSource, n: usize) -> Array2<f64> {
    CheckerboardSpec::default().sample(rng, n)
}

/// Equal-weight mixture of isotropic Gaussians.
pub fn sample_gmm(rng: &mut RandomSource, n: usize, means: &[Vec2], variance: f64) -> Array2<f64> {
    assert!(!means.is_empty() && variance >= 0.0);
    let sd = variance.sqrt();
    let mut out = Array2::zeros((n, 2));
    for r in 0..n {
        let m = means[rng.below(means.len())];
        out[[r, 0]] = m.x + sd * rng.gaussian();
        out[[r, 1]] = m.y + sd * rng.gaussian();
    }
    out
}

/// Three-mode source and target mixtures on an equilateral triangle of
/// circumradius `D`; the target is the source rotated by 60 degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    pub variance: f64,
    pub circumradius: f64,
}

impl Default for GmmSpec {
    fn default() -> Self {
        Self { variance: 0.3, circumradius: 10.0 }
    }
}

impl GmmSpec {
    pub fn source_means(&self) -> Vec<Vec2> {
        let d = self.circumradius;
        let h = d * 3f64.sqrt() / 2.0;
        vec![Vec2::new(h, d / 2.0), Vec2::new(-h, d / 2.0), Vec2::new(0.0, -d)]
    }

    pub fn target_means(&self) -> Vec<Vec2> {
        let d = self.circumradius;
        let h = d * 3f64.sqrt() / 2.0;
        vec![Vec2::new(h, -d / 2.0), Vec2::new(-h, -d / 2.0), Vec2::new(0.0, d)]
    }

    pub fn sample_source(&self, rng: &mut RandomSource, n: usize) -> Array2<f64> {
        sample_gmm(rng, n, &self.source_means(), self.variance)
    }

    pub fn sample_target(&self, rng: &mut RandomSource, n: usize) -> Array2<f64> {
        sample_gmm(rng, n, &self.target_means(), self.variance)
    }
}

/// Target distribution selector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BenchmarkSpec {
    Checkerboard(CheckerboardSpec),
    Gmm(GmmSpec),
}

impl BenchmarkSpec {
    pub fn checkerboard() -> Self {
        Self::Checkerboard(CheckerboardSpec::default())
    }

    pub fn gmm() -> Self {
        Self::Gmm(GmmSpec::default())
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Checkerboard(_) => "checkerboard",
            Self::Gmm(_) => "gmm",
        }
    }

    pub fn sample_target(&self, rng: &mut RandomSource, n: usize) -> Array2<f64> {
        match self {
            Self::Checkerboard(c) => c.sample(rng, n),
            Self::Gmm(g) => g.sample_target(rng, n),
        }
    }

    /// Source draws: the standard Gaussian for both benchmarks.
    pub fn sample_source(&self, rng: &mut RandomSource, n: usize) -> Array2<f64> {
        crate::ndcore::sample_gaussian(rng, n, 2)
    }

    pub fn checkerboard_spec(&self) -> Option<&CheckerboardSpec> {
        match self {
            Self::Checkerboard(c) => Some(c),
            Self::Gmm(_) => None,
        }
    }
}

/// CSV dump with header `x,y`.
pub fn write_samples_csv(path: &Path, points: &Array2<f64>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "x,y")?;
    for r in points.rows() {
        writeln!(f, "{},{}", r[0], r[1])?;
    }
    f.flush()?;
    Ok(())
}

/// Convenience for code that works on single points.
pub fn row_point(a: &Array2<f64>, i: usize) -> Vec2 {
    Vec2::new(a[[i, 0]], a[[i, 1]])
}
