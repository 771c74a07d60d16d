//! Periodic Helmholtz split of a gridded planar field, `v = u + grad phi`
//! with `div u = 0`.
//!
//! Difference operators are central differences with periodic wrap; the
//! Poisson solve diagonalises the same stencil in the Fourier basis, whose
//! symbol along an axis of `n` cells and spacing `h` is `i sin(2 pi p / n) / h`.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::model::VelocityField;
use crate::{Error, Result};

pub const MIN_GRID: usize = 8;
pub const GRID_CSV_HEADER: &str = "i,j,x,y,vx,vy,ux,uy,gpx,gpy,div,curl";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    #[default]
    Periodic,
    /// Accepted by the type for completeness; rejected by [`decompose`].
    Open,
}

/// Cell-centred lattice over `[x_min, x_max) x [y_min, y_max)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub boundary: Boundary,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, x: (f64, f64), y: (f64, f64)) -> Result<Self> {
        let g = Self { nx, ny, x_min: x.0, x_max: x.1, y_min: y.0, y_max: y.1, boundary: Boundary::Periodic };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < MIN_GRID || self.ny < MIN_GRID {
            return Err(Error::GridTooSmall { nx: self.nx, ny: self.ny });
        }
        if !(self.x_max > self.x_min && self.y_max > self.y_min) {
            return Err(Error::InvalidInput("empty grid extent".into()));
        }
        Ok(())
    }

    pub fn hx(&self) -> f64 {
        (self.x_max - self.x_min) / self.nx as f64
    }

    pub fn hy(&self) -> f64 {
        (self.y_max - self.y_min) / self.ny as f64
    }

    pub fn center(&self, i: usize, j: usize) -> (f64, f64) {
        (self.x_min + (i as f64 + 0.5) * self.hx(), self.y_min + (j as f64 + 0.5) * self.hy())
    }
}

/// Planar field on a grid; `vx[[i, j]]` sits at `center(i, j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    pub grid: GridSpec,
    pub vx: Array2<f64>,
    pub vy: Array2<f64>,
}

impl GridField {
    pub fn new(grid: GridSpec, vx: Array2<f64>, vy: Array2<f64>) -> Result<Self> {
        grid.validate()?;
        if vx.dim() != (grid.nx, grid.ny) || vy.dim() != (grid.nx, grid.ny) {
            return Err(Error::InvalidInput("component shapes must be (nx, ny)".into()));
        }
        if vx.iter().chain(vy.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid field".into()));
        }
        Ok(Self { grid, vx, vy })
    }

    /// Samples `f(x, y)` at every cell centre.
    pub fn from_fn(grid: GridSpec, f: impl Fn(f64, f64) -> (f64, f64)) -> Result<Self> {
        let mut vx = Array2::zeros((grid.nx, grid.ny));
        let mut vy = Array2::zeros((grid.nx, grid.ny));
        for i in 0..grid.nx {
            for j in 0..grid.ny {
                let (x, y) = grid.center(i, j);
                let (a, b) = f(x, y);
                vx[[i, j]] = a;
                vy[[i, j]] = b;
            }
        }
        Self::new(grid, vx, vy)
    }

    pub fn max_norm(&self) -> f64 {
        self.vx.iter().zip(self.vy.iter()).fold(0.0f64, |m, (a, b)| m.max(a.hypot(*b)))
    }

    /// Grid inner product `sum_ij u . w`.
    pub fn dot(&self, other: &GridField) -> f64 {
        (&self.vx * &other.vx).sum() + (&self.vy * &other.vy).sum()
    }
}

/// `v(t, .)` at every cell centre.
pub fn grid_sample_field<F: VelocityField + ?Sized>(field: &F, t: f64, grid: &GridSpec) -> Result<GridField> {
    grid.validate()?;
    if field.dim() != 2 {
        return Err(Error::InvalidInput("grid sampling is planar".into()));
    }
    let pts = Array2::from_shape_fn((grid.nx * grid.ny, 2), |(r, k)| {
        let (x, y) = grid.center(r / grid.ny, r % grid.ny);
        if k == 0 {
            x
        } else {
            y
        }
    });
    let v = field.velocity(t, &pts);
    let vx = Array2::from_shape_fn((grid.nx, grid.ny), |(i, j)| v[[i * grid.ny + j, 0]]);
    let vy = Array2::from_shape_fn((grid.nx, grid.ny), |(i, j)| v[[i * grid.ny + j, 1]]);
    GridField::new(grid.clone(), vx, vy)
}

fn ddx(a: &Array2<f64>, h: f64) -> Array2<f64> {
    let (nx, ny) = a.dim();
    Array2::from_shape_fn((nx, ny), |(i, j)| (a[[(i + 1) % nx, j]] - a[[(i + nx - 1) % nx, j]]) / (2.0 * h))
}

fn ddy(a: &Array2<f64>, h: f64) -> Array2<f64> {
    let (nx, ny) = a.dim();
    Array2::from_shape_fn((nx, ny), |(i, j)| (a[[i, (j + 1) % ny]] - a[[i, (j + ny - 1) % ny]]) / (2.0 * h))
}

fn require_periodic(f: &GridField) -> Result<()> {
    match f.grid.boundary {
        Boundary::Periodic => Ok(()),
        Boundary::Open => Err(Error::NonPeriodic),
    }
}

pub fn grid_divergence(f: &GridField) -> Result<Array2<f64>> {
    require_periodic(f)?;
    Ok(ddx(&f.vx, f.grid.hx()) + ddy(&f.vy, f.grid.hy()))
}

/// Scalar curl `d vy / dx - d vx / dy`.
pub fn grid_curl(f: &GridField) -> Result<Array2<f64>> {
    require_periodic(f)?;
    Ok(ddx(&f.vy, f.grid.hx()) - ddy(&f.vx, f.grid.hy()))
}

pub fn grid_gradient(phi: &Array2<f64>, grid: &GridSpec) -> Result<GridField> {
    GridField::new(grid.clone(), ddx(phi, grid.hx()), ddy(phi, grid.hy()))
}

/// Symbol magnitude `sin(2 pi p / n) / h`; exactly zero where the stencil
/// annihilates the mode (`p = 0` and the Nyquist mode).
fn symbol(p: usize, n: usize, h: f64) -> f64 {
    if p == 0 || 2 * p == n {
        0.0
    } else {
        (std::f64::consts::TAU * p as f64 / n as f64).sin() / h
    }
}

fn fft2(data: &mut Array2<Complex64>, inverse: bool) {
    let (nx, ny) = data.dim();
    let mut planner = FftPlanner::new();
    let (fx, fy) = if inverse {
        (planner.plan_fft_inverse(nx), planner.plan_fft_inverse(ny))
    } else {
        (planner.plan_fft_forward(nx), planner.plan_fft_forward(ny))
    };
    let mut buf = vec![Complex64::new(0.0, 0.0); nx.max(ny)];
    for i in 0..nx {
        for j in 0..ny {
            buf[j] = data[[i, j]];
        }
        fy.process(&mut buf[..ny]);
        for j in 0..ny {
            data[[i, j]] = buf[j];
        }
    }
    for j in 0..ny {
        for i in 0..nx {
            buf[i] = data[[i, j]];
        }
        fx.process(&mut buf[..nx]);
        for i in 0..nx {
            data[[i, j]] = buf[i];
        }
    }
    if inverse {
        let s = 1.0 / (nx * ny) as f64;
        data.mapv_inplace(|z| z * s);
    }
}

/// Periodic Poisson solve `lap phi = rhs` for the central-difference
/// Laplacian, with mean-zero gauge. Modes the operator annihilates get zero.
pub fn solve_poisson(rhs: &Array2<f64>, grid: &GridSpec) -> Array2<f64> {
    let (nx, ny) = rhs.dim();
    let mut hat = rhs.mapv(|v| Complex64::new(v, 0.0));
    fft2(&mut hat, false);
    for p in 0..nx {
        let sx = symbol(p, nx, grid.hx());
        for q in 0..ny {
            let sy = symbol(q, ny, grid.hy());
            let l = -(sx * sx + sy * sy);
            hat[[p, q]] = if l == 0.0 { Complex64::new(0.0, 0.0) } else { hat[[p, q]] / l };
        }
    }
    fft2(&mut hat, true);
    hat.mapv(|z| z.re)
}

#[derive(Clone, Debug)]
pub struct HelmholtzDecomposition {
    /// Divergence-free transport part.
    pub transport: GridField,
    pub potential: Array2<f64>,
    /// Irrotational part `grad phi`.
    pub dipole: GridField,
}

pub fn decompose(v: &GridField) -> Result<HelmholtzDecomposition> {
    require_periodic(v)?;
    let div = grid_divergence(v)?;
    let potential = solve_poisson(&div, &v.grid);
    let dipole = grid_gradient(&potential, &v.grid)?;
    let transport = GridField::new(v.grid.clone(), &v.vx - &dipole.vx, &v.vy - &dipole.vy)?;
    Ok(HelmholtzDecomposition { transport, potential, dipole })
}

/// Cosine `|<u, grad phi>| / (||u|| ||grad phi||)` between the two parts.
///
/// A part whose norm is at most `1e-10 ||v||` is an exact zero carrying
/// rounding noise (the transport of a pure gradient, say); the cosine of
/// noise against a field is meaningless, so it reports 0 as for a true zero.
pub fn orthogonality(v: &GridField, dec: &HelmholtzDecomposition) -> f64 {
    let floor = 1e-10 * v.dot(v).sqrt();
    let (nu, ng) = (dec.transport.dot(&dec.transport).sqrt(), dec.dipole.dot(&dec.dipole).sqrt());
    if nu <= floor || ng <= floor {
        return 0.0;
    }
    dec.transport.dot(&dec.dipole).abs() / (nu * ng)
}

pub fn write_grid_csv(path: &Path, v: &GridField, dec: &HelmholtzDecomposition) -> Result<()> {
    let div = grid_divergence(v)?;
    let curl = grid_curl(v)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{GRID_CSV_HEADER}")?;
    for i in 0..v.grid.nx {
        for j in 0..v.grid.ny {
            let (x, y) = v.grid.center(i, j);
            writeln!(
                f,
                "{i},{j},{x},{y},{},{},{},{},{},{},{},{}",
                v.vx[[i, j]],
                v.vy[[i, j]],
                dec.transport.vx[[i, j]],
                dec.transport.vy[[i, j]],
                dec.dipole.vx[[i, j]],
                dec.dipole.vy[[i, j]],
                div[[i, j]],
                curl[[i, j]]
            )?;
        }
    }
    f.flush()?;
    Ok(())
}
