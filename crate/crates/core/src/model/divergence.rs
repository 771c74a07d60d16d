use ndarray::Array2;

use super::VelocityField;
use crate::ndcore::RandomSource;
use crate::{Error, Result};

pub const MAX_EXACT_DIVERGENCE_DIM: usize = 4;

/// Hutchinson divergence estimate for a batch, normalised by `n_h * d`.
#[derive(Clone, Debug)]
pub struct DivergenceEstimate {
    /// Per-row `(1 / (n_h d)) sum_s eps_s^T J eps_s`.
    pub values: Vec<f64>,
    /// `v(t, x)` from the same forward pass.
    pub velocity: Array2<f64>,
    pub n_probes: usize,
}

/// Trace of `dv/dx` at every row, from `d` forward-mode passes.
pub fn exact_divergence<F: VelocityField + ?Sized>(
    field: &F,
    t: f64,
    x: &Array2<f64>,
) -> Result<(Array2<f64>, Vec<f64>)> {
    let d = field.dim();
    if d > MAX_EXACT_DIVERGENCE_DIM {
        return Err(Error::DimensionTooLarge(d));
    }
    let n = x.nrows();
    let basis: Vec<Array2<f64>> =
        (0..d).map(|k| Array2::from_shape_fn((n, d), |(_, j)| if j == k { 1.0 } else { 0.0 })).collect();
    let (v, cols) = field.velocity_jvps(t, x, &basis);
    let div = (0..n).map(|i| (0..d).map(|k| cols[k][[i, k]]).sum()).collect();
    Ok((v, div))
}

/// `n_h` Rademacher probe batches. `rngs` holds either one stream shared by
/// all rows or one stream per row; per-row streams draw their `n_h * d` signs
/// probe by probe.
pub fn draw_rademacher_probes(rngs: &mut [RandomSource], n_rows: usize, n_h: usize, d: usize) -> Vec<Array2<f64>> {
    assert!(rngs.len() == 1 || rngs.len() == n_rows, "need one shared stream or one stream per row");
    let mut probes = vec![Array2::zeros((n_rows, d)); n_h];
    for i in 0..n_rows {
        let rng = if rngs.len() == 1 { &mut rngs[0] } else { &mut rngs[i] };
        for p in probes.iter_mut() {
            for k in 0..d {
                p[[i, k]] = rng.rademacher();
            }
        }
    }
    probes
}

/// Hutchinson estimate with caller-supplied probes; one forward pass plus
/// one VJP per probe.
pub fn hutchinson_with_probes<F: VelocityField + ?Sized>(
    field: &F,
    t: f64,
    x: &Array2<f64>,
    probes: &[Array2<f64>],
) -> DivergenceEstimate {
    let d = field.dim();
    let (velocity, vjps) = field.velocity_vjps(t, x, probes);
    let scale = 1.0 / (probes.len().max(1) * d) as f64;
    let values = (0..x.nrows())
        .map(|i| {
            let quad: f64 =
                probes.iter().zip(&vjps).map(|(e, g)| (0..d).map(|k| e[[i, k]] * g[[i, k]]).sum::<f64>()).sum();
            quad * scale
        })
        .collect();
    DivergenceEstimate { values, velocity, n_probes: probes.len() }
}

pub fn hutchinson_divergence<F: VelocityField + ?Sized>(
    field: &F,
    t: f64,
    x: &Array2<f64>,
    rngs: &mut [RandomSource],
    n_h: usize,
) -> Result<DivergenceEstimate> {
    if n_h == 0 {
        return Err(Error::InvalidInput("n_h must be >= 1".into()));
    }
    let probes = draw_rademacher_probes(rngs, x.nrows(), n_h, field.dim());
    Ok(hutchinson_with_probes(field, t, x, &probes))
}
