//! Time-conditioned velocity fields and their differentiation services.
//!
//! Everything downstream (integrators, analysis) is written against the
//! [`VelocityField`] trait so the same code runs on the learned MLP and on the
//! closed-form fields used as test oracles.

mod checkpoint;
mod counted;
mod divergence;
pub mod fields;
mod mlp;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use counted::{Counted, PassCounts};
pub use divergence::{
    draw_rademacher_probes, exact_divergence, hutchinson_divergence, hutchinson_with_probes, DivergenceEstimate,
    MAX_EXACT_DIVERGENCE_DIM,
};
pub use mlp::{Activation, Gradients, Layer, ModelParams, ModelSpec};

use ndarray::Array2;

/// A vector field `v(t, x)` on `R^d` evaluated over batches of points (one
/// point per row).
///
/// Each `*_jvps` / `*_vjps` call is one forward pass followed by one
/// derivative pass per supplied direction; [`Counted`] relies on that
/// accounting.
pub trait VelocityField: Sync {
    fn dim(&self) -> usize;

    fn velocity(&self, t: f64, x: &Array2<f64>) -> Array2<f64>;

    /// Velocity plus `(dv/dx) . tangent` for each tangent batch.
    fn velocity_jvps(&self, t: f64, x: &Array2<f64>, tangents: &[Array2<f64>]) -> (Array2<f64>, Vec<Array2<f64>>);

    /// Velocity plus `cotangent^T (dv/dx)` for each cotangent batch.
    fn velocity_vjps(&self, t: f64, x: &Array2<f64>, cotangents: &[Array2<f64>]) -> (Array2<f64>, Vec<Array2<f64>>);
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn velocity(&self, t: f64, x: &Array2<f64>) -> Array2<f64> {
        (**self).velocity(t, x)
    }
    fn velocity_jvps(&self, t: f64, x: &Array2<f64>, tangents: &[Array2<f64>]) -> (Array2<f64>, Vec<Array2<f64>>) {
        (**self).velocity_jvps(t, x, tangents)
    }
    fn velocity_vjps(&self, t: f64, x: &Array2<f64>, cotangents: &[Array2<f64>]) -> (Array2<f64>, Vec<Array2<f64>>) {
        (**self).velocity_vjps(t, x, cotangents)
    }
}

/// Directional derivative `(dv/dx) . direction` at a single point.
pub fn input_jvp<F: VelocityField + ?Sized>(
    field: &F,
    t: f64,
    x: &[f64],
    direction: &[f64],
) -> crate::Result<Vec<f64>> {
    let d = field.dim();
    if x.len() != d || direction.len() != d {
        return Err(crate::Error::InvalidInput(format!("expected {d}-dimensional point and direction")));
    }
    let n = crate::ndcore::norm(direction);
    if (n - 1.0).abs() > 1e-9 {
        return Err(crate::Error::InvalidInput(format!("direction must be a unit vector (norm {n})")));
    }
    let xa = Array2::from_shape_vec((1, d), x.to_vec()).unwrap();
    let da = Array2::from_shape_vec((1, d), direction.to_vec()).unwrap();
    let (_, mut j) = field.velocity_jvps(t, &xa, &[da]);
    Ok(j.pop().unwrap().into_raw_vec_and_offset().0)
}
