use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array2;

use super::VelocityField;

/// Snapshot of a [`Counted`] field's pass counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PassCounts {
    pub forward: u64,
    pub tangent: u64,
    pub backward: u64,
}

impl PassCounts {
    pub fn total(&self) -> u64 {
        self.forward + self.tangent + self.backward
    }
}

/// Wraps a field and counts batched model passes: one per forward
/// evaluation, one per JVP tangent and one per VJP cotangent.
pub struct Counted<F> {
    inner: F,
    forward: AtomicU64,
    tangent: AtomicU64,
    backward: AtomicU64,
}

impl<F: VelocityField> Counted<F> {
    pub fn new(inner: F) -> Self {
        Self { inner, forward: AtomicU64::new(0), tangent: AtomicU64::new(0), backward: AtomicU64::new(0) }
    }

    pub fn counts(&self) -> PassCounts {
        PassCounts {
            forward: self.forward.load(Ordering::Relaxed),
            tangent: self.tangent.load(Ordering::Relaxed),
            backward: self.backward.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        self.forward.store(0, Ordering::Relaxed);
        self.tangent.store(0, Ordering::Relaxed);
        self.backward.store(0, Ordering::Relaxed);
    }

    pub fn inner(&self) -> &F {
        &self.inner
    }
}

impl<F: VelocityField> VelocityField for Counted<F> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn velocity(&self, t: f64, x: &Array2<f64>) -> Array2<f64> {
        self.forward.fetch_add(1, Ordering::Relaxed);
        self.inner.velocity(t, x)
    }

    fn velocity_jvps(&self, t: f64, x: &Array2<f64>, tangents: &[Array2<f64>]) -> (Array2<f64>, Vec<Array2<f64>>) {
        self.forward.fetch_add(1, Ordering::Relaxed);
        self.tangent.fetch_add(tangents.len() as u64, Ordering::Relaxed);
        self.inner.velocity_jvps(t, x, tangents)
    }

    fn velocity_vjps(&self, t: f64, x: &Array2<f64>, cotangents: &[Array2<f64>]) -> (Array2<f64>, Vec<Array2<f64>>) {
        self.forward.fetch_add(1, Ordering::Relaxed);
        self.backward.fetch_add(cotangents.len() as u64, Ordering::Relaxed);
        self.inner.velocity_vjps(t, x, cotangents)
    }
}
