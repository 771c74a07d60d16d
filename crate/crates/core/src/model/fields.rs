//! Closed-form velocity fields. They serve as oracles for the integrators and
//! analysis code, where the learned MLP has no analytic answer.

use ndarray::Array2;

use super::VelocityField;

type PointFn = dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync;
type JacobianFn = dyn Fn(f64, &[f64]) -> Vec<Vec<f64>> + Send + Sync;

/// `v(t, x) = A x + b`.
#[derive(Clone, Debug)]
pub struct LinearField {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl LinearField {
    pub fn new(a: Vec<Vec<f64>>) -> Self {
        let d = a.len();
        assert!(a.iter().all(|r| r.len() == d), "A must be square");
        Self { a, b: vec![0.0; d] }
    }

    pub fn with_offset(mut self, b: Vec<f64>) -> Self {
        assert_eq!(b.len(), self.a.len());
        self.b = b;
        self
    }

    pub fn trace(&self) -> f64 {
        (0..self.a.len()).map(|k| self.a[k][k]).sum()
    }
}

impl VelocityField for LinearField {
    fn dim(&self) -> usize {
        self.a.len()
    }

    fn velocity(&self, _t: f64, x: &Array2<f64>) -> Array2<f64> {
        let d = self.dim();
        Array2::from_shape_fn(x.dim(), |(i, r)| self.b[r] + (0..d).map(|c| self.a[r][c] * x[[i, c]]).sum::<f64>())
    }

    fn velocity_jvps(&self, t: f64, x: &Array2<f64>, tangents: &[Array2<f64>]) -> (Array2<f64>, Vec<Array2<f64>>) {
        let d = self.dim();
        let outs = tangents
            .iter()
            .map(|tan| Array2::from_shape_fn(tan.dim(), |(i, r)| (0..d).map(|c| self.a[r][c] * tan[[i, c]]).sum()))
            .collect();
        (self.velocity(t, x), outs)
    }

    fn velocity_vjps(&self, t: f64, x: &Array2<f64>, cotangents: &[Array2<f64>]) -> (Array2<f64>, Vec<Array2<f64>>) {
        let d = self.dim();
        let outs = cotangents
            .iter()
            .map(|cot| Array2::from_shape_fn(cot.dim(), |(i, c)| (0..d).map(|r| cot[[i, r]] * self.a[r][c]).sum()))
            .collect();
        (self.velocity(t, x), outs)
    }
}

/// `v(t, x) = c`.
#[derive(Clone, Debug)]
pub struct ConstantField(pub Vec<f64>);

impl VelocityField for ConstantField {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn velocity(&self, _t: f64, x: &Array2<f64>) -> Array2<f64> {
        Array2::from_shape_fn(x.dim(), |(_, k)| self.0[k])
    }

    fn velocity_jvps(&self, t: f64, x: &Array2<f64>, tangents: &[Array2<f64>]) -> (Array2<f64>, Vec<Array2<f64>>) {
        (self.velocity(t, x), tangents.iter().map(|tan| Array2::zeros(tan.dim())).collect())
    }

    fn velocity_vjps(&self, t: f64, x: &Array2<f64>, cotangents: &[Array2<f64>]) -> (Array2<f64>, Vec<Array2<f64>>) {
        (self.velocity(t, x), cotangents.iter().map(|c| Array2::zeros(c.dim())).collect())
    }
}

/// Field given pointwise by closures for `v` and its spatial Jacobian
/// (`jac[r][c] = d v_r / d x_c`).
pub struct AnalyticField {
    dim: usize,
    v: Box<PointFn>,
    jac: Box<JacobianFn>,
}

impl AnalyticField {
    pub fn new(
        dim: usize,
        v: impl Fn(f64, &[f64]) -> Vec<f64> + Send + Sync + 'static,
        jac: impl Fn(f64, &[f64]) -> Vec<Vec<f64>> + Send + Sync + 'static,
    ) -> Self {
        Self { dim, v: Box::new(v), jac: Box::new(jac) }
    }

    /// Rigid rotation `v = (-y, x)`; divergence-free.
    pub fn rotation() -> Self {
        Self::new(2, |_, x| vec![-x[1], x[0]], |_, _| vec![vec![0.0, -1.0], vec![1.0, 0.0]])
    }

    /// `v = (x1^2, 0)`; divergence `2 x1`.
    pub fn quadratic_shear() -> Self {
        Self::new(2, |_, x| vec![x[0] * x[0], 0.0], |_, x| vec![vec![2.0 * x[0], 0.0], vec![0.0, 0.0]])
    }

    /// `v = (x1^3 / 3, 0)`; divergence `x1^2`, minimised on the axis `x1 = 0`.
    pub fn cubic_shear() -> Self {
        Self::new(2, |_, x| vec![x[0].powi(3) / 3.0, 0.0], |_, x| vec![vec![x[0] * x[0], 0.0], vec![0.0, 0.0]])
    }

    fn rows(&self, x: &Array2<f64>) -> impl Iterator<Item = Vec<f64>> + '_ {
        let x = x.clone();
        (0..x.nrows()).map(move |i| x.row(i).to_vec())
    }
}

impl VelocityField for AnalyticField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, t: f64, x: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(x.dim());
        for (i, p) in self.rows(x).enumerate() {
            for (k, v) in (self.v)(t, &p).into_iter().enumerate() {
                out[[i, k]] = v;
            }
        }
        out
    }

    fn velocity_jvps(&self, t: f64, x: &Array2<f64>, tangents: &[Array2<f64>]) -> (Array2<f64>, Vec<Array2<f64>>) {
        let d = self.dim;
        let mut outs: Vec<Array2<f64>> = tangents.iter().map(|tan| Array2::zeros(tan.dim())).collect();
        for (i, p) in self.rows(x).enumerate() {
            let j = (self.jac)(t, &p);
            for (tan, out) in tangents.iter().zip(outs.iter_mut()) {
                for r in 0..d {
                    out[[i, r]] = (0..d).map(|c| j[r][c] * tan[[i, c]]).sum();
                }
            }
        }
        (self.velocity(t, x), outs)
    }

    fn velocity_vjps(&self, t: f64, x: &Array2<f64>, cotangents: &[Array2<f64>]) -> (Array2<f64>, Vec<Array2<f64>>) {
        let d = self.dim;
        let mut outs: Vec<Array2<f64>> = cotangents.iter().map(|c| Array2::zeros(c.dim())).collect();
        for (i, p) in self.rows(x).enumerate() {
            let j = (self.jac)(t, &p);
            for (cot, out) in cotangents.iter().zip(outs.iter_mut()) {
                for c in 0..d {
                    out[[i, c]] = (0..d).map(|r| cot[[i, r]] * j[r][c]).sum();
                }
            }
        }
        (self.velocity(t, x), outs)
    }
}
