//! Numeric kernel shared by every other module: 2-vectors, batch helpers and
//! the project-wide random source.
//!
//! Every random draw in the crate goes through [`RandomSource`], a ChaCha8
//! stream keyed by a 64-bit seed and addressed by a 64-bit stream id. Child
//! streams are derived with [`RandomSource::split`], so replay is exact no
//! matter how work is partitioned.

use ndarray::Array2;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Point in the plane, in benchmark coordinates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Counter-clockwise rotation by `angle` radians about the origin.
    pub fn rotate(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

impl std::ops::Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl std::ops::Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

/// Packs planar points into an `n x 2` batch.
pub fn points_to_array(points: &[Vec2]) -> Array2<f64> {
    Array2::from_shape_fn((points.len(), 2), |(i, k)| if k == 0 { points[i].x } else { points[i].y })
}

/// Unpacks an `n x 2` batch. Panics if the batch is not two-dimensional.
pub fn array_to_points(a: &Array2<f64>) -> Vec<Vec2> {
    assert_eq!(a.ncols(), 2, "expected planar points");
    a.rows().into_iter().map(|r| Vec2::new(r[0], r[1])).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn det2(m: [[f64; 2]; 2]) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

/// Determinant of a small square matrix by partial-pivot elimination.
pub fn det(mut m: Vec<Vec<f64>>) -> f64 {
    let n = m.len();
    if n == 2 {
        return det2([[m[0][0], m[0][1]], [m[1][0], m[1][1]]]);
    }
    let mut d = 1.0;
    for c in 0..n {
        let p = (c..n).max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs())).unwrap();
        if m[p][c] == 0.0 {
            return 0.0;
        }
        if p != c {
            m.swap(p, c);
            d = -d;
        }
        d *= m[c][c];
        let (top, rest) = m.split_at_mut(c + 1);
        let pivot = &top[c];
        for row in rest {
            let f = row[c] / pivot[c];
            for (x, &y) in row[c..].iter_mut().zip(&pivot[c..]) {
                *x -= f * y;
            }
        }
    }
    d
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded, splittable ChaCha8 stream.
///
/// Gaussians use Box-Muller with deterministic pairing: draws are produced two
/// at a time and the second is cached, so the sequence is a pure function of
/// `(seed, stream_id)` with no rejection loop.
#[derive(Clone, Debug)]
pub struct RandomSource {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl RandomSource {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut key = [0u8; 32];
        let mut s = seed;
        for chunk in key.chunks_mut(8) {
            s = splitmix64(s);
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(stream_id);
        Self { seed, stream_id, rng, spare_normal: None }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Child stream `k`. Depends only on `(seed, stream_id, k)`, never on how
    /// much of the parent has been consumed.
    pub fn split(&self, k: u64) -> RandomSource {
        let child = splitmix64(self.stream_id ^ splitmix64(k.wrapping_add(0xA076_1D64_78BD_642F)));
        RandomSource::new(self.seed, child)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Lemire's multiply-shift; bias is < n / 2^64.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - u lies in (0, 1], so the log is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare_normal = Some(r * s);
        r * c
    }

    pub fn rademacher(&mut self) -> f64 {
        if self.next_u64() >> 63 == 0 {
            1.0
        } else {
            -1.0
        }
    }
}

/// `n` i.i.d. standard normal draws in `d` dimensions, one per row.
pub fn sample_gaussian(rng: &mut RandomSource, n: usize, d: usize) -> Array2<f64> {
    assert!(n >= 1 && d >= 1, "sample_gaussian needs n >= 1 and d >= 1");
    Array2::from_shape_simple_fn((n, d), || rng.gaussian())
}

pub fn sample_rademacher(rng: &mut RandomSource, d: usize) -> Vec<f64> {
    assert!(d >= 1);
    (0..d).map(|_| rng.rademacher()).collect()
}

/// Uniform direction on the unit sphere in `d` dimensions (normalised
/// Gaussian). For `d = 1` this is a fair sign.
pub fn sample_unit_sphere(rng: &mut RandomSource, d: usize) -> Vec<f64> {
    assert!(d >= 1);
    loop {
        let g: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
        let n = norm(&g);
        // A zero Gaussian vector has probability zero; redraw keeps the output
        // well-defined.
        if n > 0.0 {
            return g.into_iter().map(|v| v / n).collect();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_replay_is_bit_exact() {
        let a = sample_gaussian(&mut RandomSource::new(7, 0), 2, 2);
        let b = sample_gaussian(&mut RandomSource::new(7, 0), 2, 2);
        assert_eq!(a, b);
        let c = sample_gaussian(&mut RandomSource::new(7, 1), 2, 2);
        assert_ne!(a, c);
    }

    #[test]
    fn gaussian_moments() {
        let n = 100_000;
        let x = sample_gaussian(&mut RandomSource::new(11, 3), n, 2);
        let mean: Vec<f64> = (0..2).map(|k| x.column(k).sum() / n as f64).collect();
        for m in &mean {
            assert!(m.abs() < 0.02, "mean {m}");
        }
        for a in 0..2 {
            for b in 0..2 {
                let c =
                    x.rows().into_iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / (n as f64 - 1.0);
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((c - expect).abs() < 0.03, "cov[{a}][{b}] = {c}");
            }
        }
    }

    #[test]
    fn rademacher_support_and_mean() {
        let mut rng = RandomSource::new(5, 9);
        let mut sums = [0.0; 2];
        let n = 100_000;
        for _ in 0..n {
            let e = sample_rademacher(&mut rng, 2);
            for k in 0..2 {
                assert!(e[k] == 1.0 || e[k] == -1.0);
                sums[k] += e[k];
            }
        }
        for s in sums {
            assert!((s / n as f64).abs() < 0.02);
        }
        let a: Vec<_> = (0..10).map(|_| sample_rademacher(&mut RandomSource::new(1, 1), 2)).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn unit_sphere_norm_and_angles() {
        let mut rng = RandomSource::new(3, 4);
        let bins = 16;
        let mut counts = vec![0usize; bins];
        let n = 100_000;
        for _ in 0..n {
            let u = sample_unit_sphere(&mut rng, 2);
            assert!((norm(&u) - 1.0).abs() <= 1e-12);
            let a = u[1].atan2(u[0]).rem_euclid(std::f64::consts::TAU);
            counts[((a / std::f64::consts::TAU * bins as f64) as usize).min(bins - 1)] += 1;
        }
        let p = 1.0 / bins as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "bin count {c}");
        }
        for _ in 0..100 {
            let u = sample_unit_sphere(&mut rng, 1);
            assert!(u[0] == 1.0 || u[0] == -1.0);
        }
    }

    #[test]
    fn split_is_independent_of_parent_consumption() {
        let root = RandomSource::new(42, 0);
        let mut used = root.clone();
        for _ in 0..17 {
            used.next_u64();
        }
        assert_eq!(root.split(3).next_u64(), used.split(3).next_u64());
        assert_ne!(root.split(3).next_u64(), root.split(4).next_u64());
    }

    #[test]
    fn small_determinants() {
        assert_eq!(det2([[2.0, 1.0], [1.0, 3.0]]), 5.0);
        let m = vec![vec![2.0, 0.0, 1.0], vec![1.0, 3.0, 0.0], vec![0.0, 1.0, 4.0]];
        assert!((det(m) - 25.0).abs() < 1e-12);
    }
}
