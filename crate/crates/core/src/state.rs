//! Landmark configurations and trajectories.
//!
//! Positions and momenta are stored flat, landmark-major: coordinate `α` of
//! landmark `i` lives at `i * dim + α`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkState {
    pub n: usize,
    pub dim: usize,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

impl LandmarkState {
    pub fn new(n: usize, dim: usize, q: Vec<f64>, p: Vec<f64>) -> Result<Self> {
        let s = Self { n, dim, q, p };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.dim == 0 {
            return Err(Error::invalid("landmark state needs n >= 1 and dim >= 1"));
        }
        let len = self.n * self.dim;
        if self.q.len() != len || self.p.len() != len {
            return Err(Error::invalid(format!(
                "landmark state expects {len} coordinates, got q={} p={}",
                self.q.len(),
                self.p.len()
            )));
        }
        if !self.is_finite() {
            return Err(Error::invalid("landmark state has non-finite entries"));
        }
        Ok(())
    }

    /// State at rest: momenta zero.
    pub fn at_rest(n: usize, dim: usize, q: Vec<f64>) -> Result<Self> {
        Self::new(n, dim, q, vec![0.0; n * dim])
    }

    /// Build from per-landmark rows.
    pub fn from_rows(q: &[Vec<f64>], p: &[Vec<f64>]) -> Result<Self> {
        let n = q.len();
        if n == 0 {
            return Err(Error::invalid("no landmarks"));
        }
        let dim = q[0].len();
        if p.len() != n || q.iter().chain(p).any(|r| r.len() != dim) {
            return Err(Error::invalid("landmark rows have inconsistent shapes"));
        }
        Self::new(n, dim, q.concat(), p.concat())
    }

    pub fn nd(&self) -> usize {
        self.n * self.dim
    }

    pub fn qi(&self, i: usize) -> &[f64] {
        &self.q[i * self.dim..(i + 1) * self.dim]
    }

    pub fn pi(&self, i: usize) -> &[f64] {
        &self.p[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(&self.p).all(|v| v.is_finite())
    }

    /// `(q, p)` concatenated, length `2Nd`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.nd());
        v.extend_from_slice(&self.q);
        v.extend_from_slice(&self.p);
        v
    }

    pub fn from_flat(n: usize, dim: usize, x: &[f64]) -> Self {
        let nd = n * dim;
        Self { n, dim, q: x[..nd].to_vec(), p: x[nd..2 * nd].to_vec() }
    }

    pub fn with_momentum(&self, p: Vec<f64>) -> Self {
        Self { n: self.n, dim: self.dim, q: self.q.clone(), p }
    }

    pub fn momentum_norm(&self) -> f64 {
        self.p.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn translated(&self, c: &[f64]) -> Self {
        let mut out = self.clone();
        for i in 0..self.n {
            for a in 0..self.dim {
                out.q[i * self.dim + a] += c[a];
            }
        }
        out
    }
}

/// Time grid plus states.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<LandmarkState>,
}

impl Trajectory {
    pub fn last(&self) -> &LandmarkState {
        self.states.last().expect("trajectory is never empty")
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// `n` points on an axis-aligned ellipse, counter-clockwise from angle 0.
pub fn ellipse_points(n: usize, radii: [f64; 2], center: [f64; 2]) -> Vec<f64> {
    let mut q = Vec::with_capacity(2 * n);
    for k in 0..n {
        let t = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
        q.push(center[0] + radii[0] * t.cos());
        q.push(center[1] + radii[1] * t.sin());
    }
    q
}

/// Mean distance between consecutive points of a closed polygon.
pub fn mean_neighbour_distance(q: &[f64], dim: usize) -> f64 {
    let n = q.len() / dim;
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        let j = (i + 1) % n;
        let d2: f64 = (0..dim).map(|a| (q[i * dim + a] - q[j * dim + a]).powi(2)).sum();
        total += d2.sqrt();
    }
    total / n as f64
}

pub(crate) fn uniform_grid(t_end: f64, steps: usize) -> Vec<f64> {
    (0..=steps).map(|k| t_end * k as f64 / steps as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_round_trip() {
        let s = LandmarkState::new(2, 2, vec![0.0, 1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0, 7.0]).unwrap();
        let f = s.to_flat();
        assert_eq!(LandmarkState::from_flat(2, 2, &f), s);
        assert_eq!(s.qi(1), &[2.0, 3.0]);
        assert_eq!(s.pi(0), &[4.0, 5.0]);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(LandmarkState::new(2, 2, vec![0.0; 3], vec![0.0; 4]).is_err());
        assert!(LandmarkState::new(1, 2, vec![f64::NAN, 0.0], vec![0.0; 2]).is_err());
        assert!(LandmarkState::from_rows(&[vec![0.0, 0.0]], &[vec![0.0]]).is_err());
    }

    #[test]
    fn ellipse_layout() {
        let q = ellipse_points(4, [2.0, 1.0], [0.5, 0.5]);
        let expect = [2.5, 0.5, 0.5, 1.5, -1.5, 0.5, 0.5, -0.5];
        for (a, b) in q.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let sq = ellipse_points(4, [1.0, 1.0], [0.0, 0.0]);
        assert!((mean_neighbour_distance(&sq, 2) - 2f64.sqrt()).abs() < 1e-15);
    }
}
