//! Diagonal Gaussians, mixtures and their sufficient statistics.

use std::f64::consts::PI;
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

/// Default floor applied to every variance component.
pub const VARIANCE_FLOOR: f64 = 1e-4;

/// Zeroth, first and second order statistics of a weighted frame set.
///
/// Additive under disjoint union, which is what makes pooled likelihoods of
/// arbitrary state sets cheap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianNodeStats {
    pub occupancy: f64,
    pub sum: Vec<f64>,
    pub sum_sq: Vec<f64>,
}

impl GaussianNodeStats {
    pub fn new(dim: usize) -> Self {
        Self {
            occupancy: 0.0,
            sum: vec![0.0; dim],
            sum_sq: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.sum.len()
    }

    #[inline]
    pub fn add_frame(&mut self, frame: &[f32], weight: f64) {
        self.occupancy += weight;
        for ((s, q), &o) in self.sum.iter_mut().zip(&mut self.sum_sq).zip(frame) {
            let o = o as f64;
            *s += weight * o;
            *q += weight * o * o;
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        if self.occupancy <= 0.0 {
            return vec![0.0; self.dim()];
        }
        self.sum.iter().map(|s| s / self.occupancy).collect()
    }

    /// Maximum-likelihood diagonal variance, clamped at zero.
    pub fn variance(&self) -> Vec<f64> {
        if self.occupancy <= 0.0 {
            return vec![0.0; self.dim()];
        }
        self.sum
            .iter()
            .zip(&self.sum_sq)
            .map(|(s, q)| {
                let m = s / self.occupancy;
                (q / self.occupancy - m * m).max(0.0)
            })
            .collect()
    }

    pub fn floored_variance(&self, floor: f64) -> Vec<f64> {
        self.variance().into_iter().map(|v| v.max(floor)).collect()
    }
}

impl AddAssign<&GaussianNodeStats> for GaussianNodeStats {
    fn add_assign(&mut self, rhs: &GaussianNodeStats) {
        self.occupancy += rhs.occupancy;
        for (a, b) in self.sum.iter_mut().zip(&rhs.sum) {
            *a += b;
        }
        for (a, b) in self.sum_sq.iter_mut().zip(&rhs.sum_sq) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    inv_var: Vec<f64>,
    /// `-0.5 * (D ln 2pi + sum ln var)`
    log_norm: f64,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Self {
        assert_eq!(mean.len(), var.len());
        let inv_var = var.iter().map(|v| 1.0 / v).collect();
        let log_norm =
            -0.5 * (mean.len() as f64 * (2.0 * PI).ln() + var.iter().map(|v| v.ln()).sum::<f64>());
        Self {
            mean,
            var,
            inv_var,
            log_norm,
        }
    }

    pub fn from_stats(stats: &GaussianNodeStats, floor: f64) -> Self {
        Self::new(stats.mean(), stats.floored_variance(floor))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    #[inline]
    pub fn log_density(&self, x: &[f32]) -> f64 {
        let mut q = 0.0;
        for ((&xi, m), iv) in x.iter().zip(&self.mean).zip(&self.inv_var) {
            let d = xi as f64 - m;
            q += d * d * iv;
        }
        self.log_norm - 0.5 * q
    }

    pub fn log_density_f64(&self, x: &[f64]) -> f64 {
        let mut q = 0.0;
        for ((&xi, m), iv) in x.iter().zip(&self.mean).zip(&self.inv_var) {
            let d = xi - m;
            q += d * d * iv;
        }
        self.log_norm - 0.5 * q
    }
}

/// Weighted mixture of diagonal Gaussians; a single component by default.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEmission {
    pub weights: Vec<f64>,
    pub components: Vec<DiagGaussian>,
}

impl GaussianEmission {
    pub fn single(g: DiagGaussian) -> Self {
        Self {
            weights: vec![1.0],
            components: vec![g],
        }
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn log_density(&self, x: &[f32]) -> f64 {
        if self.components.len() == 1 {
            return self.components[0].log_density(x);
        }
        log_sum_exp(
            self.weights
                .iter()
                .zip(&self.components)
                .map(|(w, c)| w.ln() + c.log_density(x)),
        )
    }

    /// Per-component log joint `ln w_m + ln N_m(x)`.
    pub fn component_log_joint(&self, x: &[f32], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .iter()
                .zip(&self.components)
                .map(|(w, c)| w.ln() + c.log_density(x)),
        );
    }
}

#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub fn log_sum_exp(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_frame_has_zero_variance() {
        let mut s = GaussianNodeStats::new(3);
        s.add_frame(&[1.0, 1.0, 1.0], 1.0);
        assert_eq!(s.mean(), vec![1.0; 3]);
        assert_eq!(s.variance(), vec![0.0; 3]);
        assert_eq!(s.floored_variance(VARIANCE_FLOOR), vec![VARIANCE_FLOOR; 3]);
    }

    #[test]
    fn two_equal_frames() {
        let mut s = GaussianNodeStats::new(2);
        s.add_frame(&[0.3, 0.7], 1.0);
        s.add_frame(&[0.3, 0.7], 1.0);
        assert!(s.variance().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn stats_are_additive() {
        let frames = [[0.1f32, 0.9], [0.4, 0.2], [0.8, 0.5], [0.3, 0.3]];
        let mut all = GaussianNodeStats::new(2);
        let mut a = GaussianNodeStats::new(2);
        let mut b = GaussianNodeStats::new(2);
        for (i, f) in frames.iter().enumerate() {
            all.add_frame(f, 0.5 + i as f64);
            if i < 2 { &mut a } else { &mut b }.add_frame(f, 0.5 + i as f64);
        }
        a += &b;
        assert!((a.occupancy - all.occupancy).abs() < 1e-12);
        for d in 0..2 {
            assert!((a.sum[d] - all.sum[d]).abs() < 1e-12);
            assert!((a.sum_sq[d] - all.sum_sq[d]).abs() < 1e-12);
        }
    }

    #[test]
    fn standard_normal_density() {
        let g = DiagGaussian::new(vec![0.0], vec![1.0]);
        assert!((g.log_density(&[0.0]) + 0.5 * (2.0 * PI).ln()).abs() < 1e-12);
        let mix = GaussianEmission {
            weights: vec![0.5, 0.5],
            components: vec![g.clone(), g.clone()],
        };
        assert!((mix.log_density(&[0.7]) - g.log_density(&[0.7])).abs() < 1e-12);
    }

    #[test]
    fn log_add_matches_direct() {
        assert!((log_add(0.1f64.ln(), 0.2f64.ln()) - 0.3f64.ln()).abs() < 1e-12);
        assert_eq!(log_add(f64::NEG_INFINITY, -3.0), -3.0);
    }
}
