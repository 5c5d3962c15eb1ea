use rand::{Rng, RngCore};
use statrs::distribution::{ContinuousCDF, Normal};

/// Product of independent Gaussians truncated to a closed box, renormalized
/// analytically per dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct TruncatedNormalBox {
    mean: Vec<f64>,
    std: Vec<f64>,
    low: Vec<f64>,
    high: Vec<f64>,
    /// Per-dimension `Phi(low)` and `Phi(high)` in standardized units.
    cdf_low: Vec<f64>,
    cdf_high: Vec<f64>,
    log_norm: f64,
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

impl TruncatedNormalBox {
    pub fn new(mean: Vec<f64>, std: Vec<f64>, low: Vec<f64>, high: Vec<f64>) -> Self {
        assert!(
            mean.len() == std.len() && std.len() == low.len() && low.len() == high.len(),
            "dimension mismatch"
        );
        let n = std_normal();
        let mut cdf_low = Vec::with_capacity(mean.len());
        let mut cdf_high = Vec::with_capacity(mean.len());
        let mut log_norm = 0.0;
        for j in 0..mean.len() {
            assert!(std[j] > 0.0 && low[j] < high[j]);
            let a = n.cdf((low[j] - mean[j]) / std[j]);
            let b = n.cdf((high[j] - mean[j]) / std[j]);
            cdf_low.push(a);
            cdf_high.push(b);
            log_norm += (std[j] * (b - a)).ln() + 0.5 * (2.0 * std::f64::consts::PI).ln();
        }
        TruncatedNormalBox {
            mean,
            std,
            low,
            high,
            cdf_low,
            cdf_high,
            log_norm,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn low(&self) -> &[f64] {
        &self.low
    }

    pub fn high(&self) -> &[f64] {
        &self.high
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.low.iter().zip(&self.high))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Log density; `-inf` outside the box.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        if !self.contains(x) {
            return f64::NEG_INFINITY;
        }
        let quad: f64 = x
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| {
                let z = (v - m) / s;
                z * z
            })
            .sum();
        -0.5 * quad - self.log_norm
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        self.log_density(x).exp()
    }

    /// Inverse-CDF sampling; consumes exactly one uniform per dimension.
    pub fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let n = std_normal();
        (0..self.dim())
            .map(|j| {
                let u: f64 = rng.random();
                let p = self.cdf_low[j] + u * (self.cdf_high[j] - self.cdf_low[j]);
                let p = p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
                let x = self.mean[j] + self.std[j] * n.inverse_cdf(p);
                x.clamp(self.low[j], self.high[j])
            })
            .collect()
    }

    /// Smallest density value on the box (attained at the corner farthest
    /// from the mean).
    pub fn min_density(&self) -> f64 {
        let corner: Vec<f64> = (0..self.dim())
            .map(|j| {
                if (self.mean[j] - self.low[j]).abs() > (self.high[j] - self.mean[j]).abs() {
                    self.low[j]
                } else {
                    self.high[j]
                }
            })
            .collect();
        self.density(&corner)
    }

    /// Warm-start proposal: std inflated by `inflate`, mean moved a fraction
    /// `shift` of the way toward the box face indicated by `direction`
    /// (sign per dimension, 0 leaves that dimension's mean in place).
    pub fn skewed(&self, inflate: f64, shift: f64, direction: &[f64]) -> Self {
        let mean = (0..self.dim())
            .map(|j| {
                let d = direction.get(j).copied().unwrap_or(0.0);
                if d > 0.0 {
                    self.mean[j] + shift * (self.high[j] - self.mean[j])
                } else if d < 0.0 {
                    self.mean[j] + shift * (self.low[j] - self.mean[j])
                } else {
                    self.mean[j]
                }
            })
            .collect();
        let std = self.std.iter().map(|s| s * inflate).collect();
        TruncatedNormalBox::new(mean, std, self.low.clone(), self.high.clone())
    }
}
