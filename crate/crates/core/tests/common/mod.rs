#![allow(dead_code)]

use iphfit::{DensityTarget, IphModel, SquareMatrix};
use rand::Rng;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

/// Random sub-intensity matrix with off-diagonal rates in `[0, scale)` and
/// exit rates in `[exit_lo, exit_lo + scale)`.
pub fn random_subintensity<R: Rng>(rng: &mut R, p: usize, scale: f64, exit_lo: f64) -> SquareMatrix {
    let mut t = SquareMatrix::zeros(p, p);
    for i in 0..p {
        let mut out = exit_lo + scale * rng.random::<f64>();
        for j in 0..p {
            if j != i {
                t[(i, j)] = scale * rng.random::<f64>();
                out += t[(i, j)];
            }
        }
        t[(i, i)] = -out;
    }
    t
}

pub fn random_pi<R: Rng>(rng: &mut R, p: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..p).map(|_| 0.1 + rng.random::<f64>()).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// Normal mixture left-truncated at zero; `sd` is the standard deviation.
pub struct TruncatedMixture {
    parts: Vec<(f64, Normal)>,
    mass: f64,
}

impl TruncatedMixture {
    pub fn new(parts: &[(f64, f64, f64)]) -> Self {
        let parts: Vec<(f64, Normal)> = parts
            .iter()
            .map(|&(w, mean, sd)| (w, Normal::new(mean, sd).unwrap()))
            .collect();
        let mass = parts.iter().map(|(w, n)| w * (1.0 - n.cdf(0.0))).sum();
        Self { parts, mass }
    }

    pub fn density(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        self.parts.iter().map(|(w, n)| w * n.pdf(x)).sum::<f64>() / self.mass
    }

    /// Tabulated at `mesh, 2·mesh, …, upper`.
    pub fn tabulate(&self, mesh: f64, upper: f64) -> DensityTarget {
        let n = (upper / mesh).round() as usize;
        let x: Vec<f64> = (1..=n).map(|i| i as f64 * mesh).collect();
        let h = x.iter().map(|&v| self.density(v)).collect();
        DensityTarget::new(x, h).unwrap()
    }
}

/// Total-variation distance between a fitted model and a target density
/// carried by `(0, upper]`.
///
/// Takes the larger of `½ ∫|f - g| + ½ S(upper)` (midpoint rule) and
/// `∫ (g - f)^+`. The two agree for smooth fits; the second also sees mass
/// that the fit concentrates in spikes narrower than `step`.
pub fn total_variation(model: &IphModel, target: impl Fn(f64) -> f64, upper: f64, step: f64) -> f64 {
    let n = (upper / step).round() as usize;
    let (mut abs, mut deficit) = (0.0, 0.0);
    for i in 0..n {
        let x = (i as f64 + 0.5) * step;
        let d = target(x) - model.density(x).unwrap();
        abs += d.abs() * step;
        deficit += d.max(0.0) * step;
    }
    (0.5 * abs + 0.5 * model.survival(upper).unwrap()).max(deficit)
}

/// Local maxima of `values` (strict on both sides, plateaus ignored).
pub fn local_maxima(values: &[f64]) -> Vec<usize> {
    (1..values.len().saturating_sub(1))
        .filter(|&i| values[i] > values[i - 1] && values[i] > values[i + 1])
        .collect()
}
