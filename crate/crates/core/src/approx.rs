//! Homogeneous phase-type approximation of a piecewise IPH model.
//!
//! For a uniformization rate `n` and `m` Erlang stages, stage `ℓ` uses the
//! sub-stochastic kernel `Q_ℓ = I + Σ_k ω_k(ℓ, n) T_k / n`, where
//! `ω_k(ℓ, n)` is the Erlang(ℓ, n) probability of interval `k`. The
//! approximating PH law is an Erlang mixture: absorption at stage `ℓ`
//! happens with probability `v_{ℓ-1} (I - Q_ℓ) e`, where
//! `v_ℓ = α Q_1 ⋯ Q_ℓ`, and the last stage keeps the remaining mass.

use nalgebra::RowDVector;
use serde::Serialize;
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::error::{Error, Result};
use crate::matexp::SquareMatrix;
use crate::model::{Grid, IphModel};

/// Largest block matrix [`materialize_subintensity`] will allocate (dense).
pub const MAX_MATERIALIZED_DIM: usize = 4096;

/// Erlang(`stages`, `rate`) distribution function.
pub fn erlang_cdf(t: f64, stages: usize, rate: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t.is_infinite() {
        1.0
    } else {
        gamma_lr(stages as f64, rate * t)
    }
}

/// Erlang(`stages`, `rate`) density, evaluated in log space.
pub fn erlang_density(t: f64, stages: usize, rate: f64) -> f64 {
    if t <= 0.0 {
        return if stages == 1 && t == 0.0 { rate } else { 0.0 };
    }
    let a = stages as f64;
    (a * rate.ln() + (a - 1.0) * t.ln() - rate * t - ln_gamma(a)).exp()
}

/// `ω_k(ℓ, n) = E(s_{k+1}; ℓ, n) - E(s_k; ℓ, n)` for every interval.
pub fn erlang_weights(grid: &Grid, stage: usize, rate: f64) -> Vec<f64> {
    let cdf: Vec<f64> = (0..=grid.len())
        .map(|k| if k == grid.len() { 1.0 } else { erlang_cdf(grid.lower(k), stage, rate) })
        .collect();
    cdf.windows(2).map(|w| (w[1] - w[0]).max(0.0)).collect()
}

/// `max_k max_i |T_k[i,i]|`: the smallest valid uniformization rate.
pub fn min_valid_n(model: &IphModel) -> f64 {
    model.max_abs_diagonal()
}

/// `⌈n · tau_max⌉` stages, at least one.
pub fn choose_m(n: f64, tau_max: f64) -> usize {
    // guard against n·τ landing a rounding error above an integer
    let prod = n * tau_max;
    let rounded = prod.round();
    let m = if (prod - rounded).abs() <= 1e-9 * prod.max(1.0) { rounded } else { prod.ceil() };
    (m as usize).max(1)
}

fn check_rate(model: &IphModel, n: f64) -> Result<()> {
    let min = min_valid_n(model);
    if !(n.is_finite() && n > 0.0 && n >= min) {
        return Err(Error::InvalidRate { n, min_valid_n: min });
    }
    Ok(())
}

/// `Q_ℓ = I + Σ_k ω_k(ℓ, n) T_k / n`.
pub fn q_factor(model: &IphModel, stage: usize, n: f64) -> Result<SquareMatrix> {
    check_rate(model, n)?;
    Ok(q_factor_unchecked(model, stage, n))
}

fn q_factor_unchecked(model: &IphModel, stage: usize, n: f64) -> SquareMatrix {
    let p = model.p();
    let weights = erlang_weights(model.grid(), stage, n);
    let mut q = SquareMatrix::identity(p, p);
    for (w, t) in weights.iter().zip(model.blocks()) {
        if *w > 0.0 {
            q += t * (w / n);
        }
    }
    q.iter_mut().for_each(|v| {
        if *v < 0.0 && *v > -1e-12 {
            *v = 0.0
        }
    });
    q
}

/// Erlang-mixture form of the approximating phase-type distribution.
#[derive(Debug, Clone, Serialize)]
pub struct PhApproximation {
    /// Uniformization rate, shared by all Erlang components.
    pub n: f64,
    /// Number of stages.
    pub m: usize,
    /// `coefficients[ℓ-1]` weights the Erlang(ℓ, n) density.
    pub coefficients: Vec<f64>,
    #[serde(skip)]
    qprods: Vec<RowDVector<f64>>,
    #[serde(skip)]
    log_factorial: Vec<f64>,
}

impl PhApproximation {
    pub fn new(model: &IphModel, n: f64, m: usize) -> Result<Self> {
        check_rate(model, n)?;
        if m == 0 {
            return Err(Error::Domain("number of stages must be at least 1".into()));
        }
        let mut qprods = Vec::with_capacity(m);
        let mut coefficients = Vec::with_capacity(m);
        let mut v = model.pi().clone();
        for stage in 1..m {
            let q = q_factor_unchecked(model, stage, n);
            let next = &v * &q;
            let c = v.sum() - next.sum();
            coefficients.push(if c < 0.0 && c > -1e-12 { 0.0 } else { c });
            qprods.push(v);
            v = next;
        }
        coefficients.push(v.sum());
        qprods.push(v);
        let log_factorial = (0..m).map(|j| ln_gamma(j as f64 + 1.0)).collect();
        Ok(Self {
            n,
            m,
            coefficients,
            qprods,
            log_factorial,
        })
    }

    /// `v_ℓ = α Q_1 ⋯ Q_ℓ` for `ℓ = 0..m-1`.
    pub fn qprod(&self, stage: usize) -> &RowDVector<f64> {
        &self.qprods[stage]
    }

    pub fn density(&self, t: f64) -> Result<f64> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Domain(format!("density needs t > 0, got {t}")));
        }
        // Erlang(ℓ, n) at t is n times the Poisson(nt) mass at ℓ-1; stages
        // far outside the Poisson bulk contribute nothing representable.
        let mean = self.n * t;
        let spread = 40.0 * mean.sqrt() + 40.0;
        let lo = (mean - spread).max(0.0) as usize;
        let hi = ((mean + spread).ceil() as usize).min(self.m - 1);
        let (ln_n, ln_mean) = (self.n.ln(), mean.ln());
        let mut total = 0.0;
        for j in lo..=hi {
            let c = self.coefficients[j];
            if c > 0.0 {
                total += c * (ln_n + j as f64 * ln_mean - mean - self.log_factorial[j]).exp();
            }
        }
        Ok(total)
    }

    /// Survival function of the Erlang mixture.
    pub fn survival(&self, t: f64) -> f64 {
        self.coefficients
            .iter()
            .enumerate()
            .map(|(idx, c)| c * (1.0 - erlang_cdf(t, idx + 1, self.n)))
            .sum()
    }
}

/// Density of the `(n, m)` approximation at `t`.
pub fn approx_density(model: &IphModel, n: f64, m: usize, t: f64) -> Result<f64> {
    PhApproximation::new(model, n, m)?.density(t)
}

/// Block bidiagonal `mp × mp` sub-intensity matrix with `-nI` on the
/// diagonal and `n Q_ℓ` above it, together with `(α, 0, …, 0)`.
pub fn materialize_subintensity(model: &IphModel, n: f64, m: usize) -> Result<(Vec<f64>, SquareMatrix)> {
    check_rate(model, n)?;
    let p = model.p();
    let dim = m * p;
    if dim > MAX_MATERIALIZED_DIM {
        return Err(Error::SizeLimit {
            dim,
            limit: MAX_MATERIALIZED_DIM,
        });
    }
    let mut t = SquareMatrix::zeros(dim, dim);
    for stage in 0..m {
        let at = stage * p;
        for i in 0..p {
            t[(at + i, at + i)] = -n;
        }
        if stage + 1 < m {
            let q = q_factor_unchecked(model, stage + 1, n) * n;
            t.view_mut((at, at + p), (p, p)).copy_from(&q);
        }
    }
    let mut alpha = vec![0.0; dim];
    alpha[..p].copy_from_slice(model.pi().as_slice());
    Ok((alpha, t))
}
