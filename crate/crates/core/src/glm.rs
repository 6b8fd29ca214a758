//! Complete-data maximum likelihood for piecewise-constant rates.
//!
//! The initial distribution has the multinomial MLE `B / W`. Each transition
//! `i -> j` gets its own log-linear Poisson regression
//! `O_ij(k) ~ Poisson(E_i(k) · exp(x_k' θ_ij))` with `log E_i(k)` as offset,
//! fitted by IRLS (Newton on the log-likelihood) with step halving.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matexp::SquareMatrix;
use crate::model::Grid;
use crate::simulate::SufficientStats;

/// Rates are never allowed below this value when assembled into a model.
pub const RATE_FLOOR: f64 = 1e-12;

/// Time basis of the regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Basis {
    /// One free rate per interval: the occurrence–exposure rates.
    Saturated,
    /// `log μ = θ₁ + θ₂ x_k`.
    Linear,
    /// `log μ = θ₀ + θ₁ x_k + … + θ_d x_k^d`.
    Polynomial(usize),
}

/// How interval `k` maps to its covariate `x_k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CovariateRule {
    /// Midpoint of `(s_k, min(s_{k+1}, τ_max)]`.
    #[default]
    ClippedMidpoint,
    /// `s_{k+1}` for bounded intervals; the clipped midpoint for the last one.
    RightEndpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionSpec {
    pub basis: Basis,
    pub covariate_rule: CovariateRule,
}

impl RegressionSpec {
    pub fn saturated() -> Self {
        Self {
            basis: Basis::Saturated,
            covariate_rule: CovariateRule::default(),
        }
    }

    pub fn linear() -> Self {
        Self {
            basis: Basis::Linear,
            covariate_rule: CovariateRule::default(),
        }
    }

    pub fn polynomial(degree: usize) -> Self {
        Self {
            basis: Basis::Polynomial(degree),
            covariate_rule: CovariateRule::default(),
        }
    }

    fn degree(&self) -> Option<usize> {
        match self.basis {
            Basis::Saturated => None,
            Basis::Linear => Some(1),
            Basis::Polynomial(d) => Some(d),
        }
    }

    /// Checks identifiability against `k` intervals.
    pub fn check(&self, k: usize) -> Result<()> {
        if let Some(d) = self.degree() {
            if d == 0 {
                return Err(Error::Identifiability("polynomial degree must be at least 1".into()));
            }
            if d + 1 > k {
                return Err(Error::Identifiability(format!(
                    "degree {d} needs at least {} intervals, grid has {k}",
                    d + 1
                )));
            }
        }
        Ok(())
    }

    /// Number of coefficients per transition.
    pub fn n_coef(&self, k: usize) -> usize {
        match self.degree() {
            None => k,
            Some(d) => d + 1,
        }
    }

    /// Design row for interval `k` with covariate `x`.
    pub fn design_row(&self, k: usize, x: f64, n_intervals: usize) -> Vec<f64> {
        match self.degree() {
            None => (0..n_intervals).map(|c| if c == k { 1.0 } else { 0.0 }).collect(),
            Some(d) => (0..=d).map(|e| x.powi(e as i32)).collect(),
        }
    }
}

/// Covariate `x_k` for every interval.
pub fn covariates(grid: &Grid, rule: CovariateRule, tau_max: f64) -> Vec<f64> {
    let clipped = |k: usize| {
        let lo = grid.lower(k);
        let hi = grid.upper(k).min(tau_max).max(lo);
        0.5 * (lo + hi)
    };
    (0..grid.len())
        .map(|k| match rule {
            CovariateRule::RightEndpoint if k + 1 < grid.len() => grid.upper(k),
            _ => clipped(k),
        })
        .collect()
}

/// One Poisson observation: `response ~ Poisson(exposure · μ_{from,to}^{interval})`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoissonCell {
    pub from: usize,
    pub to: usize,
    pub interval: usize,
    pub response: f64,
    pub exposure: f64,
    pub covariate: f64,
}

/// Coefficients of one transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionFit {
    pub from: usize,
    pub to: usize,
    pub coefficients: Vec<f64>,
    /// Whether each coefficient is informed by data. For the saturated basis
    /// an interval with no exposure is undetermined.
    pub determined: Vec<bool>,
    pub deviance: f64,
    pub iterations: usize,
    pub converged: bool,
    /// The MLE sits on the boundary (zero rate) and was floored.
    pub floored: bool,
}

/// Regression output for all transitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaEstimate {
    pub spec: RegressionSpec,
    pub transitions: Vec<TransitionFit>,
    pub deviance: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl ThetaEstimate {
    pub fn transition(&self, from: usize, to: usize) -> Option<&TransitionFit> {
        self.transitions.iter().find(|t| t.from == from && t.to == to)
    }

    /// Turns an unconverged estimate into [`Error::NonConvergence`].
    pub fn require_converged(&self) -> Result<()> {
        if self.converged {
            Ok(())
        } else {
            Err(Error::NonConvergence {
                iterations: self.iterations,
                max_score: f64::NAN,
            })
        }
    }
}

/// Transition rates `μ_ij^k` laid out as `K × p × (p+1)`; column `p` is absorption.
#[derive(Debug, Clone, PartialEq)]
pub struct RateTable {
    p: usize,
    k: usize,
    values: Vec<f64>,
    determined: Vec<bool>,
}

impl RateTable {
    pub fn zeros(p: usize, k: usize) -> Self {
        Self {
            p,
            k,
            values: vec![0.0; k * p * (p + 1)],
            determined: vec![false; k * p * (p + 1)],
        }
    }

    /// Reads the rates of an existing set of sub-intensity matrices.
    pub fn from_blocks(blocks: &[SquareMatrix]) -> Self {
        let p = blocks[0].nrows();
        let mut table = Self::zeros(p, blocks.len());
        for (k, b) in blocks.iter().enumerate() {
            for i in 0..p {
                for j in 0..p {
                    if i != j {
                        table.set(k, i, j, b[(i, j)]);
                    }
                }
                table.set(k, i, p, (-b.row(i).sum()).max(0.0));
            }
        }
        table
    }

    fn index(&self, k: usize, i: usize, j: usize) -> usize {
        (k * self.p + i) * (self.p + 1) + j
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.values[self.index(k, i, j)]
    }

    pub fn is_determined(&self, k: usize, i: usize, j: usize) -> bool {
        self.determined[self.index(k, i, j)]
    }

    pub fn set(&mut self, k: usize, i: usize, j: usize, v: f64) {
        let idx = self.index(k, i, j);
        self.values[idx] = v;
        self.determined[idx] = true;
    }

    /// Copies every undetermined entry from `other`; returns how many were filled.
    pub fn fill_undetermined(&mut self, other: &RateTable) -> usize {
        let mut filled = 0;
        for idx in 0..self.values.len() {
            if !self.determined[idx] {
                self.values[idx] = other.values[idx];
                self.determined[idx] = true;
                filled += 1;
            }
        }
        filled
    }

    /// Raises every rate below [`RATE_FLOOR`]; returns how many were raised.
    pub fn apply_floor(&mut self) -> usize {
        let mut raised = 0;
        for k in 0..self.k {
            for i in 0..self.p {
                for j in 0..=self.p {
                    let idx = self.index(k, i, j);
                    if i != j && self.values[idx] < RATE_FLOOR {
                        self.values[idx] = RATE_FLOOR;
                        raised += 1;
                    }
                }
            }
        }
        raised
    }

    /// Sub-intensity matrices with diagonal equal to minus the total outflow.
    pub fn blocks(&self) -> Vec<SquareMatrix> {
        let p = self.p;
        (0..self.k)
            .map(|k| {
                let mut t = SquareMatrix::zeros(p, p);
                for i in 0..p {
                    let mut out = 0.0;
                    for j in 0..=p {
                        if j == i {
                            continue;
                        }
                        let r = self.get(k, i, j);
                        out += r;
                        if j < p {
                            t[(i, j)] = r;
                        }
                    }
                    t[(i, i)] = -out;
                }
                t
            })
            .collect()
    }
}

/// Multinomial MLE of the initial distribution.
pub fn estimate_pi(counts: &[f64], total: f64) -> Result<Vec<f64>> {
    if !(total > 0.0) {
        return Err(Error::Domain(format!("total weight must be positive, got {total}")));
    }
    if counts.iter().any(|b| *b < 0.0 || !b.is_finite()) {
        return Err(Error::Domain("initial counts must be finite and nonnegative".into()));
    }
    let sum: f64 = counts.iter().sum();
    if (sum - total).abs() > 1e-9 * total.max(1.0) {
        return Err(Error::Domain(format!("initial counts sum to {sum}, expected {total}")));
    }
    Ok(counts.iter().map(|b| b / sum).collect())
}

/// Poisson cells for every transition and interval with positive exposure.
pub fn build_design(stats: &SufficientStats, covariates: &[f64]) -> Vec<PoissonCell> {
    let p = stats.p();
    let mut cells = Vec::new();
    for i in 0..p {
        for j in 0..=p {
            if j == i {
                continue;
            }
            for k in 0..stats.k() {
                let exposure = stats.exposure(k, i);
                if exposure > 0.0 {
                    cells.push(PoissonCell {
                        from: i,
                        to: j,
                        interval: k,
                        response: stats.occurrence(k, i, j).max(0.0),
                        exposure,
                        covariate: covariates[k],
                    });
                }
            }
        }
    }
    cells
}

/// IRLS controls.
#[derive(Debug, Clone, Copy)]
pub struct IrlsOptions {
    pub max_iter: usize,
    /// Convergence when `max |score| <= score_tol · max(1, Σ response)`.
    pub score_tol: f64,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            score_tol: 1e-12,
        }
    }
}

/// Fits every transition present in `cells` independently.
pub fn fit_poisson(cells: &[PoissonCell], spec: &RegressionSpec, n_intervals: usize) -> Result<ThetaEstimate> {
    fit_poisson_with(cells, spec, n_intervals, IrlsOptions::default())
}

pub fn fit_poisson_with(
    cells: &[PoissonCell],
    spec: &RegressionSpec,
    n_intervals: usize,
    opts: IrlsOptions,
) -> Result<ThetaEstimate> {
    spec.check(n_intervals)?;
    let mut keys: Vec<(usize, usize)> = cells.iter().map(|c| (c.from, c.to)).collect();
    keys.sort_unstable();
    keys.dedup();
    let mut transitions = Vec::with_capacity(keys.len());
    for (from, to) in keys {
        let group: Vec<PoissonCell> = cells.iter().filter(|c| c.from == from && c.to == to).copied().collect();
        transitions.push(fit_transition(&group, spec, n_intervals, opts)?);
    }
    Ok(ThetaEstimate {
        spec: *spec,
        deviance: transitions.iter().map(|t| t.deviance).sum(),
        iterations: transitions.iter().map(|t| t.iterations).max().unwrap_or(0),
        converged: transitions.iter().all(|t| t.converged),
        transitions,
    })
}

fn poisson_deviance(y: &[f64], mu: &[f64]) -> f64 {
    2.0 * y
        .iter()
        .zip(mu)
        .map(|(&y, &m)| {
            let term = if y > 0.0 { y * (y / m).ln() } else { 0.0 };
            term - (y - m)
        })
        .sum::<f64>()
}

fn full_column_rank(x: &DMatrix<f64>) -> bool {
    let sv = x.clone().svd(false, false).singular_values;
    let max = sv.max();
    max > 0.0 && sv.min() > 1e-10 * max
}

/// IRLS for the cells of a single transition.
pub fn fit_transition(
    cells: &[PoissonCell],
    spec: &RegressionSpec,
    n_intervals: usize,
    opts: IrlsOptions,
) -> Result<TransitionFit> {
    let (from, to) = cells.first().map(|c| (c.from, c.to)).unwrap_or((0, 0));
    let q_full = spec.n_coef(n_intervals);
    let sum_y: f64 = cells.iter().map(|c| c.response).sum();
    let sum_e: f64 = cells.iter().map(|c| c.exposure).sum();

    // Columns carrying information: all of them for polynomial bases, the
    // intervals with cells for the saturated one.
    let active: Vec<usize> = match spec.basis {
        Basis::Saturated => {
            let mut ks: Vec<usize> = cells.iter().map(|c| c.interval).collect();
            ks.sort_unstable();
            ks.dedup();
            ks
        }
        _ => (0..q_full).collect(),
    };
    let mut determined = vec![false; q_full];
    active.iter().for_each(|&c| determined[c] = true);

    if cells.is_empty() {
        return Ok(TransitionFit {
            from,
            to,
            coefficients: vec![0.0; q_full],
            determined,
            deviance: 0.0,
            iterations: 0,
            converged: true,
            floored: false,
        });
    }

    let floor = RATE_FLOOR.ln();
    if !(sum_y > 0.0) {
        // boundary MLE: zero rate everywhere
        let mut coefficients = vec![0.0; q_full];
        match spec.basis {
            Basis::Saturated => active.iter().for_each(|&c| coefficients[c] = floor),
            _ => coefficients[0] = floor,
        }
        let mu: Vec<f64> = cells.iter().map(|c| c.exposure * RATE_FLOOR).collect();
        let y: Vec<f64> = cells.iter().map(|c| c.response).collect();
        return Ok(TransitionFit {
            from,
            to,
            coefficients,
            determined,
            deviance: poisson_deviance(&y, &mu),
            iterations: 0,
            converged: true,
            floored: true,
        });
    }

    let q = active.len();
    let n = cells.len();
    let mut x = DMatrix::<f64>::zeros(n, q);
    for (r, c) in cells.iter().enumerate() {
        let row = spec.design_row(c.interval, c.covariate, n_intervals);
        for (col, &src) in active.iter().enumerate() {
            x[(r, col)] = row[src];
        }
    }
    if n < q || !full_column_rank(&x) {
        return Err(Error::Identifiability(format!(
            "design for transition {from} -> {to} has rank below {q}"
        )));
    }
    let y = DVector::from_iterator(n, cells.iter().map(|c| c.response));
    let offset = DVector::from_iterator(n, cells.iter().map(|c| c.exposure.ln()));

    let mut beta = DVector::<f64>::zeros(q);
    let pooled = (sum_y / sum_e).ln();
    match spec.basis {
        Basis::Saturated => beta.fill(pooled),
        _ => beta[0] = pooled,
    }

    let mean = |b: &DVector<f64>| -> DVector<f64> { (&x * b + &offset).map(f64::exp) };
    let mut mu = mean(&beta);
    let mut dev = poisson_deviance(y.as_slice(), mu.as_slice());
    let scale = sum_y.max(1.0);
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iter {
        let score = x.tr_mul(&(&y - &mu));
        let max_score = score.amax();
        if max_score <= opts.score_tol * scale {
            converged = true;
            break;
        }
        iterations += 1;
        let mut info = DMatrix::<f64>::zeros(q, q);
        for r in 0..n {
            let w = mu[r];
            for a in 0..q {
                let xa = x[(r, a)] * w;
                if xa == 0.0 {
                    continue;
                }
                for b in 0..q {
                    info[(a, b)] += xa * x[(r, b)];
                }
            }
        }
        let step = match info.clone().cholesky() {
            Some(ch) => ch.solve(&score),
            None => match info.lu().solve(&score) {
                Some(s) => s,
                None => {
                    return Err(Error::Identifiability(format!(
                        "singular information matrix for transition {from} -> {to}"
                    )))
                }
            },
        };
        if step.iter().any(|v| !v.is_finite()) {
            return Err(Error::Identifiability(format!(
                "non-finite Newton step for transition {from} -> {to}"
            )));
        }

        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &beta + &step * t;
            let cand_mu = mean(&cand);
            let cand_dev = poisson_deviance(y.as_slice(), cand_mu.as_slice());
            if cand_dev.is_finite() && cand_dev <= dev + 1e-13 * dev.abs().max(1.0) {
                let moved = (&cand - &beta).amax();
                beta = cand;
                mu = cand_mu;
                dev = cand_dev;
                accepted = true;
                if moved <= 1e-15 * beta.amax().max(1.0) {
                    // at machine precision; nothing left to gain
                    converged = true;
                }
                break;
            }
            t *= 0.5;
        }
        if !accepted || converged {
            converged = converged || x.tr_mul(&(&y - &mu)).amax() <= 1e-9 * scale;
            break;
        }
    }

    let mut coefficients = vec![0.0; q_full];
    for (col, &src) in active.iter().enumerate() {
        coefficients[src] = beta[col];
    }
    if !coefficients.iter().all(|c| c.is_finite()) {
        converged = false;
    }
    Ok(TransitionFit {
        from,
        to,
        coefficients,
        determined,
        deviance: dev,
        iterations,
        converged,
        floored: false,
    })
}

/// Rates `μ_ij^k = exp(x_k' θ_ij)` at unit exposure. Entries of transitions
/// or saturated intervals without data stay undetermined.
pub fn rates_from_theta(theta: &ThetaEstimate, covariates: &[f64], p: usize) -> RateTable {
    let n_intervals = covariates.len();
    let mut table = RateTable::zeros(p, n_intervals);
    for tr in &theta.transitions {
        for (k, &x) in covariates.iter().enumerate() {
            let row = theta.spec.design_row(k, x, n_intervals);
            let informed = match theta.spec.basis {
                Basis::Saturated => tr.determined[k],
                _ => tr.determined.iter().all(|d| *d),
            };
            if !informed {
                continue;
            }
            let eta: f64 = row.iter().zip(&tr.coefficients).map(|(a, b)| a * b).sum();
            table.set(k, tr.from, tr.to, eta.exp());
        }
    }
    table
}

/// Saturated closed form `O / E` for every cell with positive exposure.
pub fn occurrence_exposure_rates(stats: &SufficientStats) -> RateTable {
    let p = stats.p();
    let mut table = RateTable::zeros(p, stats.k());
    for k in 0..stats.k() {
        for i in 0..p {
            let e = stats.exposure(k, i);
            if e > 0.0 {
                for j in (0..=p).filter(|&j| j != i) {
                    table.set(k, i, j, stats.occurrence(k, i, j).max(0.0) / e);
                }
            }
        }
    }
    table
}

/// Complete-data log-likelihood `Σ B log π + Σ (O log μ - E μ)`.
pub fn complete_loglik(stats: &SufficientStats, pi: &[f64], rates: &RateTable) -> Result<f64> {
    let p = stats.p();
    let mut ll = 0.0;
    for i in 0..p {
        let b = stats.initial[i];
        if b > 0.0 {
            if !(pi[i] > 0.0) {
                return Err(Error::Domain(format!("initial count {b} in state {i} with pi = 0")));
            }
            ll += b * pi[i].ln();
        }
    }
    for k in 0..stats.k() {
        for i in 0..p {
            let e = stats.exposure(k, i);
            for j in (0..=p).filter(|&j| j != i) {
                let o = stats.occurrence(k, i, j);
                let mu = rates.get(k, i, j);
                if o > 0.0 {
                    if !(mu > 0.0) {
                        return Err(Error::Domain(format!(
                            "occurrences in cell (k={k}, {i}->{j}) with zero rate"
                        )));
                    }
                    ll += o * mu.ln();
                }
                ll -= e * mu;
            }
        }
    }
    Ok(ll)
}
