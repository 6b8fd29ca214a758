//! Inhomogeneous phase-type models with piecewise-constant sub-intensity
//! matrices.
//!
//! Intervals are indexed from 0 in code: interval `k` is `(s_k, s_{k+1}]`
//! and the last one, `k = K-1`, is `(s_{K-1}, ∞)`. A point sitting exactly
//! on a breakpoint belongs to the interval on its left.

use std::fmt;

use nalgebra::{DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matexp::{expm, SquareMatrix};

/// Grid `0 = s_0 < s_1 < … < s_{K-1}`; the K-th interval is unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    starts: Vec<f64>,
}

impl Grid {
    /// Builds a grid from the finite interior breakpoints `s_1, …, s_{K-1}`.
    pub fn new(interior: &[f64]) -> Result<Self> {
        let mut starts = Vec::with_capacity(interior.len() + 1);
        starts.push(0.0);
        starts.extend_from_slice(interior);
        for (idx, w) in starts.windows(2).enumerate() {
            if !w[1].is_finite() || w[1] <= w[0] {
                return Err(Error::InvalidModel(format!(
                    "breakpoints must be finite and strictly increasing from 0 (breakpoint {} = {})",
                    idx + 1,
                    w[1]
                )));
            }
        }
        Ok(Self { starts })
    }

    pub fn single() -> Self {
        Self { starts: vec![0.0] }
    }

    /// Number of intervals K.
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Interior breakpoints `s_1, …, s_{K-1}`.
    pub fn interior(&self) -> &[f64] {
        &self.starts[1..]
    }

    /// Left end of interval `k`.
    pub fn lower(&self, k: usize) -> f64 {
        self.starts[k]
    }

    /// Right end of interval `k` (`∞` for the last one).
    pub fn upper(&self, k: usize) -> f64 {
        self.starts.get(k + 1).copied().unwrap_or(f64::INFINITY)
    }

    pub fn width(&self, k: usize) -> f64 {
        self.upper(k) - self.lower(k)
    }

    /// Index of the interval `(s_k, s_{k+1}]` containing `x > 0`.
    pub fn interval_index(&self, x: f64) -> Result<usize> {
        if !(x > 0.0) || x.is_nan() {
            return Err(Error::Domain(format!("interval lookup needs x > 0, got {x}")));
        }
        // number of starts strictly below x, minus one
        let below = self.starts.partition_point(|s| *s < x);
        Ok(below - 1)
    }

    /// Interval of a nonnegative time, placing 0 in the first interval.
    fn interval_of_time(&self, x: f64) -> usize {
        if x <= 0.0 {
            0
        } else {
            self.starts.partition_point(|s| *s < x) - 1
        }
    }

    /// Length of `(s_k, s_{k+1}] ∩ (0, x]`.
    pub fn overlap(&self, k: usize, x: f64) -> f64 {
        (self.upper(k).min(x) - self.lower(k)).max(0.0)
    }
}

/// Tolerances used by [`IphModel::validate`].
#[derive(Debug, Clone, Copy)]
pub struct ValidationOptions {
    pub structural_tol: f64,
    pub normalization_tol: f64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            structural_tol: 1e-10,
            normalization_tol: 1e-12,
        }
    }
}

/// A violated model invariant. Interval and state indices are 0-based.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NegativeInitial { i: usize, value: f64 },
    InitialNotNormalized { sum: f64 },
    NegativeOffDiagonal { k: usize, i: usize, j: usize, value: f64 },
    PositiveDiagonal { k: usize, i: usize, value: f64 },
    PositiveRowSum { k: usize, i: usize, sum: f64 },
    NonFinite { k: usize, i: usize, j: usize },
    LastBlockSingular,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NegativeInitial { i, value } => write!(f, "pi[{i}] = {value} is negative"),
            Violation::InitialNotNormalized { sum } => write!(f, "pi sums to {sum}, not 1"),
            Violation::NegativeOffDiagonal { k, i, j, value } => {
                write!(f, "T[{k}][{i},{j}] = {value} is a negative off-diagonal rate")
            }
            Violation::PositiveDiagonal { k, i, value } => {
                write!(f, "T[{k}][{i},{i}] = {value} is a positive diagonal entry")
            }
            Violation::PositiveRowSum { k, i, sum } => {
                write!(f, "row {i} of T[{k}] sums to {sum} > 0")
            }
            Violation::NonFinite { k, i, j } => write!(f, "T[{k}][{i},{j}] is not finite"),
            Violation::LastBlockSingular => {
                write!(f, "last sub-intensity matrix is singular (absorption not certain)")
            }
        }
    }
}

/// Smoothness diagnostics of the density at the breakpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SmoothnessReport {
    pub continuous: bool,
    pub differentiable: bool,
}

/// `IPH(π, T(·))` with `T(s) = T_k` on interval `k`.
#[derive(Debug, Clone)]
pub struct IphModel {
    pi: RowDVector<f64>,
    grid: Grid,
    blocks: Vec<SquareMatrix>,
    exits: Vec<DVector<f64>>,
    /// `e^{T_k (s_{k+1} - s_k)}` for the bounded intervals.
    interval_exp: Vec<SquareMatrix>,
    /// `π A(0, k-1)` for k = 0..K-1.
    prefix: Vec<RowDVector<f64>>,
}

impl IphModel {
    /// Assembles a model. Only shapes and finiteness are enforced here; use
    /// [`IphModel::validate`] for the probabilistic invariants.
    pub fn new(pi: Vec<f64>, grid: Grid, blocks: Vec<SquareMatrix>) -> Result<Self> {
        let p = pi.len();
        if p == 0 {
            return Err(Error::InvalidModel("model needs at least one transient state".into()));
        }
        if blocks.len() != grid.len() {
            return Err(Error::InvalidModel(format!(
                "grid has {} intervals but {} sub-intensity matrices were given",
                grid.len(),
                blocks.len()
            )));
        }
        for (k, b) in blocks.iter().enumerate() {
            if b.nrows() != p || b.ncols() != p {
                return Err(Error::InvalidModel(format!(
                    "T[{k}] is {}x{}, expected {p}x{p}",
                    b.nrows(),
                    b.ncols()
                )));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidModel(format!("T[{k}] has non-finite entries")));
            }
        }
        if pi.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel("pi has non-finite entries".into()));
        }
        let exits = blocks
            .iter()
            .map(|b| DVector::from_iterator(p, b.row_iter().map(|r| (-r.sum()).max(0.0))))
            .collect();
        let mut interval_exp = Vec::with_capacity(grid.len().saturating_sub(1));
        for k in 0..grid.len() - 1 {
            interval_exp.push(expm(&blocks[k], grid.width(k))?);
        }
        let pi = RowDVector::from_vec(pi);
        let mut prefix = Vec::with_capacity(grid.len());
        prefix.push(pi.clone());
        for a in &interval_exp {
            let next = prefix.last().unwrap() * a;
            prefix.push(next);
        }
        Ok(Self {
            pi,
            grid,
            blocks,
            exits,
            interval_exp,
            prefix,
        })
    }

    /// Assembles and validates with default tolerances.
    pub fn new_validated(pi: Vec<f64>, grid: Grid, blocks: Vec<SquareMatrix>) -> Result<Self> {
        let model = Self::new(pi, grid, blocks)?;
        let violations = model.validate();
        if let Some(v) = violations.first() {
            return Err(Error::InvalidModel(format!(
                "{v}{}",
                if violations.len() > 1 {
                    format!(" (and {} more)", violations.len() - 1)
                } else {
                    String::new()
                }
            )));
        }
        Ok(model)
    }

    /// Homogeneous phase-type model (K = 1).
    pub fn homogeneous(pi: Vec<f64>, t: SquareMatrix) -> Result<Self> {
        Self::new(pi, Grid::single(), vec![t])
    }

    pub fn p(&self) -> usize {
        self.pi.len()
    }

    pub fn k(&self) -> usize {
        self.grid.len()
    }

    pub fn pi(&self) -> &RowDVector<f64> {
        &self.pi
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn blocks(&self) -> &[SquareMatrix] {
        &self.blocks
    }

    pub fn block(&self, k: usize) -> &SquareMatrix {
        &self.blocks[k]
    }

    /// Exit vector `t_k = -T_k e`.
    pub fn exit(&self, k: usize) -> &DVector<f64> {
        &self.exits[k]
    }

    /// `e^{T_k (s_{k+1} - s_k)}` for a bounded interval `k < K-1`.
    pub fn interval_exp(&self, k: usize) -> &SquareMatrix {
        &self.interval_exp[k]
    }

    /// `π A(0, k-1)`: the sub-distribution over transient states at `s_k`.
    pub fn prefix(&self, k: usize) -> &RowDVector<f64> {
        &self.prefix[k]
    }

    /// Transition rate `μ_ij^k`; `j == p` is the absorbing state.
    pub fn rate(&self, k: usize, i: usize, j: usize) -> f64 {
        if j == self.p() {
            self.exits[k][i]
        } else {
            self.blocks[k][(i, j)]
        }
    }

    /// Largest `|T_k[i,i]|` over all intervals and states.
    pub fn max_abs_diagonal(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|b| b.diagonal().iter().map(|v| v.abs()).collect::<Vec<_>>())
            .fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Vec<Violation> {
        self.validate_with(ValidationOptions::default())
    }

    pub fn validate_with(&self, opts: ValidationOptions) -> Vec<Violation> {
        let mut out = Vec::new();
        let p = self.p();
        for (i, v) in self.pi.iter().enumerate() {
            if *v < 0.0 {
                out.push(Violation::NegativeInitial { i, value: *v });
            }
        }
        let sum = self.pi.sum();
        if (sum - 1.0).abs() > opts.normalization_tol {
            out.push(Violation::InitialNotNormalized { sum });
        }
        for (k, b) in self.blocks.iter().enumerate() {
            for i in 0..p {
                for j in 0..p {
                    let v = b[(i, j)];
                    if !v.is_finite() {
                        out.push(Violation::NonFinite { k, i, j });
                    } else if i != j && v < 0.0 {
                        out.push(Violation::NegativeOffDiagonal { k, i, j, value: v });
                    }
                }
                let d = b[(i, i)];
                if d > 0.0 {
                    out.push(Violation::PositiveDiagonal { k, i, value: d });
                }
                let row: f64 = b.row(i).sum();
                let scale = b.row(i).iter().map(|v| v.abs()).fold(1.0, f64::max);
                if row > opts.structural_tol * scale {
                    out.push(Violation::PositiveRowSum { k, i, sum: row });
                }
            }
        }
        if !absorption_reachable(self.blocks.last().unwrap()) {
            out.push(Violation::LastBlockSingular);
        }
        out
    }

    pub fn interval_index(&self, x: f64) -> Result<usize> {
        self.grid.interval_index(x)
    }

    /// `A(k1, k2) = ∏_{ℓ=k1}^{k2} e^{T_ℓ (s_{ℓ+1} - s_ℓ)}` over bounded
    /// intervals; identity when `k2 < k1`.
    pub fn forward_product(&self, k1: usize, k2: isize) -> Result<SquareMatrix> {
        let p = self.p();
        let mut out = SquareMatrix::identity(p, p);
        if k2 < k1 as isize {
            return Ok(out);
        }
        let k2 = k2 as usize;
        if k2 >= self.k() - 1 {
            return Err(Error::Domain(format!(
                "forward product reaches unbounded interval {k2} (K = {})",
                self.k()
            )));
        }
        for a in &self.interval_exp[k1..=k2] {
            out *= a;
        }
        Ok(out)
    }

    /// Sub-transition matrix `P̄(s, t)` among transient states.
    pub fn sub_transition(&self, s: f64, t: f64) -> Result<SquareMatrix> {
        if !(s >= 0.0) || !(t >= s) || !t.is_finite() {
            return Err(Error::Domain(format!("sub_transition needs 0 <= s <= t, got s={s}, t={t}")));
        }
        let ks = self.grid.interval_of_time(s);
        let kt = self.grid.interval_of_time(t);
        if ks == kt {
            return expm(&self.blocks[ks], t - s);
        }
        let head = expm(&self.blocks[ks], self.grid.upper(ks) - s)?;
        let middle = self.forward_product(ks + 1, kt as isize - 1)?;
        let tail = expm(&self.blocks[kt], t - self.grid.lower(kt))?;
        Ok(head * middle * tail)
    }

    /// Row vector `π P̄(0, x)` and the interval of `x`.
    pub fn state_at(&self, x: f64) -> Result<(RowDVector<f64>, usize)> {
        let k = self.grid.interval_index(x)?;
        if !x.is_finite() {
            return Err(Error::Domain(format!("x must be finite, got {x}")));
        }
        let e = expm(&self.blocks[k], x - self.grid.lower(k))?;
        Ok((&self.prefix[k] * e, k))
    }

    pub fn density(&self, x: f64) -> Result<f64> {
        let (a, k) = self.state_at(x)?;
        Ok((a * &self.exits[k])[0].max(0.0))
    }

    pub fn survival(&self, x: f64) -> Result<f64> {
        let (a, _) = self.state_at(x)?;
        Ok(a.sum().clamp(0.0, 1.0))
    }

    pub fn cdf(&self, x: f64) -> Result<f64> {
        Ok(1.0 - self.survival(x)?)
    }

    pub fn hazard(&self, x: f64) -> Result<f64> {
        let (a, k) = self.state_at(x)?;
        let surv = a.sum();
        if !(surv > f64::MIN_POSITIVE) {
            return Err(Error::Degenerate(format!("survival underflows at x = {x}")));
        }
        Ok((&a * &self.exits[k])[0].max(0.0) / surv)
    }

    /// Smallest `x` with `cdf(x) >= q`, found by bisection.
    pub fn quantile(&self, q: f64) -> Result<f64> {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::Domain(format!("quantile level must be in (0, 1), got {q}")));
        }
        let target = 1.0 - q;
        let mut hi = self.grid.interior().last().copied().unwrap_or(1.0).max(1.0);
        let mut iterations = 0;
        while self.survival(hi)? > target {
            hi *= 2.0;
            iterations += 1;
            if iterations > 200 {
                return Err(Error::Degenerate("quantile bracket diverged".into()));
            }
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.survival(mid)? > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(hi)
    }

    /// `|f(s_j-) - f(s_j+)|` at interior breakpoint `s_j`, `j = 1..K-1`.
    pub fn density_gap(&self, j: usize) -> Result<f64> {
        if j == 0 || j >= self.k() {
            return Err(Error::Domain(format!(
                "breakpoint index must be in 1..{}, got {j}",
                self.k() - 1
            )));
        }
        let diff = &self.exits[j - 1] - &self.exits[j];
        Ok((&self.prefix[j] * diff)[0].abs())
    }

    pub fn smoothness_report(&self) -> SmoothnessReport {
        const TOL: f64 = 1e-10;
        let continuous = (1..self.k()).all(|j| self.density_gap(j).map_or(false, |g| g < TOL));
        let first_exit = &self.exits[0];
        let exits_equal = self
            .exits
            .iter()
            .all(|t| (t - first_exit).amax() < TOL);
        let second = |b: &SquareMatrix| -(b * b).column_sum();
        let first_second = second(&self.blocks[0]);
        let curvature_equal = self
            .blocks
            .iter()
            .all(|b| (second(b) - &first_second).amax() < TOL);
        SmoothnessReport {
            continuous,
            differentiable: exits_equal && curvature_equal,
        }
    }

    /// Conditional law of the underlying process given absorption at `tau`.
    pub fn conditional(&self, tau: f64) -> Result<ConditionalLaw<'_>> {
        let (a, k) = self.state_at(tau)?;
        let f = (a * &self.exits[k])[0];
        if !(f > 0.0) {
            return Err(Error::Degenerate(format!("density vanishes at tau = {tau}")));
        }
        Ok(ConditionalLaw {
            model: self,
            tau,
            tau_interval: k,
            density: f,
        })
    }
}

/// For a sub-intensity matrix, invertibility is equivalent to every state
/// being able to reach a state with positive exit rate.
fn absorption_reachable(t: &SquareMatrix) -> bool {
    let p = t.nrows();
    let mut reach: Vec<bool> = (0..p).map(|i| t.row(i).sum() < 0.0).collect();
    loop {
        let mut changed = false;
        for i in 0..p {
            if reach[i] {
                continue;
            }
            if (0..p).any(|j| j != i && reach[j] && t[(i, j)] > 0.0) {
                reach[i] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    reach.into_iter().all(|r| r)
}

/// The process conditioned on `τ = tau`: a time-inhomogeneous Markov jump
/// process on the transient states over `[0, tau)`.
#[derive(Debug, Clone)]
pub struct ConditionalLaw<'a> {
    model: &'a IphModel,
    tau: f64,
    tau_interval: usize,
    density: f64,
}

impl ConditionalLaw<'_> {
    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn density(&self) -> f64 {
        self.density
    }

    /// `P̄(t, τ) t(τ)`: probability density of absorbing at `τ` from each state at `t`.
    fn absorb_from(&self, t: f64) -> Result<DVector<f64>> {
        Ok(self.model.sub_transition(t, self.tau)? * self.model.exit(self.tau_interval))
    }

    pub fn initial(&self) -> Result<Vec<f64>> {
        let h = self.absorb_from(0.0)?;
        Ok(self
            .model
            .pi()
            .iter()
            .zip(h.iter())
            .map(|(p, h)| p * h / self.density)
            .collect())
    }

    /// `p̃_ij(t, s | τ)` for `0 <= t <= s < τ`. Rows for states that cannot
    /// absorb at `τ` are left as unit rows.
    pub fn transition(&self, t: f64, s: f64) -> Result<SquareMatrix> {
        if !(t >= 0.0 && s >= t && s < self.tau) {
            return Err(Error::Domain(format!(
                "conditional transition needs 0 <= t <= s < tau, got t={t}, s={s}, tau={}",
                self.tau
            )));
        }
        let p_ts = self.model.sub_transition(t, s)?;
        let h_s = self.absorb_from(s)?;
        let h_t = self.absorb_from(t)?;
        let p = self.model.p();
        Ok(SquareMatrix::from_fn(p, p, |i, j| {
            if h_t[i] > 0.0 {
                p_ts[(i, j)] * h_s[j] / h_t[i]
            } else if i == j {
                1.0
            } else {
                0.0
            }
        }))
    }

    /// `μ̃_ij(t | τ)` for transient `i != j`.
    pub fn intensity(&self, t: f64, i: usize, j: usize) -> Result<f64> {
        let p = self.model.p();
        if i >= p || j >= p || i == j {
            return Err(Error::Domain(format!("intensity needs distinct transient states, got ({i}, {j})")));
        }
        if !(t >= 0.0 && t < self.tau) {
            return Err(Error::Domain(format!("intensity needs 0 <= t < tau, got {t}")));
        }
        let h = self.absorb_from(t)?;
        if !(h[i] > 0.0) {
            return Ok(0.0);
        }
        let k = self.model.grid.interval_of_time(t);
        Ok(self.model.block(k)[(i, j)] * h[j] / h[i])
    }
}

/// On-disk model layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDocument {
    pub p: usize,
    pub breakpoints: Vec<f64>,
    pub pi: Vec<f64>,
    /// One row-major `p*p` array per interval.
    #[serde(rename = "T")]
    pub t: Vec<Vec<f64>>,
    #[serde(default)]
    pub meta: serde_json::Map<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<serde_json::Value>,
}

impl ModelDocument {
    pub fn from_model(model: &IphModel) -> Self {
        let p = model.p();
        Self {
            p,
            breakpoints: model.grid().interior().to_vec(),
            pi: model.pi().iter().copied().collect(),
            t: model
                .blocks()
                .iter()
                .map(|b| (0..p).flat_map(|i| (0..p).map(move |j| b[(i, j)])).collect())
                .collect(),
            meta: Default::default(),
            theta: None,
        }
    }

    pub fn to_model(&self) -> Result<IphModel> {
        if self.pi.len() != self.p {
            return Err(Error::InvalidModel(format!(
                "pi has length {}, expected p = {}",
                self.pi.len(),
                self.p
            )));
        }
        let grid = Grid::new(&self.breakpoints)?;
        let blocks = self
            .t
            .iter()
            .enumerate()
            .map(|(k, flat)| {
                if flat.len() != self.p * self.p {
                    return Err(Error::InvalidModel(format!(
                        "T[{k}] has {} entries, expected {}",
                        flat.len(),
                        self.p * self.p
                    )));
                }
                Ok(SquareMatrix::from_row_slice(self.p, self.p, flat))
            })
            .collect::<Result<Vec<_>>>()?;
        IphModel::new(self.pi.clone(), grid, blocks)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
