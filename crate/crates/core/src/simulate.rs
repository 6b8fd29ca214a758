//! Path simulation of the absorbing jump process and complete-data
//! sufficient statistics.
//!
//! Random numbers come from ChaCha8 (`rand_chacha`), seeded from a `u64`.
//! Batches are split into fixed-size chunks; chunk `c` uses ChaCha stream
//! `c` of the same seed, so output does not depend on the thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Grid, IphModel};

/// Default cap on simulation steps (jumps plus breakpoint crossings) per path.
pub const DEFAULT_EVENT_CAP: usize = 1_000_000;

/// Paths per RNG stream in batch simulation.
pub const CHUNK: usize = 1024;

/// A jump at `time` from transient state `from` to `to`; `to == p` is absorption.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePath {
    pub initial_state: usize,
    pub events: Vec<Event>,
    pub absorption_time: f64,
}

impl SamplePath {
    /// Checks ordering and termination against a state space with `p` transient states.
    pub fn check(&self, p: usize) -> Result<()> {
        let bad = |msg: &str| Err(Error::Domain(format!("invalid sample path: {msg}")));
        if self.initial_state >= p {
            return bad("initial state out of range");
        }
        let Some(last) = self.events.last() else {
            return bad("no events");
        };
        if last.to != p || last.time != self.absorption_time {
            return bad("path does not end in absorption");
        }
        let mut state = self.initial_state;
        let mut time = 0.0;
        for (idx, e) in self.events.iter().enumerate() {
            if e.time <= time {
                return bad("event times not strictly increasing");
            }
            if e.from != state || e.to == e.from || e.to > p {
                return bad("inconsistent jump");
            }
            if e.to == p && idx + 1 != self.events.len() {
                return bad("absorption before final event");
            }
            state = e.to;
            time = e.time;
        }
        Ok(())
    }
}

/// Occurrences, exposures and initial counts aggregated over paths.
///
/// `occurrence(k, i, j)` counts `i -> j` jumps in interval `k`, with column
/// `j = p` for absorption; `exposure(k, i)` is the time spent in `i` within
/// interval `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    p: usize,
    k: usize,
    pub initial: Vec<f64>,
    pub occurrences: Vec<f64>,
    pub exposures: Vec<f64>,
    pub total_weight: f64,
}

impl SufficientStats {
    pub fn zeros(p: usize, k: usize) -> Self {
        Self {
            p,
            k,
            initial: vec![0.0; p],
            occurrences: vec![0.0; k * p * (p + 1)],
            exposures: vec![0.0; k * p],
            total_weight: 0.0,
        }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn k(&self) -> usize {
        self.k
    }

    fn occ_index(&self, k: usize, i: usize, j: usize) -> usize {
        (k * self.p + i) * (self.p + 1) + j
    }

    pub fn occurrence(&self, k: usize, i: usize, j: usize) -> f64 {
        self.occurrences[self.occ_index(k, i, j)]
    }

    pub fn occurrence_mut(&mut self, k: usize, i: usize, j: usize) -> &mut f64 {
        let idx = self.occ_index(k, i, j);
        &mut self.occurrences[idx]
    }

    pub fn exposure(&self, k: usize, i: usize) -> f64 {
        self.exposures[k * self.p + i]
    }

    pub fn exposure_mut(&mut self, k: usize, i: usize) -> &mut f64 {
        &mut self.exposures[k * self.p + i]
    }

    /// Elementwise sum.
    pub fn merge(&mut self, other: &SufficientStats) {
        assert_eq!((self.p, self.k), (other.p, other.k), "shape mismatch");
        let add = |a: &mut [f64], b: &[f64]| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        add(&mut self.initial, &other.initial);
        add(&mut self.occurrences, &other.occurrences);
        add(&mut self.exposures, &other.exposures);
        self.total_weight += other.total_weight;
    }

    /// Largest `|starts_i + inflow_i - outflow_i|` over states.
    pub fn flow_balance_residual(&self) -> f64 {
        let p = self.p;
        (0..p)
            .map(|i| {
                let mut net = self.initial[i];
                for k in 0..self.k {
                    for j in 0..=p {
                        if j != i {
                            net -= self.occurrence(k, i, j);
                        }
                        if j < p && j != i {
                            net += self.occurrence(k, j, i);
                        }
                    }
                }
                net.abs()
            })
            .fold(0.0, f64::max)
    }

    /// `(Σ_i B_i - W, Σ_{k,i} O_{i,p}(k) - W)` for total weight `W`.
    pub fn total_residuals(&self) -> (f64, f64) {
        let starts: f64 = self.initial.iter().sum();
        let absorbed: f64 = (0..self.k)
            .flat_map(|k| (0..self.p).map(move |i| (k, i)))
            .map(|(k, i)| self.occurrence(k, i, self.p))
            .sum();
        (starts - self.total_weight, absorbed - self.total_weight)
    }

    /// Total exposure in interval `k` summed over states.
    pub fn interval_exposure(&self, k: usize) -> f64 {
        (0..self.p).map(|i| self.exposure(k, i)).sum()
    }
}

fn draw_state(weights: impl Iterator<Item = f64>, u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (idx, w) in weights.enumerate() {
        if w > 0.0 {
            last_positive = idx;
        }
        acc += w;
        if u < acc {
            return idx;
        }
    }
    last_positive
}

/// Simulates one path with an explicit generator and step cap.
pub fn sample_path_with<R: Rng>(model: &IphModel, rng: &mut R, event_cap: usize) -> Result<SamplePath> {
    let p = model.p();
    let grid = model.grid();
    let last = grid.len() - 1;
    let initial_state = draw_state(model.pi().iter().copied(), rng.random::<f64>());
    let mut state = initial_state;
    let mut time = 0.0;
    let mut k = 0;
    let mut events = Vec::new();
    for _ in 0..event_cap {
        let block = model.block(k);
        let rate = -block[(state, state)];
        if !(rate > 0.0) {
            if k == last {
                break;
            }
            time = grid.upper(k);
            k += 1;
            continue;
        }
        let hold = -(1.0 - rng.random::<f64>()).ln() / rate;
        if k < last && time + hold > grid.upper(k) {
            time = grid.upper(k);
            k += 1;
            continue;
        }
        time += hold;
        let u = rng.random::<f64>() * rate;
        let targets = (0..=p).map(|j| {
            if j == state {
                0.0
            } else {
                model.rate(k, state, j)
            }
        });
        let to = draw_state(targets, u);
        events.push(Event { time, from: state, to });
        if to == p {
            return Ok(SamplePath {
                initial_state,
                events,
                absorption_time: time,
            });
        }
        state = to;
    }
    Err(Error::SimulationStall { events: events.len() })
}

/// Simulates one path from a seed.
pub fn sample_path(model: &IphModel, seed: u64) -> Result<SamplePath> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_path_with(model, &mut rng, DEFAULT_EVENT_CAP)
}

/// Generator for chunk `index` of a batch seeded with `seed`.
pub fn chunk_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `n` independent paths, reproducible given `seed`.
pub fn sample_paths(model: &IphModel, n: usize, seed: u64) -> Result<Vec<SamplePath>> {
    let chunks: Vec<Vec<SamplePath>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut rng = chunk_rng(seed, c as u64);
            let len = CHUNK.min(n - c * CHUNK);
            (0..len)
                .map(|_| sample_path_with(model, &mut rng, DEFAULT_EVENT_CAP))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// `n` independent absorption times, reproducible given `seed`.
pub fn sample_absorptions(model: &IphModel, n: usize, seed: u64) -> Result<Vec<f64>> {
    let chunks: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut rng = chunk_rng(seed, c as u64);
            let len = CHUNK.min(n - c * CHUNK);
            (0..len)
                .map(|_| sample_path_with(model, &mut rng, DEFAULT_EVENT_CAP).map(|p| p.absorption_time))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Adds one weighted path to `stats`.
pub fn accumulate_path(stats: &mut SufficientStats, grid: &Grid, path: &SamplePath, weight: f64) {
    stats.initial[path.initial_state] += weight;
    stats.total_weight += weight;
    let mut state = path.initial_state;
    let mut start = 0.0;
    for e in &path.events {
        add_exposure(stats, grid, state, start, e.time, weight);
        let k = grid.interval_index(e.time).expect("event times are positive");
        *stats.occurrence_mut(k, e.from, e.to) += weight;
        state = e.to;
        start = e.time;
    }
}

fn add_exposure(stats: &mut SufficientStats, grid: &Grid, state: usize, from: f64, to: f64, weight: f64) {
    if to <= from {
        return;
    }
    let first = if from > 0.0 { grid.interval_index(from).unwrap() } else { 0 };
    let last = grid.interval_index(to).unwrap();
    for k in first..=last {
        let lo = grid.lower(k).max(from);
        let hi = grid.upper(k).min(to);
        if hi > lo {
            *stats.exposure_mut(k, state) += weight * (hi - lo);
        }
    }
}

/// Weighted occurrences, exposures and initial counts of complete paths.
pub fn path_statistics(paths: &[(SamplePath, f64)], grid: &Grid, p: usize) -> SufficientStats {
    let mut stats = SufficientStats::zeros(p, grid.len());
    for (path, w) in paths {
        accumulate_path(&mut stats, grid, path, *w);
    }
    stats
}
