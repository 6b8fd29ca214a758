//! Fixtures shared by the benchmarks.

use iphfit::simulate::sample_absorptions;
use iphfit::{Grid, IphModel, SquareMatrix, WeightedSample};

/// Coxian-like sub-intensity with `p` states: forward rate `fwd`, backward
/// rate `back`, exit `exit` from every state.
pub fn chain_block(p: usize, fwd: f64, back: f64, exit: f64) -> SquareMatrix {
    let mut t = SquareMatrix::zeros(p, p);
    for i in 0..p {
        if i + 1 < p {
            t[(i, i + 1)] = fwd;
        }
        if i > 0 {
            t[(i, i - 1)] = back;
        }
    }
    for i in 0..p {
        let out: f64 = t.row(i).sum();
        t[(i, i)] = -(out + exit);
    }
    t
}

/// Model with `p` states over `k` equal unit intervals.
pub fn fixture_model(p: usize, k: usize) -> IphModel {
    let interior: Vec<f64> = (1..k).map(|j| j as f64).collect();
    let blocks = (0..k)
        .map(|j| chain_block(p, 1.0 + 0.2 * j as f64, 0.3, 0.2 + 0.05 * j as f64))
        .collect();
    let mut pi = vec![0.0; p];
    pi[0] = 1.0;
    IphModel::new(pi, Grid::new(&interior).unwrap(), blocks).unwrap()
}

/// `n` absorption times drawn from `model`.
pub fn fixture_sample(model: &IphModel, n: usize) -> WeightedSample {
    WeightedSample::unweighted(sample_absorptions(model, n, 11).unwrap()).unwrap()
}
