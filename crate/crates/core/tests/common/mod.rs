//! Straightforward reference implementations shared by the integration tests.
#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale))
}

pub fn dot(x: &Array2<f64>, i: usize, y: &Array2<f64>, j: usize) -> f64 {
    let mut s = 0.0;
    for k in 0..x.ncols() {
        s += x[[i, k]] * y[[j, k]];
    }
    s
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// One direction of the margin softmax, straight from the formula.
pub fn naive_softmax_direction(x: &Array2<f64>, y: &Array2<f64>, margin: f64) -> f64 {
    let b = x.nrows();
    let mut total = 0.0;
    for i in 0..b {
        let pos = (dot(x, i, y, i) - margin).exp();
        let mut denom = pos;
        for j in 0..b {
            if j != i {
                denom += dot(x, i, y, j).exp();
            }
        }
        total -= (pos / denom).ln();
    }
    total / b as f64
}

pub fn naive_mms(x: &Array2<f64>, y: &Array2<f64>, margin: f64) -> f64 {
    naive_softmax_direction(x, y, margin) + naive_softmax_direction(y, x, margin)
}

pub fn naive_info_nce(x: &Array2<f64>, y: &Array2<f64>, symmetric: bool) -> f64 {
    let mut v = naive_softmax_direction(x, y, 0.0);
    if symmetric {
        v += naive_softmax_direction(y, x, 0.0);
    }
    v
}

pub fn naive_max_margin(x: &Array2<f64>, y: &Array2<f64>, m: f64) -> f64 {
    let b = x.nrows();
    let mut total = 0.0;
    for i in 0..b {
        let pos = dot(x, i, y, i);
        for j in 0..b {
            if j != i {
                total += (m + dot(x, i, y, j) - pos).max(0.0) + (m + dot(x, j, y, i) - pos).max(0.0);
            }
        }
    }
    total / b as f64
}

pub fn naive_bce(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let b = x.nrows();
    let mut total = 0.0;
    for i in 0..b {
        for j in 0..b {
            let s = dot(x, i, y, j);
            if i == j {
                total += (b - 1) as f64 * sigmoid(s).ln();
            } else {
                total += (1.0 - sigmoid(s)).ln();
            }
        }
    }
    -total / (b * b) as f64
}

pub fn naive_mil_nce(x: &Array2<f64>, y: &Array2<f64>, neighbors: &[Vec<usize>]) -> f64 {
    let b = x.nrows();
    let mut total = 0.0;
    for i in 0..b {
        let mut num = dot(x, i, y, i).exp();
        for &p in &neighbors[i] {
            num += dot(x, i, y, p).exp();
        }
        let den: f64 = (0..b).map(|j| dot(x, i, y, j).exp()).sum();
        total -= (num / den).ln();
    }
    total / b as f64
}
