//! Straight-from-the-definition reference implementations, written without
//! touching the library's own helpers.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Misgrading costs, rows = predicted grade, columns = true grade.
pub const PENALTY: [[f64; 5]; 5] = [
    [1.0, 3.0, 6.0, 7.0, 9.0],
    [4.0, 1.0, 4.0, 5.0, 7.0],
    [6.0, 4.0, 1.0, 3.0, 5.0],
    [9.0, 7.0, 4.0, 1.0, 4.0],
    [11.0, 9.0, 7.0, 5.0, 1.0],
];

/// Per-grade dataset counts: train, test, val, total.
pub const COHORT_TRAIN: [usize; 5] = [2286, 1046, 1516, 757, 173];
pub const COHORT_TEST: [usize; 5] = [639, 296, 447, 223, 51];
pub const COHORT_VAL: [usize; 5] = [328, 153, 212, 106, 27];
pub const COHORT_TOTAL: [usize; 5] = [3253, 1495, 2175, 1086, 251];

/// The five terms written out one by one.
pub fn ordinal_loss(p: &[f64; 5], v: usize) -> f64 {
    let q = |u: usize| if u == v { 1.0 - p[u] } else { p[u] };
    PENALTY[0][v] * q(0) + PENALTY[1][v] * q(1) + PENALTY[2][v] * q(2) + PENALTY[3][v] * q(3) + PENALTY[4][v] * q(4)
}

pub fn random_distribution(r: &mut ChaCha8Rng) -> [f64; 5] {
    let raw: [f64; 5] = std::array::from_fn(|_| r.random_range(0.0..1.0f64).powi(3));
    let s: f64 = raw.iter().sum();
    raw.map(|x| x / s)
}

pub fn accuracy(t: &[usize], p: &[usize]) -> f64 {
    let mut hits = 0;
    for i in 0..t.len() {
        if t[i] == p[i] {
            hits += 1;
        }
    }
    hits as f64 / t.len() as f64
}

pub fn mae(t: &[usize], p: &[usize]) -> f64 {
    let mut s = 0.0;
    for i in 0..t.len() {
        s += (t[i] as f64 - p[i] as f64).abs();
    }
    s / t.len() as f64
}

/// Quadratic weighted kappa from nested loops over the raw label lists:
/// observed counts, (i − j)²/(K − 1)² weights, and expected counts from the
/// two histograms rescaled to the sample total.
pub fn qwk(t: &[usize], p: &[usize]) -> Option<f64> {
    const K: usize = 5;
    let n = t.len() as f64;
    let mut o = [[0.0f64; K]; K];
    for i in 0..t.len() {
        o[p[i]][t[i]] += 1.0;
    }
    let mut hist_p = [0.0f64; K];
    let mut hist_t = [0.0f64; K];
    for i in 0..t.len() {
        hist_p[p[i]] += 1.0;
        hist_t[t[i]] += 1.0;
    }
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..K {
        for j in 0..K {
            let d = i as f64 - j as f64;
            let w = d * d / ((1.0 - K as f64) * (1.0 - K as f64));
            num += w * o[i][j];
            den += w * hist_p[i] * hist_t[j] / n;
        }
    }
    (den != 0.0).then(|| 1.0 - num / den)
}

pub fn random_labels(r: &mut ChaCha8Rng, n: usize) -> (Vec<usize>, Vec<usize>) {
    let t: Vec<usize> = (0..n).map(|_| r.random_range(0..5)).collect();
    // Mostly near the truth so kappa spans a useful range.
    let p = t
        .iter()
        .map(|&g| {
            if r.random_bool(0.3) {
                r.random_range(0..5)
            } else {
                (g as i64 + r.random_range(-1..=1)).clamp(0, 4) as usize
            }
        })
        .collect();
    (t, p)
}
