//! Penalty-weighted ordinal loss and plain cross-entropy.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::NUM_GRADES;
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Misgrading costs: `c[u][v]` is the weight of predicting grade `u` when
/// the truth is `v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct PenaltyMatrix {
    c: [[f64; NUM_GRADES]; NUM_GRADES],
}

const DEFAULT_PENALTY: [[f64; NUM_GRADES]; NUM_GRADES] = [
    [1.0, 3.0, 6.0, 7.0, 9.0],
    [4.0, 1.0, 4.0, 5.0, 7.0],
    [6.0, 4.0, 1.0, 3.0, 5.0],
    [9.0, 7.0, 4.0, 1.0, 4.0],
    [11.0, 9.0, 7.0, 5.0, 1.0],
];

impl Default for PenaltyMatrix {
    fn default() -> Self {
        default_penalty_matrix()
    }
}

pub fn default_penalty_matrix() -> PenaltyMatrix {
    PenaltyMatrix { c: DEFAULT_PENALTY }
}

impl PenaltyMatrix {
    /// Validates: finite, non-negative, unit diagonal, and within each column
    /// the cost never falls as the predicted grade moves away from the truth.
    pub fn new(c: [[f64; NUM_GRADES]; NUM_GRADES]) -> Result<Self> {
        for (u, row) in c.iter().enumerate() {
            for (v, &x) in row.iter().enumerate() {
                if !x.is_finite() || x < 0.0 {
                    return Err(Error::config(format!("penalty c[{u}][{v}] = {x} is not a non-negative number")));
                }
            }
            if row[u] != 1.0 {
                return Err(Error::config(format!("penalty diagonal c[{u}][{u}] = {}, expected 1", row[u])));
            }
        }
        for v in 0..NUM_GRADES {
            for u in 0..NUM_GRADES {
                for w in 0..NUM_GRADES {
                    if u.abs_diff(v) > w.abs_diff(v) && c[u][v] < c[w][v] {
                        return Err(Error::config(format!(
                            "penalty column {v} is not monotone: c[{u}][{v}] = {} < c[{w}][{v}] = {}",
                            c[u][v], c[w][v]
                        )));
                    }
                }
            }
        }
        Ok(Self { c })
    }

    pub fn ones() -> Self {
        Self {
            c: [[1.0; NUM_GRADES]; NUM_GRADES],
        }
    }

    pub fn get(&self, predicted: usize, truth: usize) -> f64 {
        self.c[predicted][truth]
    }

    pub fn rows(&self) -> &[[f64; NUM_GRADES]; NUM_GRADES] {
        &self.c
    }

    /// Row-major flattening, `[u * 5 + v]`.
    pub fn flat<T: Real>(&self) -> Vec<T> {
        self.c.iter().flatten().map(|&x| T::of(x)).collect()
    }
}

impl TryFrom<Vec<Vec<f64>>> for PenaltyMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.len() != NUM_GRADES || rows.iter().any(|r| r.len() != NUM_GRADES) {
            return Err(Error::config(format!("penalty matrix must be {NUM_GRADES}×{NUM_GRADES}")));
        }
        let mut c = [[0.0; NUM_GRADES]; NUM_GRADES];
        for (dst, src) in c.iter_mut().zip(&rows) {
            dst.copy_from_slice(src);
        }
        Self::new(c)
    }
}

impl From<PenaltyMatrix> for Vec<Vec<f64>> {
    fn from(m: PenaltyMatrix) -> Self {
        m.c.iter().map(|r| r.to_vec()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Ordinal,
    CrossEntropy,
}

fn check_distribution(p: &[f64], v: usize) -> Result<()> {
    if p.len() != NUM_GRADES {
        return Err(Error::dim(format!("expected {NUM_GRADES} probabilities, got {}", p.len())));
    }
    if v >= NUM_GRADES {
        return Err(Error::input(format!("grade {v} out of range 0..{}", NUM_GRADES - 1)));
    }
    Ok(())
}

/// Single-sample ordinal loss `Σ_u c[u][v]·q_u`, with `q_v = 1 − p_v` and
/// `q_u = p_u` elsewhere.
pub fn ordinal_loss(p: &[f64], v: usize, c: &PenaltyMatrix) -> Result<f64> {
    check_distribution(p, v)?;
    Ok(p
        .iter()
        .enumerate()
        .map(|(u, &pu)| c.get(u, v) * if u == v { 1.0 - pu } else { pu })
        .sum())
}

/// Single-sample `−ln p_v`, clamped at 1e-12.
pub fn cross_entropy_loss(p: &[f64], v: usize) -> Result<f64> {
    check_distribution(p, v)?;
    Ok(-p[v].max(1e-12).ln())
}

/// Batch-mean loss on N×5 logits: softmax, then the chosen objective.
pub fn loss_on_logits<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[usize],
    kind: LossKind,
    penalty: &PenaltyMatrix,
) -> Result<Var> {
    let probs = g.softmax(logits)?;
    match kind {
        LossKind::Ordinal => g.ordinal_loss(probs, targets, &penalty.flat::<T>()),
        LossKind::CrossEntropy => g.cross_entropy(probs, targets),
    }
}
