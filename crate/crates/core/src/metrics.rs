//! Accuracy, mean absolute error, quadratic weighted kappa and the
//! confusion matrix they are computed from.

use std::fmt;
use std::path::Path;

use crate::backbone::NUM_GRADES;
use crate::error::{Error, Result};

const K: usize = NUM_GRADES;

/// `counts[p][t]`: samples of true grade `t` predicted as `p`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: [[u64; K]; K],
}

fn check_grade(g: usize) -> Result<()> {
    if g >= K {
        return Err(Error::input(format!("grade {g} out of range 0..{}", K - 1)));
    }
    Ok(())
}

fn check_pairs(truth: &[usize], predicted: &[usize]) -> Result<()> {
    if truth.len() != predicted.len() {
        return Err(Error::input(format!(
            "{} true grades vs {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::input("no samples to evaluate"));
    }
    truth.iter().chain(predicted).try_for_each(|&g| check_grade(g))
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; K]; K]) -> Self {
        Self { counts }
    }

    pub fn counts(&self) -> &[[u64; K]; K] {
        &self.counts
    }

    pub fn get(&self, predicted: usize, truth: usize) -> u64 {
        self.counts[predicted][truth]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Histogram of predicted grades (row sums).
    pub fn predicted_counts(&self) -> [u64; K] {
        std::array::from_fn(|p| self.counts[p].iter().sum())
    }

    /// Histogram of true grades (column sums).
    pub fn true_counts(&self) -> [u64; K] {
        std::array::from_fn(|t| self.counts.iter().map(|r| r[t]).sum())
    }

    pub fn transpose(&self) -> Self {
        Self {
            counts: std::array::from_fn(|p| std::array::from_fn(|t| self.counts[t][p])),
        }
    }

    fn nonempty(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::input("confusion matrix is empty")),
            n => Ok(n as f64),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: Vec<String> = std::iter::once("predicted".to_string())
            .chain((0..K).map(|t| format!("true_{t}")))
            .collect();
        // Writing into a Vec cannot fail.
        w.write_record(&header).expect("in-memory csv");
        for (p, row) in self.counts.iter().enumerate() {
            let fields: Vec<String> = std::iter::once(p.to_string())
                .chain(row.iter().map(u64::to_string))
                .collect();
            w.write_record(&fields).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("ascii csv")
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let parse_err = |line: u64, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut counts = [[0u64; K]; K];
        let mut rows = 0;
        for rec in r.records() {
            let rec = rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line());
            if rows == K {
                return Err(parse_err(line, format!("more than {K} rows")));
            }
            if rec.len() != K + 1 {
                return Err(parse_err(line, format!("expected {} fields, got {}", K + 1, rec.len())));
            }
            let p: usize = rec[0].trim().parse().map_err(|_| parse_err(line, format!("bad grade `{}`", &rec[0])))?;
            if p != rows {
                return Err(parse_err(line, format!("expected row {rows}, got {p}")));
            }
            for t in 0..K {
                let f = rec[t + 1].trim();
                counts[p][t] = f.parse().map_err(|_| parse_err(line, format!("bad count `{f}`")))?;
            }
            rows += 1;
        }
        if rows != K {
            return Err(parse_err(rows as u64 + 1, format!("expected {K} rows, got {rows}")));
        }
        Ok(Self { counts })
    }
}

impl fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pred\\true")?;
        for t in 0..K {
            write!(f, "{t:>7}")?;
        }
        for (p, row) in self.counts.iter().enumerate() {
            write!(f, "\n{p:>9}")?;
            for c in row {
                write!(f, "{c:>7}")?;
            }
        }
        Ok(())
    }
}

pub fn confusion(truth: &[usize], predicted: &[usize]) -> Result<ConfusionMatrix> {
    check_pairs(truth, predicted)?;
    let mut cm = ConfusionMatrix::default();
    for (&t, &p) in truth.iter().zip(predicted) {
        cm.counts[p][t] += 1;
    }
    Ok(cm)
}

/// Fraction of samples on the diagonal.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.nonempty()?;
    let hits: u64 = (0..K).map(|g| cm.counts[g][g]).sum();
    Ok(hits as f64 / n)
}

pub fn mae(truth: &[usize], predicted: &[usize]) -> Result<f64> {
    check_pairs(truth, predicted)?;
    let total: usize = truth.iter().zip(predicted).map(|(&t, &p)| t.abs_diff(p)).sum();
    Ok(total as f64 / truth.len() as f64)
}

/// Mean absolute grade error read off the matrix.
pub fn mae_from_confusion(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.nonempty()?;
    let mut total = 0u64;
    for (p, row) in cm.counts.iter().enumerate() {
        for (t, &c) in row.iter().enumerate() {
            total += c * p.abs_diff(t) as u64;
        }
    }
    Ok(total as f64 / n)
}

/// Quadratic weighted kappa. Weights are `(p − t)² / (K − 1)²`; the
/// expected matrix is the outer product of the two marginal histograms
/// divided by the sample count, so it has the same total as the observed one.
pub fn qwk(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.nonempty()?;
    let rows = cm.predicted_counts();
    let cols = cm.true_counts();
    let denom = ((K - 1) * (K - 1)) as f64;
    let (mut observed, mut expected) = (0.0, 0.0);
    for p in 0..K {
        for t in 0..K {
            let w = (p.abs_diff(t) * p.abs_diff(t)) as f64 / denom;
            observed += w * cm.counts[p][t] as f64;
            expected += w * (rows[p] as f64 * cols[t] as f64 / n);
        }
    }
    if expected == 0.0 {
        return Err(Error::UndefinedKappa(
            "both raters put every sample on the same single grade".into(),
        ));
    }
    Ok(1.0 - observed / expected)
}

/// Per true grade, the fraction predicted correctly; `None` when the grade
/// never occurs.
pub fn per_class_accuracy(cm: &ConfusionMatrix) -> [Option<f64>; K] {
    let cols = cm.true_counts();
    std::array::from_fn(|g| (cols[g] > 0).then(|| cm.counts[g][g] as f64 / cols[g] as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub samples: u64,
    pub accuracy: f64,
    pub mae: f64,
    /// `None` when kappa is undefined for the sample.
    pub qwk: Option<f64>,
    pub per_class: [Option<f64>; K],
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        let qwk = match qwk(cm) {
            Ok(k) => Some(k),
            Err(Error::UndefinedKappa(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            samples: cm.total(),
            accuracy: accuracy(cm)?,
            mae: mae_from_confusion(cm)?,
            qwk,
            per_class: per_class_accuracy(cm),
        })
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize]) -> Result<Self> {
        Self::from_confusion(&confusion(truth, predicted)?)
    }

    /// Kappa with the undefined case mapped to NaN, for logs.
    pub fn qwk_or_nan(&self) -> f64 {
        self.qwk.unwrap_or(f64::NAN)
    }

    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let fmt = |x: Option<f64>| x.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
        let mut out = String::from("metric,value\n");
        out += &format!("samples,{}\n", self.samples);
        out += &format!("accuracy,{:.6}\n", self.accuracy);
        out += &format!("mae,{:.6}\n", self.mae);
        out += &format!("qwk,{}\n", fmt(self.qwk));
        for (g, a) in self.per_class.iter().enumerate() {
            out += &format!("grade_{g}_accuracy,{}\n", fmt(*a));
        }
        out
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "samples={} accuracy={:.4} mae={:.4} qwk={}",
            self.samples,
            self.accuracy,
            self.mae,
            self.qwk.map_or_else(|| "undefined".into(), |k| format!("{k:.4}"))
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sample() {
        let cm = confusion(&[0], &[0]).unwrap();
        assert_eq!(cm.get(0, 0), 1);
        assert_eq!(cm.total(), 1);
        assert_eq!(accuracy(&cm).unwrap(), 1.0);
        assert!(matches!(qwk(&cm), Err(Error::UndefinedKappa(_))));
    }

    #[test]
    fn marginals_count_inputs() {
        let truth = [0, 1, 1, 2, 4, 4, 4];
        let pred = [1, 1, 0, 2, 3, 4, 4];
        let cm = confusion(&truth, &pred).unwrap();
        assert_eq!(cm.true_counts(), [1, 2, 1, 0, 3]);
        assert_eq!(cm.predicted_counts(), [1, 2, 1, 1, 2]);
    }

    #[test]
    fn accuracy_examples() {
        let mut c = [[0; K]; K];
        c[0][0] = 2;
        c[3][1] = 2;
        assert_eq!(accuracy(&ConfusionMatrix::from_counts(c)).unwrap(), 0.5);
        let cm = confusion(&[0, 1, 2], &[1, 2, 3]).unwrap();
        assert_eq!(accuracy(&cm).unwrap(), 0.0);
        assert!(accuracy(&ConfusionMatrix::default()).is_err());
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[0, 1, 2], &[0, 1, 2]).unwrap(), 0.0);
        assert_eq!(mae(&[0, 1, 2], &[0, 2, 4]).unwrap(), 1.0);
        assert_eq!(mae(&[0; 6], &[4; 6]).unwrap(), 4.0);
        assert!(mae(&[0], &[0, 1]).is_err());
        assert!(mae(&[0], &[5]).is_err());
        let cm = confusion(&[0, 1, 2], &[0, 2, 4]).unwrap();
        assert_eq!(mae_from_confusion(&cm).unwrap(), 1.0);
    }

    #[test]
    fn kappa_extremes() {
        let cm = confusion(&[0, 1, 2, 3, 4, 4], &[0, 1, 2, 3, 4, 4]).unwrap();
        assert_eq!(qwk(&cm).unwrap(), 1.0);
        let cm = confusion(&[0, 4], &[4, 0]).unwrap();
        assert_eq!(qwk(&cm).unwrap(), -1.0);
    }

    #[test]
    fn kappa_penalizes_distance() {
        let base = [10u64, 10, 10, 10, 10];
        let perturbed = |p: usize, t: usize| {
            let mut c = [[0; K]; K];
            for g in 0..K {
                c[g][g] = base[g];
            }
            c[t][t] -= 1;
            c[p][t] += 1;
            qwk(&ConfusionMatrix::from_counts(c)).unwrap()
        };
        let near = perturbed(1, 0);
        let far = perturbed(4, 0);
        assert!(near < 1.0 && far < near);
    }

    #[test]
    fn csv_round_trip() {
        let cm = confusion(&[0, 1, 2, 3, 4, 2], &[0, 2, 2, 3, 1, 2]).unwrap();
        let text = cm.to_csv();
        assert!(text.starts_with("predicted,true_0,true_1"));
        assert_eq!(ConfusionMatrix::from_csv(&text, Path::new("cm.csv")).unwrap(), cm);
        let err = ConfusionMatrix::from_csv("predicted,a\n0,1\n", Path::new("cm.csv")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn report_fields() {
        let r = MetricsReport::from_predictions(&[0, 1, 2, 3], &[0, 1, 2, 2]).unwrap();
        assert_eq!(r.samples, 4);
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.per_class, [Some(1.0), Some(1.0), Some(1.0), Some(0.0), None]);
        assert!(r.to_csv().contains("grade_4_accuracy,NA"));
    }
}
