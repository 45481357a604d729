//! Weighted softmax cross-entropy and ordinal classification metrics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Element, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("empty prediction list")]
    Empty,
    #[error("{preds} predictions for {labels} labels")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("label {label} outside 1..={k}")]
    LabelRange { label: usize, k: usize },
    #[error("1-off accuracy needs an ordered label space")]
    Unordered,
    #[error("loss weights: {0}")]
    Weights(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Per-class loss multipliers, applied verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

const TABLE: [(&str, [f64; 8]); 4] = [
    ("LW0", [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]),
    ("LW1", [1.0, 1.0, 1.0, 0.9, 0.8, 0.8, 0.9, 1.0]),
    ("LW2", [1.0, 1.0, 1.0, 1.1, 1.2, 1.2, 1.1, 1.0]),
    ("LW3", [1.0, 1.0, 1.0, 1.3, 1.5, 1.5, 1.3, 1.0]),
];

impl LossWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self, ObjectiveError> {
        if weights.is_empty() {
            return Err(ObjectiveError::Weights("no weights".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(ObjectiveError::Weights(format!("weight {w} is not positive")));
        }
        Ok(Self { weights, name: None })
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            weights: vec![1.0; k],
            name: (k == 8).then(|| "LW0".to_string()),
        }
    }

    /// One of the eight-class distributions `LW0`..`LW3`.
    pub fn named(name: &str) -> Option<Self> {
        TABLE.iter().find(|(n, _)| n.eq_ignore_ascii_case(name)).map(|(n, w)| Self {
            weights: w.to_vec(),
            name: Some(n.to_string()),
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn check_classes(&self, k: usize) -> Result<(), ObjectiveError> {
        if self.weights.len() != k {
            return Err(ObjectiveError::Weights(format!("{} weights for {k} classes", self.weights.len())));
        }
        Ok(())
    }

    pub fn get(&self, label: usize) -> f64 {
        self.weights[label - 1]
    }
}

impl FromStr for LossWeights {
    type Err = ObjectiveError;

    /// Accepts a table name (`LW3`) or comma-separated values (`1,1,1.3`).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(w) = Self::named(s.trim()) {
            return Ok(w);
        }
        let weights = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| ObjectiveError::Weights(format!("cannot parse `{}`", p.trim())))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut w = Self::new(weights)?;
        w.name = TABLE.iter().find(|(_, t)| t[..] == w.weights[..]).map(|(n, _)| n.to_string());
        Ok(w)
    }
}

impl fmt::Display for LossWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.weights.iter().map(|w| format!("{w}")).collect();
        write!(f, "({})", parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub k: usize,
    pub ordered: bool,
    #[serde(default)]
    pub descriptions: Vec<String>,
}

impl LabelSpace {
    pub fn ordered(k: usize) -> Self {
        Self {
            k,
            ordered: true,
            descriptions: Vec::new(),
        }
    }

    pub fn unordered(k: usize) -> Self {
        Self {
            k,
            ordered: false,
            descriptions: Vec::new(),
        }
    }

    /// The eight age groups of the benchmark the toolkit targets.
    pub fn age_groups() -> Self {
        Self {
            descriptions: ["0-2", "4-6", "8-13", "15-20", "25-32", "38-43", "48-53", "60-"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            ..Self::ordered(8)
        }
    }

    pub fn check(&self, labels: &[usize]) -> Result<(), ObjectiveError> {
        match labels.iter().find(|&&y| y == 0 || y > self.k) {
            Some(&label) => Err(ObjectiveError::LabelRange { label, k: self.k }),
            None => Ok(()),
        }
    }
}

/// Records the mean of `w[y] * -log softmax(logits)[y]` on the tape.
pub fn weighted_cross_entropy<T: Element>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    weights: &LossWeights,
) -> Result<Var, ObjectiveError> {
    let k = tape.value(logits).shape().get(1).copied().unwrap_or(0);
    weights.check_classes(k)?;
    let w: Vec<T> = weights.weights.iter().map(|&v| T::of(v)).collect();
    Ok(tape.weighted_cross_entropy(logits, labels, &w)?)
}

/// Unweighted per-sample cross-entropy, computed in double precision.
pub fn per_sample_losses<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<Vec<f64>, ObjectiveError> {
    let (n, k) = match logits.shape() {
        &[n, k] => (n, k),
        s => {
            return Err(TensorError::InvalidArgument {
                op: "per_sample_losses",
                msg: format!("logits must be [n, k], got {s:?}"),
            }
            .into())
        }
    };
    if labels.len() != n {
        return Err(ObjectiveError::LengthMismatch {
            preds: n,
            labels: labels.len(),
        });
    }
    LabelSpace::unordered(k).check(labels)?;
    Ok(logits
        .data()
        .chunks(k)
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
            lse - row[y - 1].as_f64()
        })
        .collect())
}

fn check_pair(preds: &[usize], labels: &[usize]) -> Result<(), ObjectiveError> {
    if preds.len() != labels.len() {
        return Err(ObjectiveError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    if preds.is_empty() {
        return Err(ObjectiveError::Empty);
    }
    Ok(())
}

pub fn exact_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64, ObjectiveError> {
    check_pair(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Fraction of predictions within one group of the label.
pub fn one_off_accuracy(preds: &[usize], labels: &[usize], space: &LabelSpace) -> Result<f64, ObjectiveError> {
    if !space.ordered {
        return Err(ObjectiveError::Unordered);
    }
    check_pair(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(&p, &y)| p.abs_diff(y) <= 1).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// `m[i][j]` counts label `i + 1` predicted as `j + 1`.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], k: usize) -> Result<Vec<Vec<usize>>, ObjectiveError> {
    check_pair(preds, labels)?;
    let space = LabelSpace::unordered(k);
    space.check(labels)?;
    space.check(preds)?;
    let mut m = vec![vec![0; k]; k];
    for (&p, &y) in preds.iter().zip(labels) {
        m[y - 1][p - 1] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub exact: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub one_off: Option<f64>,
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    pub fn compute(preds: &[usize], labels: &[usize], space: &LabelSpace) -> Result<Self, ObjectiveError> {
        Ok(Self {
            exact: exact_accuracy(preds, labels)?,
            one_off: if space.ordered {
                Some(one_off_accuracy(preds, labels, space)?)
            } else {
                None
            },
            confusion: confusion_matrix(preds, labels, space.k)?,
        })
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Percentages in the `62.00±3.16` style of result tables.
pub fn format_mean_std(values: &[f64]) -> String {
    let (m, s) = mean_std(values);
    format!("{:.2}±{:.2}", 100.0 * m, 100.0 * s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_weights() {
        assert_eq!("LW3".parse::<LossWeights>().unwrap().weights, vec![1.0, 1.0, 1.0, 1.3, 1.5, 1.5, 1.3, 1.0]);
        let w: LossWeights = "1, 2,0.5".parse().unwrap();
        assert_eq!(w.weights, vec![1.0, 2.0, 0.5]);
        assert!("1,x".parse::<LossWeights>().is_err());
        assert!("1,0".parse::<LossWeights>().is_err());
        let named: LossWeights = "1,1,1,0.9,0.8,0.8,0.9,1".parse().unwrap();
        assert_eq!(named.name.as_deref(), Some("LW1"));
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(exact_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(exact_accuracy(&[1, 2], &[3, 4]).unwrap(), 0.0);
        assert!((exact_accuracy(&[1, 2, 3], &[1, 2, 4]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(exact_accuracy(&[], &[]), Err(ObjectiveError::Empty));
        let s = LabelSpace::ordered(8);
        assert_eq!(one_off_accuracy(&[2, 3, 8], &[1, 2, 7], &s).unwrap(), 1.0);
        assert_eq!(one_off_accuracy(&[3, 4], &[1, 2], &s).unwrap(), 0.0);
        assert_eq!(one_off_accuracy(&[1], &[1], &LabelSpace::unordered(2)), Err(ObjectiveError::Unordered));
    }

    #[test]
    fn confusion_examples() {
        let m = confusion_matrix(&[5], &[2], 8).unwrap();
        assert_eq!(m[1][4], 1);
        assert_eq!(m.iter().flatten().sum::<usize>(), 1);
        let d = confusion_matrix(&[1, 2, 3], &[1, 2, 3], 3).unwrap();
        assert_eq!(d, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]);
        assert!(confusion_matrix(&[1], &[9], 8).is_err());
    }

    #[test]
    fn mean_std_table_format() {
        let v = [0.6, 0.62, 0.64, 0.58, 0.66];
        let (m, s) = mean_std(&v);
        assert!((m - 0.62).abs() < 1e-12);
        assert!((s - 0.1f64.sqrt() / 10.0).abs() < 1e-12);
        assert_eq!(format_mean_std(&v), "62.00±3.16");
    }
}
