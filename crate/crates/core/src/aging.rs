//! Ordinal "older than group k?" analysis: binary splits, the aging curve
//! and the curve-to-weights rule.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::ArchSpec;
use crate::data::{Dataset, FoldAssignment, LabelField};
use crate::objective::{LabelSpace, LossWeights, ObjectiveError};
use crate::tensor::Element;
use crate::trainer::{evaluate, run_stage, LabeledSet, OptimConfig, PipelineStage, StageInit, TrainError};

/// Samples split at threshold `k`: positives have `y > k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinarySplit {
    pub k: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl BinarySplit {
    /// Two-class labels in sample order: 1 for `y <= k`, 2 for `y > k`.
    pub fn labels(&self) -> Vec<usize> {
        let n = self.positives.len() + self.negatives.len();
        let mut out = vec![1; n];
        for &i in &self.positives {
            out[i] = 2;
        }
        out
    }
}

pub fn binarize(labels: &[usize], classes: usize, k: usize) -> Result<BinarySplit, ObjectiveError> {
    if k == 0 || k >= classes {
        return Err(ObjectiveError::LabelRange { label: k, k: classes - 1 });
    }
    LabelSpace::ordered(classes).check(labels)?;
    let (positives, negatives) = (0..labels.len()).partition(|&i| labels[i] > k);
    Ok(BinarySplit { k, positives, negatives })
}

/// Binary version of a labeled set at threshold `k`.
pub fn binary_set(set: &LabeledSet, k: usize) -> Result<LabeledSet, TrainError> {
    let split = binarize(&set.labels, set.space.k, k)?;
    LabeledSet::new(set.images.clone(), split.labels(), LabelSpace::ordered(2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgingCurve {
    pub classes: usize,
    /// `(k, validation accuracy)` in increasing `k`.
    pub points: Vec<(usize, f64)>,
    /// Thresholds whose run failed; non-empty means the curve is partial.
    #[serde(default)]
    pub failed: Vec<usize>,
}

impl AgingCurve {
    pub fn is_partial(&self) -> bool {
        !self.failed.is_empty()
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.1).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let err = |e: csv::Error| TrainError::Io(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(["k", "accuracy"]).map_err(err)?;
        for (k, a) in &self.points {
            w.write_record([k.to_string(), a.to_string()]).map_err(err)?;
        }
        w.flush().map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))
    }

    pub fn read_csv(path: &Path, classes: usize) -> Result<Self, TrainError> {
        let err = |e: csv::Error| TrainError::Io(format!("{}: {e}", path.display()));
        let mut r = csv::Reader::from_path(path).map_err(err)?;
        let mut points = Vec::new();
        for rec in r.deserialize() {
            let (k, a): (usize, f64) = rec.map_err(err)?;
            points.push((k, a));
        }
        Ok(Self {
            classes,
            points,
            failed: Vec::new(),
        })
    }
}

/// Training settings shared by every binary run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveConfig {
    pub arch: ArchSpec,
    pub optim: OptimConfig,
    #[serde(default)]
    pub drop_p_last: Option<f64>,
    #[serde(default)]
    pub augment: bool,
    pub seed: u64,
}

/// Trains one binary classifier per threshold on `train` and records its
/// validation accuracy. Runs are independent and use `threads` workers
/// (all available cores when `None`); results are ordered by `k`.
pub fn compute_curve_sets<T: Element>(
    cfg: &CurveConfig,
    train: &LabeledSet,
    val: &LabeledSet,
    threads: Option<usize>,
) -> Result<AgingCurve, TrainError> {
    let classes = train.space.k;
    if classes < 3 || !train.space.ordered {
        return Err(TrainError::Config(format!("aging curve needs an ordered space with K >= 3, got K = {classes}")));
    }
    let run = |k: usize| -> Result<(usize, Option<f64>), TrainError> {
        let tr = binary_set(train, k)?;
        let va = binary_set(val, k)?;
        let stage = PipelineStage {
            name: format!("threshold{k}"),
            dataset: String::new(),
            field: LabelField::Age,
            head_classes: 2,
            optim: cfg.optim.clone(),
            init: StageInit::Scratch,
            drop_p_last: cfg.drop_p_last,
            loss_weights: None,
            augment: cfg.augment,
            freeze: Vec::new(),
            seed: cfg.seed,
        };
        let out = run_stage::<T>(&stage, &cfg.arch, &tr, None, None, None)?;
        if let Some(reason) = &out.halted {
            log::warn!("threshold {k}: {reason}");
            return Ok((k, None));
        }
        Ok((k, Some(evaluate(&out.model, &va, &out.normalizer)?.exact)))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let results: Vec<Result<(usize, Option<f64>), TrainError>> =
        pool.install(|| (1..classes).into_par_iter().map(run).collect());
    let mut curve = AgingCurve {
        classes,
        points: Vec::new(),
        failed: Vec::new(),
    };
    for r in results {
        match r? {
            (k, Some(a)) => curve.points.push((k, a)),
            (k, None) => curve.failed.push(k),
        }
    }
    Ok(curve)
}

/// Curve with fold 0 held out for validation and the other folds for training.
pub fn compute_curve<T: Element>(
    cfg: &CurveConfig,
    dataset: &Dataset,
    classes: usize,
    folds: &FoldAssignment,
    threads: Option<usize>,
) -> Result<AgingCurve, TrainError> {
    let (train_idx, val_idx) = folds.split(dataset, 0);
    let space = LabelSpace::ordered(classes);
    let train = LabeledSet::from_dataset(dataset, Some(&train_idx), LabelField::Age, space.clone())?;
    let val = LabeledSet::from_dataset(dataset, Some(&val_idx), LabelField::Age, space)?;
    compute_curve_sets::<T>(cfg, &train, &val, threads)
}

/// Default weight levels, matching the largest loss-weight table row.
pub const DEFAULT_LEVELS: [f64; 3] = [1.0, 1.3, 1.5];

/// Fraction of the curve's range below which a threshold counts as hard.
pub const HARD_FRACTION: f64 = 0.25;

/// Curves whose accuracy range is below this are treated as flat.
pub const FLAT_RANGE: f64 = 0.02;

/// Maps curve dips to per-group weights. A threshold `k` is hard when its
/// accuracy is below `min + 0.25 * (max - min)`; each hard threshold touches
/// groups `k` and `k + 1`. A group touched `c` times gets `levels[min(c, len - 1)]`.
pub fn suggest_weights(curve: &AgingCurve, levels: &[f64]) -> Result<LossWeights, ObjectiveError> {
    if levels.is_empty() || levels.windows(2).any(|w| w[1] < w[0]) {
        return Err(ObjectiveError::Weights("levels must be nonempty and ascending".into()));
    }
    let acc = curve.accuracies();
    let classes = curve.classes;
    let min = acc.iter().copied().fold(f64::INFINITY, f64::min);
    let max = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut touched = vec![0usize; classes];
    if acc.len() > 1 && max - min >= FLAT_RANGE {
        let cut = min + HARD_FRACTION * (max - min);
        for &(k, _) in curve.points.iter().filter(|p| p.1 < cut) {
            touched[k - 1] += 1;
            touched[k] += 1;
        }
    }
    let mut w = LossWeights::new(touched.iter().map(|&c| levels[c.min(levels.len() - 1)]).collect())?;
    w.name = ["LW0", "LW1", "LW2", "LW3"]
        .iter()
        .filter_map(|n| LossWeights::named(n))
        .find(|n| n.weights == w.weights)
        .and_then(|n| n.name);
    Ok(w)
}

/// Accuracy of the best single cut on a scalar for a binary labelling,
/// either direction, by exhaustive search.
pub fn threshold_accuracy(values: &[f64], positive: &[bool]) -> f64 {
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let total_pos = positive.iter().filter(|&&p| p).count();
    // cut before position i: below is predicted negative
    let mut best = total_pos.max(n - total_pos);
    let mut neg_below = 0;
    let mut pos_below = 0;
    for (i, &j) in order.iter().enumerate() {
        if positive[j] {
            pos_below += 1;
        } else {
            neg_below += 1;
        }
        let tie = i + 1 < n && values[order[i + 1]] == values[j];
        if !tie {
            let correct = neg_below + (total_pos - pos_below);
            best = best.max(correct).max(n - correct);
        }
    }
    best as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(acc: &[f64]) -> AgingCurve {
        AgingCurve {
            classes: acc.len() + 1,
            points: acc.iter().enumerate().map(|(i, &a)| (i + 1, a)).collect(),
            failed: Vec::new(),
        }
    }

    #[test]
    fn binarize_boundaries() {
        let y = [1, 2, 3, 4, 5, 6, 7, 8];
        let s = binarize(&y, 8, 4).unwrap();
        assert!(s.positives.contains(&4));
        assert!(s.negatives.contains(&3));
        let s = binarize(&y, 8, 1).unwrap();
        assert_eq!(s.negatives, vec![0]);
        assert!(binarize(&y, 8, 8).is_err());
        assert!(binarize(&y, 8, 0).is_err());
    }

    #[test]
    fn lw3_from_middle_dip() {
        let c = curve(&[0.95, 0.93, 0.94, 0.80, 0.78, 0.82, 0.96]);
        let w = suggest_weights(&c, &DEFAULT_LEVELS).unwrap();
        assert_eq!(w.weights, vec![1.0, 1.0, 1.0, 1.3, 1.5, 1.5, 1.3, 1.0]);
        assert_eq!(w.name.as_deref(), Some("LW3"));
    }

    #[test]
    fn flat_and_edge_dips() {
        let w = suggest_weights(&curve(&[0.9; 7]), &DEFAULT_LEVELS).unwrap();
        assert_eq!(w.weights, vec![1.0; 8]);
        let w = suggest_weights(&curve(&[1.0, 0.995, 1.0, 0.99, 1.0, 1.0, 0.995]), &DEFAULT_LEVELS).unwrap();
        assert_eq!(w.weights, vec![1.0; 8]);
        let w = suggest_weights(&curve(&[0.7, 0.95, 0.96, 0.94, 0.95, 0.97, 0.96]), &DEFAULT_LEVELS).unwrap();
        assert_eq!(w.weights, vec![1.3, 1.3, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn threshold_search() {
        assert_eq!(threshold_accuracy(&[0.1, 0.2, 0.3, 0.4], &[false, false, true, true]), 1.0);
        assert_eq!(threshold_accuracy(&[0.1, 0.2, 0.3, 0.4], &[true, true, false, false]), 1.0);
        assert_eq!(threshold_accuracy(&[0.1, 0.2, 0.3, 0.4], &[false, true, false, true]), 0.75);
        assert_eq!(threshold_accuracy(&[0.5, 0.5], &[false, true]), 0.5);
    }
}
