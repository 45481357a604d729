//! SGD with Nesterov momentum, step schedules, training stages with head
//! replacement, evaluation and checkpoints.

mod checkpoint;
mod optim;

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{build, sample_drop_mask, ArchError, ArchSpec, DropSchedule, NodeKind};
use crate::data::{self, ChannelStats, DataError, Dataset, LabelField};
use crate::model::{argmax_rows, RorModel};
use crate::objective::{self, LabelSpace, LossWeights, Metrics, ObjectiveError};
use crate::tensor::{Element, Tape, Tensor, TensorError};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, MANIFEST, TENSORS};
pub use optim::{sgd_step, OptimConfig, ParamOptions, SgdState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(usize),
    #[error("model has {model} classes but the data has {data}")]
    LabelSpace { model: usize, data: usize },
    #[error("body mismatch: {0}")]
    BodyMismatch(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Images with 1-based labels drawn from `space`.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub space: LabelSpace,
}

impl LabeledSet {
    pub fn new(images: Vec<Tensor<f32>>, labels: Vec<usize>, space: LabelSpace) -> Result<Self, TrainError> {
        if images.len() != labels.len() {
            return Err(TrainError::Config(format!("{} images for {} labels", images.len(), labels.len())));
        }
        space.check(&labels)?;
        Ok(Self { images, labels, space })
    }

    /// Samples of `dataset` (restricted to `indices` if given) carrying `field`.
    pub fn from_dataset(
        dataset: &Dataset,
        indices: Option<&[usize]>,
        field: LabelField,
        space: LabelSpace,
    ) -> Result<Self, TrainError> {
        let all: Vec<usize>;
        let indices = match indices {
            Some(i) => i,
            None => {
                all = (0..dataset.len()).collect();
                &all
            }
        };
        let (images, labels) = indices
            .iter()
            .filter_map(|&i| {
                let s = &dataset.samples[i];
                s.label(field).map(|y| (s.image.clone(), y))
            })
            .unzip();
        Self::new(images, labels, space)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageInit {
    Scratch,
    /// Continue from the previous stage's model, replacing the head if the
    /// class count changes.
    Previous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineStage {
    pub name: String,
    /// Name of the dataset the stage trains on (resolved by the caller).
    pub dataset: String,
    pub field: LabelField,
    pub head_classes: usize,
    pub optim: OptimConfig,
    pub init: StageInit,
    /// Survival probability of the last block; `None` disables stochastic depth.
    #[serde(default)]
    pub drop_p_last: Option<f64>,
    #[serde(default)]
    pub loss_weights: Option<LossWeights>,
    #[serde(default)]
    pub augment: bool,
    /// Parameter-name prefixes excluded from updates.
    #[serde(default)]
    pub freeze: Vec<String>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_exact: Option<f64>,
    pub val_one_off: Option<f64>,
}

pub const LOG_HEADER: [&str; 6] = ["epoch", "lr", "train_loss", "val_exact", "val_one_off", "val_loss"];

pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<(), TrainError> {
    let err = |e: csv::Error| TrainError::Io(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(LOG_HEADER).map_err(err)?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in log {
        w.write_record([
            r.epoch.to_string(),
            r.lr.to_string(),
            r.train_loss.to_string(),
            opt(r.val_exact),
            opt(r.val_one_off),
            opt(r.val_loss),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))
}

/// Reads a log written by [`write_log`]; empty cells are missing values.
pub fn read_log(path: &Path) -> Result<Vec<EpochLog>, TrainError> {
    let err = |e: csv::Error| TrainError::Io(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    let header = r.headers().map_err(err)?.clone();
    if header.iter().ne(LOG_HEADER) {
        return Err(TrainError::Io(format!("{}: unexpected log header", path.display())));
    }
    r.deserialize().map(|rec| rec.map_err(err)).collect()
}

#[derive(Debug, Clone)]
pub struct StageOutcome<T: Element> {
    /// Model after the last completed epoch (last good state if the stage halted).
    pub model: RorModel<T>,
    /// Highest validation exact accuracy seen, with its epoch.
    pub best: Option<(usize, Metrics, RorModel<T>)>,
    pub log: Vec<EpochLog>,
    pub normalizer: ChannelStats,
    /// Reason the stage stopped early, if it did.
    pub halted: Option<String>,
    pub body_checksum_at_start: String,
}

/// Inputs for `input_hw`, standardized; augmented when `aug` carries `(seed, epoch)`.
fn batch_input<T: Element>(
    set: &LabeledSet,
    idx: &[usize],
    stats: &ChannelStats,
    input_hw: (usize, usize),
    aug: Option<(u64, usize)>,
) -> Tensor<T> {
    let (h, w) = input_hw;
    let images: Vec<Tensor<f32>> = idx
        .iter()
        .map(|&i| {
            let img = match aug {
                Some((seed, epoch)) => data::augment(&set.images[i], &mut data::sample_rng(seed, i, epoch), h, w),
                None => data::resize(&set.images[i], h, w),
            };
            stats.apply(&img)
        })
        .collect();
    data::stack(&images, h, w)
}

fn check_space<T: Element>(model: &RorModel<T>, space: &LabelSpace) -> Result<(), TrainError> {
    if model.graph.num_classes() != space.k {
        return Err(TrainError::LabelSpace {
            model: model.graph.num_classes(),
            data: space.k,
        });
    }
    Ok(())
}

const EVAL_BATCH: usize = 100;

/// Eval-mode logits for a whole set, no augmentation.
pub fn infer_set<T: Element>(
    model: &RorModel<T>,
    set: &LabeledSet,
    stats: &ChannelStats,
) -> Result<Tensor<T>, TrainError> {
    let &[_, h, w] = model.graph.input_shape() else {
        unreachable!("graph input is [c, h, w]")
    };
    let k = model.graph.num_classes();
    let mut out = Vec::with_capacity(set.len() * k);
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let x = batch_input::<T>(set, chunk, stats, (h, w), None);
        let (logits, _) = model.infer(&x)?;
        out.extend_from_slice(logits.data());
    }
    Ok(Tensor::new([set.len(), k], out)?)
}

/// Deterministic eval-mode metrics.
pub fn evaluate<T: Element>(model: &RorModel<T>, set: &LabeledSet, stats: &ChannelStats) -> Result<Metrics, TrainError> {
    check_space(model, &set.space)?;
    let logits = infer_set(model, set, stats)?;
    Ok(Metrics::compute(&argmax_rows(&logits), &set.labels, &set.space)?)
}

fn mean_loss<T: Element>(
    model: &RorModel<T>,
    set: &LabeledSet,
    stats: &ChannelStats,
    weights: &LossWeights,
) -> Result<f64, TrainError> {
    let logits = infer_set(model, set, stats)?;
    let losses = objective::per_sample_losses(&logits, &set.labels)?;
    Ok(losses.iter().zip(&set.labels).map(|(l, &y)| l * weights.get(y)).sum::<f64>() / set.len() as f64)
}

fn same_body(a: &ArchSpec, b: &ArchSpec) -> bool {
    let mut a = a.clone();
    a.classes = b.classes;
    a.depth = b.depth;
    a == *b
}

/// Branch norms of blocks that were dropped in every batch so far keep their
/// initial statistics (mean 0, variance 1) and are marked usable for eval.
fn settle_dropped_norms<T: Element>(model: &mut RorModel<T>) {
    for node in &model.graph.nodes {
        if let (NodeKind::BatchNorm { norm }, true) = (&node.kind, node.in_branch) {
            let st = &mut model.stats[*norm];
            if !st.populated {
                log::debug!("{} never saw a batch; using initial statistics", node.name);
                st.populated = true;
            }
        }
    }
}

/// Trains one stage. Writes `log.csv` and `best/`, `final/` checkpoints under
/// `out` when given; the log is flushed after every epoch.
pub fn run_stage<T: Element>(
    stage: &PipelineStage,
    arch: &ArchSpec,
    train: &LabeledSet,
    val: Option<&LabeledSet>,
    previous: Option<RorModel<T>>,
    out: Option<&Path>,
) -> Result<StageOutcome<T>, TrainError> {
    stage.optim.validate()?;
    if train.is_empty() {
        return Err(TrainError::Config(format!("stage `{}` has no training samples", stage.name)));
    }
    if train.space.k != stage.head_classes || val.is_some_and(|v| v.space.k != stage.head_classes) {
        return Err(TrainError::LabelSpace {
            model: stage.head_classes,
            data: train.space.k,
        });
    }
    let mut model = match (&stage.init, previous) {
        (StageInit::Scratch, _) => {
            let mut spec = arch.clone();
            spec.classes = stage.head_classes;
            RorModel::init(build(&spec)?, stage.seed)
        }
        (StageInit::Previous, None) => {
            return Err(TrainError::Config(format!("stage `{}` continues a previous model but none was given", stage.name)))
        }
        (StageInit::Previous, Some(mut m)) => {
            let prev = m.graph.spec.as_ref().ok_or_else(|| TrainError::BodyMismatch("previous model has no spec".into()))?;
            if !same_body(prev, arch) {
                return Err(TrainError::BodyMismatch(format!(
                    "stage `{}` architecture differs from the previous stage",
                    stage.name
                )));
            }
            if m.graph.num_classes() != stage.head_classes {
                m.replace_head(stage.head_classes, stage.seed ^ 0x4845_4144);
            }
            m
        }
    };
    model.drop = stage.drop_p_last.map(|p| DropSchedule::linear(model.graph.blocks, p)).transpose()?;
    let body_checksum_at_start = model.body_checksum();

    let weights = match &stage.loss_weights {
        Some(w) => {
            w.check_classes(stage.head_classes)?;
            w.clone()
        }
        None => LossWeights::uniform(stage.head_classes),
    };
    let options: Vec<ParamOptions> = model
        .graph
        .params
        .iter()
        .map(|p| ParamOptions {
            decay: p.role.decays(),
            frozen: stage.freeze.iter().any(|f| p.name.starts_with(f.as_str())),
        })
        .collect();
    let normalizer = ChannelStats::compute(&train.images)?;
    let &[_, h, w] = model.graph.input_shape() else {
        unreachable!("graph input is [c, h, w]")
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| TrainError::Io(format!("{}: {e}", dir.display())))?;
    }

    let mut state = SgdState::new(model.params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(stage.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(usize, Metrics, RorModel<T>)> = None;
    let mut halted = None;
    let mut last_good = model.clone();

    'epochs: for epoch in 1..=stage.optim.max_epochs {
        let lr = stage.optim.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(stage.optim.batch_size) {
            let x = batch_input::<T>(train, batch, &normalizer, (h, w), stage.augment.then_some((stage.seed, epoch)));
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let keep = model.drop.as_ref().map(|d| sample_drop_mask(d, &mut rng));
            let mut tape = Tape::new();
            let vars = model.param_vars(&mut tape);
            let xv = tape.constant(x);
            let outputs = model.forward_train(&mut tape, &vars, xv, keep.as_deref(), true)?;
            let loss = objective::weighted_cross_entropy(&mut tape, outputs.logits, &labels, &weights)?;
            let value = tape.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                halted = Some(format!("loss became non-finite in epoch {epoch}"));
                break 'epochs;
            }
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Option<Tensor<T>>> = vars.iter().map(|&v| grads.take(v)).collect();
            match sgd_step(&mut model.params, &grads, &options, &mut state, &stage.optim, lr) {
                Ok(()) => {}
                Err(TrainError::NonFiniteGradient(i)) => {
                    halted = Some(format!("non-finite gradient for `{}` in epoch {epoch}", model.graph.params[i].name));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            loss_sum += value * batch.len() as f64;
        }
        if model.params.iter().any(|p| !p.is_finite()) {
            halted = Some(format!("parameters became non-finite in epoch {epoch}"));
            break;
        }

        settle_dropped_norms(&mut model);

        let mut row = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            val_loss: None,
            val_exact: None,
            val_one_off: None,
        };
        if let Some(v) = val {
            let m = evaluate(&model, v, &normalizer)?;
            row.val_loss = Some(mean_loss(&model, v, &normalizer, &weights)?);
            row.val_exact = Some(m.exact);
            row.val_one_off = m.one_off;
            if best.as_ref().is_none_or(|(_, b, _)| m.exact > b.exact) {
                if let Some(dir) = out {
                    save_checkpoint(&dir.join("best"), &model, &stage.name, epoch, Some(&m), Some(&normalizer))?;
                }
                best = Some((epoch, m, model.clone()));
            }
        }
        log::info!(
            "{} epoch {epoch}: lr {lr} loss {:.4} val exact {:?}",
            stage.name,
            row.train_loss,
            row.val_exact
        );
        log.push(row);
        if let Some(dir) = out {
            write_log(&dir.join("log.csv"), &log)?;
        }
        last_good = model.clone();
    }
    if halted.is_some() {
        model = last_good;
    }
    if let Some(dir) = out {
        write_log(&dir.join("log.csv"), &log)?;
        let epoch = log.last().map_or(0, |r| r.epoch);
        let metrics = best.as_ref().filter(|b| b.0 == epoch).map(|b| b.1.clone());
        save_checkpoint(&dir.join("final"), &model, &stage.name, epoch, metrics.as_ref(), Some(&normalizer))?;
        if let Some(reason) = &halted {
            let path = dir.join("HALTED");
            let mut f = fs::File::create(&path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
            writeln!(f, "{reason}").map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        }
    }
    Ok(StageOutcome {
        model,
        best,
        log,
        normalizer,
        halted,
        body_checksum_at_start,
    })
}
