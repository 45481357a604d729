use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::arch::{build, ArchSpec, DropSchedule};
use crate::data::ChannelStats;
use crate::model::RorModel;
use crate::objective::Metrics;
use crate::tensor::{io, Element, RunningStats, Tensor};

pub const MANIFEST: &str = "manifest.json";
pub const TENSORS: &str = "tensors.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: ArchSpec,
    pub stage: String,
    pub epoch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalizer: Option<ChannelStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop: Option<DropSchedule>,
    /// Parameter names in storage order.
    pub params: Vec<String>,
    /// Which norms have running statistics.
    pub populated: Vec<bool>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> TrainError {
    TrainError::Io(format!("{}: {e}", path.display()))
}

/// Writes `dir/manifest.json` and `dir/tensors.bin`. Tensors are stored as
/// 32-bit floats whatever the model precision.
pub fn save_checkpoint<T: Element>(
    dir: &Path,
    model: &RorModel<T>,
    stage: &str,
    epoch: usize,
    metrics: Option<&Metrics>,
    normalizer: Option<&ChannelStats>,
) -> Result<CheckpointMeta, TrainError> {
    let spec = model
        .graph
        .spec
        .clone()
        .ok_or_else(|| TrainError::Config("only spec-built models can be checkpointed".into()))?;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let meta = CheckpointMeta {
        spec,
        stage: stage.to_string(),
        epoch,
        metrics: metrics.cloned(),
        normalizer: normalizer.cloned(),
        drop: model.drop,
        params: model.graph.params.iter().map(|p| p.name.clone()).collect(),
        populated: model.stats.iter().map(|s| s.populated).collect(),
    };
    let path = dir.join(TENSORS);
    let mut w = BufWriter::new(File::create(&path).map_err(|e| io_err(&path, e))?);
    for p in &model.params {
        io::write_tensor(&mut w, &p.cast::<f32>())?;
    }
    for s in &model.stats {
        let n = s.channels();
        io::write_tensor(&mut w, &Tensor::<f32>::new([n], s.mean.iter().map(|v| v.as_f64() as f32).collect())?)?;
        io::write_tensor(&mut w, &Tensor::<f32>::new([n], s.var.iter().map(|v| v.as_f64() as f32).collect())?)?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&meta).map_err(|e| io_err(&path, e))?;
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(meta)
}

pub fn load_checkpoint<T: Element>(dir: &Path) -> Result<(RorModel<T>, CheckpointMeta), TrainError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| io_err(&path, e))?;
    let graph = build(&meta.spec)?;
    if graph.params.len() != meta.params.len() || graph.norms.len() != meta.populated.len() {
        return Err(TrainError::Io(format!("{}: checkpoint does not match its spec", dir.display())));
    }
    let path = dir.join(TENSORS);
    let mut r = BufReader::new(File::open(&path).map_err(|e| io_err(&path, e))?);
    let mut params = Vec::with_capacity(graph.params.len());
    for spec in &graph.params {
        let t: Tensor<f32> = io::read_tensor(&mut r)?;
        if t.shape() != spec.shape.as_slice() {
            return Err(TrainError::Io(format!(
                "{}: tensor {} has shape {:?}, expected {:?}",
                dir.display(),
                spec.name,
                t.shape(),
                spec.shape
            )));
        }
        params.push(t.cast::<T>());
    }
    let mut stats = Vec::with_capacity(graph.norms.len());
    for (norm, &populated) in graph.norms.iter().zip(&meta.populated) {
        let mean: Tensor<f32> = io::read_tensor(&mut r)?;
        let var: Tensor<f32> = io::read_tensor(&mut r)?;
        if mean.len() != norm.channels || var.len() != norm.channels {
            return Err(TrainError::Io(format!("{}: running statistics size mismatch", dir.display())));
        }
        stats.push(
            RunningStats {
                mean: mean.into_data(),
                var: var.into_data(),
                populated,
            }
            .cast::<T>(),
        );
    }
    let model = RorModel {
        graph,
        params,
        stats,
        drop: meta.drop,
    };
    Ok((model, meta))
}
