//! RoR topology: declarative specs, graph construction, shortcut policies,
//! stochastic depth and graph execution on a tape.

mod build;
mod drop;
mod exec;
mod graph;
mod spec;

use thiserror::Error;

use crate::tensor::TensorError;

pub use build::{apply_policy, build, policy_kind};
pub use drop::{sample_drop_mask, DropSchedule};
pub use exec::{run, Mode, Outputs};
pub use graph::{
    kind_name, level_name, Census, Graph, GraphBuilder, Level, Node, NodeId, NodeKind, NormSpec, ParamId, ParamRole,
    ParamSpec, ShortcutEdge, ShortcutKind,
};
pub use spec::{
    bottleneck_widths, count_depth, depth_report, ActivationOrder, ArchSpec, BlockType, DepthReport, ShortcutPolicy,
    DEFAULT_WIDTHS, MIN_SPATIAL,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArchError {
    #[error("invalid `{field}`: {msg}")]
    InvalidField { field: &'static str, msg: String },
    #[error("arch spec: {0}")]
    Parse(String),
    #[error("shortcut: {0}")]
    Shortcut(String),
    #[error("graph: {0}")]
    Graph(String),
    #[error("drop schedule: {0}")]
    Schedule(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl ArchError {
    pub(crate) fn field(field: &'static str, msg: impl Into<String>) -> Self {
        ArchError::InvalidField { field, msg: msg.into() }
    }
}
