use std::collections::BTreeMap;

use serde::Serialize;

use super::spec::ArchSpec;
use super::ArchError;

pub type NodeId = usize;
pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum NodeKind {
    Input,
    Conv {
        param: ParamId,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        norm: usize,
    },
    Relu,
    /// Junction: sum of all present operands.
    Sum,
    SubsamplePad {
        stride: usize,
        out_channels: usize,
    },
    /// Output of the residual branch of block `block` (1-based); where
    /// stochastic depth drops or rescales the branch.
    Gate {
        block: usize,
    },
    GlobalAvgPool,
    Linear {
        weight: ParamId,
        bias: ParamId,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct Node {
    pub id: NodeId,
    pub name: String,
    pub kind: NodeKind,
    pub inputs: Vec<NodeId>,
    /// Per-sample output shape: `[c, h, w]` for activations, `[f]` after pooling.
    pub shape: Vec<usize>,
    /// Residual block this node belongs to, if any.
    pub block: Option<usize>,
    /// True for nodes inside a residual branch (skipped when the block is dropped).
    pub in_branch: bool,
    /// Set when this node's value is `x_i`: the stem output is `x_1`, the
    /// output of block `l` is `x_{l+1}`.
    pub x_index: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Stem,
    /// Convolution inside a residual branch; `last` marks the one producing F.
    Branch { block: usize, last: bool },
    Projection { level: Level },
    NormScale,
    NormShift,
    HeadWeight,
    HeadBias,
}

impl ParamRole {
    pub fn is_head(self) -> bool {
        matches!(self, ParamRole::HeadWeight | ParamRole::HeadBias)
    }

    /// Weight decay applies to convolution and linear weights only.
    pub fn decays(self) -> bool {
        !matches!(self, ParamRole::NormScale | ParamRole::NormShift | ParamRole::HeadBias)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    pub fan_in: usize,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct NormSpec {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Root,
    Middle,
    Final,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum ShortcutKind {
    Identity,
    A,
    B,
}

#[derive(Debug, Clone, Serialize)]
pub struct ShortcutEdge {
    pub level: Level,
    pub kind: ShortcutKind,
    /// Node whose value the shortcut carries.
    pub source: NodeId,
    /// Junction node the shortcut feeds.
    pub junction: NodeId,
    /// The shortcut's own node (projection or padding); equals `source` for identity.
    pub via: NodeId,
    /// Block whose junction receives the shortcut.
    pub block: usize,
}

/// Counts of shortcut edges by level and kind.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Census {
    pub counts: BTreeMap<String, BTreeMap<String, usize>>,
}

impl Census {
    pub fn get(&self, level: Level, kind: ShortcutKind) -> usize {
        self.counts
            .get(level_name(level))
            .and_then(|m| m.get(kind_name(kind)))
            .copied()
            .unwrap_or(0)
    }

    pub fn total(&self, kind: ShortcutKind) -> usize {
        [Level::Root, Level::Middle, Level::Final].iter().map(|&l| self.get(l, kind)).sum()
    }

    pub fn level_total(&self, level: Level) -> usize {
        self.counts.get(level_name(level)).map(|m| m.values().sum()).unwrap_or(0)
    }
}

pub fn level_name(l: Level) -> &'static str {
    match l {
        Level::Root => "root",
        Level::Middle => "middle",
        Level::Final => "final",
    }
}

pub fn kind_name(k: ShortcutKind) -> &'static str {
    match k {
        ShortcutKind::Identity => "identity",
        ShortcutKind::A => "A",
        ShortcutKind::B => "B",
    }
}

/// Immutable network topology with parameter shapes; values live in the model.
#[derive(Debug, Clone, Serialize)]
pub struct Graph {
    pub nodes: Vec<Node>,
    pub params: Vec<ParamSpec>,
    pub norms: Vec<NormSpec>,
    pub shortcuts: Vec<ShortcutEdge>,
    pub input: NodeId,
    pub features: NodeId,
    pub logits: NodeId,
    /// Number of residual blocks `L`.
    pub blocks: usize,
    #[serde(skip)]
    pub spec: Option<ArchSpec>,
}

impl Graph {
    pub fn num_classes(&self) -> usize {
        self.nodes[self.logits].shape[0]
    }

    pub fn feature_width(&self) -> usize {
        self.nodes[self.features].shape[0]
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.nodes[self.input].shape
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(ParamSpec::numel).sum()
    }

    pub fn census(&self) -> Census {
        let mut census = Census::default();
        for e in &self.shortcuts {
            *census
                .counts
                .entry(level_name(e.level).to_string())
                .or_default()
                .entry(kind_name(e.kind).to_string())
                .or_default() += 1;
        }
        census
    }

    pub fn head_params(&self) -> (ParamId, ParamId) {
        match self.nodes[self.logits].kind {
            NodeKind::Linear { weight, bias } => (weight, bias),
            _ => unreachable!("logits node is always linear"),
        }
    }

    /// Resizes the classifier to `classes` outputs.
    pub(crate) fn set_num_classes(&mut self, classes: usize) {
        let (w, b) = self.head_params();
        let fan_in = self.feature_width();
        self.params[w].shape = vec![fan_in, classes];
        self.params[b].shape = vec![classes];
        let logits = self.logits;
        self.nodes[logits].shape = vec![classes];
        if let Some(spec) = self.spec.as_mut() {
            spec.classes = classes;
        }
    }

    /// JSON description: nodes, edges, shapes and shortcut annotations.
    pub fn to_json(&self) -> serde_json::Value {
        let edges: Vec<_> = self
            .nodes
            .iter()
            .flat_map(|n| n.inputs.iter().map(move |&i| serde_json::json!({"from": i, "to": n.id})))
            .collect();
        serde_json::json!({
            "nodes": self.nodes,
            "edges": edges,
            "params": self.params,
            "shortcuts": self.shortcuts,
            "input": self.input,
            "features": self.features,
            "logits": self.logits,
            "blocks": self.blocks,
        })
    }

    /// Graphviz rendering; shortcut edges are colored by level.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph ror {\n  rankdir=TB;\n  node [shape=box, fontsize=10];\n");
        for n in &self.nodes {
            let shape: Vec<String> = n.shape.iter().map(usize::to_string).collect();
            out.push_str(&format!("  n{} [label=\"{}\\n{}\"];\n", n.id, n.name, shape.join("x")));
        }
        let mut styled = std::collections::HashSet::new();
        for e in &self.shortcuts {
            let color = match e.level {
                Level::Root => "red",
                Level::Middle => "orange",
                Level::Final => "blue",
            };
            let label = format!("{}/{}", level_name(e.level), kind_name(e.kind));
            if e.via == e.source {
                out.push_str(&format!(
                    "  n{} -> n{} [color={color}, label=\"{label}\"];\n",
                    e.source, e.junction
                ));
                styled.insert((e.source, e.junction));
            } else {
                out.push_str(&format!("  n{} -> n{} [color={color}, label=\"{label}\"];\n", e.source, e.via));
                out.push_str(&format!("  n{} -> n{} [color={color}];\n", e.via, e.junction));
                styled.insert((e.source, e.via));
                styled.insert((e.via, e.junction));
            }
        }
        for n in &self.nodes {
            for &i in &n.inputs {
                if !styled.contains(&(i, n.id)) {
                    out.push_str(&format!("  n{} -> n{};\n", i, n.id));
                }
            }
        }
        out.push_str("}\n");
        out
    }
}

fn conv_extent(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

/// Incremental graph construction. Nodes inherit the current block context.
#[derive(Debug)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    params: Vec<ParamSpec>,
    norms: Vec<NormSpec>,
    shortcuts: Vec<ShortcutEdge>,
    block: Option<usize>,
    in_branch: bool,
    blocks: usize,
}

impl GraphBuilder {
    /// Starts a graph whose input node has per-sample shape `[c, h, w]`.
    pub fn new(input: [usize; 3]) -> Self {
        let mut b = Self {
            nodes: Vec::new(),
            params: Vec::new(),
            norms: Vec::new(),
            shortcuts: Vec::new(),
            block: None,
            in_branch: false,
            blocks: 0,
        };
        b.push("input", NodeKind::Input, vec![], input.to_vec());
        b
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn shape(&self, node: NodeId) -> &[usize] {
        &self.nodes[node].shape
    }

    /// Subsequent nodes belong to `block` (1-based); `in_branch` marks residual-branch nodes.
    pub fn set_context(&mut self, block: Option<usize>, in_branch: bool) {
        self.block = block;
        self.in_branch = in_branch;
        if let Some(b) = block {
            self.blocks = self.blocks.max(b);
        }
    }

    pub fn mark_x(&mut self, node: NodeId, index: usize) {
        self.nodes[node].x_index = Some(index);
    }

    fn push(&mut self, name: impl Into<String>, kind: NodeKind, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            id,
            name: name.into(),
            kind,
            inputs,
            shape,
            block: self.block,
            in_branch: self.in_branch,
            x_index: None,
        });
        id
    }

    fn add_param(&mut self, name: String, shape: Vec<usize>, role: ParamRole, fan_in: usize) -> ParamId {
        self.params.push(ParamSpec {
            name,
            shape,
            role,
            fan_in,
        });
        self.params.len() - 1
    }

    fn activation(&self, x: NodeId) -> Result<[usize; 3], ArchError> {
        match self.nodes[x].shape[..] {
            [c, h, w] => Ok([c, h, w]),
            ref s => Err(ArchError::Graph(format!("node {x} is not a spatial activation (shape {s:?})"))),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        x: NodeId,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        role: ParamRole,
        name: &str,
    ) -> Result<NodeId, ArchError> {
        let [c, h, w] = self.activation(x)?;
        if stride == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel {
            return Err(ArchError::Graph(format!("{name}: kernel {kernel} stride {stride} does not fit {h}x{w}")));
        }
        let param = self.add_param(
            format!("{name}.weight"),
            vec![out_channels, c, kernel, kernel],
            role,
            c * kernel * kernel,
        );
        let shape = vec![
            out_channels,
            conv_extent(h, kernel, stride, pad),
            conv_extent(w, kernel, stride, pad),
        ];
        Ok(self.push(name, NodeKind::Conv { param, stride, pad }, vec![x], shape))
    }

    pub fn batch_norm(&mut self, x: NodeId, name: &str) -> Result<NodeId, ArchError> {
        let [c, _, _] = self.activation(x)?;
        let gamma = self.add_param(format!("{name}.gamma"), vec![c], ParamRole::NormScale, 1);
        let beta = self.add_param(format!("{name}.beta"), vec![c], ParamRole::NormShift, 1);
        self.norms.push(NormSpec {
            gamma,
            beta,
            channels: c,
        });
        let norm = self.norms.len() - 1;
        let shape = self.nodes[x].shape.clone();
        Ok(self.push(name, NodeKind::BatchNorm { norm }, vec![x], shape))
    }

    pub fn relu(&mut self, x: NodeId, name: &str) -> NodeId {
        let shape = self.nodes[x].shape.clone();
        self.push(name, NodeKind::Relu, vec![x], shape)
    }

    pub fn gate(&mut self, x: NodeId, block: usize) -> NodeId {
        let shape = self.nodes[x].shape.clone();
        self.push(format!("block{block}.F"), NodeKind::Gate { block }, vec![x], shape)
    }

    pub fn sum(&mut self, inputs: Vec<NodeId>, name: &str) -> Result<NodeId, ArchError> {
        let shape = self.nodes[inputs[0]].shape.clone();
        if let Some(&bad) = inputs.iter().find(|&&i| self.nodes[i].shape != shape) {
            return Err(ArchError::Graph(format!(
                "{name}: operand shapes {:?} and {:?} differ",
                shape, self.nodes[bad].shape
            )));
        }
        Ok(self.push(name, NodeKind::Sum, inputs, shape))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId, ArchError> {
        let [c, _, _] = self.activation(x)?;
        Ok(self.push("pool", NodeKind::GlobalAvgPool, vec![x], vec![c]))
    }

    pub fn linear(&mut self, x: NodeId, classes: usize) -> Result<NodeId, ArchError> {
        let f = match self.nodes[x].shape[..] {
            [f] => f,
            ref s => return Err(ArchError::Graph(format!("linear head needs flat features, got {s:?}"))),
        };
        let weight = self.add_param("head.weight".into(), vec![f, classes], ParamRole::HeadWeight, f);
        let bias = self.add_param("head.bias".into(), vec![classes], ParamRole::HeadBias, f);
        Ok(self.push("head", NodeKind::Linear { weight, bias }, vec![x], vec![classes]))
    }

    /// Emits a shortcut fragment carrying `source` to `out_channels` channels
    /// at the given stride. Identity returns `source` itself.
    pub fn make_shortcut(
        &mut self,
        kind: ShortcutKind,
        source: NodeId,
        out_channels: usize,
        stride: usize,
        level: Level,
        name: &str,
    ) -> Result<NodeId, ArchError> {
        let [c, _, _] = self.activation(source)?;
        match kind {
            ShortcutKind::Identity => {
                if c != out_channels || stride != 1 {
                    return Err(ArchError::Shortcut(format!(
                        "{name}: identity shortcut cannot map {c} channels stride {stride} to {out_channels} channels"
                    )));
                }
                Ok(source)
            }
            ShortcutKind::A => {
                if out_channels < c {
                    return Err(ArchError::Shortcut(format!(
                        "{name}: type A cannot reduce {c} channels to {out_channels}"
                    )));
                }
                let [_, h, w] = self.activation(source)?;
                let shape = vec![out_channels, (h - 1) / stride + 1, (w - 1) / stride + 1];
                Ok(self.push(name, NodeKind::SubsamplePad { stride, out_channels }, vec![source], shape))
            }
            ShortcutKind::B => self.conv(source, out_channels, 1, stride, 0, ParamRole::Projection { level }, name),
        }
    }

    pub fn annotate(&mut self, level: Level, kind: ShortcutKind, source: NodeId, via: NodeId, junction: NodeId, block: usize) {
        self.shortcuts.push(ShortcutEdge {
            level,
            kind,
            source,
            junction,
            via,
            block,
        });
    }

    pub fn finish(self, features: NodeId, logits: NodeId, spec: Option<ArchSpec>) -> Graph {
        Graph {
            nodes: self.nodes,
            params: self.params,
            norms: self.norms,
            shortcuts: self.shortcuts,
            input: 0,
            features,
            logits,
            blocks: self.blocks,
            spec,
        }
    }
}
