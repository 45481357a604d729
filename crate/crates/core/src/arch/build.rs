use std::collections::HashMap;

use super::graph::{Graph, GraphBuilder, Level, NodeId, NodeKind, ParamRole, ShortcutKind};
use super::spec::{ActivationOrder, ArchSpec, BlockType, ShortcutPolicy};
use super::ArchError;

/// Shortcut kind a policy assigns. Root and middle levels always project.
pub fn policy_kind(policy: ShortcutPolicy, level: Level, changes_dims: bool) -> ShortcutKind {
    match level {
        Level::Root | Level::Middle => ShortcutKind::B,
        Level::Final if !changes_dims => ShortcutKind::Identity,
        Level::Final => match policy {
            ShortcutPolicy::AB => ShortcutKind::A,
            ShortcutPolicy::AllB => ShortcutKind::B,
        },
    }
}

fn changes_dims(b: &GraphBuilder, source: NodeId, out_channels: usize, stride: usize) -> bool {
    stride != 1 || b.shape(source)[0] != out_channels
}

fn pre_unit(
    b: &mut GraphBuilder,
    x: NodeId,
    out: usize,
    kernel: usize,
    stride: usize,
    role: ParamRole,
    name: &str,
) -> Result<NodeId, ArchError> {
    let n = b.batch_norm(x, &format!("{name}.bn"))?;
    let r = b.relu(n, &format!("{name}.relu"));
    b.conv(r, out, kernel, stride, kernel / 2, role, &format!("{name}.conv"))
}

fn post_unit(
    b: &mut GraphBuilder,
    x: NodeId,
    out: usize,
    kernel: usize,
    stride: usize,
    role: ParamRole,
    name: &str,
    activate: bool,
) -> Result<NodeId, ArchError> {
    let c = b.conv(x, out, kernel, stride, kernel / 2, role, &format!("{name}.conv"))?;
    let n = b.batch_norm(c, &format!("{name}.bn"))?;
    Ok(if activate { b.relu(n, &format!("{name}.relu")) } else { n })
}

/// Residual branch F of block `l`, ending at its gate.
fn branch(b: &mut GraphBuilder, spec: &ArchSpec, x: NodeId, l: usize, g: usize, stride: usize) -> Result<NodeId, ArchError> {
    let out = spec.group_width(g);
    let inner = spec.widths[g];
    // (channels, kernel, stride) per weighted layer
    let layers: Vec<(usize, usize, usize)> = match spec.block_type {
        BlockType::Basic => vec![(out, 3, stride), (out, 3, 1)],
        BlockType::Bottleneck => vec![(inner, 1, 1), (inner, 3, stride), (out, 1, 1)],
    };
    let mut h = x;
    let n = layers.len();
    for (i, &(c, k, s)) in layers.iter().enumerate() {
        let role = ParamRole::Branch {
            block: l,
            last: i + 1 == n,
        };
        let name = format!("block{l}.{}", i + 1);
        h = match spec.order {
            ActivationOrder::Pre => pre_unit(b, h, c, k, s, role, &name)?,
            ActivationOrder::Post => post_unit(b, h, c, k, s, role, &name, i + 1 < n)?,
        };
    }
    Ok(b.gate(h, l))
}

/// Compiles a spec into a graph. Junction operands are ordered root,
/// middle, final, residual.
pub fn build(spec: &ArchSpec) -> Result<Graph, ArchError> {
    spec.validate()?;
    let mut b = GraphBuilder::new(spec.input);
    let (input, stem_role) = (b.input(), ParamRole::Stem);
    let x1 = match spec.order {
        ActivationOrder::Pre => b.conv(input, spec.widths[0], 3, 1, 1, stem_role, "stem.conv")?,
        ActivationOrder::Post => post_unit(&mut b, input, spec.widths[0], 3, 1, stem_role, "stem", true)?,
    };
    b.mark_x(x1, 1);

    let total = spec.total_blocks();
    let mut x = x1;
    let mut l = 0;
    for g in 0..4 {
        let group_in = x;
        let group_stride = if g == 0 { 1 } else { 2 };
        let out = spec.group_width(g);
        for j in 0..spec.groups[g] {
            l += 1;
            let stride = if j == 0 { group_stride } else { 1 };
            b.set_context(Some(l), true);
            let f = branch(&mut b, spec, x, l, g, stride)?;
            b.set_context(Some(l), false);

            let mut operands = Vec::new();
            if l == total {
                let kind = policy_kind(spec.policy, Level::Root, true);
                let via = b.make_shortcut(kind, x1, out, 8, Level::Root, "root.shortcut")?;
                operands.push((Level::Root, kind, x1, via));
            }
            if j + 1 == spec.groups[g] && spec.levels == 3 {
                let change = changes_dims(&b, group_in, out, group_stride);
                let kind = policy_kind(spec.policy, Level::Middle, change);
                let name = format!("group{}.shortcut", g + 1);
                let via = b.make_shortcut(kind, group_in, out, group_stride, Level::Middle, &name)?;
                operands.push((Level::Middle, kind, group_in, via));
            }
            let change = changes_dims(&b, x, out, stride);
            let kind = policy_kind(spec.policy, Level::Final, change);
            let via = b.make_shortcut(kind, x, out, stride, Level::Final, &format!("block{l}.shortcut"))?;
            operands.push((Level::Final, kind, x, via));

            let mut inputs: Vec<NodeId> = operands.iter().map(|o| o.3).collect();
            inputs.push(f);
            let junction = b.sum(inputs, &format!("block{l}.sum"))?;
            for (level, kind, source, via) in operands {
                b.annotate(level, kind, source, via, junction, l);
            }
            x = match spec.order {
                ActivationOrder::Pre => junction,
                ActivationOrder::Post => b.relu(junction, &format!("block{l}.relu")),
            };
            b.mark_x(x, l + 1);
        }
    }

    b.set_context(None, false);
    if spec.order == ActivationOrder::Pre {
        let n = b.batch_norm(x, "final.bn")?;
        x = b.relu(n, "final.relu");
    }
    let features = b.global_avg_pool(x)?;
    let logits = b.linear(features, spec.classes)?;
    Ok(b.finish(features, logits, Some(spec.clone())))
}

fn stride_of(kind: &NodeKind) -> usize {
    match *kind {
        NodeKind::Conv { stride, .. } | NodeKind::SubsamplePad { stride, .. } => stride,
        _ => 1,
    }
}

/// Re-types every annotated shortcut according to `policy`, replaying the
/// graph so parameter lists stay dense. Works on handcrafted graphs too.
pub fn apply_policy(graph: &Graph, policy: ShortcutPolicy) -> Result<Graph, ArchError> {
    let mut b = GraphBuilder::new(match graph.input_shape() {
        &[c, h, w] => [c, h, w],
        s => return Err(ArchError::Graph(format!("input shape {s:?} is not [c, h, w]"))),
    });
    let mut map: HashMap<NodeId, NodeId> = HashMap::from([(graph.input, b.input())]);
    // shortcut index by via node (non-identity) and by junction (identity)
    let mut by_via: HashMap<NodeId, usize> = HashMap::new();
    let mut identity_at: HashMap<NodeId, Vec<usize>> = HashMap::new();
    for (i, e) in graph.shortcuts.iter().enumerate() {
        if e.kind == ShortcutKind::Identity {
            identity_at.entry(e.junction).or_default().push(i);
        } else {
            by_via.insert(e.via, i);
        }
    }
    let mut new_via: HashMap<usize, (ShortcutKind, NodeId)> = HashMap::new();

    for n in graph.nodes.iter().skip(1) {
        b.set_context(n.block, n.in_branch);
        let m = |id: &NodeId| map[id];

        if let Some(&ei) = by_via.get(&n.id) {
            let e = &graph.shortcuts[ei];
            let stride = stride_of(&n.kind);
            let out = n.shape[0];
            let change = graph.nodes[e.source].shape != graph.nodes[e.junction].shape;
            let kind = policy_kind(policy, e.level, change);
            let via = b.make_shortcut(kind, map[&e.source], out, stride, e.level, &n.name)?;
            new_via.insert(ei, (kind, via));
            map.insert(n.id, via);
            continue;
        }

        let id = match n.kind {
            NodeKind::Input => return Err(ArchError::Graph("second input node".into())),
            NodeKind::Conv { param, stride, pad } => {
                let p = &graph.params[param];
                b.conv(m(&n.inputs[0]), p.shape[0], p.shape[2], stride, pad, p.role, &n.name)?
            }
            NodeKind::BatchNorm { .. } => b.batch_norm(m(&n.inputs[0]), &n.name)?,
            NodeKind::Relu => b.relu(m(&n.inputs[0]), &n.name),
            NodeKind::Gate { block } => b.gate(m(&n.inputs[0]), block),
            NodeKind::SubsamplePad { stride, out_channels } => {
                b.make_shortcut(ShortcutKind::A, m(&n.inputs[0]), out_channels, stride, Level::Final, &n.name)?
            }
            NodeKind::GlobalAvgPool => b.global_avg_pool(m(&n.inputs[0]))?,
            NodeKind::Linear { .. } => b.linear(m(&n.inputs[0]), n.shape[0])?,
            NodeKind::Sum => {
                let mut inputs = Vec::with_capacity(n.inputs.len());
                let identities = identity_at.get(&n.id).cloned().unwrap_or_default();
                for &i in &n.inputs {
                    let ident = identities.iter().copied().find(|&ei| graph.shortcuts[ei].source == i);
                    match ident {
                        Some(ei) if !new_via.contains_key(&ei) => {
                            let e = &graph.shortcuts[ei];
                            let change = graph.nodes[e.source].shape != n.shape;
                            let kind = policy_kind(policy, e.level, change);
                            let name = format!("{}.{}", n.name, super::graph::level_name(e.level));
                            let via = b.make_shortcut(kind, map[&i], n.shape[0], 1, e.level, &name)?;
                            new_via.insert(ei, (kind, via));
                            inputs.push(via);
                        }
                        _ => inputs.push(map[&i]),
                    }
                }
                b.sum(inputs, &n.name)?
            }
        };
        map.insert(n.id, id);
        if n.kind == NodeKind::Sum {
            for (ei, e) in graph.shortcuts.iter().enumerate().filter(|(_, e)| e.junction == n.id) {
                let (kind, via) = new_via.get(&ei).copied().unwrap_or((ShortcutKind::Identity, map[&e.source]));
                b.annotate(e.level, kind, map[&e.source], via, id, e.block);
            }
        }
    }
    for n in &graph.nodes {
        if let Some(x) = n.x_index {
            b.mark_x(map[&n.id], x);
        }
    }
    let spec = graph.spec.clone().map(|s| s.with_policy(policy));
    Ok(b.finish(map[&graph.features], map[&graph.logits], spec))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_table() {
        use ShortcutKind::*;
        assert_eq!(policy_kind(ShortcutPolicy::AB, Level::Final, true), A);
        assert_eq!(policy_kind(ShortcutPolicy::AllB, Level::Final, true), B);
        assert_eq!(policy_kind(ShortcutPolicy::AB, Level::Final, false), Identity);
        assert_eq!(policy_kind(ShortcutPolicy::AB, Level::Middle, false), B);
        assert_eq!(policy_kind(ShortcutPolicy::AllB, Level::Root, true), B);
    }

    #[test]
    fn last_block_junction_order() {
        let spec = ArchSpec::basic([1, 1, 1, 1], 3, [3, 16, 16]).with_widths([4, 8, 16, 32]);
        let g = build(&spec).unwrap();
        let last: Vec<_> = g.shortcuts.iter().filter(|e| e.block == 4).map(|e| e.level).collect();
        assert_eq!(last, vec![Level::Root, Level::Middle, Level::Final]);
        assert_eq!(g.nodes[g.logits].shape, vec![3]);
        assert_eq!(g.nodes[g.features].shape, vec![32]);
    }
}
