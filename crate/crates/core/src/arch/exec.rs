use super::drop::DropSchedule;
use super::graph::{Graph, NodeKind};
use super::ArchError;
use crate::tensor::{BnMode, Element, RunningStats, Tape, TensorError, Var};

/// How a forward pass treats batch norm and stochastic depth.
#[derive(Debug)]
pub enum Mode<'a, T> {
    /// Batch statistics. `keep[l - 1] == false` drops block `l`; `stats`
    /// receives running-average updates for the norms that execute.
    Train {
        keep: Option<&'a [bool]>,
        stats: Option<&'a mut [RunningStats<T>]>,
    },
    /// Running statistics; branch outputs scaled by survival when a drop
    /// schedule is given.
    Eval {
        stats: &'a [RunningStats<T>],
        drop: Option<&'a DropSchedule>,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    pub logits: Var,
    pub features: Var,
}

/// Records `graph` on `tape` for a `[n, c, h, w]` input. `params` holds one
/// tape variable per graph parameter.
pub fn run<T: Element>(
    graph: &Graph,
    tape: &mut Tape<T>,
    params: &[Var],
    input: Var,
    mut mode: Mode<'_, T>,
) -> Result<Outputs, ArchError> {
    if params.len() != graph.params.len() {
        return Err(ArchError::Graph(format!(
            "{} parameter variables for {} parameters",
            params.len(),
            graph.params.len()
        )));
    }
    let shape = tape.value(input).shape();
    if shape.len() != 4 || shape[1..] != graph.input_shape()[..] {
        return Err(TensorError::ShapeMismatch {
            op: "forward",
            left: shape.to_vec(),
            right: graph.input_shape().to_vec(),
        }
        .into());
    }
    match &mode {
        Mode::Train { keep: Some(k), .. } if k.len() != graph.blocks => {
            return Err(ArchError::Graph(format!("drop mask has {} entries for {} blocks", k.len(), graph.blocks)));
        }
        Mode::Train { stats: Some(s), .. } if s.len() != graph.norms.len() => {
            return Err(ArchError::Graph(format!("{} running stats for {} norms", s.len(), graph.norms.len())));
        }
        Mode::Eval { stats, .. } if stats.len() != graph.norms.len() => {
            return Err(ArchError::Graph(format!("{} running stats for {} norms", stats.len(), graph.norms.len())));
        }
        _ => {}
    }

    let dropped = |block: Option<usize>, mode: &Mode<'_, T>| match (block, mode) {
        (Some(l), Mode::Train { keep: Some(k), .. }) => !k[l - 1],
        _ => false,
    };

    let mut values: Vec<Option<Var>> = vec![None; graph.nodes.len()];
    values[graph.input] = Some(input);
    for n in graph.nodes.iter().skip(1) {
        if (n.in_branch || matches!(n.kind, NodeKind::Gate { .. })) && dropped(n.block, &mode) {
            continue;
        }
        if n.kind == NodeKind::Sum {
            let mut acc: Option<Var> = None;
            for v in n.inputs.iter().filter_map(|&i| values[i]) {
                acc = Some(match acc {
                    None => v,
                    Some(a) => tape.add(a, v)?,
                });
            }
            values[n.id] = Some(acc.ok_or_else(|| ArchError::Graph(format!("{}: every operand dropped", n.name)))?);
            continue;
        }
        let Some(x) = values[n.inputs[0]] else {
            continue;
        };
        let out = match n.kind {
            NodeKind::Input | NodeKind::Sum => unreachable!(),
            NodeKind::Conv { param, stride, pad } => tape.conv2d(x, params[param], stride, pad)?,
            NodeKind::BatchNorm { norm } => {
                let spec = &graph.norms[norm];
                let bn = match &mut mode {
                    Mode::Train { stats, .. } => BnMode::Train(stats.as_deref_mut().map(|s| &mut s[norm])),
                    Mode::Eval { stats, .. } => BnMode::Eval(&stats[norm]),
                };
                tape.batch_norm(x, params[spec.gamma], params[spec.beta], bn)?
            }
            NodeKind::Relu => tape.relu(x),
            NodeKind::SubsamplePad { stride, out_channels } => tape.subsample_pad(x, stride, out_channels)?,
            NodeKind::Gate { block } => match &mode {
                Mode::Eval { drop: Some(d), .. } => tape.scale(x, T::of(d.survival(block))),
                _ => x,
            },
            NodeKind::GlobalAvgPool => tape.global_avg_pool(x)?,
            NodeKind::Linear { weight, bias } => tape.linear(x, params[weight], params[bias])?,
        };
        values[n.id] = Some(out);
    }
    let get = |id: usize| values[id].ok_or_else(|| ArchError::Graph(format!("node {id} was not computed")));
    Ok(Outputs {
        logits: get(graph.logits)?,
        features: get(graph.features)?,
    })
}
