//! Parameter values and running statistics attached to a graph.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::arch::{self, ArchError, DropSchedule, Graph, Mode, Outputs, ParamRole};
use crate::tensor::{io, Element, RunningStats, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct RorModel<T: Element = f32> {
    pub graph: Graph,
    pub params: Vec<Tensor<T>>,
    pub stats: Vec<RunningStats<T>>,
    /// Stochastic-depth schedule; `None` disables drop-path.
    pub drop: Option<DropSchedule>,
}

fn init_param<T: Element>(spec: &arch::ParamSpec, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = spec.numel();
    let data: Vec<T> = match spec.role {
        ParamRole::Stem | ParamRole::Branch { .. } | ParamRole::Projection { .. } => {
            let normal = Normal::new(0.0, (2.0 / spec.fan_in as f64).sqrt()).expect("finite std");
            (0..n).map(|_| T::of(normal.sample(rng))).collect()
        }
        ParamRole::HeadWeight => {
            let bound = 1.0 / (spec.fan_in as f64).sqrt();
            (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect()
        }
        ParamRole::NormScale => vec![T::one(); n],
        ParamRole::NormShift | ParamRole::HeadBias => vec![T::zero(); n],
    };
    Tensor::new(spec.shape.clone(), data).expect("shape matches numel")
}

impl<T: Element> RorModel<T> {
    /// Fresh parameters: He-normal convolutions, unit/zero norms, uniform head.
    pub fn init(graph: Graph, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = graph.params.iter().map(|p| init_param(p, &mut rng)).collect();
        let stats = graph.norms.iter().map(|n| RunningStats::new(n.channels)).collect();
        Self {
            graph,
            params,
            stats,
            drop: None,
        }
    }

    pub fn with_drop(mut self, drop: Option<DropSchedule>) -> Self {
        self.drop = drop;
        self
    }

    /// Places every parameter on the tape as a gradient leaf.
    pub fn param_vars(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    /// Training-mode forward: batch statistics, optional drop mask, running
    /// statistics updated in place when `update_stats` is set.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape<T>,
        params: &[Var],
        input: Var,
        keep: Option<&[bool]>,
        update_stats: bool,
    ) -> Result<Outputs, ArchError> {
        let stats = update_stats.then_some(self.stats.as_mut_slice());
        arch::run(&self.graph, tape, params, input, Mode::Train { keep, stats })
    }

    pub fn forward_eval(&self, tape: &mut Tape<T>, params: &[Var], input: Var) -> Result<Outputs, ArchError> {
        arch::run(
            &self.graph,
            tape,
            params,
            input,
            Mode::Eval {
                stats: &self.stats,
                drop: self.drop.as_ref(),
            },
        )
    }

    /// Eval-mode logits and penultimate features for a batch.
    pub fn infer(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>), ArchError> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let x = tape.constant(input.clone());
        let out = self.forward_eval(&mut tape, &params, x)?;
        Ok((tape.value(out.logits).clone(), tape.value(out.features).clone()))
    }

    /// Predicted 1-based class per sample.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Vec<usize>, ArchError> {
        let (logits, _) = self.infer(input)?;
        Ok(argmax_rows(&logits))
    }

    /// Swaps the classifier for a freshly initialized one with `classes` outputs.
    pub fn replace_head(&mut self, classes: usize, seed: u64) {
        self.graph.set_num_classes(classes);
        let (w, b) = self.graph.head_params();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.params[w] = init_param(&self.graph.params[w], &mut rng);
        self.params[b] = init_param(&self.graph.params[b], &mut rng);
    }

    /// SHA-256 over every non-head parameter and running statistic.
    pub fn body_checksum(&self) -> String {
        let mut h = Sha256::new();
        for (spec, p) in self.graph.params.iter().zip(&self.params) {
            if !spec.role.is_head() {
                h.update(io::to_bytes(p));
            }
        }
        for s in &self.stats {
            for v in s.mean.iter().chain(&s.var) {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Element>(&self) -> RorModel<U> {
        RorModel {
            graph: self.graph.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            stats: self.stats.iter().map(RunningStats::cast).collect(),
            drop: self.drop,
        }
    }
}

/// 1-based argmax of each row of a `[n, k]` tensor; ties go to the lower class.
pub fn argmax_rows<T: Element>(logits: &Tensor<T>) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(k.max(1))
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best + 1
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build, ArchSpec};

    #[test]
    fn argmax_is_one_based() {
        let t = Tensor::<f32>::from_f64([2, 3], &[0.0, 2.0, 1.0, 5.0, 5.0, 1.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![2, 1]);
    }

    #[test]
    fn init_is_seeded() {
        let spec = ArchSpec::basic([1, 1, 1, 1], 4, [3, 8, 8]).with_widths([4, 8, 8, 16]);
        let g = build(&spec).unwrap();
        let a = RorModel::<f32>::init(g.clone(), 5);
        let b = RorModel::<f32>::init(g.clone(), 5);
        let c = RorModel::<f32>::init(g, 6);
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn head_replacement_keeps_body() {
        let spec = ArchSpec::basic([1, 1, 1, 1], 4, [3, 8, 8]).with_widths([4, 8, 8, 16]);
        let mut m = RorModel::<f32>::init(build(&spec).unwrap(), 1);
        let before = m.body_checksum();
        m.replace_head(2, 9);
        assert_eq!(m.body_checksum(), before);
        assert_eq!(m.graph.num_classes(), 2);
        let (w, _) = m.graph.head_params();
        assert_eq!(m.params[w].shape(), &[16, 2]);
    }
}
