//! Central finite-difference verification of analytic gradients.
//!
//! The analytic gradient is computed at the requested precision; the
//! difference quotient is evaluated at the oracle precision (double by
//! default, so the oracle's own rounding noise does not swamp the check of a
//! single-precision gradient). Coordinates whose perturbation flips the sign
//! of any ReLU input are reported as kink crossings and excluded.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Element, Tape, Tensor, TensorError, Var};

/// A scalar-valued computation over a list of input tensors.
pub trait ScalarGraph {
    fn build<T: Element>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var, TensorError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Precision {
    Single,
    Double,
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub analytic: Precision,
    pub oracle: Precision,
    /// Perturbation is `step * max(1, |x_i|)`.
    pub step: f64,
    /// Coordinates where both gradients are below this magnitude are not compared.
    pub min_magnitude: f64,
    pub tolerance: f64,
    /// Check at most this many coordinates per input tensor (sampled by `seed`).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl GradCheckConfig {
    pub fn single() -> Self {
        Self {
            analytic: Precision::Single,
            oracle: Precision::Double,
            step: 1e-3,
            min_magnitude: 1e-4,
            tolerance: 1e-3,
            max_coords: None,
            seed: 0,
        }
    }

    pub fn double() -> Self {
        Self {
            analytic: Precision::Double,
            oracle: Precision::Double,
            step: 1e-5,
            min_magnitude: 1e-4,
            tolerance: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }

    pub fn with_max_coords(mut self, n: usize) -> Self {
        self.max_coords = Some(n);
        self
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Coordinate {
    pub input: usize,
    pub index: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    pub checked: usize,
    pub skipped_kink: usize,
    pub skipped_small: usize,
    pub non_finite: Vec<Coordinate>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.non_finite.is_empty() && self.checked > 0 && self.max_rel_error < self.tolerance
    }
}

fn eval<T: Element, G: ScalarGraph>(graph: &G, inputs: &[Tensor<f64>], track: bool) -> Result<(f64, Vec<bool>), TensorError> {
    let mut tape = if track { Tape::<T>::with_kink_tracking() } else { Tape::new() };
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.cast(), false)).collect();
    let out = graph.build(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(TensorError::NotScalar(v.shape().to_vec()));
    }
    let signs = tape.kink_signature().map(<[bool]>::to_vec).unwrap_or_default();
    Ok((v.data()[0].as_f64(), signs))
}

fn oracle_eval<G: ScalarGraph>(graph: &G, inputs: &[Tensor<f64>], precision: Precision) -> Result<(f64, Vec<bool>), TensorError> {
    match precision {
        Precision::Single => eval::<f32, G>(graph, inputs, true),
        Precision::Double => eval::<f64, G>(graph, inputs, true),
    }
}

fn analytic<T: Element, G: ScalarGraph>(graph: &G, inputs: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>, TensorError> {
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.cast())).collect();
    let out = graph.build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).map(Tensor::to_f64_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect())
}

/// Compares analytic gradients of `graph` with respect to every input
/// against central differences `(f(x+h) - f(x-h)) / 2h`.
pub fn finite_diff_check<G: ScalarGraph>(graph: &G, inputs: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport, TensorError> {
    let analytic = match cfg.analytic {
        Precision::Single => analytic::<f32, G>(graph, inputs)?,
        Precision::Double => analytic::<f64, G>(graph, inputs)?,
    };
    let (_, base_signs) = oracle_eval(graph, inputs, cfg.oracle)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped_kink: 0,
        skipped_small: 0,
        non_finite: Vec::new(),
        tolerance: cfg.tolerance,
    };
    let mut work = inputs.to_vec();
    for (input, tensor) in inputs.iter().enumerate() {
        let mut coords: Vec<usize> = (0..tensor.len()).collect();
        if let Some(limit) = cfg.max_coords {
            if coords.len() > limit {
                coords.shuffle(&mut rng);
                coords.truncate(limit);
                coords.sort_unstable();
            }
        }
        for index in coords {
            let x = tensor.data()[index];
            let h = cfg.step * x.abs().max(1.0);
            work[input].data_mut()[index] = x + h;
            let (f_plus, s_plus) = oracle_eval(graph, &work, cfg.oracle)?;
            work[input].data_mut()[index] = x - h;
            let (f_minus, s_minus) = oracle_eval(graph, &work, cfg.oracle)?;
            work[input].data_mut()[index] = x;

            let a = analytic[input][index];
            if !f_plus.is_finite() || !f_minus.is_finite() || !a.is_finite() {
                report.non_finite.push(Coordinate { input, index });
                continue;
            }
            if s_plus != base_signs || s_minus != base_signs {
                report.skipped_kink += 1;
                continue;
            }
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let scale = a.abs().max(numeric.abs());
            if scale <= cfg.min_magnitude {
                report.skipped_small += 1;
                continue;
            }
            let rel = (a - numeric).abs() / scale;
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(Coordinate { input, index });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct SumSquares;

    impl ScalarGraph for SumSquares {
        fn build<T: Element>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var, TensorError> {
            let sq = tape.mul(inputs[0], inputs[0])?;
            Ok(tape.sum(sq))
        }
    }

    struct Affine;

    impl ScalarGraph for Affine {
        fn build<T: Element>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var, TensorError> {
            let y = tape.scale(inputs[0], T::of(3.0));
            Ok(tape.sum(y))
        }
    }

    struct ReluSum;

    impl ScalarGraph for ReluSum {
        fn build<T: Element>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var, TensorError> {
            let r = tape.relu(inputs[0]);
            Ok(tape.sum(r))
        }
    }

    #[test]
    fn quadratic_gradient_is_two_x() {
        let x = Tensor::from_f64([2], &[1.0, 2.0]).unwrap();
        let g = analytic::<f64, _>(&SumSquares, &[x.clone()]).unwrap();
        assert_eq!(g[0], vec![2.0, 4.0]);
        let report = finite_diff_check(&SumSquares, &[x], &GradCheckConfig::double()).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn linear_function_agrees_to_rounding() {
        let x = Tensor::from_f64([3], &[0.5, -1.0, 2.0]).unwrap();
        let report = finite_diff_check(&Affine, &[x], &GradCheckConfig::double()).unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn kink_crossings_are_excluded() {
        // 1e-6 sits inside the perturbation window around the kink at zero.
        let x = Tensor::from_f64([3], &[1e-6, 1.5, -0.7]).unwrap();
        let report = finite_diff_check(&ReluSum, &[x], &GradCheckConfig::double()).unwrap();
        assert_eq!(report.skipped_kink, 1);
        assert_eq!(report.checked, 1);
        assert_eq!(report.skipped_small, 1);
        assert!(report.passed());
    }

    #[test]
    fn wrong_gradient_is_detected() {
        struct Broken;
        impl ScalarGraph for Broken {
            fn build<T: Element>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var, TensorError> {
                // The constant factor is recorded on the value but the tape sees
                // an independent leaf, so the analytic gradient misses it.
                let c = tape.constant(tape.value(inputs[0]).clone());
                let y = tape.mul(inputs[0], c)?;
                Ok(tape.sum(y))
            }
        }
        let x = Tensor::from_f64([2], &[1.0, 2.0]).unwrap();
        let report = finite_diff_check(&Broken, &[x], &GradCheckConfig::double()).unwrap();
        assert!(!report.passed());
        assert!((report.max_rel_error - 0.5).abs() < 1e-6);
    }
}
