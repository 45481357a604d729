use super::conv::{self, ConvGeometry};
use super::{Element, Tensor, TensorError};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel running mean and variance of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// False until at least one train-mode batch has been folded in.
    pub populated: bool,
}

impl<T: Element> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            populated: false,
        }
    }

    /// Mean 0, variance 1, marked as populated (an identity map in eval mode).
    pub fn identity(channels: usize) -> Self {
        Self {
            populated: true,
            ..Self::new(channels)
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn cast<U: Element>(&self) -> RunningStats<U> {
        RunningStats {
            mean: self.mean.iter().map(|v| U::of(v.as_f64())).collect(),
            var: self.var.iter().map(|v| U::of(v.as_f64())).collect(),
            populated: self.populated,
        }
    }
}

pub enum BnMode<'a, T> {
    /// Normalize with batch statistics; fold them into the running stats if given.
    Train(Option<&'a mut RunningStats<T>>),
    Eval(&'a RunningStats<T>),
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu(Var),
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    SubsamplePad {
        input: Var,
        stride: usize,
    },
    WeightedCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Wengert list of recorded operations. Nodes are appended in evaluation
/// order, so every node's operands precede it.
#[derive(Debug, Default)]
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    kink_signs: Option<Vec<bool>>,
}

/// Result of [`Tape::backward`]: gradients of every leaf that requires them.
#[derive(Debug)]
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
    visits: Vec<u32>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    /// Number of times each node's backward rule ran.
    pub fn visits(&self) -> &[u32] {
        &self.visits
    }
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn rank4<T: Element>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize, usize), TensorError> {
    t.dims4().ok_or_else(|| TensorError::InvalidArgument {
        op,
        msg: format!("expected a rank-4 tensor, got shape {:?}", t.shape()),
    })
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            kink_signs: None,
        }
    }

    /// A tape that records the sign of every ReLU input, so callers can detect
    /// when a perturbation crosses a kink.
    pub fn with_kink_tracking() -> Self {
        Self {
            nodes: Vec::new(),
            kink_signs: Some(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn kink_signature(&self) -> Option<&[bool]> {
        self.kink_signs.as_deref()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// 2-d cross-correlation, no bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        const OP: &str = "conv2d";
        let x = self.value(input);
        let k = self.value(kernel);
        let (n, c, h, w) = rank4(OP, x)?;
        let (o, kc, kh, kw) = rank4(OP, k)?;
        if kc != c {
            return Err(mismatch(OP, x.shape(), k.shape()));
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: OP,
                msg: "stride must be positive".into(),
            });
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(mismatch(OP, x.shape(), k.shape()));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let geom = ConvGeometry {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        let out = conv::forward(&geom, x.data(), k.data());
        let value = Tensor::new([n, o, ho, wo], out)?;
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(value, Op::Conv2d { input, kernel, geom }, rg))
    }

    /// Per-channel batch normalization of a rank-4 activation.
    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var, mode: BnMode<'_, T>) -> Result<Var, TensorError> {
        const OP: &str = "batch_norm";
        let x = self.value(input);
        let (n, c, h, w) = rank4(OP, x)?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(mismatch(OP, x.shape(), self.value(p).shape()));
            }
        }
        let eps = T::of(BN_EPSILON);
        let hw = h * w;
        let m = n * hw;
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let xs = x.data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        let mut inv_std = vec![T::zero(); c];

        let per_channel = |ch: usize, f: &mut dyn FnMut(usize)| {
            for s in 0..n {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    f(i);
                }
            }
        };

        let train = matches!(mode, BnMode::Train(_));
        match mode {
            BnMode::Train(mut stats) => {
                if let Some(st) = stats.as_deref() {
                    if st.channels() != c {
                        return Err(mismatch(OP, x.shape(), &[st.channels()]));
                    }
                }
                let mf = T::of(m as f64);
                let momentum = T::of(BN_MOMENTUM);
                for ch in 0..c {
                    let mut sum = T::zero();
                    per_channel(ch, &mut |i| sum = sum + xs[i]);
                    let mean = sum / mf;
                    let mut sq = T::zero();
                    per_channel(ch, &mut |i| {
                        let d = xs[i] - mean;
                        sq = sq + d * d;
                    });
                    let var = sq / mf;
                    let istd = T::one() / (var + eps).sqrt();
                    inv_std[ch] = istd;
                    per_channel(ch, &mut |i| {
                        let xh = (xs[i] - mean) * istd;
                        xhat[i] = xh;
                        out[i] = g[ch] * xh + b[ch];
                    });
                    if let Some(st) = stats.as_deref_mut() {
                        let unbiased = if m > 1 { sq / T::of((m - 1) as f64) } else { var };
                        st.mean[ch] = (T::one() - momentum) * st.mean[ch] + momentum * mean;
                        st.var[ch] = (T::one() - momentum) * st.var[ch] + momentum * unbiased;
                    }
                }
                if let Some(st) = stats {
                    st.populated = true;
                }
            }
            BnMode::Eval(st) => {
                if !st.populated {
                    return Err(TensorError::MissingRunningStats);
                }
                if st.channels() != c {
                    return Err(mismatch(OP, x.shape(), &[st.channels()]));
                }
                for ch in 0..c {
                    let istd = T::one() / (st.var[ch] + eps).sqrt();
                    inv_std[ch] = istd;
                    let mean = st.mean[ch];
                    per_channel(ch, &mut |i| {
                        let xh = (xs[i] - mean) * istd;
                        xhat[i] = xh;
                        out[i] = g[ch] * xh + b[ch];
                    });
                }
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(&[input, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = &self.nodes[input.0].value;
        if let Some(signs) = self.kink_signs.as_mut() {
            signs.extend(x.data().iter().map(|&v| v > T::zero()));
        }
        let value = x.map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[input]);
        self.push(value, Op::Relu(input), rg)
    }

    /// Spatial mean per channel: `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var, TensorError> {
        let x = self.value(input);
        let (n, c, h, w) = rank4("global_avg_pool", x)?;
        let hw = h * w;
        let denom = T::of(hw as f64);
        let out = x
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) / denom)
            .collect();
        let value = Tensor::new([n, c], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::GlobalAvgPool(input), rg))
    }

    /// `input [n, i] x weight [i, o] + bias [o]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        const OP: &str = "linear";
        let x = self.value(input);
        let wt = self.value(weight);
        let bs = self.value(bias);
        let (n, i) = match x.shape() {
            &[n, i] => (n, i),
            s => return Err(mismatch(OP, s, wt.shape())),
        };
        let o = match wt.shape() {
            &[wi, o] if wi == i => o,
            s => return Err(mismatch(OP, x.shape(), s)),
        };
        if bs.shape() != [o] {
            return Err(mismatch(OP, wt.shape(), bs.shape()));
        }
        let mut out = Vec::with_capacity(n * o);
        for _ in 0..n {
            out.extend_from_slice(bs.data());
        }
        // SAFETY: x is n x i, weight is i x o, out is n x o.
        unsafe {
            T::gemm(
                n,
                i,
                o,
                T::one(),
                x.data().as_ptr(),
                i as isize,
                1,
                wt.data().as_ptr(),
                o as isize,
                1,
                T::one(),
                out.as_mut_ptr(),
                o as isize,
                1,
            );
        }
        let value = Tensor::new([n, o], out)?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(value, Op::Linear { input, weight, bias }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch("add", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch("mul", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let value = self.value(input).map(|v| v * factor);
        let rg = self.rg(&[input]);
        self.push(value, Op::Scale(input, factor), rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        let rg = self.rg(&[input]);
        self.push(value, Op::Sum(input), rg)
    }

    /// Parameter-free shortcut: keeps the top-left sample of every
    /// `stride x stride` window and zero-pads the trailing channels up to
    /// `out_channels`.
    pub fn subsample_pad(&mut self, input: Var, stride: usize, out_channels: usize) -> Result<Var, TensorError> {
        const OP: &str = "subsample_pad";
        let x = self.value(input);
        let (n, c, h, w) = rank4(OP, x)?;
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: OP,
                msg: "stride must be positive".into(),
            });
        }
        if out_channels < c {
            return Err(TensorError::InvalidArgument {
                op: OP,
                msg: format!("cannot pad {c} channels down to {out_channels}"),
            });
        }
        let ho = (h - 1) / stride + 1;
        let wo = (w - 1) / stride + 1;
        let mut out = vec![T::zero(); n * out_channels * ho * wo];
        let xs = x.data();
        for s in 0..n {
            for ch in 0..c {
                for i in 0..ho {
                    for j in 0..wo {
                        out[((s * out_channels + ch) * ho + i) * wo + j] = xs[((s * c + ch) * h + i * stride) * w + j * stride];
                    }
                }
            }
        }
        let value = Tensor::new([n, out_channels, ho, wo], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::SubsamplePad { input, stride }, rg))
    }

    /// Mean over the batch of `weights[y] * -log softmax(logits)[y]`.
    /// Labels are 1-based class indices.
    pub fn weighted_cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[T]) -> Result<Var, TensorError> {
        const OP: &str = "weighted_cross_entropy";
        let z = self.value(logits);
        let (n, k) = match z.shape() {
            &[n, k] => (n, k),
            s => return Err(mismatch(OP, s, &[labels.len(), weights.len()])),
        };
        if labels.len() != n || weights.len() != k {
            return Err(mismatch(OP, z.shape(), &[labels.len(), weights.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y == 0 || y > k) {
            return Err(TensorError::InvalidArgument {
                op: OP,
                msg: format!("label {bad} outside 1..={k}"),
            });
        }
        if !z.is_finite() {
            return Err(TensorError::NonFinite(OP));
        }
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for (s, row) in z.data().chunks(k).enumerate() {
            let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let mut denom = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[s * k + j] = e;
                denom = denom + e;
            }
            for p in &mut probs[s * k..(s + 1) * k] {
                *p = *p / denom;
            }
            let y = labels[s] - 1;
            let nll = denom.ln() - (row[y] - max);
            total = total + weights[y] * nll;
        }
        let value = Tensor::scalar(total / T::of(n as f64));
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::WeightedCrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar output. Every node with a live gradient is
    /// visited exactly once, in reverse recording order; contributions are
    /// accumulated operand by operand, so the result is deterministic.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>, TensorError> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(TensorError::NotScalar(out.shape().to_vec()));
        }
        let len = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..len).map(|_| None).collect();
        let mut visits = vec![0u32; len];
        if !self.nodes[output.0].requires_grad {
            return Ok(Gradients { grads, visits });
        }
        grads[output.0] = Some(Tensor::ones(out.shape().to_vec()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            visits[idx] += 1;
            self.propagate(node, &gy, &mut grads)?;
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && grads[idx].is_some() {
                visits[idx] += 1;
            }
        }
        Ok(Gradients { grads, visits })
    }

    fn send(&self, grads: &mut [Option<Tensor<T>>], to: Var, g: Tensor<T>) {
        if !self.nodes[to.0].requires_grad {
            return;
        }
        match grads[to.0].as_mut() {
            Some(acc) => acc.accumulate(&g),
            None => grads[to.0] = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<(), TensorError> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, geom } => {
                let (gi, gk) = conv::backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    gy.data(),
                    self.requires_grad(*input),
                    self.requires_grad(*kernel),
                );
                if let Some(gi) = gi {
                    self.send(grads, *input, Tensor::new(self.value(*input).shape().to_vec(), gi)?);
                }
                if let Some(gk) = gk {
                    self.send(grads, *kernel, Tensor::new(self.value(*kernel).shape().to_vec(), gk)?);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let x = self.value(*input);
                let (n, c, h, w) = rank4("batch_norm", x)?;
                let hw = h * w;
                let m = T::of((n * hw) as f64);
                let g = self.value(*gamma).data();
                let dy = gy.data();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for i in base..base + hw {
                            sum_dy[ch] = sum_dy[ch] + dy[i];
                            sum_dy_xhat[ch] = sum_dy_xhat[ch] + dy[i] * xhat[i];
                        }
                    }
                }
                if self.requires_grad(*input) {
                    let mut dx = vec![T::zero(); dy.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            let k = g[ch] * inv_std[ch];
                            for i in base..base + hw {
                                dx[i] = if *train {
                                    k * (dy[i] - sum_dy[ch] / m - xhat[i] * sum_dy_xhat[ch] / m)
                                } else {
                                    k * dy[i]
                                };
                            }
                        }
                    }
                    self.send(grads, *input, Tensor::new(x.shape().to_vec(), dx)?);
                }
                self.send(grads, *gamma, Tensor::new([c], sum_dy_xhat)?);
                self.send(grads, *beta, Tensor::new([c], sum_dy)?);
            }
            Op::Relu(input) => {
                let y = &node.value;
                let data = gy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.send(grads, *input, Tensor::new(y.shape().to_vec(), data)?);
            }
            Op::GlobalAvgPool(input) => {
                let x = self.value(*input);
                let (_, _, h, w) = rank4("global_avg_pool", x)?;
                let hw = h * w;
                let denom = T::of(hw as f64);
                let mut dx = Vec::with_capacity(x.len());
                for &g in gy.data() {
                    dx.extend(std::iter::repeat_n(g / denom, hw));
                }
                self.send(grads, *input, Tensor::new(x.shape().to_vec(), dx)?);
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let (n, i) = (x.shape()[0], x.shape()[1]);
                let o = wt.shape()[1];
                if self.requires_grad(*input) {
                    let mut dx = vec![T::zero(); n * i];
                    // SAFETY: gy is n x o, weight^T is o x i, dx is n x i.
                    unsafe {
                        T::gemm(
                            n,
                            o,
                            i,
                            T::one(),
                            gy.data().as_ptr(),
                            o as isize,
                            1,
                            wt.data().as_ptr(),
                            1,
                            o as isize,
                            T::zero(),
                            dx.as_mut_ptr(),
                            i as isize,
                            1,
                        );
                    }
                    self.send(grads, *input, Tensor::new([n, i], dx)?);
                }
                if self.requires_grad(*weight) {
                    let mut dw = vec![T::zero(); i * o];
                    // SAFETY: x^T is i x n, gy is n x o, dw is i x o.
                    unsafe {
                        T::gemm(
                            i,
                            n,
                            o,
                            T::one(),
                            x.data().as_ptr(),
                            1,
                            i as isize,
                            gy.data().as_ptr(),
                            o as isize,
                            1,
                            T::zero(),
                            dw.as_mut_ptr(),
                            o as isize,
                            1,
                        );
                    }
                    self.send(grads, *weight, Tensor::new([i, o], dw)?);
                }
                if self.requires_grad(*bias) {
                    let mut db = vec![T::zero(); o];
                    for row in gy.data().chunks(o) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d = *d + g;
                        }
                    }
                    self.send(grads, *bias, Tensor::new([o], db)?);
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, gy.clone());
                self.send(grads, *b, gy.clone());
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let da = gy.data().iter().zip(y.data()).map(|(&g, &v)| g * v).collect();
                let db = gy.data().iter().zip(x.data()).map(|(&g, &v)| g * v).collect();
                self.send(grads, *a, Tensor::new(x.shape().to_vec(), da)?);
                self.send(grads, *b, Tensor::new(y.shape().to_vec(), db)?);
            }
            Op::Scale(input, factor) => {
                self.send(grads, *input, gy.map(|g| g * *factor));
            }
            Op::Sum(input) => {
                let g = gy.data()[0];
                self.send(grads, *input, Tensor::full(self.value(*input).shape().to_vec(), g));
            }
            Op::SubsamplePad { input, stride } => {
                let x = self.value(*input);
                let (n, c, h, w) = rank4("subsample_pad", x)?;
                let (_, co, ho, wo) = rank4("subsample_pad", gy)?;
                let mut dx = vec![T::zero(); x.len()];
                let g = gy.data();
                for s in 0..n {
                    for ch in 0..c {
                        for i in 0..ho {
                            for j in 0..wo {
                                dx[((s * c + ch) * h + i * stride) * w + j * stride] = g[((s * co + ch) * ho + i) * wo + j];
                            }
                        }
                    }
                }
                self.send(grads, *input, Tensor::new(x.shape().to_vec(), dx)?);
            }
            Op::WeightedCrossEntropy {
                logits,
                labels,
                weights,
                probs,
            } => {
                let z = self.value(*logits);
                let (n, k) = (z.shape()[0], z.shape()[1]);
                let upstream = gy.data()[0] / T::of(n as f64);
                let mut dz = probs.clone();
                for (s, &label) in labels.iter().enumerate() {
                    let y = label - 1;
                    dz[s * k + y] = dz[s * k + y] - T::one();
                    let scale = upstream * weights[y];
                    for v in &mut dz[s * k..(s + 1) * k] {
                        *v = *v * scale;
                    }
                }
                self.send(grads, *logits, Tensor::new([n, k], dz)?);
            }
        }
        Ok(())
    }
}
