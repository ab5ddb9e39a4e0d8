use super::kernels::{self, BatchNormCache, Padding};
use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::loss::{self, Reduction};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        padding: Padding,
        stride: usize,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    SliceChannels {
        input: Var,
        start: usize,
    },
    LeakyRelu {
        input: Var,
        slope: T,
    },
    Sigmoid {
        input: Var,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        cache: BatchNormCache<T>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Sum {
        input: Var,
    },
    WeightedBceLogits {
        logits: Var,
        labels: Vec<T>,
        batch: usize,
        lambda: f64,
        reduction: Reduction,
    },
    WeightedBce {
        probs: Var,
        labels: Vec<T>,
        batch: usize,
        lambda: f64,
        reduction: Reduction,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "max_pool2x2",
            Op::Upsample { .. } => "upsample2x",
            Op::Concat { .. } => "concat",
            Op::SliceChannels { .. } => "slice_channels",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Dropout { .. } => "dropout",
            Op::BatchNormTrain { .. } | Op::BatchNormEval { .. } => "batch_norm",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::WeightedBce { .. } => "class_balanced_bce",
            Op::WeightedBceLogits { .. } => "class_balanced_bce_logits",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Linear record of operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so every node's inputs precede it
/// and [`backward`](Tape::backward) simply walks the list in reverse.
/// Gradients persist only for leaves created with `requires_grad`; they
/// accumulate across `backward` calls until [`zero_grad`](Tape::zero_grad).
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    branches: Branches,
}

/// Which side of every kink the piecewise-linear ops took, in execution
/// order: one sign mask per leaky ReLU and one argmax list per max pool.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActivationPattern {
    leaky: Vec<Vec<bool>>,
    pools: Vec<Vec<usize>>,
}

impl ActivationPattern {
    pub fn is_empty(&self) -> bool {
        self.leaky.is_empty() && self.pools.is_empty()
    }
}

#[derive(Debug, Default)]
enum Branches {
    #[default]
    Live,
    Record(ActivationPattern),
    Replay {
        pattern: ActivationPattern,
        leaky: usize,
        pools: usize,
    },
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            branches: Branches::Live,
        }
    }

    /// A tape that keeps the branch choices of every leaky ReLU and max pool.
    pub fn recording() -> Self {
        Tape {
            branches: Branches::Record(ActivationPattern::default()),
            ..Self::new()
        }
    }

    /// A tape whose leaky ReLUs and max pools follow `pattern` instead of
    /// their inputs, which makes the forward pass smooth in the parameters.
    /// Such a tape only supports forward evaluation.
    pub fn replaying(pattern: ActivationPattern) -> Self {
        Tape {
            branches: Branches::Replay {
                pattern,
                leaky: 0,
                pools: 0,
            },
            ..Self::new()
        }
    }

    /// The pattern recorded so far, if this tape records one.
    pub fn pattern(&self) -> Option<&ActivationPattern> {
        match &self.branches {
            Branches::Record(p) => Some(p),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; `None` until a backward pass reaches it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        padding: Padding,
        stride: usize,
    ) -> Result<Var> {
        let out = kernels::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            padding,
            stride,
        )?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        self.push(
            out,
            &deps,
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
                stride,
            },
        )
    }

    pub fn max_pool2x2(&mut self, input: Var) -> Result<Var> {
        let (mut out, mut argmax) = kernels::max_pool2x2(self.value(input))?;
        match &mut self.branches {
            Branches::Live => {}
            Branches::Record(p) => p.pools.push(argmax.clone()),
            Branches::Replay { pattern, pools, .. } => {
                let fixed = pattern
                    .pools
                    .get(*pools)
                    .filter(|a| a.len() == argmax.len())
                    .ok_or_else(|| Error::InvalidArgument("activation pattern does not match the graph".into()))?;
                *pools += 1;
                argmax.clone_from(fixed);
                let x = self.nodes[input.0].value.data();
                let data = argmax.iter().map(|&i| x[i]).collect();
                out = Tensor::from_parts(out.shape().to_vec(), data);
            }
        }
        self.push(out, &[input], Op::MaxPool { input, argmax })
    }

    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let out = kernels::upsample2x(self.value(input))?;
        self.push(out, &[input], Op::Upsample { input })
    }

    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = kernels::concat_channels(&values)?;
        self.push(
            out,
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        )
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let out = kernels::slice_channels(self.value(input), start, len)?;
        self.push(out, &[input], Op::SliceChannels { input, start })
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Result<Var> {
        let slope = T::from_f64(slope);
        let mut out = kernels::leaky_relu(self.value(input), slope);
        let x = self.nodes[input.0].value.data();
        match &mut self.branches {
            Branches::Live => {}
            Branches::Record(p) => p.leaky.push(x.iter().map(|&v| v >= T::zero()).collect()),
            Branches::Replay { pattern, leaky, .. } => {
                let signs = pattern
                    .leaky
                    .get(*leaky)
                    .filter(|m| m.len() == x.len())
                    .ok_or_else(|| Error::InvalidArgument("activation pattern does not match the graph".into()))?;
                *leaky += 1;
                for ((o, &v), &pos) in out.data_mut().iter_mut().zip(x).zip(signs) {
                    *o = if pos { v } else { v * slope };
                }
            }
        }
        self.push(out, &[input], Op::LeakyRelu { input, slope })
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let out = kernels::sigmoid(self.value(input));
        self.push(out, &[input], Op::Sigmoid { input })
    }

    /// Inverted dropout; identity when `training` is false or `rate` is 0.
    pub fn dropout(&mut self, input: Var, rate: f64, training: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(input);
        }
        let x = self.value(input);
        let mask = kernels::dropout_mask::<T>(x.numel(), rate, seed)?;
        let data = x.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(out, &[input], Op::Dropout { input, mask })
    }

    /// Batch normalisation with batch statistics. Returns the output and the
    /// cache holding the batch mean and unbiased variance, from which callers
    /// update running statistics.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (out, cache) =
            kernels::batch_norm_train(self.value(input), self.value(gamma), self.value(beta), eps)?;
        let (mean, var) = (cache.batch_mean.clone(), cache.batch_var.clone());
        let v = self.push(
            out,
            &[input, gamma, beta],
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                cache,
            },
        )?;
        Ok((v, mean, var))
    }

    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<Var> {
        let out = kernels::batch_norm_eval(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
        )?;
        let inv_std = running_var
            .data()
            .iter()
            .map(|v| T::from_f64(1.0 / (v.as_f64() + eps).sqrt()))
            .collect();
        self.push(
            out,
            &[input, gamma, beta],
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean: running_mean.data().to_vec(),
                inv_std,
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("add", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(out, &[a, b], Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("mul", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(out, &[a, b], Op::Mul { a, b })
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let factor = T::from_f64(factor);
        let out = self.value(input).map(|v| v * factor);
        self.push(out, &[input], Op::Scale { input, factor })
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(input).sum());
        self.push(out, &[input], Op::Sum { input })
    }

    /// Class-balanced binary cross-entropy of `probs` (`[N, ...]`) against
    /// binary `labels` with the same element count.
    pub fn class_balanced_bce(
        &mut self,
        probs: Var,
        labels: &Tensor<T>,
        lambda: f64,
        reduction: Reduction,
    ) -> Result<Var> {
        let p = self.value(probs);
        if p.numel() != labels.numel() {
            return Err(Error::shape("class_balanced_bce", p.shape(), labels.shape()));
        }
        let batch = p.shape()[0];
        let value = loss::class_balanced_bce(p.data(), labels.data(), batch, lambda, reduction)?;
        self.push(
            Tensor::scalar(T::from_f64(value)),
            &[probs],
            Op::WeightedBce {
                probs,
                labels: labels.data().to_vec(),
                batch,
                lambda,
                reduction,
            },
        )
    }

    /// Class-balanced BCE from pre-sigmoid logits; see
    /// [`loss::class_balanced_bce_logits`].
    pub fn class_balanced_bce_logits(
        &mut self,
        logits: Var,
        labels: &Tensor<T>,
        lambda: f64,
        reduction: Reduction,
    ) -> Result<Var> {
        let z = self.value(logits);
        if z.numel() != labels.numel() {
            return Err(Error::shape("class_balanced_bce_logits", z.shape(), labels.shape()));
        }
        let batch = z.shape()[0];
        let value = loss::class_balanced_bce_logits(z.data(), labels.data(), batch, lambda, reduction)?;
        self.push(
            Tensor::scalar(T::from_f64(value)),
            &[logits],
            Op::WeightedBceLogits {
                logits,
                labels: labels.data().to_vec(),
                batch,
                lambda,
                reduction,
            },
        )
    }

    /// Reverse pass from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        if matches!(self.branches, Branches::Replay { .. }) {
            return Err(Error::InvalidArgument("a replaying tape has no gradients".into()));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut work: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        work[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = work[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = &mut self.grads[idx];
                match slot {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    None => *slot = Some(g),
                }
                continue;
            }
            for (var, grad) in self.local_grads(idx, &g)? {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                accumulate(&mut work[var.0], grad);
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` for each of its inputs.
    fn local_grads(&self, idx: usize, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[idx];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
                stride,
            } => {
                let grads = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    g,
                    *padding,
                    *stride,
                    wants(*input),
                    wants(*weight),
                    bias.map_or(false, wants),
                )?;
                if let Some(d) = grads.input {
                    out.push((*input, d.into_data()));
                }
                if let Some(d) = grads.weight {
                    out.push((*weight, d.into_data()));
                }
                if let (Some(b), Some(d)) = (bias, grads.bias) {
                    out.push((*b, d.into_data()));
                }
            }
            Op::MaxPool { input, argmax } => {
                let n = self.value(*input).numel();
                out.push((*input, kernels::max_pool2x2_backward(n, argmax, g)));
            }
            Op::Upsample { input } => {
                out.push((*input, kernels::upsample2x_backward(self.shape(*input), g)));
            }
            Op::Concat { inputs } => {
                let shape = node.value.shape();
                let mut start = 0;
                for &v in inputs {
                    let c = self.shape(v)[1];
                    if wants(v) {
                        let mut dst = vec![T::zero(); self.value(v).numel()];
                        slice_from_concat(shape, start, c, g, &mut dst);
                        out.push((v, dst));
                    }
                    start += c;
                }
            }
            Op::SliceChannels { input, start } => {
                let mut dst = vec![T::zero(); self.value(*input).numel()];
                kernels::slice_channels_backward(self.shape(*input), *start, g, &mut dst);
                out.push((*input, dst));
            }
            Op::LeakyRelu { input, slope } => {
                out.push((
                    *input,
                    kernels::leaky_relu_backward(self.value(*input).data(), *slope, g),
                ));
            }
            Op::Sigmoid { input } => {
                out.push((*input, kernels::sigmoid_backward(node.value.data(), g)));
            }
            Op::Dropout { input, mask } => {
                out.push((*input, g.iter().zip(mask).map(|(&a, &m)| a * m).collect()));
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                cache,
            } => {
                let (dx, dg, db) = kernels::batch_norm_train_backward(
                    self.shape(*input),
                    self.value(*gamma).data(),
                    cache,
                    g,
                );
                out.push((*input, dx));
                out.push((*gamma, dg));
                out.push((*beta, db));
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let shape = self.shape(*input);
                let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
                let x = self.value(*input).data();
                let gam = self.value(*gamma).data();
                let mut dx = vec![T::zero(); g.len()];
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        let s = gam[ch] * inv_std[ch];
                        for i in base..base + plane {
                            dx[i] = g[i] * s;
                            dg[ch] = dg[ch] + g[i] * (x[i] - mean[ch]) * inv_std[ch];
                            db[ch] = db[ch] + g[i];
                        }
                    }
                }
                out.push((*input, dx));
                out.push((*gamma, dg));
                out.push((*beta, db));
            }
            Op::Add { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Mul { a, b } => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                out.push((*a, g.iter().zip(y).map(|(&u, &v)| u * v).collect()));
                out.push((*b, g.iter().zip(x).map(|(&u, &v)| u * v).collect()));
            }
            Op::Scale { input, factor } => {
                out.push((*input, g.iter().map(|&v| v * *factor).collect()));
            }
            Op::Sum { input } => {
                out.push((*input, vec![g[0]; self.value(*input).numel()]));
            }
            Op::WeightedBceLogits {
                logits,
                labels,
                batch,
                lambda,
                reduction,
            } => {
                out.push((
                    *logits,
                    loss::class_balanced_bce_logits_grad(
                        self.value(*logits).data(),
                        labels,
                        *batch,
                        *lambda,
                        *reduction,
                        g[0],
                    ),
                ));
            }
            Op::WeightedBce {
                probs,
                labels,
                batch,
                lambda,
                reduction,
            } => {
                out.push((
                    *probs,
                    loss::class_balanced_bce_grad(
                        self.value(*probs).data(),
                        labels,
                        *batch,
                        *lambda,
                        *reduction,
                        g[0],
                    ),
                ));
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, grad: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(grad),
    }
}

/// Copies channels `[start, start + len)` of a concatenated gradient into `dst`.
fn slice_from_concat<T: Real>(shape: &[usize], start: usize, len: usize, g: &[T], dst: &mut [T]) {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    for b in 0..n {
        let src = &g[(b * c + start) * plane..(b * c + start + len) * plane];
        dst[b * len * plane..(b + 1) * len * plane].copy_from_slice(src);
    }
}
