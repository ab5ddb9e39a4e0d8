//! U-net, S-net and W-net builders.
//!
//! All three share the same four-stage encoder (two 3x3 convolutions per
//! stage, channel ladder `b, 2b, 4b, 8b`, 2x2 max pooling between stages).
//! Decoders upsample, concatenate the matching encoder activation and apply
//! two 3x3 convolutions per stage, then a 1x1 convolution to two channels
//! followed by a sigmoid. S-net and W-net decoders additionally concatenate
//! the previous stage's upsampling output, itself upsampled to the current
//! resolution. W-net runs two such decoders on one shared encoder.
//!
//! The forward pass is written once against the [`Graph`] trait and executed
//! by three backends: [`TapeGraph`] for training, [`EagerGraph`] for
//! inference and [`ShapeGraph`] for shape audits without any arithmetic.

use std::collections::{BTreeMap, HashMap};
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, Padding};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Unet,
    Snet,
    Wnet,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Unet => "unet",
            Arch::Snet => "snet",
            Arch::Wnet => "wnet",
        })
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unet" | "u-net" => Ok(Arch::Unet),
            "snet" | "s-net" => Ok(Arch::Snet),
            "wnet" | "w-net" => Ok(Arch::Wnet),
            other => Err(Error::Config(format!("unknown arch `{other}`"))),
        }
    }
}

/// Segmentation target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Optic disc.
    Od,
    /// Exudates.
    Ex,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Od => "od",
            Task::Ex => "ex",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "od" => Ok(Task::Od),
            "ex" => Ok(Task::Ex),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

/// One decoder: the task it segments and its parameter-name prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Head {
    pub task: Task,
    pub prefix: &'static str,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Index of the foreground channel in each two-channel head output.
pub const FOREGROUND: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub input_size: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    pub leaky_slope: f64,
    pub dropout_rate: f64,
    pub normalization: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Target of the single decoder of U-net / S-net; ignored for W-net.
    pub single_task: Task,
}

impl ModelSpec {
    pub fn new(arch: Arch, input_size: usize) -> Self {
        ModelSpec {
            arch,
            input_size,
            in_channels: 3,
            base_channels: 32,
            leaky_slope: 0.01,
            dropout_rate: 0.2,
            normalization: true,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            single_task: Task::Ex,
        }
    }

    pub fn channel_ladder(&self) -> [usize; 4] {
        let b = self.base_channels;
        [b, 2 * b, 4 * b, 8 * b]
    }

    pub fn heads(&self) -> Vec<Head> {
        match self.arch {
            Arch::Wnet => vec![
                Head { task: Task::Od, prefix: "dec_a" },
                Head { task: Task::Ex, prefix: "dec_b" },
            ],
            Arch::Unet | Arch::Snet => vec![Head {
                task: self.single_task,
                prefix: "dec",
            }],
        }
    }

    pub fn tasks(&self) -> Vec<Task> {
        self.heads().iter().map(|h| h.task).collect()
    }

    fn dense_decoder(&self) -> bool {
        matches!(self.arch, Arch::Snet | Arch::Wnet)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 8 != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of 8",
                self.input_size
            )));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!("leaky_slope {} outside (0, 1)", self.leaky_slope)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return Err(Error::Config("invalid normalization momentum/eps".into()));
        }
        Ok(())
    }

    /// Every convolution in build order.
    pub fn conv_layers(&self) -> Vec<ConvLayer> {
        let ladder = self.channel_ladder();
        let mut layers = Vec::new();
        let mut c_in = self.in_channels;
        for (stage, &c) in ladder.iter().enumerate() {
            for j in 0..2 {
                layers.push(ConvLayer {
                    name: format!("enc.conv{}", 2 * stage + j + 1),
                    in_channels: if j == 0 { c_in } else { c },
                    out_channels: c,
                    kernel: 3,
                    normalized: self.normalization,
                });
            }
            c_in = c;
        }
        for head in self.heads() {
            let mut below = ladder[3];
            let mut prev_up: Option<usize> = None;
            for stage in 0..3 {
                let skip = ladder[2 - stage];
                let dense = if self.dense_decoder() { prev_up.unwrap_or(0) } else { 0 };
                let cat = below + skip + dense;
                for j in 0..2 {
                    layers.push(ConvLayer {
                        name: format!("{}.conv{}", head.prefix, 2 * stage + j + 1),
                        in_channels: if j == 0 { cat } else { skip },
                        out_channels: skip,
                        kernel: 3,
                        normalized: false,
                    });
                }
                prev_up = Some(below);
                below = skip;
            }
            layers.push(ConvLayer {
                name: format!("{}.conv7", head.prefix),
                in_channels: ladder[0],
                out_channels: 2,
                kernel: 1,
                normalized: false,
            });
        }
        layers
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// Followed by batch normalisation.
    pub normalized: bool,
}

impl ConvLayer {
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    fn norm_name(&self) -> String {
        self.name.replace("conv", "bn")
    }
}

/// Named parameter tensors, including normalisation running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

pub fn is_trainable(name: &str) -> bool {
    !(name.ends_with(".running_mean") || name.ends_with(".running_var"))
}

impl<T: Real> ModelParams<T> {
    pub fn from_map(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        ModelParams { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter().filter(|(k, _)| is_trainable(k))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.tensors
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Checks names and shapes against the spec.
    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        let expected = build_shapes(spec);
        for (name, shape) in &expected {
            let t = self.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("parameter", t.shape(), shape));
            }
        }
        if let Some(extra) = self.names().find(|n| !expected.contains_key(*n)) {
            return Err(Error::Config(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }
}

/// Parameter name → shape for a spec.
pub fn build_shapes(spec: &ModelSpec) -> BTreeMap<String, Vec<usize>> {
    let mut out = BTreeMap::new();
    for layer in spec.conv_layers() {
        out.insert(format!("{}.weight", layer.name), layer.weight_shape().to_vec());
        out.insert(format!("{}.bias", layer.name), vec![layer.out_channels]);
        if layer.normalized {
            let bn = layer.norm_name();
            for suffix in ["gamma", "beta", "running_mean", "running_var"] {
                out.insert(format!("{bn}.{suffix}"), vec![layer.out_channels]);
            }
        }
    }
    out
}

/// Standard deviation of the zero-mean Gaussian weight initialisation.
pub const INIT_STD: f64 = 0.01;

/// Fresh parameters: weights ~ N(0, 0.01^2), biases 0, gamma 1, beta 0,
/// running mean 0 and running variance 1.
pub fn build<T: Real, R: Rng>(spec: &ModelSpec, rng: &mut R) -> Result<ModelParams<T>> {
    spec.validate()?;
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    let mut tensors = BTreeMap::new();
    for layer in spec.conv_layers() {
        let shape = layer.weight_shape();
        let weight = Tensor::from_fn(&shape, |_| T::from_f64(normal.sample(rng)));
        tensors.insert(format!("{}.weight", layer.name), weight);
        tensors.insert(format!("{}.bias", layer.name), Tensor::zeros(&[layer.out_channels]));
        if layer.normalized {
            let bn = layer.norm_name();
            let c = [layer.out_channels];
            tensors.insert(format!("{bn}.gamma"), Tensor::ones(&c));
            tensors.insert(format!("{bn}.beta"), Tensor::zeros(&c));
            tensors.insert(format!("{bn}.running_mean"), Tensor::zeros(&c));
            tensors.insert(format!("{bn}.running_var"), Tensor::ones(&c));
        }
    }
    Ok(ModelParams { tensors })
}

/// Number of trainable scalars (running statistics excluded).
pub fn count_params<T: Real>(params: &ModelParams<T>) -> usize {
    params.trainable().map(|(_, t)| t.numel()).sum()
}

/// Trainable scalar count implied by a spec, without allocating parameters.
pub fn count_params_for(spec: &ModelSpec) -> usize {
    build_shapes(spec)
        .iter()
        .filter(|(k, _)| is_trainable(k))
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Execution backend for the network definition in [`forward_graph`].
pub trait Graph {
    type V;

    fn conv(&mut self, x: &Self::V, layer: &str, padding: Padding) -> Result<Self::V>;
    fn norm(&mut self, x: &Self::V, layer: &str) -> Result<Self::V>;
    fn leaky_relu(&mut self, x: &Self::V, slope: f64) -> Result<Self::V>;
    fn dropout(&mut self, x: &Self::V, rate: f64) -> Result<Self::V>;
    fn max_pool(&mut self, x: &Self::V) -> Result<Self::V>;
    fn upsample(&mut self, x: &Self::V) -> Result<Self::V>;
    fn concat(&mut self, xs: &[&Self::V]) -> Result<Self::V>;
    fn sigmoid(&mut self, x: &Self::V) -> Result<Self::V>;

    /// Called with every named layer output; used by shape audits.
    fn observe(&mut self, _label: &str, _x: &Self::V) {}
}

fn conv_block<G: Graph>(
    g: &mut G,
    spec: &ModelSpec,
    x: &G::V,
    layer: &str,
    normalized: bool,
) -> Result<G::V> {
    let y = g.conv(x, layer, Padding::Same)?;
    g.observe(layer, &y);
    let y = if normalized {
        g.norm(&y, &layer.replace("conv", "bn"))?
    } else {
        y
    };
    g.leaky_relu(&y, spec.leaky_slope)
}

/// The network definition. Returns one `[N, 2, S, S]` probability map per
/// head, in [`ModelSpec::heads`] order.
pub fn forward_graph<G: Graph>(g: &mut G, spec: &ModelSpec, input: &G::V) -> Result<Vec<G::V>> {
    let mut skips = Vec::with_capacity(3);
    let mut pooled: Option<G::V> = None;
    for stage in 0..4 {
        let x = pooled.as_ref().unwrap_or(input);
        let a = conv_block(g, spec, x, &format!("enc.conv{}", 2 * stage + 1), spec.normalization)?;
        let b = conv_block(g, spec, &a, &format!("enc.conv{}", 2 * stage + 2), spec.normalization)?;
        let b = g.dropout(&b, spec.dropout_rate)?;
        if stage < 3 {
            let p = g.max_pool(&b)?;
            g.observe(&format!("enc.pool{}", stage + 1), &p);
            skips.push(b);
            pooled = Some(p);
        } else {
            pooled = Some(b);
        }
    }
    let bottleneck = pooled.expect("four encoder stages");

    let mut outputs = Vec::new();
    for head in spec.heads() {
        let p = head.prefix;
        let mut prev_up: Option<G::V> = None;
        let mut h: Option<G::V> = None;
        for stage in 0..3 {
            let below = h.as_ref().unwrap_or(&bottleneck);
            let up = g.upsample(below)?;
            g.observe(&format!("{p}.up{}", stage + 1), &up);
            let skip = &skips[2 - stage];
            let dense = match (&prev_up, spec.dense_decoder()) {
                (Some(prev), true) => Some(g.upsample(prev)?),
                _ => None,
            };
            let cat = match &dense {
                Some(d) => g.concat(&[&up, skip, d])?,
                None => g.concat(&[&up, skip])?,
            };
            let a = conv_block(g, spec, &cat, &format!("{p}.conv{}", 2 * stage + 1), false)?;
            let b = conv_block(g, spec, &a, &format!("{p}.conv{}", 2 * stage + 2), false)?;
            h = Some(b);
            prev_up = Some(up);
        }
        let last = format!("{p}.conv7");
        let logits = g.conv(h.as_ref().expect("three decoder stages"), &last, Padding::Valid)?;
        g.observe(&last, &logits);
        outputs.push(g.sigmoid(&logits)?);
    }
    Ok(outputs)
}

fn check_input(spec: &ModelSpec, shape: &[usize]) -> Result<()> {
    let s = spec.input_size;
    match *shape {
        [_, c, h, w] if c == spec.in_channels && h == s && w == s => Ok(()),
        _ => Err(Error::InvalidArgument(format!(
            "network input must be N x {} x {s} x {s}, got {shape:?}",
            spec.in_channels
        ))),
    }
}

/// Records the forward pass on a tape. Parameters become leaves on first use.
pub struct TapeGraph<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    params: &'a mut ModelParams<T>,
    spec: ModelSpec,
    mode: Mode,
    dropout_seed: u64,
    dropout_calls: u64,
    vars: BTreeMap<String, Var>,
    logits: Vec<Var>,
}

impl<'a, T: Real> TapeGraph<'a, T> {
    /// In train mode normalisation uses batch statistics and updates the
    /// running statistics held in `params`.
    pub fn new(
        tape: &'a mut Tape<T>,
        params: &'a mut ModelParams<T>,
        spec: &ModelSpec,
        mode: Mode,
        dropout_seed: u64,
    ) -> Self {
        TapeGraph {
            tape,
            params,
            spec: spec.clone(),
            mode,
            dropout_seed,
            dropout_calls: 0,
            vars: BTreeMap::new(),
            logits: Vec::new(),
        }
    }

    fn var(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let v = self.tape.param(self.params.get(name)?.clone());
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameter leaves created so far, by name.
    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn into_param_vars(self) -> BTreeMap<String, Var> {
        self.vars
    }

    /// Pre-sigmoid head outputs, in head order.
    pub fn logits(&self) -> &[Var] {
        &self.logits
    }
}

impl<T: Real> Graph for TapeGraph<'_, T> {
    type V = Var;

    fn conv(&mut self, x: &Var, layer: &str, padding: Padding) -> Result<Var> {
        let w = self.var(&format!("{layer}.weight"))?;
        let b = self.var(&format!("{layer}.bias"))?;
        self.tape.conv2d(*x, w, Some(b), padding, 1)
    }

    fn norm(&mut self, x: &Var, layer: &str) -> Result<Var> {
        let gamma = self.var(&format!("{layer}.gamma"))?;
        let beta = self.var(&format!("{layer}.beta"))?;
        let eps = self.spec.bn_eps;
        match self.mode {
            Mode::Train => {
                let (y, mean, var) = self.tape.batch_norm_train(*x, gamma, beta, eps)?;
                let m = self.spec.bn_momentum;
                for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
                    let rs = self.params.get_mut(&format!("{layer}.{suffix}"))?;
                    for (r, b) in rs.data_mut().iter_mut().zip(batch) {
                        *r = T::from_f64(m * r.as_f64() + (1.0 - m) * b);
                    }
                }
                Ok(y)
            }
            Mode::Eval => {
                let rm = self.params.get(&format!("{layer}.running_mean"))?.clone();
                let rv = self.params.get(&format!("{layer}.running_var"))?.clone();
                self.tape.batch_norm_eval(*x, gamma, beta, &rm, &rv, eps)
            }
        }
    }

    fn leaky_relu(&mut self, x: &Var, slope: f64) -> Result<Var> {
        self.tape.leaky_relu(*x, slope)
    }

    fn dropout(&mut self, x: &Var, rate: f64) -> Result<Var> {
        self.dropout_calls += 1;
        let seed = self
            .dropout_seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(self.dropout_calls);
        self.tape.dropout(*x, rate, self.mode == Mode::Train, seed)
    }

    fn max_pool(&mut self, x: &Var) -> Result<Var> {
        self.tape.max_pool2x2(*x)
    }

    fn upsample(&mut self, x: &Var) -> Result<Var> {
        self.tape.upsample2x(*x)
    }

    fn concat(&mut self, xs: &[&Var]) -> Result<Var> {
        let vars: Vec<Var> = xs.iter().map(|v| **v).collect();
        self.tape.concat(&vars)
    }

    fn sigmoid(&mut self, x: &Var) -> Result<Var> {
        self.logits.push(*x);
        self.tape.sigmoid(*x)
    }
}

/// Result of [`forward_on_tape`].
#[derive(Clone, Debug)]
pub struct TapeForward {
    /// Head probabilities, `[N, 2, S, S]` each.
    pub outputs: Vec<Var>,
    /// The same heads before the sigmoid.
    pub logits: Vec<Var>,
    /// Parameter leaves by name.
    pub params: BTreeMap<String, Var>,
}

/// Tape forward pass.
pub fn forward_on_tape<T: Real>(
    tape: &mut Tape<T>,
    params: &mut ModelParams<T>,
    spec: &ModelSpec,
    input: Var,
    mode: Mode,
    dropout_seed: u64,
) -> Result<TapeForward> {
    check_input(spec, tape.shape(input))?;
    let mut g = TapeGraph::new(tape, params, spec, mode, dropout_seed);
    let outputs = forward_graph(&mut g, spec, &input)?;
    let logits = std::mem::take(&mut g.logits);
    Ok(TapeForward {
        outputs,
        logits,
        params: g.into_param_vars(),
    })
}

/// Direct inference in eval mode; intermediates are dropped as soon as they
/// are no longer needed.
pub struct EagerGraph<'a, T: Real> {
    params: &'a ModelParams<T>,
    eps: f64,
}

impl<T: Real> Graph for EagerGraph<'_, T> {
    type V = Tensor<T>;

    fn conv(&mut self, x: &Tensor<T>, layer: &str, padding: Padding) -> Result<Tensor<T>> {
        let w = self.params.get(&format!("{layer}.weight"))?;
        let b = self.params.get(&format!("{layer}.bias"))?;
        kernels::conv2d(x, w, Some(b), padding, 1)
    }

    fn norm(&mut self, x: &Tensor<T>, layer: &str) -> Result<Tensor<T>> {
        let p = |s: &str| self.params.get(&format!("{layer}.{s}"));
        kernels::batch_norm_eval(x, p("gamma")?, p("beta")?, p("running_mean")?, p("running_var")?, self.eps)
    }

    fn leaky_relu(&mut self, x: &Tensor<T>, slope: f64) -> Result<Tensor<T>> {
        Ok(kernels::leaky_relu(x, T::from_f64(slope)))
    }

    fn dropout(&mut self, x: &Tensor<T>, _rate: f64) -> Result<Tensor<T>> {
        Ok(x.clone())
    }

    fn max_pool(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(kernels::max_pool2x2(x)?.0)
    }

    fn upsample(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::upsample2x(x)
    }

    fn concat(&mut self, xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        kernels::concat_channels(xs)
    }

    fn sigmoid(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(kernels::sigmoid(x))
    }
}

/// Eval-mode forward pass on a `[N, C, S, S]` batch.
pub fn forward<T: Real>(params: &ModelParams<T>, spec: &ModelSpec, batch: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    check_input(spec, batch.shape())?;
    let mut g = EagerGraph {
        params,
        eps: spec.bn_eps,
    };
    let outs = forward_graph(&mut g, spec, batch)?;
    if outs.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("forward"));
    }
    Ok(outs)
}

/// Shape-only execution: validates wiring against parameter shapes and
/// records every observed layer output.
pub struct ShapeGraph {
    weights: HashMap<String, Vec<usize>>,
    pub trace: Vec<(String, Vec<usize>)>,
}

impl Graph for ShapeGraph {
    type V = Vec<usize>;

    fn conv(&mut self, x: &Vec<usize>, layer: &str, padding: Padding) -> Result<Vec<usize>> {
        let w = self
            .weights
            .get(&format!("{layer}.weight"))
            .ok_or_else(|| Error::MissingParameter(format!("{layer}.weight")))?;
        if x[1] != w[1] {
            return Err(Error::shape("conv2d", x, w));
        }
        let k = w[2];
        let (h, wd) = match padding {
            Padding::Same => (x[2], x[3]),
            Padding::Valid => (x[2] + 1 - k, x[3] + 1 - k),
        };
        Ok(vec![x[0], w[0], h, wd])
    }

    fn norm(&mut self, x: &Vec<usize>, _layer: &str) -> Result<Vec<usize>> {
        Ok(x.clone())
    }

    fn leaky_relu(&mut self, x: &Vec<usize>, _slope: f64) -> Result<Vec<usize>> {
        Ok(x.clone())
    }

    fn dropout(&mut self, x: &Vec<usize>, _rate: f64) -> Result<Vec<usize>> {
        Ok(x.clone())
    }

    fn max_pool(&mut self, x: &Vec<usize>) -> Result<Vec<usize>> {
        if x[2] % 2 != 0 || x[3] % 2 != 0 {
            return Err(Error::InvalidArgument(format!("max pooling needs even extents, got {x:?}")));
        }
        Ok(vec![x[0], x[1], x[2] / 2, x[3] / 2])
    }

    fn upsample(&mut self, x: &Vec<usize>) -> Result<Vec<usize>> {
        Ok(vec![x[0], x[1], 2 * x[2], 2 * x[3]])
    }

    fn concat(&mut self, xs: &[&Vec<usize>]) -> Result<Vec<usize>> {
        let first = xs[0];
        let mut c = 0;
        for x in xs {
            if (x[0], x[2], x[3]) != (first[0], first[2], first[3]) {
                return Err(Error::shape("concat", first, x));
            }
            c += x[1];
        }
        Ok(vec![first[0], c, first[2], first[3]])
    }

    fn sigmoid(&mut self, x: &Vec<usize>) -> Result<Vec<usize>> {
        Ok(x.clone())
    }

    fn observe(&mut self, label: &str, x: &Vec<usize>) {
        self.trace.push((label.to_string(), x.clone()));
    }
}

/// Output shape of every convolution, pooling and upsampling layer for a
/// single input image, in execution order, followed by the head outputs
/// (labelled `<prefix>.out`).
pub fn shape_trace(spec: &ModelSpec) -> Result<Vec<(String, Vec<usize>)>> {
    spec.validate()?;
    let weights = build_shapes(spec).into_iter().collect();
    let mut g = ShapeGraph {
        weights,
        trace: Vec::new(),
    };
    let s = spec.input_size;
    let outs = forward_graph(&mut g, spec, &vec![1, spec.in_channels, s, s])?;
    let mut trace = g.trace;
    for (head, out) in spec.heads().iter().zip(outs) {
        trace.push((format!("{}.out", head.prefix), out));
    }
    Ok(trace)
}

/// Per-task result of [`predict`].
#[derive(Clone, Debug, PartialEq)]
pub struct TaskPrediction {
    pub task: Task,
    /// Foreground probability, `[S, S]`.
    pub probs: Tensor<f32>,
    /// `probs >= threshold` as 0/1, `[S, S]`.
    pub mask: Tensor<f32>,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub tasks: Vec<TaskPrediction>,
    pub elapsed: Duration,
}

impl Prediction {
    pub fn get(&self, task: Task) -> Option<&TaskPrediction> {
        self.tasks.iter().find(|t| t.task == task)
    }
}

/// Eval-mode inference on one preprocessed `[C, S, S]` image.
pub fn predict<T: Real>(
    params: &ModelParams<T>,
    spec: &ModelSpec,
    image: &Tensor<f32>,
    threshold: f64,
) -> Result<Prediction> {
    let start = Instant::now();
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let batch = Tensor::<T>::new(shape, image.data().iter().map(|&v| T::from_f64(v as f64)).collect())?;
    let outs = forward(params, spec, &batch)?;
    let s = spec.input_size;
    let mut tasks = Vec::new();
    for (head, out) in spec.heads().iter().zip(outs) {
        let fg = kernels::slice_channels(&out, FOREGROUND, 1)?;
        let probs: Vec<f32> = fg.data().iter().map(|v| v.as_f64() as f32).collect();
        let mask = probs
            .iter()
            .map(|&p| if p as f64 >= threshold { 1.0 } else { 0.0 })
            .collect();
        tasks.push(TaskPrediction {
            task: head.task,
            probs: Tensor::new(vec![s, s], probs)?,
            mask: Tensor::new(vec![s, s], mask)?,
        });
    }
    Ok(Prediction {
        tasks,
        elapsed: start.elapsed(),
    })
}
