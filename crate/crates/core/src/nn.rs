//! Parameter storage and the small set of layers the network is built from.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{BnMode, BnState, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BnId(usize);

/// Named learnable tensors plus the running statistics of batch-norm layers.
///
/// Layer names are stable: they are the keys of the checkpoint format.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<(String, Tensor)>,
    norms: Vec<(String, BnState)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|(n, _)| *n != name),
            "duplicate parameter {name}"
        );
        self.params.push((name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn add_norm(&mut self, name: impl Into<String>, channels: usize) -> BnId {
        self.norms.push((name.into(), BnState::new(channels)));
        BnId(self.norms.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].0
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].1
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn norms(&self) -> impl Iterator<Item = (&str, &BnState)> {
        self.norms.iter().map(|(n, s)| (n.as_str(), s))
    }

    pub(crate) fn norm_mut(&mut self, name: &str) -> Option<&mut BnState> {
        self.norms
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
    }

    /// Binds every parameter onto `tape`.
    ///
    /// Parameters become differentiable leaves when `differentiable` is set
    /// and constants otherwise.
    pub fn session<'t, 's>(
        &'s mut self,
        tape: &'t Tape,
        mode: BnMode,
        differentiable: bool,
    ) -> Session<'t, 's> {
        let vars = self
            .params
            .iter()
            .map(|(_, t)| {
                if differentiable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Session {
            tape,
            vars,
            norms: &mut self.norms,
            mode,
        }
    }
}

/// One forward pass: the tape, bound parameters and batch-norm state.
pub struct Session<'t, 's> {
    tape: &'t Tape,
    vars: Vec<Var<'t>>,
    norms: &'s mut Vec<(String, BnState)>,
    mode: BnMode,
}

impl<'t> Session<'t, '_> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Rebinds one parameter, e.g. to a probe variable in a gradient check.
    pub fn bind(&mut self, id: ParamId, var: Var<'t>) {
        self.vars[id.0] = var;
    }

    pub fn constant(&self, value: Tensor) -> Var<'t> {
        self.tape.constant(value)
    }

    pub fn batch_norm(&mut self, x: Var<'t>, scale: ParamId, shift: ParamId, state: BnId) -> Result<Var<'t>> {
        let (g, b) = (self.vars[scale.0], self.vars[shift.0]);
        let mode = self.mode;
        x.batch_norm(g, b, &mut self.norms[state.0].1, mode)
    }

    /// Gradients of every parameter after `backward`, in store order.
    pub fn grads(&self) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| v.grad()).collect()
    }
}

/// Fan-in scaled uniform initialization, `U(-√(6/fan_in), √(6/fan_in))`.
pub fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound) as Real)
}

/// `U(-√(6/(fan_in+fan_out)), …)`, used for graph-convolution weights.
pub fn glorot_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(&[rows, cols], |_| rng.random_range(-bound..bound) as Real)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: ParamId,
    bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_uniform(rng, &[out_channels, in_channels, kernel, kernel], fan_in),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels])));
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn forward<'t>(&self, s: &Session<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        self.forward_with_bias(s, x, true)
    }

    /// Forward pass that optionally skips the bias term.
    pub fn forward_with_bias<'t>(&self, s: &Session<'t, '_>, x: Var<'t>, with_bias: bool) -> Result<Var<'t>> {
        let bias = if with_bias { self.bias.map(|b| s.param(b)) } else { None };
        x.conv2d(s.param(self.weight), bias, self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    scale: ParamId,
    shift: ParamId,
    state: BnId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm {
            scale: store.add(format!("{name}.scale"), Tensor::ones(&[channels])),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[channels])),
            state: store.add_norm(name, channels),
        }
    }

    pub fn forward<'t>(&self, s: &mut Session<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        s.batch_norm(x, self.scale, self.shift, self.state)
    }
}

/// Convolution, batch norm and an optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub norm: BatchNorm,
    pub relu: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
    ) -> Self {
        ConvBn {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), in_channels, out_channels, kernel, stride, false),
            norm: BatchNorm::new(store, &format!("{name}.bn"), out_channels),
            relu,
        }
    }

    pub fn forward<'t>(&self, s: &mut Session<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let y = self.conv.forward(s, x)?;
        let y = self.norm.forward(s, y)?;
        Ok(if self.relu { y.relu() } else { y })
    }
}
