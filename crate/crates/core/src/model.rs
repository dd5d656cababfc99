//! Generative and recognition stacks built from [`LayerParams`].
//!
//! The generative stack stores its layers bottom-up: `layers[0]` is the
//! likelihood `p(x | z1)`, `layers[l]` is `p(z_l | z_{l+1})` and the last
//! layer is the top prior `p(z_L)`. The recognition stack `q(z | x)` also runs
//! bottom-up: `layers[0]` maps `x` to `z1`, `layers[l]` maps `z_l` to
//! `z_{l+1}`.

use std::ops::{Deref, DerefMut};

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, shape_err, Error, Result};
use crate::layers::{
    derivatives_unchecked, layer_log_prob, layer_reparam_sample, layer_sample, log_prob_unchecked, LayerKind,
    LayerParams, Vector,
};
use crate::numerics::{normalize_log_weights, RandomStream};

/// A flat parameter vector (θ or φ) in canonical layer order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

fn flatten(layers: &[LayerParams]) -> ParamVector {
    let mut out = Vec::with_capacity(layers.iter().map(LayerParams::num_params).sum());
    for l in layers {
        l.write_flat(&mut out);
    }
    ParamVector(out)
}

fn unflatten(layers: &mut [LayerParams], src: &[f64]) -> Result<()> {
    let total: usize = layers.iter().map(LayerParams::num_params).sum();
    ensure_len("parameter vector", src.len(), total)?;
    let mut off = 0;
    for l in layers {
        off += l.read_flat(&src[off..])?;
    }
    Ok(())
}

fn offsets(layers: &[LayerParams]) -> Vec<usize> {
    let mut acc = 0;
    layers
        .iter()
        .map(|l| {
            let o = acc;
            acc += l.num_params();
            o
        })
        .collect()
}

/// Hidden variables `z1..zL` (index 0 holds `z1`).
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub layers: Vec<Vector>,
    /// Standard-normal noise behind each reparameterized layer, when the
    /// state was drawn from a recognition stack with `VAE_REAL` layers.
    pub eps: Vec<Option<Vector>>,
}

impl HiddenState {
    pub fn new(layers: Vec<Vector>) -> Self {
        Self { layers, eps: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeModel {
    layers: Vec<LayerParams>,
}

impl GenerativeModel {
    /// Builds a stack from layers ordered likelihood first, top prior last.
    pub fn new(layers: Vec<LayerParams>) -> Result<Self> {
        let Some(top) = layers.last() else {
            return Err(shape_err("a generative model needs at least a top layer"));
        };
        if layers.len() < 2 {
            return Err(shape_err("a generative model needs a likelihood layer and a top layer"));
        }
        if !top.kind().is_top() {
            return Err(shape_err(format!("top layer must be a top kind, got {}", top.kind())));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].kind().is_top() {
                return Err(shape_err(format!("layer {l} is a top kind but is not the top layer")));
            }
            if pair[0].in_dim() != pair[1].out_dim() {
                return Err(shape_err(format!(
                    "layer {l} reads {} inputs but layer {} emits {}",
                    pair[0].in_dim(),
                    l + 1,
                    pair[1].out_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn data_dim(&self) -> usize {
        self.layers[0].out_dim()
    }

    pub fn num_hidden(&self) -> usize {
        self.layers.len() - 1
    }

    /// Widths of `z1..zL`.
    pub fn hidden_dims(&self) -> Vec<usize> {
        self.layers[1..].iter().map(LayerParams::out_dim).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(LayerParams::num_params).sum()
    }

    pub fn params(&self) -> ParamVector {
        flatten(&self.layers)
    }

    pub fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        unflatten(&mut self.layers, theta)
    }

    /// True when every layer is SBN-family: SBN below a factorized Bernoulli top.
    pub fn is_sbn_stack(&self) -> bool {
        let (top, rest) = self.layers.split_last().expect("validated non-empty");
        top.kind() == LayerKind::TopBernoulli && rest.iter().all(|l| l.kind() == LayerKind::Sbn)
    }

    fn check_state(&self, x: ArrayView1<f64>, z: &HiddenState) -> Result<()> {
        ensure_len("data vector", x.len(), self.data_dim())?;
        ensure_len("hidden layers", z.layers.len(), self.num_hidden())?;
        for (l, (zl, d)) in z.layers.iter().zip(self.hidden_dims()).enumerate() {
            ensure_len(format_args!("hidden layer {}", l + 1), zl.len(), d)?;
        }
        Ok(())
    }

    /// Input and output of layer `l` for the configuration `(x, z)`.
    fn io<'a>(&self, x: ArrayView1<'a, f64>, z: &'a HiddenState, empty: &'a Vector, l: usize) -> (ArrayView1<'a, f64>, ArrayView1<'a, f64>) {
        let output = if l == 0 { x } else { z.layers[l - 1].view() };
        let input = if l == self.num_hidden() { empty.view() } else { z.layers[l].view() };
        (input, output)
    }
}

/// Log-probability of each generative layer's term at `(x, z)`, likelihood first.
pub fn joint_log_prob_terms(g: &GenerativeModel, x: ArrayView1<f64>, z: &HiddenState) -> Result<Vec<f64>> {
    g.check_state(x, z)?;
    let empty = Vector::zeros(0);
    (0..g.layers.len())
        .map(|l| {
            let (input, output) = g.io(x, z, &empty, l);
            layer_log_prob(&g.layers[l], input, output)
        })
        .collect()
}

/// `log p(x, z | θ)`.
pub fn joint_log_prob(g: &GenerativeModel, x: ArrayView1<f64>, z: &HiddenState) -> Result<f64> {
    Ok(joint_log_prob_terms(g, x, z)?.iter().sum())
}

/// Adds `scale · ∂/∂θ log p(x, z | θ)` into `acc`.
pub fn accumulate_joint_grad(
    g: &GenerativeModel,
    x: ArrayView1<f64>,
    z: &HiddenState,
    scale: f64,
    acc: &mut [f64],
) -> Result<()> {
    g.check_state(x, z)?;
    ensure_len("gradient accumulator", acc.len(), g.num_params())?;
    let empty = Vector::zeros(0);
    for (l, off) in offsets(&g.layers).into_iter().enumerate() {
        let (input, output) = g.io(x, z, &empty, l);
        let d = crate::layers::layer_derivatives(&g.layers[l], input, output)?;
        d.params.accumulate_into(scale, &mut acc[off..]);
    }
    Ok(())
}

/// Gradients of `log p(x, z | θ)` with respect to each real-valued hidden
/// layer `z_l`, with every other variable held fixed.
pub(crate) fn joint_grad_hidden(g: &GenerativeModel, x: ArrayView1<f64>, z: &HiddenState) -> Result<Vec<Vector>> {
    g.check_state(x, z)?;
    let empty = Vector::zeros(0);
    let mut grads: Vec<Vector> = g.hidden_dims().into_iter().map(Vector::zeros).collect();
    for l in 0..g.layers.len() {
        let (input, output) = g.io(x, z, &empty, l);
        let d = derivatives_unchecked(&g.layers[l], input, output);
        if l < g.num_hidden() {
            grads[l] += &d.input;
        }
        if l > 0 {
            match d.output {
                Some(go) => grads[l - 1] += &go,
                None => {
                    return Err(Error::Capability(format!(
                        "generative layer {l} ({}) has binary output and cannot be reparameterized",
                        g.layers[l].kind()
                    )))
                }
            }
        }
    }
    Ok(grads)
}

/// Draws `(x, z)` top-down from the generative model.
pub fn ancestral_sample(g: &GenerativeModel, stream: &mut RandomStream) -> Result<(Vector, HiddenState)> {
    let mut current = Vector::zeros(0);
    let mut hidden = Vec::with_capacity(g.num_hidden());
    for layer in g.layers.iter().rev() {
        let next = layer_sample(layer, current.view(), stream)?;
        hidden.push(std::mem::replace(&mut current, next));
    }
    // `hidden` holds [empty, z_L, ..., z_1]; drop the empty top input and
    // restore bottom-up order.
    hidden.remove(0);
    hidden.reverse();
    Ok((current, HiddenState::new(hidden)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecognitionModel {
    layers: Vec<LayerParams>,
}

impl RecognitionModel {
    /// Builds a proposal stack from layers ordered `x → z1` first.
    pub fn new(layers: Vec<LayerParams>) -> Result<Self> {
        if layers.is_empty() {
            return Err(shape_err("a recognition model needs at least one layer"));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.kind().is_top() {
                return Err(shape_err(format!("recognition layer {l} cannot be a top kind")));
            }
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[1].in_dim() != pair[0].out_dim() {
                return Err(shape_err(format!(
                    "recognition layer {} reads {} inputs but layer {l} emits {}",
                    l + 1,
                    pair[1].in_dim(),
                    pair[0].out_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Checks that this stack proposes exactly the hidden layers of `g`.
    pub fn check_matches(&self, g: &GenerativeModel) -> Result<()> {
        if self.layers[0].in_dim() != g.data_dim() {
            return Err(shape_err(format!(
                "recognition model reads {} inputs, data has {}",
                self.layers[0].in_dim(),
                g.data_dim()
            )));
        }
        let ours: Vec<usize> = self.layers.iter().map(LayerParams::out_dim).collect();
        if ours != g.hidden_dims() {
            return Err(shape_err(format!(
                "recognition widths {ours:?} do not mirror generative hidden widths {:?}",
                g.hidden_dims()
            )));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(LayerParams::num_params).sum()
    }

    pub fn params(&self) -> ParamVector {
        flatten(&self.layers)
    }

    pub fn set_params(&mut self, phi: &[f64]) -> Result<()> {
        unflatten(&mut self.layers, phi)
    }

    pub fn is_reparameterizable(&self) -> bool {
        self.layers.iter().all(|l| l.kind() == LayerKind::VaeReal)
    }

    fn check_state(&self, x: ArrayView1<f64>, z: &HiddenState) -> Result<()> {
        ensure_len("data vector", x.len(), self.layers[0].in_dim())?;
        ensure_len("hidden layers", z.layers.len(), self.layers.len())?;
        for (l, (zl, layer)) in z.layers.iter().zip(&self.layers).enumerate() {
            ensure_len(format_args!("hidden layer {}", l + 1), zl.len(), layer.out_dim())?;
        }
        Ok(())
    }

    fn io<'a>(x: ArrayView1<'a, f64>, z: &'a HiddenState, l: usize) -> (ArrayView1<'a, f64>, ArrayView1<'a, f64>) {
        let input = if l == 0 { x } else { z.layers[l - 1].view() };
        (input, z.layers[l].view())
    }
}

/// Draws `z ~ q(z | x)` bottom-up, feeding each layer the sample below it.
/// Reparameterized layers record their noise in [`HiddenState::eps`].
pub fn recog_sample(r: &RecognitionModel, x: ArrayView1<f64>, stream: &mut RandomStream) -> Result<HiddenState> {
    ensure_len("data vector", x.len(), r.layers[0].in_dim())?;
    let mut layers: Vec<Vector> = Vec::with_capacity(r.layers.len());
    let mut eps = Vec::with_capacity(r.layers.len());
    for (l, layer) in r.layers.iter().enumerate() {
        let input = if l == 0 { x } else { layers[l - 1].view() };
        if layer.kind() == LayerKind::VaeReal {
            let e = Vector::from_iter((0..layer.out_dim()).map(|_| stream.standard_normal()));
            let (out, _) = layer_reparam_sample(layer, input, e.view())?;
            layers.push(out);
            eps.push(Some(e));
        } else {
            layers.push(layer_sample(layer, input, stream)?);
            eps.push(None);
        }
    }
    if eps.iter().all(Option::is_none) {
        eps.clear();
    }
    Ok(HiddenState { layers, eps })
}

/// `log q(z | x; φ)`.
pub fn recog_log_prob(r: &RecognitionModel, x: ArrayView1<f64>, z: &HiddenState) -> Result<f64> {
    r.check_state(x, z)?;
    let mut total = 0.0;
    for l in 0..r.layers.len() {
        let (input, output) = RecognitionModel::io(x, z, l);
        total += layer_log_prob(&r.layers[l], input, output)?;
    }
    Ok(total)
}

/// Adds `scale · ∂/∂φ log q(z | x; φ)` into `acc`.
pub fn accumulate_recog_grad(
    r: &RecognitionModel,
    x: ArrayView1<f64>,
    z: &HiddenState,
    scale: f64,
    acc: &mut [f64],
) -> Result<()> {
    r.check_state(x, z)?;
    ensure_len("gradient accumulator", acc.len(), r.num_params())?;
    for (l, off) in offsets(&r.layers).into_iter().enumerate() {
        let (input, output) = RecognitionModel::io(x, z, l);
        let d = derivatives_unchecked(&r.layers[l], input, output);
        d.params.accumulate_into(scale, &mut acc[off..]);
    }
    Ok(())
}

pub(crate) fn recog_offsets(r: &RecognitionModel) -> Vec<usize> {
    offsets(&r.layers)
}

pub(crate) fn recog_layer_io<'a>(x: ArrayView1<'a, f64>, z: &'a HiddenState, l: usize) -> (ArrayView1<'a, f64>, ArrayView1<'a, f64>) {
    RecognitionModel::io(x, z, l)
}

pub(crate) fn recog_log_prob_unchecked(r: &RecognitionModel, x: ArrayView1<f64>, z: &HiddenState) -> f64 {
    (0..r.layers.len())
        .map(|l| {
            let (input, output) = RecognitionModel::io(x, z, l);
            log_prob_unchecked(&r.layers[l], input, output)
        })
        .sum()
}

/// Hidden-state samples with their self-normalized importance weights.
#[derive(Debug, Clone)]
pub struct WeightedSampleSet {
    pub samples: Vec<HiddenState>,
    /// `log p(x, z_s | θ) - log q(z_s | x; φ)`.
    pub log_weights: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl WeightedSampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn effective_sample_size(&self) -> f64 {
        crate::numerics::effective_sample_size(&self.normalized)
    }

    pub fn max_weight(&self) -> f64 {
        self.normalized.iter().copied().fold(0.0, f64::max)
    }
}

/// Importance weights of `samples` (drawn from `r`) against `g`.
pub fn compute_weights(
    g: &GenerativeModel,
    r: &RecognitionModel,
    x: ArrayView1<f64>,
    samples: Vec<HiddenState>,
) -> Result<WeightedSampleSet> {
    if samples.is_empty() {
        return Err(Error::Domain("importance sampling needs at least one sample".into()));
    }
    let log_weights = samples
        .iter()
        .map(|z| Ok(joint_log_prob(g, x, z)? - recog_log_prob(r, x, z)?))
        .collect::<Result<Vec<f64>>>()?;
    let normalized = normalize_log_weights(&log_weights)?;
    Ok(WeightedSampleSet { samples, log_weights, normalized })
}

/// Draws `count` proposals from `r` and weights them against `g`.
pub fn draw_weighted(
    g: &GenerativeModel,
    r: &RecognitionModel,
    x: ArrayView1<f64>,
    count: usize,
    stream: &mut RandomStream,
) -> Result<WeightedSampleSet> {
    let samples = (0..count)
        .map(|_| recog_sample(r, x, stream))
        .collect::<Result<Vec<_>>>()?;
    compute_weights(g, r, x, samples)
}
