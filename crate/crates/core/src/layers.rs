//! Conditional stochastic layers.
//!
//! A layer defines `p(out | in)` and provides ancestral sampling, the exact
//! log-probability of an output, and analytic gradients of that
//! log-probability with respect to its parameters, its input and (for
//! real-valued outputs) its output.
//!
//! Binary kinds share two evaluation paths:
//!
//! * logistic: `logit_i = b_i + C_i·in + Σ_{j<i} A_ij out_j` covers SBN
//!   (no `A`), DARN, the factorized Bernoulli top layer (no `C`, no `A`) and
//!   FVSBN (no `C`);
//! * NADE: a shared sigmoid hidden layer over the preceding outputs feeds a
//!   per-unit readout, covering the conditional NADE layer and the NADE top
//!   layer.
//!
//! VAE kinds run an internal tanh MLP and put either a Bernoulli or a
//! diagonal Gaussian head on top of it.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};

use crate::error::{ensure_len, shape_err, Error, Result};
use crate::numerics::{bernoulli_log_prob, sigmoid, RandomStream};

pub type Vector = Array1<f64>;
pub type Matrix = Array2<f64>;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Sbn,
    Darn,
    Nade,
    VaeBinary,
    VaeReal,
    TopBernoulli,
    TopFvsbn,
    TopNade,
    TopGaussian,
}

impl LayerKind {
    pub const ALL: [LayerKind; 9] = [
        LayerKind::Sbn,
        LayerKind::Darn,
        LayerKind::Nade,
        LayerKind::VaeBinary,
        LayerKind::VaeReal,
        LayerKind::TopBernoulli,
        LayerKind::TopFvsbn,
        LayerKind::TopNade,
        LayerKind::TopGaussian,
    ];

    pub fn is_top(self) -> bool {
        matches!(
            self,
            LayerKind::TopBernoulli | LayerKind::TopFvsbn | LayerKind::TopNade | LayerKind::TopGaussian
        )
    }

    pub fn has_binary_output(self) -> bool {
        !matches!(self, LayerKind::VaeReal | LayerKind::TopGaussian)
    }

    pub fn is_autoregressive(self) -> bool {
        matches!(
            self,
            LayerKind::Darn | LayerKind::Nade | LayerKind::TopFvsbn | LayerKind::TopNade
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Sbn => "sbn",
            LayerKind::Darn => "darn",
            LayerKind::Nade => "nade",
            LayerKind::VaeBinary => "vae_binary",
            LayerKind::VaeReal => "vae_real",
            LayerKind::TopBernoulli => "top_bernoulli",
            LayerKind::TopFvsbn => "top_fvsbn",
            LayerKind::TopNade => "top_nade",
            LayerKind::TopGaussian => "top_gaussian",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        LayerKind::ALL
            .into_iter()
            .find(|k| k.name() == lower)
            .ok_or_else(|| Error::Format(format!("unknown layer kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
}

/// One deterministic layer of a VAE layer's internal MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Matrix,
    pub b: Vector,
    pub activation: Activation,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Matrix::zeros((output, input)),
            b: Vector::zeros(output),
            activation: Activation::Tanh,
        }
    }
}

/// Parameters of one stochastic layer; the variant fixes the layer kind.
///
/// Matrices are stored `output × input`. For NADE kinds, `w` is
/// `hidden × out` (column `j` is added to the hidden pre-activation once
/// output `j` is known), `u` is `hidden × in`, `v` is `out × hidden` and `r`
/// is `out × in`. The in-layer matrices of DARN and FVSBN are square and only
/// their strictly lower triangle is read.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Sbn { w: Matrix, b: Vector },
    Darn { u: Matrix, w: Matrix, b: Vector },
    Nade { w: Matrix, u: Matrix, a: Vector, v: Matrix, r: Matrix, b: Vector },
    VaeBinary { mlp: Vec<Dense>, w: Matrix, b: Vector },
    VaeReal { mlp: Vec<Dense>, w_mu: Matrix, b_mu: Vector, w_sigma: Matrix, b_sigma: Vector },
    TopBernoulli { b: Vector },
    TopFvsbn { w: Matrix, b: Vector },
    TopNade { w: Matrix, a: Vector, v: Matrix, b: Vector },
    TopGaussian { dim: usize },
}

/// A gradient shaped exactly like the [`LayerParams`] it refers to.
pub type LayerGrad = LayerParams;

fn mat(m: &Matrix) -> &[f64] {
    m.as_slice().expect("parameter matrices are kept in standard layout")
}

fn mat_mut(m: &mut Matrix) -> &mut [f64] {
    m.as_slice_mut().expect("parameter matrices are kept in standard layout")
}

fn vecs(v: &Vector) -> &[f64] {
    v.as_slice().expect("parameter vectors are contiguous")
}

fn vecs_mut(v: &mut Vector) -> &mut [f64] {
    v.as_slice_mut().expect("parameter vectors are contiguous")
}

fn mlp_in_dim(mlp: &[Dense], head: &Matrix) -> usize {
    mlp.first().map_or(head.ncols(), |d| d.w.ncols())
}

impl LayerParams {
    /// Zero-valued parameters for `kind`.
    ///
    /// `hidden` lists the widths of the internal deterministic layers: the
    /// MLP widths for VAE kinds, or a single hidden width for NADE kinds.
    pub fn zeros(kind: LayerKind, in_dim: usize, out_dim: usize, hidden: &[usize]) -> Result<Self> {
        if out_dim == 0 {
            return Err(shape_err(format!("{kind} layer needs a positive output width")));
        }
        if kind.is_top() && in_dim != 0 {
            return Err(shape_err(format!("{kind} takes no input, got input width {in_dim}")));
        }
        if !kind.is_top() && in_dim == 0 {
            return Err(shape_err(format!("{kind} needs a positive input width")));
        }
        let nade_hidden = || -> Result<usize> {
            match hidden {
                [h] if *h > 0 => Ok(*h),
                _ => Err(shape_err(format!("{kind} needs exactly one positive hidden width"))),
            }
        };
        let mlp = || -> Vec<Dense> {
            let mut prev = in_dim;
            hidden
                .iter()
                .map(|&h| {
                    let d = Dense::zeros(prev, h);
                    prev = h;
                    d
                })
                .collect()
        };
        let feat = hidden.last().copied().unwrap_or(in_dim);
        Ok(match kind {
            LayerKind::Sbn => LayerParams::Sbn {
                w: Matrix::zeros((out_dim, in_dim)),
                b: Vector::zeros(out_dim),
            },
            LayerKind::Darn => LayerParams::Darn {
                u: Matrix::zeros((out_dim, in_dim)),
                w: Matrix::zeros((out_dim, out_dim)),
                b: Vector::zeros(out_dim),
            },
            LayerKind::Nade => {
                let h = nade_hidden()?;
                LayerParams::Nade {
                    w: Matrix::zeros((h, out_dim)),
                    u: Matrix::zeros((h, in_dim)),
                    a: Vector::zeros(h),
                    v: Matrix::zeros((out_dim, h)),
                    r: Matrix::zeros((out_dim, in_dim)),
                    b: Vector::zeros(out_dim),
                }
            }
            LayerKind::VaeBinary => LayerParams::VaeBinary {
                mlp: mlp(),
                w: Matrix::zeros((out_dim, feat)),
                b: Vector::zeros(out_dim),
            },
            LayerKind::VaeReal => LayerParams::VaeReal {
                mlp: mlp(),
                w_mu: Matrix::zeros((out_dim, feat)),
                b_mu: Vector::zeros(out_dim),
                w_sigma: Matrix::zeros((out_dim, feat)),
                b_sigma: Vector::zeros(out_dim),
            },
            LayerKind::TopBernoulli => LayerParams::TopBernoulli { b: Vector::zeros(out_dim) },
            LayerKind::TopFvsbn => LayerParams::TopFvsbn {
                w: Matrix::zeros((out_dim, out_dim)),
                b: Vector::zeros(out_dim),
            },
            LayerKind::TopNade => {
                let h = nade_hidden()?;
                LayerParams::TopNade {
                    w: Matrix::zeros((h, out_dim)),
                    a: Vector::zeros(h),
                    v: Matrix::zeros((out_dim, h)),
                    b: Vector::zeros(out_dim),
                }
            }
            LayerKind::TopGaussian => LayerParams::TopGaussian { dim: out_dim },
        })
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            LayerParams::Sbn { .. } => LayerKind::Sbn,
            LayerParams::Darn { .. } => LayerKind::Darn,
            LayerParams::Nade { .. } => LayerKind::Nade,
            LayerParams::VaeBinary { .. } => LayerKind::VaeBinary,
            LayerParams::VaeReal { .. } => LayerKind::VaeReal,
            LayerParams::TopBernoulli { .. } => LayerKind::TopBernoulli,
            LayerParams::TopFvsbn { .. } => LayerKind::TopFvsbn,
            LayerParams::TopNade { .. } => LayerKind::TopNade,
            LayerParams::TopGaussian { .. } => LayerKind::TopGaussian,
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            LayerParams::Sbn { w, .. } => w.ncols(),
            LayerParams::Darn { u, .. } | LayerParams::Nade { u, .. } => u.ncols(),
            LayerParams::VaeBinary { mlp, w, .. } => mlp_in_dim(mlp, w),
            LayerParams::VaeReal { mlp, w_mu, .. } => mlp_in_dim(mlp, w_mu),
            _ => 0,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            LayerParams::Sbn { b, .. }
            | LayerParams::Darn { b, .. }
            | LayerParams::Nade { b, .. }
            | LayerParams::VaeBinary { b, .. }
            | LayerParams::TopBernoulli { b }
            | LayerParams::TopFvsbn { b, .. }
            | LayerParams::TopNade { b, .. } => b.len(),
            LayerParams::VaeReal { b_mu, .. } => b_mu.len(),
            LayerParams::TopGaussian { dim } => *dim,
        }
    }

    /// Widths of internal deterministic layers (see [`LayerParams::zeros`]).
    pub fn hidden_widths(&self) -> Vec<usize> {
        match self {
            LayerParams::Nade { a, .. } | LayerParams::TopNade { a, .. } => vec![a.len()],
            LayerParams::VaeBinary { mlp, .. } | LayerParams::VaeReal { mlp, .. } => {
                mlp.iter().map(|d| d.b.len()).collect()
            }
            _ => Vec::new(),
        }
    }

    /// Parameter tensors in their canonical flattening order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        match self {
            LayerParams::Sbn { w, b } => vec![mat(w), vecs(b)],
            LayerParams::Darn { u, w, b } => vec![mat(u), mat(w), vecs(b)],
            LayerParams::Nade { w, u, a, v, r, b } => {
                vec![mat(w), mat(u), vecs(a), mat(v), mat(r), vecs(b)]
            }
            LayerParams::VaeBinary { mlp, w, b } => {
                let mut t: Vec<&[f64]> = mlp.iter().flat_map(|d| [mat(&d.w), vecs(&d.b)]).collect();
                t.extend([mat(w), vecs(b)]);
                t
            }
            LayerParams::VaeReal { mlp, w_mu, b_mu, w_sigma, b_sigma } => {
                let mut t: Vec<&[f64]> = mlp.iter().flat_map(|d| [mat(&d.w), vecs(&d.b)]).collect();
                t.extend([mat(w_mu), vecs(b_mu), mat(w_sigma), vecs(b_sigma)]);
                t
            }
            LayerParams::TopBernoulli { b } => vec![vecs(b)],
            LayerParams::TopFvsbn { w, b } => vec![mat(w), vecs(b)],
            LayerParams::TopNade { w, a, v, b } => vec![mat(w), vecs(a), mat(v), vecs(b)],
            LayerParams::TopGaussian { .. } => Vec::new(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            LayerParams::Sbn { w, b } => vec![mat_mut(w), vecs_mut(b)],
            LayerParams::Darn { u, w, b } => vec![mat_mut(u), mat_mut(w), vecs_mut(b)],
            LayerParams::Nade { w, u, a, v, r, b } => vec![
                mat_mut(w),
                mat_mut(u),
                vecs_mut(a),
                mat_mut(v),
                mat_mut(r),
                vecs_mut(b),
            ],
            LayerParams::VaeBinary { mlp, w, b } => {
                let mut t: Vec<&mut [f64]> = Vec::new();
                for d in mlp.iter_mut() {
                    t.push(mat_mut(&mut d.w));
                    t.push(vecs_mut(&mut d.b));
                }
                t.extend([mat_mut(w), vecs_mut(b)]);
                t
            }
            LayerParams::VaeReal { mlp, w_mu, b_mu, w_sigma, b_sigma } => {
                let mut t: Vec<&mut [f64]> = Vec::new();
                for d in mlp.iter_mut() {
                    t.push(mat_mut(&mut d.w));
                    t.push(vecs_mut(&mut d.b));
                }
                t.extend([mat_mut(w_mu), vecs_mut(b_mu), mat_mut(w_sigma), vecs_mut(b_sigma)]);
                t
            }
            LayerParams::TopBernoulli { b } => vec![vecs_mut(b)],
            LayerParams::TopFvsbn { w, b } => vec![mat_mut(w), vecs_mut(b)],
            LayerParams::TopNade { w, a, v, b } => {
                vec![mat_mut(w), vecs_mut(a), mat_mut(v), vecs_mut(b)]
            }
            LayerParams::TopGaussian { .. } => Vec::new(),
        }
    }

    /// Every weight matrix (biases excluded), used by initializers.
    pub fn weight_matrices_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            LayerParams::Sbn { w, .. } => vec![w],
            LayerParams::Darn { u, w, .. } => vec![u, w],
            LayerParams::Nade { w, u, v, r, .. } => vec![w, u, v, r],
            LayerParams::VaeBinary { mlp, w, .. } => {
                let mut m: Vec<&mut Matrix> = mlp.iter_mut().map(|d| &mut d.w).collect();
                m.push(w);
                m
            }
            LayerParams::VaeReal { mlp, w_mu, w_sigma, .. } => {
                let mut m: Vec<&mut Matrix> = mlp.iter_mut().map(|d| &mut d.w).collect();
                m.push(w_mu);
                m.push(w_sigma);
                m
            }
            LayerParams::TopFvsbn { w, .. } => vec![w],
            LayerParams::TopNade { w, v, .. } => vec![w, v],
            LayerParams::TopBernoulli { .. } | LayerParams::TopGaussian { .. } => Vec::new(),
        }
    }

    /// Zeroes in-layer weights on and above the diagonal, which no unit reads.
    pub fn mask_unused(&mut self) {
        if let LayerParams::Darn { w, .. } | LayerParams::TopFvsbn { w, .. } = self {
            for ((i, j), x) in w.indexed_iter_mut() {
                if j >= i {
                    *x = 0.0;
                }
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Appends the parameters to `out` in canonical order.
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for t in self.tensors() {
            out.extend_from_slice(t);
        }
    }

    /// Reads parameters from the front of `src`, returning how many were used.
    pub fn read_flat(&mut self, src: &[f64]) -> Result<usize> {
        let need = self.num_params();
        if src.len() < need {
            return Err(shape_err(format!(
                "{} layer needs {need} parameters, only {} left",
                self.kind(),
                src.len()
            )));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&src[off..off + t.len()]);
            off += t.len();
        }
        Ok(need)
    }

    /// Accumulates `scale * flat(self)` into `acc`.
    pub fn accumulate_into(&self, scale: f64, acc: &mut [f64]) {
        let mut off = 0;
        for t in self.tensors() {
            for (a, x) in acc[off..off + t.len()].iter_mut().zip(t) {
                *a += scale * x;
            }
            off += t.len();
        }
    }

    fn check_input(&self, input: ArrayView1<f64>) -> Result<()> {
        ensure_len(format_args!("{} layer input", self.kind()), input.len(), self.in_dim())
    }

    fn check_output(&self, output: ArrayView1<f64>) -> Result<()> {
        ensure_len(format_args!("{} layer output", self.kind()), output.len(), self.out_dim())?;
        if self.kind().has_binary_output() {
            if let Some(bad) = output.iter().find(|&&x| x != 0.0 && x != 1.0) {
                return Err(Error::Domain(format!(
                    "{} layer output must be binary, found {bad}",
                    self.kind()
                )));
            }
        } else if let Some(bad) = output.iter().find(|x| !x.is_finite()) {
            return Err(Error::Domain(format!("non-finite layer output {bad}")));
        }
        Ok(())
    }

    fn logistic(&self) -> Option<Logistic<'_>> {
        match self {
            LayerParams::Sbn { w, b } => Some(Logistic { cross: Some(w), in_layer: None, b }),
            LayerParams::Darn { u, w, b } => Some(Logistic { cross: Some(u), in_layer: Some(w), b }),
            LayerParams::TopBernoulli { b } => Some(Logistic { cross: None, in_layer: None, b }),
            LayerParams::TopFvsbn { w, b } => Some(Logistic { cross: None, in_layer: Some(w), b }),
            _ => None,
        }
    }

    fn nade(&self) -> Option<NadeView<'_>> {
        match self {
            LayerParams::Nade { w, u, a, v, r, b } => {
                Some(NadeView { w, u: Some(u), a, v, r: Some(r), b })
            }
            LayerParams::TopNade { w, a, v, b } => Some(NadeView { w, u: None, a, v, r: None, b }),
            _ => None,
        }
    }

    /// Mean and log-variance of a `VAE_REAL` layer at `input`.
    pub fn gaussian_moments(&self, input: ArrayView1<f64>) -> Result<(Vector, Vector)> {
        self.check_input(input)?;
        match self {
            LayerParams::VaeReal { mlp, w_mu, b_mu, w_sigma, b_sigma } => {
                let acts = mlp_forward(mlp, input);
                let f = acts.last().expect("mlp activations include the input");
                Ok((w_mu.dot(f) + b_mu, w_sigma.dot(f) + b_sigma))
            }
            LayerParams::TopGaussian { dim } => Ok((Vector::zeros(*dim), Vector::zeros(*dim))),
            _ => Err(Error::Capability(format!("{} layer has no Gaussian output", self.kind()))),
        }
    }
}

struct Logistic<'a> {
    cross: Option<&'a Matrix>,
    in_layer: Option<&'a Matrix>,
    b: &'a Vector,
}

impl Logistic<'_> {
    fn base(&self, input: ArrayView1<f64>) -> Vector {
        match self.cross {
            Some(c) => c.dot(&input) + self.b,
            None => self.b.clone(),
        }
    }

    fn in_layer_term(&self, i: usize, output: ArrayView1<f64>) -> f64 {
        match self.in_layer {
            Some(w) if i > 0 => w.slice(s![i, ..i]).dot(&output.slice(s![..i])),
            _ => 0.0,
        }
    }

    fn logits(&self, input: ArrayView1<f64>, output: ArrayView1<f64>) -> Vector {
        let mut l = self.base(input);
        if self.in_layer.is_some() {
            for i in 0..l.len() {
                l[i] += self.in_layer_term(i, output);
            }
        }
        l
    }
}

struct NadeView<'a> {
    w: &'a Matrix,
    u: Option<&'a Matrix>,
    a: &'a Vector,
    v: &'a Matrix,
    r: Option<&'a Matrix>,
    b: &'a Vector,
}

impl NadeView<'_> {
    fn hidden_base(&self, input: ArrayView1<f64>) -> Vector {
        match self.u {
            Some(u) => u.dot(&input) + self.a,
            None => self.a.clone(),
        }
    }

    fn skip(&self, input: ArrayView1<f64>) -> Vector {
        match self.r {
            Some(r) => r.dot(&input) + self.b,
            None => self.b.clone(),
        }
    }

    fn logits(&self, input: ArrayView1<f64>, output: ArrayView1<f64>) -> Vector {
        let mut acc = self.hidden_base(input);
        let mut l = self.skip(input);
        for i in 0..l.len() {
            let h = acc.mapv(sigmoid);
            l[i] += self.v.row(i).dot(&h);
            if output[i] != 0.0 {
                acc.scaled_add(output[i], &self.w.column(i));
            }
        }
        l
    }
}

/// Activations of the MLP, starting with the input itself.
fn mlp_forward(mlp: &[Dense], input: ArrayView1<f64>) -> Vec<Vector> {
    let mut acts = Vec::with_capacity(mlp.len() + 1);
    acts.push(input.to_owned());
    for d in mlp {
        let pre = d.w.dot(acts.last().expect("non-empty")) + &d.b;
        acts.push(match d.activation {
            Activation::Tanh => pre.mapv(f64::tanh),
        });
    }
    acts
}

/// Backpropagates `grad_feat` (gradient w.r.t. the MLP output) into `grads`
/// and returns the gradient w.r.t. the MLP input.
fn mlp_backward(mlp: &[Dense], acts: &[Vector], grads: &mut [Dense], grad_feat: Vector) -> Vector {
    let mut g = grad_feat;
    for k in (0..mlp.len()).rev() {
        let out = &acts[k + 1];
        let dpre = match mlp[k].activation {
            Activation::Tanh => &g * &out.mapv(|h| 1.0 - h * h),
        };
        grads[k].w += &outer(&dpre, &acts[k]);
        grads[k].b += &dpre;
        g = mlp[k].w.t().dot(&dpre);
    }
    g
}

fn outer(a: &Vector, b: &Vector) -> Matrix {
    let col = a.view().insert_axis(Axis(1));
    let row = b.view().insert_axis(Axis(0));
    &col * &row
}

fn gaussian_log_density(z: ArrayView1<f64>, mu: &Vector, logvar: &Vector) -> f64 {
    z.iter()
        .zip(mu)
        .zip(logvar)
        .map(|((&z, &m), &lv)| -HALF_LN_2PI - 0.5 * lv - 0.5 * (z - m).powi(2) * (-lv).exp())
        .sum()
}

/// Draws `out` from the layer's conditional distribution given `input`.
pub fn layer_sample(params: &LayerParams, input: ArrayView1<f64>, stream: &mut RandomStream) -> Result<Vector> {
    layer_sample_clamped(params, input, None, stream)
}

/// Like [`layer_sample`], but positions with `Some(v)` in `clamp` are fixed
/// to `v` instead of drawn. Autoregressive kinds condition later units on
/// the clamped values.
pub fn layer_sample_clamped(
    params: &LayerParams,
    input: ArrayView1<f64>,
    clamp: Option<&[Option<f64>]>,
    stream: &mut RandomStream,
) -> Result<Vector> {
    params.check_input(input)?;
    let n = params.out_dim();
    if let Some(c) = clamp {
        ensure_len("clamp mask", c.len(), n)?;
    }
    let fixed = |i: usize| clamp.and_then(|c| c[i]);

    if let Some(lg) = params.logistic() {
        let base = lg.base(input);
        let mut out = Vector::zeros(n);
        for i in 0..n {
            out[i] = match fixed(i) {
                Some(v) => v,
                None => {
                    let logit = base[i] + lg.in_layer_term(i, out.view());
                    stream.bit(sigmoid(logit))
                }
            };
        }
        return Ok(out);
    }
    if let Some(nv) = params.nade() {
        let mut acc = nv.hidden_base(input);
        let skip = nv.skip(input);
        let mut out = Vector::zeros(n);
        for i in 0..n {
            out[i] = match fixed(i) {
                Some(v) => v,
                None => {
                    let h = acc.mapv(sigmoid);
                    stream.bit(sigmoid(nv.v.row(i).dot(&h) + skip[i]))
                }
            };
            if out[i] != 0.0 {
                acc.scaled_add(out[i], &nv.w.column(i));
            }
        }
        return Ok(out);
    }
    match params {
        LayerParams::VaeBinary { mlp, w, b } => {
            let acts = mlp_forward(mlp, input);
            let logits = w.dot(acts.last().expect("non-empty")) + b;
            Ok(Vector::from_iter(
                logits.iter().enumerate().map(|(i, &l)| fixed(i).unwrap_or_else(|| stream.bit(sigmoid(l)))),
            ))
        }
        LayerParams::VaeReal { .. } | LayerParams::TopGaussian { .. } => {
            let (mu, logvar) = params.gaussian_moments(input)?;
            Ok(Vector::from_iter((0..n).map(|i| {
                fixed(i).unwrap_or_else(|| mu[i] + (0.5 * logvar[i]).exp() * stream.standard_normal())
            })))
        }
        _ => unreachable!("every kind is covered above"),
    }
}

/// Exact `log p(output | input)`, summed over output units.
pub fn layer_log_prob(params: &LayerParams, input: ArrayView1<f64>, output: ArrayView1<f64>) -> Result<f64> {
    params.check_input(input)?;
    params.check_output(output)?;
    Ok(log_prob_unchecked(params, input, output))
}

/// Per-unit terms `log p(out_i | out_<i, input)` of a binary layer.
pub fn layer_unit_log_probs(params: &LayerParams, input: ArrayView1<f64>, output: ArrayView1<f64>) -> Result<Vector> {
    params.check_input(input)?;
    params.check_output(output)?;
    let logits = if let Some(lg) = params.logistic() {
        lg.logits(input, output)
    } else if let Some(nv) = params.nade() {
        nv.logits(input, output)
    } else if let LayerParams::VaeBinary { mlp, w, b } = params {
        let acts = mlp_forward(mlp, input);
        w.dot(acts.last().expect("non-empty")) + b
    } else {
        return Err(Error::Capability(format!("{} layer has real-valued output", params.kind())));
    };
    Ok(Vector::from_iter(logits.iter().zip(output).map(|(&l, &y)| bernoulli_log_prob(y, l))))
}

pub(crate) fn log_prob_unchecked(params: &LayerParams, input: ArrayView1<f64>, output: ArrayView1<f64>) -> f64 {
    let bern = |logits: Vector| -> f64 {
        logits.iter().zip(output).map(|(&l, &y)| bernoulli_log_prob(y, l)).sum()
    };
    if let Some(lg) = params.logistic() {
        return bern(lg.logits(input, output));
    }
    if let Some(nv) = params.nade() {
        return bern(nv.logits(input, output));
    }
    match params {
        LayerParams::VaeBinary { mlp, w, b } => {
            let acts = mlp_forward(mlp, input);
            bern(w.dot(acts.last().expect("non-empty")) + b)
        }
        LayerParams::VaeReal { mlp, w_mu, b_mu, w_sigma, b_sigma } => {
            let acts = mlp_forward(mlp, input);
            let f = acts.last().expect("non-empty");
            gaussian_log_density(output, &(w_mu.dot(f) + b_mu), &(w_sigma.dot(f) + b_sigma))
        }
        LayerParams::TopGaussian { .. } => output.iter().map(|z| -HALF_LN_2PI - 0.5 * z * z).sum(),
        _ => unreachable!("every kind is covered above"),
    }
}

/// All first derivatives of `log p(output | input)`.
#[derive(Debug, Clone)]
pub struct LayerDerivatives {
    pub params: LayerGrad,
    pub input: Vector,
    /// Present only for real-valued outputs.
    pub output: Option<Vector>,
}

/// Analytic gradient of [`layer_log_prob`] with respect to the parameters.
pub fn layer_grad_params(params: &LayerParams, input: ArrayView1<f64>, output: ArrayView1<f64>) -> Result<LayerGrad> {
    Ok(layer_derivatives(params, input, output)?.params)
}

/// Gradients of [`layer_log_prob`] with respect to parameters, input and,
/// for real-valued kinds, output.
pub fn layer_derivatives(
    params: &LayerParams,
    input: ArrayView1<f64>,
    output: ArrayView1<f64>,
) -> Result<LayerDerivatives> {
    params.check_input(input)?;
    params.check_output(output)?;
    Ok(derivatives_unchecked(params, input, output))
}

pub(crate) fn derivatives_unchecked(
    params: &LayerParams,
    input: ArrayView1<f64>,
    output: ArrayView1<f64>,
) -> LayerDerivatives {
    let mut grad = params.zeros_like();
    let delta = |logits: &Vector| -> Vector {
        Vector::from_iter(output.iter().zip(logits).map(|(&y, &l)| y - sigmoid(l)))
    };

    if let Some(lg) = params.logistic() {
        let d = delta(&lg.logits(input, output));
        let out_owned = output.to_owned();
        let in_owned = input.to_owned();
        let grad_input = lg.cross.map_or_else(|| Vector::zeros(input.len()), |c| c.t().dot(&d));
        match &mut grad {
            LayerParams::Sbn { w, b } => {
                *w = outer(&d, &in_owned);
                b.assign(&d);
            }
            LayerParams::Darn { u, w, b } => {
                *u = outer(&d, &in_owned);
                fill_strictly_lower(w, &d, &out_owned);
                b.assign(&d);
            }
            LayerParams::TopBernoulli { b } => b.assign(&d),
            LayerParams::TopFvsbn { w, b } => {
                fill_strictly_lower(w, &d, &out_owned);
                b.assign(&d);
            }
            _ => unreachable!(),
        }
        return LayerDerivatives { params: grad, input: grad_input, output: None };
    }

    if let Some(nv) = params.nade() {
        let n = output.len();
        // Walk the units backwards, peeling each output off the hidden
        // pre-activation so that `acc` holds `c + W_{:,<i} out_{<i}` at unit i.
        let mut acc = nv.hidden_base(input) + nv.w.dot(&output);
        let skip = nv.skip(input);
        let mut delta = Vector::zeros(n);
        let mut suffix = Vector::zeros(nv.a.len());
        let mut gw = Matrix::zeros(nv.w.raw_dim());
        let mut gv = Matrix::zeros(nv.v.raw_dim());
        for i in (0..n).rev() {
            if output[i] != 0.0 {
                acc.scaled_add(-output[i], &nv.w.column(i));
            }
            let h = acc.mapv(sigmoid);
            let vi = nv.v.row(i);
            let d = output[i] - sigmoid(vi.dot(&h) + skip[i]);
            delta[i] = d;
            gv.row_mut(i).assign(&(&h * d));
            if output[i] != 0.0 {
                gw.column_mut(i).assign(&(&suffix * output[i]));
            }
            let dpre = Vector::from_iter(vi.iter().zip(&h).map(|(&v, &h)| d * v * h * (1.0 - h)));
            suffix += &dpre;
        }
        let in_owned = input.to_owned();
        let mut grad_input = Vector::zeros(input.len());
        if let (Some(u), Some(r)) = (nv.u, nv.r) {
            grad_input = u.t().dot(&suffix) + r.t().dot(&delta);
        }
        match &mut grad {
            LayerParams::Nade { w, u, a, v, r, b } => {
                *w = gw;
                *u = outer(&suffix, &in_owned);
                a.assign(&suffix);
                *v = gv;
                *r = outer(&delta, &in_owned);
                b.assign(&delta);
            }
            LayerParams::TopNade { w, a, v, b } => {
                *w = gw;
                a.assign(&suffix);
                *v = gv;
                b.assign(&delta);
            }
            _ => unreachable!(),
        }
        return LayerDerivatives { params: grad, input: grad_input, output: None };
    }

    match params {
        LayerParams::TopGaussian { .. } => LayerDerivatives {
            params: grad,
            input: Vector::zeros(0),
            output: Some(output.mapv(|z| -z)),
        },
        LayerParams::VaeBinary { mlp, w, b } => {
            let acts = mlp_forward(mlp, input);
            let f = acts.last().expect("non-empty");
            let d = delta(&(w.dot(f) + b));
            let LayerParams::VaeBinary { mlp: gmlp, w: gw, b: gb } = &mut grad else { unreachable!() };
            *gw = outer(&d, f);
            gb.assign(&d);
            let grad_input = mlp_backward(mlp, &acts, gmlp, w.t().dot(&d));
            LayerDerivatives { params: grad, input: grad_input, output: None }
        }
        LayerParams::VaeReal { mlp, w_mu, b_mu, w_sigma, b_sigma } => {
            let acts = mlp_forward(mlp, input);
            let f = acts.last().expect("non-empty");
            let mu = w_mu.dot(f) + b_mu;
            let logvar = w_sigma.dot(f) + b_sigma;
            let prec = logvar.mapv(|lv| (-lv).exp());
            let resid = &output - &mu;
            let d_mu = &resid * &prec;
            let d_lv = (&resid * &resid * &prec).mapv(|x| 0.5 * x - 0.5);
            let grad_output = d_mu.mapv(|x| -x);
            let grad_input = head_backward(&mut grad, mlp, &acts, w_mu, w_sigma, &d_mu, &d_lv);
            LayerDerivatives { params: grad, input: grad_input, output: Some(grad_output) }
        }
        _ => unreachable!("every kind is covered above"),
    }
}

/// Writes `δ_i out_j` for `j < i` into `w`.
fn fill_strictly_lower(w: &mut Matrix, delta: &Vector, output: &Vector) {
    for i in 1..delta.len() {
        let d = delta[i];
        w.slice_mut(s![i, ..i]).assign(&(&output.slice(s![..i]) * d));
    }
}

/// Gaussian-head backward pass shared by density gradients and
/// reparameterized sampling. Returns the gradient w.r.t. the layer input.
fn head_backward(
    grad: &mut LayerGrad,
    mlp: &[Dense],
    acts: &[Vector],
    w_mu: &Matrix,
    w_sigma: &Matrix,
    d_mu: &Vector,
    d_lv: &Vector,
) -> Vector {
    let f = acts.last().expect("non-empty");
    let LayerParams::VaeReal { mlp: gmlp, w_mu: gwm, b_mu: gbm, w_sigma: gws, b_sigma: gbs } = grad else {
        unreachable!()
    };
    *gwm += &outer(d_mu, f);
    *gbm += d_mu;
    *gws += &outer(d_lv, f);
    *gbs += d_lv;
    let grad_feat = w_mu.t().dot(d_mu) + w_sigma.t().dot(d_lv);
    mlp_backward(mlp, acts, gmlp, grad_feat)
}

/// Intermediate values of a reparameterized draw, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ReparamTape {
    acts: Vec<Vector>,
    logvar: Vector,
    eps: Vector,
    output: Vector,
}

impl ReparamTape {
    pub fn output(&self) -> &Vector {
        &self.output
    }

    pub fn eps(&self) -> &Vector {
        &self.eps
    }
}

/// `output = μ(input) + σ(input) ⊙ eps` for a `VAE_REAL` layer.
pub fn layer_reparam_sample(
    params: &LayerParams,
    input: ArrayView1<f64>,
    eps: ArrayView1<f64>,
) -> Result<(Vector, ReparamTape)> {
    let LayerParams::VaeReal { mlp, w_mu, b_mu, w_sigma, b_sigma } = params else {
        return Err(Error::Capability(format!("{} layer is not reparameterizable", params.kind())));
    };
    params.check_input(input)?;
    ensure_len("reparameterization noise", eps.len(), params.out_dim())?;
    let acts = mlp_forward(mlp, input);
    let f = acts.last().expect("non-empty");
    let mu = w_mu.dot(f) + b_mu;
    let logvar = w_sigma.dot(f) + b_sigma;
    let output = &mu + &(&logvar.mapv(|lv| (0.5 * lv).exp()) * &eps);
    let tape = ReparamTape { acts, logvar, eps: eps.to_owned(), output: output.clone() };
    Ok((output, tape))
}

/// Chain rule through a reparameterized draw: given `∂L/∂output`, returns
/// `∂L/∂params` and `∂L/∂input`.
pub fn layer_reparam_backward(
    params: &LayerParams,
    tape: &ReparamTape,
    upstream: ArrayView1<f64>,
) -> Result<(LayerGrad, Vector)> {
    let LayerParams::VaeReal { mlp, w_mu, w_sigma, .. } = params else {
        return Err(Error::Capability(format!("{} layer is not reparameterizable", params.kind())));
    };
    ensure_len("upstream gradient", upstream.len(), params.out_dim())?;
    let d_mu = upstream.to_owned();
    let d_lv = Vector::from_iter(
        upstream
            .iter()
            .zip(&tape.eps)
            .zip(&tape.logvar)
            .map(|((&g, &e), &lv)| 0.5 * g * e * (0.5 * lv).exp()),
    );
    let mut grad = params.zeros_like();
    let grad_input = head_backward(&mut grad, mlp, &tape.acts, w_mu, w_sigma, &d_mu, &d_lv);
    Ok((grad, grad_input))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn random_layer(kind: LayerKind, in_dim: usize, out_dim: usize, seed: u64) -> LayerParams {
        let hidden: Vec<usize> = match kind {
            LayerKind::Nade | LayerKind::TopNade => vec![3],
            LayerKind::VaeBinary | LayerKind::VaeReal => vec![4, 3],
            _ => vec![],
        };
        let mut p = LayerParams::zeros(kind, in_dim, out_dim, &hidden).unwrap();
        let mut s = RandomStream::new(seed);
        for t in p.tensors_mut() {
            for x in t.iter_mut() {
                *x = 0.8 * s.standard_normal();
            }
        }
        p
    }

    fn bits(n: usize, code: usize) -> Vector {
        Vector::from_iter((0..n).map(|i| ((code >> i) & 1) as f64))
    }

    fn in_dim_for(kind: LayerKind) -> usize {
        if kind.is_top() {
            0
        } else {
            3
        }
    }

    #[test]
    fn zero_sbn_is_uniform() {
        let p = LayerParams::zeros(LayerKind::Sbn, 3, 5, &[]).unwrap();
        let input = Vector::from(vec![1.0, 0.0, 1.0]);
        for code in 0..32 {
            let lp = layer_log_prob(&p, input.view(), bits(5, code).view()).unwrap();
            assert_abs_diff_eq!(lp, -5.0 * 2f64.ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn sbn_bias_example() {
        let mut p = LayerParams::zeros(LayerKind::Sbn, 2, 2, &[]).unwrap();
        if let LayerParams::Sbn { b, .. } = &mut p {
            b.fill(3f64.ln());
        }
        let lp = layer_log_prob(&p, Vector::zeros(2).view(), Vector::ones(2).view()).unwrap();
        assert_abs_diff_eq!(lp, 2.0 * 0.75f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(lp, -0.5754, epsilon = 1e-4);
    }

    #[test]
    fn vae_real_standard_normal_at_origin() {
        let p = LayerParams::zeros(LayerKind::VaeReal, 3, 4, &[5, 5]).unwrap();
        let lp = layer_log_prob(&p, Vector::ones(3).view(), Vector::zeros(4).view()).unwrap();
        assert_abs_diff_eq!(lp, -2.0 * (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-12);
    }

    #[test]
    fn zero_sbn_bias_gradient() {
        let p = LayerParams::zeros(LayerKind::Sbn, 3, 4, &[]).unwrap();
        let g = layer_grad_params(&p, Vector::ones(3).view(), Vector::ones(4).view()).unwrap();
        let LayerParams::Sbn { b, .. } = g else { panic!() };
        assert!(b.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn top_bernoulli_gradient() {
        let p = LayerParams::zeros(LayerKind::TopBernoulli, 0, 4, &[]).unwrap();
        let out = Vector::from(vec![0.0, 1.0, 0.0, 0.0]);
        let g = layer_grad_params(&p, Vector::zeros(0).view(), out.view()).unwrap();
        let LayerParams::TopBernoulli { b } = g else { panic!() };
        assert_eq!(b, &out - 0.5);
    }

    #[test]
    fn rejects_bad_shapes_and_values() {
        let p = LayerParams::zeros(LayerKind::Sbn, 3, 2, &[]).unwrap();
        assert!(matches!(
            layer_log_prob(&p, Vector::zeros(2).view(), Vector::zeros(2).view()),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            layer_log_prob(&p, Vector::zeros(3).view(), Vector::from(vec![0.5, 1.0]).view()),
            Err(Error::Domain(_))
        ));
        assert!(LayerParams::zeros(LayerKind::TopBernoulli, 2, 2, &[]).is_err());
        assert!(LayerParams::zeros(LayerKind::Sbn, 0, 2, &[]).is_err());
        assert!(LayerParams::zeros(LayerKind::Nade, 2, 2, &[]).is_err());
        let mut s = RandomStream::new(0);
        assert!(layer_sample(&p, Vector::zeros(1).view(), &mut s).is_err());
    }

    #[test]
    fn binary_kinds_normalize() {
        for kind in LayerKind::ALL.into_iter().filter(|k| k.has_binary_output()) {
            let n_in = in_dim_for(kind);
            let p = random_layer(kind, n_in, 6, 17);
            let input = bits(n_in, 0b101);
            let total: f64 = (0..64)
                .map(|c| layer_log_prob(&p, input.view(), bits(6, c).view()).unwrap().exp())
                .sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn autoregressive_masking() {
        for kind in LayerKind::ALL.into_iter().filter(|k| k.has_binary_output()) {
            let n_in = in_dim_for(kind);
            let p = random_layer(kind, n_in, 6, 23);
            let input = bits(n_in, 0b011);
            for code in 0..64 {
                let out = bits(6, code);
                let terms = layer_unit_log_probs(&p, input.view(), out.view()).unwrap();
                let total = layer_log_prob(&p, input.view(), out.view()).unwrap();
                assert_abs_diff_eq!(terms.sum(), total, epsilon = 1e-12);
                for j in 0..6 {
                    let mut flipped = out.clone();
                    flipped[j] = 1.0 - flipped[j];
                    let t2 = layer_unit_log_probs(&p, input.view(), flipped.view()).unwrap();
                    for i in 0..j {
                        assert_eq!(terms[i], t2[i], "{kind}: unit {i} read position {j}");
                    }
                    if !kind.is_autoregressive() {
                        for i in (j + 1)..6 {
                            assert_eq!(terms[i], t2[i], "{kind}: factorized units interact");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn sample_matches_bias() {
        let mut p = LayerParams::zeros(LayerKind::Sbn, 2, 3, &[]).unwrap();
        if let LayerParams::Sbn { b, .. } = &mut p {
            b.fill(3f64.ln());
        }
        let mut s = RandomStream::new(3);
        let n = 100_000;
        let mut counts = Vector::zeros(3);
        for _ in 0..n {
            counts += &layer_sample(&p, Vector::ones(2).view(), &mut s).unwrap();
        }
        let tol = 3.0 * (0.75f64 * 0.25 / n as f64).sqrt();
        for c in counts.iter() {
            assert!((c / n as f64 - 0.75).abs() < tol);
        }
    }

    #[test]
    fn top_gaussian_samples() {
        let p = LayerParams::zeros(LayerKind::TopGaussian, 0, 4, &[]).unwrap();
        let mut s = RandomStream::new(9);
        let n = 50_000;
        let mut sum = Vector::zeros(4);
        let mut sq = Vector::zeros(4);
        for _ in 0..n {
            let z = layer_sample(&p, Vector::zeros(0).view(), &mut s).unwrap();
            sum += &z;
            sq += &(&z * &z);
        }
        for i in 0..4 {
            assert!((sum[i] / n as f64).abs() < 0.02);
            assert!((sq[i] / n as f64 - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn clamped_positions_are_kept() {
        let p = random_layer(LayerKind::Nade, 3, 6, 4);
        let clamp = [Some(1.0), None, Some(0.0), None, None, Some(1.0)];
        let mut s = RandomStream::new(1);
        for _ in 0..50 {
            let out = layer_sample_clamped(&p, bits(3, 5).view(), Some(&clamp), &mut s).unwrap();
            assert_eq!((out[0], out[2], out[5]), (1.0, 0.0, 1.0));
        }
    }

    #[test]
    fn reparam_with_zero_noise_returns_mean() {
        let p = random_layer(LayerKind::VaeReal, 3, 2, 8);
        let input = Vector::from(vec![0.3, -0.1, 0.7]);
        let (mu, _) = p.gaussian_moments(input.view()).unwrap();
        let (out, _) = layer_reparam_sample(&p, input.view(), Vector::zeros(2).view()).unwrap();
        assert_eq!(out, mu);

        let mut q = p.clone();
        if let LayerParams::VaeReal { w_sigma, b_sigma, .. } = &mut q {
            w_sigma.fill(0.0);
            b_sigma.fill(0.0);
        }
        let eps = Vector::from(vec![0.4, -1.2]);
        let (mu, _) = q.gaussian_moments(input.view()).unwrap();
        let (out, _) = layer_reparam_sample(&q, input.view(), eps.view()).unwrap();
        assert_abs_diff_eq!((&out - &(&mu + &eps)).mapv(f64::abs).sum(), 0.0, epsilon = 1e-15);

        let sbn = LayerParams::zeros(LayerKind::Sbn, 3, 2, &[]).unwrap();
        assert!(matches!(
            layer_reparam_sample(&sbn, input.view(), eps.view()),
            Err(Error::Capability(_))
        ));
    }

    #[test]
    fn flatten_round_trip() {
        for kind in LayerKind::ALL {
            let p = random_layer(kind, in_dim_for(kind), 4, 2);
            let mut flat = Vec::new();
            p.write_flat(&mut flat);
            assert_eq!(flat.len(), p.num_params());
            let mut q = p.zeros_like();
            assert_eq!(q.read_flat(&flat).unwrap(), flat.len());
            assert_eq!(p, q);
        }
    }
}
