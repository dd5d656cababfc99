//! Stochastic gradient and likelihood estimators.

use ndarray::ArrayView1;

use crate::error::{ensure_len, Error, Result};
use crate::layers::{derivatives_unchecked, layer_reparam_backward, layer_reparam_sample, LayerKind, Vector};
use crate::model::{
    accumulate_joint_grad, accumulate_recog_grad, draw_weighted, joint_grad_hidden, joint_log_prob, recog_layer_io,
    recog_log_prob_unchecked, recog_offsets, GenerativeModel, HiddenState, ParamVector, RecognitionModel,
    WeightedSampleSet,
};
use crate::numerics::{log_sum_exp, normalize_log_weights, RandomStream};
use crate::priors::{log_prior_grad, PriorSpec};
use crate::samplers::gibbs_sweep;

/// A gradient together with the importance-weight diagnostics behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct GradEstimate {
    pub grad: ParamVector,
    pub ess: f64,
    pub max_weight: f64,
}

fn check_count(what: &str, n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::Domain(format!("{what} must be at least 1")))
    } else {
        Ok(())
    }
}

/// `Σ_s w̃_s ∂/∂θ log p(x, z_s | θ)` over an existing weighted set.
pub fn theta_grad_from_weighted(g: &GenerativeModel, x: ArrayView1<f64>, set: &WeightedSampleSet) -> Result<GradEstimate> {
    let mut acc = vec![0.0; g.num_params()];
    for (z, &w) in set.samples.iter().zip(&set.normalized) {
        if w > 0.0 {
            accumulate_joint_grad(g, x, z, w, &mut acc)?;
        }
    }
    Ok(GradEstimate { grad: acc.into(), ess: set.effective_sample_size(), max_weight: set.max_weight() })
}

/// `Σ_s w̃_s ∂/∂φ log q(z_s | x; φ)` over an existing weighted set.
pub fn phi_grad_from_weighted(r: &RecognitionModel, x: ArrayView1<f64>, set: &WeightedSampleSet) -> Result<GradEstimate> {
    let mut acc = vec![0.0; r.num_params()];
    for (z, &w) in set.samples.iter().zip(&set.normalized) {
        if w > 0.0 {
            accumulate_recog_grad(r, x, z, w, &mut acc)?;
        }
    }
    Ok(GradEstimate { grad: acc.into(), ess: set.effective_sample_size(), max_weight: set.max_weight() })
}

/// Self-normalized importance-sampling estimate of
/// `E_{p(z|x,θ)}[∂/∂θ log p(x, z | θ)]` with `S` proposals from `r`.
pub fn grad_theta_nais(
    g: &GenerativeModel,
    r: &RecognitionModel,
    x: ArrayView1<f64>,
    samples: usize,
    stream: &mut RandomStream,
) -> Result<GradEstimate> {
    check_count("sample count S", samples)?;
    let set = draw_weighted(g, r, x, samples, stream)?;
    theta_grad_from_weighted(g, x, &set)
}

/// Inclusive-KL proposal gradient `E_{p(z|x,θ)}[∂/∂φ log q(z | x; φ)]`,
/// estimated with the same kind of weighted set as [`grad_theta_nais`].
pub fn grad_phi_inclusive(
    g: &GenerativeModel,
    r: &RecognitionModel,
    x: ArrayView1<f64>,
    samples: usize,
    stream: &mut RandomStream,
) -> Result<GradEstimate> {
    check_count("sample count S", samples)?;
    let set = draw_weighted(g, r, x, samples, stream)?;
    phi_grad_from_weighted(r, x, &set)
}

/// Uniformly random binary hidden state, used to start Gibbs chains when no
/// proposal is available.
pub fn uniform_hidden(g: &GenerativeModel, stream: &mut RandomStream) -> HiddenState {
    HiddenState::new(
        g.hidden_dims()
            .into_iter()
            .map(|d| Vector::from_iter((0..d).map(|_| stream.bit(0.5))))
            .collect(),
    )
}

/// Gibbs-sample estimate of the θ-gradient: one chain started at `init`,
/// recording a state after every `sweeps` sweeps, `S` times.
pub fn grad_theta_gibbs(
    g: &GenerativeModel,
    x: ArrayView1<f64>,
    samples: usize,
    sweeps: usize,
    stream: &mut RandomStream,
    init: HiddenState,
) -> Result<GradEstimate> {
    check_count("sample count S", samples)?;
    if !g.is_sbn_stack() {
        return Err(Error::Capability("Gibbs gradient estimates need an SBN stack".into()));
    }
    let mut acc = vec![0.0; g.num_params()];
    let scale = 1.0 / samples as f64;
    let mut z = init;
    for _ in 0..samples {
        for _ in 0..sweeps {
            z = gibbs_sweep(g, x, &z, stream)?;
        }
        accumulate_joint_grad(g, x, &z, scale, &mut acc)?;
    }
    Ok(GradEstimate { grad: acc.into(), ess: samples as f64, max_weight: scale })
}

/// Per-sample pieces of the reparameterized objective.
struct ReparamDraw {
    log_weight: f64,
    grad: Vec<f64>,
}

fn reparam_draw(
    g: &GenerativeModel,
    r: &RecognitionModel,
    x: ArrayView1<f64>,
    offsets: &[usize],
    stream: &mut RandomStream,
) -> Result<ReparamDraw> {
    let mut tapes = Vec::with_capacity(r.layers().len());
    let mut layers: Vec<Vector> = Vec::with_capacity(r.layers().len());
    for (l, layer) in r.layers().iter().enumerate() {
        let eps = Vector::from_iter((0..layer.out_dim()).map(|_| stream.standard_normal()));
        let input = if l == 0 { x } else { layers[l - 1].view() };
        let (out, tape) = layer_reparam_sample(layer, input, eps.view())?;
        layers.push(out);
        tapes.push(tape);
    }
    let z = HiddenState::new(layers);
    let log_weight = joint_log_prob(g, x, &z)? - recog_log_prob_unchecked(r, x, &z);

    // dz[l] accumulates ∂ log w / ∂ z_{l+1} holding φ fixed
    let mut dz = joint_grad_hidden(g, x, &z)?;
    let mut grad = vec![0.0; r.num_params()];
    for l in 0..r.layers().len() {
        let (input, output) = recog_layer_io(x, &z, l);
        let d = derivatives_unchecked(&r.layers()[l], input, output);
        d.params.accumulate_into(-1.0, &mut grad[offsets[l]..]);
        if let Some(go) = &d.output {
            dz[l] -= go;
        }
        if l > 0 {
            dz[l - 1] -= &d.input;
        }
    }
    for l in (0..r.layers().len()).rev() {
        let (pg, gin) = layer_reparam_backward(&r.layers()[l], &tapes[l], dz[l].view())?;
        pg.accumulate_into(1.0, &mut grad[offsets[l]..]);
        if l > 0 {
            dz[l - 1] += &gin;
        }
    }
    Ok(ReparamDraw { log_weight, grad })
}

/// Reparameterized gradient of the `K`-sample importance-weighted bound,
/// `Σ_k w̃_k ∇_φ log w(x, z(ε_k, x, φ))`.
pub fn grad_phi_iwae(
    g: &GenerativeModel,
    r: &RecognitionModel,
    x: ArrayView1<f64>,
    k: usize,
    stream: &mut RandomStream,
) -> Result<GradEstimate> {
    check_count("sample count K", k)?;
    r.check_matches(g)?;
    if let Some(bad) = r.layers().iter().find(|l| l.kind() != LayerKind::VaeReal) {
        return Err(Error::Capability(format!(
            "IWAE proposal gradients need reparameterizable layers, found {}",
            bad.kind()
        )));
    }
    ensure_len("data vector", x.len(), g.data_dim())?;
    let offsets = recog_offsets(r);
    let draws = (0..k)
        .map(|_| reparam_draw(g, r, x, &offsets, stream))
        .collect::<Result<Vec<_>>>()?;
    let logw: Vec<f64> = draws.iter().map(|d| d.log_weight).collect();
    let w = normalize_log_weights(&logw)?;
    let mut acc = vec![0.0; r.num_params()];
    for (d, &wk) in draws.iter().zip(&w) {
        for (a, gi) in acc.iter_mut().zip(&d.grad) {
            *a += wk * gi;
        }
    }
    Ok(GradEstimate {
        grad: acc.into(),
        ess: crate::numerics::effective_sample_size(&w),
        max_weight: w.iter().copied().fold(0.0, f64::max),
    })
}

/// Mini-batch gradient of the potential energy,
/// `-∇ log p0(θ) - (N/|B|) Σ_{n∈B} grad_n`.
pub fn potential_grad(prior: &PriorSpec, theta: &[f64], dataset_size: usize, per_x: &[GradEstimate]) -> Result<Vec<f64>> {
    if per_x.is_empty() {
        return Err(Error::Domain("potential gradient needs a non-empty batch".into()));
    }
    let scale = dataset_size as f64 / per_x.len() as f64;
    let mut out = log_prior_grad(prior, theta)?;
    out.iter_mut().for_each(|v| *v = -*v);
    for est in per_x {
        ensure_len("per-datapoint gradient", est.grad.len(), theta.len())?;
        for (o, gi) in out.iter_mut().zip(est.grad.iter()) {
            *o -= scale * gi;
        }
    }
    Ok(out)
}

/// `log (1/K) Σ_k p(x, z_k) / q(z_k | x)` with `z_k ~ q`.
pub fn estimate_loglik(
    g: &GenerativeModel,
    r: &RecognitionModel,
    x: ArrayView1<f64>,
    k: usize,
    stream: &mut RandomStream,
) -> Result<f64> {
    check_count("sample count K", k)?;
    let set = draw_weighted(g, r, x, k, stream)?;
    let lse = log_sum_exp(&set.log_weights)?;
    if lse == f64::NEG_INFINITY {
        return Err(Error::DegenerateWeights);
    }
    Ok(lse - (k as f64).ln())
}

/// Elementwise average of parameter samples.
pub fn posterior_mean(samples: &[ParamVector]) -> Result<ParamVector> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Domain("posterior mean needs at least one sample".into()))?;
    let mut acc = vec![0.0; first.len()];
    for s in samples {
        ensure_len("posterior sample", s.len(), acc.len())?;
        for (a, v) in acc.iter_mut().zip(s.iter()) {
            *a += v;
        }
    }
    let m = samples.len() as f64;
    acc.iter_mut().for_each(|a| *a /= m);
    Ok(acc.into())
}
