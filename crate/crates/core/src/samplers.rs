//! Parameter-space dynamics and the hidden-unit Gibbs sampler.
//!
//! * [`sgnht_step`]: multivariate SGNHT in its reformulated form, with
//!   `u = λp`, `η = λ²`, `α = λξ` and `a = Aλ`;
//! * [`adam_step`]: Adam ascent for the proposal parameters;
//! * [`gibbs_sweep`]: single-site Gibbs updates of every hidden unit of a
//!   sigmoid belief network given the data.

use ndarray::{ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::layers::{LayerParams, Vector};
use crate::model::{GenerativeModel, HiddenState};
use crate::numerics::{sigmoid, softplus, RandomStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgnhtState {
    pub u: Vec<f64>,
    pub alpha: Vec<f64>,
    pub eta: f64,
    pub a: f64,
}

/// `u ~ N(0, ηI)`, `α = a·1`.
pub fn sgnht_init(dim: usize, eta: f64, a: f64, stream: &mut RandomStream) -> Result<SgnhtState> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::Domain(format!("SGNHT step size must be positive, got {eta}")));
    }
    if !(a >= 0.0) || !a.is_finite() {
        return Err(Error::Domain(format!("SGNHT momentum decay must be non-negative, got {a}")));
    }
    let sd = eta.sqrt();
    let u = (0..dim).map(|_| sd * stream.standard_normal()).collect();
    Ok(SgnhtState { u, alpha: vec![a; dim], eta, a })
}

/// One SGNHT update.
///
/// Moves `θ ← θ + u` first, evaluates `grad_potential` at the new position,
/// then updates `u ← u − α⊙u − η∇U + N(0, 2aη)` and `α ← α + u⊙u − η`.
/// On a non-finite gradient or state the step is abandoned and neither
/// `state` nor `theta` is modified.
pub fn sgnht_step<F>(
    state: &mut SgnhtState,
    theta: &mut [f64],
    grad_potential: F,
    stream: &mut RandomStream,
) -> Result<()>
where
    F: FnOnce(&[f64]) -> Result<Vec<f64>>,
{
    ensure_len("SGNHT momentum", state.u.len(), theta.len())?;
    ensure_len("SGNHT thermostat", state.alpha.len(), theta.len())?;
    let moved: Vec<f64> = theta.iter().zip(&state.u).map(|(t, u)| t + u).collect();
    let grad = grad_potential(&moved)?;
    ensure_len("potential gradient", grad.len(), theta.len())?;
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Divergence(format!("potential gradient coordinate {i} is {}", grad[i])));
    }

    let noise_sd = (2.0 * state.a * state.eta).sqrt();
    let mut u_new = Vec::with_capacity(theta.len());
    let mut alpha_new = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let mut u = state.u[i] - state.alpha[i] * state.u[i] - state.eta * grad[i];
        if noise_sd > 0.0 {
            u += noise_sd * stream.standard_normal();
        }
        alpha_new.push(state.alpha[i] + (u * u - state.eta));
        u_new.push(u);
    }
    if moved.iter().chain(&u_new).chain(&alpha_new).any(|v| !v.is_finite()) {
        return Err(Error::Divergence("SGNHT state became non-finite".into()));
    }
    theta.copy_from_slice(&moved);
    state.u = u_new;
    state.alpha = alpha_new;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub eta_prime: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(dim: usize, eta_prime: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self { m: vec![0.0; dim], v: vec![0.0; dim], t: 0, eta_prime, beta1, beta2, epsilon }
    }
}

/// One bias-corrected Adam step along the ascent direction `grad`.
pub fn adam_step(state: &mut AdamState, phi: &mut [f64], grad: &[f64]) -> Result<()> {
    ensure_len("Adam first moment", state.m.len(), phi.len())?;
    ensure_len("Adam gradient", grad.len(), phi.len())?;
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Divergence(format!("proposal gradient coordinate {i} is {}", grad[i])));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powf(state.t as f64);
    let c2 = 1.0 - b2.powf(state.t as f64);
    for i in 0..phi.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        phi[i] += state.eta_prime * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

/// Weight matrix and bias of the SBN-family layer emitting `z_l`.
fn sbn_parts(layer: &LayerParams) -> Result<(Option<&ndarray::Array2<f64>>, &Vector)> {
    match layer {
        LayerParams::Sbn { w, b } => Ok((Some(w), b)),
        LayerParams::TopBernoulli { b } => Ok((None, b)),
        other => Err(Error::Capability(format!(
            "Gibbs sampling supports SBN stacks only, found a {} layer",
            other.kind()
        ))),
    }
}

fn check_sbn(g: &GenerativeModel) -> Result<()> {
    if g.is_sbn_stack() {
        Ok(())
    } else {
        Err(Error::Capability("Gibbs sampling supports SBN stacks with a factorized Bernoulli top only".into()))
    }
}

/// Logit of `p(z_l,i = 1 | everything else)` given the pre-activations
/// `below = W^(l-1) z_l + b^(l-1)` of the layer under `z_l`.
fn conditional_logit(
    prior_logit: f64,
    w_below: &ndarray::Array2<f64>,
    below: &Vector,
    lower: ArrayView1<f64>,
    unit: usize,
    current: f64,
) -> f64 {
    let col = w_below.column(unit);
    let mut delta = 0.0;
    for ((&a, &w), &y) in below.iter().zip(col.iter()).zip(lower.iter()) {
        let a0 = a - w * current;
        let a1 = a0 + w;
        delta += y * w - softplus(a1) + softplus(a0);
    }
    prior_logit + delta
}

fn prior_logits(g: &GenerativeModel, z: &HiddenState, l: usize) -> Result<Vector> {
    let (w, b) = sbn_parts(&g.layers()[l])?;
    Ok(match w {
        Some(w) => w.dot(&z.layers[l]) + b,
        None => b.clone(),
    })
}

fn lower_of<'a>(x: ArrayView1<'a, f64>, z: &'a HiddenState, l: usize) -> ArrayView1<'a, f64> {
    if l == 1 {
        x
    } else {
        z.layers[l - 2].view()
    }
}

fn check_state(g: &GenerativeModel, x: ArrayView1<f64>, z: &HiddenState) -> Result<()> {
    ensure_len("data vector", x.len(), g.data_dim())?;
    ensure_len("hidden layers", z.layers.len(), g.num_hidden())?;
    for (l, (zl, d)) in z.layers.iter().zip(g.hidden_dims()).enumerate() {
        ensure_len(format_args!("hidden layer {}", l + 1), zl.len(), d)?;
    }
    Ok(())
}

/// `p(z_l,i = 1 | x, all other hidden units)` for hidden layer `l` (1-based).
pub fn gibbs_conditional(g: &GenerativeModel, x: ArrayView1<f64>, z: &HiddenState, l: usize, unit: usize) -> Result<f64> {
    check_sbn(g)?;
    check_state(g, x, z)?;
    if l == 0 || l > g.num_hidden() || unit >= z.layers[l - 1].len() {
        return Err(Error::Shape(format!("no hidden unit {unit} in layer {l}")));
    }
    let prior = prior_logits(g, z, l)?;
    let (Some(w_below), b_below) = sbn_parts(&g.layers()[l - 1])? else {
        unreachable!("only the top layer lacks weights")
    };
    let zl = &z.layers[l - 1];
    let below = w_below.dot(zl) + b_below;
    let lower = lower_of(x, z, l);
    Ok(sigmoid(conditional_logit(prior[unit], w_below, &below, lower, unit, zl[unit])))
}

/// Resamples every hidden unit once, layer by layer from `z1` upward and in
/// index order within a layer.
pub fn gibbs_sweep(g: &GenerativeModel, x: ArrayView1<f64>, z: &HiddenState, stream: &mut RandomStream) -> Result<HiddenState> {
    check_sbn(g)?;
    check_state(g, x, z)?;
    let mut next = z.clone();
    for l in 1..=g.num_hidden() {
        let prior = prior_logits(g, &next, l)?;
        let (Some(w_below), b_below) = sbn_parts(&g.layers()[l - 1])? else {
            unreachable!("only the top layer lacks weights")
        };
        let (head, tail) = next.layers.split_at_mut(l - 1);
        let zl = &mut tail[0];
        let lower = if l == 1 { x } else { head[l - 2].view() };
        let mut below = w_below.dot(&*zl) + b_below;
        for i in 0..zl.len() {
            let old = zl[i];
            let p = sigmoid(conditional_logit(prior[i], w_below, &below, lower, i, old));
            let new = stream.bit(p);
            if new != old {
                below.scaled_add(new - old, &w_below.index_axis(Axis(1), i));
                zl[i] = new;
            }
        }
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LayerKind;
    use crate::model::joint_log_prob;
    use approx::assert_abs_diff_eq;

    #[test]
    fn init_sets_thermostat_and_momentum_scale() {
        let mut s = RandomStream::new(4);
        let st = sgnht_init(100_000, 0.02, 0.1, &mut s).unwrap();
        assert!(st.alpha.iter().all(|&a| a == 0.1));
        let var = st.u.iter().map(|u| u * u).sum::<f64>() / st.u.len() as f64;
        assert!((var - 0.02).abs() < 0.02 * 0.05);
        let again = sgnht_init(100_000, 0.02, 0.1, &mut RandomStream::new(4)).unwrap();
        assert_eq!(st, again);
        assert!(sgnht_init(3, 0.0, 0.1, &mut s).is_err());
    }

    #[test]
    fn scalar_update_arithmetic() {
        let mut st = SgnhtState { u: vec![0.1], alpha: vec![0.1], eta: 0.01, a: 0.0 };
        let mut theta = vec![0.0];
        let mut s = RandomStream::new(0);
        sgnht_step(&mut st, &mut theta, |_| Ok(vec![2.0]), &mut s).unwrap();
        assert_abs_diff_eq!(theta[0], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(st.u[0], 0.07, epsilon = 1e-15);
        assert_abs_diff_eq!(st.alpha[0], 0.0949, epsilon = 1e-15);
    }

    #[test]
    fn free_drift_without_noise_or_friction() {
        // u⊙u = η keeps the thermostat at zero
        let mut st = SgnhtState { u: vec![0.5, -0.5], alpha: vec![0.0, 0.0], eta: 0.25, a: 0.0 };
        let mut theta = vec![1.0, 1.0];
        let mut s = RandomStream::new(0);
        for k in 1..=5 {
            sgnht_step(&mut st, &mut theta, |t| Ok(vec![0.0; t.len()]), &mut s).unwrap();
            assert_eq!(st.u, vec![0.5, -0.5]);
            assert_eq!(st.alpha, vec![0.0, 0.0]);
            assert_abs_diff_eq!(theta[0], 1.0 + 0.5 * k as f64, epsilon = 1e-12);
            assert_abs_diff_eq!(theta[1], 1.0 - 0.5 * k as f64, epsilon = 1e-12);
        }
    }

    #[test]
    fn gradient_is_taken_at_the_moved_position() {
        let mut st = SgnhtState { u: vec![0.5], alpha: vec![0.0], eta: 0.1, a: 0.0 };
        let mut theta = vec![1.0];
        let mut seen = None;
        sgnht_step(&mut st, &mut theta, |t| {
            seen = Some(t[0]);
            Ok(vec![t[0]])
        }, &mut RandomStream::new(0))
        .unwrap();
        assert_eq!(seen, Some(1.5));
        assert_abs_diff_eq!(st.u[0], 0.5 - 0.1 * 1.5, epsilon = 1e-15);
    }

    #[test]
    fn divergent_gradient_leaves_state_untouched() {
        let mut st = SgnhtState { u: vec![0.1], alpha: vec![0.1], eta: 0.01, a: 0.1 };
        let before = st.clone();
        let mut theta = vec![0.5];
        let err = sgnht_step(&mut st, &mut theta, |_| Ok(vec![f64::NAN]), &mut RandomStream::new(0));
        assert!(matches!(err, Err(Error::Divergence(_))));
        assert_eq!(st, before);
        assert_eq!(theta, vec![0.5]);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut st = AdamState::new(3, 1e-2, 0.9, 0.999, 1e-10);
        let mut phi = vec![0.5, -1.0, 2.0];
        for _ in 0..10 {
            adam_step(&mut st, &mut phi, &[0.0; 3]).unwrap();
        }
        assert_eq!(phi, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn adam_first_step_has_size_eta() {
        let mut st = AdamState::new(3, 1e-3, 0.9, 0.999, 1e-10);
        let mut phi = vec![0.0; 3];
        let g = [0.5, -20.0, 1e-3];
        adam_step(&mut st, &mut phi, &g).unwrap();
        for (p, gi) in phi.iter().zip(g) {
            let expected = 1e-3 * gi.abs() / (gi.abs() + 1e-10);
            assert_abs_diff_eq!(p.abs(), expected, epsilon = 1e-15);
            assert_eq!(p.signum(), gi.signum());
            assert!((p.abs() - 1e-3).abs() < 1e-9);
        }
        assert!(matches!(
            adam_step(&mut st, &mut phi, &[f64::INFINITY, 0.0, 0.0]),
            Err(Error::Divergence(_))
        ));
    }

    #[test]
    fn adam_solves_quadratic() {
        let mut st = AdamState::new(1, 1e-2, 0.9, 0.999, 1e-10);
        let mut phi = vec![0.0];
        for _ in 0..10_000 {
            let g = -2.0 * (phi[0] - 3.0);
            adam_step(&mut st, &mut phi, &[g]).unwrap();
        }
        assert!((phi[0] - 3.0).abs() < 1e-3, "phi = {}", phi[0]);
    }

    #[test]
    fn adam_scale_equivariance() {
        let run = |c: f64| {
            let mut st = AdamState::new(1, 1e-3, 0.9, 0.999, 1e-10);
            let mut phi = vec![0.0];
            let mut last = 0.0;
            for _ in 0..1000 {
                let before = phi[0];
                adam_step(&mut st, &mut phi, &[0.7 * c]).unwrap();
                last = phi[0] - before;
            }
            last
        };
        assert!((run(5.0) / run(1.0) - 1.0).abs() < 0.01);
    }

    fn random_sbn(d: usize, h: usize, seed: u64) -> GenerativeModel {
        let mut layers = vec![
            LayerParams::zeros(LayerKind::Sbn, h, d, &[]).unwrap(),
            LayerParams::zeros(LayerKind::TopBernoulli, 0, h, &[]).unwrap(),
        ];
        let mut s = RandomStream::new(seed);
        for l in &mut layers {
            for t in l.tensors_mut() {
                t.iter_mut().for_each(|x| *x = s.standard_normal());
            }
        }
        GenerativeModel::new(layers).unwrap()
    }

    #[test]
    fn zero_model_conditionals_are_half() {
        let g = GenerativeModel::new(vec![
            LayerParams::zeros(LayerKind::Sbn, 3, 5, &[]).unwrap(),
            LayerParams::zeros(LayerKind::Sbn, 2, 3, &[]).unwrap(),
            LayerParams::zeros(LayerKind::TopBernoulli, 0, 2, &[]).unwrap(),
        ])
        .unwrap();
        let x = Vector::from(vec![1.0, 0.0, 1.0, 1.0, 0.0]);
        let z = HiddenState::new(vec![Vector::from(vec![1.0, 0.0, 1.0]), Vector::from(vec![0.0, 1.0])]);
        for (l, n) in [(1, 3), (2, 2)] {
            for i in 0..n {
                assert_abs_diff_eq!(gibbs_conditional(&g, x.view(), &z, l, i).unwrap(), 0.5, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn conditional_matches_two_point_enumeration() {
        let g = random_sbn(6, 4, 12);
        let x = Vector::from(vec![1.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        for code in 0..16usize {
            let z = HiddenState::new(vec![Vector::from_iter((0..4).map(|i| ((code >> i) & 1) as f64))]);
            for i in 0..4 {
                let mut on = z.clone();
                on.layers[0][i] = 1.0;
                let mut off = z.clone();
                off.layers[0][i] = 0.0;
                let l1 = joint_log_prob(&g, x.view(), &on).unwrap();
                let l0 = joint_log_prob(&g, x.view(), &off).unwrap();
                let exact = 1.0 / (1.0 + (l0 - l1).exp());
                let p = gibbs_conditional(&g, x.view(), &z, 1, i).unwrap();
                assert_abs_diff_eq!(p, exact, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rejects_non_sbn_stacks() {
        let g = GenerativeModel::new(vec![
            LayerParams::zeros(LayerKind::Darn, 2, 3, &[]).unwrap(),
            LayerParams::zeros(LayerKind::TopBernoulli, 0, 2, &[]).unwrap(),
        ])
        .unwrap();
        let z = HiddenState::new(vec![Vector::zeros(2)]);
        assert!(matches!(
            gibbs_sweep(&g, Vector::zeros(3).view(), &z, &mut RandomStream::new(0)),
            Err(Error::Capability(_))
        ));
    }
}
