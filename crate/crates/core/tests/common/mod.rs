//! Independent oracles shared by the integration tests: exhaustive
//! enumeration of small binary models and central finite differences.

#![allow(dead_code)]

use dsmcmc::layers::{layer_log_prob, LayerKind, LayerParams, Vector};
use dsmcmc::model::{joint_log_prob, recog_log_prob, GenerativeModel, HiddenState, RecognitionModel};
use dsmcmc::numerics::{log_sum_exp, RandomStream};

/// All `2^n` bit vectors, in binary counting order.
pub fn all_bits(n: usize) -> Vec<Vector> {
    assert!(n <= 20);
    (0..1usize << n)
        .map(|code| Vector::from_iter((0..n).map(|i| ((code >> i) & 1) as f64)))
        .collect()
}

/// Every configuration of the hidden layers of `dims` (bottom first).
pub fn all_hidden(dims: &[usize]) -> Vec<HiddenState> {
    let total: usize = dims.iter().sum();
    all_bits(total)
        .into_iter()
        .map(|bits| {
            let mut off = 0;
            let layers = dims
                .iter()
                .map(|&d| {
                    let v = Vector::from_iter(bits.iter().skip(off).take(d).copied());
                    off += d;
                    v
                })
                .collect();
            HiddenState::new(layers)
        })
        .collect()
}

/// Fills every parameter with `N(0, sd²)` draws and re-applies the
/// autoregressive masks.
pub fn randomize(layer: &mut LayerParams, stream: &mut RandomStream, sd: f64) {
    for t in layer.tensors_mut() {
        t.iter_mut().for_each(|v| *v = sd * stream.standard_normal());
    }
    layer.mask_unused();
}

pub fn random_layer(kind: LayerKind, in_dim: usize, out_dim: usize, hidden: &[usize], stream: &mut RandomStream, sd: f64) -> LayerParams {
    let mut l = LayerParams::zeros(kind, in_dim, out_dim, hidden).unwrap();
    randomize(&mut l, stream, sd);
    l
}

pub fn hidden_for(kind: LayerKind) -> Vec<usize> {
    match kind {
        LayerKind::Nade | LayerKind::TopNade => vec![3],
        LayerKind::VaeBinary | LayerKind::VaeReal => vec![3, 2],
        _ => Vec::new(),
    }
}

/// Random SBN likelihood over `d` bits with one hidden layer of `h` units, a
/// factorized top, and an SBN recognition model.
pub fn random_sbn_pair(d: usize, h: usize, seed: u64, sd_g: f64, sd_r: f64) -> (GenerativeModel, RecognitionModel) {
    let mut s = RandomStream::new(seed);
    let g = GenerativeModel::new(vec![
        random_layer(LayerKind::Sbn, h, d, &[], &mut s, sd_g),
        random_layer(LayerKind::TopBernoulli, 0, h, &[], &mut s, sd_g),
    ])
    .unwrap();
    let r = RecognitionModel::new(vec![random_layer(LayerKind::Sbn, d, h, &[], &mut s, sd_r)]).unwrap();
    (g, r)
}

/// `log p(x)` by summing over every hidden configuration.
pub fn exact_log_marginal(g: &GenerativeModel, x: &Vector) -> f64 {
    let terms: Vec<f64> = all_hidden(&g.hidden_dims())
        .iter()
        .map(|z| joint_log_prob(g, x.view(), z).unwrap())
        .collect();
    log_sum_exp(&terms).unwrap()
}

/// Exact posterior `p(z | x)` over every hidden configuration.
pub fn exact_posterior(g: &GenerativeModel, x: &Vector) -> Vec<(HiddenState, f64)> {
    let zs = all_hidden(&g.hidden_dims());
    let logs: Vec<f64> = zs.iter().map(|z| joint_log_prob(g, x.view(), z).unwrap()).collect();
    let lse = log_sum_exp(&logs).unwrap();
    zs.into_iter().zip(logs).map(|(z, l)| (z, (l - lse).exp())).collect()
}

/// Central differences of `f` with respect to every coordinate of `at`.
pub fn finite_diff(at: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = at.to_vec();
    (0..at.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `∂θ log p(x)`, which equals the posterior expectation of
/// `∂θ log p(x, z)`, by finite differences of the enumerated marginal.
pub fn exact_theta_grad(g: &GenerativeModel, x: &Vector) -> Vec<f64> {
    let mut work = g.clone();
    finite_diff(&g.params(), 1e-5, |theta| {
        work.set_params(theta).unwrap();
        exact_log_marginal(&work, x)
    })
}

/// `E_{p(z|x)}[∂φ log q(z | x)]` by finite differences with the posterior
/// held fixed.
pub fn exact_phi_grad(g: &GenerativeModel, r: &RecognitionModel, x: &Vector) -> Vec<f64> {
    let post = exact_posterior(g, x);
    let mut work = r.clone();
    finite_diff(&r.params(), 1e-5, |phi| {
        work.set_params(phi).unwrap();
        post.iter().map(|(z, p)| p * recog_log_prob(&work, x.view(), z).unwrap()).sum()
    })
}

pub fn rel_l2(est: &[f64], exact: &[f64]) -> f64 {
    let num: f64 = est.iter().zip(exact).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let den: f64 = exact.iter().map(|b| b * b).sum::<f64>().sqrt();
    num / den
}

/// Sum of `exp(layer_log_prob)` over every binary output.
pub fn layer_mass(layer: &LayerParams, input: &Vector) -> f64 {
    all_bits(layer.out_dim())
        .iter()
        .map(|y| layer_log_prob(layer, input.view(), y.view()).unwrap().exp())
        .sum()
}

/// The fixed SBN teacher used by the end-to-end tests: 16 visible bits,
/// 8 hidden bits.
pub fn teacher(seed: u64) -> GenerativeModel {
    let mut s = RandomStream::new(seed);
    let mut w = random_layer(LayerKind::Sbn, 8, 16, &[], &mut s, 1.5);
    if let LayerParams::Sbn { b, .. } = &mut w {
        b.mapv_inplace(|v| v / 3.0);
    }
    let top = random_layer(LayerKind::TopBernoulli, 0, 8, &[], &mut s, 1.0);
    GenerativeModel::new(vec![w, top]).unwrap()
}

/// `n` ancestral samples of `g` as a dataset.
pub fn draw_dataset(g: &GenerativeModel, n: usize, seed: u64, split: dsmcmc::data::Split) -> dsmcmc::data::Dataset {
    let mut s = RandomStream::new(seed);
    let rows: Vec<Vector> = (0..n).map(|_| dsmcmc::model::ancestral_sample(g, &mut s).unwrap().0).collect();
    dsmcmc::data::Dataset::from_rows(&rows, split, Some((4, 4))).unwrap()
}

/// Mean exact log-likelihood of `ds` under `g`.
pub fn exact_mean_loglik(g: &GenerativeModel, ds: &dsmcmc::data::Dataset) -> f64 {
    (0..ds.len()).map(|n| exact_log_marginal(g, &ds.row(n).to_owned())).sum::<f64>() / ds.len() as f64
}

/// Mean log-likelihood of `test` under independent Bernoulli pixels whose
/// probabilities are the exact pixel marginals of `g`, by enumeration of its
/// hidden states.
pub fn independent_baseline(g: &GenerativeModel, test: &dsmcmc::data::Dataset) -> f64 {
    let d = g.data_dim();
    let mut p = vec![0.0; d];
    for z in all_hidden(&g.hidden_dims()) {
        // p(z) is the joint with the likelihood term removed
        let terms = dsmcmc::model::joint_log_prob_terms(g, Vector::zeros(d).view(), &z).unwrap();
        let pz = terms[1..].iter().sum::<f64>().exp();
        for (j, pj) in p.iter_mut().enumerate() {
            let mut on = Vector::zeros(d);
            on[j] = 1.0;
            let lp1 = dsmcmc::layers::layer_unit_log_probs(&g.layers()[0], z.layers[0].view(), on.view()).unwrap()[j];
            *pj += pz * lp1.exp();
        }
    }
    (0..test.len())
        .map(|i| {
            test.row(i)
                .iter()
                .zip(&p)
                .map(|(&x, &pj)| if x == 1.0 { pj.ln() } else { (1.0 - pj).ln() })
                .sum::<f64>()
        })
        .sum::<f64>()
        / test.len() as f64
}
