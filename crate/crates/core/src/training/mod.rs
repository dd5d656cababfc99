//! The training loop: SGNHT updates of θ interleaved with Adam updates of
//! the proposal, validation-triggered posterior-sample collection and
//! checkpointing.

mod config;
mod manifest;

use std::fs;
use std::io::Write;
use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{Estimator, PhiObjective, TrainConfig, ENV_PREFIX, KEYS as CONFIG_KEYS};
pub use manifest::{LayerSpec, Manifest};

use crate::data::{batch_plan, Dataset};
use crate::error::{ensure_len, Error, Result};
use crate::estimators::{
    estimate_loglik, grad_phi_iwae, grad_theta_gibbs, phi_grad_from_weighted, posterior_mean, potential_grad,
    theta_grad_from_weighted, GradEstimate,
};
use crate::model::{draw_weighted, recog_sample, GenerativeModel, ParamVector, RecognitionModel, WeightedSampleSet};
use crate::numerics::{Phase, RandomStream};
use crate::samplers::{adam_step, sgnht_init, sgnht_step, AdamState, SgnhtState};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MODEL_VERSION: u32 = 1;

/// One metrics record.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub batch: usize,
    pub step: usize,
    pub phase: &'static str,
    pub name: &'static str,
    pub value: f64,
}

pub trait MetricsSink {
    fn record(&mut self, row: MetricRow) -> Result<()>;
}

/// Keeps every row in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub rows: Vec<MetricRow>,
}

impl MetricsSink for MemorySink {
    fn record(&mut self, row: MetricRow) -> Result<()> {
        self.rows.push(row);
        Ok(())
    }
}

/// Discards every row.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _: MetricRow) -> Result<()> {
        Ok(())
    }
}

/// CSV with header `epoch,batch,step,phase,value_name,value`.
pub struct CsvSink<W: Write> {
    out: W,
}

pub const METRICS_HEADER: &str = "epoch,batch,step,phase,value_name,value";

impl<W: Write> CsvSink<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{METRICS_HEADER}")?;
        Ok(Self { out })
    }

    /// Continues an existing file without writing the header again.
    pub fn append(out: W) -> Self {
        Self { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> MetricsSink for CsvSink<W> {
    fn record(&mut self, r: MetricRow) -> Result<()> {
        writeln!(self.out, "{},{},{},{},{},{}", r.epoch, r.batch, r.step, r.phase, r.name, r.value)?;
        Ok(())
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub manifest_digest: String,
    pub theta: ParamVector,
    pub phi: ParamVector,
    pub sgnht: SgnhtState,
    pub adam: AdamState,
    /// Next epoch to run.
    pub epoch: usize,
    /// θ-steps taken so far. Random streams are addressed by
    /// `(seed, phase, epoch, batch, step, datapoint)`, so this position plus
    /// the seed fixes every future draw.
    pub rng_cursor: u64,
    pub best_validation: Option<f64>,
    pub epochs_since_best: usize,
    pub collect_from: Option<usize>,
    pub collected: Vec<ParamVector>,
}

fn encode_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Writes `bytes` to `path` through a temporary sibling so readers never see
/// a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, cp: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_json(cp)?)
}

/// Loads a checkpoint, verifying its version and, if given, the digest of
/// the architecture it was trained with.
pub fn load_checkpoint(path: &Path, expected_digest: Option<&str>) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let cp: Checkpoint =
        serde_json::from_slice(&bytes).map_err(|e| Error::Corruption(format!("checkpoint {}: {e}", path.display())))?;
    if cp.version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint version {} (expected {CHECKPOINT_VERSION})",
            cp.version
        )));
    }
    if let Some(d) = expected_digest {
        if d != cp.manifest_digest {
            return Err(Error::Incompatible("checkpoint was written for a different architecture".into()));
        }
    }
    Ok(cp)
}

/// A trained model as written by `train`: the manifest plus the posterior
/// mean of θ and the final proposal parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub version: u32,
    pub manifest: String,
    pub theta: ParamVector,
    pub phi: ParamVector,
}

impl SavedModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &encode_json(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let m: SavedModel =
            serde_json::from_slice(&bytes).map_err(|e| Error::Corruption(format!("model {}: {e}", path.display())))?;
        if m.version != MODEL_VERSION {
            return Err(Error::Incompatible(format!("model version {} (expected {MODEL_VERSION})", m.version)));
        }
        Ok(m)
    }

    /// Rebuilds the models, optionally replacing θ (e.g. by one posterior
    /// sample).
    pub fn instantiate(&self, theta: Option<&[f64]>) -> Result<(Manifest, GenerativeModel, RecognitionModel)> {
        let manifest = Manifest::parse(&self.manifest)?;
        let (mut g, mut r) = manifest.build()?;
        g.set_params(theta.unwrap_or(&self.theta))?;
        r.set_params(&self.phi)?;
        Ok((manifest, g, r))
    }
}

pub fn save_samples(path: &Path, samples: &[ParamVector]) -> Result<()> {
    write_atomic(path, &encode_json(&samples)?)
}

pub fn load_samples(path: &Path) -> Result<Vec<ParamVector>> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Corruption(format!("samples {}: {e}", path.display())))
}

/// Glorot-uniform weights, zero biases, unused autoregressive entries
/// zeroed.
pub fn init_params(g: &mut GenerativeModel, r: &mut RecognitionModel, stream: &mut RandomStream) {
    let layers = g.layers_mut().iter_mut().chain(r.layers_mut().iter_mut());
    for layer in layers {
        for t in layer.tensors_mut() {
            t.fill(0.0);
        }
        for w in layer.weight_matrices_mut() {
            let (fan_out, fan_in) = w.dim();
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            w.mapv_inplace(|_| bound * (2.0 * stream.uniform() - 1.0));
        }
        layer.mask_unused();
    }
}

/// Mean `K`-sample log-likelihood estimate over a dataset; datapoint `n`
/// uses its own stream so the result does not depend on thread count.
pub fn evaluate(g: &GenerativeModel, r: &RecognitionModel, ds: &Dataset, k: usize, seed: u64) -> Result<f64> {
    Ok(evaluate_each(g, r, ds, k, seed, Phase::Evaluation, 0)?.iter().sum::<f64>() / ds.len().max(1) as f64)
}

/// Per-datapoint estimates behind [`evaluate`].
pub fn evaluate_each(
    g: &GenerativeModel,
    r: &RecognitionModel,
    ds: &Dataset,
    k: usize,
    seed: u64,
    phase: Phase,
    tag: u64,
) -> Result<Vec<f64>> {
    ensure_len("data dimension", ds.dim(), g.data_dim())?;
    let results: Vec<Result<f64>> = (0..ds.len())
        .into_par_iter()
        .map(|n| {
            let mut s = RandomStream::with_path(seed, vec![phase as u64, tag, n as u64]);
            estimate_loglik(g, r, ds.row(n), k, &mut s)
        })
        .collect();
    results.into_iter().collect()
}

/// Result of a finished run.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub theta_mean: ParamVector,
    pub samples: Vec<ParamVector>,
    pub phi: ParamVector,
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len().max(1) as f64;
    values.sum::<f64>() / n
}

/// Owns the models and optimizer state for one training run.
pub struct Trainer<'a> {
    cfg: &'a TrainConfig,
    train: &'a Dataset,
    validation: &'a Dataset,
    g: GenerativeModel,
    r: RecognitionModel,
    state: Checkpoint,
}

impl<'a> Trainer<'a> {
    /// Fresh run: initializes parameters and optimizer state from the seed.
    pub fn new(cfg: &'a TrainConfig, manifest: &Manifest, train: &'a Dataset, validation: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        let (mut g, mut r) = manifest.build()?;
        init_params(&mut g, &mut r, &mut RandomStream::with_path(cfg.seed, vec![Phase::Init as u64, 0]));
        Self::from_models(cfg, manifest.digest(), g, r, train, validation)
    }

    /// Fresh run starting from the parameters already in `g` and `r`.
    pub fn from_models(
        cfg: &'a TrainConfig,
        manifest_digest: String,
        g: GenerativeModel,
        r: RecognitionModel,
        train: &'a Dataset,
        validation: &'a Dataset,
    ) -> Result<Self> {
        cfg.validate()?;
        r.check_matches(&g)?;
        Self::check_data(&g, train, validation)?;
        if train.is_empty() {
            return Err(Error::Domain("training set is empty".into()));
        }
        let eta = cfg.gamma / train.len() as f64;
        let sgnht = sgnht_init(
            g.num_params(),
            eta,
            cfg.momentum_decay,
            &mut RandomStream::with_path(cfg.seed, vec![Phase::Init as u64, 1]),
        )?;
        let adam = AdamState::new(r.num_params(), cfg.adam_step, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon);
        let state = Checkpoint {
            version: CHECKPOINT_VERSION,
            manifest_digest,
            theta: g.params(),
            phi: r.params(),
            sgnht,
            adam,
            epoch: 0,
            rng_cursor: 0,
            best_validation: None,
            epochs_since_best: 0,
            collect_from: None,
            collected: Vec::new(),
        };
        Ok(Self { cfg, train, validation, g, r, state })
    }

    /// Continues from a checkpoint written by an earlier run.
    pub fn resume(
        cfg: &'a TrainConfig,
        manifest: &Manifest,
        cp: Checkpoint,
        train: &'a Dataset,
        validation: &'a Dataset,
    ) -> Result<Self> {
        cfg.validate()?;
        if cp.manifest_digest != manifest.digest() {
            return Err(Error::Incompatible("checkpoint was written for a different architecture".into()));
        }
        let (mut g, mut r) = manifest.build()?;
        g.set_params(&cp.theta)?;
        r.set_params(&cp.phi)?;
        ensure_len("SGNHT state", cp.sgnht.u.len(), g.num_params())?;
        ensure_len("Adam state", cp.adam.m.len(), r.num_params())?;
        Self::check_data(&g, train, validation)?;
        Ok(Self { cfg, train, validation, g, r, state: cp })
    }

    fn check_data(g: &GenerativeModel, train: &Dataset, validation: &Dataset) -> Result<()> {
        for ds in [train, validation] {
            ensure_len(format_args!("{} data dimension", ds.split), ds.dim(), g.data_dim())?;
            if g.layers()[0].kind().has_binary_output() {
                ds.require_binary()?;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.state
    }

    pub fn generative(&self) -> &GenerativeModel {
        &self.g
    }

    pub fn recognition(&self) -> &RecognitionModel {
        &self.r
    }

    pub fn is_done(&self) -> bool {
        let s = &self.state;
        s.epoch >= self.cfg.max_epochs || s.collected.len() >= self.cfg.posterior_samples
    }

    /// Runs epochs until enough posterior samples are collected or
    /// `max_epochs` is reached, calling `on_epoch` after each one.
    pub fn run(
        &mut self,
        sink: &mut dyn MetricsSink,
        on_epoch: &mut dyn FnMut(&Checkpoint) -> Result<()>,
    ) -> Result<TrainOutput> {
        while !self.is_done() {
            self.run_epoch(sink)?;
            on_epoch(&self.state)?;
        }
        self.output()
    }

    /// Posterior mean of the collected samples; the current θ when none were
    /// collected.
    pub fn output(&self) -> Result<TrainOutput> {
        let samples = if self.state.collected.is_empty() {
            vec![self.state.theta.clone()]
        } else {
            self.state.collected.clone()
        };
        Ok(TrainOutput { theta_mean: posterior_mean(&samples)?, samples, phi: self.state.phi.clone() })
    }

    fn stream(&self, phase: Phase, tail: &[u64]) -> RandomStream {
        let mut path = vec![phase as u64];
        path.extend_from_slice(tail);
        RandomStream::with_path(self.cfg.seed, path)
    }

    /// One pass over the training data followed by validation or sample
    /// collection.
    pub fn run_epoch(&mut self, sink: &mut dyn MetricsSink) -> Result<()> {
        let cfg = self.cfg;
        let epoch = self.state.epoch;
        let forced_start = cfg.max_epochs.saturating_sub(cfg.posterior_samples);
        if self.state.collect_from.is_none() && epoch >= forced_start {
            warn!("validation never stalled; collecting posterior samples from epoch {epoch}");
            self.state.collect_from = Some(epoch);
        }
        self.state.sgnht.eta = cfg.gamma / self.train.len() as f64 * cfg.eta_decay.powi(epoch as i32);

        let plan = batch_plan(self.train.len(), cfg.batch_size, epoch as u64, cfg.seed)?;
        for (bi, batch) in plan.iter().enumerate() {
            for t in 0..cfg.n_theta {
                let sets = self.theta_step(sink, epoch, bi, t, batch)?;
                for j in 0..cfg.n_phi {
                    let reuse = if j == 0 && !cfg.resample_before_phi { sets.as_deref() } else { None };
                    self.phi_step(sink, epoch, bi, t, j, batch, reuse)?;
                }
                self.state.rng_cursor += 1;
            }
        }

        if self.state.collect_from.is_some_and(|c| c <= epoch) {
            self.state.collected.push(self.state.theta.clone());
            sink.record(MetricRow {
                epoch,
                batch: 0,
                step: 0,
                phase: "collect",
                name: "sample",
                value: self.state.collected.len() as f64,
            })?;
        } else {
            let val = self.validate(epoch)?;
            sink.record(MetricRow { epoch, batch: 0, step: 0, phase: "validation", name: "est_ll", value: val })?;
            info!("epoch {epoch}: validation Est. LL {val:.4}");
            match self.state.best_validation {
                Some(best) if val <= best => self.state.epochs_since_best += 1,
                _ => {
                    self.state.best_validation = Some(val);
                    self.state.epochs_since_best = 0;
                }
            }
            if self.state.epochs_since_best >= cfg.patience {
                info!("validation stalled for {} epochs; collecting from epoch {}", cfg.patience, epoch + 1);
                self.state.collect_from = Some(epoch + 1);
            }
        }
        self.state.epoch += 1;
        Ok(())
    }

    fn validate(&self, epoch: usize) -> Result<f64> {
        let n = match self.cfg.validation_limit {
            0 => self.validation.len(),
            l => l.min(self.validation.len()),
        };
        if n == 0 {
            return Err(Error::Domain("validation set is empty".into()));
        }
        let idx: Vec<usize> = (0..n).collect();
        let subset = self.validation.subset(&idx);
        let each = evaluate_each(&self.g, &self.r, &subset, self.cfg.k_val, self.cfg.seed, Phase::Validation, epoch as u64)?;
        Ok(mean(each.into_iter()))
    }

    /// One SGNHT update; returns the weighted sets behind the gradient when
    /// the NAIS estimator produced them.
    fn theta_step(
        &mut self,
        sink: &mut dyn MetricsSink,
        epoch: usize,
        bi: usize,
        t: usize,
        batch: &[usize],
    ) -> Result<Option<Vec<WeightedSampleSet>>> {
        let cfg = self.cfg;
        let mut candidate = self.g.clone();
        let mut sets = None;
        let mut estimates: Vec<GradEstimate> = Vec::new();
        let mut theta = self.state.theta.clone();
        let mut noise = self.stream(Phase::Noise, &[epoch as u64, bi as u64, t as u64]);
        let (r, train, seed) = (&self.r, self.train, cfg.seed);
        let path = [Phase::Theta as u64, epoch as u64, bi as u64, t as u64];
        let n_total = train.len();
        sgnht_step(
            &mut self.state.sgnht,
            &mut theta,
            |moved| {
                candidate.set_params(moved)?;
                let g = &candidate;
                let per_x: Vec<Result<(GradEstimate, Option<WeightedSampleSet>)>> = batch
                    .par_iter()
                    .map(|&n| {
                        let mut p = path.to_vec();
                        p.push(n as u64);
                        let mut s = RandomStream::with_path(seed, p);
                        let x = train.row(n);
                        match cfg.estimator {
                            Estimator::Nais => {
                                let set = draw_weighted(g, r, x, cfg.train_samples, &mut s)?;
                                Ok((theta_grad_from_weighted(g, x, &set)?, Some(set)))
                            }
                            Estimator::Gibbs => {
                                let init = recog_sample(r, x, &mut s)?;
                                let est = grad_theta_gibbs(g, x, cfg.train_samples, cfg.gibbs_sweeps, &mut s, init)?;
                                Ok((est, None))
                            }
                        }
                    })
                    .collect();
                let mut collected_sets = Vec::with_capacity(batch.len());
                for item in per_x {
                    let (est, set) = item?;
                    estimates.push(est);
                    if let Some(set) = set {
                        collected_sets.push(set);
                    }
                }
                if collected_sets.len() == batch.len() {
                    sets = Some(collected_sets);
                }
                potential_grad(&cfg.prior, moved, n_total, &estimates)
            },
            &mut noise,
        )?;
        self.g = candidate;
        self.state.theta = theta;
        let ess = mean(estimates.iter().map(|e| e.ess));
        let maxw = mean(estimates.iter().map(|e| e.max_weight));
        sink.record(MetricRow { epoch, batch: bi, step: t, phase: "theta", name: "ess", value: ess })?;
        sink.record(MetricRow { epoch, batch: bi, step: t, phase: "theta", name: "max_weight", value: maxw })?;
        Ok(sets)
    }

    #[allow(clippy::too_many_arguments)]
    fn phi_step(
        &mut self,
        sink: &mut dyn MetricsSink,
        epoch: usize,
        bi: usize,
        t: usize,
        j: usize,
        batch: &[usize],
        reuse: Option<&[WeightedSampleSet]>,
    ) -> Result<()> {
        let cfg = self.cfg;
        let (g, r, train) = (&self.g, &self.r, self.train);
        let path = [Phase::Phi as u64, epoch as u64, bi as u64, t as u64, j as u64];
        let per_x: Vec<Result<GradEstimate>> = batch
            .par_iter()
            .enumerate()
            .map(|(pos, &n)| {
                let x = train.row(n);
                let mut p = path.to_vec();
                p.push(n as u64);
                let mut s = RandomStream::with_path(cfg.seed, p);
                match cfg.phi_objective {
                    PhiObjective::Iwae => grad_phi_iwae(g, r, x, cfg.train_samples, &mut s),
                    PhiObjective::InclusiveKl => match reuse {
                        Some(sets) => phi_grad_from_weighted(r, x, &sets[pos]),
                        None => {
                            let set = draw_weighted(g, r, x, cfg.train_samples, &mut s)?;
                            phi_grad_from_weighted(r, x, &set)
                        }
                    },
                }
            })
            .collect();
        let estimates = per_x.into_iter().collect::<Result<Vec<_>>>()?;
        let mut grad = vec![0.0; r.num_params()];
        for e in &estimates {
            for (a, v) in grad.iter_mut().zip(e.grad.iter()) {
                *a += v;
            }
        }
        let scale = 1.0 / estimates.len() as f64;
        grad.iter_mut().for_each(|v| *v *= scale);
        adam_step(&mut self.state.adam, &mut self.state.phi, &grad)?;
        self.r.set_params(&self.state.phi)?;
        let step = t * cfg.n_phi + j;
        let ess = mean(estimates.iter().map(|e| e.ess));
        let maxw = mean(estimates.iter().map(|e| e.max_weight));
        sink.record(MetricRow { epoch, batch: bi, step, phase: "phi", name: "ess", value: ess })?;
        sink.record(MetricRow { epoch, batch: bi, step, phase: "phi", name: "max_weight", value: maxw })?;
        Ok(())
    }
}

/// Builds, initializes and trains a model from scratch.
pub fn train(
    cfg: &TrainConfig,
    manifest: &Manifest,
    train: &Dataset,
    validation: &Dataset,
    sink: &mut dyn MetricsSink,
) -> Result<TrainOutput> {
    let mut t = Trainer::new(cfg, manifest, train, validation)?;
    t.run(sink, &mut |_| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::layers::{LayerKind, LayerParams, Matrix};
    use crate::model::ancestral_sample;

    fn teacher_data(n: usize, seed: u64) -> (Manifest, Dataset) {
        let m = Manifest::sbn_stack(6, &[3], None);
        let (mut g, mut r) = m.build().unwrap();
        init_params(&mut g, &mut r, &mut RandomStream::new(seed));
        let mut s = RandomStream::new(seed + 1);
        let rows: Vec<_> = (0..n).map(|_| ancestral_sample(&g, &mut s).unwrap().0).collect();
        (m, Dataset::from_rows(&rows, Split::Train, None).unwrap())
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 10,
            n_theta: 2,
            k_val: 10,
            posterior_samples: 2,
            max_epochs: 3,
            patience: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn glorot_bounds_and_zero_biases() {
        let m = Manifest::sbn_stack(200, &[200], None);
        let (mut g, mut r) = m.build().unwrap();
        init_params(&mut g, &mut r, &mut RandomStream::new(3));
        let LayerParams::Sbn { w, b } = &g.layers()[0] else { panic!() };
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        assert!((var - 2.0 / 400.0).abs() < 0.1 * 2.0 / 400.0, "{var}");
        assert!(b.iter().all(|&v| v == 0.0));

        let one = Manifest::sbn_stack(1, &[1], None);
        let (mut g, mut r) = one.build().unwrap();
        for seed in 0..50 {
            init_params(&mut g, &mut r, &mut RandomStream::new(seed));
            let LayerParams::Sbn { w, .. } = &g.layers()[0] else { panic!() };
            assert!(w[[0, 0]].abs() <= 3f64.sqrt());
        }
    }

    #[test]
    fn darn_init_respects_mask() {
        let mut l = LayerParams::zeros(LayerKind::TopFvsbn, 0, 5, &[]).unwrap();
        let top = LayerParams::zeros(LayerKind::Sbn, 5, 4, &[]).unwrap();
        let mut g = GenerativeModel::new(vec![top, l.clone()]).unwrap();
        let mut r = RecognitionModel::new(vec![LayerParams::zeros(LayerKind::Sbn, 4, 5, &[]).unwrap()]).unwrap();
        init_params(&mut g, &mut r, &mut RandomStream::new(1));
        l = g.layers()[1].clone();
        let LayerParams::TopFvsbn { w, .. } = &l else { panic!() };
        let w: &Matrix = w;
        for i in 0..5 {
            for j in i..5 {
                assert_eq!(w[[i, j]], 0.0);
            }
        }
        assert!(w[[3, 1]] != 0.0);
    }

    #[test]
    fn zero_epochs_returns_initial_theta() {
        let (m, ds) = teacher_data(20, 1);
        let cfg = TrainConfig { max_epochs: 0, ..small_cfg() };
        let t = Trainer::new(&cfg, &m, &ds, &ds).unwrap();
        let init = t.checkpoint().theta.clone();
        let mut sink = MemorySink::default();
        let out = train(&cfg, &m, &ds, &ds, &mut sink).unwrap();
        assert_eq!(out.samples, vec![init.clone()]);
        assert_eq!(out.theta_mean, init);
        assert!(sink.rows.is_empty());
    }

    #[test]
    fn step_counts_and_collection() {
        let (m, ds) = teacher_data(25, 2);
        let cfg = TrainConfig { max_epochs: 6, posterior_samples: 2, n_phi: 2, ..small_cfg() };
        let mut sink = MemorySink::default();
        let out = train(&cfg, &m, &ds, &ds, &mut sink).unwrap();
        let batches = 25usize.div_ceil(10);
        for e in 0..sink.rows.iter().map(|r| r.epoch).max().unwrap() + 1 {
            let count = |phase| sink.rows.iter().filter(|r| r.epoch == e && r.phase == phase && r.name == "ess").count();
            assert_eq!(count("theta"), batches * cfg.n_theta);
            assert_eq!(count("phi"), batches * cfg.n_theta * cfg.n_phi);
        }
        assert_eq!(out.samples.len(), 2);
        let collect: Vec<_> = sink.rows.iter().filter(|r| r.phase == "collect").collect();
        assert_eq!(collect.len(), 2);
        let last_val = sink.rows.iter().filter(|r| r.phase == "validation").map(|r| r.epoch).max().unwrap();
        assert!(collect.iter().all(|r| r.epoch > last_val));
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let (m, ds) = teacher_data(20, 3);
        let cfg = small_cfg();
        let mut t = Trainer::new(&cfg, &m, &ds, &ds).unwrap();
        t.run_epoch(&mut NullSink).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        save_checkpoint(&a, t.checkpoint()).unwrap();
        let loaded = load_checkpoint(&a, Some(&m.digest())).unwrap();
        assert_eq!(&loaded, t.checkpoint());
        save_checkpoint(&b, &loaded).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

        let other = Manifest::sbn_stack(6, &[4], None);
        assert!(matches!(load_checkpoint(&a, Some(&other.digest())), Err(Error::Incompatible(_))));
        assert!(matches!(Trainer::resume(&cfg, &other, loaded, &ds, &ds), Err(Error::Incompatible(_))));

        let bytes = fs::read(&a).unwrap();
        fs::write(&a, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&a, None), Err(Error::Corruption(_))));
    }

    #[test]
    fn resumed_run_matches_unbroken_run() {
        let (m, ds) = teacher_data(30, 4);
        let cfg = TrainConfig { max_epochs: 5, posterior_samples: 2, ..small_cfg() };
        let full = train(&cfg, &m, &ds, &ds, &mut NullSink).unwrap();

        let mut first = Trainer::new(&cfg, &m, &ds, &ds).unwrap();
        first.run_epoch(&mut NullSink).unwrap();
        first.run_epoch(&mut NullSink).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cp.json");
        save_checkpoint(&p, first.checkpoint()).unwrap();
        let cp = load_checkpoint(&p, Some(&m.digest())).unwrap();
        let mut second = Trainer::resume(&cfg, &m, cp, &ds, &ds).unwrap();
        let resumed = second.run(&mut NullSink, &mut |_| Ok(())).unwrap();
        assert_eq!(resumed.theta_mean, full.theta_mean);
        assert_eq!(resumed.phi, full.phi);
    }

    #[test]
    fn csv_sink_format() {
        let mut sink = CsvSink::new(Vec::new()).unwrap();
        sink.record(MetricRow { epoch: 1, batch: 2, step: 3, phase: "theta", name: "ess", value: 4.5 }).unwrap();
        let text = String::from_utf8(sink.into_inner()).unwrap();
        assert_eq!(text, "epoch,batch,step,phase,value_name,value\n1,2,3,theta,ess,4.5\n");
    }

    #[test]
    fn estimator_variants_run() {
        let (m, ds) = teacher_data(20, 5);
        for (estimator, resample) in [(Estimator::Gibbs, true), (Estimator::Nais, false)] {
            let cfg = TrainConfig { estimator, resample_before_phi: resample, max_epochs: 2, ..small_cfg() };
            let out = train(&cfg, &m, &ds, &ds, &mut NullSink).unwrap();
            assert!(out.theta_mean.iter().all(|v| v.is_finite()));
        }
    }
}
