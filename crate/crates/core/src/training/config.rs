//! `key = value` training configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::priors::{PriorKind, PriorSpec};

/// Prefix of environment variables overriding config keys, e.g.
/// `DSMCMC_GAMMA=0.005`.
pub const ENV_PREFIX: &str = "DSMCMC_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Estimator {
    Nais,
    Gibbs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhiObjective {
    InclusiveKl,
    Iwae,
}

impl FromStr for Estimator {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "nais" => Ok(Self::Nais),
            "gibbs" => Ok(Self::Gibbs),
            _ => Err("expected nais or gibbs".into()),
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Nais => "nais",
            Self::Gibbs => "gibbs",
        })
    }
}

impl FromStr for PhiObjective {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "inclusive_kl" => Ok(Self::InclusiveKl),
            "iwae" => Ok(Self::Iwae),
            _ => Err("expected inclusive_kl or iwae".into()),
        }
    }
}

impl fmt::Display for PhiObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::InclusiveKl => "inclusive_kl",
            Self::Iwae => "iwae",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Proposal samples per datapoint for each gradient estimate.
    pub train_samples: usize,
    pub k_val: usize,
    pub k_test: usize,
    /// Posterior samples averaged into the final estimate.
    pub posterior_samples: usize,
    pub batch_size: usize,
    /// Per-batch learning rate; the SGNHT step is `γ/N`.
    pub gamma: f64,
    pub momentum_decay: f64,
    pub adam_step: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub n_theta: usize,
    pub n_phi: usize,
    pub prior: PriorSpec,
    pub seed: u64,
    pub patience: usize,
    pub estimator: Estimator,
    pub phi_objective: PhiObjective,
    pub resample_before_phi: bool,
    pub max_epochs: usize,
    pub gibbs_sweeps: usize,
    /// Multiplicative decay of the SGNHT step per epoch; 1 keeps it constant.
    pub eta_decay: f64,
    /// Validation points used per epoch; 0 means all of them.
    pub validation_limit: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            train_samples: 5,
            k_val: 500,
            k_test: 100_000,
            posterior_samples: 100,
            batch_size: 100,
            gamma: 0.001,
            momentum_decay: 0.01,
            adam_step: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-10,
            n_theta: 10,
            n_phi: 1,
            prior: PriorSpec::default(),
            seed: 1,
            patience: 10,
            estimator: Estimator::Nais,
            phi_objective: PhiObjective::InclusiveKl,
            resample_before_phi: true,
            max_epochs: 1000,
            gibbs_sweeps: 5,
            eta_decay: 1.0,
            validation_limit: 0,
        }
    }
}

pub const KEYS: [&str; 26] = [
    "train_samples",
    "k_val",
    "k_test",
    "posterior_samples",
    "batch_size",
    "gamma",
    "momentum_decay",
    "adam_step",
    "adam_beta1",
    "adam_beta2",
    "adam_epsilon",
    "n_theta",
    "n_phi",
    "prior",
    "prior_location",
    "prior_scale",
    "prior_dof",
    "seed",
    "patience",
    "estimator",
    "phi_objective",
    "resample_before_phi",
    "max_epochs",
    "gibbs_sweeps",
    "eta_decay",
    "validation_limit",
];

fn prior_name(kind: PriorKind) -> &'static str {
    match kind {
        PriorKind::StudentT => "student_t",
        PriorKind::Gaussian => "gaussian",
    }
}

struct Entries(BTreeMap<String, String>);

impl Entries {
    fn take<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let raw = self.0.remove(key).ok_or_else(|| Error::Config(format!("missing config key `{key}`")))?;
        raw.parse::<T>()
            .map_err(|e| Error::Config(format!("config key `{key}`: cannot parse {raw:?}: {e}")))
    }
}

impl TrainConfig {
    /// Parses config text, applying overrides from `env` (called with the
    /// full variable name) before checking that every key is present.
    pub fn parse_with_env(text: &str, env: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
            if map.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("config key `{k}` given twice")));
            }
        }
        for key in KEYS {
            if let Some(v) = env(&format!("{ENV_PREFIX}{}", key.to_ascii_uppercase())) {
                map.insert(key.to_string(), v.trim().to_string());
            }
        }
        let mut e = Entries(map);
        let prior_kind: String = e.take("prior")?;
        let location = e.take("prior_location")?;
        let scale = e.take("prior_scale")?;
        let dof: f64 = e.take("prior_dof")?;
        let prior = match prior_kind.as_str() {
            "student_t" => PriorSpec::student_t(location, scale, dof),
            "gaussian" => PriorSpec::gaussian(location, scale),
            other => return Err(Error::Config(format!("config key `prior`: unknown prior {other:?}"))),
        };
        let cfg = Self {
            train_samples: e.take("train_samples")?,
            k_val: e.take("k_val")?,
            k_test: e.take("k_test")?,
            posterior_samples: e.take("posterior_samples")?,
            batch_size: e.take("batch_size")?,
            gamma: e.take("gamma")?,
            momentum_decay: e.take("momentum_decay")?,
            adam_step: e.take("adam_step")?,
            adam_beta1: e.take("adam_beta1")?,
            adam_beta2: e.take("adam_beta2")?,
            adam_epsilon: e.take("adam_epsilon")?,
            n_theta: e.take("n_theta")?,
            n_phi: e.take("n_phi")?,
            prior,
            seed: e.take("seed")?,
            patience: e.take("patience")?,
            estimator: e.take("estimator")?,
            phi_objective: e.take("phi_objective")?,
            resample_before_phi: e.take("resample_before_phi")?,
            max_epochs: e.take("max_epochs")?,
            gibbs_sweeps: e.take("gibbs_sweeps")?,
            eta_decay: e.take("eta_decay")?,
            validation_limit: e.take("validation_limit")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_env(text, |_| None)
    }

    /// Parses with overrides from the process environment.
    pub fn parse_from_env(text: &str) -> Result<Self> {
        Self::parse_with_env(text, |k| std::env::var(k).ok())
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("train_samples", self.train_samples),
            ("k_val", self.k_val),
            ("k_test", self.k_test),
            ("posterior_samples", self.posterior_samples),
            ("batch_size", self.batch_size),
            ("n_theta", self.n_theta),
            ("n_phi", self.n_phi),
            ("patience", self.patience),
        ];
        for (k, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("config key `{k}` must be at least 1")));
            }
        }
        let positive = [
            ("gamma", self.gamma),
            ("adam_step", self.adam_step),
            ("adam_epsilon", self.adam_epsilon),
            ("eta_decay", self.eta_decay),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("config key `{k}` must be positive, got {v}")));
            }
        }
        if !(self.momentum_decay >= 0.0 && self.momentum_decay.is_finite()) {
            return Err(Error::Config(format!("config key `momentum_decay` must be non-negative, got {}", self.momentum_decay)));
        }
        for (k, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("config key `{k}` must lie in [0, 1), got {v}")));
            }
        }
        self.prior.validate().map_err(|e| Error::Config(format!("prior: {e}")))
    }

    /// Renders every key; parsing the result gives back `self`.
    pub fn to_text(&self) -> String {
        let p = &self.prior;
        let rows: Vec<(&str, String)> = vec![
            ("train_samples", self.train_samples.to_string()),
            ("k_val", self.k_val.to_string()),
            ("k_test", self.k_test.to_string()),
            ("posterior_samples", self.posterior_samples.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("gamma", self.gamma.to_string()),
            ("momentum_decay", self.momentum_decay.to_string()),
            ("adam_step", self.adam_step.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_epsilon", self.adam_epsilon.to_string()),
            ("n_theta", self.n_theta.to_string()),
            ("n_phi", self.n_phi.to_string()),
            ("prior", prior_name(p.kind).to_string()),
            ("prior_location", p.location.to_string()),
            ("prior_scale", p.scale.to_string()),
            ("prior_dof", p.dof.to_string()),
            ("seed", self.seed.to_string()),
            ("patience", self.patience.to_string()),
            ("estimator", self.estimator.to_string()),
            ("phi_objective", self.phi_objective.to_string()),
            ("resample_before_phi", self.resample_before_phi.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("gibbs_sweeps", self.gibbs_sweeps.to_string()),
            ("eta_decay", self.eta_decay.to_string()),
            ("validation_limit", self.validation_limit.to_string()),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
