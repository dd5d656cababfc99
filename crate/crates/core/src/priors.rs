//! Parameter priors for the potential energy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PriorKind {
    StudentT,
    Gaussian,
}

/// An elementwise prior on every model parameter.
///
/// `scale` is the Student-t scale (not its standard deviation) or the
/// Gaussian standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub kind: PriorKind,
    pub location: f64,
    pub scale: f64,
    pub dof: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self::student_t(0.0, 0.09, 2.2)
    }
}

impl PriorSpec {
    pub fn student_t(location: f64, scale: f64, dof: f64) -> Self {
        Self { kind: PriorKind::StudentT, location, scale, dof }
    }

    pub fn gaussian(location: f64, scale: f64) -> Self {
        Self { kind: PriorKind::Gaussian, location, scale, dof: f64::INFINITY }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Domain(format!("prior scale must be positive, got {}", self.scale)));
        }
        if !self.location.is_finite() {
            return Err(Error::Domain(format!("prior location must be finite, got {}", self.location)));
        }
        if self.kind == PriorKind::StudentT && !(self.dof > 0.0) {
            return Err(Error::Domain(format!("Student-t degrees of freedom must be positive, got {}", self.dof)));
        }
        Ok(())
    }

    /// `d/dθ log p0(θ)` for one coordinate.
    #[inline]
    pub fn grad_at(&self, theta: f64) -> f64 {
        let d = theta - self.location;
        match self.kind {
            PriorKind::StudentT => {
                let s2 = self.scale * self.scale;
                -(self.dof + 1.0) * d / (self.dof * s2 + d * d)
            }
            PriorKind::Gaussian => -d / (self.scale * self.scale),
        }
    }

    /// Unnormalized `log p0(θ)` for one coordinate.
    pub fn log_density_at(&self, theta: f64) -> f64 {
        let d = theta - self.location;
        match self.kind {
            PriorKind::StudentT => {
                -0.5 * (self.dof + 1.0) * (d * d / (self.dof * self.scale * self.scale)).ln_1p()
            }
            PriorKind::Gaussian => -0.5 * d * d / (self.scale * self.scale),
        }
    }
}

/// Elementwise gradient of the log-prior.
pub fn log_prior_grad(spec: &PriorSpec, theta: &[f64]) -> Result<Vec<f64>> {
    spec.validate()?;
    theta
        .iter()
        .map(|&t| {
            if t.is_finite() {
                Ok(spec.grad_at(t))
            } else {
                Err(Error::Domain(format!("non-finite parameter {t}")))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use statrs::distribution::{Continuous, StudentsT};

    #[test]
    fn examples() {
        let t = PriorSpec::student_t(0.0, 0.5, 3.0);
        assert_eq!(log_prior_grad(&t, &[0.0]).unwrap(), vec![0.0]);
        let g = PriorSpec::gaussian(0.0, 1.0);
        assert_eq!(log_prior_grad(&g, &[2.0]).unwrap(), vec![-2.0]);
        assert!(log_prior_grad(&g, &[f64::NAN]).is_err());
        assert!(log_prior_grad(&PriorSpec::gaussian(0.0, 0.0), &[1.0]).is_err());
        assert!(log_prior_grad(&PriorSpec::student_t(0.0, 1.0, -1.0), &[1.0]).is_err());
    }

    #[test]
    fn student_t_matches_finite_differences_of_reference_density() {
        let spec = PriorSpec::default();
        let reference = StudentsT::new(0.0, 0.09, 2.2).unwrap();
        let mut s = crate::numerics::RandomStream::new(99);
        let h = 1e-6;
        for _ in 0..100 {
            let x = 0.5 * s.standard_normal();
            let fd = (reference.ln_pdf(x + h) - reference.ln_pdf(x - h)) / (2.0 * h);
            let g = spec.grad_at(x);
            let rel = (g - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-6, "x={x} analytic={g} fd={fd}");
        }
    }

    #[test]
    fn magnitude_peak_and_tail() {
        let spec = PriorSpec::student_t(0.3, 0.09, 2.2);
        let peak = spec.scale * spec.dof.sqrt();
        let at = |d: f64| spec.grad_at(spec.location + d).abs();
        assert!(at(peak) > at(peak * 0.99));
        assert!(at(peak) > at(peak * 1.01));
        let d = 1e3 * spec.scale;
        let asymptote = (spec.dof + 1.0) / d;
        assert!((at(d) - asymptote).abs() / asymptote < 0.01);
    }

    proptest! {
        #[test]
        fn odd_about_location(mu in -1.0f64..1.0, d in 0.0f64..5.0, gaussian in any::<bool>()) {
            let spec = if gaussian { PriorSpec::gaussian(mu, 0.7) } else { PriorSpec::student_t(mu, 0.09, 2.2) };
            prop_assert!((spec.grad_at(mu + d) + spec.grad_at(mu - d)).abs() <= 1e-12);
        }
    }
}
