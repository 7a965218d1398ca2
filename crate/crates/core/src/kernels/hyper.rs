use serde::{Deserialize, Serialize};

/// Gaussian prior over the log-space value of a hyperparameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub mean: f64,
    pub std: f64,
}

impl GaussianPrior {
    pub fn new(mean: f64, std: f64) -> Self {
        assert!(std > 0.0 && std.is_finite(), "prior stddev must be positive");
        assert!(mean.is_finite(), "prior mean must be finite");
        Self { mean, std }
    }

    pub fn log_density(&self, u: f64) -> f64 {
        let z = (u - self.mean) / self.std;
        -0.5 * z * z - self.std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }

    /// d/du of [`Self::log_density`].
    pub fn grad(&self, u: f64) -> f64 {
        -(u - self.mean) / (self.std * self.std)
    }
}

/// Positive hyperparameter stored in log space: `value = exp(unconstrained)`.
///
/// A value of exactly zero is representable (`unconstrained = -inf`) and is
/// only meant for fixed noise variances; such parameters are never learnable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParam {
    pub name: String,
    #[serde(with = "log_value")]
    unconstrained: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<GaussianPrior>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<(f64, f64)>,
    #[serde(default = "yes")]
    pub learnable: bool,
}

fn yes() -> bool {
    true
}

impl HyperParam {
    pub fn new(name: impl Into<String>, value: f64) -> Self {
        assert!(value >= 0.0 && value.is_finite(), "hyperparameter value must be finite and >= 0");
        Self {
            name: name.into(),
            unconstrained: value.ln(),
            prior: None,
            bounds: None,
            learnable: value > 0.0,
        }
    }

    pub fn fixed(name: impl Into<String>, value: f64) -> Self {
        Self { learnable: false, ..Self::new(name, value) }
    }

    pub fn value(&self) -> f64 {
        self.unconstrained.exp()
    }

    pub fn unconstrained(&self) -> f64 {
        self.unconstrained
    }

    pub fn set_value(&mut self, value: f64) {
        assert!(value >= 0.0 && value.is_finite());
        self.unconstrained = value.ln();
        if value == 0.0 {
            self.learnable = false;
        }
    }

    pub fn set_unconstrained(&mut self, u: f64) {
        self.unconstrained = u;
    }

    pub fn with_prior(mut self, prior: GaussianPrior) -> Self {
        self.prior = Some(prior);
        self
    }

    pub fn with_bounds(mut self, lo: f64, hi: f64) -> Self {
        assert!(lo > 0.0 && lo <= hi, "bounds must satisfy 0 < lo <= hi");
        self.bounds = Some((lo, hi));
        self.project();
        self
    }

    /// Log-space bounds, if any.
    pub fn unconstrained_bounds(&self) -> Option<(f64, f64)> {
        self.bounds.map(|(lo, hi)| (lo.ln(), hi.ln()))
    }

    /// Clamps the value into its bounds.
    pub fn project(&mut self) {
        if let Some((lo, hi)) = self.unconstrained_bounds() {
            self.unconstrained = self.unconstrained.clamp(lo, hi);
        }
    }

    pub fn log_prior(&self) -> f64 {
        self.prior.map_or(0.0, |p| p.log_density(self.unconstrained))
    }

    pub fn log_prior_grad(&self) -> f64 {
        self.prior.map_or(0.0, |p| p.grad(self.unconstrained))
    }
}

mod log_value {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(u: &f64, s: S) -> Result<S::Ok, S::Error> {
        if u.is_finite() {
            s.serialize_some(u)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_tracks_unconstrained() {
        let mut p = HyperParam::new("ell", 2.5);
        assert!((p.value() - 2.5).abs() < 1e-15);
        p.set_unconstrained(0.0);
        assert_eq!(p.value(), 1.0);
    }

    #[test]
    fn bounds_project() {
        let mut p = HyperParam::new("ell", 5.0).with_bounds(0.1, 2.0);
        assert!((p.value() - 2.0).abs() < 1e-12);
        p.set_unconstrained(-10.0);
        p.project();
        assert!((p.value() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn zero_value_is_fixed_and_serializes() {
        let p = HyperParam::new("noise", 0.0);
        assert!(!p.learnable);
        assert_eq!(p.value(), 0.0);
        let json = serde_json::to_string(&p).unwrap();
        let back: HyperParam = serde_json::from_str(&json).unwrap();
        assert_eq!(back.value(), 0.0);
    }

    #[test]
    fn standard_normal_prior_log_density() {
        let p = GaussianPrior::new(0.0, 1.0);
        assert!((p.log_density(0.0) + 0.918_938_533_204_672_7).abs() < 1e-12);
        assert!((p.log_density(1.0) + 1.418_938_533_204_672_7).abs() < 1e-12);
    }
}
