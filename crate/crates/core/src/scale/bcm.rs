use serde::{Deserialize, Serialize};

use super::ScaleError;
use crate::gp::PredictiveDistribution;

/// How expert predictions are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Bcm,
    #[default]
    RobustBcm,
}

/// Latent predictive marginals of one expert, with its prior at the same
/// test points.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertMarginals {
    pub mean: Vec<f64>,
    pub latent_var: Vec<f64>,
    pub prior_mean: Vec<f64>,
    pub prior_var: Vec<f64>,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregated {
    pub prediction: PredictiveDistribution,
    /// Test points where the combined precision was not positive and the
    /// prior was returned instead.
    pub fallbacks: usize,
}

/// Combines expert predictions point by point, in expert order.
///
/// With a shared prior `p` the BCM precision is `Σ σ_k⁻² + (1 − M)/p`. With
/// per-expert priors each expert contributes `σ_k⁻² − p_k⁻¹` and the mean
/// prior `p̄` is added back once. The robust variant weights expert `k` by
/// `β_k = max(0, ½(log p_k − log σ_k²))` and adds `(1 − Σβ_k)/p̄`. Prior
/// means enter the same way as prior precisions, so a zero prior mean gives
/// the textbook forms. A single expert is returned unchanged.
pub fn aggregate(experts: &[ExpertMarginals], aggregation: Aggregation, shared: bool) -> Result<Aggregated, ScaleError> {
    let Some(first) = experts.first() else {
        return Err(ScaleError::NoExperts);
    };
    let n = first.mean.len();
    let big_m = experts.len() as f64;
    let noise = experts.iter().map(|e| e.noise).sum::<f64>() / big_m;
    let mut out = PredictiveDistribution {
        mean: Vec::with_capacity(n),
        latent_var: Vec::with_capacity(n),
        obs_var: Vec::with_capacity(n),
        clamped: 0,
    };
    if experts.len() == 1 {
        out.mean = first.mean.clone();
        out.latent_var = first.latent_var.clone();
        out.obs_var = first.latent_var.iter().map(|v| v + first.noise).collect();
        return Ok(Aggregated { prediction: out, fallbacks: 0 });
    }
    let mut fallbacks = 0;
    for i in 0..n {
        let p_bar = experts.iter().map(|e| e.prior_var[i]).sum::<f64>() / big_m;
        let m_bar = experts.iter().map(|e| e.prior_mean[i]).sum::<f64>() / big_m;
        let mut precision = 0.0;
        let mut weighted = 0.0;
        match aggregation {
            Aggregation::Bcm if shared => {
                for e in experts {
                    precision += 1.0 / e.latent_var[i];
                    weighted += e.mean[i] / e.latent_var[i];
                }
                precision += (1.0 - big_m) / p_bar;
                weighted += (1.0 - big_m) * m_bar / p_bar;
            }
            Aggregation::Bcm => {
                for e in experts {
                    precision += 1.0 / e.latent_var[i] - 1.0 / e.prior_var[i];
                    weighted += e.mean[i] / e.latent_var[i] - e.prior_mean[i] / e.prior_var[i];
                }
                precision += 1.0 / p_bar;
                weighted += m_bar / p_bar;
            }
            Aggregation::RobustBcm => {
                let mut beta_sum = 0.0;
                for e in experts {
                    let beta = robust_weight(e.prior_var[i], e.latent_var[i]);
                    beta_sum += beta;
                    precision += beta / e.latent_var[i];
                    weighted += beta * e.mean[i] / e.latent_var[i];
                }
                precision += (1.0 - beta_sum) / p_bar;
                weighted += (1.0 - beta_sum) * m_bar / p_bar;
            }
        }
        let (mean, var) = if precision > 0.0 && precision.is_finite() && weighted.is_finite() {
            (weighted / precision, 1.0 / precision)
        } else {
            fallbacks += 1;
            (m_bar, p_bar)
        };
        out.mean.push(mean);
        out.latent_var.push(var);
        out.obs_var.push(var + noise);
    }
    Ok(Aggregated { prediction: out, fallbacks })
}

/// Differential-entropy weight of an expert: zero when it knows nothing
/// beyond the prior.
pub(crate) fn robust_weight(prior_var: f64, latent_var: f64) -> f64 {
    (0.5 * (prior_var.ln() - latent_var.ln())).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn expert(mean: f64, var: f64, prior: f64) -> ExpertMarginals {
        ExpertMarginals { mean: vec![mean], latent_var: vec![var], prior_mean: vec![0.0], prior_var: vec![prior], noise: 0.1 }
    }

    #[test]
    fn two_identical_experts() {
        let e = expert(1.0, 0.5, 1.0);
        let a = aggregate(&[e.clone(), e], Aggregation::Bcm, true).unwrap().prediction;
        assert!((a.latent_var[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((a.mean[0] - 4.0 / 3.0).abs() < 1e-15);
        assert!((a.obs_var[0] - (1.0 / 3.0 + 0.1)).abs() < 1e-15);
    }

    #[test]
    fn uninformative_expert_cancels() {
        for (m, s) in [(0.7, 0.2), (-2.0, 0.01), (3.0, 0.9)] {
            for shared in [true, false] {
                let a = aggregate(&[expert(0.0, 1.0, 1.0), expert(m, s, 1.0)], Aggregation::Bcm, shared).unwrap();
                assert!((a.prediction.mean[0] - m).abs() < 1e-14);
                assert!((a.prediction.latent_var[0] - s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_expert_is_identity() {
        let e = ExpertMarginals {
            mean: vec![0.3, -1.0],
            latent_var: vec![0.2, 0.6],
            prior_mean: vec![0.0, 0.0],
            prior_var: vec![1.0, 1.0],
            noise: 0.05,
        };
        for agg in [Aggregation::Bcm, Aggregation::RobustBcm] {
            let a = aggregate(std::slice::from_ref(&e), agg, false).unwrap().prediction;
            assert_eq!(a.mean, e.mean);
            assert_eq!(a.latent_var, e.latent_var);
        }
    }

    #[test]
    fn robust_weight_sanity() {
        assert_eq!(robust_weight(2.0, 2.0), 0.0);
        assert_eq!(robust_weight(2.0, 3.0), 0.0);
        assert!(robust_weight(2.0, 0.5) > robust_weight(2.0, 1.0));
        // a know-nothing expert leaves a robust aggregate untouched
        let a = aggregate(&[expert(0.0, 1.0, 1.0), expert(0.4, 0.25, 1.0)], Aggregation::RobustBcm, true).unwrap();
        let b = 0.5 * 4f64.ln();
        let precision = b / 0.25 + (1.0 - b);
        assert!((a.prediction.latent_var[0] - 1.0 / precision).abs() < 1e-14);
        assert!((a.prediction.mean[0] - b * 0.4 / 0.25 / precision).abs() < 1e-14);
    }

    #[test]
    fn duplicated_experts_sharpen() {
        let e = expert(0.5, 0.3, 1.0);
        let a = aggregate(&[e.clone(), e], Aggregation::Bcm, true).unwrap();
        assert!(1.0 / a.prediction.latent_var[0] > 1.0 / 0.3);
    }

    #[test]
    fn non_positive_precision_falls_back_to_prior() {
        // independent priors: a confident-looking expert with a tiny prior
        let a = ExpertMarginals { mean: vec![1.0], latent_var: vec![0.9], prior_mean: vec![0.0], prior_var: vec![0.01], noise: 0.0 };
        let b = ExpertMarginals { mean: vec![1.0], latent_var: vec![5.0], prior_mean: vec![0.0], prior_var: vec![10.0], noise: 0.0 };
        let r = aggregate(&[a, b], Aggregation::Bcm, false).unwrap();
        assert_eq!(r.fallbacks, 1);
        assert!((r.prediction.latent_var[0] - 5.005).abs() < 1e-12);
        assert_eq!(r.prediction.mean[0], 0.0);
    }

    #[test]
    fn empty_is_an_error() {
        assert_eq!(aggregate(&[], Aggregation::Bcm, true), Err(ScaleError::NoExperts));
    }
}
