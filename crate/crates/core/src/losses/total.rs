use serde::{Deserialize, Serialize};

use super::elastic::ElasticConfig;
use super::proto::MetricConfig;
use crate::error::{BmlError, Result};

/// Weights of the global, local and mutual terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 4.0,
            beta: 2.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.gamma].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(BmlError::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Per-step loss scalars, written one per line to the run log.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub global_loss: f64,
    pub local_loss: f64,
    pub mutual_loss: f64,
    pub total_loss: f64,
    pub mean_delta: f64,
    pub mean_d_el: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.global_loss, self.local_loss, self.mutual_loss, self.total_loss]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Everything the objective needs besides the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub elastic: ElasticConfig,
    pub metric: MetricConfig,
    pub mutual_temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            elastic: ElasticConfig::default(),
            metric: MetricConfig::default(),
            mutual_temperature: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.metric.validate()?;
        if !(self.mutual_temperature > 0.0 && self.mutual_temperature.is_finite()) {
            return Err(BmlError::Config("mutual temperature must be positive".into()));
        }
        Ok(())
    }
}

/// `α·global + β·local + γ·mutual`. A non-finite component or total is a
/// hard error carrying the partially filled report.
pub fn total_loss(global: f64, local: f64, mutual: f64, weights: &LossWeights) -> Result<(f64, LossReport)> {
    let total = weights.alpha * global + weights.beta * local + weights.gamma * mutual;
    let report = LossReport {
        global_loss: global,
        local_loss: local,
        mutual_loss: mutual,
        total_loss: total,
        ..LossReport::default()
    };
    if !report.is_finite() {
        return Err(BmlError::Diverged(report));
    }
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_components_with_default_weights() {
        let (t, r) = total_loss(1.0, 1.0, 1.0, &LossWeights::default()).unwrap();
        assert_eq!(t, 7.0);
        assert_eq!(r.total_loss, 7.0);
    }

    #[test]
    fn nan_component_is_an_error() {
        let err = total_loss(f64::NAN, 1.0, 1.0, &LossWeights::default()).unwrap_err();
        assert!(matches!(err, BmlError::Diverged(r) if r.local_loss == 1.0));
    }
}
