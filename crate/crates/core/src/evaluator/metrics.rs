use serde::{Deserialize, Serialize};

use super::protocol::Branch;
use crate::data::EpisodeSpec;

/// Half-width of the normal-approximation 95% interval, `1.96·std/√n`, with
/// the population standard deviation.
pub fn ci95(values: &[f64]) -> f64 {
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    1.96 * var.sqrt() / (n as f64).sqrt()
}

/// Accuracy of one branch over a set of episodes, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub branch: Branch,
    pub spec: EpisodeSpec,
    pub n_episodes: usize,
    pub mean_accuracy: f64,
    pub ci95: f64,
    pub per_episode: Vec<f64>,
}

impl EvalResult {
    pub fn from_episodes(branch: Branch, spec: EpisodeSpec, per_episode: Vec<f64>) -> Self {
        let n = per_episode.len();
        let mean = if n == 0 { 0.0 } else { per_episode.iter().sum::<f64>() / n as f64 };
        Self {
            branch,
            spec,
            n_episodes: n,
            mean_accuracy: mean,
            ci95: ci95(&per_episode),
            per_episode,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_accuracies_have_zero_interval() {
        assert_eq!(ci95(&[100.0; 10]), 0.0);
    }

    #[test]
    fn two_point_interval() {
        // std of {0, 100} is 50
        assert!((ci95(&[0.0, 100.0]) - 1.96 * 50.0 / 2f64.sqrt()).abs() < 1e-12);
    }
}
