//! Supervised fitting: gradient ascent on the log-likelihood of target
//! decisions (mode, tool and song choices).

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::policy::{Decision, PolicyParams};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// L2 pull toward zero, applied per step.
    pub l2: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig { seed: 0, epochs: 3, batch_size: 32, learning_rate: 0.5, l2: 0.0 }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid_config("sft.batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid_config("sft.learning_rate must be > 0"));
        }
        if !(self.l2 >= 0.0) {
            return Err(invalid_config("sft.l2 must be >= 0"));
        }
        Ok(())
    }
}

/// Mean log-likelihood of every decision in `examples`.
pub fn mean_log_likelihood(params: &PolicyParams, examples: &[Vec<Decision>]) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for ex in examples {
        for d in ex {
            s += d.log_prob(params);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Minibatch ascent; each example is a sequence of target decisions whose
/// log-likelihoods are summed.
pub fn fit(init: &PolicyParams, examples: &[Vec<Decision>], cfg: &SftConfig) -> Result<PolicyParams> {
    let ones: Vec<Vec<f64>> = examples.iter().map(|e| vec![1.0; e.len()]).collect();
    fit_weighted(init, examples, &ones, cfg)
}

/// As [`fit`], with one loss weight per decision.
pub fn fit_weighted(
    init: &PolicyParams,
    examples: &[Vec<Decision>],
    weights: &[Vec<f64>],
    cfg: &SftConfig,
) -> Result<PolicyParams> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(invalid_input("empty supervised dataset"));
    }
    if weights.len() != examples.len() || weights.iter().zip(examples).any(|(w, e)| w.len() != e.len()) {
        return Err(invalid_input("sft weights must align with decisions"));
    }
    let mut params = init.clone();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = stream(cfg.seed, "sft-shuffle", epoch as u64);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; params.num_params()];
            for &i in batch {
                for (d, &w) in examples[i].iter().zip(&weights[i]) {
                    d.add_grad_log_prob(&params, w, &mut grad);
                }
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::UpdateRejected("non-finite supervised gradient".into()));
            }
            let scale = cfg.learning_rate / batch.len() as f64;
            let flat: Vec<f64> = params
                .flatten()
                .iter()
                .zip(&grad)
                .map(|(w, g)| w * (1.0 - cfg.learning_rate * cfg.l2) + scale * g)
                .collect();
            params = params.with_flat(&flat);
            params.version += 1;
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::FeatureMatrix;
    use std::sync::Arc;

    #[test]
    fn fitting_raises_likelihood() {
        let p = PolicyParams::zeros(2, 2);
        let pool = Arc::new(FeatureMatrix::from_rows(2, &[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]]).unwrap());
        let psi = Arc::new(vec![1.0, 0.0]);
        let ex: Vec<Vec<Decision>> = (0..10)
            .map(|_| {
                vec![
                    Decision::Song { pool: pool.clone(), excluded: vec![], chosen: 0 },
                    Decision::Mode { psi: psi.clone(), agentic: false },
                ]
            })
            .collect();
        let before = mean_log_likelihood(&p, &ex);
        let q = fit(&p, &ex, &SftConfig { epochs: 5, ..Default::default() }).unwrap();
        assert!(mean_log_likelihood(&q, &ex) > before);
        assert!(q.tool_prob(&psi) < 0.5);
        assert_eq!(fit(&p, &ex, &SftConfig::default()).unwrap(), fit(&p, &ex, &SftConfig::default()).unwrap());
        assert!(fit(&p, &[], &SftConfig::default()).is_err());
    }
}
