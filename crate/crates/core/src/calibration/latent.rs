//! Feature-conditioned temperature network.
//!
//! One hidden `tanh` layer maps a question's feature vector to a log
//! temperature; `tau = exp(z)` keeps every prediction strictly positive.
//! Training is plain full-batch gradient descent on the mean NLL of gold
//! options, with hand-derived gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::temperature::{floored_log_prob, NLL_PROB_FLOOR};
use super::{apply_temperature, CalibrationError, ConfidenceRecord, Result};

/// Bound on the network's log-temperature output, keeping `tau` finite.
const LOG_TAU_LIMIT: f64 = 20.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CalibrationError::InputDomain(
                "feature vector has a non-finite entry".into(),
            ));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Summary statistics of a question's option logits, used as the network
/// input: max, margin between the top two, softmax entropy, mean and
/// variance. Zero-padded (or truncated) to `feature_dim`.
pub fn logit_features(logits: &[f64], feature_dim: usize) -> Result<FeatureVector> {
    let probs = apply_temperature(logits, 1.0)?;
    let mut sorted = logits.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = logits.len() as f64;
    let mean = logits.iter().sum::<f64>() / n;
    let variance = logits.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
    let entropy = -probs.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>();
    let mut values = vec![sorted[0], sorted[0] - sorted[1], entropy, mean, variance];
    values.resize(feature_dim, 0.0);
    FeatureVector::new(values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentFitConfig {
    pub feature_dim: usize,
    pub hidden: usize,
    pub steps: usize,
    pub step_size: f64,
    pub seed: u64,
}

impl LatentFitConfig {
    pub fn new(feature_dim: usize, seed: u64) -> Self {
        Self {
            feature_dim,
            hidden: 16,
            steps: 500,
            step_size: 0.01,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentNet {
    pub feature_dim: usize,
    pub hidden: usize,
    /// Row-major `hidden x feature_dim`.
    pub hidden_weights: Vec<f64>,
    pub hidden_bias: Vec<f64>,
    pub output_weights: Vec<f64>,
    pub output_bias: f64,
}

struct Forward {
    hidden: Vec<f64>,
    log_tau: f64,
    saturated: bool,
}

impl LatentNet {
    /// Gaussian weights scaled by fan-in, zero biases, so the initial
    /// temperature is close to 1.
    pub fn seeded(feature_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = Normal::new(0.0, 1.0 / (feature_dim.max(1) as f64).sqrt()).expect("valid std");
        let w2 = Normal::new(0.0, 1.0 / (hidden.max(1) as f64).sqrt()).expect("valid std");
        let hidden_weights = (0..hidden * feature_dim).map(|_| w1.sample(&mut rng)).collect();
        let output_weights = (0..hidden).map(|_| w2.sample(&mut rng)).collect();
        Self {
            feature_dim,
            hidden,
            hidden_weights,
            hidden_bias: vec![0.0; hidden],
            output_weights,
            output_bias: 0.0,
        }
    }

    pub fn num_params(&self) -> usize {
        self.hidden * self.feature_dim + 2 * self.hidden + 1
    }

    /// Parameters flattened as `[hidden_weights, hidden_bias, output_weights, output_bias]`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        p.extend_from_slice(&self.hidden_weights);
        p.extend_from_slice(&self.hidden_bias);
        p.extend_from_slice(&self.output_weights);
        p.push(self.output_bias);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.num_params(), "parameter vector length");
        let (w1, rest) = p.split_at(self.hidden * self.feature_dim);
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, b2) = rest.split_at(self.hidden);
        self.hidden_weights.copy_from_slice(w1);
        self.hidden_bias.copy_from_slice(b1);
        self.output_weights.copy_from_slice(w2);
        self.output_bias = b2[0];
    }

    fn forward(&self, x: &[f64]) -> Forward {
        let hidden: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let row = &self.hidden_weights[j * self.feature_dim..(j + 1) * self.feature_dim];
                let a = self.hidden_bias[j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
                a.tanh()
            })
            .collect();
        let z = self.output_bias + self.output_weights.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>();
        Forward {
            hidden,
            log_tau: z.clamp(-LOG_TAU_LIMIT, LOG_TAU_LIMIT),
            saturated: z.abs() > LOG_TAU_LIMIT,
        }
    }

    pub fn tau(&self, x: &FeatureVector) -> Result<f64> {
        if x.dim() != self.feature_dim {
            return Err(CalibrationError::InputDomain(format!(
                "feature dimension {} does not match network input {}",
                x.dim(),
                self.feature_dim
            )));
        }
        Ok(self.forward(x.values()).log_tau.exp())
    }

    /// Mean NLL over the records and its gradient with respect to
    /// [`params`](Self::params).
    pub fn nll_and_gradient(&self, features: &[FeatureVector], records: &[ConfidenceRecord]) -> (f64, Vec<f64>) {
        let d = self.feature_dim;
        let h = self.hidden;
        let n = records.len() as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.num_params()];
        let floor = NLL_PROB_FLOOR.ln();

        for (x, r) in features.iter().zip(records) {
            let x = x.values();
            let fwd = self.forward(x);
            let tau = fwd.log_tau.exp();
            let log_p = floored_log_prob(&r.option_logits, r.gold, tau);
            loss -= log_p;
            if log_p <= floor || fwd.saturated {
                continue;
            }
            // dL/dz = (l_gold - E_p[l]) / tau
            let probs = apply_temperature(&r.option_logits, tau).expect("validated logits");
            let expected: f64 = probs.iter().zip(&r.option_logits).map(|(p, l)| p * l).sum();
            let dz = (r.option_logits[r.gold] - expected) / tau / n;

            let (g_w1, rest) = grad.split_at_mut(h * d);
            let (g_b1, rest) = rest.split_at_mut(h);
            let (g_w2, g_b2) = rest.split_at_mut(h);
            g_b2[0] += dz;
            for j in 0..h {
                g_w2[j] += dz * fwd.hidden[j];
                let da = dz * self.output_weights[j] * (1.0 - fwd.hidden[j] * fwd.hidden[j]);
                g_b1[j] += da;
                for k in 0..d {
                    g_w1[j * d + k] += da * x[k];
                }
            }
        }
        (loss / n, grad)
    }

    pub fn mean_nll(&self, features: &[FeatureVector], records: &[ConfidenceRecord]) -> f64 {
        let total: f64 = features
            .iter()
            .zip(records)
            .map(|(x, r)| -floored_log_prob(&r.option_logits, r.gold, self.forward(x.values()).log_tau.exp()))
            .sum();
        total / records.len() as f64
    }

    /// Full-batch gradient descent. Returns the lowest-loss parameters seen,
    /// so the final NLL never exceeds the initial one.
    pub(crate) fn train(features: &[FeatureVector], records: &[ConfidenceRecord], config: &LatentFitConfig) -> Self {
        let mut net = Self::seeded(config.feature_dim, config.hidden, config.seed);
        let mut params = net.params();
        let mut best = params.clone();
        let mut best_loss = f64::INFINITY;
        for _ in 0..config.steps {
            net.set_params(&params);
            let (loss, grad) = net.nll_and_gradient(features, records);
            if loss < best_loss {
                best_loss = loss;
                best.clone_from(&params);
            }
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= config.step_size * g;
            }
        }
        net.set_params(&params);
        if net.mean_nll(features, records) < best_loss {
            return net;
        }
        net.set_params(&best);
        net
    }
}
