use super::latent::{FeatureVector, LatentFitConfig, LatentNet};
use super::{ordered_sum, CalibrationError, ConfidenceRecord, Result};

/// Lower end of the temperature search range.
pub const TAU_MIN: f64 = 0.05;
/// Upper end of the temperature search range.
pub const TAU_MAX: f64 = 20.0;
/// Probability floor used inside the negative log-likelihood.
pub const NLL_PROB_FLOOR: f64 = 1e-12;

const LOG_TAU_TOLERANCE: f64 = 1e-4;

/// A fitted temperature: one global value, or a small network that predicts
/// a temperature per question from its feature vector.
#[derive(Debug, Clone, PartialEq)]
pub enum TemperatureModel {
    Scalar { tau: f64 },
    Latent(LatentNet),
}

impl TemperatureModel {
    pub fn scalar(tau: f64) -> Result<Self> {
        if !(TAU_MIN..=TAU_MAX).contains(&tau) {
            return Err(CalibrationError::InputDomain(format!(
                "scalar temperature {tau} outside [{TAU_MIN}, {TAU_MAX}]"
            )));
        }
        Ok(Self::Scalar { tau })
    }

    pub fn is_latent(&self) -> bool {
        matches!(self, Self::Latent(_))
    }

    /// Temperature for one question. Latent models need its features.
    pub fn tau_for(&self, features: Option<&FeatureVector>) -> Result<f64> {
        match self {
            Self::Scalar { tau } => Ok(*tau),
            Self::Latent(net) => {
                let x = features.ok_or_else(|| {
                    CalibrationError::InputDomain("latent temperature model requires features".into())
                })?;
                net.tau(x)
            }
        }
    }
}

/// `softmax(logits / tau)` with max-subtraction.
pub fn apply_temperature(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(CalibrationError::InputDomain(format!(
            "temperature {tau} must be positive and finite"
        )));
    }
    if logits.len() < 2 {
        return Err(CalibrationError::InputDomain(format!(
            "need at least 2 logits, got {}",
            logits.len()
        )));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(CalibrationError::InputDomain("non-finite logit".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| ((l - max) / tau).exp()).collect();
    let sum = ordered_sum(&exps);
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// `log p(gold)` under `softmax(logits / tau)`, floored at `ln(NLL_PROB_FLOOR)`.
pub(crate) fn floored_log_prob(logits: &[f64], gold: usize, tau: f64) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| ((l - max) / tau).exp()).collect();
    let lse = ordered_sum(&exps).ln();
    let log_p = (logits[gold] - max) / tau - lse;
    log_p.max(NLL_PROB_FLOOR.ln())
}

/// Mean negative log-likelihood of the gold options at temperature `tau`.
pub fn mean_nll(records: &[ConfidenceRecord], tau: f64) -> f64 {
    let total: f64 = records
        .iter()
        .map(|r| -floored_log_prob(&r.option_logits, r.gold, tau))
        .sum();
    total / records.len() as f64
}

/// Golden-section search for the minimum of a unimodal `f` on `[lo, hi]`,
/// stopping once the bracket is narrower than `tol`. Returns `(x, f(x))`.
pub fn golden_section_minimize(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let (mut a, mut b) = (lo, hi);
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while b - a > tol {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = f(x2);
        }
    }
    let x = 0.5 * (a + b);
    (x, f(x))
}

fn check_fit_records(records: &[ConfidenceRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(CalibrationError::EmptyInput("validation set is empty"));
    }
    for r in records {
        if r.option_logits.len() < 2 || r.gold >= r.option_logits.len() {
            return Err(CalibrationError::InputDomain(format!(
                "{}: needs >= 2 logits and an in-range gold index",
                r.question_id
            )));
        }
        if r.option_logits.iter().any(|l| !l.is_finite()) {
            return Err(CalibrationError::InputDomain(format!(
                "{}: non-finite logit",
                r.question_id
            )));
        }
    }
    Ok(())
}

/// Fits one temperature by minimizing validation NLL over `log tau`.
///
/// NLL is convex in `1/tau`, hence unimodal in `log tau`, so a bounded
/// golden-section search finds the global minimizer. The range endpoints and
/// `tau = 1` are also evaluated so that degenerate sets clamp exactly and the
/// result is never worse than leaving the logits untouched.
pub fn fit_scalar_temperature(validation: &[ConfidenceRecord]) -> Result<TemperatureModel> {
    check_fit_records(validation)?;
    let nll_at_log = |log_tau: f64| mean_nll(validation, log_tau.exp());
    let (log_tau, _) = golden_section_minimize(nll_at_log, TAU_MIN.ln(), TAU_MAX.ln(), LOG_TAU_TOLERANCE);

    let candidates = [log_tau.exp().clamp(TAU_MIN, TAU_MAX), TAU_MIN, TAU_MAX, 1.0];
    let mut best = candidates[0];
    let mut best_nll = mean_nll(validation, best);
    for &tau in &candidates[1..] {
        let nll = mean_nll(validation, tau);
        if nll < best_nll {
            best = tau;
            best_nll = nll;
        }
    }
    Ok(TemperatureModel::Scalar { tau: best })
}

/// Trains the feature-conditioned temperature network on validation records.
pub fn fit_latent_temperature(
    features: &[FeatureVector],
    validation: &[ConfidenceRecord],
    config: &LatentFitConfig,
) -> Result<TemperatureModel> {
    if features.len() != validation.len() {
        return Err(CalibrationError::InputDomain(format!(
            "{} feature vectors for {} records",
            features.len(),
            validation.len()
        )));
    }
    check_fit_records(validation)?;
    if features.iter().any(|f| f.dim() != config.feature_dim) {
        return Err(CalibrationError::InputDomain(format!(
            "every feature vector must have dimension {}",
            config.feature_dim
        )));
    }
    Ok(TemperatureModel::Latent(LatentNet::train(features, validation, config)))
}

/// Rescales each record's probabilities with the model's temperature. The
/// chosen option is kept; confidence becomes its rescaled probability.
pub fn recalibrate_records(
    records: &[ConfidenceRecord],
    model: &TemperatureModel,
    features: Option<&[FeatureVector]>,
) -> Result<Vec<ConfidenceRecord>> {
    if let TemperatureModel::Latent(_) = model {
        match features {
            Some(f) if f.len() == records.len() => {}
            Some(f) => {
                return Err(CalibrationError::InputDomain(format!(
                    "{} feature vectors for {} records",
                    f.len(),
                    records.len()
                )))
            }
            None => {
                return Err(CalibrationError::InputDomain(
                    "latent temperature model requires per-record features".into(),
                ))
            }
        }
    }
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let tau = model.tau_for(features.map(|f| &f[i]))?;
            let option_probs = apply_temperature(&r.option_logits, tau)
                .map_err(|e| CalibrationError::InputDomain(format!("{}: {e}", r.question_id)))?;
            Ok(ConfidenceRecord {
                confidence: option_probs[r.chosen],
                option_probs,
                ..r.clone()
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn uniform_logits_give_uniform_probs() {
        let p = apply_temperature(&[0.0; 4], 1.0).unwrap();
        assert!(close(&p, &[0.25; 4], 1e-15));
    }

    #[test]
    fn huge_temperature_flattens() {
        let p = apply_temperature(&[2.0, 1.0, 0.0, 0.0], 1e6).unwrap();
        assert!(p.iter().all(|x| (x - 0.25).abs() <= 1e-5));
    }

    #[test]
    fn tau_twenty_flattens_small_logits() {
        // Extreme logit patterns at magnitude 2 for every option count.
        for k in 2..=26 {
            for high in 1..k {
                let logits: Vec<f64> = (0..k).map(|i| if i < high { 2.0 } else { -2.0 }).collect();
                let p = apply_temperature(&logits, 20.0).unwrap();
                assert!(p.iter().all(|x| (x - 1.0 / k as f64).abs() <= 0.05), "k {k}: {p:?}");
            }
        }
    }

    #[test]
    fn tau_two_matches_direct_softmax() {
        let p = apply_temperature(&[2.0, 1.0, 0.0, 0.0], 2.0).unwrap();
        // softmax(1, 0.5, 0, 0) evaluated by hand
        let e = [1f64.exp(), 0.5f64.exp(), 1.0, 1.0];
        let s: f64 = e.iter().sum();
        let direct: Vec<f64> = e.iter().map(|x| x / s).collect();
        assert!(close(&p, &direct, 1e-15));
        assert!(close(&p, &[0.4269, 0.2589, 0.1571, 0.1571], 1e-4));
    }

    #[test]
    fn apply_temperature_rejects_bad_inputs() {
        assert!(apply_temperature(&[1.0, 2.0], 0.0).is_err());
        assert!(apply_temperature(&[1.0, 2.0], -1.0).is_err());
        assert!(apply_temperature(&[1.0, 2.0], f64::NAN).is_err());
        assert!(apply_temperature(&[1.0, f64::INFINITY], 1.0).is_err());
        assert!(apply_temperature(&[1.0], 1.0).is_err());
    }

    #[test]
    fn extreme_logits_do_not_overflow() {
        let p = apply_temperature(&[1000.0, 999.0, -1000.0], 1.0).unwrap();
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn golden_section_finds_quadratic_minimum() {
        let (x, fx) = golden_section_minimize(|x| (x - 1.3).powi(2) + 2.0, -5.0, 5.0, 1e-8);
        assert!((x - 1.3).abs() < 1e-7);
        assert!((fx - 2.0).abs() < 1e-12);
    }

    fn rec(id: usize, logits: Vec<f64>, gold: usize) -> ConfidenceRecord {
        ConfidenceRecord::from_logits(format!("q{id}"), 0, logits, gold).unwrap()
    }

    #[test]
    fn all_correct_clamps_to_lower_bound() {
        let recs: Vec<_> = (0..20)
            .map(|i| rec(i, vec![1.0 + i as f64 * 0.1, 0.2, -0.5, 0.0], 0))
            .collect();
        let TemperatureModel::Scalar { tau } = fit_scalar_temperature(&recs).unwrap() else {
            panic!("expected scalar")
        };
        assert_eq!(tau, TAU_MIN);
    }

    #[test]
    fn all_wrong_clamps_to_upper_bound() {
        // gold is always the lowest logit, so flatter is always better
        let recs: Vec<_> = (0..20)
            .map(|i| rec(i, vec![1.5, 0.4, 0.2, -1.0 - i as f64 * 0.05], 3))
            .collect();
        let TemperatureModel::Scalar { tau } = fit_scalar_temperature(&recs).unwrap() else {
            panic!("expected scalar")
        };
        assert_eq!(tau, TAU_MAX);
    }

    #[test]
    fn empty_validation_is_rejected() {
        assert!(matches!(
            fit_scalar_temperature(&[]),
            Err(CalibrationError::EmptyInput(_))
        ));
    }

    #[test]
    fn recalibration_keeps_choice_and_updates_confidence() {
        let r = rec(0, vec![2.0, 1.0, 0.0, 0.0], 0);
        let out = recalibrate_records(std::slice::from_ref(&r), &TemperatureModel::Scalar { tau: 2.0 }, None).unwrap();
        assert_eq!(out[0].chosen, 0);
        assert!((out[0].confidence - 0.4269).abs() < 1e-4);
        out[0].validate().unwrap();

        let same = recalibrate_records(std::slice::from_ref(&r), &TemperatureModel::Scalar { tau: 1.0 }, None).unwrap();
        assert!(close(&same[0].option_probs, &r.option_probs, 1e-15));
    }

    #[test]
    fn scalar_constructor_enforces_range() {
        assert!(TemperatureModel::scalar(0.01).is_err());
        assert!(TemperatureModel::scalar(25.0).is_err());
        assert!(TemperatureModel::scalar(1.0).is_ok());
    }
}
