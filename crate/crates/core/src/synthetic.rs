//! Synthetic samplers with known ground truth, used to validate the
//! calibrators and the calibration-error estimators.

use rand::Rng;

use crate::rng::{rng_for, sample_standard_normal};
use crate::tensor::Tensor;

/// Draws (logits, label) pairs where softmax(logits) IS the true posterior:
/// logits have iid N(0, spread^2) entries and the label is sampled from
/// softmax(logits). The NLL-optimal temperature for this data is 1, and for
/// logits scaled by k it is exactly k.
pub fn sample_true_posterior_logits(
    n: usize,
    classes: usize,
    spread: f64,
    seed: u64,
) -> (Vec<Tensor>, Vec<usize>) {
    let mut rng = rng_for(seed, &["true-posterior-logits"]);
    let mut logits = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let zs: Vec<f64> = (0..classes)
            .map(|_| spread * sample_standard_normal(&mut rng))
            .collect();
        let m = zs.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let exps: Vec<f64> = zs.iter().map(|&z| (z - m).exp()).collect();
        let total: f64 = exps.iter().sum();
        let mut u: f64 = rng.random::<f64>() * total;
        let mut label = classes - 1;
        for (i, &e) in exps.iter().enumerate() {
            if u < e {
                label = i;
                break;
            }
            u -= e;
        }
        logits.push(Tensor::new(vec![classes], zs.iter().map(|&z| z as f32).collect()).unwrap());
        labels.push(label);
    }
    (logits, labels)
}

/// Multiplies every logit vector by k (injected miscalibration with
/// ground-truth optimal temperature k).
pub fn sharpen_logits(logits: &[Tensor], k: f32) -> Vec<Tensor> {
    logits.iter().map(|l| l.map(|v| v * k)).collect()
}

/// Perfectly calibrated confidence sampler: confidence u ~ U[0.5, 1] and
/// the prediction is correct with probability exactly u.
pub fn sample_calibrated_confidences(n: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut rng = rng_for(seed, &["calibrated-confidences"]);
    let mut conf = Vec::with_capacity(n);
    let mut correct = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = 0.5 + 0.5 * rng.random::<f64>();
        conf.push(u);
        correct.push(rng.random::<f64>() < u);
    }
    (conf, correct)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn posterior_sampler_is_deterministic_and_in_range() {
        let (la, ya) = sample_true_posterior_logits(50, 3, 2.0, 7);
        let (lb, yb) = sample_true_posterior_logits(50, 3, 2.0, 7);
        assert_eq!(ya, yb);
        for (a, b) in la.iter().zip(&lb) {
            assert_eq!(a.data(), b.data());
        }
        assert!(ya.iter().all(|&y| y < 3));
    }

    #[test]
    fn calibrated_confidences_have_matching_accuracy() {
        let (conf, correct) = sample_calibrated_confidences(20_000, 5);
        let mean_conf: f64 = conf.iter().sum::<f64>() / conf.len() as f64;
        let acc = correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64;
        assert!((mean_conf - acc).abs() < 0.01, "{mean_conf} vs {acc}");
    }
}
