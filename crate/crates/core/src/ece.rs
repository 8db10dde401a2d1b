//! Expected calibration error estimators and reliability curves.

use crate::error::{Error, Result};

pub const DEFAULT_ECE_BINS: usize = 15;
const DENSITY_GRID_POINTS: usize = 1000;

/// Binned ECE over equal-width bins on [0, 1]: sum of
/// (n_b / n) * |accuracy_b - mean confidence_b|. Empty bins contribute 0.
pub fn ece_binned(confidences: &[f64], correct: &[bool], n_bins: usize) -> Result<f64> {
    if confidences.is_empty() {
        return Err(Error::EmptyInput("ece_binned confidences"));
    }
    if confidences.len() != correct.len() {
        return Err(Error::InvalidArgument(
            "confidences and outcomes must have equal length".into(),
        ));
    }
    if n_bins == 0 {
        return Err(Error::InvalidArgument("n_bins must be >= 1".into()));
    }
    for &c in confidences {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::InvalidArgument(format!(
                "confidence {c} outside [0, 1]"
            )));
        }
    }
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0f64; n_bins];
    let mut correct_sum = vec![0usize; n_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = ((c * n_bins as f64) as usize).min(n_bins - 1);
        count[b] += 1;
        conf_sum[b] += c;
        correct_sum[b] += ok as usize;
    }
    let n = confidences.len() as f64;
    let mut ece = 0f64;
    for b in 0..n_bins {
        if count[b] == 0 {
            continue;
        }
        let acc = correct_sum[b] as f64 / count[b] as f64;
        let conf = conf_sum[b] / count[b] as f64;
        ece += (count[b] as f64 / n) * (acc - conf).abs();
    }
    Ok(ece)
}

/// Reliability curve: kernel-regression estimate of accuracy given
/// confidence, with the kernel density over the same grid.
#[derive(Debug, Clone)]
pub struct ReliabilityCurve {
    /// Strictly increasing confidence grid (single point if the
    /// confidences are constant).
    pub grid: Vec<f64>,
    /// Nadaraya-Watson estimate of P(correct | confidence = s).
    pub accuracy: Vec<f64>,
    /// Gaussian kernel density estimate of the confidence distribution.
    pub density: Vec<f64>,
    /// Silverman bandwidth actually used (0 for the degenerate case).
    pub bandwidth: f64,
}

fn sample_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    var.sqrt()
}

fn kernel_curve(confidences: &[f64], correct: &[bool]) -> Result<ReliabilityCurve> {
    if confidences.len() < 10 {
        return Err(Error::InvalidArgument(
            "density estimators need >= 10 samples".into(),
        ));
    }
    if confidences.len() != correct.len() {
        return Err(Error::InvalidArgument(
            "confidences and outcomes must have equal length".into(),
        ));
    }
    let n = confidences.len();
    let sigma = sample_std(confidences);
    if sigma == 0.0 {
        // degenerate: a single observed confidence value
        let acc = correct.iter().filter(|&&c| c).count() as f64 / n as f64;
        return Ok(ReliabilityCurve {
            grid: vec![confidences[0]],
            accuracy: vec![acc],
            density: vec![1.0],
            bandwidth: 0.0,
        });
    }
    // Silverman's rule
    let h = 1.06 * sigma * (n as f64).powf(-0.2);
    let lo = confidences.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = 1.0;
    let steps = DENSITY_GRID_POINTS - 1;
    let dx = (hi - lo) / steps as f64;
    let mut grid = Vec::with_capacity(DENSITY_GRID_POINTS);
    let mut accuracy = Vec::with_capacity(DENSITY_GRID_POINTS);
    let mut density = Vec::with_capacity(DENSITY_GRID_POINTS);
    let norm = 1.0 / ((n as f64) * h * (2.0 * std::f64::consts::PI).sqrt());
    for k in 0..DENSITY_GRID_POINTS {
        let s = lo + dx * k as f64;
        let mut wsum = 0f64;
        let mut wacc = 0f64;
        for (&c, &ok) in confidences.iter().zip(correct) {
            let t = (s - c) / h;
            let w = (-0.5 * t * t).exp();
            wsum += w;
            if ok {
                wacc += w;
            }
        }
        grid.push(s);
        accuracy.push(if wsum > 0.0 { wacc / wsum } else { s });
        density.push(norm * wsum);
    }
    Ok(ReliabilityCurve {
        grid,
        accuracy,
        density,
        bandwidth: h,
    })
}

/// Continuous ECE: integral of |accuracy(s) - s| against the estimated
/// confidence density, by trapezoid over the reliability-curve grid.
/// Falls back to the binned estimator when the confidences are constant.
pub fn ece_density(confidences: &[f64], correct: &[bool]) -> Result<f64> {
    let curve = kernel_curve(confidences, correct)?;
    if curve.bandwidth == 0.0 {
        log::warn!("ece_density: zero confidence variance, falling back to binned estimator");
        return ece_binned(confidences, correct, DEFAULT_ECE_BINS);
    }
    let mut total = 0f64;
    for k in 1..curve.grid.len() {
        let f0 = (curve.accuracy[k - 1] - curve.grid[k - 1]).abs() * curve.density[k - 1];
        let f1 = (curve.accuracy[k] - curve.grid[k]).abs() * curve.density[k];
        total += 0.5 * (f0 + f1) * (curve.grid[k] - curve.grid[k - 1]);
    }
    Ok(total)
}

/// The (accuracy, density) pair from the density-ECE computation, exposed
/// for plotting.
pub fn reliability_curve(confidences: &[f64], correct: &[bool]) -> Result<ReliabilityCurve> {
    kernel_curve(confidences, correct)
}
