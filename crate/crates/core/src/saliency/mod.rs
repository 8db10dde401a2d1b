//! Saliency methods: each produces a min-max-normalized H x W importance
//! map for a (model variant, sample, explained class) triple.

mod grad;
pub mod io;
mod lrp;
mod mp;
mod rise;

pub use grad::{integrated_gradients, integrated_gradients_detailed, sensitivity, IgAttribution};
pub use lrp::{lrp, lrp_detailed, LrpOutcome};
pub use mp::{meaningful_perturbation, meaningful_perturbation_detailed, MpOutcome};
pub use rise::{bicubic_upsample, rise, rise_with_masks, sample_rise_masks};

use crate::calibration::{ModelVariant, VariantTag};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    Sensitivity,
    IntegratedGradients,
    Rise,
    MeaningfulPerturbation,
    Lrp,
    /// Degenerate all-zero map; a baseline for pipeline and stability tests.
    Constant,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Sensitivity => "sensitivity",
            Method::IntegratedGradients => "integrated_gradients",
            Method::Rise => "rise",
            Method::MeaningfulPerturbation => "meaningful_perturbation",
            Method::Lrp => "lrp",
            Method::Constant => "constant",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Ok(match s {
            "sensitivity" => Method::Sensitivity,
            "integrated_gradients" => Method::IntegratedGradients,
            "rise" => Method::Rise,
            "meaningful_perturbation" => Method::MeaningfulPerturbation,
            "lrp" => Method::Lrp,
            "constant" => Method::Constant,
            other => {
                return Err(Error::Config(format!(
                    "unknown method '{other}' (expected sensitivity, integrated_gradients, \
                     rise, meaningful_perturbation, lrp, or constant)"
                )))
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct SaliencyMap {
    /// H x W values in [0, 1] (all zeros for a constant raw map).
    pub values: Tensor,
    pub explained_class: usize,
    pub method: Method,
    pub variant: VariantTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IgReference {
    Black,
    White,
}

impl IgReference {
    pub fn as_str(&self) -> &'static str {
        match self {
            IgReference::Black => "black",
            IgReference::White => "white",
        }
    }

    fn value(&self) -> f32 {
        match self {
            IgReference::Black => 0.0,
            IgReference::White => 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SensitivityConfig {
    /// Take |.| of the channel sum before normalization (off by default:
    /// the channel sum is signed).
    pub absolute: bool,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        SensitivityConfig { absolute: false }
    }
}

#[derive(Debug, Clone)]
pub struct IgConfig {
    pub steps: usize,
    pub references: Vec<IgReference>,
}

impl Default for IgConfig {
    fn default() -> Self {
        IgConfig {
            steps: 30,
            references: vec![IgReference::Black, IgReference::White],
        }
    }
}

#[derive(Debug, Clone)]
pub struct RiseConfig {
    pub masks: usize,
    pub mask_size: usize,
    pub keep_probability: f64,
}

impl Default for RiseConfig {
    fn default() -> Self {
        RiseConfig {
            masks: 4000,
            mask_size: 8,
            keep_probability: 0.6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MpConfig {
    pub l1_coeff: f64,
    pub tv_coeff: f64,
    pub learning_rate: f64,
    pub steps: usize,
}

impl Default for MpConfig {
    fn default() -> Self {
        MpConfig {
            l1_coeff: 0.1,
            tv_coeff: 0.4,
            learning_rate: 0.1,
            steps: 600,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LrpConfig {
    pub epsilon: f64,
}

impl Default for LrpConfig {
    fn default() -> Self {
        LrpConfig { epsilon: 1e-6 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct MethodConfigs {
    pub sensitivity: SensitivityConfig,
    pub ig: IgConfig,
    pub rise: RiseConfig,
    pub mp: MpConfig,
    pub lrp: LrpConfig,
}

/// (v - min) / (max - min); a constant input maps to all zeros so
/// downstream metrics never divide by zero.
pub fn normalize_minmax(raw: &Tensor) -> Tensor {
    let (lo, hi) = raw.min_max();
    if hi > lo {
        let range = hi - lo;
        raw.map(|v| (v - lo) / range)
    } else {
        Tensor::zeros(raw.shape().to_vec())
    }
}

/// Sums an [H, W, C] tensor over channels into [H, W] (f64 accumulation),
/// optionally taking absolute values first.
pub(crate) fn channel_sum(t: &Tensor, absolute: bool) -> Tensor {
    let s = t.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let mut out = vec![0f32; h * w];
    for p in 0..h * w {
        let mut acc = 0f64;
        for ch in 0..c {
            let v = t.data()[p * c + ch] as f64;
            acc += if absolute { v.abs() } else { v };
        }
        out[p] = acc as f32;
    }
    Tensor::new(vec![h, w], out).unwrap()
}

fn check_class(variant: &ModelVariant, class: usize) -> Result<()> {
    if class >= variant.classes() {
        return Err(Error::InvalidClass {
            class,
            classes: variant.classes(),
        });
    }
    Ok(())
}

/// Computes one saliency map. `seed` feeds the stochastic methods (RISE);
/// deterministic methods ignore it.
pub fn compute_saliency(
    variant: &ModelVariant,
    x: &Tensor,
    class: usize,
    method: Method,
    configs: &MethodConfigs,
    seed: u64,
) -> Result<SaliencyMap> {
    check_class(variant, class)?;
    match method {
        Method::Sensitivity => sensitivity(variant, x, class, &configs.sensitivity),
        Method::IntegratedGradients => integrated_gradients(variant, x, class, &configs.ig),
        Method::Rise => rise(variant, x, class, &configs.rise, seed),
        Method::MeaningfulPerturbation => {
            meaningful_perturbation(variant, x, class, &configs.mp, seed)
        }
        Method::Lrp => lrp(variant, x, class, &configs.lrp),
        Method::Constant => {
            let s = x.shape();
            Ok(SaliencyMap {
                values: Tensor::zeros(vec![s[0], s[1]]),
                explained_class: class,
                method,
                variant: variant.tag(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_maps_range_to_unit_interval() {
        let t = Tensor::new(vec![1, 3], vec![0.0, 5.0, 10.0]).unwrap();
        let n = normalize_minmax(&t);
        assert_eq!(n.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn normalize_constant_gives_zeros() {
        let t = Tensor::new(vec![2, 2], vec![0.7; 4]).unwrap();
        let n = normalize_minmax(&t);
        assert!(n.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_hits_exact_bounds() {
        let t = Tensor::new(vec![1, 4], vec![-3.0, 1.0, 2.0, 9.5]).unwrap();
        let n = normalize_minmax(&t);
        let (lo, hi) = n.min_max();
        assert_eq!(lo, 0.0);
        assert_eq!(hi, 1.0);
    }

    #[test]
    fn channel_sum_is_signed_by_default() {
        let t = Tensor::new(vec![1, 1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        assert_eq!(channel_sum(&t, false).data(), &[-0.5]);
        assert_eq!(channel_sum(&t, true).data(), &[3.5]);
    }

    #[test]
    fn method_names_round_trip() {
        for m in [
            Method::Sensitivity,
            Method::IntegratedGradients,
            Method::Rise,
            Method::MeaningfulPerturbation,
            Method::Lrp,
            Method::Constant,
        ] {
            assert_eq!(Method::parse(m.as_str()).unwrap(), m);
        }
        assert!(Method::parse("gradcam").is_err());
    }
}
