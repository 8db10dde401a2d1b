//! Gradient-based saliency: sensitivity and integrated gradients.

use super::{
    channel_sum, check_class, normalize_minmax, IgConfig, IgReference, Method, SaliencyMap,
    SensitivityConfig,
};
use crate::calibration::ModelVariant;
use crate::error::{Error, Result};
use crate::model::Workspace;
use crate::tensor::Tensor;

/// Channel-summed input gradient of the calibrated class score.
pub fn sensitivity(
    variant: &ModelVariant,
    x: &Tensor,
    class: usize,
    config: &SensitivityConfig,
) -> Result<SaliencyMap> {
    check_class(variant, class)?;
    let grad = variant.score_gradient(x, class)?;
    let raw = channel_sum(&grad, config.absolute);
    Ok(SaliencyMap {
        values: normalize_minmax(&raw),
        explained_class: class,
        method: Method::Sensitivity,
        variant: variant.tag(),
    })
}

/// Per-reference integrated-gradients data, for completeness checks.
#[derive(Debug)]
pub struct IgAttribution {
    pub reference: IgReference,
    /// Channel-summed raw attribution (not normalized).
    pub raw: Tensor,
    /// Sum of the raw attribution over all pixels and channels.
    pub attribution_sum: f64,
    /// F(x)_c - F(x^r)_c under the variant's calibrated scores.
    pub score_difference: f64,
}

/// Attribution along the straight path from each reference to the input:
/// (x - x^r) times the mean of gradients at x^r + (k/m)(x - x^r), k = 1..m.
pub fn integrated_gradients_detailed(
    variant: &ModelVariant,
    x: &Tensor,
    class: usize,
    config: &IgConfig,
) -> Result<Vec<IgAttribution>> {
    check_class(variant, class)?;
    if config.steps == 0 {
        return Err(Error::InvalidArgument(
            "integrated gradients needs >= 1 step".into(),
        ));
    }
    if config.references.is_empty() {
        return Err(Error::InvalidArgument(
            "integrated gradients needs >= 1 reference".into(),
        ));
    }
    let n = x.numel();
    let shape = x.shape().to_vec();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let mut ws = Workspace::default();
    let mut out = Vec::with_capacity(config.references.len());
    for &reference in &config.references {
        let r = reference.value();
        let m = config.steps;
        let mut grad_sum = vec![0f64; n];
        for k in 1..=m {
            let t = k as f64 / m as f64;
            let point = Tensor::new(
                shape.clone(),
                x.data()
                    .iter()
                    .map(|&v| (r as f64 + t * (v as f64 - r as f64)) as f32)
                    .collect(),
            )?;
            let g = variant.score_gradient(&point, class)?;
            for (s, &gv) in grad_sum.iter_mut().zip(g.data()) {
                *s += gv as f64;
            }
        }
        let mut attr = vec![0f32; n];
        let mut total = 0f64;
        for i in 0..n {
            let a = (x.data()[i] as f64 - r as f64) * grad_sum[i] / m as f64;
            attr[i] = a as f32;
            total += a;
        }
        let attr = Tensor::new(vec![h, w, c], attr)?;
        let score_x = variant.scores(x, &mut ws)?[class] as f64;
        let ref_image = Tensor::filled(shape.clone(), r);
        let score_r = variant.scores(&ref_image, &mut ws)?[class] as f64;
        out.push(IgAttribution {
            reference,
            raw: channel_sum(&attr, false),
            attribution_sum: total,
            score_difference: score_x - score_r,
        });
    }
    Ok(out)
}

/// The per-reference attributions averaged ("combined"), then normalized.
pub fn integrated_gradients(
    variant: &ModelVariant,
    x: &Tensor,
    class: usize,
    config: &IgConfig,
) -> Result<SaliencyMap> {
    let per_ref = integrated_gradients_detailed(variant, x, class, config)?;
    let hw = per_ref[0].raw.numel();
    let mut combined = vec![0f64; hw];
    for a in &per_ref {
        for (c, &v) in combined.iter_mut().zip(a.raw.data()) {
            *c += v as f64;
        }
    }
    let k = per_ref.len() as f64;
    let raw = Tensor::new(
        per_ref[0].raw.shape().to_vec(),
        combined.iter().map(|&v| (v / k) as f32).collect(),
    )?;
    Ok(SaliencyMap {
        values: normalize_minmax(&raw),
        explained_class: class,
        method: Method::IntegratedGradients,
        variant: variant.tag(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{Calibrator, ModelVariant, VariantTag};
    use crate::layers::{DenseLayer, Layer};
    use crate::model::ClassifierModel;
    use std::sync::Arc;

    /// dense+softmax over a 2x2 single-channel "image", 2 classes.
    fn linear_variant(weight: Vec<f32>) -> ModelVariant {
        let dense = DenseLayer::new(
            Tensor::new(vec![4, 2], weight).unwrap(),
            Tensor::new(vec![2], vec![0.0, 0.0]).unwrap(),
        )
        .unwrap();
        let model = ClassifierModel::new(
            vec![Layer::Flatten, Layer::Dense(dense), Layer::Softmax],
            [2, 2, 1],
            2,
        )
        .unwrap();
        ModelVariant::new(Arc::new(model), Calibrator::Identity, VariantTag::Uncalibrated)
    }

    #[test]
    fn sensitivity_matches_linear_closed_form() {
        // score_0 = sigma(Wx)_0; d score_0/dx = s0 s1 (w_col0 - w_col1)
        let w = vec![0.5, -0.2, -0.3, 0.4, 0.8, 0.1, 0.0, -0.6];
        let variant = linear_variant(w.clone());
        let x = Tensor::new(vec![2, 2, 1], vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let p = variant.predict(&x).unwrap();
        let (s0, s1) = (p.scores.data()[0] as f64, p.scores.data()[1] as f64);
        let mut expected = vec![0f64; 4];
        for i in 0..4 {
            expected[i] = s0 * s1 * (w[i * 2] as f64 - w[i * 2 + 1] as f64);
        }
        let grad = variant.score_gradient(&x, 0).unwrap();
        for (g, e) in grad.data().iter().zip(&expected) {
            assert!((*g as f64 - e).abs() < 1e-5, "{g} vs {e}");
        }
        // and the map is the min-max normalization of that closed form
        let map = sensitivity(&variant, &x, 0, &SensitivityConfig::default()).unwrap();
        let lo = expected.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = expected.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (m, e) in map.values.data().iter().zip(&expected) {
            assert!((*m as f64 - (e - lo) / (hi - lo)).abs() < 1e-5);
        }
    }

    #[test]
    fn sensitivity_constant_model_gives_zero_map() {
        let variant = linear_variant(vec![0.0; 8]);
        let x = Tensor::new(vec![2, 2, 1], vec![0.1, 0.9, 0.5, 0.3]).unwrap();
        let map = sensitivity(&variant, &x, 0, &SensitivityConfig::default()).unwrap();
        assert!(map.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ig_attribution_is_zero_at_the_reference() {
        let variant = linear_variant(vec![0.5, -0.2, -0.3, 0.4, 0.8, 0.1, 0.0, -0.6]);
        let x = Tensor::new(vec![2, 2, 1], vec![0.0; 4]).unwrap(); // = black reference
        let per_ref = integrated_gradients_detailed(
            &variant,
            &x,
            0,
            &IgConfig {
                steps: 5,
                references: vec![IgReference::Black],
            },
        )
        .unwrap();
        assert!(per_ref[0].raw.data().iter().all(|&v| v == 0.0));
        assert_eq!(per_ref[0].attribution_sum, 0.0);
    }

    #[test]
    fn ig_linear_model_matches_closed_form_with_black_reference() {
        // for logits Wx the path gradient varies only through the softmax;
        // with a single linear layer, attribution = x .* mean path gradient
        let w = vec![0.5, -0.2, -0.3, 0.4, 0.8, 0.1, 0.0, -0.6];
        let variant = linear_variant(w.clone());
        let x = Tensor::new(vec![2, 2, 1], vec![0.3, 0.9, 0.1, 0.7]).unwrap();
        let m = 200;
        let cfg = IgConfig {
            steps: m,
            references: vec![IgReference::Black],
        };
        let per_ref = integrated_gradients_detailed(&variant, &x, 0, &cfg).unwrap();
        // closed form: mean over k of s0(k) s1(k) (w_col0 - w_col1) .* x
        let mut mean_grad = vec![0f64; 4];
        for k in 1..=m {
            let t = k as f64 / m as f64;
            let point =
                Tensor::new(vec![2, 2, 1], x.data().iter().map(|&v| (t * v as f64) as f32).collect())
                    .unwrap();
            let p = variant.predict(&point).unwrap();
            let (s0, s1) = (p.scores.data()[0] as f64, p.scores.data()[1] as f64);
            for i in 0..4 {
                mean_grad[i] += s0 * s1 * (w[i * 2] as f64 - w[i * 2 + 1] as f64) / m as f64;
            }
        }
        for i in 0..4 {
            let expected = x.data()[i] as f64 * mean_grad[i];
            let got = per_ref[0].raw.data()[i] as f64;
            assert!((got - expected).abs() < 1e-4, "{got} vs {expected}");
        }
    }

    #[test]
    fn ig_completeness_on_linear_model() {
        let variant = linear_variant(vec![0.5, -0.2, -0.3, 0.4, 0.8, 0.1, 0.0, -0.6]);
        let x = Tensor::new(vec![2, 2, 1], vec![0.3, 0.9, 0.1, 0.7]).unwrap();
        let cfg = IgConfig {
            steps: 300,
            ..Default::default()
        };
        for attr in integrated_gradients_detailed(&variant, &x, 0, &cfg).unwrap() {
            let err = (attr.attribution_sum - attr.score_difference).abs();
            assert!(
                err <= 0.01 * attr.score_difference.abs().max(1e-9),
                "{:?}: sum {} vs diff {}",
                attr.reference,
                attr.attribution_sum,
                attr.score_difference
            );
        }
    }
}
