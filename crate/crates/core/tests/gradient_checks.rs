//! Gradient verification: the f32 autodiff engine against central finite
//! differences evaluated on an independent f64 reference forward pass.
//! Tolerance everywhere: relative 1e-3 with an absolute floor of 1e-5.

use calinterp_core::autodiff::{finite_difference_gradient, Tape};
use calinterp_core::calibration::{
    fit_dirichlet, Calibrator, DirichletFitConfig, ModelVariant, TemperatureScaler, VariantTag,
};
use calinterp_core::layers::{apply_layer, Conv2dLayer, DenseLayer, Layer};
use calinterp_core::model::GradientTarget;
use calinterp_core::reference::{
    forward_scores_f64, gradient_check_ratio, random_input, random_small_network,
    variant_score_f64,
};
use calinterp_core::rng::rng_for;
use calinterp_core::synthetic::sample_true_posterior_logits;
use calinterp_core::Tensor;
use rand::Rng;

const FD_STEP: f64 = 1e-4;
const RTOL: f64 = 1e-3;
const ATOL: f64 = 1e-5;

/// Spec property: for every layer kind on random small tensors, the tape
/// gradient of a weighted sum of the layer's outputs matches finite
/// differences on the f64 reference layer.
#[test]
fn every_layer_kind_matches_finite_differences() {
    let mut rng = rng_for(100, &["layer-grad"]);
    // (layer, input shape)
    let cases: Vec<(Layer, Vec<usize>)> = vec![
        (
            Layer::Conv2d(
                Conv2dLayer::new(
                    Tensor::new(
                        vec![3, 3, 2, 3],
                        (0..54).map(|i| ((i * 37 % 19) as f32 - 9.0) * 0.07).collect(),
                    )
                    .unwrap(),
                    Tensor::new(vec![3], vec![0.05, -0.1, 0.02]).unwrap(),
                    1,
                    1,
                )
                .unwrap(),
            ),
            vec![6, 5, 2],
        ),
        (
            Layer::Conv2d(
                Conv2dLayer::new(
                    Tensor::new(
                        vec![2, 2, 1, 4],
                        (0..16).map(|i| (i as f32 - 8.0) * 0.09).collect(),
                    )
                    .unwrap(),
                    Tensor::new(vec![4], vec![0.0; 4]).unwrap(),
                    2,
                    0,
                )
                .unwrap(),
            ),
            vec![7, 7, 1],
        ),
        (
            Layer::Dense(
                DenseLayer::new(
                    Tensor::new(
                        vec![6, 3],
                        (0..18).map(|i| ((i * 13 % 11) as f32 - 5.0) * 0.1).collect(),
                    )
                    .unwrap(),
                    Tensor::new(vec![3], vec![0.1, -0.2, 0.0]).unwrap(),
                )
                .unwrap(),
            ),
            vec![6],
        ),
        (Layer::Relu, vec![8]),
        (Layer::MaxPool2d { size: 2, stride: 2 }, vec![6, 6, 2]),
        (Layer::AvgPool2d { size: 3, stride: 1 }, vec![5, 5, 1]),
        (Layer::Flatten, vec![3, 4, 2]),
        (Layer::Softmax, vec![5]),
        (Layer::Log { floor: 1e-12 }, vec![6]),
        (Layer::Scale { factor: -1.7 }, vec![7]),
    ];
    for (layer, in_shape) in cases {
        let numel: usize = in_shape.iter().product();
        // keep relu/maxpool inputs away from their kinks
        let data: Vec<f32> = (0..numel)
            .map(|_| {
                let v: f32 = rng.random_range(0.05..1.0);
                if rng.random::<bool>() && !matches!(layer, Layer::Log { .. }) {
                    -v
                } else {
                    v
                }
            })
            .collect();
        let x = Tensor::new(in_shape.clone(), data).unwrap();
        let out_len: usize = layer.output_shape(&in_shape).unwrap().iter().product();
        let combo: Vec<f64> = (0..out_len)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();

        // autodiff: weighted sum of outputs via mul+sum against constants
        let mut tape = Tape::new();
        let leaf = tape.leaf(x.clone(), true);
        let out = tape.apply_layer(&layer, leaf).unwrap();
        let weights = tape.leaf(
            Tensor::new(
                tape.value(out).shape().to_vec(),
                combo.iter().map(|&v| v as f32).collect(),
            )
            .unwrap(),
            false,
        );
        let weighted = tape.mul(out, weights).unwrap();
        let scalar = tape.sum(weighted).unwrap();
        let ad = tape.gradient(scalar, leaf).unwrap();

        // reference: same scalar via the f64 layer evaluation
        let x64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let shape = in_shape.clone();
        let layer_ref = layer.clone();
        let combo_ref = combo.clone();
        let fd = finite_difference_gradient(
            |coords| {
                let out = reference_layer_f64(&layer_ref, coords, &shape);
                Ok(out
                    .iter()
                    .zip(&combo_ref)
                    .map(|(&o, &c)| o * c)
                    .sum::<f64>())
            },
            &x64,
            FD_STEP,
        )
        .unwrap();
        let ratio = gradient_check_ratio(ad.data(), &fd, RTOL, ATOL);
        assert!(
            ratio < 1.0,
            "layer {} exceeded tolerance: ratio {ratio}",
            layer.kind()
        );
    }
}

/// Minimal f64 evaluation of a single layer for the per-layer checks
/// (the whole-network reference lives in `calinterp_core::reference`).
fn reference_layer_f64(layer: &Layer, x: &[f64], shape: &[usize]) -> Vec<f64> {
    match layer {
        Layer::Conv2d(c) => {
            let (ih, iw, cin) = (shape[0], shape[1], shape[2]);
            let (kh, kw) = (c.kernel_h(), c.kernel_w());
            let cout = c.out_channels();
            let oh = (ih + 2 * c.padding - kh) / c.stride + 1;
            let ow = (iw + 2 * c.padding - kw) / c.stride + 1;
            let mut out = vec![0f64; oh * ow * cout];
            for oy in 0..oh {
                for ox in 0..ow {
                    for oc in 0..cout {
                        let mut acc = c.bias.data()[oc] as f64;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * c.stride + ky) as isize - c.padding as isize;
                                let ix = (ox * c.stride + kx) as isize - c.padding as isize;
                                if iy < 0 || ix < 0 || iy >= ih as isize || ix >= iw as isize {
                                    continue;
                                }
                                for ic in 0..cin {
                                    acc += x[((iy as usize) * iw + ix as usize) * cin + ic]
                                        * c.weight.data()[((ky * kw + kx) * cin + ic) * cout + oc]
                                            as f64;
                                }
                            }
                        }
                        out[(oy * ow + ox) * cout + oc] = acc;
                    }
                }
            }
            out
        }
        Layer::Dense(d) => {
            let (n_in, n_out) = (d.in_features(), d.out_features());
            (0..n_out)
                .map(|o| {
                    let mut acc = d.bias.data()[o] as f64;
                    for i in 0..n_in {
                        acc += x[i] * d.weight.data()[i * n_out + o] as f64;
                    }
                    acc
                })
                .collect()
        }
        Layer::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
        Layer::MaxPool2d { size, stride } => {
            let (ih, iw, c) = (shape[0], shape[1], shape[2]);
            let oh = (ih - size) / stride + 1;
            let ow = (iw - size) / stride + 1;
            let mut out = vec![0f64; oh * ow * c];
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        for ky in 0..*size {
                            for kx in 0..*size {
                                best = best
                                    .max(x[((oy * stride + ky) * iw + ox * stride + kx) * c + ch]);
                            }
                        }
                        out[(oy * ow + ox) * c + ch] = best;
                    }
                }
            }
            out
        }
        Layer::AvgPool2d { size, stride } => {
            let (ih, iw, c) = (shape[0], shape[1], shape[2]);
            let oh = (ih - size) / stride + 1;
            let ow = (iw - size) / stride + 1;
            let mut out = vec![0f64; oh * ow * c];
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut acc = 0f64;
                        for ky in 0..*size {
                            for kx in 0..*size {
                                acc += x[((oy * stride + ky) * iw + ox * stride + kx) * c + ch];
                            }
                        }
                        out[(oy * ow + ox) * c + ch] = acc / (size * size) as f64;
                    }
                }
            }
            out
        }
        Layer::Flatten => x.to_vec(),
        Layer::Softmax => {
            let m = x.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let exps: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
            let s: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / s).collect()
        }
        Layer::Log { floor } => x.iter().map(|&v| v.max(*floor as f64).ln()).collect(),
        Layer::Scale { factor } => x.iter().map(|&v| v * *factor as f64).collect(),
    }
}

/// Composed random networks: input score gradients match the oracle.
#[test]
fn composed_networks_match_finite_differences() {
    for seed in 0..8u64 {
        let model = random_small_network(seed);
        let x = random_input(&model, seed + 1000);
        let class = (seed as usize) % model.classes();
        let ad = model.input_gradient(&x, class, GradientTarget::Score).unwrap();
        let x64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let fd = finite_difference_gradient(
            |coords| variant_score_f64(&model, &Calibrator::Identity, coords, class),
            &x64,
            FD_STEP,
        )
        .unwrap();
        let ratio = gradient_check_ratio(ad.data(), &fd, RTOL, ATOL);
        assert!(ratio < 1.0, "net {seed}: ratio {ratio}");
    }
}

/// Gradients flow correctly through both calibration heads.
#[test]
fn calibrated_gradients_match_finite_differences() {
    let (logits, labels) = sample_true_posterior_logits(300, 3, 1.5, 77);
    let scores: Vec<Tensor> = logits
        .iter()
        .map(|l| apply_layer(&Layer::Softmax, l).unwrap())
        .collect();
    let dirichlet = fit_dirichlet(&scores, &labels, &DirichletFitConfig::default()).unwrap();

    for seed in 0..4u64 {
        let model = std::sync::Arc::new(random_small_network(seed + 50));
        if model.classes() != 3 {
            continue;
        }
        let x = random_input(&model, seed + 2000);
        let calibrators = vec![
            Calibrator::Temperature(TemperatureScaler::new(2.3).unwrap()),
            Calibrator::Dirichlet(dirichlet.clone()),
        ];
        for cal in calibrators {
            let variant = ModelVariant::new(model.clone(), cal.clone(), VariantTag::Temperature);
            let class = 1;
            let ad = variant.score_gradient(&x, class).unwrap();
            let x64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
            let fd = finite_difference_gradient(
                |coords| variant_score_f64(&model, &cal, coords, class),
                &x64,
                FD_STEP,
            )
            .unwrap();
            let ratio = gradient_check_ratio(ad.data(), &fd, RTOL, ATOL);
            assert!(ratio < 1.0, "net {seed} cal {}: ratio {ratio}", cal.kind());
        }
    }
}

/// The f32 engine forward and the f64 reference agree closely on scores.
#[test]
fn engine_and_reference_forward_agree() {
    for seed in 20..26u64 {
        let model = random_small_network(seed);
        let x = random_input(&model, seed);
        let p = model.predict(&x).unwrap();
        let x64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let r = forward_scores_f64(&model, &Calibrator::Identity, &x64).unwrap();
        for (a, b) in p.scores.data().iter().zip(&r) {
            assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
        }
    }
}
