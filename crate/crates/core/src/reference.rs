//! Independent f64 reference implementations used by the verification
//! suites as oracles, plus a generator of random small networks.
//!
//! Nothing here is called by the production pipeline. The forward pass is
//! re-written from the layer definitions in plain f64 so finite-difference
//! checks are not limited by single-precision rounding, and so a bug in the
//! optimized kernels cannot hide in its own oracle.

use rand::Rng;

use crate::calibration::Calibrator;
use crate::error::{Error, Result};
use crate::layers::Layer;
use crate::model::ClassifierModel;
use crate::rng::rng_for;
use crate::tensor::Tensor;
use crate::train;

fn conv_f64(
    input: &[f64],
    ih: usize,
    iw: usize,
    cin: usize,
    weight: &[f32],
    kh: usize,
    kw: usize,
    cout: usize,
    bias: &[f32],
    stride: usize,
    padding: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (ih + 2 * padding - kh) / stride + 1;
    let ow = (iw + 2 * padding - kw) / stride + 1;
    let mut out = vec![0f64; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            for oc in 0..cout {
                let mut acc = bias[oc] as f64;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if iy < 0 || ix < 0 || iy >= ih as isize || ix >= iw as isize {
                            continue;
                        }
                        for ic in 0..cin {
                            let v = input[((iy as usize) * iw + ix as usize) * cin + ic];
                            let w = weight[((ky * kw + kx) * cin + ic) * cout + oc] as f64;
                            acc += v * w;
                        }
                    }
                }
                out[(oy * ow + ox) * cout + oc] = acc;
            }
        }
    }
    (out, oh, ow)
}

fn softmax_f64(z: &[f64]) -> Vec<f64> {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    let exps: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// f64 forward pass through the model and calibration head, yielding the
/// calibrated score vector.
pub fn forward_scores_f64(
    model: &ClassifierModel,
    calibrator: &Calibrator,
    x: &[f64],
) -> Result<Vec<f64>> {
    let input_shape = model.input_shape();
    if x.len() != input_shape.iter().product::<usize>() {
        return Err(Error::InvalidArgument(format!(
            "reference input has {} values, model expects {:?}",
            x.len(),
            input_shape
        )));
    }
    let mut cur = x.to_vec();
    let mut shape = input_shape.to_vec();
    let mut layers: Vec<Layer> = model.layers()[..model.layers().len() - 1].to_vec();
    layers.extend(calibrator.head_layers()?);
    for layer in &layers {
        match layer {
            Layer::Conv2d(c) => {
                let (out, oh, ow) = conv_f64(
                    &cur,
                    shape[0],
                    shape[1],
                    shape[2],
                    c.weight.data(),
                    c.kernel_h(),
                    c.kernel_w(),
                    c.out_channels(),
                    c.bias.data(),
                    c.stride,
                    c.padding,
                );
                cur = out;
                shape = vec![oh, ow, c.out_channels()];
            }
            Layer::Dense(d) => {
                let (n_in, n_out) = (d.in_features(), d.out_features());
                let mut out = vec![0f64; n_out];
                for (o, item) in out.iter_mut().enumerate() {
                    let mut acc = d.bias.data()[o] as f64;
                    for i in 0..n_in {
                        acc += cur[i] * d.weight.data()[i * n_out + o] as f64;
                    }
                    *item = acc;
                }
                cur = out;
                shape = vec![n_out];
            }
            Layer::Relu => {
                for v in cur.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
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
                                    let v = cur
                                        [((oy * stride + ky) * iw + ox * stride + kx) * c + ch];
                                    if v > best {
                                        best = v;
                                    }
                                }
                            }
                            out[(oy * ow + ox) * c + ch] = best;
                        }
                    }
                }
                cur = out;
                shape = vec![oh, ow, c];
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
                                    acc += cur
                                        [((oy * stride + ky) * iw + ox * stride + kx) * c + ch];
                                }
                            }
                            out[(oy * ow + ox) * c + ch] = acc / (size * size) as f64;
                        }
                    }
                }
                cur = out;
                shape = vec![oh, ow, c];
            }
            Layer::Flatten => {
                shape = vec![cur.len()];
            }
            Layer::Softmax => {
                cur = softmax_f64(&cur);
            }
            Layer::Log { floor } => {
                for v in cur.iter_mut() {
                    *v = v.max(*floor as f64).ln();
                }
            }
            Layer::Scale { factor } => {
                for v in cur.iter_mut() {
                    *v *= *factor as f64;
                }
            }
        }
    }
    Ok(cur)
}

/// One calibrated class score, for finite-difference closures.
pub fn variant_score_f64(
    model: &ClassifierModel,
    calibrator: &Calibrator,
    x: &[f64],
    class: usize,
) -> Result<f64> {
    let scores = forward_scores_f64(model, calibrator, x)?;
    scores
        .get(class)
        .copied()
        .ok_or(Error::InvalidClass {
            class,
            classes: scores.len(),
        })
}

/// `|a - b| <= rtol * |b| + atol`, the tolerance form used by all
/// gradient-vs-finite-difference checks (relative 1e-3 with an absolute
/// floor of 1e-5 near zero).
pub fn within_tolerance(a: f64, b: f64, rtol: f64, atol: f64) -> bool {
    (a - b).abs() <= rtol * b.abs() + atol
}

/// Worst-case ratio of |ad - fd| to the allowed tolerance over all
/// coordinates; values below 1.0 pass.
pub fn gradient_check_ratio(ad: &[f32], fd: &[f64], rtol: f64, atol: f64) -> f64 {
    assert_eq!(ad.len(), fd.len());
    ad.iter()
        .zip(fd)
        .map(|(&a, &f)| (a as f64 - f).abs() / (rtol * f.abs() + atol))
        .fold(0.0, f64::max)
}

/// Builds a random small network covering every classifier layer kind,
/// with spatial dims <= 8, for gradient verification.
pub fn random_small_network(seed: u64) -> ClassifierModel {
    let mut rng = rng_for(seed, &["random-small-network"]);
    loop {
        let h = rng.random_range(5..=8usize);
        let w = rng.random_range(5..=8usize);
        let cin = rng.random_range(1..=3usize);
        let classes = rng.random_range(2..=4usize);
        let mut layers: Vec<LayerPlan> = Vec::new();
        for _ in 0..rng.random_range(1..=3usize) {
            layers.push(match rng.random_range(0..4u32) {
                0 => LayerPlan::Conv {
                    cout: rng.random_range(2..=5),
                    kernel: rng.random_range(2..=3),
                    padding: rng.random_range(0..=1),
                },
                1 => LayerPlan::Relu,
                2 => LayerPlan::MaxPool,
                _ => LayerPlan::AvgPool,
            });
        }
        if let Ok(model) = realize_plan(&layers, [h, w, cin], classes, &mut rng) {
            return model;
        }
    }
}

enum LayerPlan {
    Conv {
        cout: usize,
        kernel: usize,
        padding: usize,
    },
    Relu,
    MaxPool,
    AvgPool,
}

fn realize_plan(
    plan: &[LayerPlan],
    input_shape: [usize; 3],
    classes: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<ClassifierModel> {
    use crate::layers::{Conv2dLayer, DenseLayer};
    let mut layers = Vec::new();
    let mut shape = input_shape.to_vec();
    let mut rnd = |n: usize, scale: f32| -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-scale..scale)).collect()
    };
    for p in plan {
        let layer = match p {
            LayerPlan::Conv {
                cout,
                kernel,
                padding,
            } => {
                let cin = shape[2];
                let scale = (2.0 / (kernel * kernel * cin) as f32).sqrt();
                Layer::Conv2d(Conv2dLayer::new(
                    Tensor::new(
                        vec![*kernel, *kernel, cin, *cout],
                        rnd(kernel * kernel * cin * cout, scale),
                    )?,
                    Tensor::new(vec![*cout], rnd(*cout, 0.1))?,
                    1,
                    *padding,
                )?)
            }
            LayerPlan::Relu => Layer::Relu,
            LayerPlan::MaxPool => Layer::MaxPool2d { size: 2, stride: 2 },
            LayerPlan::AvgPool => Layer::AvgPool2d { size: 2, stride: 2 },
        };
        shape = layer.output_shape(&shape)?;
        if shape.len() == 3 && (shape[0] < 2 || shape[1] < 2) {
            return Err(Error::InvalidModel("spatial dims collapsed".into()));
        }
        layers.push(layer);
    }
    layers.push(Layer::Flatten);
    let flat: usize = shape.iter().product();
    let scale = (2.0 / flat as f32).sqrt();
    layers.push(Layer::Dense(DenseLayer::new(
        Tensor::new(vec![flat, classes], rnd(flat * classes, scale))?,
        Tensor::new(vec![classes], rnd(classes, 0.1))?,
    )?));
    layers.push(Layer::Softmax);
    ClassifierModel::new(layers, input_shape, classes)
}

/// A random trained-looking toy CNN is overkill for gradient checks; this
/// produces a random input in [0, 1] for a model.
pub fn random_input(model: &ClassifierModel, seed: u64) -> Tensor {
    let mut rng = rng_for(seed, &["random-input"]);
    let n: usize = model.input_shape().iter().product();
    Tensor::new(
        model.input_shape().to_vec(),
        (0..n).map(|_| rng.random_range(0.0..1.0f32)).collect(),
    )
    .unwrap()
}

/// Builds the training-free deterministic desk CNN used in several tests.
pub fn untrained_desk_cnn(input: [usize; 3], classes: usize, seed: u64) -> ClassifierModel {
    train::build_model(&train::Architecture::default(), input, classes, seed).unwrap()
}
