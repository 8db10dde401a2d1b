//! Minimal deterministic trainer: cross-entropy loss, Adam, per-epoch
//! shuffled minibatches over single samples.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::Tape;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::layers::{Conv2dLayer, DenseLayer, Layer};
use crate::model::ClassifierModel;
use crate::opt::Adam;
use crate::rng::rng_for;
use crate::tensor::Tensor;

/// Network architectures the trainer can build.
#[derive(Debug, Clone)]
pub enum Architecture {
    /// conv(3->c1, 3x3)-relu-maxpool-conv(c1->c2, 3x3)-relu-maxpool-flatten-
    /// dense-softmax. Large enough to overfit 32x32 shape data, small enough
    /// for minute-scale CPU training.
    DeskCnn { conv1: usize, conv2: usize },
    /// flatten-dense(hidden)-relu-dense-softmax.
    Mlp { hidden: usize },
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::DeskCnn {
            conv1: 16,
            conv2: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub architecture: Architecture,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            architecture: Architecture::default(),
            epochs: 6,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: ClassifierModel,
    pub train_accuracy: f64,
    pub final_loss: f64,
}

fn he_uniform(rng: &mut rand_chacha::ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f32> {
    let limit = (6.0 / fan_in as f64).sqrt() as f32;
    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
}

/// Builds an initialized (untrained) model for the given architecture.
pub fn build_model(
    arch: &Architecture,
    input_shape: [usize; 3],
    classes: usize,
    seed: u64,
) -> Result<ClassifierModel> {
    let mut rng = rng_for(seed, &["weight-init"]);
    let [h, w, c_in] = input_shape;
    let layers = match *arch {
        Architecture::DeskCnn { conv1, conv2 } => {
            let k = 3;
            let w1 = Tensor::new(
                vec![k, k, c_in, conv1],
                he_uniform(&mut rng, k * k * c_in, k * k * c_in * conv1),
            )?;
            let b1 = Tensor::zeros(vec![conv1]);
            let w2 = Tensor::new(
                vec![k, k, conv1, conv2],
                he_uniform(&mut rng, k * k * conv1, k * k * conv1 * conv2),
            )?;
            let b2 = Tensor::zeros(vec![conv2]);
            let (h2, w2dim) = (h / 2 / 2, w / 2 / 2);
            let flat = h2 * w2dim * conv2;
            let wd = Tensor::new(
                vec![flat, classes],
                he_uniform(&mut rng, flat, flat * classes),
            )?;
            let bd = Tensor::zeros(vec![classes]);
            vec![
                Layer::Conv2d(Conv2dLayer::new(w1, b1, 1, 1)?),
                Layer::Relu,
                Layer::MaxPool2d { size: 2, stride: 2 },
                Layer::Conv2d(Conv2dLayer::new(w2, b2, 1, 1)?),
                Layer::Relu,
                Layer::MaxPool2d { size: 2, stride: 2 },
                Layer::Flatten,
                Layer::Dense(DenseLayer::new(wd, bd)?),
                Layer::Softmax,
            ]
        }
        Architecture::Mlp { hidden } => {
            let flat = h * w * c_in;
            let w1 = Tensor::new(vec![flat, hidden], he_uniform(&mut rng, flat, flat * hidden))?;
            let b1 = Tensor::zeros(vec![hidden]);
            let w2 = Tensor::new(
                vec![hidden, classes],
                he_uniform(&mut rng, hidden, hidden * classes),
            )?;
            let b2 = Tensor::zeros(vec![classes]);
            vec![
                Layer::Flatten,
                Layer::Dense(DenseLayer::new(w1, b1)?),
                Layer::Relu,
                Layer::Dense(DenseLayer::new(w2, b2)?),
                Layer::Softmax,
            ]
        }
    };
    ClassifierModel::new(layers, input_shape, classes)
}

/// Trains a classifier on the dataset. Deterministic given the config seed;
/// zero epochs returns the freshly initialized model unchanged.
pub fn train_classifier(config: &TrainConfig, train: &Dataset) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::EmptyInput("training dataset"));
    }
    let mut model = build_model(
        &config.architecture,
        train.image_shape,
        train.classes,
        config.seed,
    )?;
    let batch_size = config.batch_size.max(1);
    let mut shuffle_rng = rng_for(config.seed, &["batch-schedule"]);
    let mut indices: Vec<usize> = (0..train.len()).collect();
    let mut final_loss = f64::NAN;

    // one Adam state per parameterized layer (weight then bias)
    let mut optimizers: Vec<(usize, Adam, Adam)> = model
        .layers()
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match l {
            Layer::Conv2d(c) => Some((
                i,
                Adam::new(config.learning_rate, c.weight.numel()),
                Adam::new(config.learning_rate, c.bias.numel()),
            )),
            Layer::Dense(d) => Some((
                i,
                Adam::new(config.learning_rate, d.weight.numel()),
                Adam::new(config.learning_rate, d.bias.numel()),
            )),
            _ => None,
        })
        .collect();

    for epoch in 0..config.epochs {
        indices.shuffle(&mut shuffle_rng);
        for (batch_no, batch) in indices.chunks(batch_size).enumerate() {
            let step = epoch * train.len() + batch_no * batch_size;
            let mut grad_sums: Vec<(Vec<f64>, Vec<f64>)> = optimizers
                .iter()
                .map(|(i, _, _)| match &model.layers()[*i] {
                    Layer::Conv2d(c) => (vec![0.0; c.weight.numel()], vec![0.0; c.bias.numel()]),
                    Layer::Dense(d) => (vec![0.0; d.weight.numel()], vec![0.0; d.bias.numel()]),
                    _ => unreachable!(),
                })
                .collect();
            let mut batch_loss = 0f64;
            for &si in batch {
                let sample = &train.samples[si];
                let mut tape = Tape::new();
                let input = tape.leaf(sample.image.clone(), false);
                let mut cur = input;
                let mut param_nodes = Vec::new();
                for layer in &model.layers()[..model.layers().len() - 1] {
                    let (next, params) = tape.apply_layer_trainable(layer, cur)?;
                    if let Some(p) = params {
                        param_nodes.push(p);
                    }
                    cur = next;
                }
                let loss = tape.cross_entropy(cur, sample.label)?;
                let loss_val = tape.value(loss).as_scalar()? as f64;
                if !loss_val.is_finite() {
                    return Err(Error::Diverged {
                        step,
                        reason: format!("cross-entropy loss became {loss_val} on sample {si}"),
                    });
                }
                batch_loss += loss_val;
                let grads = tape.backward(loss)?;
                for (sums, (wn, bn)) in grad_sums.iter_mut().zip(&param_nodes) {
                    if let Some(g) = grads.wrt(*wn) {
                        for (s, &v) in sums.0.iter_mut().zip(g.data()) {
                            *s += v as f64;
                        }
                    }
                    if let Some(g) = grads.wrt(*bn) {
                        for (s, &v) in sums.1.iter_mut().zip(g.data()) {
                            *s += v as f64;
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            final_loss = batch_loss * scale;
            // apply the update to each parameterized layer
            let mut layers = model.layers().to_vec();
            for ((i, opt_w, opt_b), sums) in optimizers.iter_mut().zip(&mut grad_sums) {
                for g in sums.0.iter_mut() {
                    *g *= scale;
                }
                for g in sums.1.iter_mut() {
                    *g *= scale;
                }
                match &mut layers[*i] {
                    Layer::Conv2d(c) => {
                        opt_w.step(Arc::make_mut(&mut c.weight).data_mut(), &sums.0);
                        opt_b.step(Arc::make_mut(&mut c.bias).data_mut(), &sums.1);
                    }
                    Layer::Dense(d) => {
                        opt_w.step(Arc::make_mut(&mut d.weight).data_mut(), &sums.0);
                        opt_b.step(Arc::make_mut(&mut d.bias).data_mut(), &sums.1);
                    }
                    _ => unreachable!(),
                }
            }
            model = ClassifierModel::new(layers, train.image_shape, train.classes)?;
        }
        log::info!(
            "epoch {}/{}: last batch loss {:.4}",
            epoch + 1,
            config.epochs,
            final_loss
        );
    }

    let mut correct = 0usize;
    for sample in &train.samples {
        if model.predict(&sample.image)?.predicted_class == sample.label {
            correct += 1;
        }
    }
    Ok(TrainOutcome {
        model,
        train_accuracy: correct as f64 / train.len() as f64,
        final_loss,
    })
}
