//! Classifier representation and prediction.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::layers::{self, apply_layer, Layer};
use crate::tensor::Tensor;

/// Layer kinds allowed inside a stored classifier.
const CLASSIFIER_KINDS: [&str; 7] = [
    "conv2d",
    "dense",
    "relu",
    "maxpool2d",
    "avgpool2d",
    "flatten",
    "softmax",
];

#[derive(Debug, Clone)]
pub struct ClassifierModel {
    layers: Vec<Layer>,
    input_shape: [usize; 3],
    classes: usize,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub logits: Tensor,
    pub scores: Tensor,
    pub predicted_class: usize,
}

/// Which scalar of the network head a gradient is taken at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientTarget {
    Score,
    Logit,
}

/// Reusable buffers for the allocation-free forward path.
#[derive(Default)]
pub struct Workspace {
    a: Vec<f32>,
    b: Vec<f32>,
    argmax: Vec<u32>,
}

impl ClassifierModel {
    /// Validates the layer chain: classifier kinds only, shapes chain from
    /// the input to a final softmax over `classes >= 2`.
    pub fn new(layers: Vec<Layer>, input_shape: [usize; 3], classes: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidModel(
                "a classifier needs at least one layer plus a final softmax".into(),
            ));
        }
        if classes < 2 {
            return Err(Error::InvalidModel(format!(
                "a classifier needs >= 2 classes, got {classes}"
            )));
        }
        if !matches!(layers.last(), Some(Layer::Softmax)) {
            return Err(Error::InvalidModel(
                "the final layer of a classifier must be softmax".into(),
            ));
        }
        let mut shape: Vec<usize> = input_shape.to_vec();
        for (i, layer) in layers.iter().enumerate() {
            if !CLASSIFIER_KINDS.contains(&layer.kind()) {
                return Err(Error::UnsupportedLayer {
                    layer: i,
                    kind: layer.kind(),
                    op: "classifier",
                });
            }
            shape = layer.output_shape(&shape).map_err(|e| at_layer(e, i))?;
        }
        if shape != [classes] {
            return Err(Error::InvalidModel(format!(
                "network output shape {shape:?} does not match {classes} classes"
            )));
        }
        Ok(ClassifierModel {
            layers,
            input_shape,
            classes,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape {
            return Err(Error::ShapeMismatch {
                kind: "model input",
                expected: self.input_shape.to_vec(),
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Forward pass up to (but not including) the final softmax.
    pub fn forward_logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for (i, layer) in self.layers[..self.layers.len() - 1].iter().enumerate() {
            cur = apply_layer(layer, &cur).map_err(|e| at_layer(e, i))?;
        }
        Ok(cur)
    }

    /// Full prediction: logits, softmax scores, argmax class (ties to the
    /// lowest index).
    pub fn predict(&self, x: &Tensor) -> Result<Prediction> {
        let logits = self.forward_logits(x)?;
        let scores = apply_layer(&Layer::Softmax, &logits)
            .map_err(|e| at_layer(e, self.layers.len() - 1))?;
        let predicted_class = scores.argmax();
        Ok(Prediction {
            logits,
            scores,
            predicted_class,
        })
    }

    /// Allocation-free logits evaluation into caller-provided buffers.
    /// Bit-identical to [`forward_logits`](Self::forward_logits).
    pub fn forward_logits_fast(&self, x: &Tensor, ws: &mut Workspace) -> Result<Vec<f32>> {
        self.check_input(x)?;
        let mut shape: Vec<usize> = self.input_shape.to_vec();
        ws.a.clear();
        ws.a.extend_from_slice(x.data());
        let mut cur_is_a = true;
        for layer in &self.layers[..self.layers.len() - 1] {
            let out_shape = layer.output_shape(&shape)?;
            let numel: usize = out_shape.iter().product();
            let (cur, next) = if cur_is_a {
                (&ws.a, &mut ws.b)
            } else {
                (&ws.b, &mut ws.a)
            };
            next.resize(numel, 0.0);
            match layer {
                Layer::Conv2d(c) => layers::conv2d_forward(
                    cur,
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
                    next,
                    out_shape[0],
                    out_shape[1],
                ),
                Layer::Dense(d) => layers::dense_forward(
                    cur,
                    d.weight.data(),
                    d.bias.data(),
                    d.in_features(),
                    d.out_features(),
                    next,
                ),
                Layer::Relu => layers::relu_forward(cur, next),
                Layer::MaxPool2d { size, stride } => {
                    ws.argmax.resize(numel, 0);
                    layers::maxpool_forward(
                        cur,
                        shape[0],
                        shape[1],
                        shape[2],
                        *size,
                        *stride,
                        next,
                        &mut ws.argmax,
                    );
                }
                Layer::AvgPool2d { size, stride } => layers::avgpool_forward(
                    cur,
                    shape[0],
                    shape[1],
                    shape[2],
                    *size,
                    *stride,
                    next,
                ),
                Layer::Flatten => next.copy_from_slice(cur),
                Layer::Softmax | Layer::Log { .. } | Layer::Scale { .. } => unreachable!(),
            }
            shape = out_shape;
            cur_is_a = !cur_is_a;
        }
        let logits = if cur_is_a { &ws.a } else { &ws.b };
        Ok(logits.clone())
    }

    /// Records the forward pass (up to the logits) on a tape.
    pub fn forward_logits_on_tape(&self, tape: &mut Tape, input: NodeId) -> Result<NodeId> {
        let mut cur = input;
        for (i, layer) in self.layers[..self.layers.len() - 1].iter().enumerate() {
            cur = tape.apply_layer(layer, cur).map_err(|e| at_layer(e, i))?;
        }
        Ok(cur)
    }

    /// Gradient of one class's score or logit with respect to the input.
    pub fn input_gradient(
        &self,
        x: &Tensor,
        class_index: usize,
        at: GradientTarget,
    ) -> Result<Tensor> {
        if class_index >= self.classes {
            return Err(Error::InvalidClass {
                class: class_index,
                classes: self.classes,
            });
        }
        self.check_input(x)?;
        let mut tape = Tape::new();
        let input = tape.leaf(x.clone(), true);
        let logits = self.forward_logits_on_tape(&mut tape, input)?;
        let head = match at {
            GradientTarget::Logit => logits,
            GradientTarget::Score => tape.apply_layer(&Layer::Softmax, logits)?,
        };
        let scalar = tape.select(head, class_index)?;
        let grad = tape.gradient(scalar, input)?;
        grad.reshaped(self.input_shape.to_vec())
    }

    /// Scales the logits by multiplying the last dense layer's weight and
    /// bias by `k`, producing a model whose ground-truth optimal temperature
    /// is exactly `k`. Keeps the layer-kind set closed.
    pub fn sharpen_logits(&self, k: f32) -> Result<ClassifierModel> {
        if !(k.is_finite() && k > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sharpening factor must be positive, got {k}"
            )));
        }
        let mut layers = self.layers.clone();
        let dense_pos = layers
            .iter()
            .rposition(|l| matches!(l, Layer::Dense(_)))
            .ok_or_else(|| {
                Error::InvalidModel("cannot sharpen a model without a dense logit layer".into())
            })?;
        if let Layer::Dense(d) = &layers[dense_pos] {
            let w = d.weight.map(|v| v * k);
            let b = d.bias.map(|v| v * k);
            layers[dense_pos] = Layer::Dense(layers::DenseLayer::new(w, b)?);
        }
        ClassifierModel::new(layers, self.input_shape, self.classes)
    }
}

pub(crate) fn at_layer(e: Error, i: usize) -> Error {
    match e {
        Error::ShapeMismatch {
            kind,
            expected,
            got,
        } => Error::LayerShape {
            layer: i,
            kind,
            expected,
            got,
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::DenseLayer;

    fn linear_model(weight: Vec<f32>, bias: Vec<f32>, n_in: usize, n_out: usize) -> ClassifierModel {
        let dense = DenseLayer::new(
            Tensor::new(vec![n_in, n_out], weight).unwrap(),
            Tensor::new(vec![n_out], bias).unwrap(),
        )
        .unwrap();
        ClassifierModel::new(
            vec![Layer::Flatten, Layer::Dense(dense), Layer::Softmax],
            [1, 1, n_in],
            n_out,
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_scores_and_class_zero() {
        let model = linear_model(vec![0.0; 6], vec![0.0; 3], 2, 3);
        let x = Tensor::new(vec![1, 1, 2], vec![0.3, -0.8]).unwrap();
        let p = model.predict(&x).unwrap();
        for &s in p.scores.data() {
            assert!((s - 1.0 / 3.0).abs() < 1e-6);
        }
        assert_eq!(p.predicted_class, 0);
    }

    #[test]
    fn scores_sum_to_one() {
        let model = linear_model(vec![0.5, -1.0, 2.0, 0.1, 0.0, 3.0], vec![0.2, -0.4, 0.0], 2, 3);
        let x = Tensor::new(vec![1, 1, 2], vec![0.9, 0.1]).unwrap();
        let p = model.predict(&x).unwrap();
        let sum: f64 = p.scores.data().iter().map(|&v| v as f64).sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn argmax_prefers_first_of_equal_logits() {
        // logits [2, 1, 0] -> class 0
        let model = linear_model(vec![0.0; 3], vec![2.0, 1.0, 0.0], 1, 3);
        let x = Tensor::new(vec![1, 1, 1], vec![0.0]).unwrap();
        let p = model.predict(&x).unwrap();
        assert_eq!(p.predicted_class, 0);
    }

    #[test]
    fn logit_gradient_of_linear_model_is_weight_row() {
        let w = vec![0.5, -1.0, 2.0, 0.1]; // [in=2, out=2]
        let model = linear_model(w, vec![0.0, 0.0], 2, 2);
        let x = Tensor::new(vec![1, 1, 2], vec![0.3, 0.7]).unwrap();
        let g = model.input_gradient(&x, 0, GradientTarget::Logit).unwrap();
        // d logit_0 / dx = column 0 of W = [0.5, 2.0]
        assert!((g.data()[0] - 0.5).abs() < 1e-6);
        assert!((g.data()[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn score_gradients_sum_to_zero_over_classes() {
        let model = linear_model(vec![0.5, -1.0, 2.0, 0.1, -0.3, 0.8], vec![0.1, 0.2, -0.1], 2, 3);
        let x = Tensor::new(vec![1, 1, 2], vec![0.4, -0.2]).unwrap();
        let mut total = vec![0f64; 2];
        for c in 0..3 {
            let g = model.input_gradient(&x, c, GradientTarget::Score).unwrap();
            for (t, &v) in total.iter_mut().zip(g.data()) {
                *t += v as f64;
            }
        }
        for &t in &total {
            assert!(t.abs() < 1e-6, "sum of score gradients {t}");
        }
    }

    #[test]
    fn invalid_class_rejected() {
        let model = linear_model(vec![0.0; 4], vec![0.0; 2], 2, 2);
        let x = Tensor::new(vec![1, 1, 2], vec![0.0, 0.0]).unwrap();
        assert!(model.input_gradient(&x, 2, GradientTarget::Score).is_err());
    }

    #[test]
    fn model_requires_final_softmax_and_two_classes() {
        let dense = DenseLayer::new(
            Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap(),
            Tensor::new(vec![2], vec![0.0; 2]).unwrap(),
        )
        .unwrap();
        assert!(ClassifierModel::new(
            vec![Layer::Flatten, Layer::Dense(dense.clone())],
            [1, 1, 2],
            2
        )
        .is_err());
        assert!(ClassifierModel::new(vec![], [1, 1, 2], 2).is_err());
    }

    #[test]
    fn fast_forward_matches_apply_layer_path() {
        let model = linear_model(vec![0.5, -1.0, 2.0, 0.1], vec![0.05, -0.2], 2, 2);
        let x = Tensor::new(vec![1, 1, 2], vec![0.25, -0.75]).unwrap();
        let slow = model.forward_logits(&x).unwrap();
        let mut ws = Workspace::default();
        let fast = model.forward_logits_fast(&x, &mut ws).unwrap();
        assert_eq!(slow.data(), &fast[..]);
    }

    #[test]
    fn sharpened_model_scales_logits_exactly() {
        let model = linear_model(vec![0.5, -1.0, 2.0, 0.1], vec![0.05, -0.2], 2, 2);
        let sharp = model.sharpen_logits(3.0).unwrap();
        let x = Tensor::new(vec![1, 1, 2], vec![0.25, -0.75]).unwrap();
        let l = model.forward_logits(&x).unwrap();
        let ls = sharp.forward_logits(&x).unwrap();
        for (a, b) in l.data().iter().zip(ls.data()) {
            assert!((a * 3.0 - b).abs() < 1e-6);
        }
    }
}
