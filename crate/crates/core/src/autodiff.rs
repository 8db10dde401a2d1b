//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Nodes are created in topological order and hold their forward value;
//! `backward` walks the tape in reverse, finalizing each node's f64
//! gradient accumulator to f32 before propagating it to the node's inputs.
//! Weight tensors enter the tape as shared leaves (`Arc` clones), so
//! building a tape never copies model parameters.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::layers::{self, Layer};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Relu {
        input: NodeId,
    },
    MaxPool2d {
        input: NodeId,
        argmax: Vec<u32>,
    },
    AvgPool2d {
        input: NodeId,
        size: usize,
        stride: usize,
    },
    Flatten {
        input: NodeId,
    },
    Softmax {
        input: NodeId,
    },
    Log {
        input: NodeId,
        floor: f32,
    },
    Scale {
        input: NodeId,
        factor: f32,
    },
    /// Elementwise product of two same-shaped nodes (may be the same node).
    Mul {
        a: NodeId,
        b: NodeId,
    },
    /// Full reduction to a scalar.
    Sum {
        input: NodeId,
    },
    /// `[H, W, C]` image times `[H, W]` mask, mask broadcast over channels.
    MaskMul {
        image: NodeId,
        mask: NodeId,
    },
    Select {
        input: NodeId,
        index: usize,
    },
    /// Cross-entropy of a label under softmax(logits): LSE(z) - z[label].
    CrossEntropy {
        logits: NodeId,
        label: usize,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one scalar output with respect to tape nodes.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// The gradient tensor for a node, if one was computed.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::NotOnTape {
                node: id.0,
                len: self.nodes.len(),
            })
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.push_shared(Arc::new(value), op, needs_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        id
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> NodeId {
        self.push_shared(value, Op::Leaf, requires_grad)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Applies a layer, recording it on the tape. Returns the output node
    /// and, for parameterized layers, the weight and bias leaf ids.
    pub fn apply_layer(&mut self, layer: &Layer, input: NodeId) -> Result<NodeId> {
        Ok(self.apply_layer_inner(layer, input, false)?.0)
    }

    /// Same as [`apply_layer`](Self::apply_layer) but marks the layer's
    /// parameters as differentiable, for training.
    pub fn apply_layer_trainable(
        &mut self,
        layer: &Layer,
        input: NodeId,
    ) -> Result<(NodeId, Option<(NodeId, NodeId)>)> {
        self.apply_layer_inner(layer, input, true)
    }

    fn apply_layer_inner(
        &mut self,
        layer: &Layer,
        input: NodeId,
        train_params: bool,
    ) -> Result<(NodeId, Option<(NodeId, NodeId)>)> {
        self.check(input)?;
        let in_tensor = self.value(input);
        let out_shape = layer.output_shape(in_tensor.shape())?;
        let numel: usize = out_shape.iter().product();
        let mut out = vec![0f32; numel];
        let needs_in = self.needs(input);
        match layer {
            Layer::Conv2d(c) => {
                let (ih, iw, cin) = {
                    let s = in_tensor.shape();
                    (s[0], s[1], s[2])
                };
                layers::conv2d_forward(
                    in_tensor.data(),
                    ih,
                    iw,
                    cin,
                    c.weight.data(),
                    c.kernel_h(),
                    c.kernel_w(),
                    c.out_channels(),
                    c.bias.data(),
                    c.stride,
                    c.padding,
                    &mut out,
                    out_shape[0],
                    out_shape[1],
                );
                let w = self.leaf_shared(c.weight.clone(), train_params);
                let b = self.leaf_shared(c.bias.clone(), train_params);
                let id = self.push(
                    Tensor::new(out_shape, out)?,
                    Op::Conv2d {
                        input,
                        weight: w,
                        bias: b,
                        stride: c.stride,
                        padding: c.padding,
                    },
                    needs_in || train_params,
                );
                Ok((id, Some((w, b))))
            }
            Layer::Dense(d) => {
                layers::dense_forward(
                    in_tensor.data(),
                    d.weight.data(),
                    d.bias.data(),
                    d.in_features(),
                    d.out_features(),
                    &mut out,
                );
                let w = self.leaf_shared(d.weight.clone(), train_params);
                let b = self.leaf_shared(d.bias.clone(), train_params);
                let id = self.push(
                    Tensor::new(out_shape, out)?,
                    Op::Dense {
                        input,
                        weight: w,
                        bias: b,
                    },
                    needs_in || train_params,
                );
                Ok((id, Some((w, b))))
            }
            Layer::Relu => {
                layers::relu_forward(in_tensor.data(), &mut out);
                let id = self.push(Tensor::new(out_shape, out)?, Op::Relu { input }, needs_in);
                Ok((id, None))
            }
            Layer::MaxPool2d { size, stride } => {
                let (ih, iw, c) = {
                    let s = in_tensor.shape();
                    (s[0], s[1], s[2])
                };
                let mut argmax = vec![0u32; numel];
                layers::maxpool_forward(
                    in_tensor.data(),
                    ih,
                    iw,
                    c,
                    *size,
                    *stride,
                    &mut out,
                    &mut argmax,
                );
                let id = self.push(
                    Tensor::new(out_shape, out)?,
                    Op::MaxPool2d { input, argmax },
                    needs_in,
                );
                Ok((id, None))
            }
            Layer::AvgPool2d { size, stride } => {
                let (ih, iw, c) = {
                    let s = in_tensor.shape();
                    (s[0], s[1], s[2])
                };
                layers::avgpool_forward(in_tensor.data(), ih, iw, c, *size, *stride, &mut out);
                let id = self.push(
                    Tensor::new(out_shape, out)?,
                    Op::AvgPool2d {
                        input,
                        size: *size,
                        stride: *stride,
                    },
                    needs_in,
                );
                Ok((id, None))
            }
            Layer::Flatten => {
                out.copy_from_slice(in_tensor.data());
                let id = self.push(Tensor::new(out_shape, out)?, Op::Flatten { input }, needs_in);
                Ok((id, None))
            }
            Layer::Softmax => {
                layers::softmax_forward(in_tensor.data(), &mut out);
                let id = self.push(Tensor::new(out_shape, out)?, Op::Softmax { input }, needs_in);
                Ok((id, None))
            }
            Layer::Log { floor } => {
                layers::log_forward(in_tensor.data(), *floor, &mut out);
                let id = self.push(
                    Tensor::new(out_shape, out)?,
                    Op::Log {
                        input,
                        floor: *floor,
                    },
                    needs_in,
                );
                Ok((id, None))
            }
            Layer::Scale { factor } => {
                layers::scale_forward(in_tensor.data(), *factor, &mut out);
                let id = self.push(
                    Tensor::new(out_shape, out)?,
                    Op::Scale {
                        input,
                        factor: *factor,
                    },
                    needs_in,
                );
                Ok((id, None))
            }
        }
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                kind: "mul",
                expected: va.shape().to_vec(),
                got: vb.shape().to_vec(),
            });
        }
        let data: Vec<f32> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = va.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul { a, b }, needs))
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let total = self.value(input).sum_f64() as f32;
        let needs = self.needs(input);
        Ok(self.push(Tensor::scalar(total), Op::Sum { input }, needs))
    }

    pub fn mask_mul(&mut self, image: NodeId, mask: NodeId) -> Result<NodeId> {
        self.check(image)?;
        self.check(mask)?;
        let (vi, vm) = (self.value(image), self.value(mask));
        let is = vi.shape();
        if is.len() != 3 || vm.shape() != &is[..2] {
            return Err(Error::ShapeMismatch {
                kind: "mask_mul",
                expected: is[..is.len().min(2)].to_vec(),
                got: vm.shape().to_vec(),
            });
        }
        let (h, w, c) = (is[0], is[1], is[2]);
        let mut out = vec![0f32; h * w * c];
        for p in 0..h * w {
            let m = vm.data()[p];
            for ch in 0..c {
                out[p * c + ch] = vi.data()[p * c + ch] * m;
            }
        }
        let needs = self.needs(image) || self.needs(mask);
        Ok(self.push(
            Tensor::new(is.to_vec(), out)?,
            Op::MaskMul { image, mask },
            needs,
        ))
    }

    pub fn select(&mut self, input: NodeId, index: usize) -> Result<NodeId> {
        self.check(input)?;
        let v = self.value(input);
        if index >= v.numel() {
            return Err(Error::InvalidClass {
                class: index,
                classes: v.numel(),
            });
        }
        let val = v.data()[index];
        let needs = self.needs(input);
        Ok(self.push(Tensor::scalar(val), Op::Select { input, index }, needs))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        self.check(logits)?;
        let v = self.value(logits);
        if label >= v.numel() {
            return Err(Error::InvalidClass {
                class: label,
                classes: v.numel(),
            });
        }
        let zs = v.data();
        let m = zs.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z as f64));
        let lse = m + zs
            .iter()
            .map(|&z| ((z as f64) - m).exp())
            .sum::<f64>()
            .ln();
        let loss = (lse - zs[label] as f64) as f32;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, label },
            needs,
        ))
    }

    /// Reverse pass from a scalar root. Gradients are produced for every
    /// node on a path from a `requires_grad` leaf to the root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        self.check(root)?;
        let keep: Vec<bool> = self.nodes.iter().map(|n| n.needs_grad).collect();
        self.backward_filtered(root, &keep)
    }

    /// Gradient of a scalar output with respect to one tape node.
    ///
    /// If the output does not depend on `wrt`, the gradient is zero.
    pub fn gradient(&self, output: NodeId, wrt: NodeId) -> Result<Tensor> {
        self.check(output)?;
        self.check(wrt)?;
        // reach[n]: node n depends on wrt
        let mut reach = vec![false; self.nodes.len()];
        reach[wrt.0] = true;
        for i in 0..self.nodes.len() {
            if reach[i] {
                continue;
            }
            reach[i] = self
                .inputs_of(i)
                .iter()
                .any(|id| reach[id.0]);
        }
        let grads = self.backward_filtered(output, &reach)?;
        Ok(match grads.grads[wrt.0] {
            Some(ref g) => g.clone(),
            None => Tensor::zeros(self.value(wrt).shape().to_vec()),
        })
    }

    fn inputs_of(&self, i: usize) -> Vec<NodeId> {
        match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            }
            | Op::Dense {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
            Op::Relu { input }
            | Op::MaxPool2d { input, .. }
            | Op::AvgPool2d { input, .. }
            | Op::Flatten { input }
            | Op::Softmax { input }
            | Op::Log { input, .. }
            | Op::Scale { input, .. }
            | Op::Sum { input }
            | Op::Select { input, .. } => vec![*input],
            Op::Mul { a, b } => vec![*a, *b],
            Op::MaskMul { image, mask } => vec![*image, *mask],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    fn backward_filtered(&self, root: NodeId, keep: &[bool]) -> Result<Gradients> {
        let root_node = &self.nodes[root.0];
        if root_node.value.numel() != 1 {
            return Err(Error::NonScalarRoot {
                shape: root_node.value.shape().to_vec(),
            });
        }
        // feeds[n]: n's subtree contains a kept node, so its gradient must
        // be materialized and propagated during the reverse pass.
        let mut feeds = vec![false; self.nodes.len()];
        for i in 0..self.nodes.len() {
            feeds[i] = keep[i] || self.inputs_of(i).iter().any(|id| feeds[id.0]);
        }
        let mut acc: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut out: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        acc[root.0] = Some(vec![1.0]);
        for i in (0..self.nodes.len()).rev() {
            let Some(acc_i) = acc[i].take() else {
                continue;
            };
            // finalize this node's gradient to f32
            let g32: Vec<f32> = acc_i.iter().map(|&v| v as f32).collect();
            if keep[i] {
                out[i] = Some(Tensor::new(
                    self.nodes[i].value.shape().to_vec(),
                    g32.clone(),
                )?);
            }
            self.propagate(i, &g32, &feeds, &mut acc);
        }
        Ok(Gradients { grads: out })
    }

    fn grad_buf<'a>(
        acc: &'a mut Vec<Option<Vec<f64>>>,
        id: NodeId,
        numel: usize,
    ) -> &'a mut Vec<f64> {
        acc[id.0].get_or_insert_with(|| vec![0f64; numel])
    }

    fn propagate(&self, i: usize, dout: &[f32], feeds: &[bool], acc: &mut Vec<Option<Vec<f64>>>) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let in_t = self.value(*input);
                let w_t = self.value(*weight);
                let (ih, iw, cin) = (in_t.shape()[0], in_t.shape()[1], in_t.shape()[2]);
                let (kh, kw, cout) = (w_t.shape()[0], w_t.shape()[1], w_t.shape()[3]);
                let (oh, ow) = (node.value.shape()[0], node.value.shape()[1]);
                if feeds[input.0] {
                    let buf = Self::grad_buf(acc, *input, in_t.numel());
                    layers::conv2d_backward_input(
                        dout, oh, ow, cout,
                        w_t.data(), kh, kw, cin,
                        *stride, *padding, ih, iw,
                        buf,
                    );
                }
                if feeds[weight.0] || feeds[bias.0] {
                    let mut dw = vec![0f64; w_t.numel()];
                    let mut db = vec![0f64; cout];
                    layers::conv2d_backward_params(
                        dout, oh, ow, cout,
                        in_t.data(), ih, iw, cin,
                        kh, kw, *stride, *padding,
                        &mut dw, &mut db,
                    );
                    if feeds[weight.0] {
                        let buf = Self::grad_buf(acc, *weight, w_t.numel());
                        for (b, d) in buf.iter_mut().zip(dw) {
                            *b += d;
                        }
                    }
                    if feeds[bias.0] {
                        let buf = Self::grad_buf(acc, *bias, cout);
                        for (b, d) in buf.iter_mut().zip(db) {
                            *b += d;
                        }
                    }
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let in_t = self.value(*input);
                let w_t = self.value(*weight);
                let (n_in, n_out) = (w_t.shape()[0], w_t.shape()[1]);
                if feeds[input.0] {
                    let buf = Self::grad_buf(acc, *input, n_in);
                    layers::dense_backward_input(dout, w_t.data(), n_in, n_out, buf);
                }
                if feeds[weight.0] || feeds[bias.0] {
                    let mut dw = vec![0f64; w_t.numel()];
                    let mut db = vec![0f64; n_out];
                    layers::dense_backward_params(dout, in_t.data(), n_in, n_out, &mut dw, &mut db);
                    if feeds[weight.0] {
                        let buf = Self::grad_buf(acc, *weight, w_t.numel());
                        for (b, d) in buf.iter_mut().zip(dw) {
                            *b += d;
                        }
                    }
                    if feeds[bias.0] {
                        let buf = Self::grad_buf(acc, *bias, n_out);
                        for (b, d) in buf.iter_mut().zip(db) {
                            *b += d;
                        }
                    }
                }
            }
            Op::Relu { input } => {
                if feeds[input.0] {
                    let in_t = self.value(*input);
                    let data = in_t.data().to_vec();
                    let buf = Self::grad_buf(acc, *input, data.len());
                    layers::relu_backward(dout, &data, buf);
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if feeds[input.0] {
                    let numel = self.value(*input).numel();
                    let buf = Self::grad_buf(acc, *input, numel);
                    layers::maxpool_backward(dout, argmax, buf);
                }
            }
            Op::AvgPool2d {
                input,
                size,
                stride,
            } => {
                if feeds[input.0] {
                    let in_t = self.value(*input);
                    let (iw, c) = (in_t.shape()[1], in_t.shape()[2]);
                    let (oh, ow) = (node.value.shape()[0], node.value.shape()[1]);
                    let numel = in_t.numel();
                    let buf = Self::grad_buf(acc, *input, numel);
                    layers::avgpool_backward(dout, oh, ow, c, *size, *stride, iw, buf);
                }
            }
            Op::Flatten { input } => {
                if feeds[input.0] {
                    let numel = self.value(*input).numel();
                    let buf = Self::grad_buf(acc, *input, numel);
                    for (b, &g) in buf.iter_mut().zip(dout) {
                        *b += g as f64;
                    }
                }
            }
            Op::Softmax { input } => {
                if feeds[input.0] {
                    let y = node.value.data().to_vec();
                    let buf = Self::grad_buf(acc, *input, y.len());
                    layers::softmax_backward(dout, &y, buf);
                }
            }
            Op::Log { input, floor } => {
                if feeds[input.0] {
                    let in_t = self.value(*input);
                    let data = in_t.data().to_vec();
                    let buf = Self::grad_buf(acc, *input, data.len());
                    layers::log_backward(dout, &data, *floor, buf);
                }
            }
            Op::Scale { input, factor } => {
                if feeds[input.0] {
                    let numel = self.value(*input).numel();
                    let buf = Self::grad_buf(acc, *input, numel);
                    layers::scale_backward(dout, *factor, buf);
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data().to_vec(), self.value(*b).data().to_vec());
                if feeds[a.0] {
                    let buf = Self::grad_buf(acc, *a, va.len());
                    for i in 0..va.len() {
                        buf[i] += dout[i] as f64 * vb[i] as f64;
                    }
                }
                if feeds[b.0] {
                    let buf = Self::grad_buf(acc, *b, vb.len());
                    for i in 0..vb.len() {
                        buf[i] += dout[i] as f64 * va[i] as f64;
                    }
                }
            }
            Op::Sum { input } => {
                if feeds[input.0] {
                    let numel = self.value(*input).numel();
                    let g = dout[0] as f64;
                    let buf = Self::grad_buf(acc, *input, numel);
                    for b in buf.iter_mut() {
                        *b += g;
                    }
                }
            }
            Op::MaskMul { image, mask } => {
                let vi = self.value(*image);
                let vm = self.value(*mask);
                let (hw, c) = (vm.numel(), vi.shape()[2]);
                if feeds[image.0] {
                    let buf = Self::grad_buf(acc, *image, vi.numel());
                    for p in 0..hw {
                        let m = vm.data()[p] as f64;
                        for ch in 0..c {
                            buf[p * c + ch] += dout[p * c + ch] as f64 * m;
                        }
                    }
                }
                if feeds[mask.0] {
                    let img = vi.data().to_vec();
                    let buf = Self::grad_buf(acc, *mask, hw);
                    for p in 0..hw {
                        let mut s = 0f64;
                        for ch in 0..c {
                            s += dout[p * c + ch] as f64 * img[p * c + ch] as f64;
                        }
                        buf[p] += s;
                    }
                }
            }
            Op::Select { input, index } => {
                if feeds[input.0] {
                    let numel = self.value(*input).numel();
                    let buf = Self::grad_buf(acc, *input, numel);
                    buf[*index] += dout[0] as f64;
                }
            }
            Op::CrossEntropy { logits, label } => {
                if feeds[logits.0] {
                    let zs = self.value(*logits).data().to_vec();
                    let mut probs = vec![0f32; zs.len()];
                    layers::softmax_forward(&zs, &mut probs);
                    let g = dout[0] as f64;
                    let buf = Self::grad_buf(acc, *logits, zs.len());
                    for (i, b) in buf.iter_mut().enumerate() {
                        let onehot = if i == *label { 1.0 } else { 0.0 };
                        *b += g * (probs[i] as f64 - onehot);
                    }
                }
            }
        }
    }
}

/// Central finite differences on an f64 coordinate vector.
///
/// This is the gradient oracle: it evaluates `f` at exact f64 perturbations,
/// so its accuracy is limited only by `f`'s own precision and the O(h^2)
/// truncation term.
pub fn finite_difference_gradient<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "finite difference step must be positive, got {h}"
        )));
    }
    let mut grad = vec![0f64; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe)?;
        probe[i] = x[i] - h;
        let fm = f(&probe)?;
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Finite differences through an f32 tensor function. The perturbed
/// coordinates round to f32, so expect roughly single-precision accuracy.
pub fn finite_difference_gradient_tensor<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let x64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let shape = x.shape().to_vec();
    let g = finite_difference_gradient(
        |coords| {
            let t = Tensor::new(
                shape.clone(),
                coords.iter().map(|&v| v as f32).collect(),
            )?;
            f(&t)
        },
        &x64,
        h,
    )?;
    Tensor::new(x.shape().to_vec(), g.iter().map(|&v| v as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        // f(x) = sum(x_i^2), x = [1, 2] -> grad [2, 4]
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.gradient(s, x).unwrap();
        assert_eq!(g.data(), &[2.0, 4.0]);
    }

    #[test]
    fn softmax_select_gradient_analytic() {
        // f(x) = softmax(x)[0] at x = [0, 0] -> grad [0.25, -0.25]
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![0.0, 0.0]).unwrap(), true);
        let y = tape.apply_layer(&Layer::Softmax, x).unwrap();
        let s = tape.select(y, 0).unwrap();
        let g = tape.gradient(s, x).unwrap();
        assert!((g.data()[0] - 0.25).abs() < 1e-6, "{:?}", g.data());
        assert!((g.data()[1] + 0.25).abs() < 1e-6, "{:?}", g.data());
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![0.0, -1.0, 2.0]).unwrap(), true);
        let y = tape.apply_layer(&Layer::Relu, x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.gradient(s, x).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn gradient_rejects_foreign_node() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0), true);
        let bogus = NodeId(17);
        assert!(matches!(
            tape.gradient(x, bogus),
            Err(Error::NotOnTape { .. })
        ));
    }

    #[test]
    fn gradient_of_unreachable_wrt_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]).unwrap(), true);
        let y = tape.leaf(Tensor::from_vec(vec![3.0]).unwrap(), true);
        let s = tape.sum(x).unwrap();
        let g = tape.gradient(s, y).unwrap();
        assert_eq!(g.data(), &[0.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]).unwrap(), true);
        assert!(matches!(
            tape.backward(x),
            Err(Error::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn cross_entropy_gradient_is_probs_minus_onehot() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::from_vec(vec![1.0, -0.5, 0.25]).unwrap(), true);
        let loss = tape.cross_entropy(z, 2).unwrap();
        let g = tape.gradient(loss, z).unwrap();
        let mut probs = vec![0f32; 3];
        layers::softmax_forward(&[1.0, -0.5, 0.25], &mut probs);
        for i in 0..3 {
            let expect = probs[i] - if i == 2 { 1.0 } else { 0.0 };
            assert!((g.data()[i] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn finite_difference_quadratic_exact() {
        // f(x) = x^2 at x = 3, h = 1e-3 -> 6.000000 within 1e-6
        let g = finite_difference_gradient(|v| Ok(v[0] * v[0]), &[3.0], 1e-3).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6, "{}", g[0]);
    }

    #[test]
    fn finite_difference_constant_is_zero() {
        let g = finite_difference_gradient(|_| Ok(4.25), &[1.0, -2.0, 0.5], 1e-4).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn finite_difference_rejects_bad_step() {
        assert!(finite_difference_gradient(|v| Ok(v[0]), &[1.0], 0.0).is_err());
        assert!(finite_difference_gradient(|v| Ok(v[0]), &[1.0], -1e-3).is_err());
    }

    #[test]
    fn mask_mul_gradients() {
        let mut tape = Tape::new();
        let img = tape.leaf(
            Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            true,
        );
        let mask = tape.leaf(Tensor::new(vec![1, 2], vec![0.5, 2.0]).unwrap(), true);
        let prod = tape.mask_mul(img, mask).unwrap();
        assert_eq!(tape.value(prod).data(), &[0.5, 1.0, 6.0, 8.0]);
        let s = tape.sum(prod).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(img).unwrap().data(), &[0.5, 0.5, 2.0, 2.0]);
        assert_eq!(grads.wrt(mask).unwrap().data(), &[3.0, 7.0]);
    }
}
