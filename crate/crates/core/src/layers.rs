//! Layer definitions and their forward/backward kernels.
//!
//! Images are channel-last `[H, W, C]`. Conv weights are `[kh, kw, cin, cout]`
//! and dense weights `[in, out]`, both row-major, so the innermost loops run
//! over contiguous output channels. All reductions accumulate in f64 and are
//! rounded to f32 once per output element.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub weight: Arc<Tensor>,
    pub bias: Arc<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dLayer {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        if weight.shape().len() != 4 {
            return Err(Error::InvalidShape {
                shape: weight.shape().to_vec(),
                reason: "conv2d weight must be [kh, kw, cin, cout]".into(),
            });
        }
        let cout = weight.shape()[3];
        if bias.shape() != [cout] {
            return Err(Error::InvalidShape {
                shape: bias.shape().to_vec(),
                reason: format!("conv2d bias must be [{cout}]"),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        Ok(Conv2dLayer {
            weight: Arc::new(weight),
            bias: Arc::new(bias),
            stride,
            padding,
        })
    }

    pub fn kernel_h(&self) -> usize {
        self.weight.shape()[0]
    }
    pub fn kernel_w(&self) -> usize {
        self.weight.shape()[1]
    }
    pub fn in_channels(&self) -> usize {
        self.weight.shape()[2]
    }
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[3]
    }
}

#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weight: Arc<Tensor>,
    pub bias: Arc<Tensor>,
}

impl DenseLayer {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(Error::InvalidShape {
                shape: weight.shape().to_vec(),
                reason: "dense weight must be [in, out]".into(),
            });
        }
        let out = weight.shape()[1];
        if bias.shape() != [out] {
            return Err(Error::InvalidShape {
                shape: bias.shape().to_vec(),
                reason: format!("dense bias must be [{out}]"),
            });
        }
        Ok(DenseLayer {
            weight: Arc::new(weight),
            bias: Arc::new(bias),
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }
    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// One layer of a network. `Dense` doubles as the affine map used by the
/// Dirichlet calibration head; `Log` and `Scale` only appear in calibration
/// heads, never in stored classifiers.
#[derive(Debug, Clone)]
pub enum Layer {
    Conv2d(Conv2dLayer),
    Dense(DenseLayer),
    Relu,
    MaxPool2d { size: usize, stride: usize },
    AvgPool2d { size: usize, stride: usize },
    Flatten,
    Softmax,
    Log { floor: f32 },
    Scale { factor: f32 },
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::Dense(_) => "dense",
            Layer::Relu => "relu",
            Layer::MaxPool2d { .. } => "maxpool2d",
            Layer::AvgPool2d { .. } => "avgpool2d",
            Layer::Flatten => "flatten",
            Layer::Softmax => "softmax",
            Layer::Log { .. } => "log",
            Layer::Scale { .. } => "scale",
        }
    }

    /// Output shape for a given input shape, or a shape error.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expected: Vec<usize>| Error::ShapeMismatch {
            kind: self.kind(),
            expected,
            got: input.to_vec(),
        };
        match self {
            Layer::Conv2d(c) => {
                let (kh, kw, cin, cout) =
                    (c.kernel_h(), c.kernel_w(), c.in_channels(), c.out_channels());
                if input.len() != 3 || input[2] != cin {
                    return Err(mismatch(vec![kh, kw, cin]));
                }
                let (ih, iw) = (input[0], input[1]);
                if ih + 2 * c.padding < kh || iw + 2 * c.padding < kw {
                    return Err(mismatch(vec![kh, kw, cin]));
                }
                let oh = (ih + 2 * c.padding - kh) / c.stride + 1;
                let ow = (iw + 2 * c.padding - kw) / c.stride + 1;
                Ok(vec![oh, ow, cout])
            }
            Layer::Dense(d) => {
                if input != [d.in_features()] {
                    return Err(mismatch(vec![d.in_features()]));
                }
                Ok(vec![d.out_features()])
            }
            Layer::Relu | Layer::Log { .. } | Layer::Scale { .. } => Ok(input.to_vec()),
            Layer::MaxPool2d { size, stride } | Layer::AvgPool2d { size, stride } => {
                if input.len() != 3 || input[0] < *size || input[1] < *size {
                    return Err(mismatch(vec![*size, *size, 1]));
                }
                let oh = (input[0] - size) / stride + 1;
                let ow = (input[1] - size) / stride + 1;
                Ok(vec![oh, ow, input[2]])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Softmax => {
                if input.len() != 1 || input[0] == 0 {
                    return Err(mismatch(vec![1]));
                }
                Ok(input.to_vec())
            }
        }
    }
}

/// Applies a single layer to an input tensor.
///
/// This is the reference entry point for layer evaluation; the model forward
/// pass and the autodiff tape call the same kernels underneath, so repeated
/// application on identical inputs is bit-identical.
pub fn apply_layer(layer: &Layer, input: &Tensor) -> Result<Tensor> {
    let out_shape = layer.output_shape(input.shape())?;
    let mut out = vec![0f32; out_shape.iter().product()];
    match layer {
        Layer::Conv2d(c) => {
            let (ih, iw, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
            conv2d_forward(
                input.data(),
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
        }
        Layer::Dense(d) => dense_forward(
            input.data(),
            d.weight.data(),
            d.bias.data(),
            d.in_features(),
            d.out_features(),
            &mut out,
        ),
        Layer::Relu => relu_forward(input.data(), &mut out),
        Layer::MaxPool2d { size, stride } => {
            let mut argmax = vec![0u32; out.len()];
            maxpool_forward(
                input.data(),
                input.shape()[0],
                input.shape()[1],
                input.shape()[2],
                *size,
                *stride,
                &mut out,
                &mut argmax,
            );
        }
        Layer::AvgPool2d { size, stride } => avgpool_forward(
            input.data(),
            input.shape()[0],
            input.shape()[1],
            input.shape()[2],
            *size,
            *stride,
            &mut out,
        ),
        Layer::Flatten => out.copy_from_slice(input.data()),
        Layer::Softmax => softmax_forward(input.data(), &mut out),
        Layer::Log { floor } => log_forward(input.data(), *floor, &mut out),
        Layer::Scale { factor } => scale_forward(input.data(), *factor, &mut out),
    }
    Tensor::new(out_shape, out)
}

// ---------------------------------------------------------------------------
// Kernels. All take raw slices plus explicit dims so the tape and the
// scratch-buffer forward path can share them.
// ---------------------------------------------------------------------------

/// Register-blocked accumulation over a fixed band of output channels.
/// The `[f64; B]` accumulator stays in registers across all kernel taps.
#[inline(always)]
fn conv2d_forward_band<const B: usize>(
    input: &[f32],
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
    out: &mut [f32],
    oh: usize,
    ow: usize,
    oc0: usize,
) {
    for oy in 0..oh {
        let iy0 = (oy * stride) as isize - padding as isize;
        for ox in 0..ow {
            let ix0 = (ox * stride) as isize - padding as isize;
            let mut acc = [0f64; B];
            for (a, &b) in acc.iter_mut().zip(&bias[oc0..oc0 + B]) {
                *a = b as f64;
            }
            for ky in 0..kh {
                let iy = iy0 + ky as isize;
                if iy < 0 || iy >= ih as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = ix0 + kx as isize;
                    if ix < 0 || ix >= iw as isize {
                        continue;
                    }
                    let ibase = ((iy as usize) * iw + ix as usize) * cin;
                    let wbase = (ky * kw + kx) * cin * cout + oc0;
                    for ic in 0..cin {
                        let v = input[ibase + ic] as f64;
                        let wrow = &weight[wbase + ic * cout..wbase + ic * cout + B];
                        for (a, &w) in acc.iter_mut().zip(wrow) {
                            *a += v * w as f64;
                        }
                    }
                }
            }
            let obase = (oy * ow + ox) * cout + oc0;
            for (o, &a) in out[obase..obase + B].iter_mut().zip(acc.iter()) {
                *o = a as f32;
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    input: &[f32],
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
    out: &mut [f32],
    oh: usize,
    ow: usize,
) {
    debug_assert_eq!(out.len(), oh * ow * cout);
    let mut oc0 = 0;
    macro_rules! band {
        ($b:expr) => {
            while oc0 + $b <= cout {
                conv2d_forward_band::<$b>(
                    input, ih, iw, cin, weight, kh, kw, cout, bias, stride, padding, out, oh, ow,
                    oc0,
                );
                oc0 += $b;
            }
        };
    }
    band!(32);
    band!(16);
    band!(8);
    band!(4);
    band!(1);
}

/// Gradient of the conv output w.r.t. its input. Accumulates into `dinput`
/// (f64, caller-zeroed) so chained contributions stay order-stable.
pub(crate) fn conv2d_backward_input(
    dout: &[f32],
    oh: usize,
    ow: usize,
    cout: usize,
    weight: &[f32],
    kh: usize,
    kw: usize,
    cin: usize,
    stride: usize,
    padding: usize,
    ih: usize,
    iw: usize,
    dinput: &mut [f64],
) {
    debug_assert_eq!(dinput.len(), ih * iw * cin);
    // Transpose to [kh, kw, cout, cin] so the inner loop is contiguous in cin.
    let mut wt = vec![0f32; weight.len()];
    for k in 0..kh * kw {
        let src = &weight[k * cin * cout..(k + 1) * cin * cout];
        let dst = &mut wt[k * cin * cout..(k + 1) * cin * cout];
        for ic in 0..cin {
            for oc in 0..cout {
                dst[oc * cin + ic] = src[ic * cout + oc];
            }
        }
    }
    for oy in 0..oh {
        let iy0 = (oy * stride) as isize - padding as isize;
        for ox in 0..ow {
            let ix0 = (ox * stride) as isize - padding as isize;
            let obase = (oy * ow + ox) * cout;
            for ky in 0..kh {
                let iy = iy0 + ky as isize;
                if iy < 0 || iy >= ih as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = ix0 + kx as isize;
                    if ix < 0 || ix >= iw as isize {
                        continue;
                    }
                    let ibase = ((iy as usize) * iw + ix as usize) * cin;
                    let wbase = (ky * kw + kx) * cin * cout;
                    for oc in 0..cout {
                        let g = dout[obase + oc] as f64;
                        let wrow = &wt[wbase + oc * cin..wbase + (oc + 1) * cin];
                        let dst = &mut dinput[ibase..ibase + cin];
                        for (d, &w) in dst.iter_mut().zip(wrow) {
                            *d += g * w as f64;
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of the conv output w.r.t. weight and bias (training path).
pub(crate) fn conv2d_backward_params(
    dout: &[f32],
    oh: usize,
    ow: usize,
    cout: usize,
    input: &[f32],
    ih: usize,
    iw: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    dweight: &mut [f64],
    dbias: &mut [f64],
) {
    debug_assert_eq!(dweight.len(), kh * kw * cin * cout);
    debug_assert_eq!(dbias.len(), cout);
    for oy in 0..oh {
        let iy0 = (oy * stride) as isize - padding as isize;
        for ox in 0..ow {
            let ix0 = (ox * stride) as isize - padding as isize;
            let obase = (oy * ow + ox) * cout;
            for oc in 0..cout {
                dbias[oc] += dout[obase + oc] as f64;
            }
            for ky in 0..kh {
                let iy = iy0 + ky as isize;
                if iy < 0 || iy >= ih as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = ix0 + kx as isize;
                    if ix < 0 || ix >= iw as isize {
                        continue;
                    }
                    let ibase = ((iy as usize) * iw + ix as usize) * cin;
                    let wbase = (ky * kw + kx) * cin * cout;
                    for ic in 0..cin {
                        let v = input[ibase + ic] as f64;
                        let drow = &mut dweight[wbase + ic * cout..wbase + (ic + 1) * cout];
                        for (d, &g) in drow.iter_mut().zip(&dout[obase..obase + cout]) {
                            *d += v * g as f64;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn dense_forward(
    input: &[f32],
    weight: &[f32],
    bias: &[f32],
    n_in: usize,
    n_out: usize,
    out: &mut [f32],
) {
    let mut acc: Vec<f64> = bias.iter().map(|&b| b as f64).collect();
    for i in 0..n_in {
        let v = input[i] as f64;
        let wrow = &weight[i * n_out..(i + 1) * n_out];
        for (a, &w) in acc.iter_mut().zip(wrow) {
            *a += v * w as f64;
        }
    }
    for (o, &a) in out.iter_mut().zip(acc.iter()) {
        *o = a as f32;
    }
}

pub(crate) fn dense_backward_input(
    dout: &[f32],
    weight: &[f32],
    n_in: usize,
    n_out: usize,
    dinput: &mut [f64],
) {
    for i in 0..n_in {
        let wrow = &weight[i * n_out..(i + 1) * n_out];
        let mut s = 0f64;
        for (&g, &w) in dout.iter().zip(wrow) {
            s += g as f64 * w as f64;
        }
        dinput[i] += s;
    }
}

pub(crate) fn dense_backward_params(
    dout: &[f32],
    input: &[f32],
    n_in: usize,
    n_out: usize,
    dweight: &mut [f64],
    dbias: &mut [f64],
) {
    for (db, &g) in dbias.iter_mut().zip(dout) {
        *db += g as f64;
    }
    for i in 0..n_in {
        let v = input[i] as f64;
        let drow = &mut dweight[i * n_out..(i + 1) * n_out];
        for (d, &g) in drow.iter_mut().zip(dout) {
            *d += v * g as f64;
        }
    }
}

pub(crate) fn relu_forward(input: &[f32], out: &mut [f32]) {
    for (o, &v) in out.iter_mut().zip(input) {
        *o = if v > 0.0 { v } else { 0.0 };
    }
}

/// relu' at exactly 0 is 0 (subgradient convention).
pub(crate) fn relu_backward(dout: &[f32], input: &[f32], dinput: &mut [f64]) {
    for i in 0..input.len() {
        if input[i] > 0.0 {
            dinput[i] += dout[i] as f64;
        }
    }
}

pub(crate) fn maxpool_forward(
    input: &[f32],
    ih: usize,
    iw: usize,
    c: usize,
    size: usize,
    stride: usize,
    out: &mut [f32],
    argmax: &mut [u32],
) {
    let oh = (ih - size) / stride + 1;
    let ow = (iw - size) / stride + 1;
    for oy in 0..oh {
        for ox in 0..ow {
            let obase = (oy * ow + ox) * c;
            for ch in 0..c {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0u32;
                for ky in 0..size {
                    let iy = oy * stride + ky;
                    for kx in 0..size {
                        let ix = ox * stride + kx;
                        let idx = (iy * iw + ix) * c + ch;
                        // strictly greater: ties go to the first in scan order
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx as u32;
                        }
                    }
                }
                out[obase + ch] = best;
                argmax[obase + ch] = best_idx;
            }
        }
    }
}

pub(crate) fn maxpool_backward(dout: &[f32], argmax: &[u32], dinput: &mut [f64]) {
    for (i, &g) in dout.iter().enumerate() {
        dinput[argmax[i] as usize] += g as f64;
    }
}

pub(crate) fn avgpool_forward(
    input: &[f32],
    ih: usize,
    iw: usize,
    c: usize,
    size: usize,
    stride: usize,
    out: &mut [f32],
) {
    let oh = (ih - size) / stride + 1;
    let ow = (iw - size) / stride + 1;
    let norm = 1.0 / (size * size) as f64;
    for oy in 0..oh {
        for ox in 0..ow {
            let obase = (oy * ow + ox) * c;
            for ch in 0..c {
                let mut acc = 0f64;
                for ky in 0..size {
                    let iy = oy * stride + ky;
                    for kx in 0..size {
                        let ix = ox * stride + kx;
                        acc += input[(iy * iw + ix) * c + ch] as f64;
                    }
                }
                out[obase + ch] = (acc * norm) as f32;
            }
        }
    }
}

pub(crate) fn avgpool_backward(
    dout: &[f32],
    oh: usize,
    ow: usize,
    c: usize,
    size: usize,
    stride: usize,
    iw: usize,
    dinput: &mut [f64],
) {
    let norm = 1.0 / (size * size) as f64;
    for oy in 0..oh {
        for ox in 0..ow {
            let obase = (oy * ow + ox) * c;
            for ch in 0..c {
                let g = dout[obase + ch] as f64 * norm;
                for ky in 0..size {
                    let iy = oy * stride + ky;
                    for kx in 0..size {
                        let ix = ox * stride + kx;
                        dinput[(iy * iw + ix) * c + ch] += g;
                    }
                }
            }
        }
    }
}

/// Numerically stable softmax: max subtraction, f64 exponentials. Outputs
/// are clamped to the smallest positive normal f32 so they stay strictly
/// positive even for extreme logit spreads.
pub(crate) fn softmax_forward(input: &[f32], out: &mut [f32]) {
    let mut m = f64::NEG_INFINITY;
    for &v in input {
        m = m.max(v as f64);
    }
    let mut sum = 0f64;
    for &v in input {
        sum += ((v as f64) - m).exp();
    }
    for (o, &v) in out.iter_mut().zip(input) {
        let p = (((v as f64) - m).exp() / sum) as f32;
        *o = p.max(f32::MIN_POSITIVE);
    }
}

pub(crate) fn softmax_backward(dout: &[f32], output: &[f32], dinput: &mut [f64]) {
    let mut dot = 0f64;
    for (&g, &y) in dout.iter().zip(output) {
        dot += g as f64 * y as f64;
    }
    for i in 0..output.len() {
        dinput[i] += output[i] as f64 * (dout[i] as f64 - dot);
    }
}

pub(crate) fn log_forward(input: &[f32], floor: f32, out: &mut [f32]) {
    for (o, &v) in out.iter_mut().zip(input) {
        *o = (v.max(floor) as f64).ln() as f32;
    }
}

pub(crate) fn log_backward(dout: &[f32], input: &[f32], floor: f32, dinput: &mut [f64]) {
    for i in 0..input.len() {
        if input[i] > floor {
            dinput[i] += dout[i] as f64 / input[i] as f64;
        }
    }
}

pub(crate) fn scale_forward(input: &[f32], factor: f32, out: &mut [f32]) {
    for (o, &v) in out.iter_mut().zip(input) {
        *o = v * factor;
    }
}

pub(crate) fn scale_backward(dout: &[f32], factor: f32, dinput: &mut [f64]) {
    for i in 0..dout.len() {
        dinput[i] += dout[i] as f64 * factor as f64;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn relu_matches_definition() {
        let t = tensor(&[3], vec![-1.0, 0.0, 2.0]);
        let out = apply_layer(&Layer::Relu, &t).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let t = tensor(&[3], vec![0.0, 0.0, 0.0]);
        let out = apply_layer(&Layer::Softmax, &t).unwrap();
        for &v in out.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_sums_to_one_and_positive() {
        let t = tensor(&[4], vec![5.0, -3.0, 0.5, 100.0]);
        let out = apply_layer(&Layer::Softmax, &t).unwrap();
        let sum: f64 = out.data().iter().map(|&v| v as f64).sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(out.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn conv_identity_kernel_preserves_image() {
        // 3x3 kernel, center weight 1, zero padding 1 -> identity on 1 channel
        let mut w = vec![0f32; 9];
        w[4] = 1.0;
        let conv = Conv2dLayer::new(
            tensor(&[3, 3, 1, 1], w),
            tensor(&[1], vec![0.0]),
            1,
            1,
        )
        .unwrap();
        let img = tensor(&[4, 5, 1], (0..20).map(|i| i as f32 * 0.1).collect());
        let out = apply_layer(&Layer::Conv2d(conv), &img).unwrap();
        assert_eq!(out.shape(), img.shape());
        for (a, b) in out.data().iter().zip(img.data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn conv_shape_error_names_both_shapes() {
        let conv = Conv2dLayer::new(
            tensor(&[3, 3, 2, 4], vec![0.0; 72]),
            tensor(&[4], vec![0.0; 4]),
            1,
            1,
        )
        .unwrap();
        let img = tensor(&[4, 4, 3], vec![0.0; 48]);
        let err = apply_layer(&Layer::Conv2d(conv), &img).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[4, 4, 3]"), "{msg}");
    }

    #[test]
    fn maxpool_takes_first_of_ties() {
        let img = tensor(&[2, 2, 1], vec![1.0, 1.0, 1.0, 1.0]);
        let mut out = vec![0f32; 1];
        let mut arg = vec![0u32; 1];
        maxpool_forward(img.data(), 2, 2, 1, 2, 2, &mut out, &mut arg);
        assert_eq!(out[0], 1.0);
        assert_eq!(arg[0], 0);
    }

    #[test]
    fn avgpool_means_windows() {
        let img = tensor(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let out = apply_layer(&Layer::AvgPool2d { size: 2, stride: 2 }, &img).unwrap();
        assert_eq!(out.data(), &[2.5]);
    }

    #[test]
    fn apply_layer_is_pure() {
        let conv = Conv2dLayer::new(
            tensor(&[2, 2, 1, 3], (0..12).map(|i| i as f32 * 0.3 - 1.0).collect()),
            tensor(&[3], vec![0.1, -0.2, 0.3]),
            1,
            0,
        )
        .unwrap();
        let img = tensor(&[3, 3, 1], (0..9).map(|i| (i as f32).sin()).collect());
        let a = apply_layer(&Layer::Conv2d(conv.clone()), &img).unwrap();
        let b = apply_layer(&Layer::Conv2d(conv), &img).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
