//! Relevance propagation with the epsilon rule.
//!
//! The calibrated score of the explained class seeds the relevance at that
//! class's logit; the epsilon rule then redistributes relevance down
//! through dense and conv layers proportionally to each input's
//! contribution a_j * w_jk. Denominators use the weighted sums only (no
//! bias term), stabilized by epsilon * sign, so the total relevance is
//! conserved up to epsilon leakage. Relu passes relevance through, max
//! pooling routes it to the window argmax, average pooling spreads it
//! uniformly. Calibration never participates in the propagation itself:
//! it only sets the root magnitude.

use super::{check_class, channel_sum, normalize_minmax, LrpConfig, Method, SaliencyMap};
use crate::calibration::ModelVariant;
use crate::error::{Error, Result};
use crate::layers::{apply_layer, Layer};
use crate::tensor::Tensor;

#[derive(Debug)]
pub struct LrpOutcome {
    pub map: SaliencyMap,
    /// Relevance summed over all input pixels and channels.
    pub input_relevance_sum: f64,
    /// The calibrated score that seeded the propagation.
    pub root_relevance: f64,
}

fn stabilized(z: f64, epsilon: f64) -> f64 {
    if z >= 0.0 {
        z + epsilon
    } else {
        z - epsilon
    }
}

pub fn lrp_detailed(
    variant: &ModelVariant,
    x: &Tensor,
    class: usize,
    config: &LrpConfig,
) -> Result<LrpOutcome> {
    check_class(variant, class)?;
    if !(config.epsilon > 0.0) {
        return Err(Error::InvalidArgument("lrp epsilon must be positive".into()));
    }
    let model = variant.model();
    let layers = &model.layers()[..model.layers().len() - 1]; // stop before softmax
    for (i, layer) in layers.iter().enumerate() {
        if matches!(layer, Layer::Softmax | Layer::Log { .. } | Layer::Scale { .. }) {
            return Err(Error::UnsupportedLayer {
                layer: i,
                kind: layer.kind(),
                op: "lrp",
            });
        }
    }
    // forward, keeping every activation
    let mut acts: Vec<Tensor> = vec![x.clone()];
    for (i, layer) in layers.iter().enumerate() {
        let next = apply_layer(layer, acts.last().unwrap())
            .map_err(|e| crate::model::at_layer(e, i))?;
        acts.push(next);
    }

    // root: the variant's calibrated score of the class, at that logit
    let logits = acts.last().unwrap();
    let scores = variant.scores_from_logits(logits.data())?;
    let root = scores[class] as f64;
    let mut relevance = vec![0f64; logits.numel()];
    relevance[class] = root;

    // backward relevance propagation
    for (i, layer) in layers.iter().enumerate().rev() {
        let input = &acts[i];
        relevance = propagate(layer, input, &acts[i + 1], &relevance, config.epsilon)?;
    }

    let input_relevance_sum: f64 = relevance.iter().sum();
    let rel32 = Tensor::new(
        x.shape().to_vec(),
        relevance.iter().map(|&v| v as f32).collect(),
    )?;
    let raw = channel_sum(&rel32, false);
    Ok(LrpOutcome {
        map: SaliencyMap {
            values: normalize_minmax(&raw),
            explained_class: class,
            method: Method::Lrp,
            variant: variant.tag(),
        },
        input_relevance_sum,
        root_relevance: root,
    })
}

fn propagate(
    layer: &Layer,
    input: &Tensor,
    output: &Tensor,
    rel_out: &[f64],
    epsilon: f64,
) -> Result<Vec<f64>> {
    let mut rel_in = vec![0f64; input.numel()];
    match layer {
        Layer::Dense(d) => {
            let (n_in, n_out) = (d.in_features(), d.out_features());
            let a = input.data();
            let wgt = d.weight.data();
            for k in 0..n_out {
                if rel_out[k] == 0.0 {
                    continue;
                }
                let mut z = 0f64;
                for j in 0..n_in {
                    z += a[j] as f64 * wgt[j * n_out + k] as f64;
                }
                let scale = rel_out[k] / stabilized(z, epsilon);
                for j in 0..n_in {
                    rel_in[j] += a[j] as f64 * wgt[j * n_out + k] as f64 * scale;
                }
            }
        }
        Layer::Conv2d(c) => {
            let (ih, iw, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
            let (oh, ow, cout) = (output.shape()[0], output.shape()[1], output.shape()[2]);
            let (kh, kw) = (c.kernel_h(), c.kernel_w());
            let a = input.data();
            let wgt = c.weight.data();
            for oy in 0..oh {
                for ox in 0..ow {
                    for oc in 0..cout {
                        let r = rel_out[(oy * ow + ox) * cout + oc];
                        if r == 0.0 {
                            continue;
                        }
                        // weighted sum of this output's receptive field
                        let mut z = 0f64;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * c.stride + ky) as isize - c.padding as isize;
                                let ix = (ox * c.stride + kx) as isize - c.padding as isize;
                                if iy < 0 || ix < 0 || iy >= ih as isize || ix >= iw as isize {
                                    continue;
                                }
                                for ic in 0..cin {
                                    z += a[((iy as usize) * iw + ix as usize) * cin + ic] as f64
                                        * wgt[((ky * kw + kx) * cin + ic) * cout + oc] as f64;
                                }
                            }
                        }
                        let scale = r / stabilized(z, epsilon);
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * c.stride + ky) as isize - c.padding as isize;
                                let ix = (ox * c.stride + kx) as isize - c.padding as isize;
                                if iy < 0 || ix < 0 || iy >= ih as isize || ix >= iw as isize {
                                    continue;
                                }
                                for ic in 0..cin {
                                    let idx = ((iy as usize) * iw + ix as usize) * cin + ic;
                                    rel_in[idx] += a[idx] as f64
                                        * wgt[((ky * kw + kx) * cin + ic) * cout + oc] as f64
                                        * scale;
                                }
                            }
                        }
                    }
                }
            }
        }
        Layer::Relu | Layer::Flatten => {
            rel_in.copy_from_slice(rel_out);
        }
        Layer::MaxPool2d { size, stride } => {
            let (ih, iw, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
            let (oh, ow) = (output.shape()[0], output.shape()[1]);
            let a = input.data();
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let r = rel_out[(oy * ow + ox) * c + ch];
                        if r == 0.0 {
                            continue;
                        }
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for ky in 0..*size {
                            for kx in 0..*size {
                                let idx = ((oy * stride + ky) * iw + ox * stride + kx) * c + ch;
                                if a[idx] > best {
                                    best = a[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        rel_in[best_idx] += r;
                    }
                }
            }
        }
        Layer::AvgPool2d { size, stride } => {
            let (iw, c) = (input.shape()[1], input.shape()[2]);
            let (oh, ow) = (output.shape()[0], output.shape()[1]);
            let share = 1.0 / (size * size) as f64;
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let r = rel_out[(oy * ow + ox) * c + ch] * share;
                        if r == 0.0 {
                            continue;
                        }
                        for ky in 0..*size {
                            for kx in 0..*size {
                                rel_in[((oy * stride + ky) * iw + ox * stride + kx) * c + ch] += r;
                            }
                        }
                    }
                }
            }
        }
        Layer::Softmax | Layer::Log { .. } | Layer::Scale { .. } => {
            unreachable!("rejected before propagation")
        }
    }
    Ok(rel_in)
}

pub fn lrp(
    variant: &ModelVariant,
    x: &Tensor,
    class: usize,
    config: &LrpConfig,
) -> Result<SaliencyMap> {
    Ok(lrp_detailed(variant, x, class, config)?.map)
}
