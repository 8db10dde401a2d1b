//! RISE: random low-resolution binary masks, bicubically upsampled, with
//! the saliency at a pixel being the score-weighted mean of mask values.

use rand::Rng;

use super::{check_class, normalize_minmax, Method, RiseConfig, SaliencyMap};
use crate::calibration::ModelVariant;
use crate::error::{Error, Result};
use crate::model::Workspace;
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;

/// Catmull-Rom cubic convolution kernel (a = -0.5).
fn cubic(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

/// Separable bicubic upsampling with pixel-center alignment and edge
/// clamping. Output values are NOT clipped here.
pub fn bicubic_upsample(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    let mut tmp = vec![0f64; sh * dw];
    let sx_scale = sw as f64 / dw as f64;
    for dx in 0..dw {
        let sx = (dx as f64 + 0.5) * sx_scale - 0.5;
        let x0 = sx.floor() as isize;
        let frac = sx - x0 as f64;
        let wts = [
            cubic(1.0 + frac),
            cubic(frac),
            cubic(1.0 - frac),
            cubic(2.0 - frac),
        ];
        for y in 0..sh {
            let mut acc = 0f64;
            for (k, &wt) in wts.iter().enumerate() {
                let x = (x0 - 1 + k as isize).clamp(0, sw as isize - 1) as usize;
                acc += wt * src[y * sw + x] as f64;
            }
            tmp[y * dw + dx] = acc;
        }
    }
    let mut out = vec![0f32; dh * dw];
    let sy_scale = sh as f64 / dh as f64;
    for dy in 0..dh {
        let sy = (dy as f64 + 0.5) * sy_scale - 0.5;
        let y0 = sy.floor() as isize;
        let frac = sy - y0 as f64;
        let wts = [
            cubic(1.0 + frac),
            cubic(frac),
            cubic(1.0 - frac),
            cubic(2.0 - frac),
        ];
        for dx in 0..dw {
            let mut acc = 0f64;
            for (k, &wt) in wts.iter().enumerate() {
                let y = (y0 - 1 + k as isize).clamp(0, sh as isize - 1) as usize;
                acc += wt * tmp[y * dw + dx];
            }
            out[dy * dw + dx] = acc as f32;
        }
    }
    out
}

/// Draws the low-res Bernoulli masks and upsamples them to H x W, clipped
/// to [0, 1]. Row-major sampling order, one mask at a time.
pub fn sample_rise_masks(
    config: &RiseConfig,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<Vec<Tensor>> {
    if config.masks == 0 {
        return Err(Error::InvalidArgument("RISE needs >= 1 mask".into()));
    }
    if !(config.keep_probability > 0.0 && config.keep_probability < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "RISE keep probability must be in (0, 1), got {}",
            config.keep_probability
        )));
    }
    let mut rng = rng_from_seed(seed);
    let s = config.mask_size;
    let mut masks = Vec::with_capacity(config.masks);
    for _ in 0..config.masks {
        let low: Vec<f32> = (0..s * s)
            .map(|_| {
                if rng.random::<f64>() < config.keep_probability {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let up = bicubic_upsample(&low, s, s, h, w)
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        masks.push(Tensor::new(vec![h, w], up)?);
    }
    Ok(masks)
}

/// Core RISE accumulation over a given mask set:
/// S(i) = (1 / (p N)) * sum_j F(x * m_j)_c * m_j(i). Returns the raw map.
pub fn rise_with_masks(
    variant: &ModelVariant,
    x: &Tensor,
    class: usize,
    masks: &[Tensor],
    keep_probability: f64,
) -> Result<Tensor> {
    check_class(variant, class)?;
    let shape = x.shape();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let hw = h * w;
    let mut acc = vec![0f64; hw];
    let mut masked = Tensor::zeros(shape.to_vec());
    let mut ws = Workspace::default();
    for mask in masks {
        if mask.shape() != [h, w] {
            return Err(Error::ShapeMismatch {
                kind: "rise mask",
                expected: vec![h, w],
                got: mask.shape().to_vec(),
            });
        }
        {
            let md = masked.data_mut();
            for p in 0..hw {
                let m = mask.data()[p];
                for ch in 0..c {
                    md[p * c + ch] = x.data()[p * c + ch] * m;
                }
            }
        }
        let logits = variant.model().forward_logits_fast(&masked, &mut ws)?;
        let score = variant.scores_from_logits(&logits)?[class] as f64;
        for (a, &m) in acc.iter_mut().zip(mask.data()) {
            *a += score * m as f64;
        }
    }
    let norm = 1.0 / (keep_probability * masks.len() as f64);
    Tensor::new(vec![h, w], acc.iter().map(|&v| (v * norm) as f32).collect())
}

/// Full RISE: sample masks from the seed, accumulate, normalize.
pub fn rise(
    variant: &ModelVariant,
    x: &Tensor,
    class: usize,
    config: &RiseConfig,
    seed: u64,
) -> Result<SaliencyMap> {
    let shape = x.shape();
    let masks = sample_rise_masks(config, shape[0], shape[1], seed)?;
    let raw = rise_with_masks(variant, x, class, &masks, config.keep_probability)?;
    Ok(SaliencyMap {
        values: normalize_minmax(&raw),
        explained_class: class,
        method: Method::Rise,
        variant: variant.tag(),
    })
}
