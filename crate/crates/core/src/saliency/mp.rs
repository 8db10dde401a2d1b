//! Perturbation-mask saliency: find the smallest, smoothest mask whose
//! application drops the predicted score the most, by minimizing
//! lambda * ||1 - m||_1 + beta * TV(m) + F(x * m)_c over m in [0, 1]^{HxW}.
//!
//! The L1 and TV terms are per-pixel (resp. per-pair) means, which makes
//! the coefficients independent of the image size; with raw sums both
//! terms would dwarf the bounded score term and freeze the mask at 1 on
//! any image.

use super::{check_class, normalize_minmax, Method, MpConfig, SaliencyMap};
use crate::autodiff::Tape;
use crate::calibration::ModelVariant;
use crate::error::{Error, Result};
use crate::opt::Adam;
use crate::tensor::Tensor;

#[derive(Debug)]
pub struct MpOutcome {
    pub map: SaliencyMap,
    /// Objective value at steps 0, 50, 100, ... plus the final mask.
    pub objective_checkpoints: Vec<f64>,
    pub final_objective: f64,
}

/// Anisotropic total variation of the mask and its subgradient
/// (sign convention: 0 at exact ties).
fn tv_and_grad(m: &[f32], h: usize, w: usize, grad: &mut [f64]) -> f64 {
    let mut tv = 0f64;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                let d = m[i + 1] as f64 - m[i] as f64;
                tv += d.abs();
                let s = sign(d);
                grad[i + 1] += s;
                grad[i] -= s;
            }
            if y + 1 < h {
                let d = m[i + w] as f64 - m[i] as f64;
                tv += d.abs();
                let s = sign(d);
                grad[i + w] += s;
                grad[i] -= s;
            }
        }
    }
    tv
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projected Adam on the mask, initialized at all-ones. The `seed`
/// parameter is accepted for interface uniformity; the optimization is
/// deterministic.
pub fn meaningful_perturbation_detailed(
    variant: &ModelVariant,
    x: &Tensor,
    class: usize,
    config: &MpConfig,
    _seed: u64,
) -> Result<MpOutcome> {
    check_class(variant, class)?;
    if config.l1_coeff <= 0.0
        || config.tv_coeff <= 0.0
        || config.learning_rate <= 0.0
        || config.steps == 0
    {
        return Err(Error::InvalidArgument(
            "perturbation config values must all be positive".into(),
        ));
    }
    let shape = x.shape();
    let (h, w) = (shape[0], shape[1]);
    let hw = h * w;
    let mut mask = vec![1f32; hw];
    let mut adam = Adam::new(config.learning_rate, hw);
    let mut checkpoints = Vec::new();
    let mut objective = f64::NAN;
    for step in 0..=config.steps {
        // score term and its mask gradient through the tape
        let mut tape = Tape::new();
        let image = tape.leaf(x.clone(), false);
        let m_leaf = tape.leaf(Tensor::new(vec![h, w], mask.clone())?, true);
        let masked = tape.mask_mul(image, m_leaf)?;
        let scores = variant.scores_on_tape(&mut tape, masked)?;
        let score_node = tape.select(scores, class)?;
        let score = tape.value(score_node).as_scalar()? as f64;

        // regularizer values and subgradients, computed analytically
        let n_pairs = (h * (w - 1) + w * (h - 1)).max(1) as f64;
        let mut grad = vec![0f64; hw];
        let mut tv_grad = vec![0f64; hw];
        let tv = tv_and_grad(&mask, h, w, &mut tv_grad) / n_pairs;
        let mut l1 = 0f64;
        for i in 0..hw {
            let one_minus = 1.0 - mask[i] as f64;
            l1 += one_minus.abs();
            grad[i] = -config.l1_coeff * sign(one_minus) / hw as f64
                + config.tv_coeff * tv_grad[i] / n_pairs;
        }
        l1 /= hw as f64;
        objective = config.l1_coeff * l1 + config.tv_coeff * tv + score;
        if !objective.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: format!("perturbation objective became {objective}"),
            });
        }
        if step % 50 == 0 || step == config.steps {
            checkpoints.push(objective);
        }
        if step == config.steps {
            break;
        }
        let score_grad = tape.gradient(score_node, m_leaf)?;
        for (g, &sg) in grad.iter_mut().zip(score_grad.data()) {
            *g += sg as f64;
        }
        adam.step(&mut mask, &grad);
        for v in mask.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    // deleted pixels are the important ones
    let raw = Tensor::new(vec![h, w], mask.iter().map(|&m| 1.0 - m).collect())?;
    Ok(MpOutcome {
        map: SaliencyMap {
            values: normalize_minmax(&raw),
            explained_class: class,
            method: Method::MeaningfulPerturbation,
            variant: variant.tag(),
        },
        objective_checkpoints: checkpoints,
        final_objective: objective,
    })
}

pub fn meaningful_perturbation(
    variant: &ModelVariant,
    x: &Tensor,
    class: usize,
    config: &MpConfig,
    seed: u64,
) -> Result<SaliencyMap> {
    Ok(meaningful_perturbation_detailed(variant, x, class, config, seed)?.map)
}
