//! Post-hoc calibrators and calibrated model variants.
//!
//! Temperature scaling divides logits by a fitted T > 0 before softmax and
//! never changes the argmax. The Dirichlet map applies an affine transform
//! to log-scores followed by softmax and may change the predicted class.
//! Both are differentiable, so input gradients flow through them.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::layers::{DenseLayer, Layer};
use crate::model::{ClassifierModel, GradientTarget, Prediction, Workspace};
use crate::opt::Adam;
use crate::tensor::Tensor;

pub const TEMPERATURE_BRACKET: (f64, f64) = (0.05, 20.0);
pub const TEMPERATURE_TOL: f64 = 1e-4;
pub const DEFAULT_LOG_FLOOR: f32 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureScaler {
    t: f64,
}

impl TemperatureScaler {
    pub fn new(t: f64) -> Result<Self> {
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {t}"
            )));
        }
        Ok(TemperatureScaler { t })
    }

    pub fn temperature(&self) -> f64 {
        self.t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirichletMap {
    /// Row-major C x C matrix: z_i = sum_j w[i*c + j] * ln(s_j) + b[i].
    weight: Vec<f32>,
    bias: Vec<f32>,
    log_floor: f32,
    classes: usize,
}

impl DirichletMap {
    pub fn new(weight: Vec<f32>, bias: Vec<f32>, classes: usize, log_floor: f32) -> Result<Self> {
        if weight.len() != classes * classes || bias.len() != classes {
            return Err(Error::InvalidArgument(format!(
                "dirichlet map needs {0}x{0} weight and {0} bias entries",
                classes
            )));
        }
        if !(log_floor > 0.0) || weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "dirichlet map entries must be finite with a positive log floor".into(),
            ));
        }
        Ok(DirichletMap {
            weight,
            bias,
            classes,
            log_floor,
        })
    }

    pub fn identity(classes: usize, log_floor: f32) -> Self {
        let mut weight = vec![0f32; classes * classes];
        for i in 0..classes {
            weight[i * classes + i] = 1.0;
        }
        DirichletMap {
            weight,
            bias: vec![0f32; classes],
            classes,
            log_floor,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn weight(&self) -> &[f32] {
        &self.weight
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn log_floor(&self) -> f32 {
        self.log_floor
    }

    /// The map as layers: softmax scores -> log -> affine -> softmax.
    /// The dense layer stores the transpose of `weight` ([in, out] layout).
    fn head_layers(&self) -> Result<Vec<Layer>> {
        let c = self.classes;
        let mut wt = vec![0f32; c * c];
        for i in 0..c {
            for j in 0..c {
                wt[j * c + i] = self.weight[i * c + j];
            }
        }
        let dense = DenseLayer::new(
            Tensor::new(vec![c, c], wt)?,
            Tensor::new(vec![c], self.bias.clone())?,
        )?;
        Ok(vec![
            Layer::Log {
                floor: self.log_floor,
            },
            Layer::Dense(dense),
            Layer::Softmax,
        ])
    }
}

/// A fitted post-hoc calibrator.
#[derive(Debug, Clone, PartialEq)]
pub enum Calibrator {
    Identity,
    Temperature(TemperatureScaler),
    Dirichlet(DirichletMap),
}

impl Calibrator {
    pub fn kind(&self) -> &'static str {
        match self {
            Calibrator::Identity => "identity",
            Calibrator::Temperature(_) => "temperature",
            Calibrator::Dirichlet(_) => "dirichlet",
        }
    }

    /// Layers applied to the base model's logits to produce calibrated
    /// scores (always ending in softmax).
    pub fn head_layers(&self) -> Result<Vec<Layer>> {
        Ok(match self {
            Calibrator::Identity => vec![Layer::Softmax],
            Calibrator::Temperature(s) => vec![
                Layer::Scale {
                    factor: (1.0 / s.temperature()) as f32,
                },
                Layer::Softmax,
            ],
            Calibrator::Dirichlet(map) => {
                let mut layers = vec![Layer::Softmax];
                layers.extend(map.head_layers()?);
                layers
            }
        })
    }
}

/// Label of a model variant inside an experiment. `Uncalibrated` and
/// `Identity` compute identical scores but are distinct variants: the
/// injected identity calibrator exercises the full calibrated code path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum VariantTag {
    Uncalibrated,
    Identity,
    Temperature,
    Dirichlet,
}

impl VariantTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            VariantTag::Uncalibrated => "uncalibrated",
            VariantTag::Identity => "identity",
            VariantTag::Temperature => "temperature",
            VariantTag::Dirichlet => "dirichlet",
        }
    }
}

/// A classifier together with a calibrator, exposing the same
/// predict/input-gradient contract as the bare model.
#[derive(Debug, Clone)]
pub struct ModelVariant {
    model: Arc<ClassifierModel>,
    calibrator: Calibrator,
    tag: VariantTag,
}

impl ModelVariant {
    pub fn new(model: Arc<ClassifierModel>, calibrator: Calibrator, tag: VariantTag) -> Self {
        ModelVariant {
            model,
            calibrator,
            tag,
        }
    }

    pub fn uncalibrated(model: Arc<ClassifierModel>) -> Self {
        ModelVariant::new(model, Calibrator::Identity, VariantTag::Uncalibrated)
    }

    pub fn model(&self) -> &ClassifierModel {
        &self.model
    }

    pub fn calibrator(&self) -> &Calibrator {
        &self.calibrator
    }

    pub fn tag(&self) -> VariantTag {
        self.tag
    }

    pub fn classes(&self) -> usize {
        self.model.classes()
    }

    /// Calibrated scores from precomputed logits (hot path: the caller
    /// already ran the base forward).
    pub fn scores_from_logits(&self, logits: &[f32]) -> Result<Vec<f32>> {
        let mut cur = Tensor::new(vec![logits.len()], logits.to_vec())?;
        for layer in self.calibrator.head_layers()? {
            cur = crate::layers::apply_layer(&layer, &cur)?;
        }
        Ok(cur.into_data())
    }

    /// Calibrated scores for an input image.
    pub fn scores(&self, x: &Tensor, ws: &mut Workspace) -> Result<Vec<f32>> {
        let logits = self.model.forward_logits_fast(x, ws)?;
        self.scores_from_logits(&logits)
    }

    /// Full prediction under the calibrated scores (argmax may differ from
    /// the base model under a Dirichlet calibrator).
    pub fn predict(&self, x: &Tensor) -> Result<Prediction> {
        let logits = self.model.forward_logits(x)?;
        let scores = self.scores_from_logits(logits.data())?;
        let scores = Tensor::new(vec![scores.len()], scores)?;
        Ok(Prediction {
            predicted_class: scores.argmax(),
            logits,
            scores,
        })
    }

    /// Records base forward plus calibration head; returns the scores node.
    pub fn scores_on_tape(&self, tape: &mut Tape, input: NodeId) -> Result<NodeId> {
        let mut cur = self.model.forward_logits_on_tape(tape, input)?;
        for layer in self.calibrator.head_layers()? {
            cur = tape.apply_layer(&layer, cur)?;
        }
        Ok(cur)
    }

    /// Gradient of the calibrated score of `class_index` w.r.t. the input.
    pub fn score_gradient(&self, x: &Tensor, class_index: usize) -> Result<Tensor> {
        if class_index >= self.classes() {
            return Err(Error::InvalidClass {
                class: class_index,
                classes: self.classes(),
            });
        }
        if matches!(self.calibrator, Calibrator::Identity) {
            return self.model.input_gradient(x, class_index, GradientTarget::Score);
        }
        let mut tape = Tape::new();
        let input = tape.leaf(x.clone(), true);
        let scores = self.scores_on_tape(&mut tape, input)?;
        let scalar = tape.select(scores, class_index)?;
        let grad = tape.gradient(scalar, input)?;
        grad.reshaped(x.shape().to_vec())
    }
}

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

/// Mean negative log-likelihood of softmax(logits / t), in f64.
pub fn temperature_nll(logits: &[Tensor], labels: &[usize], t: f64) -> f64 {
    let mut total = 0f64;
    for (l, &y) in logits.iter().zip(labels) {
        let zs = l.data();
        let mut m = f64::NEG_INFINITY;
        for &z in zs {
            m = m.max(z as f64 / t);
        }
        let lse = m + zs
            .iter()
            .map(|&z| (z as f64 / t - m).exp())
            .sum::<f64>()
            .ln();
        total += lse - zs[y] as f64 / t;
    }
    total / logits.len() as f64
}

/// Fits T by golden-section search of the holdout NLL over
/// [`TEMPERATURE_BRACKET`]. The result never has higher NLL than T = 1.
pub fn fit_temperature(logits: &[Tensor], labels: &[usize]) -> Result<TemperatureScaler> {
    if logits.len() < 2 || logits.len() != labels.len() {
        return Err(Error::DegenerateHoldout(
            "temperature fitting needs >= 2 (logits, label) pairs",
        ));
    }
    let first = labels[0];
    if labels.iter().all(|&l| l == first) {
        return Err(Error::DegenerateHoldout(
            "temperature fitting needs >= 2 distinct labels",
        ));
    }
    for (i, l) in logits.iter().enumerate() {
        if labels[i] >= l.numel() {
            return Err(Error::InvalidClass {
                class: labels[i],
                classes: l.numel(),
            });
        }
    }
    let nll = |t: f64| temperature_nll(logits, labels, t);
    let (mut a, mut b) = TEMPERATURE_BRACKET;
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (nll(c), nll(d));
    while b - a > TEMPERATURE_TOL {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = nll(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = nll(d);
        }
    }
    let t_star = 0.5 * (a + b);
    // T = 1 lies in the bracket; keep it if the search drifted above it.
    let t = if nll(t_star) <= nll(1.0) { t_star } else { 1.0 };
    TemperatureScaler::new(t)
}

/// softmax(logits / T); preserves the argmax for every T > 0.
pub fn apply_temperature(scaler: &TemperatureScaler, logits: &Tensor) -> Result<Tensor> {
    let scaled = crate::layers::apply_layer(
        &Layer::Scale {
            factor: (1.0 / scaler.temperature()) as f32,
        },
        logits,
    )?;
    crate::layers::apply_layer(&Layer::Softmax, &scaled)
}

/// softmax(W ln(max(scores, floor)) + b).
pub fn apply_dirichlet(map: &DirichletMap, scores: &Tensor) -> Result<Tensor> {
    if scores.numel() != map.classes {
        return Err(Error::ShapeMismatch {
            kind: "dirichlet",
            expected: vec![map.classes],
            got: scores.shape().to_vec(),
        });
    }
    let mut cur = scores.clone();
    for layer in map.head_layers()? {
        cur = crate::layers::apply_layer(&layer, &cur)?;
    }
    Ok(cur)
}

#[derive(Debug, Clone)]
pub struct DirichletFitConfig {
    pub off_diag_penalty: f64,
    pub bias_penalty: f64,
    pub log_floor: f32,
    pub learning_rate: f64,
    pub max_steps: usize,
}

impl Default for DirichletFitConfig {
    fn default() -> Self {
        DirichletFitConfig {
            off_diag_penalty: 1e-3,
            bias_penalty: 1e-3,
            log_floor: DEFAULT_LOG_FLOOR,
            learning_rate: 1e-2,
            max_steps: 2000,
        }
    }
}

/// Fits (W, b) by full-batch Adam on mean NLL plus L2 penalties on the
/// off-diagonal of W and on b, starting from the identity map. Returns the
/// best parameters seen, so the fitted objective never exceeds the
/// initialization's.
pub fn fit_dirichlet(
    scores: &[Tensor],
    labels: &[usize],
    config: &DirichletFitConfig,
) -> Result<DirichletMap> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::DegenerateHoldout(
            "dirichlet fitting needs aligned (scores, label) pairs",
        ));
    }
    let c = scores[0].numel();
    let n = scores.len();
    // precompute u = ln(max(s, floor)) in f64
    let mut u = vec![0f64; n * c];
    for (i, s) in scores.iter().enumerate() {
        if s.numel() != c {
            return Err(Error::ShapeMismatch {
                kind: "dirichlet fit",
                expected: vec![c],
                got: s.shape().to_vec(),
            });
        }
        if labels[i] >= c {
            return Err(Error::InvalidClass {
                class: labels[i],
                classes: c,
            });
        }
        for j in 0..c {
            u[i * c + j] = (s.data()[j].max(config.log_floor) as f64).ln();
        }
    }

    let mut params = vec![0f32; c * c + c];
    for i in 0..c {
        params[i * c + i] = 1.0;
    }
    let objective_and_grad = |params: &[f32], grad: Option<&mut [f64]>| -> f64 {
        let (w, b) = params.split_at(c * c);
        let mut nll = 0f64;
        let mut g = grad;
        for i in 0..n {
            let ui = &u[i * c..(i + 1) * c];
            let mut z = vec![0f64; c];
            for r in 0..c {
                let mut acc = b[r] as f64;
                for j in 0..c {
                    acc += w[r * c + j] as f64 * ui[j];
                }
                z[r] = acc;
            }
            let m = z.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            nll += lse - z[labels[i]];
            if let Some(gbuf) = g.as_deref_mut() {
                for r in 0..c {
                    let p = (z[r] - lse).exp();
                    let dz = p - if r == labels[i] { 1.0 } else { 0.0 };
                    for j in 0..c {
                        gbuf[r * c + j] += dz * ui[j];
                    }
                    gbuf[c * c + r] += dz;
                }
            }
        }
        nll /= n as f64;
        let mut penalty = 0f64;
        for r in 0..c {
            for j in 0..c {
                if r != j {
                    penalty += config.off_diag_penalty * (w[r * c + j] as f64).powi(2);
                }
            }
            penalty += config.bias_penalty * (b[r] as f64).powi(2);
        }
        if let Some(gbuf) = g {
            let scale = 1.0 / n as f64;
            for v in gbuf.iter_mut() {
                *v *= scale;
            }
            for r in 0..c {
                for j in 0..c {
                    if r != j {
                        gbuf[r * c + j] += 2.0 * config.off_diag_penalty * w[r * c + j] as f64;
                    }
                }
                gbuf[c * c + r] += 2.0 * config.bias_penalty * b[r] as f64;
            }
        }
        nll + penalty
    };

    let mut adam = Adam::new(config.learning_rate, params.len());
    let mut best = params.clone();
    let mut best_obj = objective_and_grad(&params, None);
    let mut window_obj = best_obj;
    for step in 0..config.max_steps {
        let mut grad = vec![0f64; params.len()];
        let obj = objective_and_grad(&params, Some(&mut grad));
        if !obj.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: format!("dirichlet objective became {obj}"),
            });
        }
        if obj < best_obj {
            best_obj = obj;
            best.copy_from_slice(&params);
        }
        if step % 50 == 0 && step > 0 {
            let improvement = (window_obj - obj) / window_obj.abs().max(1e-12);
            if improvement < 1e-7 {
                break;
            }
            window_obj = obj;
        }
        adam.step(&mut params, &grad);
    }
    let (w, b) = best.split_at(c * c);
    DirichletMap::new(w.to_vec(), b.to_vec(), c, config.log_floor)
}

// ---------------------------------------------------------------------------
// Calibrator files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
pub struct CalibratorProvenance {
    pub seed: u64,
    pub calibration_set_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum CalibratorFile {
    Identity {
        provenance: CalibratorProvenance,
    },
    Temperature {
        t: f64,
        provenance: CalibratorProvenance,
    },
    Dirichlet {
        weight: Vec<Vec<f32>>,
        bias: Vec<f32>,
        log_floor: f32,
        provenance: CalibratorProvenance,
    },
}

pub fn save_calibrator(
    calibrator: &Calibrator,
    provenance: &CalibratorProvenance,
    path: &Path,
) -> Result<()> {
    let file = match calibrator {
        Calibrator::Identity => CalibratorFile::Identity {
            provenance: provenance.clone(),
        },
        Calibrator::Temperature(s) => CalibratorFile::Temperature {
            t: s.temperature(),
            provenance: provenance.clone(),
        },
        Calibrator::Dirichlet(map) => {
            let c = map.classes();
            CalibratorFile::Dirichlet {
                weight: (0..c)
                    .map(|r| map.weight()[r * c..(r + 1) * c].to_vec())
                    .collect(),
                bias: map.bias().to_vec(),
                log_floor: map.log_floor(),
                provenance: provenance.clone(),
            }
        }
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn load_calibrator(path: &Path) -> Result<(Calibrator, CalibratorProvenance)> {
    let text = std::fs::read_to_string(path)?;
    let file: CalibratorFile = serde_json::from_str(&text)?;
    Ok(match file {
        CalibratorFile::Identity { provenance } => (Calibrator::Identity, provenance),
        CalibratorFile::Temperature { t, provenance } => {
            (Calibrator::Temperature(TemperatureScaler::new(t)?), provenance)
        }
        CalibratorFile::Dirichlet {
            weight,
            bias,
            log_floor,
            provenance,
        } => {
            let c = bias.len();
            let flat: Vec<f32> = weight.into_iter().flatten().collect();
            (
                Calibrator::Dirichlet(DirichletMap::new(flat, bias, c, log_floor)?),
                provenance,
            )
        }
    })
}
