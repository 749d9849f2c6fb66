//! Training losses: plain likelihood, distillation from teacher
//! predictions, and distillation with aligned hidden states.

use serde::{Deserialize, Serialize};
use squeeze_tensor::Tensor;

use crate::error::{Error, Result};
use crate::init::{rng_for, xavier_normal_param};
use crate::model::{first_position_state, ForwardOutput};
use crate::params::ParamStore;

fn default_temperature() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ObjectiveSpec {
    Mle,
    Kd {
        alpha: f64,
        #[serde(default = "default_temperature")]
        temperature: f64,
    },
    KdEo {
        alpha: f64,
        beta: f64,
        gamma: f64,
        #[serde(default = "default_temperature")]
        temperature: f64,
        /// Learning rate of the hidden-state maps; the main rate if unset.
        #[serde(default)]
        map_learning_rate: Option<f64>,
    },
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        ObjectiveSpec::Mle
    }
}

impl ObjectiveSpec {
    /// KD-EO with coefficients given as unconstrained logits.
    pub fn kd_eo_from_logits(logits: [f64; 3], temperature: f64, map_learning_rate: Option<f64>) -> Self {
        let (alpha, beta, gamma) = simplex_weights(logits[0], logits[1], logits[2]);
        ObjectiveSpec::KdEo { alpha, beta, gamma, temperature, map_learning_rate }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ObjectiveSpec::Mle => "mle",
            ObjectiveSpec::Kd { .. } => "kd",
            ObjectiveSpec::KdEo { .. } => "kd-eo",
        }
    }

    pub fn needs_teacher(&self) -> bool {
        !matches!(self, ObjectiveSpec::Mle)
    }

    pub fn uses_hidden_states(&self) -> bool {
        matches!(self, ObjectiveSpec::KdEo { gamma, .. } if *gamma > 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let check_t = |t: f64| {
            if t.is_finite() && t >= 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("temperature {t} must be ≥ 1")))
            }
        };
        match *self {
            ObjectiveSpec::Mle => Ok(()),
            ObjectiveSpec::Kd { alpha, temperature } => {
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(Error::Config(format!("KD α = {alpha} is outside [0, 1]")));
                }
                check_t(temperature)
            }
            ObjectiveSpec::KdEo { alpha, beta, gamma, temperature, map_learning_rate } => {
                if [alpha, beta, gamma].iter().any(|c| !(*c >= 0.0)) || ((alpha + beta + gamma) - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!(
                        "KD-EO weights ({alpha}, {beta}, {gamma}) must be non-negative and sum to 1"
                    )));
                }
                if map_learning_rate.is_some_and(|lr| !(lr > 0.0)) {
                    return Err(Error::Config("map_learning_rate must be positive".into()));
                }
                check_t(temperature)
            }
        }
    }
}

/// Softmax of three logits.
pub fn simplex_weights(a: f64, b: f64, c: f64) -> (f64, f64, f64) {
    let m = a.max(b).max(c);
    let (ea, eb, ec) = ((a - m).exp(), (b - m).exp(), (c - m).exp());
    let z = ea + eb + ec;
    (ea / z, eb / z, ec / z)
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<()> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::Contract(format!(
            "logits {:?} do not match {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let classes = logits.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn mle_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    check_labels(logits, labels)?;
    Ok(logits.cross_entropy(labels)?)
}

/// Mean cross-entropy of `softmax(student/T)` against the detached
/// `softmax(teacher/T)`.
pub fn soft_term(student_logits: &Tensor, teacher_logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if student_logits.shape() != teacher_logits.shape() {
        return Err(Error::Contract(format!(
            "student logits {:?} and teacher logits {:?} differ in shape",
            student_logits.shape(),
            teacher_logits.shape()
        )));
    }
    let inv_t = 1.0 / temperature;
    let target = teacher_logits.detach().scale(inv_t).softmax(1)?;
    Ok(student_logits.scale(inv_t).soft_cross_entropy(&target)?)
}

/// `α·MLE + (1 − α)·soft term`.
pub fn kd_loss(student_logits: &Tensor, teacher_logits: &Tensor, labels: &[usize], alpha: f64, temperature: f64) -> Result<Tensor> {
    let mle = mle_loss(student_logits, labels)?;
    let soft = soft_term(student_logits, teacher_logits, temperature)?;
    Ok(mle.scale(alpha).add(&soft.scale(1.0 - alpha))?)
}

/// Trainable affine maps `f_j` from student to teacher hidden size, one per
/// distilled layer `j = 1..=layers`.
#[derive(Debug, Clone)]
pub struct HiddenMaps {
    pub params: ParamStore,
    layers: usize,
}

impl HiddenMaps {
    pub fn new(layers: usize, student_hidden: usize, teacher_hidden: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "hidden-maps");
        let mut params = ParamStore::new();
        for j in 1..=layers {
            params.insert(format!("hidden_map.{j}.weight"), xavier_normal_param(&mut rng, student_hidden, teacher_hidden));
            params.insert(format!("hidden_map.{j}.bias"), Tensor::zeros(&[teacher_hidden]).to_parameter());
        }
        HiddenMaps { params, layers }
    }

    pub fn from_params(layers: usize, params: ParamStore) -> Result<Self> {
        for j in 1..=layers {
            params.get(&format!("hidden_map.{j}.weight"))?;
            params.get(&format!("hidden_map.{j}.bias"))?;
        }
        Ok(HiddenMaps { params, layers })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    /// `f_j(x) = x·W_j + b_j`.
    pub fn apply(&self, j: usize, x: &Tensor) -> Result<Tensor> {
        let w = self.params.get(&format!("hidden_map.{j}.weight"))?;
        let b = self.params.get(&format!("hidden_map.{j}.bias"))?;
        Ok(x.matmul(w)?.add(b)?)
    }
}

/// `Σ_j mean((h^t_j − f_j(h^s_j))²)` over position-0 states of layers
/// `1..=maps.layers()`. `teacher_states[j-1]` is the teacher's `[batch,
/// hidden]` position-0 state of layer `j`.
pub fn hidden_term(student_out: &ForwardOutput, teacher_states: &[Tensor], maps: &HiddenMaps) -> Result<Tensor> {
    let layers = maps.layers();
    if student_out.hidden_states.len() != layers + 1 {
        return Err(Error::Contract(format!(
            "{} hidden-state maps for a student with {} layers",
            layers,
            student_out.hidden_states.len() - 1
        )));
    }
    if teacher_states.len() < layers {
        return Err(Error::Contract(format!(
            "teacher provides {} layers of hidden states, student needs {layers}",
            teacher_states.len()
        )));
    }
    let mut total = Tensor::scalar(0.0);
    for j in 1..=layers {
        let mapped = maps.apply(j, &first_position_state(student_out, j)?)?;
        let target = teacher_states[j - 1].detach();
        total = total.add(&mapped.sub(&target)?.square().mean())?;
    }
    Ok(total)
}

/// Loss value together with its unweighted parts.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Tensor,
    pub mle: f64,
    pub soft: Option<f64>,
    pub hidden: Option<f64>,
}

/// `α·MLE + β·soft term + γ·hidden term` from already-extracted teacher
/// targets.
#[allow(clippy::too_many_arguments)]
pub fn kdeo_from_targets(
    student_out: &ForwardOutput,
    teacher_logits: &Tensor,
    teacher_states: &[Tensor],
    labels: &[usize],
    maps: &HiddenMaps,
    alpha: f64,
    beta: f64,
    gamma: f64,
    temperature: f64,
) -> Result<LossTerms> {
    let mle = mle_loss(&student_out.logits, labels)?;
    let soft = soft_term(&student_out.logits, teacher_logits, temperature)?;
    let hidden = hidden_term(student_out, teacher_states, maps)?;
    let total = mle.scale(alpha).add(&soft.scale(beta))?.add(&hidden.scale(gamma))?;
    Ok(LossTerms { total, mle: mle.item(), soft: Some(soft.item()), hidden: Some(hidden.item()) })
}

/// KD-EO loss between full student and teacher outputs. A deeper teacher
/// contributes its first `maps.layers()` layers.
#[allow(clippy::too_many_arguments)]
pub fn kdeo_loss(
    student_out: &ForwardOutput,
    teacher_out: &ForwardOutput,
    labels: &[usize],
    maps: &HiddenMaps,
    alpha: f64,
    beta: f64,
    gamma: f64,
    temperature: f64,
) -> Result<Tensor> {
    let layers = maps.layers();
    if teacher_out.hidden_states.len() < layers + 1 {
        return Err(Error::Contract(format!(
            "teacher has {} layers, student distills {layers}",
            teacher_out.hidden_states.len() - 1
        )));
    }
    let states = (1..=layers).map(|j| first_position_state(teacher_out, j)).collect::<Result<Vec<_>>>()?;
    Ok(kdeo_from_targets(student_out, &teacher_out.logits, &states, labels, maps, alpha, beta, gamma, temperature)?.total)
}

/// Evaluates `spec` on one batch given cached teacher targets.
pub fn objective_loss(
    spec: &ObjectiveSpec,
    student_out: &ForwardOutput,
    labels: &[usize],
    teacher_logits: Option<&Tensor>,
    teacher_states: &[Tensor],
    maps: Option<&HiddenMaps>,
) -> Result<LossTerms> {
    let need = || Error::Config(format!("objective `{}` needs a teacher", spec.label()));
    match *spec {
        ObjectiveSpec::Mle => {
            let total = mle_loss(&student_out.logits, labels)?;
            let mle = total.item();
            Ok(LossTerms { total, mle, soft: None, hidden: None })
        }
        ObjectiveSpec::Kd { alpha, temperature } => {
            let t = teacher_logits.ok_or_else(need)?;
            let mle = mle_loss(&student_out.logits, labels)?;
            let soft = soft_term(&student_out.logits, t, temperature)?;
            let (m, s) = (mle.item(), soft.item());
            let total = mle.scale(alpha).add(&soft.scale(1.0 - alpha))?;
            Ok(LossTerms { total, mle: m, soft: Some(s), hidden: None })
        }
        ObjectiveSpec::KdEo { alpha, beta, gamma, temperature, .. } => {
            let t = teacher_logits.ok_or_else(need)?;
            let maps = maps.ok_or_else(|| Error::Contract("KD-EO needs hidden-state maps".into()))?;
            kdeo_from_targets(student_out, t, teacher_states, labels, maps, alpha, beta, gamma, temperature)
        }
    }
}
