//! Gated Weight Squeezing: each student weight blends the mapped teacher
//! weight with a pre-trained base weight, `(1 − σ(s))·L·Θᵗ·R + σ(s)·Θᵇ`.

use serde::{Deserialize, Serialize};
use squeeze_tensor::{no_grad, sigmoid_value, Tensor};

use super::mapping::{self, Sides};
use super::Student;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::factored::{ResolvedWeights, Weight};
use crate::init::rng_for;
use crate::model::TransformerModel;
use crate::params::ParamStore;

pub const GATE_NAME: &str = "gate.s";
pub const BASE_PREFIX: &str = "base.";

/// How the model-wide gate `s` behaves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Gate {
    /// `s` is trained, starting at `s0`.
    Learned { s0: f64 },
    /// `σ(s)` is held at `sigma`; `s` is not a trainable.
    Fixed { sigma: f64 },
}

#[derive(Debug, Clone)]
pub struct GatedWsStudent {
    config: ModelConfig,
    teacher: TransformerModel,
    gate: Gate,
    params: ParamStore,
}

/// Gated mapping from `teacher` onto the pre-trained `base`. A deeper
/// teacher contributes its first `base` layers.
pub fn gated_ws_init(teacher: &TransformerModel, base: &TransformerModel, gate: Gate, seed: u64) -> Result<GatedWsStudent> {
    let cfg = base.config.clone();
    cfg.validate()?;
    if let Gate::Fixed { sigma } = gate {
        if !(0.0..=1.0).contains(&sigma) {
            return Err(Error::Config(format!("fixed gate σ = {sigma} is outside [0, 1]")));
        }
    }
    if teacher.config.num_layers < cfg.num_layers {
        return Err(Error::Contract(format!(
            "teacher has {} layers, fewer than the base model's {}",
            teacher.config.num_layers, cfg.num_layers
        )));
    }
    let teacher = mapping::truncate_layers(teacher, cfg.num_layers)?.frozen();
    mapping::check_compatible(&teacher.config, &cfg)?;

    let mut rng = rng_for(seed, "gated-mapping");
    let mut params = mapping::init_mappings(&teacher.config, &cfg, &mut rng);
    for spec in cfg.param_specs() {
        params.insert(format!("{BASE_PREFIX}{}", spec.name), base.params.get(&spec.name)?.to_parameter());
    }
    if let Gate::Learned { s0 } = gate {
        params.insert(GATE_NAME, Tensor::parameter(vec![s0], &[1])?);
    }
    Ok(GatedWsStudent { config: cfg, teacher, gate, params })
}

impl GatedWsStudent {
    pub fn teacher(&self) -> &TransformerModel {
        &self.teacher
    }

    pub fn gate_mode(&self) -> Gate {
        self.gate
    }

    pub fn sigma(&self) -> f64 {
        match self.gate {
            Gate::Fixed { sigma } => sigma,
            Gate::Learned { .. } => sigmoid_value(self.params.get(GATE_NAME).map(Tensor::item).unwrap_or(0.0)),
        }
    }

    /// Blended student weights by name, graph-connected to `L`, `R`, `Θᵇ`
    /// and `s`.
    pub fn materialize(&self) -> Result<ParamStore> {
        let (keep, mix) = match self.gate {
            Gate::Fixed { sigma } => (None, Some(sigma)),
            Gate::Learned { .. } => {
                let sig = self.params.get(GATE_NAME)?.sigmoid();
                (Some((sig.neg().add_scalar(1.0), sig)), None)
            }
        };
        let mut out = ParamStore::new();
        for spec in self.config.param_specs() {
            let base = self.params.get(&format!("{BASE_PREFIX}{}", spec.name))?;
            let w = match mapping::sides(spec.kind) {
                Sides::Free => base.clone(),
                _ => {
                    let theta = mapping::teacher_operand(&self.teacher, &spec)?;
                    let mapped = mapping::mapped(&spec, &theta, &self.params)?;
                    match (&keep, mix) {
                        (Some((one_minus, sig)), _) => mapped.mul(one_minus)?.add(&base.mul(sig)?)?,
                        (None, Some(sigma)) => mapped.scale(1.0 - sigma).add(&base.scale(sigma))?,
                        (None, None) => unreachable!("gate is either learned or fixed"),
                    }
                }
            };
            out.insert(spec.name, w);
        }
        Ok(out)
    }

    pub fn bake(&self) -> Result<TransformerModel> {
        let weights = no_grad(|| self.materialize())?;
        TransformerModel::from_params(self.config.clone(), weights)
    }
}

impl Student for GatedWsStudent {
    fn label(&self) -> &'static str {
        "gated-ws"
    }

    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn resolve(&self) -> Result<ResolvedWeights> {
        let mut w = ResolvedWeights::new();
        for (name, t) in self.materialize()?.iter() {
            w.insert(name, Weight::Dense(t.clone()));
        }
        Ok(w)
    }

    fn trainables(&self) -> &ParamStore {
        &self.params
    }

    fn trainables_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn inference_param_count(&self) -> usize {
        self.config.num_parameters()
    }

    fn gate(&self) -> Option<f64> {
        Some(self.sigma())
    }
}
