//! Weight Squeezing: student weights are live products `L·Θᵗ·R` of a frozen
//! teacher's weights.

use squeeze_tensor::{no_grad, Tensor};

use super::mapping::{self, Sides};
use super::Student;
use crate::config::{ModelConfig, ParamKind};
use crate::error::{Error, Result};
use crate::factored::{ResolvedWeights, Weight};
use crate::init::rng_for;
use crate::model::TransformerModel;
use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct WsStudent {
    config: ModelConfig,
    teacher: TransformerModel,
    /// Mapping matrices followed by the free layer-norm parameters.
    params: ParamStore,
}

/// Random mappings from `teacher` to a student shaped by `student_cfg`.
pub fn ws_init(teacher: &TransformerModel, student_cfg: &ModelConfig, seed: u64) -> Result<WsStudent> {
    student_cfg.validate()?;
    mapping::check_compatible(&teacher.config, student_cfg)?;
    if student_cfg.hidden_size >= teacher.config.hidden_size {
        return Err(Error::Contract(format!(
            "student hidden size {} must be below the teacher's {}",
            student_cfg.hidden_size, teacher.config.hidden_size
        )));
    }
    let mut rng = rng_for(seed, "ws-mapping");
    let mut params = mapping::init_mappings(&teacher.config, student_cfg, &mut rng);
    insert_free_params(student_cfg, &mut params);
    Ok(WsStudent { config: student_cfg.clone(), teacher: teacher.frozen(), params })
}

pub(crate) fn insert_free_params(cfg: &ModelConfig, params: &mut ParamStore) {
    for spec in cfg.param_specs() {
        match spec.kind {
            ParamKind::NormGain => params.insert(spec.name, Tensor::ones(&spec.shape).to_parameter()),
            ParamKind::NormBias => params.insert(spec.name, Tensor::zeros(&spec.shape).to_parameter()),
            _ => {}
        }
    }
}

/// Checks a parameter set against the names and shapes a scheme expects.
pub(crate) fn check_params(expected: &[(String, Vec<usize>)], params: &ParamStore) -> Result<()> {
    if expected.len() != params.len() {
        return Err(Error::Contract(format!(
            "expected {} tensors, got {}",
            expected.len(),
            params.len()
        )));
    }
    for (name, shape) in expected {
        let t = params.get(name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Contract(format!(
                "`{name}` has shape {:?}, expected {:?}",
                t.shape(),
                shape
            )));
        }
    }
    Ok(())
}

impl WsStudent {
    /// Assembles a student from given mappings and free parameters. The
    /// student may be as wide as the teacher here.
    pub fn with_params(teacher: &TransformerModel, student_cfg: &ModelConfig, params: ParamStore) -> Result<Self> {
        student_cfg.validate()?;
        mapping::check_compatible(&teacher.config, student_cfg)?;
        let mut expected: Vec<(String, Vec<usize>)> = mapping::mapping_shapes(&teacher.config, student_cfg)
            .into_iter()
            .map(|m| (m.name, m.shape.to_vec()))
            .collect();
        expected.extend(
            student_cfg
                .param_specs()
                .into_iter()
                .filter(|s| mapping::sides(s.kind) == Sides::Free)
                .map(|s| (s.name, s.shape)),
        );
        check_params(&expected, &params)?;
        let params = params.iter().map(|(n, t)| (n.to_string(), t.to_parameter())).collect();
        Ok(WsStudent { config: student_cfg.clone(), teacher: teacher.frozen(), params })
    }

    pub fn teacher(&self) -> &TransformerModel {
        &self.teacher
    }

    /// Student weights by name, graph-connected to the mappings.
    pub fn materialize(&self) -> Result<ParamStore> {
        ws_materialize(self)
    }

    pub fn bake(&self) -> Result<TransformerModel> {
        bake(self)
    }
}

/// Every student weight as `L·Θᵗ·R` (or its one-sided form); gradients reach
/// the mappings and never the teacher.
pub fn ws_materialize(student: &WsStudent) -> Result<ParamStore> {
    let mut out = ParamStore::new();
    for spec in student.config.param_specs() {
        let w = match mapping::sides(spec.kind) {
            Sides::Free => student.params.get(&spec.name)?.clone(),
            _ => {
                let theta = mapping::teacher_operand(&student.teacher, &spec)?;
                mapping::mapped(&spec, &theta, &student.params)?
            }
        };
        out.insert(spec.name, w);
    }
    Ok(out)
}

/// Numeric student weights as a standalone plain model; the mappings and
/// the teacher are dropped.
pub fn bake(student: &WsStudent) -> Result<TransformerModel> {
    let weights = no_grad(|| ws_materialize(student))?;
    TransformerModel::from_params(student.config.clone(), weights)
}

impl Student for WsStudent {
    fn label(&self) -> &'static str {
        "ws"
    }

    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn resolve(&self) -> Result<ResolvedWeights> {
        let mut w = ResolvedWeights::new();
        for (name, t) in ws_materialize(self)?.iter() {
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
}
