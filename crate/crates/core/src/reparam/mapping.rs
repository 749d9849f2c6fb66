//! Bilinear teacher→student weight mappings shared by plain and gated
//! Weight Squeezing.

use squeeze_tensor::Tensor;

use crate::config::{ModelConfig, ParamKind, ParamSpec};
use crate::error::{Error, Result};
use crate::init::{xavier_normal_param, xavier_uniform_param, SeededRng};
use crate::model::TransformerModel;
use crate::params::ParamStore;

pub const LEFT_PREFIX: &str = "ws.left.";
pub const RIGHT_PREFIX: &str = "ws.right.";

/// Which sides of `L · Θ · R` a student parameter is mapped with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sides {
    /// `L·Θ·R` (encoder linear weights).
    Both,
    /// `L·Θ` (classifier weight: the class axis does not shrink).
    Left,
    /// `Θ·R` (biases, embedding tables).
    Right,
    /// Not mapped; trained as a free student parameter.
    Free,
}

pub fn sides(kind: ParamKind) -> Sides {
    match kind {
        ParamKind::LinearWeight => Sides::Both,
        ParamKind::ClassifierWeight => Sides::Left,
        ParamKind::LinearBias
        | ParamKind::ClassifierBias
        | ParamKind::TokenEmbedding
        | ParamKind::PositionEmbedding => Sides::Right,
        ParamKind::NormGain | ParamKind::NormBias => Sides::Free,
    }
}

/// Teacher weight with the orientation `Θ` takes in the mapping: biases as
/// `[1, m]` rows and the position table cut to the student's length.
pub fn teacher_operand(teacher: &TransformerModel, spec: &ParamSpec) -> Result<Tensor> {
    let t = teacher.params.get(&spec.name)?;
    Ok(match spec.kind {
        ParamKind::LinearBias | ParamKind::ClassifierBias => t.reshape(&[1, t.numel()])?,
        ParamKind::PositionEmbedding => t.slice(0, 0, spec.shape[0])?,
        _ => t.clone(),
    })
}

/// Checks that `student` can be mapped from `teacher` layer by layer.
pub fn check_compatible(teacher: &ModelConfig, student: &ModelConfig) -> Result<()> {
    if teacher.num_layers != student.num_layers {
        return Err(Error::Contract(format!(
            "teacher has {} layers, student {}; mapping is layer to layer",
            teacher.num_layers, student.num_layers
        )));
    }
    if teacher.vocab_size != student.vocab_size || teacher.num_classes != student.num_classes {
        return Err(Error::Contract(
            "teacher and student must share vocabulary and class count".into(),
        ));
    }
    if student.max_seq_len > teacher.max_seq_len {
        return Err(Error::Contract(format!(
            "student max_seq_len {} exceeds teacher's {}",
            student.max_seq_len, teacher.max_seq_len
        )));
    }
    Ok(())
}

/// One mapping matrix a student parameter needs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MapShape {
    pub name: String,
    pub shape: [usize; 2],
    /// Xavier-uniform (embedding tables) rather than Xavier-normal.
    pub uniform: bool,
}

/// Every mapping matrix between two configs, in parameter order.
pub fn mapping_shapes(teacher: &ModelConfig, student: &ModelConfig) -> Vec<MapShape> {
    let mut out = Vec::new();
    for (s, t) in student.param_specs().iter().zip(teacher.param_specs()) {
        debug_assert_eq!(s.name, t.name);
        let uniform = matches!(s.kind, ParamKind::TokenEmbedding | ParamKind::PositionEmbedding);
        let out_t = *t.shape.last().unwrap();
        let out_s = *s.shape.last().unwrap();
        let left = MapShape {
            name: format!("{LEFT_PREFIX}{}", s.name),
            shape: [s.shape[0], t.shape[0]],
            uniform,
        };
        let right = MapShape { name: format!("{RIGHT_PREFIX}{}", s.name), shape: [out_t, out_s], uniform };
        match sides(s.kind) {
            Sides::Both => out.extend([left, right]),
            Sides::Left => out.push(left),
            Sides::Right => out.push(right),
            Sides::Free => {}
        }
    }
    out
}

/// Fresh mapping matrices for every mapped student parameter: Xavier-normal
/// for linear layers and biases, Xavier-uniform for the embedding tables.
pub fn init_mappings(teacher: &ModelConfig, student: &ModelConfig, rng: &mut SeededRng) -> ParamStore {
    let mut store = ParamStore::new();
    for m in mapping_shapes(teacher, student) {
        let [r, c] = m.shape;
        let t = if m.uniform { xavier_uniform_param(rng, r, c) } else { xavier_normal_param(rng, r, c) };
        store.insert(m.name, t);
    }
    store
}

/// Graph-connected `L·Θ·R` (or its one-sided form) for one student parameter,
/// reshaped to the student's shape.
pub fn mapped(spec: &ParamSpec, theta: &Tensor, maps: &ParamStore) -> Result<Tensor> {
    let left = || maps.get(&format!("{LEFT_PREFIX}{}", spec.name));
    let right = || maps.get(&format!("{RIGHT_PREFIX}{}", spec.name));
    let out = match sides(spec.kind) {
        Sides::Both => left()?.matmul(theta)?.matmul(right()?)?,
        Sides::Left => left()?.matmul(theta)?,
        Sides::Right => theta.matmul(right()?)?,
        Sides::Free => {
            return Err(Error::Contract(format!("`{}` is not a mapped parameter", spec.name)))
        }
    };
    Ok(out.reshape(&spec.shape)?)
}

/// Total size of all mapping matrices between two configs.
pub fn mapping_param_count(teacher: &ModelConfig, student: &ModelConfig) -> usize {
    mapping_shapes(teacher, student).iter().map(|m| m.shape[0] * m.shape[1]).sum()
}

/// Sizes of the student parameters that stay free under mapping.
pub fn free_param_count(student: &ModelConfig) -> usize {
    student
        .param_specs()
        .iter()
        .filter(|s| sides(s.kind) == Sides::Free)
        .map(ParamSpec::numel)
        .sum()
}

/// The first `layers` encoder layers of `model` with its embeddings and head.
pub fn truncate_layers(model: &TransformerModel, layers: usize) -> Result<TransformerModel> {
    if layers > model.config.num_layers || layers == 0 {
        return Err(Error::Contract(format!(
            "cannot keep {layers} of {} layers",
            model.config.num_layers
        )));
    }
    let mut cfg = model.config.clone();
    cfg.num_layers = layers;
    let mut params = ParamStore::new();
    for s in cfg.param_specs() {
        params.insert(s.name.clone(), model.params.get(&s.name)?.clone());
    }
    Ok(TransformerModel { config: cfg, params })
}
