//! Closed-form parameter counts and rank selection under a size budget.

use serde::{Deserialize, Serialize};

use super::mapping;
use super::svd::{factorized_weights, max_svd_rank};
use super::tt::tt_layout;
use crate::config::ModelConfig;
use crate::error::Result;

/// Factorized models may exceed the plain student by this fraction.
pub const BUDGET_SLACK: f64 = 1.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LowRankMethod {
    Svd,
    Tt { cores: usize },
}

fn dense_factorized(cfg: &ModelConfig) -> usize {
    factorized_weights(cfg).iter().map(|(_, r, c)| r * c).sum()
}

/// Parameters of the teacher-width model with rank-`r` SVD factors.
pub fn svd_param_count(teacher: &ModelConfig, r: usize) -> usize {
    let factors: usize = factorized_weights(teacher).iter().map(|(_, rows, cols)| r * (rows + cols)).sum();
    teacher.num_parameters() - dense_factorized(teacher) + factors
}

/// Parameters of the teacher-width model with tensor-train factors.
pub fn tt_param_count(teacher: &ModelConfig, rank: usize, cores: usize) -> Result<usize> {
    let mut factors = 0;
    for (_, rows, cols) in factorized_weights(teacher) {
        factors += tt_layout(rows, cols, rank, cores)?.num_params();
    }
    Ok(teacher.num_parameters() - dense_factorized(teacher) + factors)
}

/// Trainable parameters while training with Weight Squeezing: the mapping
/// matrices and the free layer-norm parameters.
pub fn ws_train_count(teacher: &ModelConfig, student: &ModelConfig) -> usize {
    mapping::mapping_param_count(teacher, student) + mapping::free_param_count(student)
}

/// Trainables under gated Weight Squeezing: mappings, the full base model
/// and, when learned, the gate.
pub fn gated_train_count(teacher: &ModelConfig, student: &ModelConfig, learned_gate: bool) -> usize {
    mapping::mapping_param_count(teacher, student) + student.num_parameters() + usize::from(learned_gate)
}

/// Largest rank whose factorized teacher fits in `BUDGET_SLACK` times the
/// plain student's parameter count. Never below 1.
pub fn match_rank_to_budget(teacher: &ModelConfig, student: &ModelConfig, method: LowRankMethod) -> Result<usize> {
    let budget = (BUDGET_SLACK * student.num_parameters() as f64).floor() as usize;
    let mut best = 1;
    match method {
        LowRankMethod::Svd => {
            for r in 1..=max_svd_rank(teacher) {
                if svd_param_count(teacher, r) > budget {
                    break;
                }
                best = r;
            }
        }
        LowRankMethod::Tt { cores } => {
            let mut prev = None;
            for r in 1.. {
                let count = tt_param_count(teacher, r, cores)?;
                if count > budget || prev == Some(count) {
                    break;
                }
                best = r;
                prev = Some(count);
            }
        }
    }
    Ok(best)
}
