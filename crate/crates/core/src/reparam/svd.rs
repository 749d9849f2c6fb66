//! Truncated-SVD baseline: teacher-width model whose linear weights and
//! token embedding are two thin trainable factors.

use squeeze_tensor::Tensor;

use super::Student;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::factored::{ResolvedWeights, Weight};
use crate::linalg;
use crate::model::{encoder_linear_weights, TransformerModel};
use crate::params::ParamStore;

pub const U_PREFIX: &str = "svd.u.";
pub const V_PREFIX: &str = "svd.v.";

/// Names and `[rows, cols]` of the weights low-rank schemes factorize: every
/// encoder linear weight and the token embedding.
pub fn factorized_weights(cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
    let specs = cfg.param_specs();
    let mut names = vec!["embeddings.token".to_string()];
    names.extend(encoder_linear_weights(cfg));
    names
        .into_iter()
        .map(|n| {
            let spec = specs.iter().find(|s| s.name == n).expect("name from the same config");
            (n, spec.shape[0], spec.shape[1])
        })
        .collect()
}

pub fn max_svd_rank(cfg: &ModelConfig) -> usize {
    factorized_weights(cfg).iter().map(|(_, r, c)| (*r).min(*c)).min().unwrap_or(0)
}

#[derive(Debug, Clone)]
pub struct SvdStudent {
    config: ModelConfig,
    rank: usize,
    /// `svd.u.*` `[in, r]` and `svd.v.*` `[r, out]` factors, plus the dense
    /// parameters that stay unfactorized under their plain names.
    params: ParamStore,
}

/// Rank-`r` truncated SVD of every factorized teacher weight, with the
/// singular values folded into the left factor.
pub fn svd_factorize(teacher: &TransformerModel, r: usize) -> Result<SvdStudent> {
    let cfg = &teacher.config;
    let limit = max_svd_rank(cfg);
    if r == 0 || r > limit {
        return Err(Error::Contract(format!("SVD rank {r} outside 1..={limit}")));
    }
    let factorized = factorized_weights(cfg);
    let mut params = ParamStore::new();
    for spec in cfg.param_specs() {
        let src = teacher.params.get(&spec.name)?;
        if let Some((_, rows, cols)) = factorized.iter().find(|(n, _, _)| *n == spec.name) {
            let dec = linalg::svd(src.data(), *rows, *cols);
            let (u, v) = dec.truncate(r);
            params.insert(format!("{U_PREFIX}{}", spec.name), Tensor::parameter(u, &[*rows, r])?);
            params.insert(format!("{V_PREFIX}{}", spec.name), Tensor::parameter(v, &[r, *cols])?);
        } else {
            params.insert(spec.name.clone(), src.to_parameter());
        }
    }
    Ok(SvdStudent { config: cfg.clone(), rank: r, params })
}

impl SvdStudent {
    pub fn rank(&self) -> usize {
        self.rank
    }
}

impl Student for SvdStudent {
    fn label(&self) -> &'static str {
        "svd"
    }

    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn resolve(&self) -> Result<ResolvedWeights> {
        let mut w = ResolvedWeights::new();
        for spec in self.config.param_specs() {
            let weight = match self.params.get(&format!("{U_PREFIX}{}", spec.name)) {
                Ok(left) => Weight::LowRank {
                    left: left.clone(),
                    right: self.params.get(&format!("{V_PREFIX}{}", spec.name))?.clone(),
                },
                Err(_) => Weight::Dense(self.params.get(&spec.name)?.clone()),
            };
            w.insert(spec.name, weight);
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
        self.params.num_elements()
    }
}
