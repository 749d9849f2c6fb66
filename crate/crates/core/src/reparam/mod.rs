//! Student weight construction schemes. Each scheme owns its trainable
//! tensors and resolves them into the weights a forward pass consumes.

pub mod budget;
pub mod gated;
pub mod mapping;
pub mod svd;
pub mod tt;
pub mod ws;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::Result;
use crate::factored::ResolvedWeights;
use crate::model::{forward, ForwardOutput, Input, Mode, TransformerModel};
use crate::params::ParamStore;

pub use budget::{match_rank_to_budget, LowRankMethod};
pub use gated::{gated_ws_init, Gate, GatedWsStudent};
pub use svd::{svd_factorize, SvdStudent};
pub use tt::{factor_dim, tt_factorize, tt_layout, TtStudent};
pub use ws::{ws_init, WsStudent};

fn default_s0() -> f64 {
    2.0
}

fn default_cores() -> usize {
    4
}

/// Which scheme builds the student's weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ReparamSpec {
    Plain,
    Ws,
    GatedWs {
        #[serde(default = "default_s0")]
        s0: f64,
        /// Holds `σ(s)` at this value instead of learning `s`.
        #[serde(default)]
        fixed_sigma: Option<f64>,
    },
    /// `rank = None` picks the largest rank within the plain student's budget.
    Svd {
        #[serde(default)]
        rank: Option<usize>,
    },
    Tt {
        #[serde(default)]
        rank: Option<usize>,
        #[serde(default = "default_cores")]
        cores: usize,
    },
}

impl Default for ReparamSpec {
    fn default() -> Self {
        ReparamSpec::Plain
    }
}

impl ReparamSpec {
    pub fn label(&self) -> &'static str {
        match self {
            ReparamSpec::Plain => "plain",
            ReparamSpec::Ws => "ws",
            ReparamSpec::GatedWs { .. } => "gated-ws",
            ReparamSpec::Svd { .. } => "svd",
            ReparamSpec::Tt { .. } => "tt",
        }
    }

    pub fn needs_teacher(&self) -> bool {
        !matches!(self, ReparamSpec::Plain)
    }
}

/// A trainable model under some weight scheme.
pub trait Student {
    fn label(&self) -> &'static str;

    /// Architecture the forward pass runs at (the teacher's for SVD/TT).
    fn config(&self) -> &ModelConfig;

    fn resolve(&self) -> Result<ResolvedWeights>;

    /// Exactly the tensors an optimizer updates.
    fn trainables(&self) -> &ParamStore;

    fn trainables_mut(&mut self) -> &mut ParamStore;

    /// Parameters needed for inference once training is over.
    fn inference_param_count(&self) -> usize;

    /// Current gate value `σ(s)` for gated schemes.
    fn gate(&self) -> Option<f64> {
        None
    }

    fn forward(&self, input: &Input, mode: Mode<'_>) -> Result<ForwardOutput> {
        forward(self.config(), &self.resolve()?, input, mode)
    }
}

impl Student for TransformerModel {
    fn label(&self) -> &'static str {
        "plain"
    }

    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn resolve(&self) -> Result<ResolvedWeights> {
        Ok(TransformerModel::resolve(self))
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
