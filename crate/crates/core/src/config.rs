//! Encoder architecture hyperparameters and the named parameter layout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of a BERT-style encoder classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawModelConfig")]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
    pub attn_dropout: f64,
    pub hidden_dropout: f64,
}

/// On-disk form; `ffn_size` defaults to four times the hidden size.
#[derive(Deserialize)]
struct RawModelConfig {
    num_layers: usize,
    hidden_size: usize,
    num_heads: usize,
    ffn_size: Option<usize>,
    vocab_size: usize,
    max_seq_len: usize,
    num_classes: usize,
    #[serde(default)]
    attn_dropout: f64,
    #[serde(default)]
    hidden_dropout: f64,
}

impl From<RawModelConfig> for ModelConfig {
    fn from(r: RawModelConfig) -> Self {
        ModelConfig {
            num_layers: r.num_layers,
            hidden_size: r.hidden_size,
            num_heads: r.num_heads,
            ffn_size: r.ffn_size.unwrap_or(4 * r.hidden_size),
            vocab_size: r.vocab_size,
            max_seq_len: r.max_seq_len,
            num_classes: r.num_classes,
            attn_dropout: r.attn_dropout,
            hidden_dropout: r.hidden_dropout,
        }
    }
}

/// What a named parameter is, which decides how each scheme treats it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    TokenEmbedding,
    PositionEmbedding,
    /// `[in, out]` weight of a linear layer inside the encoder.
    LinearWeight,
    LinearBias,
    ClassifierWeight,
    ClassifierBias,
    NormGain,
    NormBias,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Embeddings,
    Attention,
    Ffn,
    Norms,
    Classifier,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Embeddings => "embeddings",
            ParamGroup::Attention => "attention",
            ParamGroup::Ffn => "ffn",
            ParamGroup::Norms => "norms",
            ParamGroup::Classifier => "classifier",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub group: ParamGroup,
    /// Encoder layer index, if the parameter belongs to one.
    pub layer: Option<usize>,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub const ATTN_PROJECTIONS: [&str; 4] = ["query", "key", "value", "output"];

pub fn linear_weight_name(layer: usize, block: &str, proj: &str) -> String {
    format!("layers.{layer}.{block}.{proj}.weight")
}

impl ModelConfig {
    /// A config with the conventional `ffn = 4·hidden` and dropout 0.1.
    pub fn new(
        num_layers: usize,
        hidden_size: usize,
        num_heads: usize,
        vocab_size: usize,
        max_seq_len: usize,
        num_classes: usize,
    ) -> Self {
        ModelConfig {
            num_layers,
            hidden_size,
            num_heads,
            ffn_size: 4 * hidden_size,
            vocab_size,
            max_seq_len,
            num_classes,
            attn_dropout: 0.1,
            hidden_dropout: 0.1,
        }
    }

    /// 8-layer, 4-head student at the given width over the 30522-token
    /// uncased BERT vocabulary, 512 positions and a binary head.
    pub fn reference_student(hidden_size: usize) -> Self {
        Self::new(8, hidden_size, 4, 30522, 512, 2)
    }

    /// The 8-layer, 512-wide, 8-head teacher with the same vocabulary.
    pub fn reference_teacher() -> Self {
        Self::new(8, 512, 8, 30522, 512, 2)
    }

    pub fn with_dropout(mut self, attn: f64, hidden: f64) -> Self {
        self.attn_dropout = attn;
        self.hidden_dropout = hidden;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("ffn_size", self.ffn_size),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        for (name, p) in [("attn_dropout", self.attn_dropout), ("hidden_dropout", self.hidden_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Every parameter in a stable order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (h, f) = (self.hidden_size, self.ffn_size);
        let mut specs = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, kind, group, layer| {
            specs.push(ParamSpec { name, shape, kind, group, layer });
        };
        push("embeddings.token".into(), vec![self.vocab_size, h], ParamKind::TokenEmbedding, ParamGroup::Embeddings, None);
        push("embeddings.position".into(), vec![self.max_seq_len, h], ParamKind::PositionEmbedding, ParamGroup::Embeddings, None);
        for l in 0..self.num_layers {
            for proj in ATTN_PROJECTIONS {
                push(linear_weight_name(l, "attn", proj), vec![h, h], ParamKind::LinearWeight, ParamGroup::Attention, Some(l));
                push(format!("layers.{l}.attn.{proj}.bias"), vec![h], ParamKind::LinearBias, ParamGroup::Attention, Some(l));
            }
            push(format!("layers.{l}.attn_norm.gain"), vec![h], ParamKind::NormGain, ParamGroup::Norms, Some(l));
            push(format!("layers.{l}.attn_norm.bias"), vec![h], ParamKind::NormBias, ParamGroup::Norms, Some(l));
            push(linear_weight_name(l, "ffn", "up"), vec![h, f], ParamKind::LinearWeight, ParamGroup::Ffn, Some(l));
            push(format!("layers.{l}.ffn.up.bias"), vec![f], ParamKind::LinearBias, ParamGroup::Ffn, Some(l));
            push(linear_weight_name(l, "ffn", "down"), vec![f, h], ParamKind::LinearWeight, ParamGroup::Ffn, Some(l));
            push(format!("layers.{l}.ffn.down.bias"), vec![h], ParamKind::LinearBias, ParamGroup::Ffn, Some(l));
            push(format!("layers.{l}.ffn_norm.gain"), vec![h], ParamKind::NormGain, ParamGroup::Norms, Some(l));
            push(format!("layers.{l}.ffn_norm.bias"), vec![h], ParamKind::NormBias, ParamGroup::Norms, Some(l));
        }
        push("classifier.weight".into(), vec![h, self.num_classes], ParamKind::ClassifierWeight, ParamGroup::Classifier, None);
        push("classifier.bias".into(), vec![self.num_classes], ParamKind::ClassifierBias, ParamGroup::Classifier, None);
        specs
    }

    /// Parameter count of a plain (unfactorized) model with this config.
    pub fn num_parameters(&self) -> usize {
        self.param_specs().iter().map(ParamSpec::numel).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig::new(2, 18, 4, 50, 16, 2);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_dropout_of_one() {
        let cfg = ModelConfig::new(2, 16, 4, 50, 16, 2).with_dropout(1.0, 0.1);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn ffn_defaults_to_four_times_hidden() {
        let cfg: ModelConfig = toml::from_str(
            "num_layers = 2\nhidden_size = 16\nnum_heads = 4\nvocab_size = 50\nmax_seq_len = 16\nnum_classes = 2",
        )
        .unwrap();
        assert_eq!(cfg.ffn_size, 64);
        assert_eq!(cfg.attn_dropout, 0.0);
    }

    #[test]
    fn layout_is_stable_and_unique() {
        let cfg = ModelConfig::new(2, 8, 2, 20, 6, 3);
        let specs = cfg.param_specs();
        let mut names: Vec<_> = specs.iter().map(|s| s.name.clone()).collect();
        assert_eq!(names.len(), 2 + 2 * 16 + 2);
        names.dedup();
        assert_eq!(names.len(), specs.len());
        assert_eq!(specs, cfg.param_specs());
    }
}
