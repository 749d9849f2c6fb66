//! Post-norm BERT-style encoder with mean pooling and a linear classifier.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use squeeze_tensor::Tensor;

use crate::config::{ModelConfig, ParamKind, ATTN_PROJECTIONS};
use crate::error::{Error, Result};
use crate::factored::{ResolvedWeights, Weight};
use crate::init::{rng_for, xavier_normal_param, SeededRng};
use crate::params::ParamStore;

pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Token ids of a padded batch, row-major `[batch, seq]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Input {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
    /// `false` marks padding.
    pub mask: Vec<bool>,
}

impl Input {
    /// Unpadded batch of equal-length sequences.
    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let seq = rows.first().map(Vec::len).unwrap_or(0);
        if seq == 0 || rows.iter().any(|r| r.len() != seq) {
            return Err(Error::Input("rows must be nonempty and of equal length".into()));
        }
        Ok(Input {
            ids: rows.concat(),
            batch: rows.len(),
            seq,
            mask: vec![true; rows.len() * seq],
        })
    }

    fn has_padding(&self) -> bool {
        self.mask.iter().any(|m| !m)
    }
}

pub enum Mode<'a> {
    /// Dropout active, masks drawn from the given stream.
    Train(&'a mut SeededRng),
    Eval,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[batch, classes]`.
    pub logits: Tensor,
    /// Embedding output followed by each layer's output, all `[batch, seq, hidden]`.
    pub hidden_states: Vec<Tensor>,
    /// Per-layer attention probabilities `[batch, heads, seq, seq]`.
    pub attentions: Vec<Tensor>,
    /// Masked mean of the final hidden state, before dropout.
    pub pooled: Tensor,
}

/// Masked mean over sequence positions of the final hidden state.
pub fn pooled_state(output: &ForwardOutput) -> &Tensor {
    &output.pooled
}

/// `hidden_states[layer][:, 0, :]` as `[batch, hidden]`.
pub fn first_position_state(output: &ForwardOutput, layer: usize) -> Result<Tensor> {
    let h = output.hidden_states.get(layer).ok_or_else(|| {
        Error::Contract(format!(
            "layer {layer} out of range 0..={}",
            output.hidden_states.len() - 1
        ))
    })?;
    let (b, hid) = (h.shape()[0], h.shape()[2]);
    Ok(h.slice(1, 0, 1)?.reshape(&[b, hid])?)
}

fn linear(x: &Tensor, w: &ResolvedWeights, weight: &str, bias: &str) -> Result<Tensor> {
    Ok(w.get(weight)?.apply(x)?.add(w.dense(bias)?)?)
}

/// Runs the encoder on `input` with weights already resolved by some
/// parameterization scheme.
pub fn forward(
    cfg: &ModelConfig,
    w: &ResolvedWeights,
    input: &Input,
    mut mode: Mode<'_>,
) -> Result<ForwardOutput> {
    let (b, n, h) = (input.batch, input.seq, cfg.hidden_size);
    let heads = cfg.num_heads;
    let dh = cfg.head_dim();
    if input.ids.len() != b * n || input.mask.len() != b * n {
        return Err(Error::Input("ids/mask length does not match batch × seq".into()));
    }
    if n > cfg.max_seq_len {
        return Err(Error::Input(format!(
            "sequence length {n} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    if let Some(&bad) = input.ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} out of range for vocab of {}",
            cfg.vocab_size
        )));
    }

    let tokens = w.get("embeddings.token")?.lookup(&input.ids, &[b, n])?;
    let positions = w.dense("embeddings.position")?.slice(0, 0, n)?;
    let mut x = tokens.add(&positions)?;

    let attn_bias = if input.has_padding() {
        let bias: Vec<f64> = input
            .mask
            .iter()
            .map(|&m| if m { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        Some(Tensor::new(bias, &[b, 1, 1, n])?)
    } else {
        None
    };
    let scale = 1.0 / (dh as f64).sqrt();
    let split = |t: Tensor| -> Result<Tensor> {
        Ok(t.reshape(&[b, n, heads, dh])?.permute(&[0, 2, 1, 3])?)
    };

    let mut hidden_states = vec![x.clone()];
    let mut attentions = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        let q = split(linear(&x, w, &p("attn.query.weight"), &p("attn.query.bias"))?)?;
        let k = split(linear(&x, w, &p("attn.key.weight"), &p("attn.key.bias"))?)?;
        let v = split(linear(&x, w, &p("attn.value.weight"), &p("attn.value.bias"))?)?;
        let mut scores = q.matmul(&k.transpose()?)?.scale(scale);
        if let Some(mask) = &attn_bias {
            scores = scores.add(mask)?;
        }
        let probs = scores.softmax(3)?;
        attentions.push(probs.clone());
        let probs = match &mut mode {
            Mode::Train(rng) => probs.dropout(cfg.attn_dropout, true, *rng)?,
            Mode::Eval => probs,
        };
        let ctx = probs.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, n, h])?;
        let attn_out = linear(&ctx, w, &p("attn.output.weight"), &p("attn.output.bias"))?;
        x = x.add(&attn_out)?.layer_norm(
            w.dense(&p("attn_norm.gain"))?,
            w.dense(&p("attn_norm.bias"))?,
            LAYER_NORM_EPS,
        )?;
        let up = linear(&x, w, &p("ffn.up.weight"), &p("ffn.up.bias"))?.gelu();
        let down = linear(&up, w, &p("ffn.down.weight"), &p("ffn.down.bias"))?;
        x = x.add(&down)?.layer_norm(
            w.dense(&p("ffn_norm.gain"))?,
            w.dense(&p("ffn_norm.bias"))?,
            LAYER_NORM_EPS,
        )?;
        hidden_states.push(x.clone());
    }

    // Masked mean: weights 1/len on real tokens, 0 on padding.
    let mut pool_w = vec![0.0; b * n];
    for r in 0..b {
        let row = &input.mask[r * n..(r + 1) * n];
        let len = row.iter().filter(|m| **m).count().max(1) as f64;
        for (j, &m) in row.iter().enumerate() {
            if m {
                pool_w[r * n + j] = 1.0 / len;
            }
        }
    }
    let pooled = x.mul(&Tensor::new(pool_w, &[b, n, 1])?)?.sum_axis(1, false)?;
    let dropped = match &mut mode {
        Mode::Train(rng) => pooled.dropout(cfg.hidden_dropout, true, *rng)?,
        Mode::Eval => pooled.clone(),
    };
    let logits = linear(&dropped, w, "classifier.weight", "classifier.bias")?;
    Ok(ForwardOutput { logits, hidden_states, attentions, pooled })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub by_group: BTreeMap<String, usize>,
}

/// A plain encoder classifier whose parameters are its weights.
#[derive(Debug, Clone)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl TransformerModel {
    /// Xavier-normal matrices, zero biases, unit norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, "model-init");
        let mut params = ParamStore::new();
        for spec in config.param_specs() {
            let t = match spec.kind {
                ParamKind::NormGain => Tensor::ones(&spec.shape).to_parameter(),
                ParamKind::LinearBias | ParamKind::ClassifierBias | ParamKind::NormBias => {
                    Tensor::zeros(&spec.shape).to_parameter()
                }
                _ => xavier_normal_param(&mut rng, spec.shape[0], spec.shape[1]),
            };
            params.insert(spec.name, t);
        }
        Ok(TransformerModel { config, params })
    }

    /// Builds a model from named tensors, checking names and shapes against
    /// the config. Tensors become trainable leaves.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != params.len() {
            return Err(Error::Contract(format!(
                "expected {} tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        let mut out = ParamStore::new();
        for spec in specs {
            let t = params.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Contract(format!(
                    "`{}` has shape {:?}, config expects {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            out.insert(spec.name, t.to_parameter());
        }
        Ok(TransformerModel { config, params: out })
    }

    pub fn resolve(&self) -> ResolvedWeights {
        let mut w = ResolvedWeights::new();
        for (name, t) in self.params.iter() {
            w.insert(name, Weight::Dense(t.clone()));
        }
        w
    }

    pub fn forward(&self, input: &Input, mode: Mode<'_>) -> Result<ForwardOutput> {
        forward(&self.config, &self.resolve(), input, mode)
    }

    /// A copy whose tensors are constants, cut from any graph.
    pub fn frozen(&self) -> TransformerModel {
        TransformerModel {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(n, t)| (n.to_string(), t.detach()))
                .collect(),
        }
    }

    pub fn count_parameters(&self) -> ParamCount {
        let mut by_group = BTreeMap::new();
        let mut total = 0;
        for spec in self.config.param_specs() {
            let n = self.params.get(&spec.name).map(Tensor::numel).unwrap_or(0);
            *by_group.entry(spec.group.as_str().to_string()).or_insert(0) += n;
            total += n;
        }
        ParamCount { total, by_group }
    }
}

/// Names of the linear weights, in layer order, that a scheme may factorize.
pub fn encoder_linear_weights(cfg: &ModelConfig) -> Vec<String> {
    let mut names = Vec::new();
    for l in 0..cfg.num_layers {
        for proj in ATTN_PROJECTIONS {
            names.push(crate::config::linear_weight_name(l, "attn", proj));
        }
        names.push(crate::config::linear_weight_name(l, "ffn", "up"));
        names.push(crate::config::linear_weight_name(l, "ffn", "down"));
    }
    names
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig::new(2, 8, 2, 12, 6, 3)
    }

    #[test]
    fn hidden_state_count_and_shapes() {
        let m = TransformerModel::init(tiny(), 1).unwrap();
        let input = Input::from_rows(&[vec![2, 5, 6], vec![2, 7, 1]]).unwrap();
        let out = m.forward(&input, Mode::Eval).unwrap();
        assert_eq!(out.hidden_states.len(), 3);
        for h in &out.hidden_states {
            assert_eq!(h.shape(), &[2, 3, 8]);
        }
        assert_eq!(out.logits.shape(), &[2, 3]);
    }

    #[test]
    fn rejects_out_of_range_token() {
        let m = TransformerModel::init(tiny(), 1).unwrap();
        let input = Input::from_rows(&[vec![2, 12]]).unwrap();
        assert!(matches!(m.forward(&input, Mode::Eval), Err(Error::Input(_))));
    }

    #[test]
    fn rejects_overlong_sequence() {
        let m = TransformerModel::init(tiny(), 1).unwrap();
        let input = Input::from_rows(&[vec![2; 7]]).unwrap();
        assert!(m.forward(&input, Mode::Eval).is_err());
    }

    #[test]
    fn first_position_layer_bounds() {
        let m = TransformerModel::init(tiny(), 1).unwrap();
        let input = Input::from_rows(&[vec![2, 4]]).unwrap();
        let out = m.forward(&input, Mode::Eval).unwrap();
        assert!(first_position_state(&out, 2).is_ok());
        assert!(matches!(first_position_state(&out, 3), Err(Error::Contract(_))));
    }

    #[test]
    fn group_counts_sum_to_total() {
        let m = TransformerModel::init(tiny(), 1).unwrap();
        let c = m.count_parameters();
        assert_eq!(c.by_group.values().sum::<usize>(), c.total);
        assert_eq!(c.total, m.config.num_parameters());
    }
}
