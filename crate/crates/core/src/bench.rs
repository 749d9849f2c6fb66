//! Parameter accounting, analytic multiply-accumulate counts and wall-clock
//! inference timing.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use squeeze_tensor::no_grad;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::init::rng_for;
use crate::model::{forward, Input, Mode};
use crate::reparam::tt::tt_layout;
use crate::reparam::Student;

/// How the factorized weights of a model are stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum WeightForm {
    Dense,
    Svd { rank: usize },
    Tt { rank: usize, cores: usize },
}

/// Multiply-accumulates of one forward pass, by component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub batch: usize,
    pub seq: usize,
    pub components: BTreeMap<String, u64>,
    pub total: u64,
}

fn linear_macs(rows: u64, din: usize, dout: usize, form: WeightForm) -> Result<u64> {
    let (i, o) = (din as u64, dout as u64);
    let product = match form {
        WeightForm::Dense => rows * i * o,
        WeightForm::Svd { rank } => rows * rank as u64 * (i + o),
        WeightForm::Tt { rank, cores } => rows * tt_layout(din, dout, rank, cores)?.apply_macs_per_row(),
    };
    Ok(product + rows * o)
}

/// Closed-form MAC counts. Matmuls count one MAC per multiply-add; bias
/// adds, residual adds, softmax, GELU, layer norm and pooling count one per
/// element. Factorized layers run at the width of `cfg`.
pub fn flops(cfg: &ModelConfig, form: WeightForm, batch: usize, seq: usize) -> Result<FlopReport> {
    let (b, n, h, f) = (batch as u64, seq as u64, cfg.hidden_size as u64, cfg.ffn_size as u64);
    let heads = cfg.num_heads as u64;
    let layers = cfg.num_layers as u64;
    let rows = b * n;
    let mut c = BTreeMap::new();

    let embed = match form {
        WeightForm::Dense => 0,
        WeightForm::Svd { rank } => rows * rank as u64 * h,
        WeightForm::Tt { rank, cores } => tt_layout(cfg.vocab_size, cfg.hidden_size, rank, cores)?.reconstruct_macs(),
    };
    c.insert("embeddings".to_string(), embed + rows * h);

    let hh = cfg.hidden_size;
    let proj = 4 * linear_macs(rows, hh, hh, form)?;
    c.insert("attention_projections".into(), layers * proj);
    c.insert("attention_scores".into(), layers * (b * n * n * h + b * heads * n * n));
    c.insert("attention_softmax".into(), layers * b * heads * n * n);
    c.insert("attention_context".into(), layers * b * n * n * h);
    let ffn = linear_macs(rows, hh, cfg.ffn_size, form)? + linear_macs(rows, cfg.ffn_size, hh, form)?;
    c.insert("ffn".into(), layers * ffn);
    c.insert("activation".into(), layers * rows * f);
    c.insert("residual_and_norm".into(), layers * 4 * rows * h);
    c.insert("pooling".into(), rows * h);
    let classes = cfg.num_classes as u64;
    c.insert("classifier".into(), b * h * classes + b * classes);

    let total = c.values().sum();
    Ok(FlopReport { batch, seq, components: c, total })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedReport {
    pub label: String,
    pub hidden_size: usize,
    pub repeats: usize,
    /// Total wall-clock per repeat.
    pub timings_ms: Vec<f64>,
    pub mean_ms: f64,
    pub std_ms: f64,
    /// Mean relative to the baseline's mean; 1 for the baseline itself.
    pub relative: f64,
    /// Standard deviation above a quarter of the mean.
    pub unstable: bool,
}

impl SpeedReport {
    pub fn relative_to(&mut self, baseline: &SpeedReport) {
        self.relative = self.mean_ms / baseline.mean_ms;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeedSetup {
    pub seq_len: usize,
    pub n_samples: usize,
    pub batch: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for SpeedSetup {
    fn default() -> Self {
        SpeedSetup { seq_len: 128, n_samples: 64, batch: 16, repeats: 5, seed: 0 }
    }
}

pub const WARMUP_PASSES: usize = 3;

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Times eval-mode inference over `n_samples` random sequences, `repeats`
/// times, after `WARMUP_PASSES` untimed batches.
pub fn measure_speed(student: &dyn Student, setup: SpeedSetup) -> Result<SpeedReport> {
    use rand::Rng;
    if setup.repeats < 2 || setup.batch == 0 || setup.n_samples == 0 {
        return Err(Error::Config("speed runs need repeats ≥ 2 and a positive batch and sample count".into()));
    }
    let cfg = student.config();
    let seq = setup.seq_len.min(cfg.max_seq_len);
    let mut rng = rng_for(setup.seed, "speed-inputs");
    let mut batches = Vec::new();
    let mut left = setup.n_samples;
    while left > 0 {
        let b = left.min(setup.batch);
        let ids = (0..b * seq).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
        batches.push(Input { ids, batch: b, seq, mask: vec![true; b * seq] });
        left -= b;
    }
    no_grad(|| {
        for i in 0..WARMUP_PASSES {
            let w = student.resolve()?;
            forward(cfg, &w, &batches[i % batches.len()], Mode::Eval)?;
        }
        let mut timings = Vec::with_capacity(setup.repeats);
        for _ in 0..setup.repeats {
            let t0 = Instant::now();
            for input in &batches {
                let w = student.resolve()?;
                forward(cfg, &w, input, Mode::Eval)?;
            }
            timings.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        let (mean_ms, std_ms) = mean_std(&timings);
        Ok(SpeedReport {
            label: student.label().to_string(),
            hidden_size: cfg.hidden_size,
            repeats: setup.repeats,
            timings_ms: timings,
            mean_ms,
            std_ms,
            relative: 1.0,
            unstable: std_ms > 0.25 * mean_ms,
        })
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRow {
    pub label: String,
    pub train_params: usize,
    pub inference_params: usize,
}

/// Train-time and inference-time parameter counts of each model.
pub fn count_report(models: &[(&str, &dyn Student)]) -> Vec<CountRow> {
    models
        .iter()
        .map(|(label, s)| CountRow {
            label: label.to_string(),
            train_params: s.trainables().num_elements(),
            inference_params: s.inference_param_count(),
        })
        .collect()
}

fn millions(n: usize) -> String {
    format!("{:.2}M", n as f64 / 1e6)
}

/// Aligned plain-text table with a header row.
pub fn text_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<String>| -> String {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        padded.join("  ").trim_end().to_string()
    };
    let mut out = line(header.iter().map(|s| s.to_string()).collect());
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.clone()));
        out.push('\n');
    }
    out
}

pub fn count_table(rows: &[CountRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                r.train_params.to_string(),
                millions(r.train_params),
                r.inference_params.to_string(),
                millions(r.inference_params),
            ]
        })
        .collect();
    text_table(&["model", "train params", "", "inference params", ""], &body)
}

pub fn speed_table(rows: &[SpeedReport]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                r.hidden_size.to_string(),
                format!("{:.2} ± {:.2}", r.mean_ms, r.std_ms),
                format!("x{:.2}", r.relative),
                if r.unstable { "unstable".into() } else { String::new() },
            ]
        })
        .collect();
    text_table(&["model", "hidden", "ms (mean ± std)", "relative", ""], &body)
}

pub fn flop_table(rows: &[(String, FlopReport)]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(label, r)| vec![label.clone(), r.batch.to_string(), r.seq.to_string(), r.total.to_string()])
        .collect();
    text_table(&["model", "batch", "seq", "MACs"], &body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn components_sum_to_total() {
        let cfg = ModelConfig::new(2, 8, 2, 30, 16, 2);
        for form in [WeightForm::Dense, WeightForm::Svd { rank: 2 }, WeightForm::Tt { rank: 3, cores: 4 }] {
            let r = flops(&cfg, form, 3, 5).unwrap();
            assert_eq!(r.total, r.components.values().sum::<u64>());
        }
    }

    #[test]
    fn table_columns_align() {
        let t = text_table(&["a", "bbb"], &[vec!["xxxx".into(), "y".into()]]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0].find("bbb"), lines[2].find('y'));
    }
}
