//! Seeded training loop for any student scheme under any objective.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use squeeze_tensor::{no_grad, Tensor};

use crate::data::{make_batch, sequential_batches, BatchSampler, Example};
use crate::error::{Error, Result};
use crate::init::rng_for;
use crate::model::{first_position_state, forward, Mode, TransformerModel};
use crate::objectives::{objective_loss, HiddenMaps, ObjectiveSpec};
use crate::optim::{lr_schedule, Adam, AdamConfig};
use crate::params::ParamStore;
use crate::reparam::Student;

fn d_lr() -> f64 {
    1e-3
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_batch() -> usize {
    32
}
fn d_dropout() -> f64 {
    0.1
}
fn d_eval_every() -> usize {
    100
}
fn d_eval_batch() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    pub total_steps: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_dropout")]
    pub attn_dropout: f64,
    #[serde(default = "d_dropout")]
    pub hidden_dropout: f64,
    #[serde(default)]
    pub seed: u64,
    /// Learning rate of the hidden-state maps; the objective's setting wins.
    #[serde(default)]
    pub map_learning_rate: Option<f64>,
    #[serde(default = "d_eval_every")]
    pub eval_every: usize,
    #[serde(default = "d_eval_batch")]
    pub eval_batch_size: usize,
}

impl TrainConfig {
    pub fn new(total_steps: usize, seed: u64) -> Self {
        TrainConfig {
            learning_rate: d_lr(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
            warmup_steps: 0,
            total_steps,
            batch_size: d_batch(),
            attn_dropout: d_dropout(),
            hidden_dropout: d_dropout(),
            seed,
            map_learning_rate: None,
            eval_every: d_eval_every(),
            eval_batch_size: d_eval_batch(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.batch_size == 0 || self.eval_every == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("total_steps, batch_size, eval_every and eval_batch_size must be positive".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        let positive = [("learning_rate", self.learning_rate), ("eps", self.eps)];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("{name} = {v} must be positive")));
        }
        if self.map_learning_rate.is_some_and(|v| !(v > 0.0)) {
            return Err(Error::Config("map_learning_rate must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} = {b} is outside [0, 1)")));
            }
        }
        for (name, p) in [("attn_dropout", self.attn_dropout), ("hidden_dropout", self.hidden_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is outside [0, 1)")));
            }
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

/// Metrics at one evaluation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub lr: f64,
    /// Mean training loss since the previous evaluation.
    pub loss: Option<f64>,
    pub mle: Option<f64>,
    pub soft: Option<f64>,
    pub hidden: Option<f64>,
    pub dev_accuracy: f64,
    /// `σ(s)` for gated students.
    pub gate: Option<f64>,
    pub wall_clock_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scheme: String,
    pub objective: String,
    pub config: Value,
    /// Loss at every optimization step.
    pub step_losses: Vec<f64>,
    pub evals: Vec<EvalRecord>,
    pub best_step: usize,
    pub best_dev_accuracy: f64,
    pub train_params: usize,
    pub inference_params: usize,
    /// Human-readable warnings about the run.
    pub flags: Vec<String>,
}

impl RunReport {
    /// Records an evaluation; true if it is the best so far.
    fn push_eval(&mut self, record: EvalRecord) -> bool {
        let improved = record.dev_accuracy > self.best_dev_accuracy;
        if improved {
            self.best_dev_accuracy = record.dev_accuracy;
            self.best_step = record.step;
        }
        self.evals.push(record);
        improved
    }

    /// One JSON object per evaluation followed by a summary line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.evals {
            let mut v = serde_json::to_value(e)?;
            v["type"] = json!("eval");
            out.push_str(&serde_json::to_string(&v)?);
            out.push('\n');
        }
        let summary = json!({
            "type": "summary",
            "scheme": self.scheme,
            "objective": self.objective,
            "config": self.config,
            "best_step": self.best_step,
            "best_dev_accuracy": self.best_dev_accuracy,
            "train_params": self.train_params,
            "inference_params": self.inference_params,
            "flags": self.flags,
            "step_losses": self.step_losses,
        });
        out.push_str(&serde_json::to_string(&summary)?);
        out.push('\n');
        Ok(out)
    }

    /// Appends the JSON-lines form to `path`.
    pub fn append_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub struct TrainData<'a> {
    pub train: &'a [Example],
    pub dev: &'a [Example],
}

pub struct TrainOutcome {
    pub report: RunReport,
    /// Hidden-state maps at the best checkpoint, for KD-EO runs.
    pub maps: Option<HiddenMaps>,
}

/// Teacher predictions on the training set, computed once in eval mode.
struct TeacherCache {
    logits: Vec<Vec<f64>>,
    /// `states[i][j-1]`: position-0 state of layer `j` for example `i`.
    states: Vec<Vec<Vec<f64>>>,
}

impl TeacherCache {
    fn build(teacher: &TransformerModel, examples: &[Example], layers: usize, batch: usize) -> Result<Self> {
        let mut logits = Vec::with_capacity(examples.len());
        let mut states = Vec::with_capacity(examples.len());
        no_grad(|| -> Result<()> {
            for b in sequential_batches(examples, batch)? {
                let out = teacher.forward(&b.input, Mode::Eval)?;
                let c = out.logits.shape()[1];
                let per_layer = (1..=layers).map(|j| first_position_state(&out, j)).collect::<Result<Vec<_>>>()?;
                for i in 0..b.input.batch {
                    logits.push(out.logits.data()[i * c..(i + 1) * c].to_vec());
                    states.push(
                        per_layer
                            .iter()
                            .map(|s| {
                                let h = s.shape()[1];
                                s.data()[i * h..(i + 1) * h].to_vec()
                            })
                            .collect(),
                    );
                }
            }
            Ok(())
        })?;
        Ok(TeacherCache { logits, states })
    }

    fn logits_for(&self, idx: &[usize]) -> Result<Tensor> {
        let c = self.logits[0].len();
        Ok(Tensor::new(idx.iter().flat_map(|&i| self.logits[i].iter().copied()).collect(), &[idx.len(), c])?)
    }

    fn states_for(&self, idx: &[usize], layers: usize) -> Result<Vec<Tensor>> {
        (0..layers)
            .map(|j| {
                let h = self.states[0][j].len();
                let data = idx.iter().flat_map(|&i| self.states[i][j].iter().copied()).collect();
                Ok(Tensor::new(data, &[idx.len(), h])?)
            })
            .collect()
    }
}

/// Fraction of `examples` whose argmax prediction equals the label.
pub fn accuracy(student: &dyn Student, examples: &[Example], batch: usize) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    no_grad(|| {
        let weights = student.resolve()?;
        let mut correct = 0usize;
        for b in sequential_batches(examples, batch)? {
            let out = forward(student.config(), &weights, &b.input, Mode::Eval)?;
            let c = out.logits.shape()[1];
            for (i, &label) in b.labels.iter().enumerate() {
                let row = &out.logits.data()[i * c..(i + 1) * c];
                let pred = (0..c).fold(0, |best, k| if row[k] > row[best] { k } else { best });
                correct += usize::from(pred == label);
            }
        }
        Ok(correct as f64 / examples.len() as f64)
    })
}

/// Per-step loss parts accumulated between evaluations.
#[derive(Default)]
struct LossWindow {
    rows: Vec<(f64, f64, Option<f64>, Option<f64>)>,
}

impl LossWindow {
    fn push(&mut self, loss: f64, mle: f64, soft: Option<f64>, hidden: Option<f64>) {
        self.rows.push((loss, mle, soft, hidden));
    }

    fn mean(&self, f: impl Fn(&(f64, f64, Option<f64>, Option<f64>)) -> Option<f64>) -> Option<f64> {
        if self.rows.is_empty() {
            return None;
        }
        let total: Option<f64> = self.rows.iter().map(f).sum();
        total.map(|s| s / self.rows.len() as f64)
    }
}

fn eval_record(
    step: usize,
    student: &dyn Student,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    window: &mut LossWindow,
    started: Instant,
) -> Result<EvalRecord> {
    let record = EvalRecord {
        step,
        lr: lr_schedule(step, cfg.learning_rate, cfg.warmup_steps, cfg.total_steps),
        loss: window.mean(|w| Some(w.0)),
        mle: window.mean(|w| Some(w.1)),
        soft: window.mean(|w| w.2),
        hidden: window.mean(|w| w.3),
        dev_accuracy: accuracy(student, data.dev, cfg.eval_batch_size)?,
        gate: student.gate(),
        wall_clock_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    window.rows.clear();
    Ok(record)
}

fn check_finite_grads(store: &ParamStore, step: usize) -> Result<()> {
    for (name, t) in store.iter() {
        if let Some(g) = t.grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { step, detail: format!("gradient of `{name}`") });
            }
        }
    }
    Ok(())
}

fn restore(store: &mut ParamStore, snapshot: &ParamStore) -> Result<()> {
    for (name, t) in snapshot.iter() {
        store.replace(name, t.clone())?;
    }
    Ok(())
}

/// Trains exactly `student.trainables()` (plus the hidden-state maps for
/// KD-EO) and leaves the student at its best dev-accuracy checkpoint.
pub fn train(
    student: &mut dyn Student,
    data: TrainData<'_>,
    objective: &ObjectiveSpec,
    cfg: &TrainConfig,
    teacher: Option<&TransformerModel>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    objective.validate()?;
    if data.train.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    if objective.needs_teacher() && teacher.is_none() {
        return Err(Error::Config(format!("objective `{}` needs a teacher", objective.label())));
    }
    if teacher.is_some() && !objective.needs_teacher() && student.label() == "plain" {
        return Err(Error::Config("a teacher was given but neither the objective nor the scheme uses it".into()));
    }

    let mut run_cfg = student.config().clone();
    run_cfg.attn_dropout = cfg.attn_dropout;
    run_cfg.hidden_dropout = cfg.hidden_dropout;
    let layers = run_cfg.num_layers;

    let kd_eo = matches!(objective, ObjectiveSpec::KdEo { .. });
    let cache = match teacher.filter(|_| objective.needs_teacher()) {
        Some(t) => {
            if t.config.num_classes != run_cfg.num_classes {
                return Err(Error::Contract("teacher and student class counts differ".into()));
            }
            if kd_eo && t.config.num_layers < layers {
                return Err(Error::Contract(format!(
                    "teacher has {} layers, student distills {layers}",
                    t.config.num_layers
                )));
            }
            Some(TeacherCache::build(t, data.train, if kd_eo { layers } else { 0 }, cfg.eval_batch_size)?)
        }
        None => None,
    };
    let mut maps = match (kd_eo, teacher) {
        (true, Some(t)) => Some(HiddenMaps::new(layers, run_cfg.hidden_size, t.config.hidden_size, cfg.seed)),
        _ => None,
    };
    let map_lr = match objective {
        ObjectiveSpec::KdEo { map_learning_rate: Some(lr), .. } => *lr,
        _ => cfg.map_learning_rate.unwrap_or(cfg.learning_rate),
    };

    let mut sampler = BatchSampler::new(data.train.len(), cfg.batch_size, rng_for(cfg.seed, "batch-order"));
    let mut dropout_rng = rng_for(cfg.seed, "dropout");
    let mut adam = Adam::new(cfg.adam());
    let started = Instant::now();

    let mut report = RunReport {
        scheme: student.label().to_string(),
        objective: objective.label().to_string(),
        config: json!({ "train": cfg, "objective": objective, "model": run_cfg }),
        step_losses: Vec::with_capacity(cfg.total_steps),
        evals: Vec::new(),
        best_step: 0,
        best_dev_accuracy: f64::NEG_INFINITY,
        train_params: student.trainables().num_elements(),
        inference_params: student.inference_param_count(),
        flags: Vec::new(),
    };
    let mut best: Option<(ParamStore, Option<ParamStore>)> = None;
    let mut window = LossWindow::default();

    let record = eval_record(0, student, &data, cfg, &mut window, started)?;
    if report.push_eval(record) {
        best = Some((student.trainables().clone(), maps.as_ref().map(|m| m.params.clone())));
    }

    for step in 0..cfg.total_steps {
        let lr = lr_schedule(step, cfg.learning_rate, cfg.warmup_steps, cfg.total_steps);
        let idx = sampler.next_indices();
        let rows: Vec<&Example> = idx.iter().map(|&i| &data.train[i]).collect();
        let batch = make_batch(&rows)?;

        student.trainables().zero_grad();
        if let Some(m) = &maps {
            m.params.zero_grad();
        }
        let weights = student.resolve()?;
        let out = forward(&run_cfg, &weights, &batch.input, Mode::Train(&mut dropout_rng))?;
        let teacher_logits = cache.as_ref().map(|c| c.logits_for(&idx)).transpose()?;
        let teacher_states = match (&cache, kd_eo) {
            (Some(c), true) => c.states_for(&idx, layers)?,
            _ => Vec::new(),
        };
        let terms = objective_loss(objective, &out, &batch.labels, teacher_logits.as_ref(), &teacher_states, maps.as_ref())?;
        let loss = terms.total.item();
        if !loss.is_finite() {
            return Err(Error::NonFinite { step, detail: format!("loss = {loss}") });
        }
        terms.total.backward()?;
        check_finite_grads(student.trainables(), step)?;

        adam.begin_step();
        adam.update(student.trainables_mut(), lr)?;
        if let Some(m) = &mut maps {
            check_finite_grads(&m.params, step)?;
            let scaled = if cfg.learning_rate > 0.0 { lr * map_lr / cfg.learning_rate } else { 0.0 };
            adam.update(&mut m.params, scaled)?;
        }
        report.step_losses.push(loss);
        window.push(loss, terms.mle, terms.soft, terms.hidden);

        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.total_steps {
            let record = eval_record(done, student, &data, cfg, &mut window, started)?;
            if report.push_eval(record) {
                best = Some((student.trainables().clone(), maps.as_ref().map(|m| m.params.clone())));
            }
            log::info!(
                "step {done}/{}: loss {:.4} dev acc {:.4}",
                cfg.total_steps,
                report.evals.last().and_then(|e| e.loss).unwrap_or(f64::NAN),
                report.evals.last().map(|e| e.dev_accuracy).unwrap_or(f64::NAN)
            );
        }
    }

    if let Some((params, map_params)) = best {
        restore(student.trainables_mut(), &params)?;
        if let (Some(m), Some(p)) = (&mut maps, map_params) {
            restore(&mut m.params, &p)?;
        }
    }
    Ok(TrainOutcome { report, maps })
}
