//! End-to-end runs behind the command-line tool. Each run writes its
//! checkpoints, a JSON-lines report and the resolved config to one directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bench::{self, CountRow, FlopReport, SpeedReport, WeightForm};
use crate::checkpoint::{load_model, model_checkpoint, Checkpoint};
use crate::config::ModelConfig;
use crate::data::{self, Example, Vocab};
use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::params::ParamStore;
use crate::reparam::budget::{gated_train_count, svd_param_count, tt_param_count, ws_train_count};
use crate::reparam::{
    gated_ws_init, match_rank_to_budget, svd_factorize, tt_factorize, ws_init, Gate, LowRankMethod, ReparamSpec,
    Student,
};
use crate::run_config::{RunConfig, TaskConfig};
use crate::trainer::{train, RunReport, TrainData};

pub const REPORT_FILE: &str = "report.jsonl";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

pub struct TaskData {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    /// Number of token ids the task uses.
    pub vocab_size: usize,
    pub vocab: Option<Vocab>,
}

pub fn load_task(task: &TaskConfig) -> Result<TaskData> {
    match task {
        TaskConfig::Synth { kind, train_size, dev_size, vocab_size, seed } => Ok(TaskData {
            train: data::synth_task(*kind, *train_size, *vocab_size, *seed)?,
            dev: data::synth_task(*kind, *dev_size, *vocab_size, seed.wrapping_add(1))?,
            vocab_size: *vocab_size,
            vocab: None,
        }),
        TaskConfig::Tsv { train, dev, max_vocab, max_len } => {
            let raw_train = data::load_tsv(train)?;
            let raw_dev = data::load_tsv(dev)?;
            let texts: Vec<&str> = raw_train
                .iter()
                .flat_map(|r| std::iter::once(r.text.as_str()).chain(r.pair.as_deref()))
                .collect();
            let vocab = data::build_vocab(&texts, *max_vocab)?;
            let enc = |rs: &[data::RawExample]| rs.iter().map(|r| data::encode(r, &vocab, *max_len)).collect();
            Ok(TaskData { train: enc(&raw_train), dev: enc(&raw_dev), vocab_size: vocab.len(), vocab: Some(vocab) })
        }
    }
}

fn check_model_fits(cfg: &ModelConfig, task: &TaskData, what: &str) -> Result<()> {
    if cfg.vocab_size < task.vocab_size {
        return Err(Error::Config(format!(
            "{what} vocab_size {} is smaller than the task's {}",
            cfg.vocab_size, task.vocab_size
        )));
    }
    let longest = task.train.iter().chain(&task.dev).map(|e| e.ids.len()).max().unwrap_or(0);
    if longest > cfg.max_seq_len {
        return Err(Error::Config(format!("{what} max_seq_len {} is below the longest sequence {longest}", cfg.max_seq_len)));
    }
    let classes = task.train.iter().chain(&task.dev).map(|e| e.label + 1).max().unwrap_or(0);
    if classes > cfg.num_classes {
        return Err(Error::Config(format!("{what} has {} classes but the task has labels up to {}", cfg.num_classes, classes - 1)));
    }
    Ok(())
}

fn prepare_out(out: &Path, cfg: &RunConfig, task: &TaskData) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(RESOLVED_CONFIG_FILE);
    fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))?;
    let report = out.join(REPORT_FILE);
    if report.exists() {
        fs::remove_file(&report).map_err(|e| Error::io(&report, e))?;
    }
    if let Some(v) = &task.vocab {
        v.save(&out.join("vocab.txt"))?;
    }
    Ok(())
}

fn teacher_from(cfg: &RunConfig) -> Result<TransformerModel> {
    let path = cfg
        .teacher
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("this run needs `teacher.checkpoint`".into()))?;
    load_model(path)
}

fn student_cfg(cfg: &RunConfig) -> Result<ModelConfig> {
    cfg.student.clone().ok_or_else(|| Error::Config("this run needs a `[student]` model".into()))
}

fn student_checkpoint(student: &dyn Student, extra: serde_json::Value) -> Result<Checkpoint> {
    let meta = json!({
        "kind": student.label(),
        "config": serde_json::to_value(student.config())?,
        "extra": extra,
    });
    Ok(Checkpoint::new(meta, student.trainables().clone()))
}

/// Collapses a student whose weights all resolve dense into a plain model.
fn bake_dense(student: &dyn Student) -> Result<TransformerModel> {
    let mut params = ParamStore::new();
    squeeze_tensor::no_grad(|| -> Result<()> {
        for (name, w) in student.resolve()?.iter() {
            params.insert(name, w.to_dense()?.detach());
        }
        Ok(())
    })?;
    TransformerModel::from_params(student.config().clone(), params)
}

fn finish(out: &Path, report: &RunReport) -> Result<()> {
    report.append_jsonl(&out.join(REPORT_FILE))
}

/// Trains a plain teacher with MLE. Writes `teacher.ckpt`.
pub fn train_teacher(cfg: &RunConfig, out: &Path) -> Result<RunReport> {
    let model_cfg = cfg
        .teacher
        .model
        .clone()
        .ok_or_else(|| Error::Config("train-teacher needs `[teacher.model]`".into()))?;
    let task = load_task(&cfg.task)?;
    check_model_fits(&model_cfg, &task, "teacher")?;
    prepare_out(out, cfg, &task)?;
    let mut model = TransformerModel::init(model_cfg, cfg.train.seed)?;
    let outcome = train(
        &mut model,
        TrainData { train: &task.train, dev: &task.dev },
        &crate::objectives::ObjectiveSpec::Mle,
        &cfg.train,
        None,
    )?;
    model_checkpoint(&model)?.save(&out.join("teacher.ckpt"))?;
    finish(out, &outcome.report)?;
    Ok(outcome.report)
}

/// Builds a student per `cfg.reparam`, trains it under `cfg.objective` and
/// writes `student_train.ckpt` (trainables) and `student.ckpt` (inference
/// weights; baked for plain and WS students).
pub fn squeeze(cfg: &RunConfig, out: &Path) -> Result<RunReport> {
    let task = load_task(&cfg.task)?;
    let scfg = student_cfg(cfg)?;
    let needs_teacher = cfg.reparam.needs_teacher() || cfg.objective.needs_teacher();
    let teacher = if needs_teacher { Some(teacher_from(cfg)?) } else { None };
    let seed = cfg.train.seed;
    let mut extra = json!({});
    let mut student: Box<dyn Student> = match &cfg.reparam {
        ReparamSpec::Plain => Box::new(TransformerModel::init(scfg.clone(), seed)?),
        ReparamSpec::Ws => Box::new(ws_init(teacher.as_ref().expect("needs teacher"), &scfg, seed)?),
        ReparamSpec::GatedWs { .. } => {
            return Err(Error::Config("gated-ws students train through gated-finetune".into()));
        }
        ReparamSpec::Svd { rank } => {
            let t = teacher.as_ref().expect("needs teacher");
            let r = match rank {
                Some(r) => *r,
                None => match_rank_to_budget(&t.config, &scfg, LowRankMethod::Svd)?,
            };
            extra = json!({ "rank": r });
            Box::new(svd_factorize(t, r)?)
        }
        ReparamSpec::Tt { rank, cores } => {
            let t = teacher.as_ref().expect("needs teacher");
            let r = match rank {
                Some(r) => *r,
                None => match_rank_to_budget(&t.config, &scfg, LowRankMethod::Tt { cores: *cores })?,
            };
            extra = json!({ "rank": r, "cores": cores });
            Box::new(tt_factorize(t, r, *cores)?)
        }
    };
    check_model_fits(student.config(), &task, "student")?;
    prepare_out(out, cfg, &task)?;
    let kd_teacher = teacher.as_ref().filter(|_| cfg.objective.needs_teacher());
    let outcome = train(
        student.as_mut(),
        TrainData { train: &task.train, dev: &task.dev },
        &cfg.objective,
        &cfg.train,
        kd_teacher,
    )?;
    student_checkpoint(student.as_ref(), extra.clone())?.save(&out.join("student_train.ckpt"))?;
    let inference = match &cfg.reparam {
        ReparamSpec::Plain | ReparamSpec::Ws => {
            let baked = bake_dense(student.as_ref())?;
            model_checkpoint(&baked)?
        }
        _ => student_checkpoint(student.as_ref(), extra)?,
    };
    inference.save(&out.join("student.ckpt"))?;
    finish(out, &outcome.report)?;
    Ok(outcome.report)
}

/// Gated Weight Squeezing from `gated.base_checkpoint` toward the teacher,
/// then baked to `student.ckpt`. The report records `σ(s)` at each
/// evaluation.
pub fn gated_finetune(cfg: &RunConfig, out: &Path) -> Result<RunReport> {
    let (s0, fixed) = match cfg.reparam {
        ReparamSpec::GatedWs { s0, fixed_sigma } => (s0, fixed_sigma),
        _ => return Err(Error::Config("gated-finetune needs `reparam.kind = \"gated-ws\"`".into())),
    };
    let gate = match fixed {
        Some(sigma) => Gate::Fixed { sigma },
        None => Gate::Learned { s0 },
    };
    let task = load_task(&cfg.task)?;
    let teacher = teacher_from(cfg)?;
    let base_path = &cfg
        .gated
        .as_ref()
        .ok_or_else(|| Error::Config("gated-finetune needs `gated.base_checkpoint`".into()))?
        .base_checkpoint;
    let base = load_model(base_path)?;
    let mut student = gated_ws_init(&teacher, &base, gate, cfg.train.seed)?;
    check_model_fits(&student.config().clone(), &task, "base model")?;
    prepare_out(out, cfg, &task)?;
    let kd_teacher = Some(&teacher).filter(|_| cfg.objective.needs_teacher());
    let outcome = train(&mut student, TrainData { train: &task.train, dev: &task.dev }, &cfg.objective, &cfg.train, kd_teacher)?;
    student_checkpoint(&student, json!({ "gate": student.sigma() }))?.save(&out.join("gated_train.ckpt"))?;
    model_checkpoint(&student.bake()?)?.save(&out.join("student.ckpt"))?;
    finish(out, &outcome.report)?;
    Ok(outcome.report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub counts: Vec<CountRow>,
    pub flops: Vec<(String, FlopReport)>,
    pub speed_batched: Vec<SpeedReport>,
    pub speed_single: Vec<SpeedReport>,
    pub svd_rank: usize,
    pub tt_rank: usize,
    pub flags: Vec<String>,
}

impl BenchReport {
    pub fn text(&self) -> String {
        format!(
            "Parameters\n{}\nForward MACs\n{}\nInference time, batched\n{}\nInference time, batch 1\n{}{}",
            bench::count_table(&self.counts),
            bench::flop_table(&self.flops),
            bench::speed_table(&self.speed_batched),
            bench::speed_table(&self.speed_single),
            self.flags.iter().map(|f| format!("\nwarning: {f}")).collect::<String>(),
        )
    }
}

fn ordered(rows: &[SpeedReport]) -> bool {
    rows.windows(2).all(|w| w[0].mean_ms <= w[1].mean_ms)
}

/// Parameter counts, MACs and timings for the plain student and the SVD and
/// TT baselines at ranks matched to the student's budget. Writes
/// `bench.json` and `bench.txt`.
pub fn bench(cfg: &RunConfig, out: &Path) -> Result<BenchReport> {
    let scfg = student_cfg(cfg)?;
    let teacher = match (&cfg.teacher.checkpoint, &cfg.teacher.model) {
        (Some(_), _) => teacher_from(cfg)?,
        (None, Some(m)) => TransformerModel::init(m.clone(), cfg.train.seed)?,
        (None, None) => return Err(Error::Config("bench needs a teacher checkpoint or `[teacher.model]`".into())),
    };
    let tcfg = teacher.config.clone();
    let svd_rank = match_rank_to_budget(&tcfg, &scfg, LowRankMethod::Svd)?;
    let tt_rank = match_rank_to_budget(&tcfg, &scfg, LowRankMethod::Tt { cores: 4 })?;
    let plain_n = scfg.num_parameters();
    let counts = vec![
        CountRow { label: "plain".into(), train_params: plain_n, inference_params: plain_n },
        CountRow { label: "ws".into(), train_params: ws_train_count(&tcfg, &scfg), inference_params: plain_n },
        CountRow {
            label: "gated-ws".into(),
            train_params: gated_train_count(&tcfg, &scfg, true),
            inference_params: plain_n,
        },
        CountRow { label: format!("svd r={svd_rank}"), train_params: svd_param_count(&tcfg, svd_rank), inference_params: svd_param_count(&tcfg, svd_rank) },
        CountRow {
            label: format!("tt r={tt_rank}"),
            train_params: tt_param_count(&tcfg, tt_rank, 4)?,
            inference_params: tt_param_count(&tcfg, tt_rank, 4)?,
        },
    ];
    let setup = cfg.bench;
    let seq = setup.seq_len.min(scfg.max_seq_len).min(tcfg.max_seq_len);
    let flops = vec![
        ("plain".to_string(), bench::flops(&scfg, WeightForm::Dense, setup.batch, seq)?),
        (format!("svd r={svd_rank}"), bench::flops(&tcfg, WeightForm::Svd { rank: svd_rank }, setup.batch, seq)?),
        (format!("tt r={tt_rank}"), bench::flops(&tcfg, WeightForm::Tt { rank: tt_rank, cores: 4 }, setup.batch, seq)?),
    ];

    let plain = TransformerModel::init(scfg.clone(), cfg.train.seed)?;
    let svd = svd_factorize(&teacher, svd_rank)?;
    let tt = tt_factorize(&teacher, tt_rank, 4)?;
    let models: [&dyn Student; 3] = [&plain, &svd, &tt];
    let mut flags = Vec::new();
    let run = |batch: usize| -> Result<Vec<SpeedReport>> {
        let mut rows = Vec::new();
        for m in models {
            let mut s = bench::SpeedSetup { batch, seq_len: seq, ..setup };
            s.n_samples = s.n_samples.max(batch);
            rows.push(bench::measure_speed(m, s)?);
        }
        let base = rows[0].clone();
        for r in &mut rows {
            r.relative_to(&base);
        }
        Ok(rows)
    };
    let speed_batched = run(setup.batch)?;
    let speed_single = run(1)?;
    for (name, rows) in [("batched", &speed_batched), ("batch-1", &speed_single)] {
        if !ordered(rows) {
            flags.push(format!("{name} wall-clock ordering plain ≤ svd ≤ tt not observed on this machine"));
        }
        for r in rows.iter().filter(|r| r.unstable) {
            flags.push(format!("{name} timing of {} is unstable (std > 25% of mean)", r.label));
        }
    }
    let report = BenchReport { counts, flops, speed_batched, speed_single, svd_rank, tt_rank, flags };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let json_path = out.join("bench.json");
    fs::write(&json_path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&json_path, e))?;
    let txt = out.join("bench.txt");
    fs::write(&txt, report.text()).map_err(|e| Error::io(&txt, e))?;
    let resolved = out.join(RESOLVED_CONFIG_FILE);
    fs::write(&resolved, cfg.to_toml()?).map_err(|e| Error::io(&resolved, e))?;
    Ok(report)
}

/// Default output directory for a command.
pub fn default_out(cfg: &RunConfig, command: &str) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(command))
}
