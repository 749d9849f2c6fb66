//! Self-check of the numerical invariants on tiny models. Each check returns
//! its worst observed error against a fixed tolerance.

use rand::Rng;
use squeeze_tensor::gradcheck::{check_gradients, GradCheckConfig};
use squeeze_tensor::{no_grad, Tensor};

use crate::config::ModelConfig;
use crate::data::{synth_task, SynthKind};
use crate::error::Result;
use crate::factored::{ResolvedWeights, Weight};
use crate::init::{rng_for, SeededRng};
use crate::model::{forward, Input, Mode, TransformerModel};
use crate::objectives::{kd_loss, kdeo_loss, mle_loss, simplex_weights, HiddenMaps, ObjectiveSpec};
use crate::reparam::svd::{factorized_weights, max_svd_rank};
use crate::reparam::{gated_ws_init, svd_factorize, tt_factorize, ws_init, Gate, Student};
use crate::trainer::{train, TrainConfig, TrainData};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }

    pub fn line(&self) -> String {
        let mark = if self.passed() { "PASS" } else { "FAIL" };
        format!("[{mark}] {:<28} error {:.3e} (tolerance {:.0e})", self.name, self.error, self.tolerance)
    }
}

fn uniform(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(-2.0..2.0)).collect(), shape).expect("shape matches data")
}

fn random_input(rng: &mut SeededRng, cfg: &ModelConfig, batch: usize, seq: usize) -> Input {
    let rows: Vec<Vec<usize>> =
        (0..batch).map(|_| (0..seq).map(|_| rng.random_range(0..cfg.vocab_size)).collect()).collect();
    Input::from_rows(&rows).expect("rows are nonempty")
}

fn tiny(hidden: usize) -> ModelConfig {
    ModelConfig::new(2, hidden, 2, 7, 4, 3)
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn grad_error<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let report = check_gradients(
        inputs,
        |x| f(x).map_err(|e| squeeze_tensor::TensorError::Invalid { op: "verify", msg: e.to_string() }),
        GradCheckConfig::default(),
    )?;
    Ok(report.max_rel_error)
}

fn op_gradients(rng: &mut SeededRng) -> Result<f64> {
    let a = uniform(rng, &[3, 4]);
    let b = uniform(rng, &[4, 5]);
    let g = uniform(rng, &[4]);
    let w = uniform(rng, &[3, 5]);
    let mut worst: f64 = 0.0;
    let project = |t: Tensor| -> Result<Tensor> { Ok(t.mul(&w)?.sum()) };
    worst = worst.max(grad_error(&[a.clone(), b.clone()], |x| project(x[0].matmul(&x[1])?))?);
    worst = worst.max(grad_error(&[b.clone()], |x| project(x[0].transpose()?.softmax(1)?.slice(1, 0, 3)?.transpose()?))?);
    worst = worst.max(grad_error(&[a.clone(), g.clone()], |x| {
        let ln = x[0].layer_norm(&x[1], &x[1].scale(0.5), 1e-5)?;
        project(ln.matmul(&b)?)
    })?);
    worst = worst.max(grad_error(&[a.clone()], |x| project(x[0].gelu().matmul(&b)?.log_softmax(1)?))?);
    worst = worst.max(grad_error(&[a.clone(), a.scale(0.5).add_scalar(3.0)], |x| {
        project(x[0].div(&x[1])?.sigmoid().matmul(&b)?)
    })?);
    worst = worst.max(grad_error(&[a.clone()], |x| Ok(x[0].cross_entropy(&[0, 3, 1])?))?);
    Ok(worst)
}

fn bilinear_gradient(rng: &mut SeededRng) -> Result<f64> {
    let l = uniform(rng, &[2, 5]);
    let theta = uniform(rng, &[5, 6]);
    let r = uniform(rng, &[6, 3]);
    grad_error(&[l, r], |x| Ok(x[0].matmul(&theta)?.matmul(&x[1])?.sum()))
}

fn params_as_weights(names: &[String], tensors: &[Tensor]) -> ResolvedWeights {
    let mut w = ResolvedWeights::new();
    for (n, t) in names.iter().zip(tensors) {
        w.insert(n.clone(), Weight::Dense(t.clone()));
    }
    w
}

fn end_to_end_gradient(rng: &mut SeededRng, seed: u64) -> Result<f64> {
    let cfg = ModelConfig::new(1, 4, 2, 7, 3, 3);
    let model = TransformerModel::init(cfg.clone(), seed)?;
    let input = random_input(rng, &cfg, 2, 3);
    let labels = [0, 2];
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let tensors: Vec<Tensor> = model.params.iter().map(|(_, t)| t.detach()).collect();
    grad_error(&tensors, |x| {
        let out = forward(&cfg, &params_as_weights(&names, x), &input, Mode::Eval)?;
        mle_loss(&out.logits, &labels)
    })
}

fn ws_gradient(rng: &mut SeededRng, seed: u64) -> Result<f64> {
    let teacher = TransformerModel::init(ModelConfig::new(1, 6, 2, 7, 3, 3), seed)?;
    let scfg = ModelConfig::new(1, 4, 2, 7, 3, 3);
    let student = ws_init(&teacher, &scfg, seed)?;
    let input = random_input(rng, &scfg, 2, 3);
    let names: Vec<String> = student.trainables().names().map(str::to_string).collect();
    let tensors: Vec<Tensor> = student.trainables().iter().map(|(_, t)| t.detach()).collect();
    grad_error(&tensors, |x| {
        let mut s = student.clone();
        for (n, t) in names.iter().zip(x) {
            s.trainables_mut().replace(n, t.clone())?;
        }
        mle_loss(&s.forward(&input, Mode::Eval)?.logits, &[1, 2])
    })
}

fn bake_equivalence(rng: &mut SeededRng, seed: u64) -> Result<f64> {
    let teacher = TransformerModel::init(tiny(8), seed)?;
    let scfg = tiny(4);
    let student = ws_init(&teacher, &scfg, seed)?;
    let baked = student.bake()?;
    let mut worst: f64 = 0.0;
    if baked.params.num_elements() != scfg.num_parameters() {
        worst = f64::INFINITY;
    }
    no_grad(|| -> Result<()> {
        for _ in 0..100 {
            let input = random_input(rng, &scfg, 1, scfg.max_seq_len);
            let a = student.forward(&input, Mode::Eval)?.logits;
            let b = baked.forward(&input, Mode::Eval)?.logits;
            worst = worst.max(max_abs_diff(&a, &b));
        }
        Ok(())
    })?;
    Ok(worst)
}

fn loss_identities(rng: &mut SeededRng, seed: u64) -> Result<f64> {
    let logits = uniform(rng, &[4, 3]);
    let teacher_logits = uniform(rng, &[4, 3]);
    let labels = [0, 2, 1, 1];
    let mut worst: f64 = 0.0;
    no_grad(|| -> Result<()> {
        let kd = kd_loss(&logits, &teacher_logits, &labels, 1.0, 2.0)?.item();
        worst = worst.max((kd - mle_loss(&logits, &labels)?.item()).abs());

        let cfg = tiny(4);
        let student = TransformerModel::init(cfg.clone(), seed)?;
        let teacher = TransformerModel::init(tiny(8), seed.wrapping_add(1))?;
        let input = random_input(rng, &cfg, 3, 4);
        let (s_out, t_out) = (student.forward(&input, Mode::Eval)?, teacher.forward(&input, Mode::Eval)?);
        let maps = HiddenMaps::new(cfg.num_layers, 4, 8, seed);
        let (alpha, beta, temperature) = (0.3, 0.5, 2.0);
        let eo = kdeo_loss(&s_out, &t_out, &labels[..3], &maps, alpha, beta, 0.0, temperature)?.item();
        let kd = kd_loss(&s_out.logits, &t_out.logits, &labels[..3], alpha / (alpha + beta), temperature)?.item();
        worst = worst.max((eo - (alpha + beta) * kd).abs());

        let (a, b, c) = simplex_weights(0.7, -1.2, 3.0);
        worst = worst.max((a + b + c - 1.0).abs());
        Ok(())
    })?;
    Ok(worst)
}

fn relative_frobenius(a: &Tensor, b: &Tensor) -> f64 {
    let num: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.data().iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

fn full_rank(rng: &mut SeededRng, seed: u64) -> Result<f64> {
    let cfg = ModelConfig::new(2, 8, 2, 9, 4, 3);
    let teacher = TransformerModel::init(cfg.clone(), seed)?;
    let svd = svd_factorize(&teacher, max_svd_rank(&cfg))?;
    let tt = tt_factorize(&teacher, 1 << 20, 4)?;
    let mut worst: f64 = 0.0;
    no_grad(|| -> Result<()> {
        for s in [&svd as &dyn Student, &tt] {
            let resolved = s.resolve()?;
            for (name, _, _) in factorized_weights(&cfg) {
                let w = resolved.get(&name)?.to_dense()?;
                worst = worst.max(relative_frobenius(&w, teacher.params.get(&name)?));
            }
            let input = random_input(rng, &cfg, 4, cfg.max_seq_len);
            let a = s.forward(&input, Mode::Eval)?.logits;
            let b = teacher.forward(&input, Mode::Eval)?.logits;
            worst = worst.max(max_abs_diff(&a, &b));
        }
        Ok(())
    })?;
    Ok(worst)
}

fn gated_sigma_one(seed: u64) -> Result<f64> {
    let teacher = TransformerModel::init(ModelConfig::new(2, 8, 2, 10, 12, 2), seed)?;
    let base = TransformerModel::init(ModelConfig::new(2, 4, 2, 10, 12, 2), seed.wrapping_add(1))?;
    let task = synth_task(SynthKind::Keyword, 64, 10, seed)?;
    let data = TrainData { train: &task, dev: &task };
    let mut tc = TrainConfig::new(20, seed);
    tc.batch_size = 8;
    tc.eval_every = 20;

    let mut plain = base.clone();
    let a = train(&mut plain, TrainData { train: &task, dev: &task }, &ObjectiveSpec::Mle, &tc, None)?.report.step_losses;
    let mut gated = gated_ws_init(&teacher, &base, Gate::Fixed { sigma: 1.0 }, seed)?;
    let b = train(&mut gated, data, &ObjectiveSpec::Mle, &tc, None)?.report.step_losses;
    if a.len() != b.len() {
        return Ok(f64::INFINITY);
    }
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

/// Runs every check in order.
pub fn run_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = rng_for(seed, "verify");
    let rng = &mut rng;
    Ok(vec![
        CheckResult { name: "op gradients", error: op_gradients(rng)?, tolerance: 1e-6 },
        CheckResult { name: "bilinear mapping gradient", error: bilinear_gradient(rng)?, tolerance: 1e-6 },
        CheckResult { name: "end-to-end gradient", error: end_to_end_gradient(rng, seed)?, tolerance: 1e-4 },
        CheckResult { name: "ws end-to-end gradient", error: ws_gradient(rng, seed)?, tolerance: 1e-4 },
        CheckResult { name: "bake equivalence", error: bake_equivalence(rng, seed)?, tolerance: 1e-10 },
        CheckResult { name: "loss identities", error: loss_identities(rng, seed)?, tolerance: 1e-12 },
        CheckResult { name: "full-rank factorizations", error: full_rank(rng, seed)?, tolerance: 1e-8 },
        CheckResult { name: "gated sigma=1 is plain", error: gated_sigma_one(seed)?, tolerance: 1e-9 },
    ])
}
