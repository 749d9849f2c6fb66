use squeeze_tensor::Tensor;
use weight_squeeze::data::{synth_task, Example, SynthKind};
use weight_squeeze::objectives::ObjectiveSpec;
use weight_squeeze::optim::{lr_schedule, Adam, AdamConfig};
use weight_squeeze::reparam::gated::BASE_PREFIX;
use weight_squeeze::reparam::{gated_ws_init, ws_init, Gate, Student};
use weight_squeeze::trainer::{accuracy, train, TrainConfig, TrainData};
use weight_squeeze::{Error, ModelConfig, ParamStore, TransformerModel};

#[test]
fn schedule_examples() {
    assert_eq!(lr_schedule(0, 1e-3, 100, 1100), 0.0);
    assert!((lr_schedule(50, 1e-3, 100, 1100) - 5e-4).abs() < 1e-18);
    assert_eq!(lr_schedule(100, 1e-3, 100, 1100), 1e-3);
    assert!((lr_schedule(600, 1e-3, 100, 1100) - 5e-4).abs() < 1e-18);
    assert_eq!(lr_schedule(1100, 1e-3, 100, 1100), 0.0);
}

#[test]
fn schedule_is_monotone_on_each_side_of_warmup() {
    let lrs: Vec<f64> = (0..=300).map(|s| lr_schedule(s, 2e-4, 40, 300)).collect();
    assert!(lrs[..=40].windows(2).all(|w| w[0] <= w[1]));
    assert!(lrs[40..].windows(2).all(|w| w[0] >= w[1]));
}

fn one_param(values: Vec<f64>, grad_from: impl Fn(&Tensor) -> Tensor) -> ParamStore {
    let n = values.len();
    let p = Tensor::parameter(values, &[n]).unwrap();
    grad_from(&p).backward().unwrap();
    let mut store = ParamStore::new();
    store.insert("w", p);
    store
}

#[test]
fn first_adam_step_moves_each_coordinate_by_lr() {
    // loss = sum(w * c) so the gradient is c.
    let c = Tensor::new(vec![3.0, -0.5, 1e-3], &[3]).unwrap();
    let mut store = one_param(vec![1.0, 2.0, 3.0], |p| p.mul(&c).unwrap().sum());
    let mut adam = Adam::new(AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-12 });
    adam.begin_step();
    adam.update(&mut store, 0.01).unwrap();
    let w = store.get("w").unwrap().to_vec();
    for (x, want) in w.iter().zip([0.99, 2.01, 2.99]) {
        assert!((x - want).abs() < 1e-8, "{x} vs {want}");
    }
}

#[test]
fn zero_gradient_leaves_parameters_unchanged() {
    let mut store = one_param(vec![1.5, -2.0], |p| p.scale(0.0).sum());
    let mut adam = Adam::new(AdamConfig::default());
    adam.begin_step();
    adam.update(&mut store, 0.1).unwrap();
    assert_eq!(store.get("w").unwrap().to_vec(), vec![1.5, -2.0]);
}

fn separable(n: usize) -> Vec<Example> {
    (0..n).map(|i| Example { ids: vec![2, 4 + i % 2, 6], label: i % 2 }).collect()
}

fn small() -> ModelConfig {
    ModelConfig::new(1, 8, 2, 10, 4, 2)
}

fn cfg(steps: usize, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::new(steps, seed);
    c.batch_size = 8;
    c.learning_rate = 1e-2;
    c.eval_every = steps;
    c
}

#[test]
fn separable_task_reaches_full_train_accuracy() {
    let data = separable(32);
    let mut m = TransformerModel::init(small(), 0).unwrap();
    let mut c = cfg(50, 0);
    c.attn_dropout = 0.0;
    c.hidden_dropout = 0.0;
    train(&mut m, TrainData { train: &data, dev: &data }, &ObjectiveSpec::Mle, &c, None).unwrap();
    assert_eq!(accuracy(&m, &data, 64).unwrap(), 1.0);
}

#[test]
fn early_loss_decreases_on_average() {
    let data = separable(64);
    let (mut first, mut last) = (0.0, 0.0);
    for seed in 0..5 {
        let mut m = TransformerModel::init(small(), seed).unwrap();
        let mut c = cfg(10, seed);
        c.learning_rate = 3e-3;
        let r = train(&mut m, TrainData { train: &data, dev: &data }, &ObjectiveSpec::Mle, &c, None).unwrap().report;
        first += r.step_losses[0];
        last += r.step_losses[9];
    }
    assert!(last < first, "{last} >= {first}");
}

#[test]
fn same_seed_gives_identical_runs() {
    let data = synth_task(SynthKind::Keyword, 48, 16, 3).unwrap();
    let run = || {
        let mut m = TransformerModel::init(ModelConfig::new(1, 8, 2, 16, 12, 2), 5).unwrap();
        let r = train(&mut m, TrainData { train: &data, dev: &data }, &ObjectiveSpec::Mle, &cfg(12, 9), None)
            .unwrap()
            .report;
        (r.step_losses, m.params)
    };
    let (la, pa) = run();
    let (lb, pb) = run();
    assert_eq!(la, lb);
    assert!(pa.bit_equal(&pb));
}

#[test]
fn best_checkpoint_is_restored() {
    let data = synth_task(SynthKind::Keyword, 48, 16, 4).unwrap();
    let mut m = TransformerModel::init(ModelConfig::new(1, 8, 2, 16, 12, 2), 6).unwrap();
    let mut c = cfg(20, 1);
    c.eval_every = 5;
    let report = train(&mut m, TrainData { train: &data, dev: &data }, &ObjectiveSpec::Mle, &c, None).unwrap().report;
    let best = report.evals.iter().map(|e| e.dev_accuracy).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(report.best_dev_accuracy, best);
    assert_eq!(accuracy(&m, &data, 64).unwrap(), best);
    assert_eq!(report.evals[0].step, 0);
}

fn teacher_and_base() -> (TransformerModel, TransformerModel) {
    let t = TransformerModel::init(ModelConfig::new(2, 8, 2, 16, 12, 2), 1).unwrap();
    let s = TransformerModel::init(ModelConfig::new(2, 4, 2, 16, 12, 2), 2).unwrap();
    (t, s)
}

#[test]
fn ws_training_moves_only_its_trainables() {
    let (teacher, base) = teacher_and_base();
    let before = teacher.params.clone();
    let data = synth_task(SynthKind::Keyword, 32, 16, 0).unwrap();
    let mut ws = ws_init(&teacher, &base.config, 0).unwrap();
    let start = ws.trainables().clone();
    let spec = ObjectiveSpec::Kd { alpha: 0.5, temperature: 2.0 };
    let mut c = cfg(5, 0);
    c.eval_every = 1;
    let report = train(&mut ws, TrainData { train: &data, dev: &data }, &spec, &c, Some(&teacher)).unwrap().report;
    assert!(teacher.params.bit_equal(&before));
    assert_eq!(ws.trainables().names().collect::<Vec<_>>(), start.names().collect::<Vec<_>>());
    // The restored checkpoint is the initial one exactly when step 0 was best.
    assert_eq!(ws.trainables().bit_equal(&start), report.best_step == 0);
}

#[test]
fn gated_with_closed_gate_leaves_mappings_untouched() {
    let (teacher, base) = teacher_and_base();
    let data = synth_task(SynthKind::Keyword, 32, 16, 0).unwrap();
    let mut g = gated_ws_init(&teacher, &base, Gate::Fixed { sigma: 1.0 }, 0).unwrap();
    let start = g.trainables().clone();
    let mut c = cfg(5, 0);
    c.eval_every = 1;
    train(&mut g, TrainData { train: &data, dev: &data }, &ObjectiveSpec::Mle, &c, None).unwrap();
    let mut base_moved = false;
    for (name, t) in g.trainables().iter() {
        let old = start.get(name).unwrap();
        if name.starts_with(BASE_PREFIX) {
            base_moved |= t.data() != old.data();
        } else {
            assert_eq!(t.data(), old.data(), "{name} moved");
        }
    }
    assert!(base_moved);
}

#[test]
fn distillation_without_a_teacher_is_a_config_error() {
    let data = separable(8);
    let mut m = TransformerModel::init(small(), 0).unwrap();
    let spec = ObjectiveSpec::Kd { alpha: 0.5, temperature: 2.0 };
    let err = train(&mut m, TrainData { train: &data, dev: &data }, &spec, &cfg(2, 0), None);
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn invalid_train_configs_are_rejected() {
    let data = separable(8);
    let mut m = TransformerModel::init(small(), 0).unwrap();
    let mut c = cfg(2, 0);
    c.warmup_steps = 3;
    assert!(matches!(
        train(&mut m, TrainData { train: &data, dev: &data }, &ObjectiveSpec::Mle, &c, None),
        Err(Error::Config(_))
    ));
    assert!(train(&mut m, TrainData { train: &[], dev: &data }, &ObjectiveSpec::Mle, &cfg(2, 0), None).is_err());
}
