use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use squeeze_tensor::{no_grad, Tensor};
use weight_squeeze::model::{first_position_state, ForwardOutput};
use weight_squeeze::objectives::{
    hidden_term, kd_loss, kdeo_loss, mle_loss, simplex_weights, soft_term, HiddenMaps, ObjectiveSpec,
};
use weight_squeeze::params::ParamStore;
use weight_squeeze::{Error, Input, Mode, ModelConfig, TransformerModel};

fn logits(rows: &[[f64; 3]]) -> Tensor {
    Tensor::new(rows.iter().flatten().copied().collect(), &[rows.len(), 3]).unwrap()
}

fn random_logits(rng: &mut ChaCha8Rng, b: usize, c: usize, scale: f64) -> Tensor {
    Tensor::new((0..b * c).map(|_| rng.random_range(-scale..scale)).collect(), &[b, c]).unwrap()
}

/// Plain scalar log-sum-exp evaluation, written out per row.
fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

#[test]
fn mle_of_uniform_logits_is_log_classes() {
    let l = mle_loss(&Tensor::zeros(&[4, 5]), &[0, 1, 2, 4]).unwrap().item();
    assert!((l - 5f64.ln()).abs() < 1e-14);
}

#[test]
fn mle_with_a_huge_margin_vanishes() {
    let l = mle_loss(&logits(&[[100.0, 0.0, 0.0], [0.0, 0.0, 100.0]]), &[0, 2]).unwrap().item();
    assert!(l < 1e-40);
}

#[test]
fn mle_matches_scalar_recomputation() {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let t = random_logits(&mut r, 6, 3, 4.0);
    let labels = [0, 1, 2, 2, 1, 0];
    let want = -labels.iter().enumerate().map(|(i, &y)| log_softmax_row(&t.data()[i * 3..i * 3 + 3])[y]).sum::<f64>() / 6.0;
    assert!((mle_loss(&t, &labels).unwrap().item() - want).abs() < 1e-13);
}

#[test]
fn mle_rejects_labels_out_of_range() {
    assert!(matches!(mle_loss(&Tensor::zeros(&[1, 2]), &[2]), Err(Error::Input(_))));
}

#[test]
fn kd_with_alpha_one_is_mle() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let s = random_logits(&mut r, 5, 3, 10.0);
        let t = random_logits(&mut r, 5, 3, 10.0);
        let labels: Vec<usize> = (0..5).map(|_| r.random_range(0..3)).collect();
        let temp = r.random_range(1.0..10.0);
        let kd = kd_loss(&s, &t, &labels, 1.0, temp).unwrap().item();
        assert!((kd - mle_loss(&s, &labels).unwrap().item()).abs() <= 1e-12);
    }
}

#[test]
fn kd_soft_term_on_itself_is_teacher_entropy() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let s = random_logits(&mut r, 4, 3, 3.0);
    for temp in [1.0, 2.0, 7.0] {
        let kd = kd_loss(&s, &s, &[0, 1, 2, 0], 0.0, temp).unwrap().item();
        let mut entropy = 0.0;
        for i in 0..4 {
            let row: Vec<f64> = s.data()[i * 3..i * 3 + 3].iter().map(|x| x / temp).collect();
            let lp = log_softmax_row(&row);
            entropy -= lp.iter().map(|l| l.exp() * l).sum::<f64>();
        }
        assert!((kd - entropy / 4.0).abs() < 1e-13);
    }
}

#[test]
fn kd_matches_brute_force_at_half_alpha_and_temperature_two() {
    let s = logits(&[[0.3, -1.2, 2.0]]);
    let t = logits(&[[1.5, 0.1, -0.7]]);
    let ls = log_softmax_row(&[0.15, -0.6, 1.0]);
    let lt = log_softmax_row(&[0.75, 0.05, -0.35]);
    let soft: f64 = -lt.iter().zip(&ls).map(|(a, b)| a.exp() * b).sum::<f64>();
    let hard = -log_softmax_row(&[0.3, -1.2, 2.0])[1];
    let want = 0.5 * hard + 0.5 * soft;
    assert!((kd_loss(&s, &t, &[1], 0.5, 2.0).unwrap().item() - want).abs() < 1e-14);
}

#[test]
fn kd_gradient_vanishes_when_student_equals_teacher() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let t = random_logits(&mut r, 4, 3, 2.0);
    let s = t.to_parameter();
    soft_term(&s, &t, 1.0).unwrap().backward().unwrap();
    assert!(s.grad().unwrap().iter().all(|g| g.abs() <= 1e-10));
}

#[test]
fn no_gradient_reaches_teacher_logits() {
    let s = logits(&[[0.1, 0.2, 0.3]]).to_parameter();
    let t = logits(&[[1.0, 0.0, -1.0]]).to_parameter();
    kd_loss(&s, &t, &[2], 0.3, 2.0).unwrap().backward().unwrap();
    assert!(t.grad().is_none());
    assert!(s.grad().is_some());
}

#[test]
fn losses_stay_finite_on_extreme_logits() {
    let s = logits(&[[1e4, -1e4, 0.0], [-1e4, 1e4, 3.0]]);
    let t = logits(&[[-1e4, 1e4, 0.0], [5e3, 0.0, -5e3]]);
    for v in [mle_loss(&s, &[1, 0]).unwrap(), kd_loss(&s, &t, &[1, 0], 0.2, 1.0).unwrap()] {
        assert!(v.item().is_finite());
    }
}

fn outputs(seed: u64) -> (ForwardOutput, ForwardOutput, HiddenMaps) {
    let s = TransformerModel::init(ModelConfig::new(2, 4, 2, 12, 5, 3), seed).unwrap();
    let t = TransformerModel::init(ModelConfig::new(3, 8, 2, 12, 5, 3), seed + 1).unwrap();
    let input = Input::from_rows(&[vec![2, 4, 5, 9], vec![2, 11, 3, 3], vec![2, 7, 7, 1]]).unwrap();
    let maps = HiddenMaps::new(2, 4, 8, seed);
    no_grad(|| (s.forward(&input, Mode::Eval).unwrap(), t.forward(&input, Mode::Eval).unwrap(), maps))
}

#[test]
fn kdeo_without_hidden_term_is_scaled_kd() {
    let (s, t, maps) = outputs(4);
    let labels = [0, 2, 1];
    for (alpha, beta) in [(0.2, 0.8), (0.5, 0.1), (0.05, 0.6)] {
        let eo = kdeo_loss(&s, &t, &labels, &maps, alpha, beta, 0.0, 3.0).unwrap().item();
        let kd = kd_loss(&s.logits, &t.logits, &labels, alpha / (alpha + beta), 3.0).unwrap().item();
        assert!((eo - (alpha + beta) * kd).abs() <= 1e-12);
    }
}

#[test]
fn kdeo_uses_only_position_zero_of_the_first_layers() {
    let (s, t, maps) = outputs(5);
    let labels = [1, 1, 0];
    let base = kdeo_loss(&s, &t, &labels, &maps, 0.2, 0.3, 0.5, 2.0).unwrap().item();
    let mut scrambled = t.clone();
    for (j, h) in scrambled.hidden_states.iter_mut().enumerate() {
        let (b, n, d) = (h.shape()[0], h.shape()[1], h.shape()[2]);
        let data: Vec<f64> = (0..b * n * d)
            .map(|i| if (i / d) % n == 0 && j <= 2 { h.data()[i] } else { 1e3 + i as f64 })
            .collect();
        *h = Tensor::new(data, &[b, n, d]).unwrap();
    }
    let again = kdeo_loss(&s, &scrambled, &labels, &maps, 0.2, 0.3, 0.5, 2.0).unwrap().item();
    assert_eq!(base, again);
    let shallow = TransformerModel::init(ModelConfig::new(1, 8, 2, 12, 5, 3), 0).unwrap();
    let input = Input::from_rows(&[vec![2, 4, 5, 9], vec![2, 11, 3, 3], vec![2, 7, 7, 1]]).unwrap();
    let short = no_grad(|| shallow.forward(&input, Mode::Eval)).unwrap();
    assert!(matches!(kdeo_loss(&s, &short, &labels, &maps, 0.2, 0.3, 0.5, 2.0), Err(Error::Contract(_))));
}

#[test]
fn hidden_term_is_zero_when_maps_align_exactly() {
    let (s, _, maps) = outputs(6);
    let targets: Vec<Tensor> = (1..=2).map(|j| maps.apply(j, &first_position_state(&s, j).unwrap()).unwrap()).collect();
    assert_eq!(hidden_term(&s, &targets, &maps).unwrap().item(), 0.0);
}

#[test]
fn hidden_term_matches_hand_computed_mse() {
    let h0 = Tensor::zeros(&[1, 1, 2]);
    let h1 = Tensor::new(vec![1.0, 2.0], &[1, 1, 2]).unwrap();
    let out = ForwardOutput {
        logits: Tensor::zeros(&[1, 2]),
        hidden_states: vec![h0, h1],
        attentions: vec![],
        pooled: Tensor::zeros(&[1, 2]),
    };
    let mut p = ParamStore::new();
    p.insert("hidden_map.1.weight", Tensor::new(vec![1.0, 0.0, 2.0, 0.5, -1.0, 1.0], &[2, 3]).unwrap());
    p.insert("hidden_map.1.bias", Tensor::new(vec![0.0, 1.0, 0.0], &[3]).unwrap());
    let maps = HiddenMaps::from_params(1, p).unwrap();
    // f(h) = [1 + 1, 0 - 2 + 1, 2 + 2] = [2, -1, 4]
    let target = Tensor::new(vec![1.0, 1.0, 1.0], &[1, 3]).unwrap();
    let want = (1.0 + 4.0 + 9.0) / 3.0;
    assert!((hidden_term(&out, &[target], &maps).unwrap().item() - want).abs() < 1e-15);
}

#[test]
fn simplex_examples() {
    let (a, b, c) = simplex_weights(0.0, 0.0, 0.0);
    for w in [a, b, c] {
        assert!((w - 1.0 / 3.0).abs() < 1e-15);
    }
    let (a, b, c) = simplex_weights(5.0, -5.0, -5.0);
    assert!((a - 0.99991).abs() < 1e-5);
    assert!((a + b + c - 1.0).abs() <= 1e-12);
    let (x, y, z) = simplex_weights(0.4, -2.0, 1.3);
    let (p, q, s) = simplex_weights(1.3, 0.4, -2.0);
    assert_eq!((x, y, z), (q, s, p));
}

#[test]
fn objective_specs_parse_and_validate() {
    let spec: ObjectiveSpec = toml::from_str("kind = \"kd\"\nalpha = 0.5\ntemperature = 2.0").unwrap();
    assert_eq!(spec, ObjectiveSpec::Kd { alpha: 0.5, temperature: 2.0 });
    assert!(ObjectiveSpec::Kd { alpha: 0.5, temperature: 0.5 }.validate().is_err());
    let eo = ObjectiveSpec::kd_eo_from_logits([5.0, -5.0, -5.0], 1.0, None);
    eo.validate().unwrap();
    assert!(eo.uses_hidden_states() && eo.needs_teacher());
}
