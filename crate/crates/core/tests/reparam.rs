use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use squeeze_tensor::{no_grad, Tensor};
use weight_squeeze::checkpoint::model_checkpoint;
use weight_squeeze::config::ParamKind;
use weight_squeeze::factored::TtMatrix;
use weight_squeeze::linalg;
use weight_squeeze::params::ParamStore;
use weight_squeeze::reparam::gated::{BASE_PREFIX, GATE_NAME};
use weight_squeeze::reparam::mapping::{self, Sides, LEFT_PREFIX, RIGHT_PREFIX};
use weight_squeeze::reparam::svd::{factorized_weights, max_svd_rank};
use weight_squeeze::reparam::tt::tt_svd;
use weight_squeeze::reparam::{
    gated_ws_init, svd_factorize, tt_factorize, tt_layout, ws_init, Gate, Student, WsStudent,
};
use weight_squeeze::{Input, Mode, ModelConfig, TransformerModel};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn frob(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            for p in 0..k {
                out[i * m + j] += a[i * k + p] * b[p * m + j];
            }
        }
    }
    out
}

/// One-sided Jacobi rotations on the columns of `a`; returns singular
/// values in descending order.
fn jacobi_singular_values(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut u = a.to_vec();
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..cols {
            for q in p + 1..cols {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..rows {
                    let (x, y) = (u[i * cols + p], u[i * cols + q]);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma.abs() < 1e-300 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let (x, y) = (u[i * cols + p], u[i * cols + q]);
                    u[i * cols + p] = c * x - s * y;
                    u[i * cols + q] = s * x + c * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut s: Vec<f64> = (0..cols).map(|j| (0..rows).map(|i| u[i * cols + j].powi(2)).sum::<f64>().sqrt()).collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s
}

#[test]
fn truncation_error_matches_discarded_singular_values() {
    let mut r = rng(1);
    for trial in 0..5 {
        let a = random(&mut r, 8, 8);
        let sigma = jacobi_singular_values(&a, 8, 8);
        let dec = linalg::svd(&a, 8, 8);
        let (u, v) = dec.truncate(2);
        let approx = matmul(&u, &v, 8, 2, 8);
        let diff: Vec<f64> = a.iter().zip(&approx).map(|(x, y)| x - y).collect();
        let expected = sigma[2..].iter().map(|s| s * s).sum::<f64>().sqrt();
        let rel = (frob(&diff) - expected).abs() / expected;
        assert!(rel <= 1e-6, "trial {trial}: {} vs {expected}", frob(&diff));
    }
}

#[test]
fn rank_one_matrix_is_recovered_at_rank_one() {
    let mut r = rng(2);
    let a = random(&mut r, 5, 1);
    let b = random(&mut r, 1, 7);
    let w = matmul(&a, &b, 5, 1, 7);
    let (u, v) = linalg::svd(&w, 5, 7).truncate(1);
    let back = matmul(&u, &v, 5, 1, 7);
    let diff: Vec<f64> = w.iter().zip(&back).map(|(x, y)| x - y).collect();
    assert!(frob(&diff) / frob(&w) < 1e-12);
}

fn kron(a: &[f64], ar: usize, ac: usize, b: &[f64], br: usize, bc: usize) -> Vec<f64> {
    let (rows, cols) = (ar * br, ac * bc);
    let mut out = vec![0.0; rows * cols];
    for i in 0..ar {
        for j in 0..ac {
            for k in 0..br {
                for l in 0..bc {
                    out[(i * br + k) * cols + j * bc + l] = a[i * ac + j] * b[k * bc + l];
                }
            }
        }
    }
    out
}

#[test]
fn kronecker_product_has_exact_rank_one_train() {
    let mut r = rng(3);
    let layout = tt_layout(16, 81, 1, 4).unwrap();
    assert_eq!(layout.row_factors, vec![2, 2, 2, 2]);
    assert_eq!(layout.col_factors, vec![3, 3, 3, 3]);
    let mut w = vec![1.0];
    let (mut rows, mut cols) = (1, 1);
    for _ in 0..4 {
        let f = random(&mut r, 2, 3);
        w = kron(&w, rows, cols, &f, 2, 3);
        rows *= 2;
        cols *= 3;
    }
    let cores = tt_svd(&w, &layout).unwrap();
    let back = TtMatrix::new(layout, cores).unwrap().reconstruct().unwrap();
    let diff: Vec<f64> = w.iter().zip(back.data()).map(|(x, y)| x - y).collect();
    assert!(frob(&diff) / frob(&w) < 1e-12);
}

fn rel_frob(a: &Tensor, b: &Tensor) -> f64 {
    let diff: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    frob(&diff) / frob(b.data())
}

fn eval_logits(s: &dyn Student, input: &Input) -> Tensor {
    no_grad(|| s.forward(input, Mode::Eval)).unwrap().logits
}

fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_input(r: &mut ChaCha8Rng, cfg: &ModelConfig, batch: usize) -> Input {
    let rows: Vec<Vec<usize>> =
        (0..batch).map(|_| (0..cfg.max_seq_len).map(|_| r.random_range(0..cfg.vocab_size)).collect()).collect();
    Input::from_rows(&rows).unwrap()
}

#[test]
fn full_rank_factorizations_reproduce_the_teacher() {
    let cfg = ModelConfig::new(2, 8, 2, 11, 5, 3);
    let teacher = TransformerModel::init(cfg.clone(), 4).unwrap();
    let svd = svd_factorize(&teacher, max_svd_rank(&cfg)).unwrap();
    let tt = tt_factorize(&teacher, usize::MAX / 2, 4).unwrap();
    let input = random_input(&mut rng(4), &cfg, 6);
    let reference = eval_logits(&teacher, &input);
    for s in [&svd as &dyn Student, &tt] {
        let w = s.resolve().unwrap();
        for (name, _, _) in factorized_weights(&cfg) {
            let dense = w.get(&name).unwrap().to_dense().unwrap();
            assert!(rel_frob(&dense, teacher.params.get(&name).unwrap()) <= 1e-8, "{} {name}", s.label());
        }
        assert!(max_abs(&eval_logits(s, &input), &reference) <= 1e-8);
    }
}

#[test]
fn svd_rank_beyond_smallest_dimension_is_rejected() {
    let cfg = ModelConfig::new(1, 8, 2, 11, 5, 3);
    let teacher = TransformerModel::init(cfg.clone(), 0).unwrap();
    assert!(svd_factorize(&teacher, 0).is_err());
    assert!(svd_factorize(&teacher, 9).is_err());
    assert!(svd_factorize(&teacher, 8).is_ok());
}

fn pair() -> (TransformerModel, ModelConfig) {
    let mut t = ModelConfig::new(2, 6, 2, 10, 5, 2);
    t.ffn_size = 8;
    let mut s = ModelConfig::new(2, 3, 1, 10, 4, 2);
    s.ffn_size = 4;
    (TransformerModel::init(t, 5).unwrap(), s)
}

#[test]
fn ws_shapes_follow_the_bilinear_form() {
    let teacher = TransformerModel::init(ModelConfig::new(1, 512, 8, 30, 8, 2), 0).unwrap();
    let scfg = ModelConfig::new(1, 16, 4, 30, 8, 2);
    let ws = ws_init(&teacher, &scfg, 0).unwrap();
    let p = ws.trainables();
    assert_eq!(p.get("ws.left.layers.0.attn.query.weight").unwrap().shape(), &[16, 512]);
    assert_eq!(p.get("ws.right.layers.0.attn.query.weight").unwrap().shape(), &[512, 16]);
    assert_eq!(p.get("ws.right.layers.0.attn.query.bias").unwrap().shape(), &[512, 16]);
    assert!(!p.contains("ws.left.layers.0.attn.query.bias"));
    let student = ws.materialize().unwrap();
    assert_eq!(student.get("layers.0.attn.query.bias").unwrap().shape(), &[16]);
}

#[test]
fn ws_weight_is_the_brute_force_triple_product() {
    let (teacher, scfg) = pair();
    let ws = ws_init(&teacher, &scfg, 6).unwrap();
    let name = "layers.1.ffn.up.weight";
    let theta = teacher.params.get(name).unwrap();
    assert_eq!(theta.shape(), &[6, 8]);
    let l = ws.trainables().get(&format!("{LEFT_PREFIX}{name}")).unwrap();
    let r = ws.trainables().get(&format!("{RIGHT_PREFIX}{name}")).unwrap();
    assert_eq!((l.shape(), r.shape()), (&[3usize, 6][..], &[8usize, 4][..]));
    let got = ws.materialize().unwrap();
    let got = got.get(name).unwrap();
    for a in 0..3 {
        for b in 0..4 {
            let mut acc = 0.0;
            for n in 0..6 {
                for m in 0..8 {
                    acc += l.data()[a * 6 + n] * theta.data()[n * 8 + m] * r.data()[m * 4 + b];
                }
            }
            assert!((got.data()[a * 4 + b] - acc).abs() < 1e-12);
        }
    }
}

fn equal_width_params(teacher: &TransformerModel, fill: impl Fn(&str, usize, usize) -> Tensor) -> ParamStore {
    let cfg = &teacher.config;
    let mut p = ParamStore::new();
    for m in mapping::mapping_shapes(cfg, cfg) {
        let [r, c] = m.shape;
        p.insert(m.name.clone(), fill(&m.name, r, c));
    }
    for s in cfg.param_specs() {
        if mapping::sides(s.kind) == Sides::Free {
            p.insert(s.name.clone(), teacher.params.get(&s.name).unwrap().clone());
        }
    }
    p
}

#[test]
fn identity_and_zero_mappings() {
    let cfg = ModelConfig::new(1, 4, 2, 9, 5, 2);
    let teacher = TransformerModel::init(cfg.clone(), 7).unwrap();
    let ident = WsStudent::with_params(&teacher, &cfg, equal_width_params(&teacher, |_, r, _| Tensor::eye(r))).unwrap();
    let w = ident.materialize().unwrap();
    for (name, t) in teacher.params.iter() {
        assert_eq!(w.get(name).unwrap().data(), t.data(), "{name}");
    }

    let zero_left = equal_width_params(&teacher, |n, r, c| {
        if n.starts_with(LEFT_PREFIX) { Tensor::zeros(&[r, c]) } else { Tensor::eye(r) }
    });
    let z = WsStudent::with_params(&teacher, &cfg, zero_left).unwrap().materialize().unwrap();
    for spec in cfg.param_specs() {
        if matches!(mapping::sides(spec.kind), Sides::Both | Sides::Left) {
            assert!(z.get(&spec.name).unwrap().data().iter().all(|&x| x == 0.0), "{}", spec.name);
        }
    }
}

#[test]
fn ws_rejects_layer_mismatch_and_wider_students() {
    let (teacher, scfg) = pair();
    let mut deeper = scfg.clone();
    deeper.num_layers = 3;
    assert!(ws_init(&teacher, &deeper, 0).is_err());
    assert!(ws_init(&teacher, &teacher.config, 0).is_err());
}

#[test]
fn teacher_receives_no_gradient() {
    let (teacher, scfg) = pair();
    let ws = ws_init(&teacher, &scfg, 0).unwrap();
    let input = Input::from_rows(&[vec![2, 3, 4], vec![2, 5, 6]]).unwrap();
    let loss = ws.forward(&input, Mode::Eval).unwrap().logits.cross_entropy(&[0, 1]).unwrap();
    loss.backward().unwrap();
    assert!(ws.teacher().params.iter().all(|(_, t)| !t.requires_grad() && t.grad().is_none()));
    assert!(ws.trainables().iter().all(|(_, t)| t.grad().is_some()));
}

#[test]
fn bake_matches_and_has_plain_size() {
    let (teacher, scfg) = pair();
    let ws = ws_init(&teacher, &scfg, 8).unwrap();
    let baked = ws.bake().unwrap();
    assert_eq!(baked.count_parameters().total, scfg.num_parameters());
    assert!(baked.params.names().all(|n| !n.starts_with("ws.")));
    let mut r = rng(8);
    for _ in 0..100 {
        let input = random_input(&mut r, &scfg, 1);
        assert!(max_abs(&eval_logits(&ws, &input), &eval_logits(&baked, &input)) <= 1e-10);
    }
    let again = ws.bake().unwrap();
    assert_eq!(model_checkpoint(&baked).unwrap().to_bytes().unwrap(), model_checkpoint(&again).unwrap().to_bytes().unwrap());
}

#[test]
fn gate_starts_at_sigmoid_of_s0() {
    let (teacher, scfg) = pair();
    let base = TransformerModel::init(scfg, 1).unwrap();
    let g = gated_ws_init(&teacher, &base, Gate::Learned { s0: 2.0 }, 0).unwrap();
    assert!((g.sigma() - 0.8808).abs() < 1e-4);
    assert!(g.trainables().contains(GATE_NAME));
}

#[test]
fn gate_at_one_is_the_base_and_blocks_mapping_gradients() {
    let (teacher, scfg) = pair();
    let base = TransformerModel::init(scfg, 1).unwrap();
    let g = gated_ws_init(&teacher, &base, Gate::Fixed { sigma: 1.0 }, 0).unwrap();
    assert!(!g.trainables().contains(GATE_NAME));
    let w = g.materialize().unwrap();
    for (name, t) in base.params.iter() {
        assert_eq!(w.get(name).unwrap().data(), t.data());
    }
    let input = Input::from_rows(&[vec![2, 3, 4, 1]]).unwrap();
    g.forward(&input, Mode::Eval).unwrap().logits.cross_entropy(&[1]).unwrap().backward().unwrap();
    for (name, t) in g.trainables().iter().filter(|(n, _)| n.starts_with("ws.")) {
        assert!(t.grad().unwrap_or_default().iter().all(|&x| x == 0.0), "{name}");
    }
}

#[test]
fn gate_at_zero_is_plain_weight_squeezing() {
    let (teacher, scfg) = pair();
    let base = TransformerModel::init(scfg.clone(), 1).unwrap();
    let g = gated_ws_init(&teacher, &base, Gate::Fixed { sigma: 0.0 }, 0).unwrap();
    let mut ws_params = ParamStore::new();
    for (n, t) in g.trainables().iter() {
        if n.starts_with("ws.") {
            ws_params.insert(n, t.clone());
        }
    }
    for spec in scfg.param_specs().into_iter().filter(|s| matches!(s.kind, ParamKind::NormGain | ParamKind::NormBias)) {
        ws_params.insert(spec.name.clone(), g.trainables().get(&format!("{BASE_PREFIX}{}", spec.name)).unwrap().clone());
    }
    let ws = WsStudent::with_params(&teacher, &scfg, ws_params).unwrap();
    let (a, b) = (g.materialize().unwrap(), ws.materialize().unwrap());
    for (name, t) in a.iter() {
        assert_eq!(t.data(), b.get(name).unwrap().data(), "{name}");
    }
}

#[test]
fn gated_uses_the_first_layers_of_a_deeper_teacher() {
    let (teacher, scfg) = pair();
    let mut shallow = scfg.clone();
    shallow.num_layers = 1;
    let base = TransformerModel::init(shallow, 1).unwrap();
    let g = gated_ws_init(&teacher, &base, Gate::Learned { s0: 1.0 }, 0).unwrap();
    assert_eq!(g.teacher().config.num_layers, 1);
    assert_eq!(
        g.teacher().params.get("layers.0.attn.query.weight").unwrap().data(),
        teacher.params.get("layers.0.attn.query.weight").unwrap().data()
    );
    let mut wrong = scfg;
    wrong.vocab_size = 11;
    assert!(gated_ws_init(&teacher, &TransformerModel::init(wrong, 0).unwrap(), Gate::Learned { s0: 1.0 }, 0).is_err());
}
