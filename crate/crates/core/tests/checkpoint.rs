use serde_json::json;
use squeeze_tensor::{no_grad, Tensor};
use weight_squeeze::checkpoint::{load_model, save_model, Checkpoint};
use weight_squeeze::{Input, Mode, ModelConfig, ParamStore, TransformerModel};

#[test]
fn tensors_round_trip_bit_exactly() {
    let mut store = ParamStore::new();
    let odd = vec![0.1, -0.0, f64::MIN_POSITIVE, f64::MAX, 1.0 / 3.0, f64::EPSILON];
    store.insert("a.b", Tensor::new(odd, &[2, 3]).unwrap());
    store.insert("scalar", Tensor::scalar(-7.25));
    let ck = Checkpoint::new(json!({"kind": "test", "n": 2}), store.clone());
    let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    assert!(back.tensors.bit_equal(&store));
    assert_eq!(back.meta, ck.meta);
    assert_eq!(back.tensors.names().collect::<Vec<_>>(), vec!["a.b", "scalar"]);
}

#[test]
fn saved_models_reload_with_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = TransformerModel::init(ModelConfig::new(2, 8, 2, 16, 6, 3), 4).unwrap();
    save_model(&m, &path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back.config, m.config);
    assert!(back.params.bit_equal(&m.params));
    let input = Input::from_rows(&[vec![2, 5, 9], vec![2, 1, 15]]).unwrap();
    let (a, b) = no_grad(|| (m.forward(&input, Mode::Eval).unwrap(), back.forward(&input, Mode::Eval).unwrap()));
    assert_eq!(a.logits.data(), b.logits.data());
    let bytes = std::fs::read(&path).unwrap();
    save_model(&back, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}

#[test]
fn models_with_missing_tensors_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = TransformerModel::init(ModelConfig::new(1, 4, 2, 10, 4, 2), 0).unwrap();
    let partial: ParamStore = m.params.iter().skip(1).map(|(n, t)| (n.to_string(), t.clone())).collect();
    Checkpoint::new(json!({"config": m.config}), partial).save(&path).unwrap();
    assert!(load_model(&path).is_err());
}
