//! Architecture, end-to-end gradient and checkpoint checks of the full network.

mod common;

use common::gradsuite;
use htxc::model::{Checkpoint, Init, Mode, NetworkSpec, ParamRole, SqueezeNet};
use htxc::{RngStream, Tensor};

fn build(size: usize, seed: u64) -> SqueezeNet {
    SqueezeNet::build(NetworkSpec::standard().with_input_size(size), Init::Kaiming, RngStream::new(seed, "init", 0, 0)).unwrap()
}

fn random_input(n: usize, size: usize, stream: RngStream) -> Tensor {
    use rand::Rng;
    let mut r = stream.rng();
    Tensor::from_fn([n, 3, size, size], |_| r.random_range(-1.0f32..1.0))
}

#[test]
fn parameter_count_and_payload() {
    let m = build(224, 0);
    assert_eq!(m.params().learnable_count(), 1_267_400);
    let learnable_bytes: usize = m.params().iter().filter(|p| !p.role.is_buffer()).map(|p| 4 * p.value.numel()).sum();
    assert_eq!(learnable_bytes, 5_069_600);
}

#[test]
fn shape_trace_at_224() {
    let m = build(224, 0);
    let pass = m.infer(&Tensor::zeros([1, 3, 224, 224])).unwrap();
    let shape = |name: &str| pass.trace.iter().find(|(n, _)| n == name).unwrap().1.clone();
    assert_eq!(shape("conv1"), vec![1, 96, 109, 109]);
    assert_eq!(shape("maxpool1"), vec![1, 96, 54, 54]);
    assert_eq!(shape("maxpool2"), vec![1, 256, 27, 27]);
    assert_eq!(shape("maxpool3"), vec![1, 512, 13, 13]);
    assert_eq!(shape("fire8"), vec![1, 512, 13, 13]);
    assert_eq!(shape("pool_concat"), vec![1, 1024]);
    assert_eq!(shape("linear1"), vec![1, 512]);
    assert_eq!(shape("logits"), vec![1, 8]);
}

#[test]
fn kaiming_std_matches_fan_in() {
    let m = build(64, 11);
    for p in m.params().iter().filter(|p| p.role == ParamRole::Weight) {
        let fan_in: usize = p.value.shape()[1..].iter().product();
        let expected = (2.0 / fan_in as f64).sqrt();
        let n = p.value.numel() as f64;
        let mean = p.value.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let var = p.value.data().iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
        let rel = (var.sqrt() - expected).abs() / expected;
        assert!(rel < 0.2, "{}: std {} vs {expected}", p.name, var.sqrt());
    }
    for p in m.params().iter().filter(|p| p.role == ParamRole::Bias) {
        assert!(p.value.data().iter().all(|&v| v == 0.0), "{}", p.name);
    }
}

#[test]
fn end_to_end_probe_set_matches_finite_differences() {
    gradsuite::end_to_end_probe_set_matches_finite_differences();
}

#[test]
fn early_layer_gradients_agree_with_finite_differences() {
    gradsuite::early_layer_gradients_agree_with_finite_differences();
}

#[test]
fn logit_shift_leaves_probabilities_unchanged() {
    let m = build(64, 2);
    let x = random_input(3, 64, RngStream::new(2, "input", 0, 0));
    let before = m.predict(&x).unwrap();
    for row in before.data().chunks(8) {
        assert!((row.iter().map(|&p| f64::from(p)).sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let mut shifted = m.clone();
    let idx = shifted.params().index_of("head.linear2.bias").unwrap();
    shifted.params_mut().get_mut(idx).value.data_mut().iter_mut().for_each(|b| *b += 7.5);
    let after = shifted.predict(&x).unwrap();
    for (a, b) in before.data().iter().zip(after.data()) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn evaluation_is_deterministic() {
    let m = build(64, 3);
    let x = random_input(2, 64, RngStream::new(3, "input", 0, 0));
    assert_eq!(m.predict(&x).unwrap(), m.predict(&x).unwrap());
    assert_eq!(m.predict(&x).unwrap(), m.clone().predict(&x).unwrap());
}

#[test]
fn training_pass_updates_running_statistics_of_unfrozen_layers_only() {
    let mut m = build(64, 4);
    let x = random_input(4, 64, RngStream::new(4, "input", 0, 0));
    m.set_trainable(&[1, 2, 3]).unwrap();
    let before = m.params().clone();
    m.forward(&x, Mode::Train(RngStream::new(4, "dropout", 0, 0))).unwrap();
    assert_eq!(m.params(), &before);
    m.set_trainable(&[4]).unwrap();
    m.forward(&x, Mode::Train(RngStream::new(4, "dropout", 0, 0))).unwrap();
    let mean = m.params().by_name("head.bn1.running_mean").unwrap();
    assert_ne!(mean.value, before.by_name("head.bn1.running_mean").unwrap().value);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let m = build(64, 5);
    let bytes = Checkpoint::from_model(&m).to_bytes();
    let restored = Checkpoint::from_bytes(&bytes).unwrap().to_model().unwrap();
    assert_eq!(restored.params(), m.params());
    assert_eq!(Checkpoint::from_model(&restored).to_bytes(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.htxc");
    Checkpoint::from_model(&m).save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(Checkpoint::load(&path).unwrap().to_bytes(), bytes);
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let m = build(64, 6);
    let mut bytes = Checkpoint::from_model(&m).to_bytes();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    assert!(Checkpoint::from_bytes(&bytes).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
    assert!(Checkpoint::from_bytes(b"NOPE").is_err());
}

#[test]
fn pretrained_init_replaces_backbone_only() {
    let donor = build(64, 7);
    let ckpt = Checkpoint::from_model(&donor);
    let m = SqueezeNet::build(NetworkSpec::standard().with_input_size(64), Init::Pretrained(&ckpt), RngStream::new(8, "init", 0, 0)).unwrap();
    let fresh = build(64, 8);
    for p in m.params().iter() {
        let expect = if p.name.starts_with("backbone.") { donor.params() } else { fresh.params() };
        assert_eq!(p.value, expect.by_name(&p.name).unwrap().value, "{}", p.name);
    }

    let mut partial = ckpt.clone();
    partial.tensors.retain(|(n, _)| n != "backbone.fire3.squeeze.weight");
    assert!(SqueezeNet::build(NetworkSpec::standard().with_input_size(64), Init::Pretrained(&partial), RngStream::new(8, "init", 0, 0)).is_err());
}
