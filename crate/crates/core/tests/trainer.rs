use std::path::Path;

use ndnet::Tensor;
use proptest::prelude::*;
use unetlab::data::{gen_textures, SigmaRange, TextureClass};
use unetlab::trainer::{
    adam_step, decode_checkpoint, encode_checkpoint, load_checkpoint, loss_and_grad, save_checkpoint, train,
    AdamParams, AdamState, HeldOut, TrainConfig, TrainState,
};
use unetlab::unet::{UNetConfig, UNetModel};

fn tiny_config() -> UNetConfig {
    UNetConfig {
        in_channels: 1,
        base_channels: 4,
        encoder_blocks: 1,
        layers_per_encoder: 1,
        layers_middle: 1,
        layers_per_decoder: 1,
        kernel_size: 3,
        image_size: 8,
    }
}

fn tiny_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        lr_init: 3e-3,
        lr_decay_every: 3,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn adam_first_step_moves_each_coordinate_by_lr() {
    // With zero moments the bias-corrected update is lr·g/(|g| + eps).
    let mut p = vec![Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap()];
    let g = vec![Tensor::new(vec![4], vec![0.3, -5.0, 1e-2, -7e-3]).unwrap()];
    let mut st = AdamState::new(&p);
    adam_step(&mut p, &g, &mut st, 0.01, &AdamParams::default()).unwrap();
    let want = [0.99, -1.99, 0.49, 3.01];
    for (a, b) in p[0].data().iter().zip(want) {
        assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
    }
    assert_eq!(st.step, 1);
}

#[test]
fn adam_minimizes_a_quadratic() {
    // f(p) = Σ a_i (p_i − c_i)², minimum at c.
    let a = [1.0f64, 10.0, 0.1, 3.0];
    let c = [0.7f64, -1.3, 2.0, 0.0];
    let mut p = vec![Tensor::zeros(&[4])];
    let mut st = AdamState::new(&p);
    for t in 0..4000 {
        let g: Vec<f32> = p[0]
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (2.0 * a[i] * (v as f64 - c[i])) as f32)
            .collect();
        let lr = 0.05 * 0.997f64.powi(t);
        adam_step(&mut p, &[Tensor::new(vec![4], g).unwrap()], &mut st, lr, &AdamParams::default()).unwrap();
    }
    for (v, want) in p[0].data().iter().zip(c) {
        assert!((*v as f64 - want).abs() < 1e-4, "{v} vs {want}");
    }
}

#[test]
fn adam_rejects_mismatched_inputs() {
    let mut p = vec![Tensor::zeros(&[3])];
    let mut st = AdamState::new(&p);
    assert!(adam_step(&mut p, &[Tensor::zeros(&[2])], &mut st, 0.1, &AdamParams::default()).is_err());
    assert!(adam_step(&mut p, &[], &mut st, 0.1, &AdamParams::default()).is_err());
}

#[test]
fn learning_rate_halves_on_schedule() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.lr_at(0), 1e-3);
    assert_eq!(cfg.lr_at(99), 1e-3);
    assert_eq!(cfg.lr_at(100), 5e-4);
    assert_eq!(cfg.lr_at(199), 5e-4);
    assert_eq!(cfg.lr_at(200), 2.5e-4);
}

#[test]
fn loss_gradient_matches_a_finite_difference() {
    let model = UNetModel::build(tiny_config(), 3).unwrap();
    let noisy = Tensor::from_fn(&[2, 1, 8, 8], |i| ((i * 7) % 11) as f32 / 11.0);
    let target = Tensor::from_fn(&[2, 1, 8, 8], |i| ((i * 3) % 5) as f32 / 20.0 - 0.1);
    let (l0, grads) = loss_and_grad(&model, &noisy, &target).unwrap();
    // The head bias is smooth in the loss; its derivative is exact up to f32.
    let last = model.parameters().len() - 1;
    let h = 1e-2f32;
    let shifted = |d: f32| {
        let mut m = model.clone();
        m.parameters_mut()[last].data_mut()[0] += d;
        loss_and_grad(&m, &noisy, &target).unwrap().0
    };
    let fd = (shifted(h) - shifted(-h)) / (2.0 * h as f64);
    let g = grads[last].data()[0] as f64;
    assert!((fd - g).abs() < 1e-3 * g.abs().max(1.0), "fd {fd} tape {g} (loss {l0})");
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let data = gen_textures(16, 8, 1, &TextureClass::ALL, 1).unwrap();
    let mut model = UNetModel::build(tiny_config(), 0).unwrap();
    let mut state = TrainState::new(&model);
    let cfg = tiny_train(2);
    train(&mut model, &data, None, &cfg, &mut state).unwrap();
    let bytes = encode_checkpoint(&model, &state, Some(&cfg)).unwrap();
    let ck = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
    assert_eq!(ck.model.parameters(), model.parameters());
    assert_eq!(ck.state, state);
    assert_eq!(ck.train_config.as_ref(), Some(&cfg));
    assert_eq!(encode_checkpoint(&ck.model, &ck.state, ck.train_config.as_ref()).unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &model, &state, Some(&cfg)).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(load_checkpoint(&path).unwrap().model.parameters(), model.parameters());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let model = UNetModel::build(tiny_config(), 0).unwrap();
    let state = TrainState::new(&model);
    let bytes = encode_checkpoint(&model, &state, None).unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(decode_checkpoint(&bad_magic, Path::new("a")).is_err());
    assert!(decode_checkpoint(&bytes[..bytes.len() - 4], Path::new("b")).is_err());
    assert!(decode_checkpoint(&bytes[..20], Path::new("c")).is_err());
    assert!(load_checkpoint(Path::new("/nonexistent/x.ckpt")).is_err());
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let data = gen_textures(24, 8, 1, &TextureClass::ALL, 2).unwrap();
    let cfg = tiny_train(5);

    let mut straight = UNetModel::build(tiny_config(), 1).unwrap();
    let mut s1 = TrainState::new(&straight);
    train(&mut straight, &data, None, &cfg, &mut s1).unwrap();

    let mut first = UNetModel::build(tiny_config(), 1).unwrap();
    let mut s2 = TrainState::new(&first);
    train(&mut first, &data, None, &TrainConfig { epochs: 2, ..cfg.clone() }, &mut s2).unwrap();
    let ck = decode_checkpoint(&encode_checkpoint(&first, &s2, Some(&cfg)).unwrap(), Path::new("mem")).unwrap();
    let (mut resumed, mut s3) = (ck.model, ck.state);
    train(&mut resumed, &data, None, &cfg, &mut s3).unwrap();

    assert_eq!(resumed.parameters(), straight.parameters());
    assert_eq!(s3, s1);
}

#[test]
fn identity_baseline_matches_expected_noise_energy() {
    let data = gen_textures(512, 8, 1, &TextureClass::ALL, 3).unwrap();
    let range = SigmaRange::default();
    let held = HeldOut::new(&data, &range, 9).unwrap();
    let expected = 64.0 * range.mean_sigma_sq();
    assert!((held.identity_loss() / expected - 1.0).abs() < 0.1);
}

#[test]
fn training_beats_the_identity_estimator() {
    let data = gen_textures(128, 8, 1, &TextureClass::ALL, 4).unwrap();
    let held_data = gen_textures(64, 8, 1, &TextureClass::ALL, 40).unwrap();
    let held = HeldOut::new(&held_data, &SigmaRange::default(), 1).unwrap();
    let mut model = UNetModel::build(tiny_config(), 2).unwrap();
    let mut state = TrainState::new(&model);
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 16,
        lr_init: 3e-3,
        lr_decay_every: 20,
        seed: 2,
        ..TrainConfig::default()
    };
    train(&mut model, &data, Some(&held), &cfg, &mut state).unwrap();
    let last = state.log.last().unwrap();
    let identity = held.identity_loss();
    assert!(last.heldout_loss.unwrap() < 0.7 * identity, "{last:?} vs identity {identity}");
    assert!(last.train_loss < state.log[0].train_loss);
}

#[test]
fn shape_mismatch_is_reported() {
    let data = gen_textures(8, 16, 1, &TextureClass::ALL, 1).unwrap();
    let mut model = UNetModel::build(tiny_config(), 0).unwrap();
    let mut state = TrainState::new(&model);
    assert!(train(&mut model, &data, None, &tiny_train(1), &mut state).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lr_never_increases(init in 1e-5f64..1e-1, factor in 1.0f64..4.0, every in 1usize..50, e in 0usize..500) {
        let cfg = TrainConfig { lr_init: init, lr_decay_factor: factor, lr_decay_every: every, ..TrainConfig::default() };
        prop_assert!(cfg.lr_at(e + 1) <= cfg.lr_at(e));
        prop_assert!(cfg.lr_at(e) <= init);
    }

    #[test]
    fn adam_step_size_is_bounded_by_lr(g in prop::collection::vec(-100.0f32..100.0, 1..8), lr in 1e-4f64..1e-1) {
        let n = g.len();
        let mut p = vec![Tensor::zeros(&[n])];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::new(vec![n], g).unwrap()], &mut st, lr, &AdamParams::default()).unwrap();
        for v in p[0].data() {
            prop_assert!((*v as f64).abs() <= lr * (1.0 + 1e-5));
        }
    }
}
