//! Shared fixtures: the desk texture set and a desk model trained on it.
//!
//! Training takes minutes, so the trained weights are cached under the cargo
//! test scratch directory, keyed by a hash of every source file that affects
//! them. Any edit to the model, trainer or data generator retrains.
#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use sha2::{Digest, Sha256};
use unetlab::data::{gen_textures, Dataset, TextureClass};
use unetlab::trainer::{load_checkpoint, save_checkpoint, train, TrainConfig, TrainState};
use unetlab::unet::{UNetConfig, UNetModel};

pub const DATA_SEED: u64 = 1;
pub const EVAL_SEED: u64 = 3;
pub const MODEL_SEED: u64 = 0;

pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 200,
        batch_size: 32,
        lr_decay_every: 100,
        seed: 0,
        ..TrainConfig::default()
    }
}

/// The 512-image, 4-class training set.
pub fn desk_data() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| gen_textures(512, 16, 1, &TextureClass::ALL, DATA_SEED).unwrap())
}

/// 128 fresh images from the same generator, for analyses.
pub fn eval_data() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| gen_textures(128, 16, 1, &TextureClass::ALL, EVAL_SEED).unwrap())
}

pub fn untrained_model() -> UNetModel {
    UNetModel::build(UNetConfig::desk(), MODEL_SEED).unwrap()
}

const SOURCES: &[&str] = &[
    include_str!("../../src/unet.rs"),
    include_str!("../../src/trainer.rs"),
    include_str!("../../src/data.rs"),
    include_str!("../../src/seed.rs"),
    include_str!("../../../ndnet/src/tape.rs"),
    include_str!("../../../ndnet/src/kernels.rs"),
    include_str!("../../../ndnet/src/tensor.rs"),
];

fn cache_path() -> PathBuf {
    let mut h = Sha256::new();
    for s in SOURCES {
        h.update(s.as_bytes());
    }
    h.update(serde_json::to_vec(&desk_train_config()).unwrap());
    let key: String = h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect();
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("desk-{key}.ckpt"))
}

/// The trained desk model, from cache when available.
pub fn desk_model() -> &'static UNetModel {
    static MODEL: OnceLock<UNetModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let path = cache_path();
        if let Ok(ck) = load_checkpoint(&path) {
            return ck.model;
        }
        let mut model = untrained_model();
        let mut state = TrainState::new(&model);
        let cfg = desk_train_config();
        train(&mut model, desk_data(), None, &cfg, &mut state).unwrap();
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        save_checkpoint(&tmp, &model, &state, Some(&cfg)).unwrap();
        std::fs::rename(&tmp, &path).unwrap();
        model
    })
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
