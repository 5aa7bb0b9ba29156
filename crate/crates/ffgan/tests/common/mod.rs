#![allow(dead_code)]

use std::path::Path;

use ffgan::data::{generate_dataset, Dataset};
use ffgan::RunConfig;

/// A model small enough to train for a few epochs in seconds.
pub fn tiny_config(root: &Path, n: usize) -> RunConfig {
    let overrides: Vec<String> = [
        format!("out_dir={:?}", root.join("run").display().to_string()),
        format!("data.dir={:?}", root.join("data").display().to_string()),
        format!("data.n={n}"),
        "model.embed_dim=4".into(),
        "model.word_dim=8".into(),
        "model.ca_dim=4".into(),
        "model.noise_dim=4".into(),
        "model.channels=2".into(),
        "model.disc_channels=2".into(),
        "model.encoder_width=2".into(),
        "model.base_resolution=8".into(),
        "model.residual_blocks=1".into(),
        "pretrain.epochs=1".into(),
        "pretrain.batch_size=8".into(),
        "train.epochs=1".into(),
        "train.batch_size=8".into(),
        "eval.n_samples=20".into(),
        "eval.pool_size=5".into(),
        "eval.seeds=[0, 1]".into(),
    ]
    .into();
    RunConfig::load(None, &overrides).expect("tiny config")
}

/// Generates the corpus and pretrains the encoders.
pub fn prepared(root: &Path, n: usize) -> (RunConfig, Dataset) {
    let config = tiny_config(root, n);
    let data = generate_dataset(config.data.n, config.data.seed, &config.data.dir).expect("dataset");
    ffgan::train::pretrain(&config, &data).expect("pretrain");
    (config, data)
}
