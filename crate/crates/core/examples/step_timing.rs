//! Times adversarial training steps at the desk configuration.
//!
//! `cargo run --example step_timing -p ffgan-core -- [channels] [batch] [steps]`

use std::time::Instant;

use ffgan_core::model::{gan_step, GanBatch, GanOptimizers, ModelConfig, Networks, TrainHyper};
use ffgan_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let channels = args.first().copied().unwrap_or(8);
    let b = args.get(1).copied().unwrap_or(16);
    let steps = args.get(2).copied().unwrap_or(5);
    let cfg = ModelConfig { channels, ..ModelConfig::desk(40) };
    let (nets, mut params) = Networks::new::<f32>(cfg.clone(), 1).unwrap();
    let hyper = TrainHyper::default();
    let mut opts = GanOptimizers::new(hyper.adam, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let res = cfg.resolutions();
    let batch = GanBatch {
        words: Tensor::randn(&[b, cfg.max_len, cfg.word_dim], &mut rng),
        mask: (0..b * cfg.max_len).map(|i| i % cfg.max_len < 10).collect(),
        sentence: Tensor::randn(&[b, cfg.word_dim], &mut rng),
        real: res.map(|r| Tensor::uniform(&[b, 3, r, r], 1.0, &mut rng)),
        ca_noise: Tensor::randn(&[b, cfg.ca_dim], &mut rng),
        z: Tensor::randn(&[b, cfg.noise_dim], &mut rng),
    };
    gan_step(&nets, &mut params, &mut opts, &hyper, &batch).unwrap();
    let t = Instant::now();
    for _ in 0..steps {
        gan_step(&nets, &mut params, &mut opts, &hyper, &batch).unwrap();
    }
    let per_step = t.elapsed().as_secs_f64() / steps as f64;
    println!("channels={channels} batch={b}: {:.1} ms/step, {:.0} samples/s", per_step * 1e3, b as f64 / per_step);
}
