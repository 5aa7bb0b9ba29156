//! Stage grids and attention heatmaps as PNG files.

use std::fs;
use std::path::{Path, PathBuf};

use ffgan_core::attention::attention_heatmaps;
use ffgan_core::shapes::{tensor_to_rgb, RgbImage};
use ffgan_core::stages::{forward_pipeline, NoiseVector};
use ffgan_core::text::{encode_caption, tokenize, CaNoise, Caption, Vocabulary};
use ffgan_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{config_err, io_err, Error, Result};
use crate::evaluate::generate_images;

const GAP: usize = 2;

/// Tokenizes free text and rejects words outside the vocabulary.
pub fn parse_caption(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<(Vec<String>, Caption)> {
    let tokens = tokenize(text);
    if let Some(bad) = tokens.iter().find(|t| !vocab.contains(t)) {
        return Err(Error::Lookup(format!("word {bad:?} is not in the vocabulary")));
    }
    if tokens.is_empty() {
        return Err(config_err!("caption {text:?} has no words"));
    }
    let caption = encode_caption(&tokens, vocab, max_len)?;
    Ok((tokens, caption))
}

fn nearest_upscale(img: &RgbImage, size: usize) -> RgbImage {
    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let p = (y * img.size / size) * img.size + x * img.size / size;
            pixels.extend_from_slice(&img.pixels[3 * p..3 * p + 3]);
        }
    }
    RgbImage { size, pixels }
}

fn save_rgb(path: &Path, width: usize, height: usize, pixels: Vec<u8>) -> Result<()> {
    let img = image::RgbImage::from_raw(width as u32, height as u32, pixels).expect("buffer size");
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// One row per caption, one column per stage, every stage upscaled to the
/// final resolution. Returns the `[3, R_k, R_k]` images per caption.
pub fn sample_grid(ck: &Checkpoint, captions: &[String], seed: u64, out: &Path) -> Result<Vec<[Tensor<f32>; 3]>> {
    let max_len = ck.nets.config.max_len;
    let encoded =
        captions.iter().map(|c| parse_caption(c, &ck.vocab, max_len).map(|(_, e)| e)).collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [s0, s1, s2] = generate_images(ck, &encoded, &mut rng)?;
    let size = ck.nets.config.final_resolution();
    let width = 3 * size + 2 * GAP;
    let height = captions.len() * size + captions.len().saturating_sub(1) * GAP;
    let mut canvas = vec![255u8; width * height * 3];
    let mut per_caption = Vec::with_capacity(captions.len());
    for (row, ((a, b), c)) in s0.into_iter().zip(s1).zip(s2).enumerate() {
        for (col, t) in [&a, &b, &c].into_iter().enumerate() {
            let tile = nearest_upscale(&tensor_to_rgb(t), size);
            let (ox, oy) = (col * (size + GAP), row * (size + GAP));
            for y in 0..size {
                let dst = ((oy + y) * width + ox) * 3;
                canvas[dst..dst + size * 3].copy_from_slice(&tile.pixels[y * size * 3..(y + 1) * size * 3]);
            }
        }
        per_caption.push([a, b, c]);
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    save_rgb(out, width, height, canvas)?;
    Ok(per_caption)
}

/// Writes `<stage>_<word index>_<token>.png` for both refinement stages,
/// each heatmap upscaled to that stage's image size, plus `stage<k>.png`.
pub fn dump_attention(ck: &Checkpoint, caption: &str, seed: u64, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let m = &ck.nets.config;
    let (tokens, encoded) = parse_caption(caption, &ck.vocab, m.max_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = NoiseVector::sample(m.noise_dim, &mut rng);
    let noise = CaNoise::Sample(Tensor::randn(&[m.ca_dim], &mut rng));
    let out = forward_pipeline(&ck.nets.text, &ck.params.text, &ck.nets.generator, &ck.params.generator, &encoded, &z, &noise)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut written = Vec::new();
    for stage in &out.stages {
        let rgb = tensor_to_rgb(&stage.image);
        let path = out_dir.join(format!("stage{}.png", stage.stage_index));
        save_rgb(&path, rgb.size, rgb.size, rgb.pixels)?;
        written.push(path);
    }
    for (k, weights) in out.attention.iter().enumerate() {
        let stage = k + 1;
        let size = out.stages[stage].image.dim(1);
        for (word, map) in attention_heatmaps(weights, &encoded, size).into_iter().enumerate() {
            let path = out_dir.join(format!("{stage}_{word}_{}.png", tokens[word]));
            let img = image::GrayImage::from_raw(map.width as u32, map.height as u32, map.pixels).expect("buffer size");
            img.save(&path).map_err(|source| Error::Image { path: path.clone(), source })?;
            written.push(path);
        }
    }
    Ok(written)
}
