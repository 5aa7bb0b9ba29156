//! FID and R-precision of a checkpoint on the test split, using the frozen
//! matching encoders as feature extractors.

use std::path::Path;

use ffgan_core::metrics::{frechet_distance, gaussian_stats, r_precision, RetrievalPool};
use ffgan_core::model::generate_batch;
use ffgan_core::shapes::Split;
use ffgan_core::text::Caption;
use ffgan_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::EvalConfig;
use crate::data::Dataset;
use crate::error::{config_err, Result};
use crate::train::encode_batch;

pub const EVAL_HEADER: &str = "checkpoint,epoch,fid,r_precision,n_samples,pool_size";
const CHUNK: usize = 32;

/// Mean and sample standard deviation over evaluation seeds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Self { mean, std: var.sqrt() }
    }
}

impl std::fmt::Display for Stat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub checkpoint: String,
    pub epoch: u64,
    pub fid: Stat,
    pub r_precision: Stat,
    pub n_samples: usize,
    pub pool_size: usize,
}

impl EvalReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.checkpoint, self.epoch, self.fid.mean, self.r_precision.mean, self.n_samples, self.pool_size
        )
    }

    pub fn summary(&self) -> String {
        format!(
            "{} (epoch {}): FID {}, R-precision {} over {} samples, pool {}",
            self.checkpoint, self.epoch, self.fid, self.r_precision, self.n_samples, self.pool_size
        )
    }
}

/// Per-stage images `[3, R_k, R_k]` for each caption, one noise draw each.
pub fn generate_images(ck: &Checkpoint, captions: &[Caption], rng: &mut ChaCha8Rng) -> Result<[Vec<Tensor<f32>>; 3]> {
    let m = &ck.nets.config;
    let mut out: [Vec<Tensor<f32>>; 3] = Default::default();
    for chunk in captions.chunks(CHUNK) {
        let b = chunk.len();
        let (words, mask, sentence) = encode_batch(&ck.nets.text, &ck.params.text, chunk);
        let noise = Tensor::randn(&[b, m.ca_dim], rng);
        let z = Tensor::randn(&[b, m.noise_dim], rng);
        let images = generate_batch(&ck.nets, &ck.params, &words, &mask, &sentence, Some(&noise), &z);
        for (k, batch) in images.iter().enumerate() {
            out[k].extend((0..b).map(|i| batch.slice_outer(i)));
        }
    }
    Ok(out)
}

fn rows(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    let f = t.dim(1);
    t.to_f64_vec().chunks(f).map(<[f64]>::to_vec).collect()
}

fn sentence_features(ck: &Checkpoint, captions: &[Caption]) -> Vec<Vec<f64>> {
    captions.chunks(CHUNK).flat_map(|chunk| rows(&encode_batch(&ck.nets.text, &ck.params.text, chunk).2)).collect()
}

/// Scores the checkpoint once per evaluation seed. Query `i` uses test
/// record `i mod |test|` with its captions alternating; each retrieval pool
/// holds the query's caption and `pool_size - r` captions of test records
/// with a different scene.
pub fn evaluate(ck: &Checkpoint, data: &Dataset, eval: &EvalConfig) -> Result<EvalReport> {
    let test = data.ids(Split::Test);
    let m = &ck.nets.config;
    let res = m.final_resolution();
    let negatives = eval.pool_size.checked_sub(eval.r).filter(|&k| k > 0).ok_or_else(|| config_err!("pool too small"))?;
    if eval.r != 1 {
        return Err(config_err!("each generated image has one caption; r must be 1"));
    }
    let samples = data.load_batch::<f32>(&test, res, m.max_len)?;
    for s in &samples {
        let others = samples.iter().filter(|o| data.records[o.id].spec != data.records[s.id].spec).count();
        if others < negatives {
            return Err(config_err!("only {others} test records differ from record {}; pools need {negatives}", s.id));
        }
    }
    if eval.n_samples < 2 || samples.len() < 2 {
        return Err(config_err!("need at least two samples and two test records"));
    }
    let real: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
    let real_stats = gaussian_stats(&ck.nets.image.extract_features(&ck.params.image, &real)?)?;
    let all_captions: Vec<Caption> = samples.iter().flat_map(|s| s.captions.iter().cloned()).collect();
    let all_text = sentence_features(ck, &all_captions);
    let query_caption = |i: usize| (i % samples.len()) * 2 + (i / samples.len()) % 2;

    let mut fids = Vec::new();
    let mut rps = Vec::new();
    for &seed in &eval.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let captions: Vec<Caption> = (0..eval.n_samples).map(|i| all_captions[query_caption(i)].clone()).collect();
        let [_, _, images] = generate_images(ck, &captions, &mut rng)?;
        let feats = ck.nets.image.extract_features(&ck.params.image, &images)?;
        fids.push(frechet_distance(&real_stats, &gaussian_stats(&feats)?)?);
        let mut pools = Vec::with_capacity(eval.n_samples);
        for (i, query) in rows(&feats).into_iter().enumerate() {
            let own = i % samples.len();
            let spec = data.records[samples[own].id].spec;
            let mut candidates: Vec<usize> =
                (0..all_captions.len()).filter(|&c| data.records[samples[c / 2].id].spec != spec).collect();
            candidates.shuffle(&mut rng);
            pools.push(RetrievalPool {
                query,
                matched: vec![all_text[query_caption(i)].clone()],
                mismatched: candidates[..negatives].iter().map(|&c| all_text[c].clone()).collect(),
            });
        }
        rps.push(r_precision(&pools, eval.r)?);
    }
    Ok(EvalReport {
        checkpoint: ck.dir.display().to_string(),
        epoch: ck.manifest.epoch,
        fid: Stat::of(&fids),
        r_precision: Stat::of(&rps),
        n_samples: eval.n_samples,
        pool_size: eval.pool_size,
    })
}

/// Writes the header and one row per report.
pub fn write_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut text = format!("{EVAL_HEADER}\n");
    for r in reports {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(crate::error::io_err(path))
}
