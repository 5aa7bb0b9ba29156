//! Matching-encoder pretraining and resumable adversarial training.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use ffgan_core::matching::{pretrain_step, MatchingBatch};
use ffgan_core::model::{gan_step, GanBatch, GanOptimizers, NetworkParams, Networks};
use ffgan_core::objectives::LossBreakdown;
use ffgan_core::optim::{Adam, AdamConfig};
use ffgan_core::shapes::Split;
use ffgan_core::text::{Caption, TextEncoder};
use ffgan_core::{Error as ModelError, Graph, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{check_device, hex, RunConfig};
use crate::data::Dataset;
use crate::error::{config_err, io_err, Error, Result};

pub const LOSS_HEADER: &str = "step,epoch,loss_g,loss_d,g0,g1,g2,d0,d1,d2,ca,damsm";
pub const PRETRAIN_HEADER: &str = "epoch,step,loss";
pub const NAN_DUMP: &str = "nan_dump";
pub const DIAGNOSTIC: &str = "diagnostic.txt";

// Disjoint ChaCha stream ranges so shuffles, per-step draws and pretraining
// never share random numbers.
const SHUFFLE_STREAM: u64 = 1 << 32;
const STEP_STREAM: u64 = 2 << 32;
const PRETRAIN_STREAM: u64 = 3 << 32;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Training ids in the order epoch `epoch` visits them.
pub fn epoch_order(seed: u64, epoch: u64, train_ids: &[usize]) -> Vec<usize> {
    let mut ids = train_ids.to_vec();
    ids.shuffle(&mut stream(seed, SHUFFLE_STREAM + epoch));
    ids
}

/// The random stream for global step `step` (1-based).
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    stream(seed, STEP_STREAM + step)
}

/// Digest of the first 32 bytes the stream of `step` will produce.
pub fn rng_digest(seed: u64, step: u64) -> String {
    let mut buf = [0u8; 32];
    step_rng(seed, step).fill_bytes(&mut buf);
    hex(&Sha256::digest(buf))
}

/// Runs the frozen text encoder on a batch: words `[B, L, D_w]`, flattened
/// mask and sentences `[B, D_w]`.
pub fn encode_batch(
    text: &TextEncoder,
    ps: &ParamStore<f32>,
    captions: &[Caption],
) -> (Tensor<f32>, Vec<bool>, Tensor<f32>) {
    let mut g = Graph::new();
    g.freeze(ps);
    let vars = text.forward(&mut g, ps, captions);
    let mask = captions.iter().flat_map(|c| c.mask.iter().copied()).collect();
    (g.value(vars.words).clone(), mask, g.value(vars.sentence).clone())
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub dir: PathBuf,
    pub epoch_losses: Vec<f64>,
}

/// Trains the text and image encoders on the matching loss and writes them
/// as an encoder-only checkpoint.
pub fn pretrain(config: &RunConfig, data: &Dataset) -> Result<PretrainReport> {
    check_device()?;
    let model = config.model.to_model(data.vocab.len());
    let (nets, mut params) = Networks::new::<f32>(model.clone(), config.seed)?;
    let adam = AdamConfig { lr: config.pretrain.lr, ..AdamConfig::default() };
    let mut text_opt = Adam::new(adam, &params.text);
    let mut image_opt = Adam::new(adam, &params.image);
    let train_ids = data.ids(Split::Train);
    let b = config.pretrain.batch_size;
    if train_ids.len() < b {
        return Err(config_err!("{} training records cannot fill a pretraining batch of {b}", train_ids.len()));
    }
    let dir = config.pretrain_dir();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let csv_path = dir.join("pretrain_loss.csv");
    let mut csv = format!("{PRETRAIN_HEADER}\n");
    let mut epoch_losses = Vec::new();
    let res = model.final_resolution();
    let mut step = 0u64;
    for epoch in 0..config.pretrain.epochs as u64 {
        let mut order = train_ids.clone();
        order.shuffle(&mut stream(config.seed, PRETRAIN_STREAM + epoch));
        let mut sum = 0.0;
        let batches = order.len() / b;
        for chunk in order.chunks_exact(b) {
            step += 1;
            let mut rng = stream(config.seed, PRETRAIN_STREAM + (1 << 24) + step);
            let samples = data.load_batch::<f32>(chunk, res, model.max_len)?;
            let images: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
            let captions = samples.iter().map(|s| s.captions[rng.random_range(0..2)].clone()).collect();
            let batch = MatchingBatch { images: Tensor::stack(&images)?, captions };
            let loss = pretrain_step(
                &nets.text,
                &mut params.text,
                &mut text_opt,
                &nets.image,
                &mut params.image,
                &mut image_opt,
                &batch,
                config.pretrain.gamma,
            )?;
            sum += loss;
            csv.push_str(&format!("{epoch},{step},{loss}\n"));
        }
        epoch_losses.push(sum / batches as f64);
    }
    fs::write(&csv_path, csv).map_err(io_err(&csv_path))?;
    checkpoint::save(&dir, config, &data.vocab, &params, None, config.pretrain.epochs as u64, step, "")?;
    Ok(PretrainReport { dir, epoch_losses })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Total steps completed, including those of earlier sessions.
    pub steps: u64,
    pub epochs: u64,
    pub last: Option<LossBreakdown>,
    pub checkpoint: PathBuf,
}

struct RunState {
    nets: Networks,
    params: NetworkParams<f32>,
    opts: GanOptimizers<f32>,
    epoch: u64,
    step: u64,
}

fn fresh_state(config: &RunConfig, data: &Dataset) -> Result<RunState> {
    let dir = config.pretrain_dir();
    if !dir.join(checkpoint::MANIFEST).exists() {
        return Err(config_err!("no pretrained encoders in {} (run pretrain first)", dir.display()));
    }
    let pre = checkpoint::load(&dir)?;
    if pre.vocab != data.vocab {
        return Err(config_err!("pretrained encoders use a different vocabulary than {}", data.dir.display()));
    }
    let (nets, mut params) = Networks::new::<f32>(config.model.to_model(data.vocab.len()), config.seed)?;
    for (dst, src, what) in [(&mut params.text, &pre.params.text, "text"), (&mut params.image, &pre.params.image, "image")] {
        if dst.copy_from(src)? != dst.len() {
            return Err(config_err!("pretrained {what} encoder does not match the model configuration"));
        }
    }
    let opts = GanOptimizers::new(config.train.hyper().adam, &params);
    Ok(RunState { nets, params, opts, epoch: 0, step: 0 })
}

fn resumed_state(config: &RunConfig, ck: Checkpoint) -> Result<RunState> {
    if ck.manifest.config_hash != config.trajectory_hash() {
        return Err(config_err!("{} was produced by a different configuration", ck.dir.display()));
    }
    let opts = ck.opts.ok_or_else(|| config_err!("{} holds no optimizer state", ck.dir.display()))?;
    Ok(RunState { nets: ck.nets, params: ck.params, opts, epoch: ck.manifest.epoch, step: ck.manifest.step })
}

/// Keeps the header and the rows of steps `1..=step`.
fn truncate_csv(path: &Path, step: u64) -> Result<()> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = String::new();
    for (k, line) in text.lines().enumerate() {
        let keep = k == 0 || line.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= step);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(io_err(path))
}

fn loss_row(step: u64, epoch: u64, p: &LossBreakdown) -> String {
    let g = p.generator;
    let d = p.discriminator;
    format!(
        "{step},{epoch},{},{},{},{},{},{},{},{},{},{}\n",
        p.total_generator, p.total_discriminator, g[0], g[1], g[2], d[0], d[1], d[2], p.ca, p.damsm
    )
}

/// Assembles the inputs of global step `step` from the given records.
pub fn build_batch(
    config: &RunConfig,
    data: &Dataset,
    nets: &Networks,
    text_params: &ParamStore<f32>,
    ids: &[usize],
    step: u64,
) -> Result<GanBatch<f32>> {
    let model = &nets.config;
    let res = model.resolutions();
    let mut rng = step_rng(config.seed, step);
    let mut real: Vec<Tensor<f32>> = Vec::with_capacity(3);
    let mut captions = Vec::new();
    for (k, &r) in res.iter().enumerate() {
        let samples = data.load_batch::<f32>(ids, r, model.max_len)?;
        if k == 0 {
            captions = samples.iter().map(|s| s.captions[rng.random_range(0..2)].clone()).collect::<Vec<_>>();
        }
        let imgs: Vec<Tensor<f32>> = samples.into_iter().map(|s| s.image).collect();
        real.push(Tensor::stack(&imgs)?);
    }
    let (words, mask, sentence) = encode_batch(&nets.text, text_params, &captions);
    let b = ids.len();
    let ca_noise = Tensor::randn(&[b, model.ca_dim], &mut rng);
    let z = Tensor::randn(&[b, model.noise_dim], &mut rng);
    let real: [Tensor<f32>; 3] = real.try_into().expect("three stages");
    Ok(GanBatch { words, mask, sentence, real, ca_noise, z })
}

/// Trains (or resumes) the adversarial model, appending one loss row per
/// step and writing a checkpoint after every epoch. A non-finite loss
/// stops the run and dumps the state to `<out_dir>/nan_dump`.
pub fn train(config: &RunConfig, data: &Dataset) -> Result<TrainOutcome> {
    check_device()?;
    let root = config.checkpoint_root();
    let csv_path = config.loss_csv();
    fs::create_dir_all(&config.out_dir).map_err(io_err(&config.out_dir))?;
    let mut state = match checkpoint::latest(&root)? {
        Some(dir) => {
            let s = resumed_state(config, checkpoint::load(&dir)?)?;
            if csv_path.exists() {
                truncate_csv(&csv_path, s.step)?;
            }
            s
        }
        None => fresh_state(config, data)?,
    };
    if !csv_path.exists() || state.step == 0 {
        fs::write(&csv_path, format!("{LOSS_HEADER}\n")).map_err(io_err(&csv_path))?;
    }
    let mut csv = OpenOptions::new().append(true).open(&csv_path).map_err(io_err(&csv_path))?;

    let train_ids = data.ids(Split::Train);
    let b = config.train.batch_size;
    let per_epoch = (train_ids.len() / b) as u64;
    if per_epoch == 0 {
        return Err(config_err!("{} training records cannot fill a batch of {b}", train_ids.len()));
    }
    let hyper = config.train.hyper();
    let limit = if config.train.max_steps == 0 { u64::MAX } else { config.train.max_steps };
    let mut last = None;
    let mut latest_dir = checkpoint::epoch_dir(&root, state.epoch);

    'epochs: while state.epoch < config.train.epochs as u64 {
        let order = epoch_order(config.seed, state.epoch, &train_ids);
        let done_in_epoch = state.step - state.epoch * per_epoch;
        for chunk in order.chunks_exact(b).skip(done_in_epoch as usize) {
            if state.step >= limit {
                break 'epochs;
            }
            let step = state.step + 1;
            let batch = build_batch(config, data, &state.nets, &state.params.text, chunk, step)?;
            match gan_step(&state.nets, &mut state.params, &mut state.opts, &hyper, &batch) {
                Ok(parts) => {
                    csv.write_all(loss_row(step, state.epoch, &parts).as_bytes()).map_err(io_err(&csv_path))?;
                    last = Some(parts);
                    state.step = step;
                }
                Err(ModelError::Numerical(message)) => {
                    csv.flush().map_err(io_err(&csv_path))?;
                    return Err(dump_non_finite(config, data, &state, step, chunk, message));
                }
                Err(e) => return Err(e.into()),
            }
        }
        state.epoch += 1;
        csv.flush().map_err(io_err(&csv_path))?;
        latest_dir = checkpoint::epoch_dir(&root, state.epoch);
        save_state(config, data, &state, &latest_dir)?;
    }
    // a step budget can end mid-epoch; record where to pick up
    if state.step > state.epoch * per_epoch {
        latest_dir = root.join(format!("step_{:08}", state.step));
        save_state(config, data, &state, &latest_dir)?;
    }
    csv.flush().map_err(io_err(&csv_path))?;
    Ok(TrainOutcome { steps: state.step, epochs: state.epoch, last, checkpoint: latest_dir })
}

fn save_state(config: &RunConfig, data: &Dataset, s: &RunState, dir: &Path) -> Result<()> {
    let digest = rng_digest(config.seed, s.step + 1);
    checkpoint::save(dir, config, &data.vocab, &s.params, Some(&s.opts), s.epoch, s.step, &digest)?;
    Ok(())
}

fn dump_non_finite(config: &RunConfig, data: &Dataset, s: &RunState, step: u64, ids: &[usize], message: String) -> Error {
    let dir = config.out_dir.join(NAN_DUMP);
    let written = save_state(config, data, s, &dir).and_then(|_| {
        let path = dir.join(DIAGNOSTIC);
        let report = format!(
            "failing_step = {step}\nepoch = {}\nerror = {message:?}\nrecords = {ids:?}\nparams_finite = {}\n",
            s.epoch,
            s.params.all_finite()
        );
        fs::write(&path, report).map_err(io_err(&path))
    });
    match written {
        Ok(()) => Error::NonFinite { step, message, dump: dir },
        Err(e) => e,
    }
}
