//! Self-contained checkpoint directories: every network's parameters, the
//! optimizer moments, the run configuration, the vocabulary and a manifest
//! with per-file digests.

use std::fs;
use std::path::{Path, PathBuf};

use ffgan_core::model::{GanOptimizers, NetworkParams, Networks, NETWORK_NAMES};
use ffgan_core::optim::Adam;
use ffgan_core::text::Vocabulary;
use ffgan_core::ParamStore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex, RunConfig};
use crate::data::VOCAB;
use crate::error::{config_err, io_err, Error, Result};

pub const MANIFEST: &str = "manifest.toml";
pub const CONFIG: &str = "config.toml";
const OPT_NAMES: [&str; 6] = ["adam_g0", "adam_g1", "adam_g2", "adam_d0", "adam_d1", "adam_d2"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    /// Completed epochs.
    pub epoch: u64,
    /// Completed training steps.
    pub step: u64,
    pub seed: u64,
    pub vocab_size: usize,
    pub config_hash: String,
    /// Digest of the random stream the next step will draw from.
    pub rng_digest: String,
    pub files: Vec<FileEntry>,
}

/// Everything needed to sample from, evaluate or resume a run.
#[derive(Debug)]
pub struct Checkpoint {
    pub dir: PathBuf,
    pub manifest: CheckpointManifest,
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub nets: Networks,
    pub params: NetworkParams<f32>,
    /// Absent for encoder-only checkpoints.
    pub opts: Option<GanOptimizers<f32>>,
}

fn sha(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<FileEntry> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(io_err(&path))?;
    Ok(FileEntry { name: name.to_string(), sha256: sha(bytes) })
}

fn read(dir: &Path, entry: &FileEntry) -> Result<Vec<u8>> {
    let path = dir.join(&entry.name);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    if sha(&bytes) != entry.sha256 {
        return Err(config_err!("{} does not match its recorded digest", path.display()));
    }
    Ok(bytes)
}

/// Writes a checkpoint into `dir` (created if needed), replacing any
/// previous contents with the same names.
#[allow(clippy::too_many_arguments)]
pub fn save(
    dir: &Path,
    config: &RunConfig,
    vocab: &Vocabulary,
    params: &NetworkParams<f32>,
    opts: Option<&GanOptimizers<f32>>,
    epoch: u64,
    step: u64,
    rng_digest: &str,
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut files = Vec::new();
    for (name, ps) in NETWORK_NAMES.iter().zip(params.stores()) {
        files.push(write(dir, &format!("{name}.bin"), &ps.to_bytes())?);
    }
    if let Some(o) = opts {
        let all = o.generator.iter().chain(&o.discriminators);
        for (name, adam) in OPT_NAMES.iter().zip(all) {
            files.push(write(dir, &format!("{name}.bin"), &adam.to_bytes())?);
        }
    }
    files.push(write(dir, CONFIG, config.to_toml().as_bytes())?);
    files.push(write(dir, VOCAB, vocab.to_tsv().as_bytes())?);
    let manifest = CheckpointManifest {
        epoch,
        step,
        seed: config.seed,
        vocab_size: vocab.len(),
        config_hash: config.trajectory_hash(),
        rng_digest: rng_digest.to_string(),
        files,
    };
    let text = toml::to_string(&manifest).expect("manifest serializes");
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok(toml::from_str(&text)?)
}

fn restore(target: &mut ParamStore<f32>, bytes: &[u8], what: &str) -> Result<()> {
    let saved = ParamStore::<f32>::from_bytes(bytes)?;
    let copied = target.copy_from(&saved)?;
    if copied != target.len() || saved.len() != target.len() {
        return Err(config_err!("{what}: saved parameters do not match the configured architecture"));
    }
    Ok(())
}

/// Loads and verifies a checkpoint written by [`save`].
pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let entry = |name: &str| -> Result<&FileEntry> {
        manifest
            .files
            .iter()
            .find(|f| f.name == name)
            .ok_or_else(|| Error::Lookup(format!("{} lists no {name}", dir.join(MANIFEST).display())))
    };
    let config_text = String::from_utf8(read(dir, entry(CONFIG)?)?).map_err(|_| config_err!("config is not utf-8"))?;
    let config: RunConfig = toml::from_str(&config_text)?;
    if config.trajectory_hash() != manifest.config_hash {
        return Err(config_err!("{}: configuration hash mismatch", dir.display()));
    }
    let vocab_text = String::from_utf8(read(dir, entry(VOCAB)?)?).map_err(|_| config_err!("vocabulary is not utf-8"))?;
    let vocab = Vocabulary::from_tsv(&vocab_text)?;
    if vocab.len() != manifest.vocab_size {
        return Err(config_err!("vocabulary has {} entries, manifest says {}", vocab.len(), manifest.vocab_size));
    }
    let (nets, mut params) = Networks::new::<f32>(config.model.to_model(vocab.len()), config.seed)?;
    for (name, ps) in NETWORK_NAMES.iter().zip(params.stores_mut()) {
        restore(ps, &read(dir, entry(&format!("{name}.bin"))?)?, name)?;
    }
    let opts = if manifest.files.iter().any(|f| f.name == "adam_g0.bin") {
        let adam = config.train.hyper().adam;
        let load_opt = |k: usize, ps: &ParamStore<f32>| -> Result<Adam<f32>> {
            Ok(Adam::from_bytes(adam, ps, &read(dir, entry(&format!("{}.bin", OPT_NAMES[k]))?)?)?)
        };
        let g = &params.generator;
        let d = &params.discriminators;
        Some(GanOptimizers {
            generator: [load_opt(0, &g[0])?, load_opt(1, &g[1])?, load_opt(2, &g[2])?],
            discriminators: [load_opt(3, &d[0])?, load_opt(4, &d[1])?, load_opt(5, &d[2])?],
        })
    } else {
        None
    };
    Ok(Checkpoint { dir: dir.to_path_buf(), manifest, config, vocab, nets, params, opts })
}

/// Name of the checkpoint written after `epoch` completed epochs.
pub fn epoch_dir(root: &Path, epoch: u64) -> PathBuf {
    root.join(format!("epoch_{epoch:04}"))
}

/// The checkpoint under `root` with the most completed steps, if any.
pub fn latest(root: &Path) -> Result<Option<PathBuf>> {
    if !root.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let path = entry.map_err(io_err(root))?.path();
        if !path.join(MANIFEST).exists() {
            continue;
        }
        let step = read_manifest(&path)?.step;
        if best.as_ref().is_none_or(|(s, _)| step > *s) {
            best = Some((step, path));
        }
    }
    Ok(best.map(|(_, p)| p))
}
