//! Ablation and loss-weight sweep drivers. Every run shares the dataset,
//! the pretrained encoders and the per-step random streams, so differences
//! come from the varied setting alone.

use std::path::Path;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{io_err, Result};
use crate::evaluate::{evaluate, EvalReport};
use crate::train::{pretrain, train};

pub const ABLATION_HEADER: &str = "variant,use_ff_block,use_gsr,seed,fid,fid_std,r_precision,r_precision_std";
pub const SWEEP_HEADER: &str = "lambda2,fid,r_precision";

/// `(name, use_ff_block, use_gsr)`; the baseline fuses words by
/// concatenating the word context with the visual features.
pub const VARIANTS: [(&str, bool, bool); 4] =
    [("baseline", false, false), ("ff_block", true, false), ("gsr", false, true), ("full", true, true)];

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: String,
    pub use_ff_block: bool,
    pub use_gsr: bool,
    pub seed: u64,
    pub report: EvalReport,
}

impl AblationRow {
    pub fn csv_row(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.variant,
            self.use_ff_block,
            self.use_gsr,
            self.seed,
            r.fid.mean,
            r.fid.std,
            r.r_precision.mean,
            r.r_precision.std
        )
    }
}

/// Pretrains the shared encoders unless they already exist.
pub fn ensure_pretrained(base: &RunConfig, data: &Dataset) -> Result<()> {
    if !base.pretrain_dir().join(checkpoint::MANIFEST).exists() {
        pretrain(base, data)?;
    }
    Ok(())
}

/// Trains one configuration derived from `base` into `<base out>/<sub>`
/// and evaluates its last checkpoint.
pub fn train_and_evaluate(base: &RunConfig, data: &Dataset, sub: &str, edit: impl FnOnce(&mut RunConfig)) -> Result<EvalReport> {
    let mut cfg = base.clone();
    cfg.pretrain.dir = base.pretrain_dir();
    cfg.out_dir = base.out_dir.join(sub);
    edit(&mut cfg);
    let outcome = train(&cfg, data)?;
    let ck = checkpoint::load(&outcome.checkpoint)?;
    evaluate(&ck, data, &cfg.eval)
}

/// Runs the selected variants for each training seed.
pub fn ablate(base: &RunConfig, data: &Dataset, variants: &[(&str, bool, bool)], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    ensure_pretrained(base, data)?;
    let mut rows = Vec::new();
    for &seed in seeds {
        for &(name, ff, gsr) in variants {
            let report = train_and_evaluate(base, data, &format!("ablate/{name}_seed{seed}"), |c| {
                c.seed = seed;
                c.model.use_ff_block = ff;
                c.model.use_gsr = gsr;
            })?;
            rows.push(AblationRow { variant: name.to_string(), use_ff_block: ff, use_gsr: gsr, seed, report });
        }
    }
    Ok(rows)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut text = format!("{ABLATION_HEADER}\n");
    for r in rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(io_err(path))
}

/// One run per matching-loss weight.
pub fn sweep_lambda2(base: &RunConfig, data: &Dataset, values: &[f64]) -> Result<Vec<(f64, EvalReport)>> {
    ensure_pretrained(base, data)?;
    values
        .iter()
        .map(|&v| {
            let report = train_and_evaluate(base, data, &format!("sweep/lambda2_{v}"), |c| c.train.lambda2 = v)?;
            Ok((v, report))
        })
        .collect()
}

pub fn write_sweep_csv(path: &Path, rows: &[(f64, EvalReport)]) -> Result<()> {
    let mut text = format!("{SWEEP_HEADER}\n");
    for (v, r) in rows {
        text.push_str(&format!("{v},{},{}\n", r.fid.mean, r.r_precision.mean));
    }
    std::fs::write(path, text).map_err(io_err(path))
}
