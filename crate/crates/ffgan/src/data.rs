//! On-disk shapes corpus: `manifest.tsv`, `vocab.tsv`, `images/<id>.png`
//! and `masks/<id>.png`, all at the 64-pixel canvas resolution.

use std::fs;
use std::path::{Path, PathBuf};

use ffgan_core::shapes::{
    box_downsample, downsample_mask, plan_dataset, record_name, render_rgb, rgb_to_tensor, PlannedRecord, RgbImage, Split,
    CANVAS,
};
use ffgan_core::text::{encode_caption, Caption, Vocabulary};
use ffgan_core::{Scalar, Tensor};

use crate::error::{config_err, io_err, Error, Result};

pub const MANIFEST: &str = "manifest.tsv";
pub const VOCAB: &str = "vocab.tsv";

/// A loaded corpus with every image and mask held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub records: Vec<PlannedRecord>,
    pub vocab: Vocabulary,
    images: Vec<RgbImage>,
    masks: Vec<Vec<bool>>,
}

/// One record at a requested resolution.
#[derive(Clone, Debug)]
pub struct LoadedSample<T> {
    pub id: usize,
    /// `[3, R, R]` in `[-1, 1]`.
    pub image: Tensor<T>,
    pub captions: [Caption; 2],
    /// `R * R`, row-major.
    pub mask: Vec<bool>,
}

fn write_png(path: &Path, img: image::DynamicImage) -> Result<()> {
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Renders `n` records into `out_dir` and writes the manifest and
/// vocabulary. The same `(n, seed)` always produces the same bytes.
pub fn generate_dataset(n: usize, seed: u64, out_dir: &Path) -> Result<Dataset> {
    let records = plan_dataset(n, seed)?;
    let corpus: Vec<Vec<String>> = records.iter().flat_map(|r| r.captions.iter().cloned()).collect();
    let vocab = Vocabulary::build(&corpus, 1)?;
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    let mut manifest = String::new();
    for r in &records {
        let (img, mask) = render_rgb(&r.spec, CANVAS)?;
        let name = format!("{}.png", record_name(r.id));
        let rgb = image::RgbImage::from_raw(CANVAS as u32, CANVAS as u32, img.pixels).expect("canvas size");
        write_png(&out_dir.join("images").join(&name), rgb.into())?;
        let gray = image::GrayImage::from_raw(
            CANVAS as u32,
            CANVAS as u32,
            mask.iter().map(|&m| if m { 255 } else { 0 }).collect(),
        )
        .expect("canvas size");
        write_png(&out_dir.join("masks").join(&name), gray.into())?;
        manifest.push_str(&r.manifest_line());
        manifest.push('\n');
    }
    let path = out_dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(io_err(&path))?;
    let path = out_dir.join(VOCAB);
    fs::write(&path, vocab.to_tsv()).map_err(io_err(&path))?;
    Dataset::open(out_dir)
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Err(config_err!("no dataset at {} (run gen-data first)", dir.display()));
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let records = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(PlannedRecord::parse_manifest_line)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        for (k, r) in records.iter().enumerate() {
            if r.id != k {
                return Err(config_err!("manifest line {} carries id {}", k + 1, r.id));
            }
        }
        let path = dir.join(VOCAB);
        let vocab = Vocabulary::from_tsv(&fs::read_to_string(&path).map_err(io_err(&path))?)?;
        let mut images = Vec::with_capacity(records.len());
        let mut masks = Vec::with_capacity(records.len());
        for r in &records {
            let name = format!("{}.png", record_name(r.id));
            images.push(read_rgb(&dir.join("images").join(&name))?);
            let m = read_gray(&dir.join("masks").join(&name))?;
            masks.push(m.into_iter().map(|v| v >= 128).collect());
        }
        Ok(Self { dir: dir.to_path_buf(), records, vocab, images, masks })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self, split: Split) -> Vec<usize> {
        self.records.iter().filter(|r| r.split == split).map(|r| r.id).collect()
    }

    pub fn record(&self, id: usize) -> Result<&PlannedRecord> {
        self.records.get(id).ok_or_else(|| Error::Lookup(format!("record {id} not in a dataset of {}", self.len())))
    }

    /// Images box-filtered down to `resolution`, both captions encoded to
    /// `max_len`, masks reduced by majority vote.
    pub fn load_batch<T: Scalar>(&self, ids: &[usize], resolution: usize, max_len: usize) -> Result<Vec<LoadedSample<T>>> {
        if resolution == 0 || CANVAS % resolution != 0 {
            return Err(config_err!("resolution {resolution} does not divide the {CANVAS}-pixel canvas"));
        }
        let factor = CANVAS / resolution;
        ids.iter()
            .map(|&id| {
                let r = self.record(id)?;
                let full = rgb_to_tensor::<T>(&self.images[id]);
                let image = if factor == 1 { full } else { box_downsample(&full, factor)? };
                let captions = [
                    encode_caption(&r.captions[0], &self.vocab, max_len)?,
                    encode_caption(&r.captions[1], &self.vocab, max_len)?,
                ];
                let mask = if factor == 1 { self.masks[id].clone() } else { downsample_mask(&self.masks[id], CANVAS, factor) };
                Ok(LoadedSample { id, image, captions, mask })
            })
            .collect()
    }
}

fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_rgb8();
    if img.width() as usize != CANVAS || img.height() as usize != CANVAS {
        return Err(config_err!("{} is {}x{}, expected {CANVAS}x{CANVAS}", path.display(), img.width(), img.height()));
    }
    Ok(RgbImage { size: CANVAS, pixels: img.into_raw() })
}

fn read_gray(path: &Path) -> Result<Vec<u8>> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_luma8();
    if img.width() as usize != CANVAS || img.height() as usize != CANVAS {
        return Err(config_err!("{} is not a {CANVAS}x{CANVAS} mask", path.display()));
    }
    Ok(img.into_raw())
}
