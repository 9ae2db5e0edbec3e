//! On-disk dataset layout.
//!
//! ```text
//! out_dir/images/{idx:06}.png              8-bit RGB
//! out_dir/masks/lesion/{idx:06}.png        8-bit gray, 0/255
//! out_dir/masks/border/{idx:06}.png
//! out_dir/masks/color/<name>/{idx:06}.png
//! out_dir/labels.csv
//! out_dir/manifest.json
//! ```

use crate::colors::{ColorName, COLOR_COUNT};
use crate::error::{io_err, Result, SynSkinError};
use crate::mask::Mask;
use crate::sample::{sample_seed, SynSample, SynSkinConfig, SynSkinGenerator};
use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const FORMAT_VERSION: u32 = 1;
pub const LABELS_HEADER: &str = "index,light_brown,dark_brown,black,blue_gray,red,white,combo,seed";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub labels: [u8; COLOR_COUNT],
    pub combo: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub master_seed: u64,
    pub count: usize,
    pub image_size: usize,
    pub concepts: Vec<String>,
    /// Images containing each color, keyed in concept order.
    pub color_counts: Vec<(String, usize)>,
    /// Per-color presence probability implied by the combination weights.
    pub implied_marginals: Vec<(String, f64)>,
    pub config: SynSkinConfig,
    pub samples: Vec<ManifestEntry>,
}

fn image_name(idx: usize) -> String {
    format!("{idx:06}.png")
}

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(io_err(p))
}

fn save_gray(path: &Path, m: &Mask) -> Result<()> {
    GrayImage::from_raw(m.width() as u32, m.height() as u32, m.to_bytes())
        .expect("mask buffer size")
        .save(path)
        .map_err(|source| SynSkinError::Image {
            path: path.to_path_buf(),
            source,
        })
}

fn write_sample(out: &Path, idx: usize, s: &SynSample) -> Result<()> {
    let name = image_name(idx);
    let img_path = out.join("images").join(&name);
    s.image.save(&img_path).map_err(|source| SynSkinError::Image {
        path: img_path.clone(),
        source,
    })?;
    save_gray(&out.join("masks/lesion").join(&name), &s.lesion_mask)?;
    save_gray(&out.join("masks/border").join(&name), &s.border_mask)?;
    for c in ColorName::ALL {
        save_gray(
            &out.join("masks/color").join(c.as_str()).join(&name),
            &s.color_masks[c.index()],
        )?;
    }
    Ok(())
}

/// Generates `count` samples with seeds derived from `master_seed` and
/// writes the full layout under `out_dir`.
pub fn generate_dataset(gen: &SynSkinGenerator, count: usize, master_seed: u64, out_dir: &Path) -> Result<Manifest> {
    ensure_dir(&out_dir.join("images"))?;
    ensure_dir(&out_dir.join("masks/lesion"))?;
    ensure_dir(&out_dir.join("masks/border"))?;
    for c in ColorName::ALL {
        ensure_dir(&out_dir.join("masks/color").join(c.as_str()))?;
    }
    let mut csv = String::from(LABELS_HEADER);
    csv.push('\n');
    let mut counts = [0usize; COLOR_COUNT];
    let mut samples = Vec::with_capacity(count);
    for idx in 0..count {
        let seed = sample_seed(master_seed, idx as u64);
        let s = gen.generate(seed)?;
        write_sample(out_dir, idx, &s)?;
        let labels = s.labels.map(u8::from);
        let _ = write!(csv, "{idx}");
        for (c, &l) in labels.iter().enumerate() {
            counts[c] += l as usize;
            let _ = write!(csv, ",{l}");
        }
        let _ = writeln!(csv, ",{},{}", s.combo, seed);
        samples.push(ManifestEntry {
            index: idx,
            labels,
            combo: s.combo,
            seed,
        });
    }
    let labels_path = out_dir.join("labels.csv");
    std::fs::write(&labels_path, csv).map_err(io_err(&labels_path))?;
    let marginals = gen.bank.implied_marginals();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        master_seed,
        count,
        image_size: gen.image_size(),
        concepts: ColorName::ALL.iter().map(|c| c.as_str().to_string()).collect(),
        color_counts: ColorName::ALL
            .iter()
            .map(|c| (c.as_str().to_string(), counts[c.index()]))
            .collect(),
        implied_marginals: ColorName::ALL
            .iter()
            .map(|c| (c.as_str().to_string(), marginals[c.index()]))
            .collect(),
        config: gen.config.clone(),
        samples,
    };
    let manifest_path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, json).map_err(io_err(&manifest_path))?;
    Ok(manifest)
}

/// One row of `labels.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRow {
    pub index: usize,
    pub labels: [bool; COLOR_COUNT],
    pub combo: usize,
    pub seed: u64,
}

/// Parses `labels.csv` from a dataset directory.
pub fn read_labels(dir: &Path) -> Result<Vec<LabelRow>> {
    let path = dir.join("labels.csv");
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let bad = |msg: String| SynSkinError::Format {
        path: path.clone(),
        msg,
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == LABELS_HEADER => {}
        other => return Err(bad(format!("unexpected header {other:?}"))),
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 3 + COLOR_COUNT {
            return Err(bad(format!("line {}: expected {} fields", n + 2, 3 + COLOR_COUNT)));
        }
        let num = |s: &str| s.parse::<u64>().map_err(|e| bad(format!("line {}: {e}", n + 2)));
        let mut labels = [false; COLOR_COUNT];
        for c in 0..COLOR_COUNT {
            labels[c] = match fields[1 + c] {
                "0" => false,
                "1" => true,
                v => return Err(bad(format!("line {}: label {v:?} is not 0/1", n + 2))),
            };
        }
        rows.push(LabelRow {
            index: num(fields[0])? as usize,
            labels,
            combo: num(fields[1 + COLOR_COUNT])? as usize,
            seed: num(fields[2 + COLOR_COUNT])?,
        });
    }
    Ok(rows)
}

/// Image and masks of one stored sample.
#[derive(Debug, Clone)]
pub struct StoredSample {
    pub image: RgbImage,
    pub lesion_mask: Mask,
    pub color_masks: [Mask; COLOR_COUNT],
}

fn load_gray(path: &Path) -> Result<Mask> {
    let img = image::open(path)
        .map_err(|source| SynSkinError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    Ok(Mask::from_gray(img.width() as usize, img.height() as usize, img.as_raw()))
}

pub fn image_path(dir: &Path, idx: usize) -> PathBuf {
    dir.join("images").join(image_name(idx))
}

pub fn load_sample(dir: &Path, idx: usize) -> Result<StoredSample> {
    let name = image_name(idx);
    let path = image_path(dir, idx);
    let image = image::open(&path)
        .map_err(|source| SynSkinError::Image { path, source })?
        .to_rgb8();
    let lesion_mask = load_gray(&dir.join("masks/lesion").join(&name))?;
    let mut color_masks: [Mask; COLOR_COUNT] = std::array::from_fn(|_| Mask::empty(0, 0));
    for c in ColorName::ALL {
        color_masks[c.index()] = load_gray(&dir.join("masks/color").join(c.as_str()).join(&name))?;
    }
    Ok(StoredSample {
        image,
        lesion_mask,
        color_masks,
    })
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| SynSkinError::Format {
        path,
        msg: e.to_string(),
    })
}
