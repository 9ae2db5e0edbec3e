use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use synskin::{load_sample, read_labels, read_manifest};
use viconex_core::autodiff::Tensor;

use crate::error::{HarnessError, Result};

/// Ground-truth masks of every sample, `true` inside the region.
#[derive(Debug, Clone)]
pub struct Masks {
    /// `[n, C, H·W]`
    pub color: Vec<bool>,
    /// `[n, H·W]`
    pub lesion: Vec<bool>,
}

/// A generated dataset held in memory as `[0, 1]` floats.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub concepts: Vec<String>,
    pub image_size: usize,
    /// `[n, H, W, 3]`
    pub images: Vec<f32>,
    /// `[n, C]`
    pub labels: Vec<bool>,
    /// Sample index of each row in the on-disk layout.
    pub indices: Vec<usize>,
    pub masks: Option<Masks>,
}

fn data_err(dir: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Data(format!("{}: {e}", dir.display()))
}

impl Dataset {
    pub fn load(dir: &Path, with_masks: bool) -> Result<Self> {
        let manifest = read_manifest(dir).map_err(|e| data_err(dir, e))?;
        let rows = read_labels(dir).map_err(|e| data_err(dir, e))?;
        if rows.is_empty() {
            return Err(data_err(dir, "dataset is empty"));
        }
        let c = manifest.concepts.len();
        let s = manifest.image_size;
        let px = s * s;
        let mut images = Vec::with_capacity(rows.len() * px * 3);
        let mut labels = Vec::with_capacity(rows.len() * c);
        let mut indices = Vec::with_capacity(rows.len());
        let mut masks = with_masks.then(|| Masks {
            color: Vec::with_capacity(rows.len() * c * px),
            lesion: Vec::with_capacity(rows.len() * px),
        });
        for row in &rows {
            let sample = load_sample(dir, row.index).map_err(|e| data_err(dir, e))?;
            if sample.image.width() as usize != s || sample.image.height() as usize != s {
                return Err(data_err(dir, format!("image {} is not {s}x{s}", row.index)));
            }
            images.extend(sample.image.as_raw().iter().map(|&b| b as f32 / 255.0));
            labels.extend_from_slice(&row.labels[..c]);
            indices.push(row.index);
            if let Some(m) = masks.as_mut() {
                for cm in &sample.color_masks[..c] {
                    m.color.extend_from_slice(cm.data());
                }
                m.lesion.extend_from_slice(sample.lesion_mask.data());
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            concepts: manifest.concepts,
            image_size: s,
            images,
            labels,
            indices,
            masks,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn concept_count(&self) -> usize {
        self.concepts.len()
    }

    fn pixels(&self) -> usize {
        self.image_size * self.image_size
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.pixels() * 3;
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label_row(&self, i: usize) -> &[bool] {
        let c = self.concept_count();
        &self.labels[i * c..(i + 1) * c]
    }

    pub fn color_mask(&self, i: usize, concept: usize) -> Option<&[bool]> {
        let (px, c) = (self.pixels(), self.concept_count());
        let m = self.masks.as_ref()?;
        let off = (i * c + concept) * px;
        Some(&m.color[off..off + px])
    }

    pub fn lesion_mask(&self, i: usize) -> Option<&[bool]> {
        let px = self.pixels();
        let m = self.masks.as_ref()?;
        Some(&m.lesion[i * px..(i + 1) * px])
    }

    /// `[B, H, W, 3]` batch of rows `idx`, mirrored left-right where `flip`
    /// is set.
    pub fn batch(&self, idx: &[usize], flip: &[bool]) -> Tensor<f32> {
        let s = self.image_size;
        let mut out = Vec::with_capacity(idx.len() * s * s * 3);
        for (k, &i) in idx.iter().enumerate() {
            let img = self.image(i);
            if flip.get(k).copied().unwrap_or(false) {
                for row in img.chunks(s * 3) {
                    for x in (0..s).rev() {
                        out.extend_from_slice(&row[x * 3..x * 3 + 3]);
                    }
                }
            } else {
                out.extend_from_slice(img);
            }
        }
        Tensor::new(&[idx.len(), s, s, 3], out).expect("batch shape")
    }

    /// `[B, C]` 0/1 targets of rows `idx`.
    pub fn targets(&self, idx: &[usize]) -> Tensor<f32> {
        let c = self.concept_count();
        let data = idx
            .iter()
            .flat_map(|&i| self.label_row(i).iter().map(|&l| if l { 1.0 } else { 0.0 }))
            .collect();
        Tensor::new(&[idx.len(), c], data).expect("target shape")
    }
}

/// Training rows drawn from one or more datasets.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub sources: Vec<Dataset>,
    pub weights: Vec<f64>,
}

impl TrainSet {
    pub fn single(d: Dataset) -> Self {
        Self {
            sources: vec![d],
            weights: vec![1.0],
        }
    }

    pub fn len(&self) -> usize {
        self.sources.iter().map(Dataset::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One epoch of `(source, row)` pairs.
    ///
    /// A single source is a plain shuffle. With several, the epoch keeps the
    /// combined size and gives each source a share proportional to its
    /// weight, cycling through its own shuffled rows when the share exceeds
    /// its size.
    pub fn epoch_order<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<(usize, usize)> {
        if self.sources.len() == 1 {
            let mut rows: Vec<(usize, usize)> = (0..self.sources[0].len()).map(|i| (0, i)).collect();
            rows.shuffle(rng);
            return rows;
        }
        let total = self.len();
        let wsum: f64 = self.weights.iter().sum();
        let mut order = Vec::with_capacity(total);
        let mut assigned = 0;
        for (s, (d, w)) in self.sources.iter().zip(&self.weights).enumerate() {
            let share = if s + 1 == self.sources.len() {
                total - assigned
            } else {
                ((total as f64 * w / wsum).round() as usize).min(total - assigned)
            };
            assigned += share;
            if d.is_empty() {
                continue;
            }
            let mut rows: Vec<usize> = (0..d.len()).collect();
            rows.shuffle(rng);
            order.extend(rows.iter().cycle().take(share).map(|&i| (s, i)));
        }
        order.shuffle(rng);
        order
    }

    /// Batch whose rows may come from different sources.
    pub fn batch(&self, rows: &[(usize, usize)], flip: &[bool]) -> (Tensor<f32>, Tensor<f32>) {
        let first = &self.sources[0];
        let (s, c) = (first.image_size, first.concept_count());
        let mut img = Vec::with_capacity(rows.len() * s * s * 3);
        let mut tgt = Vec::with_capacity(rows.len() * c);
        for (k, &(src, i)) in rows.iter().enumerate() {
            let d = &self.sources[src];
            img.extend_from_slice(d.batch(&[i], &flip[k..k + 1]).data());
            tgt.extend_from_slice(d.targets(&[i]).data());
        }
        (
            Tensor::new(&[rows.len(), s, s, 3], img).expect("batch shape"),
            Tensor::new(&[rows.len(), c], tgt).expect("target shape"),
        )
    }
}
