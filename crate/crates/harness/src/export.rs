use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};
use viconex_core::autodiff::Tensor;

use crate::dataset::Dataset;
use crate::error::{create_dir, write, HarnessError, Result};
use crate::evaluate::Explainer;

/// Strength of the heat tint at a map value of 1.
pub const OVERLAY_ALPHA: f64 = 0.6;

/// Blue → cyan → yellow → red ramp.
pub fn heat(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |c: f64| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Grayscale PNG bytes of a normalized `H × W` map.
pub fn map_image(map: &[f64], size: usize) -> GrayImage {
    GrayImage::from_raw(size as u32, size as u32, map.iter().map(|&v| to_u8(v)).collect()).expect("map size")
}

/// `image` with the map blended in as a heat tint of opacity
/// `OVERLAY_ALPHA · map`.
pub fn overlay_image(image: &[f32], map: &[f64], size: usize) -> RgbImage {
    let mut out = Vec::with_capacity(size * size * 3);
    for (px, &m) in image.chunks(3).zip(map) {
        let a = OVERLAY_ALPHA * m.clamp(0.0, 1.0);
        let h = heat(m);
        for ch in 0..3 {
            out.push(to_u8((1.0 - a) * px[ch] as f64 + a * h[ch]));
        }
    }
    RgbImage::from_raw(size as u32, size as u32, out).expect("overlay size")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub name: String,
    pub source: String,
    pub scores: BTreeMap<String, f64>,
    pub predicted: Vec<String>,
    pub maps: BTreeMap<String, String>,
    pub overlays: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapIndex {
    pub concepts: Vec<String>,
    pub images: Vec<IndexEntry>,
}

/// One image to explain.
#[derive(Debug, Clone)]
pub struct Source {
    pub name: String,
    pub origin: String,
    /// `H × W × 3` in `[0, 1]`.
    pub pixels: Vec<f32>,
}

pub fn load_image(path: &Path, size: usize) -> Result<Source> {
    let img = image::open(path)
        .map_err(|e| HarnessError::Data(format!("cannot read image {}: {e}", path.display())))?
        .to_rgb8();
    if img.width() as usize != size || img.height() as usize != size {
        return Err(HarnessError::Data(format!(
            "{} is {}x{}, the model expects {size}x{size}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    Ok(Source {
        name,
        origin: path.display().to_string(),
        pixels: img.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
    })
}

pub fn dataset_sources(data: &Dataset, limit: Option<usize>) -> Vec<Source> {
    let n = limit.unwrap_or(data.len()).min(data.len());
    (0..n)
        .map(|i| Source {
            name: format!("{:06}", data.indices[i]),
            origin: synskin::dataset::image_path(Path::new(""), data.indices[i]).display().to_string(),
            pixels: data.image(i).to_vec(),
        })
        .collect()
}

fn save_png<P, C>(path: &Path, img: &image::ImageBuffer<P, C>) -> Result<()>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    if let Some(d) = path.parent() {
        create_dir(d)?;
    }
    img.save(path)
        .map_err(|e| HarnessError::Data(format!("cannot write {}: {e}", path.display())))
}

/// Writes `maps/<concept>/<name>.png`, `overlays/<concept>/<name>.png` for
/// every concept with probability ≥ 0.5, and `maps/index.json`.
pub fn export(ex: &Explainer, concepts: &[String], sources: &[Source], out: &Path, batch: usize) -> Result<MapIndex> {
    let s = ex.cfg.image_size;
    let mut entries = Vec::with_capacity(sources.len());
    for chunk in sources.chunks(batch.max(1)) {
        let data: Vec<f32> = chunk.iter().flat_map(|src| src.pixels.iter().copied()).collect();
        let x = Tensor::new(&[chunk.len(), s, s, 3], data).map_err(viconex_core::Error::from)?;
        for (src, o) in chunk.iter().zip(ex.run(&x)?) {
            let mut entry = IndexEntry {
                name: src.name.clone(),
                source: src.origin.clone(),
                scores: concepts.iter().cloned().zip(o.probs.iter().copied()).collect(),
                predicted: Vec::new(),
                maps: BTreeMap::new(),
                overlays: BTreeMap::new(),
                note: None,
            };
            for (ci, name) in concepts.iter().enumerate() {
                if o.probs[ci] < 0.5 {
                    continue;
                }
                let map = o.maps.channel(ci);
                let rel_map: PathBuf = ["maps", name, &format!("{}.png", src.name)].iter().collect();
                let rel_ov: PathBuf = ["overlays", name, &format!("{}.png", src.name)].iter().collect();
                save_png(&out.join(&rel_map), &map_image(&map, s))?;
                save_png(&out.join(&rel_ov), &overlay_image(&src.pixels, &map, s))?;
                entry.predicted.push(name.clone());
                entry.maps.insert(name.clone(), rel_map.display().to_string());
                entry.overlays.insert(name.clone(), rel_ov.display().to_string());
            }
            if entry.predicted.is_empty() {
                entry.note = Some("no concept predicted".into());
            }
            entries.push(entry);
        }
    }
    let index = MapIndex {
        concepts: concepts.to_vec(),
        images: entries,
    };
    let json = serde_json::to_string_pretty(&index).expect("index serializes");
    write(&out.join("maps").join("index.json"), json + "\n")?;
    Ok(index)
}
