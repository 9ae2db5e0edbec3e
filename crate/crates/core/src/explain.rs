//! Per-concept localization maps built from a recorded forward pass.
//!
//! The pipeline is: concept-to-patch attention (visual and text branches),
//! their sum, a product with the rectified CAM features, refinement by the
//! patch affinity, then bilinear upsampling and per-concept min-max
//! normalization.

use viconex_autodiff::{Float, Tensor};

use crate::error::{Error, Result};
use crate::model::AttentionTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Visual,
    Text,
}

/// Nonnegative `H × W × C` maps stored row-major with the concept index
/// fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationMap {
    pub height: usize,
    pub width: usize,
    pub concepts: usize,
    pub values: Vec<f64>,
    pub normalized: bool,
    pub names: Vec<String>,
}

impl LocalizationMap {
    pub fn new(height: usize, width: usize, concepts: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width * concepts {
            return Err(Error::Input(format!(
                "map of {height}x{width}x{concepts} needs {} values, got {}",
                height * width * concepts,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            concepts,
            values,
            normalized: false,
            names: (0..concepts).map(|c| format!("concept_{c}")).collect(),
        })
    }

    pub fn zeros(height: usize, width: usize, concepts: usize) -> Self {
        Self::new(height, width, concepts, vec![0.0; height * width * concepts]).expect("sized")
    }

    pub fn with_names(mut self, names: &[String]) -> Self {
        if names.len() == self.concepts {
            self.names = names.to_vec();
        }
        self
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.values[(y * self.width + x) * self.concepts + c]
    }

    /// One concept as a row-major `H × W` plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.values.iter().skip(c).step_by(self.concepts).copied().collect()
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= s);
        out
    }

    fn same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if (self.height, self.width, self.concepts) != (other.height, other.width, other.concepts) {
            return Err(Error::Input(format!(
                "{op}: map shapes {}x{}x{} and {}x{}x{} differ",
                self.height, self.width, self.concepts, other.height, other.width, other.concepts
            )));
        }
        Ok(())
    }
}

/// Patch-to-patch affinity `M × M`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub size: usize,
    pub values: Vec<f64>,
    pub row_normalized: bool,
}

impl AffinityMatrix {
    pub fn new(size: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != size * size || values.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Input(format!(
                "affinity must hold {} nonnegative values",
                size * size
            )));
        }
        Ok(Self {
            size,
            values,
            row_normalized: false,
        })
    }

    pub fn identity(size: usize) -> Self {
        let mut v = vec![0.0; size * size];
        for i in 0..size {
            v[i * size + i] = 1.0;
        }
        Self {
            size,
            values: v,
            row_normalized: true,
        }
    }

    /// Rows scaled to sum to one; all-zero rows become uniform.
    pub fn row_normalize(mut self) -> Self {
        let m = self.size;
        for row in self.values.chunks_mut(m) {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            } else {
                row.iter_mut().for_each(|v| *v = 1.0 / m as f64);
            }
        }
        self.row_normalized = true;
        self
    }
}

fn sample_slice<T: Float>(t: &Tensor<T>, sample: usize) -> Result<&[T]> {
    let s = t.shape();
    let per: usize = s[1..].iter().product();
    if sample >= s[0] {
        return Err(Error::Input(format!("sample {sample} outside batch of {}", s[0])));
    }
    Ok(&t.data()[sample * per..(sample + 1) * per])
}

/// Concept-to-patch attention averaged over heads and the branch's layers,
/// as an `N × N × C` map.
pub fn extract_concept_attention<T: Float>(
    trace: &AttentionTrace<T>,
    branch: Branch,
    sample: usize,
) -> Result<LocalizationMap> {
    let layers = match branch {
        Branch::Visual => &trace.visual,
        Branch::Text => &trace.text,
    };
    if layers.is_empty() {
        return Err(Error::Input(format!("trace has no {branch:?} attention layers")));
    }
    let s = layers[0].shape().to_vec();
    let (heads, c, m) = (s[1], s[2], s[3]);
    let n = (m as f64).sqrt().round() as usize;
    if n * n != m {
        return Err(Error::Input(format!("{m} patches do not form a square grid")));
    }
    let mut acc = vec![0.0; c * m];
    for layer in layers {
        let v = sample_slice(layer, sample)?;
        for h in 0..heads {
            for (a, &x) in acc.iter_mut().zip(&v[h * c * m..(h + 1) * c * m]) {
                *a += x.as_f64();
            }
        }
    }
    let k = (heads * layers.len()) as f64;
    let mut values = vec![0.0; m * c];
    for ci in 0..c {
        for p in 0..m {
            values[p * c + ci] = acc[ci * m + p] / k;
        }
    }
    LocalizationMap::new(n, n, c, values)
}

/// Head-averaged self-attention of the last `layers` patch layers,
/// row-normalized.
pub fn patch_affinity<T: Float>(trace: &AttentionTrace<T>, sample: usize, layers: usize) -> Result<AffinityMatrix> {
    let total = trace.patch.len();
    if layers == 0 || layers > total {
        return Err(Error::Input(format!(
            "cannot average {layers} of {total} self-attention layers"
        )));
    }
    let s = trace.patch[0].shape().to_vec();
    let (heads, m) = (s[1], s[2]);
    let mut acc = vec![0.0; m * m];
    for layer in &trace.patch[total - layers..] {
        let v = sample_slice(layer, sample)?;
        for h in 0..heads {
            for (a, &x) in acc.iter_mut().zip(&v[h * m * m..(h + 1) * m * m]) {
                *a += x.as_f64();
            }
        }
    }
    let k = (heads * layers) as f64;
    acc.iter_mut().for_each(|v| *v /= k);
    Ok(AffinityMatrix::new(m, acc)?.row_normalize())
}

/// Rectified CAM features `[B, N, N, C]` of one sample as a map.
pub fn cam_map<T: Float>(cam: &Tensor<T>, sample: usize) -> Result<LocalizationMap> {
    let s = cam.shape();
    if s.len() != 4 {
        return Err(Error::Input(format!("CAM features must be [B, N, N, C], got {s:?}")));
    }
    let v = sample_slice(cam, sample)?;
    LocalizationMap::new(s[1], s[2], s[3], v.iter().map(|x| x.as_f64().max(0.0)).collect())
}

/// `A_vtc = A_vc + A_tc`, or `A_vc` alone without a text branch.
pub fn fuse_vtc(a_vc: &LocalizationMap, a_tc: Option<&LocalizationMap>) -> Result<LocalizationMap> {
    let Some(a_tc) = a_tc else {
        return Ok(a_vc.clone());
    };
    a_vc.same_shape(a_tc, "fuse_vtc")?;
    let mut out = a_vc.clone();
    out.values.iter_mut().zip(&a_tc.values).for_each(|(a, b)| *a += b);
    Ok(out)
}

/// Elementwise product of the rectified CAM map and `A_vtc`.
pub fn fuse_pcam(a_pcam: &LocalizationMap, a_vtc: &LocalizationMap) -> Result<LocalizationMap> {
    a_pcam.same_shape(a_vtc, "fuse_pcam")?;
    let mut out = a_vtc.clone();
    out.values
        .iter_mut()
        .zip(&a_pcam.values)
        .for_each(|(a, p)| *a *= p.max(0.0));
    Ok(out)
}

/// `M(p, c) = Σ_q A_p2p(p, q) · A(q, c)` over flattened grid positions.
pub fn refine_affinity(aff: &AffinityMatrix, a: &LocalizationMap) -> Result<LocalizationMap> {
    let m = a.height * a.width;
    if aff.size != m {
        return Err(Error::Input(format!(
            "affinity of size {} does not match {m} grid cells",
            aff.size
        )));
    }
    let c = a.concepts;
    let mut out = vec![0.0; m * c];
    for p in 0..m {
        let row = &aff.values[p * m..(p + 1) * m];
        let dst = &mut out[p * c..(p + 1) * c];
        for (q, &w) in row.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (d, s) in dst.iter_mut().zip(&a.values[q * c..(q + 1) * c]) {
                *d += w * s;
            }
        }
    }
    let mut map = LocalizationMap::new(a.height, a.width, c, out)?;
    map.names = a.names.clone();
    Ok(map)
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn upsample_bilinear(map: &LocalizationMap, height: usize, width: usize) -> Result<LocalizationMap> {
    if height < map.height || width < map.width {
        return Err(Error::Input(format!(
            "cannot upsample {}x{} to smaller {height}x{width}",
            map.height, map.width
        )));
    }
    if (height, width) == (map.height, map.width) {
        return Ok(map.clone());
    }
    let c = map.concepts;
    let src = |out: usize, inp: usize, i: usize| -> (usize, usize, f64) {
        let x = ((i as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let x0 = x.floor() as usize;
        let x1 = (x0 + 1).min(inp - 1);
        (x0, x1, x - x0 as f64)
    };
    let mut out = vec![0.0; height * width * c];
    for y in 0..height {
        let (y0, y1, fy) = src(height, map.height, y);
        for x in 0..width {
            let (x0, x1, fx) = src(width, map.width, x);
            for ci in 0..c {
                let top = map.get(y0, x0, ci) * (1.0 - fx) + map.get(y0, x1, ci) * fx;
                let bot = map.get(y1, x0, ci) * (1.0 - fx) + map.get(y1, x1, ci) * fx;
                out[(y * width + x) * c + ci] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    let mut m = LocalizationMap::new(height, width, c, out)?;
    m.names = map.names.clone();
    Ok(m)
}

/// Per-concept min-max scaling to `[0, 1]`; constant channels become zero.
pub fn normalize(map: &LocalizationMap) -> LocalizationMap {
    let mut out = map.clone();
    let c = map.concepts;
    for ci in 0..c {
        let (lo, hi) = map
            .values
            .iter()
            .skip(ci)
            .step_by(c)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        for v in out.values.iter_mut().skip(ci).step_by(c) {
            *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
        }
    }
    out.normalized = true;
    out
}

pub fn upsample_normalize(map: &LocalizationMap, height: usize, width: usize) -> Result<LocalizationMap> {
    Ok(normalize(&upsample_bilinear(map, height, width)?))
}

/// Binary masks `map_c ≥ τ` for predicted concepts; `None` elsewhere.
pub fn threshold_maps(map: &LocalizationMap, tau: f64, predicted: &[bool]) -> Result<Vec<Option<Vec<bool>>>> {
    if predicted.len() != map.concepts {
        return Err(Error::Input(format!(
            "{} prediction flags for {} concepts",
            predicted.len(),
            map.concepts
        )));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Input(format!("threshold must lie in (0, 1), got {tau}")));
    }
    Ok(predicted
        .iter()
        .enumerate()
        .map(|(c, &p)| p.then(|| map.channel(c).into_iter().map(|v| v >= tau).collect()))
        .collect())
}

/// Settings of the map pipeline.
#[derive(Debug, Clone, Copy)]
pub struct ExplainOptions {
    pub affinity_layers: usize,
    pub height: usize,
    pub width: usize,
}

/// Grid-level maps of one sample before upsampling.
#[derive(Debug, Clone)]
pub struct MapStages {
    pub a_vc: LocalizationMap,
    pub a_tc: Option<LocalizationMap>,
    pub a_vtc: LocalizationMap,
    pub a_pcam: LocalizationMap,
    pub fused: LocalizationMap,
    pub refined: LocalizationMap,
}

pub fn map_stages<T: Float>(
    trace: &AttentionTrace<T>,
    cam: &Tensor<T>,
    sample: usize,
    affinity_layers: usize,
) -> Result<MapStages> {
    let a_vc = extract_concept_attention(trace, Branch::Visual, sample)?;
    let a_tc = if trace.text.is_empty() {
        None
    } else {
        Some(extract_concept_attention(trace, Branch::Text, sample)?)
    };
    let a_vtc = fuse_vtc(&a_vc, a_tc.as_ref())?;
    let a_pcam = cam_map(cam, sample)?;
    let fused = fuse_pcam(&a_pcam, &a_vtc)?;
    let aff = patch_affinity(trace, sample, affinity_layers)?;
    let refined = refine_affinity(&aff, &fused)?;
    Ok(MapStages {
        a_vc,
        a_tc,
        a_vtc,
        a_pcam,
        fused,
        refined,
    })
}

/// Full pipeline for one sample: normalized `H × W × C` maps.
pub fn explain_sample<T: Float>(
    trace: &AttentionTrace<T>,
    cam: &Tensor<T>,
    sample: usize,
    opts: &ExplainOptions,
) -> Result<LocalizationMap> {
    let st = map_stages(trace, cam, sample, opts.affinity_layers)?;
    upsample_normalize(&st.refined, opts.height, opts.width)
}
