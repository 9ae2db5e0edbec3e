//! Multi-octave value noise and the thresholded textures built from it.

use crate::mask::Mask;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseParams {
    /// Lattice spacing of the coarsest octave, in pixels.
    pub cell: f64,
    pub octaves: u32,
    /// Amplitude ratio between successive octaves.
    pub persistence: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            cell: 16.0,
            octaves: 3,
            persistence: 0.5,
        }
    }
}

/// Scalar field with values in `[0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Sum of `octaves` smoothly interpolated random lattices, normalized so
/// every value stays in `[0, 1)`.
pub fn value_noise<R: Rng + ?Sized>(rng: &mut R, width: usize, height: usize, params: &NoiseParams) -> Field {
    let mut values = vec![0.0; width * height];
    let mut amplitude = 1.0;
    let mut total = 0.0;
    let mut cell = params.cell.max(1.0);
    for _ in 0..params.octaves.max(1) {
        let gw = (width as f64 / cell).ceil() as usize + 2;
        let gh = (height as f64 / cell).ceil() as usize + 2;
        let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.gen::<f64>()).collect();
        for y in 0..height {
            let fy = y as f64 / cell;
            let (y0, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
            for x in 0..width {
                let fx = x as f64 / cell;
                let (x0, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
                let l = |gx: usize, gy: usize| lattice[gy * gw + gx];
                let top = l(x0, y0) * (1.0 - tx) + l(x0 + 1, y0) * tx;
                let bottom = l(x0, y0 + 1) * (1.0 - tx) + l(x0 + 1, y0 + 1) * tx;
                values[y * width + x] += amplitude * (top * (1.0 - ty) + bottom * ty);
            }
        }
        total += amplitude;
        amplitude *= params.persistence;
        cell = (cell / 2.0).max(1.0);
    }
    for v in &mut values {
        *v /= total;
    }
    Field { width, height, values }
}

/// `field >= threshold`, then morphological open and close with a disk of
/// `morph_radius`.
pub fn threshold_field(field: &Field, threshold: f64, morph_radius: usize) -> Mask {
    let raw = Mask::from_vec(
        field.width,
        field.height,
        field.values.iter().map(|&v| v >= threshold).collect(),
    );
    raw.open(morph_radius).close(morph_radius)
}

/// Binary texture: smoothed value noise thresholded at `threshold`, cleaned
/// by open+close. Threshold 0 gives all foreground, 1 all background.
pub fn noise_texture<R: Rng + ?Sized>(
    rng: &mut R,
    width: usize,
    height: usize,
    threshold: f64,
    morph_radius: usize,
    params: &NoiseParams,
) -> Mask {
    let field = value_noise(rng, width, height, params);
    threshold_field(&field, threshold, morph_radius)
}

/// Threshold that keeps roughly `fraction` of the field's values inside
/// `region` (upper quantile).
pub fn region_quantile(field: &Field, region: &Mask, fraction: f64) -> Option<f64> {
    let mut vals: Vec<f64> = field
        .values
        .iter()
        .zip(region.data())
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .collect();
    if vals.is_empty() {
        return None;
    }
    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let k = ((fraction * vals.len() as f64).ceil() as usize).clamp(1, vals.len());
    Some(vals[k - 1])
}
