use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub acc: f64,
    pub f1: f64,
    pub per_concept_f1: Vec<f64>,
}

/// Elementwise accuracy and macro F1 of `n × C` scores thresholded at `tau`.
///
/// A concept with no positives and no predicted positives has F1 = 1.
pub fn multilabel_stats(scores: &[f64], labels: &[bool], concepts: usize, tau: f64) -> Result<ClassStats> {
    if scores.len() != labels.len() || concepts == 0 || scores.len() % concepts != 0 {
        return Err(Error::Input(format!(
            "{} scores and {} labels do not form rows of {concepts}",
            scores.len(),
            labels.len()
        )));
    }
    let n = scores.len() / concepts;
    if n == 0 {
        return Err(Error::Input("no samples".into()));
    }
    let mut correct = 0usize;
    let mut tp = vec![0usize; concepts];
    let mut fp = vec![0usize; concepts];
    let mut fneg = vec![0usize; concepts];
    for (i, (&s, &y)) in scores.iter().zip(labels).enumerate() {
        let c = i % concepts;
        let p = s >= tau;
        if p == y {
            correct += 1;
        }
        match (p, y) {
            (true, true) => tp[c] += 1,
            (true, false) => fp[c] += 1,
            (false, true) => fneg[c] += 1,
            _ => {}
        }
    }
    let per_concept_f1: Vec<f64> = (0..concepts)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fneg[c];
            if denom == 0 {
                1.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect();
    Ok(ClassStats {
        acc: correct as f64 / scores.len() as f64,
        f1: per_concept_f1.iter().sum::<f64>() / concepts as f64,
        per_concept_f1,
    })
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half. `None` when either class is absent.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let pos = labels.iter().filter(|&&y| y).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the Mann-Whitney U, kept integral.
    let mut u2: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut p, mut q) = (0u64, 0u64);
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                p += 1;
            } else {
                q += 1;
            }
            j += 1;
        }
        u2 += 2 * p * neg_below + p * q;
        neg_below += q;
        i = j;
    }
    Some(u2 as f64 / (2 * pos * neg) as f64)
}

/// Per-concept AUC over `n × C` rows and the mean of the defined ones.
pub fn macro_auc(scores: &[f64], labels: &[bool], concepts: usize) -> (Option<f64>, Vec<Option<f64>>) {
    let per: Vec<Option<f64>> = (0..concepts)
        .map(|c| {
            let s: Vec<f64> = scores.iter().skip(c).step_by(concepts).copied().collect();
            let y: Vec<bool> = labels.iter().skip(c).step_by(concepts).copied().collect();
            auc(&s, &y)
        })
        .collect();
    let defined: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    (mean, per)
}

/// `2|A∩B| / (|A| + |B|)`, with two empty masks scoring 1.
pub fn dice(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Input(format!(
            "dice: masks of {} and {} pixels",
            pred.len(),
            gt.len()
        )));
    }
    let a = pred.iter().filter(|&&v| v).count();
    let b = gt.iter().filter(|&&v| v).count();
    if a + b == 0 {
        return Ok(1.0);
    }
    let inter = pred.iter().zip(gt).filter(|(p, g)| **p && **g).count();
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

pub fn cl_score(f1: f64, dice: f64) -> f64 {
    (f1 * dice).sqrt()
}

/// Gini index of the absolute values. `None` for an all-zero map.
pub fn sparseness(map: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = map.iter().map(|x| x.abs()).collect();
    let total: f64 = v.iter().sum();
    if v.is_empty() || total <= 0.0 {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let s: f64 = v
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * (i as f64 + 1.0) - n - 1.0) * x)
        .sum();
    Some(s / (n * total))
}

/// Whether the map's maximum (first in row-major order on ties) falls in
/// `gt`. `None` for an empty ground truth.
pub fn pointing_game(map: &[f64], gt: &[bool]) -> Result<Option<bool>> {
    if map.len() != gt.len() {
        return Err(Error::Input(format!(
            "pointing game: map of {} and mask of {} pixels",
            map.len(),
            gt.len()
        )));
    }
    if !gt.iter().any(|&g| g) {
        return Ok(None);
    }
    let mut best = 0;
    for (i, &v) in map.iter().enumerate() {
        if v > map[best] {
            best = i;
        }
    }
    Ok(Some(gt[best]))
}

/// Settings for the perturbation-based metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct XaiConfig {
    /// Fraction of patches removed per selectivity step.
    pub step_fraction: f64,
    pub continuity_perturbations: usize,
    pub continuity_shift: usize,
}

impl Default for XaiConfig {
    fn default() -> Self {
        Self {
            step_fraction: 1.0 / 16.0,
            continuity_perturbations: 4,
            continuity_shift: 2,
        }
    }
}

/// Geometry of an RGB image split into square patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl PatchGrid {
    pub fn rows(&self) -> usize {
        self.height / self.patch
    }

    pub fn cols(&self) -> usize {
        self.width / self.patch
    }

    pub fn count(&self) -> usize {
        self.rows() * self.cols()
    }

    fn pixels(&self, idx: usize) -> impl Iterator<Item = usize> + '_ {
        let (r, c) = (idx / self.cols(), idx % self.cols());
        (0..self.patch).flat_map(move |y| {
            (0..self.patch).map(move |x| (r * self.patch + y) * self.width + c * self.patch + x)
        })
    }
}

/// Trapezoid area under a curve sampled at evenly spaced fractions
/// `0, 1/k, …, 1`.
fn unit_trapezoid(ys: &[f64]) -> f64 {
    if ys.len() < 2 {
        return ys.first().copied().unwrap_or(0.0);
    }
    let h = 1.0 / (ys.len() - 1) as f64;
    ys.windows(2).map(|w| 0.5 * h * (w[0] + w[1])).sum()
}

/// Area under the score curve as the highest-attribution patches are
/// replaced by `baseline`.
///
/// `image` and `baseline` are row-major RGB, `map` is `H × W`. `score`
/// returns the concept probability. Returns the normalized area and the
/// curve.
pub fn selectivity<F, E>(
    mut score: F,
    image: &[f32],
    baseline: &[f32],
    map: &[f64],
    grid: PatchGrid,
    step_fraction: f64,
) -> std::result::Result<(f64, Vec<f64>), E>
where
    F: FnMut(&[f32]) -> std::result::Result<f64, E>,
{
    let m = grid.count();
    let per_step = ((step_fraction * m as f64).round() as usize).max(1);
    let mut mass: Vec<(usize, f64)> = (0..m).map(|p| (p, grid.pixels(p).map(|i| map[i]).sum())).collect();
    mass.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut img = image.to_vec();
    let mut curve = vec![score(&img)?];
    for chunk in mass.chunks(per_step) {
        for &(p, _) in chunk {
            for i in grid.pixels(p) {
                img[i * 3..i * 3 + 3].copy_from_slice(&baseline[i * 3..i * 3 + 3]);
            }
        }
        curve.push(score(&img)?);
    }
    Ok((unit_trapezoid(&curve), curve))
}

/// Cyclic shifts used by [`continuity`]: the first `count` of the eight
/// neighbours at distance `shift`.
pub fn continuity_shifts(count: usize, shift: usize) -> Vec<(isize, isize)> {
    let s = shift as isize;
    [(s, 0), (0, s), (-s, 0), (0, -s), (s, s), (-s, -s), (s, -s), (-s, s)]
        .into_iter()
        .take(count)
        .collect()
}

fn roll<T: Copy>(data: &[T], h: usize, w: usize, ch: usize, dy: isize, dx: isize) -> Vec<T> {
    let mut out = data.to_vec();
    for y in 0..h {
        let ty = (y as isize + dy).rem_euclid(h as isize) as usize;
        for x in 0..w {
            let tx = (x as isize + dx).rem_euclid(w as isize) as usize;
            let (s, d) = ((y * w + x) * ch, (ty * w + tx) * ch);
            out[d..d + ch].copy_from_slice(&data[s..s + ch]);
        }
    }
    out
}

/// Mean absolute change (×255) of a normalized `H × W` map when the input
/// is cyclically shifted and the resulting map shifted back.
pub fn continuity<F, E>(
    mut explain: F,
    image: &[f32],
    height: usize,
    width: usize,
    shifts: &[(isize, isize)],
) -> std::result::Result<f64, E>
where
    F: FnMut(&[f32]) -> std::result::Result<Vec<f64>, E>,
{
    if shifts.is_empty() {
        return Ok(0.0);
    }
    let base = explain(image)?;
    let mut total = 0.0;
    for &(dy, dx) in shifts {
        let shifted = roll(image, height, width, 3, dy, dx);
        let map = explain(&shifted)?;
        let back = roll(&map, height, width, 1, -dy, -dx);
        let mad = base.iter().zip(&back).map(|(a, b)| (a - b).abs()).sum::<f64>() / base.len() as f64;
        total += mad;
    }
    Ok(255.0 * total / shifts.len() as f64)
}

/// Per-(image, concept) values grouped by concept.
#[derive(Debug, Clone, Default)]
pub struct Accumulator {
    per_concept: Vec<Vec<f64>>,
}

impl Accumulator {
    pub fn new(concepts: usize) -> Self {
        Self {
            per_concept: vec![Vec::new(); concepts],
        }
    }

    pub fn push(&mut self, concept: usize, value: f64) {
        self.per_concept[concept].push(value);
    }

    pub fn count(&self) -> usize {
        self.per_concept.iter().map(Vec::len).sum()
    }

    /// Mean over all pairs plus per-concept means.
    pub fn entry(&self, names: &[String]) -> MetricEntry {
        let all: Vec<f64> = self.per_concept.iter().flatten().copied().collect();
        MetricEntry {
            mean: mean(&all),
            per_concept: names
                .iter()
                .cloned()
                .zip(self.per_concept.iter().map(|v| mean(v)))
                .collect(),
            n: all.len(),
        }
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// One metric: overall mean, per-concept values and the number of
/// contributing items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub mean: Option<f64>,
    pub per_concept: BTreeMap<String, Option<f64>>,
    pub n: usize,
}

impl MetricEntry {
    pub fn scalar(value: Option<f64>, n: usize, names: &[String], per: &[Option<f64>]) -> Self {
        Self {
            mean: value,
            per_concept: names.iter().cloned().zip(per.iter().copied()).collect(),
            n,
        }
    }

    pub fn value(&self) -> f64 {
        self.mean.unwrap_or(f64::NAN)
    }
}

/// Classification, localization and explanation quality of one model on one
/// dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: usize,
    pub concepts: Vec<String>,
    pub acc: MetricEntry,
    pub auc: MetricEntry,
    pub f1: MetricEntry,
    /// Dice at the reporting threshold.
    pub dice: MetricEntry,
    pub cl_score: MetricEntry,
    pub selectivity: MetricEntry,
    pub sparseness: MetricEntry,
    pub pointing_game: MetricEntry,
    pub continuity: MetricEntry,
    /// Mean Dice for every evaluated threshold, keyed by its decimal form.
    pub dice_by_tau: BTreeMap<String, Option<f64>>,
    pub best_tau: Option<f64>,
    /// Dice of predicting the whole lesion for every concept.
    pub whole_lesion_dice: Option<f64>,
    /// Mean ground-truth area fraction over pointing-game pairs.
    pub pointing_baseline: Option<f64>,
    /// Whether the variant produces text-branch logits.
    pub text_branch: bool,
    /// Macro F1 of each branch's own sigmoid scores, keyed `visual`, `patch`
    /// and, when present, `text`.
    pub branch_f1: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn best_dice(&self) -> Option<f64> {
        self.dice_by_tau.values().flatten().copied().fold(None, |a, v| {
            Some(a.map_or(v, |a: f64| a.max(v)))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn stats_hand_cases() {
        let s = multilabel_stats(&[0.9, 0.2], &[true, true], 1, 0.5).unwrap();
        assert_abs_diff_eq!(s.acc, 0.5);
        assert_abs_diff_eq!(s.f1, 2.0 / 3.0, epsilon = 1e-12);
        let s = multilabel_stats(&[0.5 - 1e-9; 4], &[false; 4], 2, 0.5).unwrap();
        assert_eq!((s.acc, s.f1), (1.0, 1.0));
        let s = multilabel_stats(&[0.1, 0.2], &[true, true], 1, 0.5).unwrap();
        assert_eq!(s.f1, 0.0);
        assert!(multilabel_stats(&[], &[], 3, 0.5).is_err());
    }

    #[test]
    fn auc_hand_cases() {
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]), Some(0.75));
        assert_eq!(auc(&[0.3; 4], &[false, true, false, true]), Some(0.5));
        assert_eq!(auc(&[0.1, 0.9], &[false, true]), Some(1.0));
        assert_eq!(auc(&[0.1, 0.9], &[true, true]), None);
        let (m, per) = macro_auc(&[0.1, 0.5, 0.9, 0.5], &[false, true, true, true], 2);
        assert_eq!(per, vec![Some(1.0), None]);
        assert_eq!(m, Some(1.0));
    }

    #[test]
    fn dice_and_cl_hand_cases() {
        let a = [true, true, true, true, false, false];
        let b = [false, false, true, true, true, true];
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&[false; 3], &[false; 3]).unwrap(), 1.0);
        assert_eq!(dice(&[true, false], &[false, true]).unwrap(), 0.0);
        assert!(dice(&[true], &[true, false]).is_err());
        assert_abs_diff_eq!(cl_score(0.64, 0.25), 0.4, epsilon = 1e-12);
        assert_eq!(cl_score(1.0, 1.0), 1.0);
        assert_eq!(cl_score(0.7, 0.0), 0.0);
    }

    #[test]
    fn sparseness_hand_cases() {
        assert_abs_diff_eq!(sparseness(&[2.0; 5]).unwrap(), 0.0, epsilon = 1e-15);
        let mut one_hot = vec![0.0; 8];
        one_hot[3] = 4.0;
        assert_abs_diff_eq!(sparseness(&one_hot).unwrap(), 7.0 / 8.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sparseness(&[1.0, 3.0]).unwrap(), 0.25, epsilon = 1e-15);
        assert_eq!(sparseness(&[0.0; 3]), None);
    }

    #[test]
    fn pointing_game_cases() {
        assert_eq!(pointing_game(&[0.1, 0.9, 0.2], &[false, true, false]).unwrap(), Some(true));
        assert_eq!(pointing_game(&[0.9, 0.1, 0.2], &[false, true, false]).unwrap(), Some(false));
        // A tie resolves to the first position in row-major order.
        assert_eq!(pointing_game(&[0.5, 0.5], &[false, true]).unwrap(), Some(false));
        assert_eq!(pointing_game(&[0.5, 0.5], &[true, false]).unwrap(), Some(true));
        assert_eq!(pointing_game(&[0.5, 0.5], &[false, false]).unwrap(), None);
    }

    fn grid4() -> PatchGrid {
        PatchGrid {
            height: 4,
            width: 4,
            patch: 2,
        }
    }

    #[test]
    fn selectivity_constant_model_is_flat() {
        let g = grid4();
        let img = vec![0.5f32; 48];
        let base = vec![0.0f32; 48];
        let map: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let (v, curve) = selectivity(|_| Ok::<_, ()>(0.8), &img, &base, &map, g, 0.25).unwrap();
        assert_abs_diff_eq!(v, 0.8, epsilon = 1e-12);
        assert_eq!(curve.len(), 5);
    }

    #[test]
    fn selectivity_linear_model_oracle() {
        // Score is the mean red channel; patch p holds red value w[p].
        let g = grid4();
        let w = [0.8f32, 0.4, 0.2, 0.0];
        let mut img = vec![0f32; 48];
        for p in 0..4 {
            for i in g.pixels(p) {
                img[i * 3] = w[p];
            }
        }
        let base = vec![0f32; 48];
        let map: Vec<f64> = (0..16).map(|i| img[i * 3] as f64).collect();
        let score = |x: &[f32]| Ok::<_, ()>(x.iter().step_by(3).map(|&v| v as f64).sum::<f64>() / 16.0);
        let (v, curve) = selectivity(score, &img, &base, &map, g, 0.25).unwrap();
        let expect = [0.35, 0.15, 0.05, 0.0, 0.0];
        for (c, e) in curve.iter().zip(expect) {
            assert_abs_diff_eq!(*c, e, epsilon = 1e-6);
        }
        let area = 0.25 * (0.5 * 0.35 + 0.15 + 0.05 + 0.0 + 0.5 * 0.0);
        assert_abs_diff_eq!(v, area, epsilon = 1e-6);
    }

    #[test]
    fn continuity_cases() {
        let img = vec![0.2f32; 2 * 2 * 3];
        let zero = continuity(|_| Ok::<_, ()>(vec![0.3; 4]), &img, 2, 2, &[(0, 0)]).unwrap();
        assert_eq!(zero, 0.0);
        let mut calls = 0;
        let v = continuity(
            |_| {
                calls += 1;
                Ok::<_, ()>(vec![if calls == 1 { 0.5 } else { 0.6 }; 4])
            },
            &img,
            2,
            2,
            &continuity_shifts(2, 1),
        )
        .unwrap();
        assert_abs_diff_eq!(v, 25.5, epsilon = 1e-9);
    }

    #[test]
    fn continuity_equivariant_explainer_is_zero() {
        let img: Vec<f32> = (0..4 * 4 * 3).map(|i| (i % 7) as f32 / 7.0).collect();
        let explain = |x: &[f32]| Ok::<_, ()>(x.iter().step_by(3).map(|&v| v as f64).collect());
        let v = continuity(explain, &img, 4, 4, &continuity_shifts(8, 1)).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn accumulator_means() {
        let mut a = Accumulator::new(2);
        a.push(0, 1.0);
        a.push(0, 0.0);
        a.push(1, 0.5);
        let e = a.entry(&["x".into(), "y".into()]);
        assert_eq!(e.mean, Some(0.5));
        assert_eq!(e.per_concept["x"], Some(0.5));
        assert_eq!(e.n, 3);
    }
}
