use std::collections::BTreeMap;
use std::path::Path;

use serde_json::json;
use viconex_core::autodiff::Tensor;
use viconex_core::explain::{explain_sample, ExplainOptions, LocalizationMap};
use viconex_core::metrics::{
    cl_score, continuity, continuity_shifts, dice, macro_auc, multilabel_stats, pointing_game, selectivity,
    sparseness, Accumulator, MetricEntry, MetricReport, PatchGrid,
};
use viconex_core::{forward, ForwardOptions, Mode, ModelConfig, ParamStore};

use crate::checkpoint::Checkpoint;
use crate::config::EvalConfig;
use crate::dataset::Dataset;
use crate::error::{write, HarnessError, Result};
use crate::train::check_compatible;

/// Inference-side model handle.
#[derive(Debug, Clone)]
pub struct Explainer<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a ParamStore<f32>,
}

/// Per-image output of [`Explainer::run`].
#[derive(Debug, Clone)]
pub struct ImageOutput {
    /// Fused concept probabilities.
    pub probs: Vec<f64>,
    /// Sigmoid of each branch's logits, keyed like `MetricReport::branch_f1`.
    pub branch_probs: BTreeMap<&'static str, Vec<f64>>,
    /// Normalized `H × W × C` maps.
    pub maps: LocalizationMap,
}

fn sigmoid(x: f32) -> f64 {
    1.0 / (1.0 + (-(x as f64)).exp())
}

impl<'a> Explainer<'a> {
    pub fn new(cfg: &'a ModelConfig, params: &'a ParamStore<f32>) -> Self {
        Self { cfg, params }
    }

    fn options(&self) -> ExplainOptions {
        ExplainOptions {
            affinity_layers: self.cfg.affinity_layer_count(),
            height: self.cfg.image_size,
            width: self.cfg.image_size,
        }
    }

    /// Probabilities and maps for a `[B, H, W, 3]` batch.
    pub fn run(&self, images: &Tensor<f32>) -> Result<Vec<ImageOutput>> {
        let f = forward(self.cfg, self.params, images, ForwardOptions::infer())?;
        let trace = f.trace.as_ref().expect("inference records a trace");
        let cam = f.cam_map();
        let probs = f.probabilities();
        let scores = f.scores();
        let c = self.cfg.concepts;
        let opts = self.options();
        (0..f.batch)
            .map(|b| {
                let row = |t: &Tensor<f32>| t.data()[b * c..(b + 1) * c].iter().map(|&v| sigmoid(v)).collect();
                let mut branch_probs = BTreeMap::new();
                branch_probs.insert("visual", row(&scores.y_vc));
                branch_probs.insert("patch", row(&scores.y_p));
                if let Some(t) = &scores.y_tc {
                    branch_probs.insert("text", row(t));
                }
                Ok(ImageOutput {
                    probs: probs.data()[b * c..(b + 1) * c].iter().map(|&p| p as f64).collect(),
                    branch_probs,
                    maps: explain_sample(trace, &cam, b, &opts)?,
                })
            })
            .collect()
    }

    /// Probability of `concept` for one `H × W × 3` image.
    pub fn score(&self, image: &[f32], concept: usize) -> Result<f64> {
        let s = self.cfg.image_size;
        let x = Tensor::new(&[1, s, s, 3], image.to_vec()).map_err(viconex_core::Error::from)?;
        let f = forward(
            self.cfg,
            self.params,
            &x,
            ForwardOptions {
                mode: Mode::Infer,
                record_trace: false,
            },
        )?;
        Ok(f.probabilities().data()[concept] as f64)
    }

    /// Normalized map of `concept` for one image.
    pub fn concept_map(&self, image: &[f32], concept: usize) -> Result<Vec<f64>> {
        let s = self.cfg.image_size;
        let x = Tensor::new(&[1, s, s, 3], image.to_vec()).map_err(viconex_core::Error::from)?;
        Ok(self.run(&x)?.remove(0).maps.channel(concept))
    }
}

/// Mean `p × p × 3` patch over every patch position of every image, tiled
/// to a full image.
pub fn mean_patch_baseline(data: &Dataset, patch: usize) -> Vec<f32> {
    let s = data.image_size;
    let mut acc = vec![0.0f64; patch * patch * 3];
    let mut count = 0usize;
    for i in 0..data.len() {
        let img = data.image(i);
        for py in (0..s).step_by(patch) {
            for px in (0..s).step_by(patch) {
                for y in 0..patch {
                    for x in 0..patch {
                        for ch in 0..3 {
                            acc[(y * patch + x) * 3 + ch] += img[((py + y) * s + px + x) * 3 + ch] as f64;
                        }
                    }
                }
                count += 1;
            }
        }
    }
    let mean: Vec<f32> = acc.iter().map(|v| (v / count.max(1) as f64) as f32).collect();
    let mut out = vec![0.0f32; s * s * 3];
    for y in 0..s {
        for x in 0..s {
            let k = ((y % patch) * patch + x % patch) * 3;
            out[(y * s + x) * 3..(y * s + x) * 3 + 3].copy_from_slice(&mean[k..k + 3]);
        }
    }
    out
}

fn tau_key(t: f64) -> String {
    format!("{t}")
}

/// Classification, localization and explanation metrics of a model on a
/// dataset with masks.
///
/// Localization and explanation metrics use only (image, concept) pairs
/// whose concept is present and predicted.
pub fn evaluate(cfg: &ModelConfig, params: &ParamStore<f32>, data: &Dataset, ecfg: &EvalConfig) -> Result<MetricReport> {
    check_compatible(cfg, data)?;
    if data.is_empty() {
        return Err(HarnessError::Data(format!("{} has no samples", data.dir.display())));
    }
    if data.masks.is_none() {
        return Err(HarnessError::Data("evaluation needs ground-truth masks".into()));
    }
    let ex = Explainer::new(cfg, params);
    let c = cfg.concepts;
    let n = data.len();
    let names = &data.concepts;
    let mut taus = ecfg.taus.clone();
    if !taus.contains(&ecfg.tau) {
        taus.push(ecfg.tau);
    }
    let mut probs = Vec::with_capacity(n * c);
    let mut branch: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    let mut dice_at: Vec<Accumulator> = taus.iter().map(|_| Accumulator::new(c)).collect();
    let mut whole = Accumulator::new(c);
    let mut sparse = Accumulator::new(c);
    let mut pointing = Accumulator::new(c);
    let mut area = Accumulator::new(c);
    let mut select = Accumulator::new(c);
    let mut contin = Accumulator::new(c);
    let xai_limit = ecfg.xai_images.unwrap_or(n).min(n);
    let baseline = mean_patch_baseline(data, cfg.patch_size);
    let grid = PatchGrid {
        height: cfg.image_size,
        width: cfg.image_size,
        patch: cfg.patch_size,
    };
    let shifts = continuity_shifts(ecfg.xai.continuity_perturbations, ecfg.xai.continuity_shift);
    let rows: Vec<usize> = (0..n).collect();
    for chunk in rows.chunks(ecfg.batch_size) {
        let outputs = ex.run(&data.batch(chunk, &[]))?;
        for (&i, out) in chunk.iter().zip(outputs) {
            probs.extend_from_slice(&out.probs);
            for (k, v) in &out.branch_probs {
                branch.entry(k).or_default().extend_from_slice(v);
            }
            let labels = data.label_row(i);
            for ci in 0..c {
                if !(labels[ci] && out.probs[ci] >= 0.5) {
                    continue;
                }
                let gt = data.color_mask(i, ci).expect("masks loaded");
                let map = out.maps.channel(ci);
                for (acc, &t) in dice_at.iter_mut().zip(&taus) {
                    let pred: Vec<bool> = map.iter().map(|&v| v >= t).collect();
                    acc.push(ci, dice(&pred, gt)?);
                }
                whole.push(ci, dice(data.lesion_mask(i).expect("masks loaded"), gt)?);
                if let Some(s) = sparseness(&map) {
                    sparse.push(ci, s);
                }
                if let Some(hit) = pointing_game(&map, gt)? {
                    pointing.push(ci, if hit { 1.0 } else { 0.0 });
                    area.push(ci, gt.iter().filter(|&&g| g).count() as f64 / gt.len() as f64);
                }
                if i < xai_limit {
                    let img = data.image(i);
                    let (auc_sel, _) = selectivity(
                        |x| ex.score(x, ci),
                        img,
                        &baseline,
                        &map,
                        grid,
                        ecfg.xai.step_fraction,
                    )?;
                    select.push(ci, auc_sel);
                    let s = cfg.image_size;
                    contin.push(ci, continuity(|x| ex.concept_map(x, ci), img, s, s, &shifts)?);
                }
            }
        }
    }

    let stats = multilabel_stats(&probs, &data.labels, c, 0.5)?;
    let (auc_mean, auc_per) = macro_auc(&probs, &data.labels, c);
    let per_acc: Vec<Option<f64>> = (0..c)
        .map(|ci| {
            let ok = (0..n)
                .filter(|&i| (probs[i * c + ci] >= 0.5) == data.labels[i * c + ci])
                .count();
            Some(ok as f64 / n as f64)
        })
        .collect();
    let f1_per: Vec<Option<f64>> = stats.per_concept_f1.iter().map(|&v| Some(v)).collect();
    let head = taus.iter().position(|&t| t == ecfg.tau).expect("headline tau included");
    let dice_entry = dice_at[head].entry(names);
    let cl_per: Vec<Option<f64>> = (0..c)
        .map(|ci| dice_entry.per_concept[&names[ci]].map(|d| cl_score(stats.per_concept_f1[ci], d)))
        .collect();
    let cl_mean = dice_entry.mean.map(|d| cl_score(stats.f1, d));
    let mut dice_by_tau = BTreeMap::new();
    for (acc, &t) in dice_at.iter().zip(&taus) {
        if ecfg.taus.contains(&t) {
            dice_by_tau.insert(tau_key(t), acc.entry(names).mean);
        }
    }
    let best_tau = ecfg
        .taus
        .iter()
        .zip(&dice_at)
        .filter_map(|(&t, a)| a.entry(names).mean.map(|d| (t, d)))
        .fold(None, |best: Option<(f64, f64)>, (t, d)| match best {
            Some((_, bd)) if bd >= d => best,
            _ => Some((t, d)),
        })
        .map(|(t, _)| t);
    let mut branch_f1 = BTreeMap::new();
    for (k, p) in &branch {
        branch_f1.insert(k.to_string(), multilabel_stats(p, &data.labels, c, 0.5)?.f1);
    }
    Ok(MetricReport {
        samples: n,
        concepts: names.clone(),
        acc: MetricEntry::scalar(Some(stats.acc), n, names, &per_acc),
        auc: MetricEntry::scalar(auc_mean, n, names, &auc_per),
        f1: MetricEntry::scalar(Some(stats.f1), n, names, &f1_per),
        cl_score: MetricEntry::scalar(cl_mean, dice_entry.n, names, &cl_per),
        dice: dice_entry,
        selectivity: select.entry(names),
        sparseness: sparse.entry(names),
        pointing_game: pointing.entry(names),
        continuity: contin.entry(names),
        dice_by_tau,
        best_tau,
        whole_lesion_dice: whole.entry(names).mean,
        pointing_baseline: area.entry(names).mean,
        text_branch: cfg.variant.has_text_stage(),
        branch_f1,
    })
}

/// Loads a checkpoint and a dataset with masks, checking that they agree.
pub fn load_for_eval(ckpt_path: &Path, data_dir: &Path) -> Result<(Checkpoint, Dataset)> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let data = Dataset::load(data_dir, true)?;
    if ckpt.meta.concepts != data.concepts {
        return Err(HarnessError::Data(format!(
            "checkpoint concepts {:?} differ from dataset concepts {:?}",
            ckpt.meta.concepts, data.concepts
        )));
    }
    check_compatible(&ckpt.meta.model, &data)?;
    Ok((ckpt, data))
}

/// `report.json` body: the report plus the hash of the run that made it.
pub fn report_json(report: &MetricReport, run_hash: &str, dataset: &str, variant: &str) -> serde_json::Value {
    let mut v = serde_json::to_value(report).expect("report serializes");
    let obj = v.as_object_mut().expect("report is an object");
    obj.insert("run_hash".into(), json!(run_hash));
    obj.insert("dataset".into(), json!(dataset));
    obj.insert("variant".into(), json!(variant));
    v
}

/// `(metric, mean, n)` rows shared by `report.csv` and the grid tables.
pub fn metric_rows(r: &MetricReport) -> Vec<(String, Option<f64>, usize)> {
    let mut rows = vec![];
    for (name, e) in [
        ("acc", &r.acc),
        ("auc", &r.auc),
        ("f1", &r.f1),
        ("dice", &r.dice),
        ("cl_score", &r.cl_score),
        ("selectivity", &r.selectivity),
        ("sparseness", &r.sparseness),
        ("pointing_game", &r.pointing_game),
        ("continuity", &r.continuity),
    ] {
        rows.push((name.to_string(), e.mean, e.n));
    }
    for (t, d) in &r.dice_by_tau {
        rows.push((format!("dice@{t}"), *d, r.dice.n));
    }
    rows.push(("best_dice".into(), r.best_dice(), r.dice.n));
    rows.push(("whole_lesion_dice".into(), r.whole_lesion_dice, r.dice.n));
    rows.push(("pointing_baseline".into(), r.pointing_baseline, r.pointing_game.n));
    for (k, v) in &r.branch_f1 {
        rows.push((format!("f1_{k}"), Some(*v), r.samples));
    }
    rows
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn report_csv(r: &MetricReport, dataset: &str, variant: &str) -> String {
    let mut s = String::from("dataset,variant,metric,mean,n\n");
    for (m, v, n) in metric_rows(r) {
        s.push_str(&format!("{dataset},{variant},{m},{},{n}\n", fmt_opt(v)));
    }
    s
}

/// Writes `report.json` and `report.csv` under `out`.
pub fn write_report(out: &Path, r: &MetricReport, run_hash: &str, dataset: &str, variant: &str) -> Result<()> {
    let json = serde_json::to_string_pretty(&report_json(r, run_hash, dataset, variant)).expect("json");
    write(&out.join("report.json"), json + "\n")?;
    write(&out.join("report.csv"), report_csv(r, dataset, variant))
}
