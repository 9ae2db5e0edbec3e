//! Command-level operations shared by the CLI and the tests.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use viconex_core::metrics::MetricReport;
use viconex_core::{LossMode, PoolName, Variant};

use crate::checkpoint::Checkpoint;
use crate::config::{sha256_hex, EvalConfig, RunConfig};
use crate::dataset::Dataset;
use crate::error::{write, HarnessError, Result};
use crate::evaluate::{evaluate, fmt_opt, load_for_eval, metric_rows, write_report, Explainer};
use crate::export::{dataset_sources, export, load_image, MapIndex};
use crate::train::{check_compatible, train, write_config, LogRecord, TrainSummary, BEST_CKPT};

/// Writes `run.json` echoing the command and its resolved inputs; returns
/// the hash that reports cite.
pub fn write_run_json(out: &Path, command: &str, resolved: &impl Serialize) -> Result<String> {
    let resolved = serde_json::to_value(resolved).expect("resolved inputs serialize");
    let hash = sha256_hex(serde_json::to_string(&resolved).expect("json").as_bytes());
    let body = json!({
        "tool": "viconex",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "resolved": resolved,
        "hash": hash,
    });
    write(&out.join("run.json"), serde_json::to_string_pretty(&body).expect("json") + "\n")?;
    Ok(hash)
}

pub fn run_train(cfg: &RunConfig, out: &Path, resume: bool) -> Result<TrainSummary> {
    write_run_json(out, "train", cfg)?;
    write_config(cfg, out)?;
    train(cfg, out, resume)
}

fn dataset_label(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}

#[derive(Serialize)]
struct EvalInputs<'a> {
    ckpt: &'a Path,
    ckpt_sha256: String,
    data: &'a Path,
    eval: &'a EvalConfig,
}

/// Evaluates a checkpoint on a dataset and writes `report.json`,
/// `report.csv` and `run.json` under `out`.
pub fn run_eval(ckpt_path: &Path, data_dir: &Path, ecfg: &EvalConfig, out: &Path) -> Result<MetricReport> {
    let bytes = crate::error::read(ckpt_path)?;
    let (ckpt, data) = load_for_eval(ckpt_path, data_dir)?;
    let hash = write_run_json(
        out,
        "eval",
        &EvalInputs {
            ckpt: ckpt_path,
            ckpt_sha256: sha256_hex(&bytes),
            data: data_dir,
            eval: ecfg,
        },
    )?;
    let report = evaluate(&ckpt.meta.model, &ckpt.params, &data, ecfg)?;
    write_report(out, &report, &hash, &dataset_label(data_dir), ckpt.meta.model.variant.name())?;
    Ok(report)
}

/// What to explain.
#[derive(Debug, Clone)]
pub enum ExplainInput {
    Image(PathBuf),
    Data { dir: PathBuf, limit: Option<usize> },
}

pub fn run_explain(ckpt_path: &Path, input: &ExplainInput, out: &Path, batch: usize) -> Result<MapIndex> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let model = &ckpt.meta.model;
    let sources = match input {
        ExplainInput::Image(p) => vec![load_image(p, model.image_size)?],
        ExplainInput::Data { dir, limit } => {
            let d = Dataset::load(dir, false)?;
            check_compatible(model, &d)?;
            dataset_sources(&d, *limit)
        }
    };
    let (kind, path) = match input {
        ExplainInput::Image(p) => ("image", p),
        ExplainInput::Data { dir, .. } => ("data", dir),
    };
    write_run_json(
        out,
        "explain",
        &json!({ "ckpt": ckpt_path, "ckpt_sha256": sha256_hex(&crate::error::read(ckpt_path)?), kind: path }),
    )?;
    export(&Explainer::new(model, &ckpt.params), &ckpt.meta.concepts, &sources, out, batch)
}

fn test_dir(cfg: &RunConfig) -> Result<&Path> {
    cfg.data
        .test
        .as_deref()
        .ok_or_else(|| HarnessError::Config("data.test is required for evaluation".into()))
}

/// Train, then evaluate `best.ckpt` on the test set.
pub fn train_and_eval(cfg: &RunConfig, out: &Path) -> Result<(TrainSummary, MetricReport)> {
    let test = test_dir(cfg)?.to_path_buf();
    if !test.is_dir() {
        return Err(HarnessError::Data(format!("dataset directory {} does not exist", test.display())));
    }
    let summary = run_train(cfg, out, false)?;
    let report = run_eval(&out.join(BEST_CKPT), &test, &cfg.eval, &out.join("eval"))?;
    Ok((summary, report))
}

/// Which loss terms were nonzero in the first epoch.
pub fn first_epoch_terms(log: &[LogRecord]) -> [bool; 5] {
    let mut seen = [false; 5];
    for r in log {
        if let LogRecord::Step { epoch: 0, loss, .. } = r {
            for (s, v) in seen.iter_mut().zip([loss.visual, loss.patch, loss.text, loss.separation, loss.mean]) {
                *s |= v.is_some_and(|x| x != 0.0 && x.is_finite());
            }
        }
    }
    seen
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub pooling: PoolName,
    pub loss_mode: LossMode,
    pub final_loss: f64,
    pub steps: u64,
    pub f1: Option<f64>,
    pub dice: Option<f64>,
    pub best_dice: Option<f64>,
}

pub const ABLATION_HEADER: &str = "pooling,separate_losses,mean_loss,final_loss,steps,f1,dice,best_dice";

fn pool_label(p: PoolName) -> &'static str {
    match p {
        PoolName::Gap => "GAP",
        PoolName::Gmp => "GMP",
        PoolName::Gwrp => "GWRP",
    }
}

impl AblationRow {
    /// Run directory under the grid's output directory.
    pub fn dir_name(&self) -> String {
        format!("{}-{}", pool_label(self.pooling).to_lowercase(), self.loss_mode.name())
    }

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{:.6},{},{},{},{}",
            pool_label(self.pooling),
            self.loss_mode.separate(),
            self.loss_mode.mean(),
            self.final_loss,
            self.steps,
            fmt_opt(self.f1),
            fmt_opt(self.dice),
            fmt_opt(self.best_dice)
        )
    }
}

/// The 3 × 3 grid of pooling kinds and loss combinations.
pub fn run_ablate(base: &RunConfig, out: &Path) -> Result<Vec<AblationRow>> {
    write_run_json(out, "ablate", base)?;
    let mut rows = Vec::new();
    for pooling in [PoolName::Gap, PoolName::Gmp, PoolName::Gwrp] {
        for mode in [LossMode::Separate, LossMode::Mean, LossMode::Both] {
            let mut cfg = base.clone();
            cfg.model.pooling.kind = pooling;
            cfg.train.loss_mode = mode;
            let mut row = AblationRow {
                pooling,
                loss_mode: mode,
                final_loss: f64::NAN,
                steps: 0,
                f1: None,
                dice: None,
                best_dice: None,
            };
            eprintln!("ablate: {} / {}", pool_label(pooling), mode.name());
            let (summary, report) = train_and_eval(&cfg, &out.join(row.dir_name()))?;
            row.final_loss = summary.final_loss;
            row.steps = summary.steps;
            row.f1 = report.f1.mean;
            row.dice = report.dice.mean;
            row.best_dice = report.best_dice();
            rows.push(row);
        }
    }
    let mut csv = format!("{ABLATION_HEADER}\n");
    for r in &rows {
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    write(&out.join("ablation.csv"), csv)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantRow {
    pub variant: Variant,
    pub report: MetricReport,
    pub first_epoch_terms: [bool; 5],
    pub final_loss: f64,
}

/// Column names of `comparison.csv` after `variant`.
pub fn comparison_columns(rows: &[VariantRow]) -> Vec<String> {
    rows.first()
        .map(|r| {
            let mut cols: Vec<String> = metric_rows(&r.report)
                .into_iter()
                .map(|(m, _, _)| m)
                .filter(|m| !m.starts_with("f1_"))
                .collect();
            cols.extend(["f1_visual", "f1_patch", "f1_text"].map(String::from));
            cols
        })
        .unwrap_or_default()
}

/// Baseline, token-fusion, text-guided and hybrid under shared seed and
/// data, each with its own map export of the test set.
pub fn run_compare(base: &RunConfig, out: &Path) -> Result<Vec<VariantRow>> {
    write_run_json(out, "compare", base)?;
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let mut cfg = base.clone();
        cfg.model.variant = variant;
        let dir = out.join(variant.name());
        eprintln!("compare: {variant}");
        let (summary, report) = train_and_eval(&cfg, &dir)?;
        run_explain(
            &dir.join(BEST_CKPT),
            &ExplainInput::Data {
                dir: test_dir(&cfg)?.to_path_buf(),
                limit: None,
            },
            &dir.join("explain"),
            cfg.eval.batch_size,
        )?;
        rows.push(VariantRow {
            variant,
            first_epoch_terms: first_epoch_terms(&summary.log),
            final_loss: summary.final_loss,
            report,
        });
    }
    let cols = comparison_columns(&rows);
    let mut csv = format!("variant,{}\n", cols.join(","));
    for r in &rows {
        let vals: Vec<(String, Option<f64>)> = metric_rows(&r.report).into_iter().map(|(m, v, _)| (m, v)).collect();
        let cell = |c: &str| {
            if let Some(b) = c.strip_prefix("f1_") {
                return fmt_opt(r.report.branch_f1.get(b).copied());
            }
            fmt_opt(vals.iter().find(|(m, _)| m == c).and_then(|(_, v)| *v))
        };
        let line: Vec<String> = cols.iter().map(|c| cell(c)).collect();
        csv.push_str(&format!("{},{}\n", r.variant.name(), line.join(",")));
    }
    write(&out.join("comparison.csv"), csv)?;
    Ok(rows)
}

/// Runs `f` once per seed under `out/seed-<s>` and writes a summary table.
pub fn for_seeds<T>(
    base: &RunConfig,
    seeds: &[u64],
    out: &Path,
    mut f: impl FnMut(&RunConfig, &Path) -> Result<T>,
) -> Result<Vec<(u64, T)>> {
    let mut results = Vec::new();
    for &s in seeds {
        let mut cfg = base.clone();
        cfg.train.seed = s;
        let dir = out.join(format!("seed-{s}"));
        results.push((s, f(&cfg, &dir)?));
    }
    Ok(results)
}

/// `seeds.csv` of train summaries with a mean row.
pub fn write_train_seed_summary(out: &Path, runs: &[(u64, TrainSummary)]) -> Result<()> {
    let mut csv = String::from("seed,epochs,final_loss,best_val_f1\n");
    for (s, r) in runs {
        csv.push_str(&format!("{s},{},{:.6},{}\n", r.epochs, r.final_loss, fmt_opt(r.best_val_f1)));
    }
    let n = runs.len().max(1) as f64;
    let loss = runs.iter().map(|(_, r)| r.final_loss).sum::<f64>() / n;
    let f1: Vec<f64> = runs.iter().filter_map(|(_, r)| r.best_val_f1).collect();
    let f1_mean = (!f1.is_empty()).then(|| f1.iter().sum::<f64>() / f1.len() as f64);
    csv.push_str(&format!("mean,,{loss:.6},{}\n", fmt_opt(f1_mean)));
    write(&out.join("seeds.csv"), csv)
}
