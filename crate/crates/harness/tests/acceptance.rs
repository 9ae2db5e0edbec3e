//! Acceptance suite: one line per criterion, `PASS` or `FAIL`, with the
//! measured values next to the pinned thresholds.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synskin::{generate_dataset, sample_seed, Mask, SynSample, SynSkinConfig, SynSkinGenerator, COLOR_COUNT};
use tempfile::TempDir;
use viconex_core::autodiff::{grad_check_with, sample_coords, Graph, Stencil, Tensor};
use viconex_core::explain::{fuse_vtc, refine_affinity, AffinityMatrix, LocalizationMap};
use viconex_core::metrics::{auc, cl_score, dice, multilabel_stats, pointing_game, sparseness};
use viconex_core::objectives::{mean_logit_loss, mlsm, separation_loss, total_loss, LossMode, LossWeights};
use viconex_core::{forward, init_params, ForwardOptions, MetricReport, ModelConfig, ParamStore, TextConceptBank};
use viconex_harness::pipeline::{run_ablate, run_compare, train_and_eval};
use viconex_harness::RunConfig;

const GRAD_COORDS: usize = 500;
const GRAD_MAX_REL_ERR: f64 = 1e-6;
const GRAD_MAX_TIME: Duration = Duration::from_secs(300);
const GRAD_STEP: f64 = 1e-2;
const GRAD_RIDDERS_LEVELS: usize = 6;

const CLOSED_FORM_TOL: f64 = 1e-6;
const REFINE_TOL: f64 = 1e-6;
const REFINE_INSTANCES: usize = 100;
const AUC_INSTANCES: usize = 100;
const AUC_MAX_N: usize = 200;

const SYNSKIN_SAMPLES: usize = 5000;
const SYNSKIN_SIGMAS: f64 = 3.0;

const DESK_TRAIN: usize = 2000;
const DESK_VAL: usize = 250;
const DESK_TEST: usize = 250;
const DESK_MIN_F1: f64 = 0.95;
const DESK_MIN_AUC: f64 = 0.98;
const DESK_MIN_DICE: f64 = 0.45;
const DESK_MAX_TIME: Duration = Duration::from_secs(45 * 60);

const POINTING_MARGIN: f64 = 0.2;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

// ---------------------------------------------------------------------------
// 1. Full-model gradient

fn model_loss(cfg: &ModelConfig, p: &ParamStore<f64>, x: &Tensor<f64>, y: &Tensor<f64>) -> (f64, Vec<f64>) {
    let mut f = forward(cfg, p, x, ForwardOptions::train()).expect("forward");
    let (l, _) = total_loss(&mut f.graph, &f.logits, &f.visual_layers, y, &LossWeights::default(), LossMode::Both)
        .expect("loss");
    let value = f.graph.value(l).item();
    let g = f.graph.backward(l).expect("backward");
    let grad = p
        .params()
        .flat_map(|(name, _)| g.get_or_zeros(&f.graph, f.params[name]).data().to_vec())
        .collect();
    (value, grad)
}

fn gradient() -> Outcome {
    let started = Instant::now();
    let mut cfg = ModelConfig::default();
    cfg.init_std = 0.09;
    let names: Vec<String> = (0..cfg.concepts).map(|i| format!("c{i}")).collect();
    let bank = TextConceptBank::synthetic(names, cfg.text_dim, 1).expect("bank");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut p: ParamStore<f64> = init_params(&cfg, Some(&bank), &mut rng).expect("init");
    for (name, t) in p.params_mut() {
        let scale = if name.ends_with("ls1") || name.ends_with("ls2") {
            0.5
        } else if name.ends_with("gamma") {
            1.0
        } else {
            continue;
        };
        t.data_mut().iter_mut().for_each(|v| *v = scale * (0.5 + rng.gen::<f64>()));
    }
    let b = 2;
    let s = cfg.image_size;
    let x = Tensor::<f64>::trunc_normal(&[b, s, s, 3], 0.3, &mut rng).map(|v| v + 0.5);
    let yv: Vec<f64> = (0..b * cfg.concepts).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let y = Tensor::<f64>::from_f64(&[b, cfg.concepts], &yv).expect("targets");

    let (_, analytic) = model_loss(&cfg, &p, &x, &y);
    let flat = p.flatten();
    let coords = sample_coords(&mut rng, flat.len(), GRAD_COORDS);
    let mut q = p.clone();
    let r = grad_check_with(
        |theta| {
            q.unflatten(theta).expect("unflatten");
            let mut f = forward(&cfg, &q, &x, ForwardOptions::train()).expect("forward");
            let (l, _) =
                total_loss(&mut f.graph, &f.logits, &f.visual_layers, &y, &LossWeights::default(), LossMode::Both)
                    .expect("loss");
            f.graph.value(l).item()
        },
        &flat,
        &analytic,
        &coords,
        GRAD_STEP,
        Stencil::Ridders {
            levels: GRAD_RIDDERS_LEVELS,
        },
    );
    let elapsed = started.elapsed();
    check(
        r.checked >= GRAD_COORDS && r.max_rel_error < GRAD_MAX_REL_ERR && elapsed < GRAD_MAX_TIME,
        format!(
            "{} of {} parameters, max rel err {:.2e} (< {GRAD_MAX_REL_ERR:.0e}), {:.0}s (< {}s)",
            r.checked,
            flat.len(),
            r.max_rel_error,
            elapsed.as_secs_f64(),
            GRAD_MAX_TIME.as_secs()
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. Loss closed forms

fn scalar_loss(build: impl FnOnce(&mut Graph<f64>) -> viconex_core::autodiff::Var) -> f64 {
    let mut g = Graph::new();
    let v = build(&mut g);
    g.value(v).item()
}

fn vec1(g: &mut Graph<f64>, v: &[f64]) -> viconex_core::autodiff::Var {
    g.constant(Tensor::from_f64(&[v.len()], v).expect("tensor"))
}

fn mlsm_of(z: &[f64], y: &[f64]) -> f64 {
    scalar_loss(|g| {
        let l = vec1(g, z);
        mlsm(g, l, &Tensor::from_f64(&[y.len()], y).expect("targets")).expect("mlsm")
    })
}

fn separation_of(rows: &[&[f64]], copies: usize) -> f64 {
    scalar_loss(|g| {
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let t = g.constant(Tensor::from_f64(&[rows.len(), rows[0].len()], &flat).expect("tokens"));
        separation_loss(g, &vec![t; copies]).expect("separation")
    })
}

fn closed_forms() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let e = std::f64::consts::E;
    let cases: Vec<(&str, f64, f64)> = vec![
        ("mlsm z=0 y=1", mlsm_of(&[0.0], &[1.0]), ln2),
        ("mlsm z=0 y=0", mlsm_of(&[0.0], &[0.0]), ln2),
        ("mlsm z=20 y=1", mlsm_of(&[20.0], &[1.0]), 0.0),
        (
            "mlsm z=(0,ln3) y=(1,1)",
            mlsm_of(&[0.0, 3f64.ln()], &[1.0, 1.0]),
            (ln2 + (4.0f64 / 3.0).ln()) / 2.0,
        ),
        (
            "separation orthogonal C=2",
            separation_of(&[&[1.0, 0.0], &[0.0, 1.0]], 1),
            -(e / (e + 1.0)).ln(),
        ),
        (
            "separation orthogonal C=3",
            separation_of(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]], 1),
            -(e / (e + 2.0)).ln(),
        ),
        ("separation identical C=2", separation_of(&[&[0.6, 0.8], &[0.6, 0.8]], 1), ln2),
        (
            "separation duplicated layer",
            separation_of(&[&[1.0, 0.2], &[0.3, 1.0]], 2),
            separation_of(&[&[1.0, 0.2], &[0.3, 1.0]], 1),
        ),
        (
            "mean-logit (2,-2,0) y=1",
            scalar_loss(|g| {
                let (v, p, t) = (vec1(g, &[2.0]), vec1(g, &[-2.0]), vec1(g, &[0.0]));
                mean_logit_loss(g, v, p, Some(t), &Tensor::from_f64(&[1], &[1.0]).expect("y")).expect("mean")
            }),
            ln2,
        ),
    ];
    let worst = cases
        .iter()
        .map(|(n, got, want)| ((got - want).abs(), *n))
        .fold((0.0, ""), |a, b| if b.0 > a.0 { b } else { a });
    let mlsm_saturates = cases[2].1 < 1e-8;
    let ordered = cases[4].1 < cases[6].1;
    check(
        worst.0 <= CLOSED_FORM_TOL && mlsm_saturates && ordered,
        format!(
            "{} closed forms, worst |diff| {:.1e} ({}) (<= {CLOSED_FORM_TOL:.0e}); orthogonal < identical: {ordered}",
            cases.len(),
            worst.0,
            if worst.1.is_empty() { "-" } else { worst.1 }
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. Affinity refinement

fn four_index(aff: &AffinityMatrix, a: &LocalizationMap) -> Vec<f64> {
    let (n, c) = (a.height, a.concepts);
    let mut out = vec![0.0; n * n * c];
    for i in 0..n {
        for j in 0..n {
            for ch in 0..c {
                let mut s = 0.0;
                for k in 0..n {
                    for l in 0..n {
                        s += aff.values[(i * n + j) * n * n + k * n + l] * a.get(k, l, ch);
                    }
                }
                out[(i * n + j) * c + ch] = s;
            }
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn refinement() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut exact = true;
    for i in 0..REFINE_INSTANCES {
        let n = 2 + i % 3;
        let m = n * n;
        let c = rng.gen_range(1..=4);
        let aff = AffinityMatrix::new(m, (0..m * m).map(|_| rng.gen::<f64>()).collect())
            .expect("affinity")
            .row_normalize();
        let a = LocalizationMap::new(n, n, c, (0..m * c).map(|_| rng.gen_range(0.0..2.0)).collect()).expect("map");
        worst = worst.max(max_diff(&refine_affinity(&aff, &a).expect("refine").values, &four_index(&aff, &a)));

        let id = refine_affinity(&AffinityMatrix::identity(m), &a).expect("identity");
        exact &= id.values == a.values;
        let fused = fuse_vtc(&a, Some(&LocalizationMap::zeros(n, n, c))).expect("fuse");
        exact &= fused.values == a.values;
        let alone = fuse_vtc(&a, None).expect("fuse");
        exact &= alone.values == a.values;
    }
    check(
        worst <= REFINE_TOL && exact,
        format!(
            "{REFINE_INSTANCES} instances (N in 2..=4), max |fast - 4-index| {worst:.1e} (<= {REFINE_TOL:.0e}); identity and zero-text exact: {exact}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. Metrics

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                den += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

fn metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut auc_ok = 0;
    for i in 0..AUC_INSTANCES {
        let n = rng.gen_range(2..=AUC_MAX_N);
        let levels = if i % 2 == 0 { 7 } else { 1000 };
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        if auc(&scores, &labels) == pairwise_auc(&scores, &labels) {
            auc_ok += 1;
        }
    }
    let stats = multilabel_stats(&[0.9, 0.2], &[true, true], 1, 0.5).expect("stats");
    let mut one_hot = vec![0.0; 5];
    one_hot[2] = 1.0;
    let examples: Vec<(&str, bool)> = vec![
        ("auc hand", auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]) == Some(0.75)),
        ("auc separated", auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]) == Some(1.0)),
        ("auc ties", auc(&[0.5; 4], &[false, true, false, true]) == Some(0.5)),
        ("acc/f1 hand", stats.acc == 0.5 && (stats.f1 - 2.0 / 3.0).abs() < 1e-12),
        ("dice identical", dice(&[true, true, false], &[true, true, false]).ok() == Some(1.0)),
        ("dice disjoint", dice(&[true, false], &[false, true]).ok() == Some(0.0)),
        (
            "dice 4/4/2",
            dice(
                &[true, true, true, true, false, false],
                &[false, false, true, true, true, true],
            ).ok() == Some(0.5),
        ),
        ("dice both empty", dice(&[false; 4], &[false; 4]).ok() == Some(1.0)),
        ("cl (1,1)", cl_score(1.0, 1.0) == 1.0),
        ("cl (x,0)", cl_score(0.8, 0.0) == 0.0),
        ("cl (0.64,0.25)", (cl_score(0.64, 0.25) - 0.4).abs() < 1e-12),
        ("sparseness uniform", sparseness(&[0.3; 9]).is_some_and(|v| v.abs() < 1e-12)),
        ("sparseness one-hot", sparseness(&one_hot).is_some_and(|v| (v - 0.8).abs() < 1e-12)),
        ("sparseness (1,3)", sparseness(&[1.0, 3.0]).is_some_and(|v| (v - 0.25).abs() < 1e-12)),
        ("pointing inside", pointing_game(&[0.1, 0.9, 0.2], &[false, true, false]).ok() == Some(Some(true))),
        ("pointing outside", pointing_game(&[0.9, 0.1, 0.2], &[false, true, false]).ok() == Some(Some(false))),
        ("pointing tie", pointing_game(&[0.5, 0.5], &[false, true]).ok() == Some(Some(false))),
    ];
    let failed: Vec<&str> = examples.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    check(
        auc_ok == AUC_INSTANCES && failed.is_empty(),
        format!(
            "auc = pairwise oracle on {auc_ok}/{AUC_INSTANCES} instances (n <= {AUC_MAX_N}); {}/{} hand examples{}",
            examples.len() - failed.len(),
            examples.len(),
            if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. SynSkin generator

fn sample_ok(s: &SynSample) -> bool {
    let (w, h) = (s.lesion_mask.width(), s.lesion_mask.height());
    let union = s.color_masks.iter().fold(Mask::empty(w, h), |a, m| a.union(m));
    let labels = (0..COLOR_COUNT).all(|c| s.labels[c] == !s.color_masks[c].is_empty());
    let disjoint =
        (0..COLOR_COUNT).all(|c| (c + 1..COLOR_COUNT).all(|d| s.color_masks[c].intersection_count(&s.color_masks[d]) == 0));
    union == s.lesion_mask && labels && disjoint
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).expect("read_dir") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).expect("prefix").to_path_buf();
                out.insert(rel, std::fs::read(&p).expect("read"));
            }
        }
    }
    out
}

fn synskin() -> Outcome {
    let gen = SynSkinGenerator::new(SynSkinConfig::default()).expect("generator");
    let master = 2024;
    let mut valid = 0;
    let mut counts = [0usize; COLOR_COUNT];
    let mut identical = true;
    for i in 0..SYNSKIN_SAMPLES {
        let seed = sample_seed(master, i as u64);
        let s = gen.generate(seed).expect("sample");
        valid += sample_ok(&s) as usize;
        for c in 0..COLOR_COUNT {
            counts[c] += s.labels[c] as usize;
        }
        if i % 10 == 0 {
            identical &= gen.generate(seed).expect("sample") == s;
        }
    }
    let tmp = TempDir::new().expect("tempdir");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    generate_dataset(&gen, 50, master, &a).expect("dataset");
    generate_dataset(&gen, 50, master, &b).expect("dataset");
    identical &= tree(&a) == tree(&b);

    let n = SYNSKIN_SAMPLES as f64;
    let expected = gen.bank.implied_marginals();
    let mut worst_z = 0.0f64;
    for c in 0..COLOR_COUNT {
        let p = expected[c];
        let sigma = (p * (1.0 - p) / n).sqrt();
        worst_z = worst_z.max((counts[c] as f64 / n - p).abs() / sigma);
    }
    let observed: Vec<String> = counts.iter().map(|&k| format!("{:.3}", k as f64 / n)).collect();
    let configured: Vec<String> = expected.iter().map(|p| format!("{p:.3}")).collect();
    check(
        valid == SYNSKIN_SAMPLES && worst_z <= SYNSKIN_SIGMAS && identical,
        format!(
            "{valid}/{SYNSKIN_SAMPLES} samples consistent; marginals [{}] vs configured [{}], worst {worst_z:.2} sigma (<= {SYNSKIN_SIGMAS}); byte-identical regeneration: {identical}",
            observed.join(" "),
            configured.join(" ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 6 and 9. Desk-scale training and map quality

fn generate_split(dir: &Path, count: usize, seed: u64) {
    let gen = SynSkinGenerator::new(SynSkinConfig::default()).expect("generator");
    generate_dataset(&gen, count, seed, dir).expect("dataset");
}

fn desk_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::load(Some(&workspace_root().join("configs/desk.toml")), &[]).expect("desk config");
    cfg.data.train = root.join("data/train");
    cfg.data.val = Some(root.join("data/val"));
    cfg.data.test = Some(root.join("data/test"));
    cfg
}

fn desk_run() -> Result<(MetricReport, Duration), String> {
    let tmp = TempDir::new().expect("tempdir");
    let root = tmp.path();
    let started = Instant::now();
    generate_split(&root.join("data/train"), DESK_TRAIN, 11);
    generate_split(&root.join("data/val"), DESK_VAL, 12);
    generate_split(&root.join("data/test"), DESK_TEST, 13);
    let cfg = desk_config(root);
    let (_, report) = train_and_eval(&cfg, &root.join("run")).map_err(|e| e.to_string())?;
    Ok((report, started.elapsed()))
}

fn desk_training(run: &Result<(MetricReport, Duration), String>) -> Outcome {
    let (r, took) = run.as_ref().map_err(|e| format!("run failed: {e}"))?;
    let f1 = r.f1.value();
    let auc = r.auc.value();
    let best = r.best_dice().unwrap_or(f64::NAN);
    let whole = r.whole_lesion_dice.unwrap_or(f64::NAN);
    check(
        f1 >= DESK_MIN_F1 && auc >= DESK_MIN_AUC && best >= DESK_MIN_DICE && best > whole && *took <= DESK_MAX_TIME,
        format!(
            "test F1 {f1:.4} (>= {DESK_MIN_F1}), AUC {auc:.4} (>= {DESK_MIN_AUC}), Dice {best:.4} at tau {} (>= {DESK_MIN_DICE}, > whole-lesion {whole:.4}), {:.1} min (<= {})",
            r.best_tau.map_or("-".into(), |t| t.to_string()),
            took.as_secs_f64() / 60.0,
            DESK_MAX_TIME.as_secs() / 60
        ),
    )
}

fn xai_sanity(run: &Result<(MetricReport, Duration), String>) -> Outcome {
    let (r, _) = run.as_ref().map_err(|e| format!("run failed: {e}"))?;
    let hit = r.pointing_game.value();
    let base = r.pointing_baseline.unwrap_or(f64::NAN);
    let sparse = r.sparseness.value();
    let uniform = sparseness(&[1.0; 64]).unwrap_or(f64::NAN);
    check(
        hit - base >= POINTING_MARGIN && sparse > uniform,
        format!(
            "pointing game {hit:.4} vs area baseline {base:.4} (margin {:.4} >= {POINTING_MARGIN}, n={}); sparseness {sparse:.4} > uniform {uniform:.4}",
            hit - base,
            r.pointing_game.n
        ),
    )
}

// ---------------------------------------------------------------------------
// 7, 8 and 10. Plumbing on a small model

fn small_data(root: &Path) {
    generate_split(&root.join("data/train"), 96, 21);
    generate_split(&root.join("data/val"), 32, 22);
    generate_split(&root.join("data/test"), 32, 23);
}

fn small_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::load(
        Some(&workspace_root().join("configs/smoke.toml")),
        &["model.dim=16".into(), "model.text_dim=16".into()],
    )
    .expect("smoke config");
    cfg.data.train = root.join("data/train");
    cfg.data.val = Some(root.join("data/val"));
    cfg.data.test = Some(root.join("data/test"));
    cfg.eval.xai_images = Some(4);
    cfg
}

fn variants() -> Outcome {
    let tmp = TempDir::new().expect("tempdir");
    small_data(tmp.path());
    let mut cfg = small_config(tmp.path());
    cfg.train.epochs = 1;
    let out = tmp.path().join("compare");
    let rows = run_compare(&cfg, &out).map_err(|e| e.to_string())?;
    let csv = std::fs::read_to_string(out.join("comparison.csv")).map_err(|e| e.to_string())?;
    let header: Vec<&str> = csv.lines().next().unwrap_or_default().split(',').collect();
    let text_col = header.iter().position(|h| *h == "f1_text");
    let cell = |variant: &str| {
        csv.lines()
            .find(|l| l.starts_with(&format!("{variant},")))
            .and_then(|l| text_col.and_then(|i| l.split(',').nth(i).map(str::to_string)))
    };
    let complete = rows.len() == 4 && csv.lines().count() == 5;
    let baseline = rows.iter().find(|r| r.variant.name() == "baseline");
    let baseline_ok = baseline.is_some_and(|b| !b.report.text_branch && !b.report.branch_f1.contains_key("text"))
        && cell("baseline").as_deref() == Some("")
        && cell("hybrid").is_some_and(|c| !c.is_empty());
    let hybrid_terms = rows
        .iter()
        .find(|r| r.variant.name() == "hybrid")
        .map(|r| r.first_epoch_terms)
        .unwrap_or_default();
    let all_four = hybrid_terms[..4].iter().all(|&t| t);
    let maps = rows.iter().all(|r| out.join(r.variant.name()).join("explain/maps/index.json").is_file());
    check(
        complete && baseline_ok && all_four && maps,
        format!(
            "{} rows (4 expected); baseline without text metrics: {baseline_ok}; hybrid first-epoch visual/patch/text/separation nonzero: {hybrid_terms:?}; map exports: {maps}",
            rows.len()
        ),
    )
}

fn ablation() -> Outcome {
    let tmp = TempDir::new().expect("tempdir");
    small_data(tmp.path());
    let mut cfg = small_config(tmp.path());
    cfg.train.epochs = 1;
    cfg.eval.xai_images = Some(0);
    let out = tmp.path().join("ablate");
    let rows = run_ablate(&cfg, &out).map_err(|e| e.to_string())?;
    let csv = std::fs::read_to_string(out.join("ablation.csv")).map_err(|e| e.to_string())?;
    let finite = rows.iter().filter(|r| r.final_loss.is_finite()).count();
    let mut logs: Vec<Vec<u8>> = rows
        .iter()
        .map(|r| {
            std::fs::read(out.join(r.dir_name()).join("train_log.jsonl")).unwrap_or_default()
        })
        .collect();
    logs.sort();
    logs.dedup();
    check(
        rows.len() == 9 && csv.lines().count() == 10 && finite == 9 && logs.len() == 9,
        format!(
            "{} rows (9 expected), {finite} with finite final loss, {} distinct step logs",
            rows.len(),
            logs.len()
        ),
    )
}

fn cli(root: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_viconex"))
        .args(args)
        .current_dir(root)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("viconex {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn end_to_end(root: &Path) -> Result<(), String> {
    std::fs::copy(workspace_root().join("configs/smoke.toml"), root.join("run.toml")).map_err(|e| e.to_string())?;
    for (split, count, seed) in [("train", "48", "31"), ("val", "16", "32"), ("test", "16", "33")] {
        cli(root, &["synskin", "generate", "--count", count, "--seed", seed, "--out", &format!("data/{split}")])?;
    }
    cli(root, &["train", "--config", "run.toml", "--set", "model.dim=16", "--out", "run"])?;
    cli(root, &["eval", "--ckpt", "run/best.ckpt", "--data", "data/test", "--out", "eval"])?;
    cli(root, &["explain", "--ckpt", "run/best.ckpt", "--data", "data/test", "--out", "explain"])?;
    cli(root, &["explain", "--ckpt", "run/best.ckpt", "--image", "data/test/images/000000.png", "--out", "single"])
}

fn determinism() -> Outcome {
    let tmp = TempDir::new().expect("tempdir");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for r in [&a, &b] {
        std::fs::create_dir_all(r).map_err(|e| e.to_string())?;
        end_to_end(r)?;
    }
    let (ta, tb) = (tree(&a), tree(&b));
    let differing: Vec<String> = ta
        .keys()
        .chain(tb.keys())
        .filter(|k| ta.get(*k) != tb.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let pngs = ta.keys().filter(|k| k.extension().is_some_and(|e| e == "png")).count();
    check(
        differing.is_empty() && ta.len() > 10,
        format!(
            "{} files ({pngs} PNG) from generate, train, eval and explain; {} differ{}",
            ta.len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(": {}", differing.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------------------

fn guarded(f: &mut dyn FnMut() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(|| f())) {
        Ok(r) => r,
        Err(p) => Err(format!(
            "panicked: {}",
            p.downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default()
        )),
    }
}

fn main() {
    // `cargo test -- --list` and filtered invocations should not start the suite.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    if let Some(filter) = args.iter().find(|a| !a.starts_with('-')) {
        if !"acceptance".contains(filter.as_str()) {
            return;
        }
    }

    // `ACCEPTANCE_CRITERIA=2,3,4` runs a subset; the default is all ten.
    let selected: Option<Vec<u8>> = std::env::var("ACCEPTANCE_CRITERIA")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |n: u8| selected.as_ref().map_or(true, |s| s.contains(&n));

    let mut results: Vec<(u8, &str, Outcome)> = Vec::new();
    let mut report = |n: u8, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(n) {
            return;
        }
        let r = guarded(f);
        let (tag, detail) = match &r {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {n:>2} {tag} {name}: {detail}");
        results.push((n, name, r));
    };

    let desk = if wanted(6) || wanted(9) {
        catch_unwind(desk_run).unwrap_or_else(|_| Err("desk run panicked".into()))
    } else {
        Err("not run".into())
    };
    report(1, "full-model gradient", &mut gradient);
    report(2, "loss closed forms", &mut closed_forms);
    report(3, "affinity refinement oracle", &mut refinement);
    report(4, "metric oracles", &mut metrics);
    report(5, "synthetic generator invariants", &mut synskin);
    report(6, "desk-scale training", &mut || desk_training(&desk));
    report(7, "variant comparison plumbing", &mut variants);
    report(8, "ablation grid plumbing", &mut ablation);
    report(9, "explanation metric sanity", &mut || xai_sanity(&desk));
    report(10, "end-to-end determinism", &mut determinism);

    let failed: Vec<u8> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" ({failed:?})") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
