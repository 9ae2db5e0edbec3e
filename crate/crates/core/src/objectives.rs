use serde::{Deserialize, Serialize};
use viconex_autodiff::{Float, Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::model::BranchLogits;

/// Weights of the visual, patch, text and separation terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            delta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma, self.delta];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {w:?}")));
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err(Error::Config("all loss weights are zero".into()));
        }
        Ok(())
    }
}

/// Which concept-logit losses are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// One MLSM term per branch.
    Separate,
    /// A single MLSM term on the mean of the branch logits.
    Mean,
    Both,
}

impl LossMode {
    pub const ALL: [LossMode; 3] = [LossMode::Mean, LossMode::Separate, LossMode::Both];

    pub fn separate(self) -> bool {
        matches!(self, LossMode::Separate | LossMode::Both)
    }

    pub fn mean(self) -> bool {
        matches!(self, LossMode::Mean | LossMode::Both)
    }

    pub fn name(self) -> &'static str {
        match self {
            LossMode::Separate => "separate",
            LossMode::Mean => "mean",
            LossMode::Both => "both",
        }
    }
}

/// Per-term loss values; `None` marks a term that is not part of the
/// objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub visual: Option<f64>,
    pub patch: Option<f64>,
    pub text: Option<f64>,
    pub separation: Option<f64>,
    pub mean: Option<f64>,
    pub total: f64,
}

fn check_targets<T: Float>(g: &Graph<T>, logits: Var, targets: &Tensor<T>) -> Result<()> {
    if g.shape(logits) != targets.shape() {
        return Err(Error::Input(format!(
            "logits {:?} and targets {:?} differ in shape",
            g.shape(logits),
            targets.shape()
        )));
    }
    if targets.data().iter().any(|&y| y != T::zero() && y != T::one()) {
        return Err(Error::Input("targets must be 0 or 1".into()));
    }
    Ok(())
}

/// Multilabel soft margin loss averaged over every entry of `logits`
/// (concepts, and samples when batched).
pub fn mlsm<T: Float>(g: &mut Graph<T>, logits: Var, targets: &Tensor<T>) -> Result<Var> {
    check_targets(g, logits, targets)?;
    let neg = g.scale(logits, -T::one());
    let sp_neg = g.softplus(neg);
    let sp_pos = g.softplus(logits);
    let y = g.constant(targets.clone());
    let not_y = g.constant(targets.map(|v| T::one() - v));
    let a = g.mul(y, sp_neg)?;
    let b = g.mul(not_y, sp_pos)?;
    let s = g.add(a, b)?;
    Ok(g.mean_all(s))
}

/// Contrastive separation of concept tokens.
///
/// Each element of `layers` is `[C, D]` or `[B, C, D]`. Rows are
/// L2-normalized, `S = T·Tᵀ`, and the row-wise softmax of `S` is scored by
/// cross-entropy against the identity; the result is averaged over rows,
/// samples and layers.
pub fn separation_loss<T: Float>(g: &mut Graph<T>, layers: &[Var]) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::Input("separation loss needs at least one layer".into()));
    }
    let mut acc: Option<Var> = None;
    for &t in layers {
        let s = g.shape(t).to_vec();
        let t = match s.len() {
            2 => g.reshape(t, &[1, s[0], s[1]])?,
            3 => t,
            _ => return Err(Error::Input(format!("concept tokens must be [B, C, D], got {s:?}"))),
        };
        let s = g.shape(t).to_vec();
        let (b, c) = (s[0], s[1]);
        if c < 2 {
            return Err(Error::Input(format!("separation loss needs C >= 2, got {c}")));
        }
        let n = g.l2_normalize(t)?;
        let sim = g.bmm(n, n, true)?;
        let logp = g.log_softmax(sim)?;
        let mut eye = Tensor::zeros(&[c, c]);
        for i in 0..c {
            eye.data_mut()[i * c + i] = T::one();
        }
        let eye = g.constant(eye);
        let diag = g.mul_bcast(logp, eye)?;
        let sum = g.sum_all(diag);
        let term = g.scale(sum, T::lit(-1.0 / (b * c) as f64));
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    let total = acc.expect("non-empty");
    Ok(g.scale(total, T::lit(1.0 / layers.len() as f64)))
}

/// MLSM of the mean of the available branch logits.
pub fn mean_logit_loss<T: Float>(
    g: &mut Graph<T>,
    visual: Var,
    patch: Var,
    text: Option<Var>,
    targets: &Tensor<T>,
) -> Result<Var> {
    let mut sum = g.add(visual, patch)?;
    let mut k = 2.0;
    if let Some(t) = text {
        sum = g.add(sum, t)?;
        k += 1.0;
    }
    let mean = g.scale(sum, T::lit(1.0 / k));
    mlsm(g, mean, targets)
}

/// Weighted training objective.
///
/// Terms with zero weight, or absent from the configuration or variant, are
/// not built and are reported as `None`. The mean-logit term has unit
/// weight.
pub fn total_loss<T: Float>(
    g: &mut Graph<T>,
    logits: &BranchLogits,
    visual_layers: &[Var],
    targets: &Tensor<T>,
    weights: &LossWeights,
    mode: LossMode,
) -> Result<(Var, LossReport)> {
    weights.validate()?;
    let mut report = LossReport::default();
    let mut terms: Vec<(Var, f64)> = Vec::new();
    let mut add = |g: &mut Graph<T>, v: Var, w: f64| -> f64 {
        terms.push((v, w));
        g.value(v).item().as_f64()
    };
    if mode.separate() {
        if weights.alpha > 0.0 {
            let v = mlsm(g, logits.visual, targets)?;
            report.visual = Some(add(g, v, weights.alpha));
        }
        if weights.beta > 0.0 {
            let v = mlsm(g, logits.patch, targets)?;
            report.patch = Some(add(g, v, weights.beta));
        }
        if let (Some(t), true) = (logits.text, weights.gamma > 0.0) {
            let v = mlsm(g, t, targets)?;
            report.text = Some(add(g, v, weights.gamma));
        }
    }
    if mode.mean() {
        let v = mean_logit_loss(g, logits.visual, logits.patch, logits.text, targets)?;
        report.mean = Some(add(g, v, 1.0));
    }
    if weights.delta > 0.0 && !visual_layers.is_empty() {
        let v = separation_loss(g, visual_layers)?;
        report.separation = Some(add(g, v, weights.delta));
    }
    let Some((&(first, w0), rest)) = terms.split_first() else {
        return Err(Error::Config(format!(
            "loss mode {} with the given weights has no active term",
            mode.name()
        )));
    };
    let mut total = g.scale(first, T::lit(w0));
    for &(v, w) in rest {
        let s = g.scale(v, T::lit(w));
        total = g.add(total, s)?;
    }
    report.total = g.value(total).item().as_f64();
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn eval_mlsm(z: &[f64], y: &[f64]) -> f64 {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::from_f64(&[z.len()], z).unwrap());
        let t = Tensor::from_f64(&[y.len()], y).unwrap();
        let v = mlsm(&mut g, l, &t).unwrap();
        g.value(v).item()
    }

    fn eval_sep(rows: &[&[f64]]) -> f64 {
        let (c, d) = (rows.len(), rows[0].len());
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let mut g = Graph::<f64>::new();
        let t = g.constant(Tensor::from_f64(&[c, d], &flat).unwrap());
        let v = separation_loss(&mut g, &[t]).unwrap();
        g.value(v).item()
    }

    #[test]
    fn mlsm_closed_forms() {
        let ln2 = std::f64::consts::LN_2;
        assert_abs_diff_eq!(eval_mlsm(&[0.0, 0.0], &[1.0, 0.0]), ln2, epsilon = 1e-12);
        assert!(eval_mlsm(&[20.0], &[1.0]) < 1e-8);
        let expect = (ln2 + (4.0f64 / 3.0).ln()) / 2.0;
        assert_abs_diff_eq!(eval_mlsm(&[0.0, 3f64.ln()], &[1.0, 1.0]), expect, epsilon = 1e-12);
        assert_abs_diff_eq!(expect, 0.4904, epsilon = 1e-4);
    }

    #[test]
    fn mlsm_is_stable_for_large_logits() {
        let v = eval_mlsm(&[-800.0, 800.0], &[1.0, 0.0]);
        assert_abs_diff_eq!(v, 800.0, epsilon = 1e-9);
    }

    #[test]
    fn mlsm_rejects_soft_targets() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(&[2]));
        let t = Tensor::from_f64(&[2], &[0.5, 1.0]).unwrap();
        assert!(mlsm(&mut g, l, &t).is_err());
    }

    #[test]
    fn separation_closed_forms() {
        let e = std::f64::consts::E;
        let orth = eval_sep(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_abs_diff_eq!(orth, -(e / (e + 1.0)).ln(), epsilon = 1e-9);
        assert_abs_diff_eq!(orth, 0.3133, epsilon = 1e-4);
        let same = eval_sep(&[&[1.0, 2.0], &[1.0, 2.0]]);
        assert_abs_diff_eq!(same, std::f64::consts::LN_2, epsilon = 1e-9);
        assert!(orth < same);
    }

    #[test]
    fn separation_averages_layers() {
        let mut g = Graph::<f64>::new();
        let t = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.2, 0.3, 1.0]).unwrap());
        let one = separation_loss(&mut g, &[t]).unwrap();
        let two = separation_loss(&mut g, &[t, t]).unwrap();
        assert_abs_diff_eq!(g.value(one).item(), g.value(two).item(), epsilon = 1e-15);
    }

    #[test]
    fn separation_needs_two_concepts() {
        let mut g = Graph::<f64>::new();
        let t = g.constant(Tensor::ones(&[1, 4]));
        assert!(separation_loss(&mut g, &[t]).is_err());
        assert!(separation_loss(&mut g, &[]).is_err());
    }

    fn branches(g: &mut Graph<f64>, v: &[f64], p: &[f64], t: Option<&[f64]>) -> BranchLogits {
        let c = v.len();
        BranchLogits {
            visual: g.constant(Tensor::from_f64(&[c], v).unwrap()),
            patch: g.constant(Tensor::from_f64(&[c], p).unwrap()),
            text: t.map(|t| g.constant(Tensor::from_f64(&[c], t).unwrap())),
        }
    }

    #[test]
    fn mean_logit_cancellation() {
        let mut g = Graph::<f64>::new();
        let b = branches(&mut g, &[2.0], &[-2.0], Some(&[0.0]));
        let y = Tensor::from_f64(&[1], &[1.0]).unwrap();
        let v = mean_logit_loss(&mut g, b.visual, b.patch, b.text, &y).unwrap();
        assert_abs_diff_eq!(g.value(v).item(), std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn total_reproduces_weighted_sum() {
        let mut g = Graph::<f64>::new();
        let b = branches(&mut g, &[0.3, -1.0], &[1.2, 0.1], Some(&[-0.4, 0.9]));
        let tok = g.constant(Tensor::from_f64(&[2, 3], &[1.0, 0.5, 0.0, 0.2, 1.0, 0.3]).unwrap());
        let y = Tensor::from_f64(&[2], &[1.0, 0.0]).unwrap();
        let w = LossWeights {
            alpha: 0.5,
            beta: 2.0,
            gamma: 1.5,
            delta: 0.25,
        };
        let (_, r) = total_loss(&mut g, &b, &[tok], &y, &w, LossMode::Both).unwrap();
        let expect = 0.5 * r.visual.unwrap()
            + 2.0 * r.patch.unwrap()
            + 1.5 * r.text.unwrap()
            + 0.25 * r.separation.unwrap()
            + r.mean.unwrap();
        assert_abs_diff_eq!(r.total, expect, epsilon = 1e-12);
    }

    #[test]
    fn table_configurations_select_terms() {
        let mut g = Graph::<f64>::new();
        let b = branches(&mut g, &[0.3], &[1.2], Some(&[-0.4]));
        let tok = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = Tensor::from_f64(&[1], &[1.0]).unwrap();
        let w = LossWeights::default();
        let (_, r) = total_loss(&mut g, &b, &[tok], &y, &w, LossMode::Separate).unwrap();
        assert!(r.visual.is_some() && r.patch.is_some() && r.text.is_some());
        assert!(r.separation.is_some() && r.mean.is_none());
        let (_, r) = total_loss(&mut g, &b, &[tok], &y, &w, LossMode::Mean).unwrap();
        assert!(r.visual.is_none() && r.patch.is_none() && r.text.is_none());
        assert!(r.mean.is_some());
        let nb = BranchLogits { text: None, ..b };
        let (_, r) = total_loss(&mut g, &nb, &[tok], &y, &w, LossMode::Separate).unwrap();
        assert!(r.text.is_none());
    }

    #[test]
    fn zero_delta_ignores_token_geometry() {
        let w = LossWeights {
            delta: 0.0,
            ..Default::default()
        };
        let y = Tensor::from_f64(&[1], &[1.0]).unwrap();
        let mut totals = Vec::new();
        for tok in [[1.0, 0.0, 0.0, 1.0], [1.0, 1.0, 1.0, 1.0]] {
            let mut g = Graph::<f64>::new();
            let b = branches(&mut g, &[0.3], &[1.2], None);
            let t = g.constant(Tensor::from_f64(&[2, 2], &tok).unwrap());
            let (_, r) = total_loss(&mut g, &b, &[t], &y, &w, LossMode::Separate).unwrap();
            assert!(r.separation.is_none());
            totals.push(r.total);
        }
        assert_eq!(totals[0], totals[1]);
    }

    #[test]
    fn all_zero_weights_rejected() {
        let w = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            delta: 0.0,
        };
        assert!(w.validate().is_err());
        assert!(LossWeights {
            alpha: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
