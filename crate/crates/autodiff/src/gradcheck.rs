//! Finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use rand::seq::index::sample;
use rand::Rng;

/// Denominator floor for [`relative_error`]; below this magnitude the
/// comparison degrades to an absolute one.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Flat coordinate with the largest error.
    pub worst_coord: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Finite-difference formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(θ+h) − f(θ−h)) / 2h`, error `O(h²)`.
    #[default]
    Central,
    /// `(f(θ−2h) − 8f(θ−h) + 8f(θ+h) − f(θ+2h)) / 12h`, error `O(h⁴)`.
    FivePoint,
    /// Ridders' extrapolation of central differences over steps shrinking
    /// from `h` by a factor 1.4, stopping when the error estimate grows.
    Ridders { levels: usize },
}

fn ridders(mut at: impl FnMut(f64) -> f64, h: f64, levels: usize) -> f64 {
    const CON: f64 = 1.4;
    const CON2: f64 = CON * CON;
    const SAFE: f64 = 2.0;
    let levels = levels.max(2);
    let mut tab = vec![vec![0.0; levels]; levels];
    let mut step = h;
    tab[0][0] = (at(step) - at(-step)) / (2.0 * step);
    let mut best = tab[0][0];
    let mut err = f64::INFINITY;
    for i in 1..levels {
        step /= CON;
        tab[0][i] = (at(step) - at(-step)) / (2.0 * step);
        let mut fac = CON2;
        for j in 1..=i {
            tab[j][i] = (tab[j - 1][i] * fac - tab[j - 1][i - 1]) / (fac - 1.0);
            fac *= CON2;
            let e = (tab[j][i] - tab[j - 1][i]).abs().max((tab[j][i] - tab[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = tab[j][i];
            }
        }
        if (tab[i][i] - tab[i - 1][i - 1]).abs() >= SAFE * err {
            break;
        }
    }
    best
}

/// Compares `analytic[i]` against the central difference of `f` for every
/// `i` in `coords`.
pub fn grad_check<F>(f: F, params: &[f64], analytic: &[f64], coords: &[usize], eps: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    grad_check_with(f, params, analytic, coords, eps, Stencil::Central)
}

pub fn grad_check_with<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    coords: &[usize],
    eps: f64,
    stencil: Stencil,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    let mut theta = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst_coord: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for &i in coords {
        let orig = theta[i];
        let mut at = |d: f64| {
            theta[i] = orig + d;
            f(&theta)
        };
        let h = eps;
        let numeric = match stencil {
            Stencil::Central => (at(h) - at(-h)) / (2.0 * h),
            Stencil::FivePoint => (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h),
            Stencil::Ridders { levels } => ridders(&mut at, h, levels),
        };
        theta[i] = orig;
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.checked == 1 {
            report.max_rel_error = err.max(report.max_rel_error);
            report.worst_coord = i;
            report.worst_analytic = analytic[i];
            report.worst_numeric = numeric;
        }
    }
    report
}

/// Up to `count` distinct coordinates drawn uniformly from `0..total`.
pub fn sample_coords<R: Rng + ?Sized>(rng: &mut R, total: usize, count: usize) -> Vec<usize> {
    let mut v = sample(rng, total, count.min(total)).into_vec();
    v.sort_unstable();
    v
}

/// Gradient check of a loss built on a fresh graph from `params`.
///
/// `build` receives the graph and one parameter handle per input tensor and
/// returns the scalar loss. `coords` index the concatenation of all
/// parameters; `None` checks every coordinate.
pub fn grad_check_graph<B>(
    params: &[Tensor<f64>],
    eps: f64,
    coords: Option<&[usize]>,
    build: B,
) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let shapes: Vec<Vec<usize>> = params.iter().map(|p| p.shape().to_vec()).collect();
    let flat: Vec<f64> = params.iter().flat_map(|p| p.data().iter().copied()).collect();

    let eval = |theta: &[f64], want_grad: bool| -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::<f64>::new();
        let mut vars = Vec::with_capacity(shapes.len());
        let mut off = 0;
        for s in &shapes {
            let n: usize = s.iter().product();
            vars.push(g.param(Tensor::new(s, theta[off..off + n].to_vec())?));
            off += n;
        }
        let loss = build(&mut g, &vars)?;
        let value = g.value(loss).item();
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(loss)?;
        let mut out = Vec::with_capacity(theta.len());
        for &v in &vars {
            out.extend_from_slice(grads.get_or_zeros(&g, v).data());
        }
        Ok((value, out))
    };

    let (_, analytic) = eval(&flat, true)?;
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..flat.len()).collect();
            &all
        }
    };
    let mut failure = None;
    let report = grad_check(
        |theta| match eval(theta, false) {
            Ok((v, _)) => v,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        &flat,
        &analytic,
        coords,
        eps,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}
