//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Relative tolerance for coordinates with a non-negligible gradient.
    pub rel_tol: f64,
    /// Absolute tolerance used once both gradients fall below `zero_threshold`.
    pub abs_tol: f64,
    pub zero_threshold: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-6,
            rel_tol: 1e-4,
            abs_tol: 1e-8,
            zero_threshold: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordCheck {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Relative error, or absolute error when the fallback applied.
    pub error: f64,
    pub absolute_fallback: bool,
    pub passed: bool,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub coords: Vec<CoordCheck>,
    pub max_rel_err: f64,
    pub max_abs_fallback_err: f64,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.coords.len()
    }

    pub fn passed(&self) -> bool {
        self.coords.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CoordCheck> {
        self.coords.iter().filter(|c| !c.passed)
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.max_abs_fallback_err = self.max_abs_fallback_err.max(other.max_abs_fallback_err);
        self.coords.extend(other.coords);
    }
}

/// Picks `count` coordinates, cycling through the parameter tensors so every
/// tensor is represented.
pub fn sample_coords(params: &[Tensor<f64>], count: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let live: Vec<usize> = (0..params.len()).filter(|&i| params[i].numel() > 0).collect();
    if live.is_empty() {
        return Vec::new();
    }
    (0..count)
        .map(|k| {
            let p = live[k % live.len()];
            (p, rng.gen_range(0..params[p].numel()))
        })
        .collect()
}

fn evaluate<F>(f: &F, params: &[Tensor<f64>], track: bool) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| {
            if track {
                g.param(p.clone())
            } else {
                g.constant(p.clone())
            }
        })
        .collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::NonScalarLoss(g.shape(out).to_vec()));
    }
    Ok((g, vars, out))
}

/// Compares analytic gradients of the scalar `f(params)` against central
/// differences `(f(p + h) - f(p - h)) / 2h` at the given coordinates.
pub fn finite_diff_check<F>(
    f: F,
    params: &[Tensor<f64>],
    coords: &[(usize, usize)],
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (mut g, vars, out) = evaluate(&f, params, true)?;
    let base = g.value(out).item();
    let (g2, _, out2) = evaluate(&f, params, false)?;
    if g2.value(out2).item().to_bits() != base.to_bits() {
        return Err(Error::invalid(
            "finite_diff_check",
            "function is not deterministic",
        ));
    }
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|v| grads.wrt(*v).expect("tracked leaf"))
        .collect();

    let mut report = GradCheckReport::default();
    let mut work = params.to_vec();
    for &(p, idx) in coords {
        if p >= params.len() || idx >= params[p].numel() {
            return Err(Error::invalid(
                "finite_diff_check",
                format!("coordinate ({p}, {idx}) out of range"),
            ));
        }
        let orig = work[p].data()[idx];
        work[p].data_mut()[idx] = orig + cfg.step;
        let plus = evaluate(&f, &work, false)?;
        let fp = plus.0.value(plus.2).item();
        work[p].data_mut()[idx] = orig - cfg.step;
        let minus = evaluate(&f, &work, false)?;
        let fm = minus.0.value(minus.2).item();
        work[p].data_mut()[idx] = orig;

        let numeric = (fp - fm) / (2.0 * cfg.step);
        let a = analytic[p].data()[idx];
        let scale = a.abs().max(numeric.abs());
        let diff = (a - numeric).abs();
        let (error, absolute_fallback, passed) = if scale < cfg.zero_threshold {
            (diff, true, diff <= cfg.abs_tol)
        } else {
            let rel = diff / scale;
            (rel, false, rel <= cfg.rel_tol)
        };
        if absolute_fallback {
            report.max_abs_fallback_err = report.max_abs_fallback_err.max(error);
        } else {
            report.max_rel_err = report.max_rel_err.max(error);
        }
        report.coords.push(CoordCheck {
            param: p,
            index: idx,
            analytic: a,
            numeric,
            error,
            absolute_fallback,
            passed,
        });
    }
    Ok(report)
}

/// Checks every coordinate of every parameter.
pub fn finite_diff_check_all<F>(f: F, params: &[Tensor<f64>], cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.numel()).map(move |i| (p, i)))
        .collect();
    finite_diff_check(f, params, &coords, cfg)
}
