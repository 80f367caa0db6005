//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Step and acceptance threshold for [`finite_diff_check`].
#[derive(Clone, Copy, Debug)]
pub struct FdConfig {
    pub h: f64,
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `|a - n| / max(|a|, |n|, floor)` per coordinate.
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub tol: f64,
    pub passed: bool,
}

impl FdReport {
    /// Coordinates whose error exceeds the tolerance.
    pub fn failures(&self) -> Vec<usize> {
        self.rel_errors
            .iter()
            .enumerate()
            .filter(|(_, &e)| e > self.tol)
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Checks the gradient of the scalar function `f` at `x` against
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
///
/// `f` receives a fresh graph and the leaf holding `x` and must return a
/// scalar node.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, cfg: FdConfig) -> Result<FdReport>
where
    T: Real,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    if !(cfg.h > 0.0) || !cfg.h.is_finite() {
        return Err(Error::Parameter(format!("finite-difference step must be positive, got {}", cfg.h)));
    }
    if !(cfg.tol > 0.0) {
        return Err(Error::Parameter(format!("tolerance must be positive, got {}", cfg.tol)));
    }

    let eval = |point: &Tensor<T>| -> Result<T> {
        let mut g = Graph::new();
        let v = g.constant(point);
        let out = f(&mut g, v)?;
        if g.shape(out).iter().product::<usize>() != 1 {
            return Err(Error::Contract("finite_diff_check: function is not scalar-valued".into()));
        }
        Ok(g.scalar(out))
    };

    let mut g = Graph::new();
    let xv = g.param(x);
    let out = f(&mut g, xv)?;
    let base = g.scalar(out);
    let grads = g.backward(out)?;
    let analytic: Vec<f64> = match grads.get(xv) {
        Some(gr) => gr.iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; x.len()],
    };

    let again = eval(x)?;
    if base.as_f64().to_bits() != again.as_f64().to_bits() {
        return Err(Error::Contract(format!(
            "finite_diff_check: function is not deterministic ({base} vs {again})"
        )));
    }

    let h = T::lit(cfg.h);
    let mut numeric = Vec::with_capacity(x.len());
    let mut point = x.clone();
    for i in 0..x.len() {
        let orig = point.data()[i];
        point.data_mut()[i] = orig + h;
        let plus = eval(&point)?;
        point.data_mut()[i] = orig - h;
        let minus = eval(&point)?;
        point.data_mut()[i] = orig;
        numeric.push((plus - minus).as_f64() / (2.0 * cfg.h));
    }

    let rel_errors: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| rel_error(a, n, cfg.floor))
        .collect();
    let (worst_index, max_rel_error) = rel_errors
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(FdReport {
        analytic,
        numeric,
        passed: max_rel_error <= cfg.tol,
        rel_errors,
        max_rel_error,
        worst_index,
        tol: cfg.tol,
    })
}
