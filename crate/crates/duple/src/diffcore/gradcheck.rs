//! Finite-difference verification of tape gradients.

use crate::diffcore::tape::{Tape, Var};
use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over the checked coordinates, where the
    /// relative error of a coordinate is
    /// `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_err: f64,
    /// Coordinate index attaining `max_rel_err`.
    pub worst_coord: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    /// Number of coordinates checked.
    pub checked: usize,
}

/// Checks the tape gradient of `f` at `point` against central
/// differences on every coordinate.
///
/// `f` receives a fresh tape and the input leaf and must return a
/// scalar (`[1]`) output node.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    grad_check_coords(f, point, eps, &coords)
}

/// Same as [`grad_check`] but only on the listed coordinates; used when
/// the input is too large to difference exhaustively.
pub fn grad_check_coords<F>(
    f: F,
    point: &Tensor,
    eps: f64,
    coords: &[usize],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if coords.is_empty() {
        return Err(Error::Data("grad_check: no coordinates to check".into()));
    }

    // Analytic gradient from one tape pass.
    let mut tape = Tape::new();
    let leaf = tape.leaf(point.clone(), true);
    let out = f(&mut tape, leaf)?;
    if tape.value(out).len() != 1 {
        return Err(Error::shape(
            "grad_check",
            format!("f must return a scalar, got {:?}", tape.value(out).shape()),
        ));
    }
    let grads = tape.backward(out)?;
    let analytic = grads
        .wrt(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape().to_vec()));

    let eval = |x: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let l = t.leaf(x.clone(), false);
        let o = f(&mut t, l)?;
        let v = t.value(o).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check evaluation".into()));
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coord: coords[0],
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
    };
    let mut probe = point.clone();
    for &c in coords {
        if c >= point.len() {
            return Err(Error::Data(format!(
                "grad_check: coordinate {c} out of range {}",
                point.len()
            )));
        }
        let orig = probe.data()[c];
        probe.data_mut()[c] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[c] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[c] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[c];
        let rel = (a - numeric).abs() / numeric.abs().max(1.0);
        report.checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_coord = c;
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    Ok(report)
}
