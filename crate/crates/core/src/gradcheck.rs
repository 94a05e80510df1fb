//! Central finite-difference checks of tape gradients.
//!
//! The numerical side only ever evaluates the forward pass, so it stays
//! independent of the backward rules it is checking.

use crate::autodiff::{Gradients, Params, Tape, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-7,
        }
    }
}

impl GradCheck {
    pub fn new(rel_tol: f64, abs_floor: f64) -> Self {
        GradCheck {
            rel_tol,
            abs_floor,
            ..Default::default()
        }
    }

    /// `|a − n| ≤ abs_floor` or `|a − n| ≤ rel_tol · max(|a|, |n|)`.
    pub fn agrees(&self, analytic: f64, numeric: f64) -> bool {
        let diff = (analytic - numeric).abs();
        diff <= self.abs_floor || diff <= self.rel_tol * analytic.abs().max(numeric.abs())
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    /// Entries compared, per parameter name.
    pub checked: Vec<(String, usize)>,
    pub mismatches: Vec<Mismatch>,
    /// Over entries large enough that the relative tolerance is the binding
    /// one.
    pub max_rel_error: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Compares analytic gradients of `build` against central differences on every
/// entry of every parameter.
pub fn check_gradients<F>(params: &Params, cfg: GradCheck, build: F) -> Result<GradReport>
where
    F: Fn(&Params, &mut Tape) -> Result<Var>,
{
    let analytic = analytic_gradients(params, &build)?;
    let mut report = GradReport::default();
    let mut probe = params.clone();
    for id in params.ids() {
        let n = params.get(id).len();
        report.checked.push((params.name(id).to_string(), n));
        for k in 0..n {
            let original = params.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = original + cfg.step;
            let up = evaluate(&probe, &build)?;
            probe.get_mut(id).data_mut()[k] = original - cfg.step;
            let down = evaluate(&probe, &build)?;
            probe.get_mut(id).data_mut()[k] = original;

            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic.get(id).data()[k];
            let scale = a.abs().max(numeric.abs());
            if scale > 0.0 && scale * cfg.rel_tol >= cfg.abs_floor {
                report.max_rel_error = report.max_rel_error.max((a - numeric).abs() / scale);
            }
            if !cfg.agrees(a, numeric) {
                report.mismatches.push(Mismatch {
                    param: params.name(id).to_string(),
                    index: k,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

fn analytic_gradients<F>(params: &Params, build: &F) -> Result<Gradients>
where
    F: Fn(&Params, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let root = build(params, &mut tape)?;
    tape.backward(root, params)
}

fn evaluate<F>(params: &Params, build: &F) -> Result<f64>
where
    F: Fn(&Params, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let root = build(params, &mut tape)?;
    Ok(tape.value(root).item())
}
