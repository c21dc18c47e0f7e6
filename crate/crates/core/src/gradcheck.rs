//! Central finite-difference oracle for the tape's analytic gradients.
//!
//! A coordinate whose probe interval crosses a breakpoint of relu, abs,
//! clamp or min/max (detected by comparing [`Tape::branch_pattern`] at the
//! probe points with the base point) has no meaningful central difference;
//! it is skipped and counted instead.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamGroup, ParamStore};
use crate::tensor::Tensor;

/// Worst coordinate found by a check.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f32,
    pub input: usize,
    pub coord: usize,
    pub analytic: f32,
    pub numeric: f32,
    pub probed: usize,
    /// Coordinates whose probe interval crossed a breakpoint.
    pub skipped: usize,
}

impl FdReport {
    fn new() -> Self {
        FdReport {
            max_rel_error: 0.0,
            input: 0,
            coord: 0,
            analytic: 0.0,
            numeric: 0.0,
            probed: 0,
            skipped: 0,
        }
    }

    fn record(&mut self, input: usize, coord: usize, analytic: f32, numeric: Option<f32>, floor: f32) {
        self.probed += 1;
        let Some(numeric) = numeric else {
            self.skipped += 1;
            return;
        };
        let rel = (analytic - numeric).abs() / numeric.abs().max(floor);
        if rel > self.max_rel_error || self.probed - self.skipped == 1 {
            *self = FdReport {
                max_rel_error: rel,
                input,
                coord,
                analytic,
                numeric,
                ..*self
            };
        }
    }
}

/// Fourth-order central difference
/// `(8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`, or `None` when a
/// probe leaves the base point's smooth piece.
fn central(
    x0: f32,
    eps: f32,
    base: &[u32],
    mut eval_at: impl FnMut(f32) -> Result<(f64, Vec<u32>)>,
) -> Result<Option<f32>> {
    let mut f = [0.0f64; 4];
    for (slot, offset) in f.iter_mut().zip([1.0f32, -1.0, 2.0, -2.0]) {
        let (v, pattern) = eval_at(x0 + offset * eps)?;
        if pattern != base {
            return Ok(None);
        }
        *slot = v;
    }
    let h = f64::from(eps);
    Ok(Some(((8.0 * (f[0] - f[1]) - (f[2] - f[3])) / (12.0 * h)) as f32))
}

fn finite(v: f64, op: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            op,
            stats: format!("f = {v} at probe point"),
        })
    }
}

fn stride(n: usize, max_coords: Option<usize>) -> usize {
    max_coords.map_or(1, |m| n.div_ceil(m.max(1)).max(1))
}

/// Max over coordinates of `|analytic - central| / max(1e-8, |central|)`
/// for a scalar function of one tensor.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f32) -> Result<f32>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = check_gradients(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x), eps, None)?;
    Ok(report.max_rel_error)
}

/// Finite-difference check over several inputs at once.
///
/// With `max_coords = Some(k)`, at most `k` evenly spaced coordinates of each
/// input are probed.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], eps: f32, max_coords: Option<usize>) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let base = tape.branch_pattern();
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.get(v).cloned().expect("every input is a trainable leaf"))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<(f64, Vec<u32>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((finite(tape.value_f64(out), "check_gradients")?, tape.branch_pattern()))
    };

    let mut report = FdReport::new();
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, x) in inputs.iter().enumerate() {
        for i in (0..x.numel()).step_by(stride(x.numel(), max_coords)) {
            let x0 = x.data()[i];
            let numeric = central(x0, eps, &base, |v| {
                probe[k].data_mut()[i] = v;
                eval(&probe)
            })?;
            probe[k].data_mut()[i] = x0;
            report.record(k, i, analytic[k].data()[i], numeric, 1e-8);
        }
    }
    Ok(report)
}

/// Finite-difference check of a scalar function of the parameters in
/// `store` that belong to `groups`, evaluated in training mode.
///
/// Errors are `|analytic - central| / max(|central|, floor)`; `input` in the
/// report is the store index of the worst parameter.
pub fn check_params<F>(
    store: &ParamStore,
    groups: &[ParamGroup],
    f: F,
    eps: f32,
    floor: f32,
    max_coords: Option<usize>,
) -> Result<FdReport>
where
    F: Fn(&mut Ctx<'_>) -> Result<Var>,
{
    let mut ctx = Ctx::new(store, groups, true);
    let loss = f(&mut ctx)?;
    let base = ctx.tape.branch_pattern();
    let mut grads = ctx.tape.backward(loss)?;
    let analytic = ctx.collect_grads(&mut grads);

    let eval = |probe: &ParamStore| -> Result<(f64, Vec<u32>)> {
        let mut ctx = Ctx::new(probe, &[], true);
        let out = f(&mut ctx)?;
        Ok((finite(ctx.tape.value_f64(out), "check_params")?, ctx.tape.branch_pattern()))
    };

    let mut report = FdReport::new();
    let mut probe = store.clone();
    for (k, entry) in store.entries().iter().enumerate() {
        if !entry.trainable || !groups.contains(&entry.group) {
            continue;
        }
        let n = entry.value.numel();
        for i in (0..n).step_by(stride(n, max_coords)) {
            let x0 = entry.value.data()[i];
            let numeric = central(x0, eps, &base, |v| {
                probe.get_by_index_mut(k).data_mut()[i] = v;
                eval(&probe)
            })?;
            probe.get_by_index_mut(k).data_mut()[i] = x0;
            let a = analytic[k].as_ref().map_or(0.0, |g| g.data()[i]);
            report.record(k, i, a, numeric, floor);
        }
    }
    Ok(report)
}
