//! Adam with bias correction, plus global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    /// First moments, aligned with the parameter list.
    pub m: Vec<Tensor>,
    /// Second moments, aligned with the parameter list.
    pub v: Vec<Tensor>,
}

impl AdamState {
    /// Zeroed moments for parameters of the given shapes, default betas.
    pub fn new<'a>(lr: f32, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let zeros: Vec<Tensor> = shapes.into_iter().map(Tensor::zeros).collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One Adam update.
///
/// `grads[i]` is the gradient of parameter `i`; parameters with
/// `active[i] == false` are left untouched (their moments too). An active
/// parameter without a gradient is an error.
pub fn adam_step(
    params: &mut [Tensor],
    names: &[String],
    grads: &[Option<Tensor>],
    active: &[bool],
    state: &mut AdamState,
) -> Result<()> {
    if state.lr.is_nan() || state.lr <= 0.0 {
        return Err(Error::Invalid(format!("learning rate must be > 0, got {}", state.lr)));
    }
    let n = params.len();
    if grads.len() != n || active.len() != n || state.m.len() != n || names.len() != n {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{n} params, {} grads, {} flags, {} moments",
                grads.len(),
                active.len(),
                state.m.len()
            ),
        ));
    }
    for i in 0..n {
        if !active[i] {
            continue;
        }
        let g = grads[i]
            .as_ref()
            .ok_or_else(|| Error::MissingGradient(names[i].clone()))?;
        if g.shape() != params[i].shape() || state.m[i].shape() != params[i].shape() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "`{}`: param {:?}, grad {:?}, moment {:?}",
                    names[i],
                    params[i].shape(),
                    g.shape(),
                    state.m[i].shape()
                ),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for i in 0..n {
        if !active[i] {
            continue;
        }
        let g = grads[i].as_ref().expect("checked above").data();
        let p = params[i].data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f32) -> f32 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|&v| f64::from(v) * f64::from(v))
        .sum();
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
