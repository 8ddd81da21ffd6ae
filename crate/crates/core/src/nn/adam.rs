//! Adam with bias correction and optional weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::scalar::Scalar;
use super::unet::Param;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// `false`: weight decay is added to the gradient before the moment
    /// updates. `true`: it shrinks the parameters directly (AdamW).
    pub decoupled: bool,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decoupled: false,
        }
    }
}

/// First/second moment accumulators shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub hyper: AdamHyper,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(sizes: impl IntoIterator<Item = usize>, hyper: AdamHyper) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        AdamState {
            hyper,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
        }
    }

    pub fn for_params(params: &[Param<T>], hyper: AdamHyper) -> Self {
        Self::new(params.iter().map(|p| p.data.len()), hyper)
    }
}

/// One Adam update of every parameter tensor.
pub fn adam_step<T: Scalar>(
    params: &mut [Param<T>],
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.data.len() != g.len() || p.data.len() != m.len() {
            return Err(Error::ShapeMismatch(format!("gradient for {} has the wrong size", p.name)));
        }
    }
    state.t += 1;
    let h = state.hyper;
    let t = state.t as i32;
    let bc1 = T::lit(1.0 - h.beta1.powi(t));
    let bc2 = T::lit(1.0 - h.beta2.powi(t));
    let (b1, b2) = (T::lit(h.beta1), T::lit(h.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - h.beta1), T::lit(1.0 - h.beta2));
    let (lr, wd, eps) = (T::lit(lr), T::lit(weight_decay), T::lit(h.eps));

    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.data.len() {
            let w = p.data[i];
            let gi = if h.decoupled { g[i] } else { g[i] + wd * w };
            m[i] = (b1 * m[i] + one_b1 * gi).flush();
            v[i] = (b2 * v[i] + one_b2 * gi * gi).flush();
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let mut next = w - lr * m_hat / (v_hat.sqrt() + eps);
            if h.decoupled {
                next = next - lr * wd * w;
            }
            p.data[i] = next.flush();
        }
    }
    Ok(())
}
