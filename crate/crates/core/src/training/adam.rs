use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Moment estimates for one parameter list.
#[derive(Clone, Debug)]
pub struct AdamState {
    names: Vec<String>,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl AdamState {
    /// Zero moments shaped like `params`; `names` label errors.
    pub fn new(params: &[&Matrix], names: Vec<String>) -> Self {
        assert_eq!(params.len(), names.len(), "one name per parameter");
        Self {
            names,
            m: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            t: 0,
        }
    }

    /// Names `prefix[0]`, `prefix[1]`, ... for `count` parameters.
    pub fn indexed(params: &[&Matrix], prefix: &str) -> Self {
        let names = (0..params.len()).map(|i| format!("{prefix}[{i}]")).collect();
        Self::new(params, names)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update. Nothing is modified when any gradient is
/// non-finite.
pub fn adam_step(params: &mut [&mut Matrix], grads: &[Matrix], state: &mut AdamState, lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::contract(format!("learning rate must be positive, got {lr}")));
    }
    if params.len() != state.m.len() || grads.len() != params.len() {
        return Err(Error::contract(format!(
            "optimizer tracks {} parameters, got {} parameters and {} gradients",
            state.m.len(),
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Dimension {
                op: "adam_step",
                left: p.shape(),
                right: g.shape(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", state.names[i])));
        }
    }
    state.t += 1;
    let c1 = 1.0 - BETA1.powi(state.t as i32);
    let c2 = 1.0 - BETA2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].as_slice();
        let m = state.m[i].as_mut_slice();
        let v = state.v[i].as_mut_slice();
        for (j, w) in p.as_mut_slice().iter_mut().enumerate() {
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *w -= lr * mh / (vh.sqrt() + EPS);
        }
    }
    Ok(())
}
