//! Decoupled-weight-decay Adam.

use crate::model::{OptimizerSnapshot, ParamStore};
use crate::tensor::Tensor;

use super::{TrainError, Result};

/// Per-parameter first and second moments and the step count `t`.
pub type OptimizerState = OptimizerSnapshot;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
}

impl OptimizerSnapshot {
    /// Zero moments shaped like `params`, `t = 0`.
    pub fn zeros_like(params: &ParamStore<f32>) -> Self {
        let zeros: ParamStore<f32> = params.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Checks that the moments cover exactly `params` with matching shapes.
    pub fn check(&self, params: &ParamStore<f32>) -> Result<()> {
        for buf in [&self.m, &self.v] {
            if buf.len() != params.len() {
                return Err(TrainError::Optimizer(format!(
                    "{} moment tensors for {} parameters",
                    buf.len(),
                    params.len()
                )));
            }
            for (name, p) in params {
                match buf.get(name) {
                    Some(t) if t.shape() == p.shape() => {}
                    Some(t) => {
                        return Err(TrainError::Optimizer(format!(
                            "moment of {name} has shape {:?}, parameter has {:?}",
                            t.shape(),
                            p.shape()
                        )))
                    }
                    None => return Err(TrainError::Optimizer(format!("no moment for parameter {name}"))),
                }
            }
        }
        Ok(())
    }
}

/// One update of every parameter in `params`:
/// `θ ← θ·(1 − lr·wd) − lr·m̂/(√v̂ + ε)` with bias-corrected moments and a
/// constant learning rate. Gradients are checked for non-finite values
/// before anything is modified.
pub fn adamw_step(
    params: &mut ParamStore<f32>,
    grads: &ParamStore<f32>,
    state: &mut OptimizerState,
    opt: &AdamW,
) -> Result<()> {
    state.check(params)?;
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| TrainError::Optimizer(format!("no gradient for parameter {name}")))?;
        if g.shape() != p.shape() {
            return Err(TrainError::Optimizer(format!(
                "gradient of {name} has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite {
                what: format!("gradient of parameter {name} at element {i}"),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let [b1, b2] = opt.betas;
    let c1 = (1.0 - b1.powi(t)) as f32;
    let c2 = (1.0 - b2.powi(t)) as f32;
    let (b1, b2) = (b1 as f32, b2 as f32);
    let lr = opt.lr as f32;
    let eps = opt.eps as f32;
    let decay = (1.0 - opt.lr * opt.weight_decay) as f32;
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let m = state.m.get_mut(name).expect("checked").data_mut();
        let v = state.v.get_mut(name).expect("checked").data_mut();
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let step = (*mv / c1) / ((*vv / c2).sqrt() + eps);
            *pv = *pv * decay - lr * step;
        }
    }
    Ok(())
}
