use crate::autodiff::{Parameter, Tensor};

use super::TrainError;

/// Hyper-parameters for one AdamW update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

/// One decoupled-weight-decay Adam update, in place on values and moments.
/// `step` is the 1-based update count used for bias correction.
///
/// `param ← param − lr·m̂/(√v̂ + eps) − lr·wd·param`
pub fn adamw_step(params: &mut [Parameter], grads: &[Tensor], step: u64, hp: &AdamW) -> Result<(), TrainError> {
    if params.len() != grads.len() {
        return Err(TrainError::ShapeMismatch(format!("{} parameters, {} gradients", params.len(), grads.len())));
    }
    if let Some((p, g)) = params.iter().zip(grads).find(|(p, g)| p.value.shape() != g.shape()) {
        return Err(TrainError::ShapeMismatch(format!("{}: {:?} vs gradient {:?}", p.name, p.value.shape(), g.shape())));
    }
    if step == 0 {
        return Err(TrainError::Config("adam step count starts at 1".into()));
    }
    let (b1, b2) = hp.betas;
    let t = step.min(i32::MAX as u64) as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (p, g) in params.iter_mut().zip(grads) {
        let Parameter { value, m, v, .. } = p;
        let (value, m, v) = (value.data_mut(), m.data_mut(), v.data_mut());
        for (((x, mi), vi), gi) in value.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *x = *x - hp.lr * m_hat / (v_hat.sqrt() + hp.eps) - hp.lr * hp.weight_decay * *x;
        }
    }
    Ok(())
}
