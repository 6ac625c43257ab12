use super::tensor::{Gradients, ParameterStore};
use crate::error::{Error, Result};

/// Global L2 norm over every gradient tensor.
pub fn global_norm(grads: &Gradients) -> f64 {
    grads.iter().map(|(_, g)| g.sq_norm()).sum::<f64>().sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> Result<f64> {
    if max_norm.is_nan() || max_norm <= 0.0 {
        return Err(Error::Usage(format!(
            "max_norm must be positive, got {max_norm}"
        )));
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let k = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.scale_in_place(k);
        }
    }
    Ok(norm)
}

/// RMSProp statistics: running average of squared gradients per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub sq: ParameterStore,
    pub decay: f64,
    pub epsilon: f64,
    pub lr: f64,
}

impl RmsProp {
    pub const DEFAULT_DECAY: f64 = 0.99;
    pub const DEFAULT_EPSILON: f64 = 0.1;

    pub fn new(params: &ParameterStore, lr: f64) -> Self {
        RmsProp {
            sq: params.zeros_like(),
            decay: Self::DEFAULT_DECAY,
            epsilon: Self::DEFAULT_EPSILON,
            lr,
        }
    }

    /// `g2 <- decay g2 + (1 - decay) grad^2; p <- p - lr grad / sqrt(g2 + eps)`.
    pub fn update(&mut self, params: &mut ParameterStore, grads: &Gradients) -> Result<()> {
        if !params.same_layout(grads) || !params.same_layout(&self.sq) {
            return Err(Error::Usage(
                "parameter, gradient and optimizer keys do not align".into(),
            ));
        }
        let (rho, eps, lr) = (self.decay, self.epsilon, self.lr);
        for (((_, p), (_, g)), (_, s)) in
            params.iter_mut().zip(grads.iter()).zip(self.sq.iter_mut())
        {
            for ((pv, gv), sv) in p.data_mut().iter_mut().zip(g.data()).zip(s.data_mut()) {
                *sv = rho * *sv + (1.0 - rho) * gv * gv;
                let denom = (*sv + eps).sqrt();
                if denom > 0.0 {
                    *pv -= lr * gv / denom;
                }
            }
        }
        Ok(())
    }
}
