use super::Tensor;
use crate::error::{ForgeError, Result};

/// SGD with momentum and L2 weight decay folded into the velocity:
/// `v ← momentum·v + grad + weight_decay·param`, `param ← param − lr·v`.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl SgdState {
    pub fn new(learning_rate: f32, momentum: f32, weight_decay: f32) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(ForgeError::Parameter(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(ForgeError::Parameter(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(ForgeError::Parameter(format!(
                "weight decay must be non-negative, got {weight_decay}"
            )));
        }
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self) -> &[Vec<f32>] {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        let lr = self.learning_rate;
        self.step_with_lr(params, grads, lr)
    }

    /// Same as [`step`](Self::step) with a scheduled learning rate.
    pub fn step_with_lr(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[&Tensor],
        lr: f32,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(ForgeError::Shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            p.check_same_shape(g)?;
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        } else if self.velocity.len() != params.len()
            || self
                .velocity
                .iter()
                .zip(params.iter())
                .any(|(v, p)| v.len() != p.numel())
        {
            return Err(ForgeError::Shape(
                "parameter set changed between optimizer steps".into(),
            ));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let (m, wd) = (self.momentum, self.weight_decay);
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vv = m * *vv + gv + wd * *pv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}
