use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Real};
use crate::error::{Error, Result};

/// SGD with momentum, coupled weight decay, and a step schedule that divides
/// the base rate by `decay_factor` at every milestone epoch already reached.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SgdState<T> {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epoch_milestones: Vec<usize>,
    pub decay_factor: f64,
    #[serde(skip)]
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Real> SgdState<T> {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64, epoch_milestones: Vec<usize>, decay_factor: f64) -> Result<Self> {
        let mut problems = Vec::new();
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            problems.push(format!("learning rate {learning_rate} must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&momentum) {
            problems.push(format!("momentum {momentum} must lie in [0, 1)"));
        }
        if !(weight_decay >= 0.0) {
            problems.push(format!("weight decay {weight_decay} must be non-negative"));
        }
        if !(decay_factor > 0.0) {
            problems.push(format!("decay factor {decay_factor} must be positive"));
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay,
            epoch_milestones,
            decay_factor,
            velocity: Vec::new(),
        })
    }

    /// Learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.epoch_milestones.iter().filter(|&&m| m <= epoch).count();
        self.learning_rate / self.decay_factor.powi(passed as i32)
    }

    pub fn velocity(&self, id: ParamId) -> Option<&[T]> {
        self.velocity.get(id.index()).and_then(|v| v.as_deref())
    }

    /// One update of every parameter in `trainable`, which must all carry a gradient:
    /// `v ← μ·v + (g + λ·θ)`, `θ ← θ − lr(epoch)·v`.
    pub fn step(&mut self, store: &mut ParamStore<T>, trainable: &[ParamId], epoch: usize) -> Result<()> {
        if let Some(&id) = trainable.iter().find(|&&id| store.get(id).grad().is_none()) {
            return Err(Error::contract(format!("parameter `{}` has no gradient", store.name(id))));
        }
        let lr = T::lit(self.lr_at(epoch));
        let mu = T::lit(self.momentum);
        let wd = T::lit(self.weight_decay);
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for &id in trainable {
            let p = store.get_mut(id);
            let grad = p.grad().expect("checked above").to_vec();
            let v = self.velocity[id.index()].get_or_insert_with(|| vec![T::zero(); grad.len()]);
            for ((vi, gi), theta) in v.iter_mut().zip(grad).zip(p.data_mut()) {
                *vi = mu * *vi + (gi + wd * *theta);
                *theta -= lr * *vi;
            }
        }
        Ok(())
    }
}
