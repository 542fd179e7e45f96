use rand::Rng;

use super::{Init, Linear};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Real, Tape, Var};

/// Two-layer classifier `W2·gelu(W1·z + b1) + b2` returning raw logits.
#[derive(Clone, Debug)]
pub struct MlpHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl MlpHead {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        inputs: usize,
        hidden: usize,
        num_classes: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::contract("classifier needs at least one class"));
        }
        Ok(Self {
            fc1: Linear::new(store, &format!("{prefix}.fc1"), inputs, hidden, init, rng)?,
            fc2: Linear::new(store, &format!("{prefix}.fc2"), hidden, num_classes, init, rng)?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.fc2.outputs
    }

    /// `z[1×D]` to logits `[1×C]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, z: Var) -> Result<Var> {
        if tape.shape(z).last() != Some(&self.fc1.inputs) {
            return Err(Error::dim("mlp_head", tape.shape(z), &[self.fc1.inputs]));
        }
        let h = self.fc1.forward(tape, store, z)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, store, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.fc1.params();
        p.extend(self.fc2.params());
        p
    }
}
