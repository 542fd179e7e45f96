use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Init, Linear};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeConfig {
    pub channels: usize,
    #[serde(default = "default_reduction")]
    pub reduction: usize,
}

fn default_reduction() -> usize {
    4
}

impl SeConfig {
    pub fn new(channels: usize, reduction: usize) -> Self {
        Self { channels, reduction }
    }

    pub fn bottleneck(&self) -> usize {
        self.channels / self.reduction
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.reduction == 0 || !self.channels.is_multiple_of(self.reduction) {
            return Err(Error::Validation(vec![format!(
                "SE reduction {} must be a positive divisor of {} channels",
                self.reduction, self.channels
            )]));
        }
        Ok(())
    }
}

/// Channel gating: `x · sigmoid(W2·gelu(W1·mean(x) + b1) + b2)`, where the
/// mean runs over every axis but the last.
#[derive(Clone, Debug)]
pub struct SqueezeExcitation {
    pub cfg: SeConfig,
    pub squeeze: Linear,
    pub excite: Linear,
}

impl SqueezeExcitation {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: SeConfig,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let b = cfg.bottleneck();
        Ok(Self {
            cfg,
            squeeze: Linear::new(store, &format!("{prefix}.squeeze"), cfg.channels, b, init, rng)?,
            excite: Linear::new(store, &format!("{prefix}.excite"), b, cfg.channels, init, rng)?,
        })
    }

    /// The per-channel gate `[1×C]`.
    pub fn gate<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let c = *tape.shape(x).last().expect("non-empty shape");
        if c != self.cfg.channels {
            return Err(Error::dim("squeeze_excitation", tape.shape(x), &[self.cfg.channels]));
        }
        let s = tape.mean_rows(x)?;
        let h = self.squeeze.forward(tape, store, s)?;
        let h = tape.gelu(h)?;
        let g = self.excite.forward(tape, store, h)?;
        tape.sigmoid(g)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = self.gate(tape, store, x)?;
        tape.mul_row(x, g)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.squeeze.params();
        p.extend(self.excite.params());
        p
    }
}
