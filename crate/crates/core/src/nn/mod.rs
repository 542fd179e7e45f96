//! Building blocks: affine maps, layer norm, attention, squeeze-and-excitation,
//! temporal shift, transformer encoder blocks, and the classification head.
//!
//! Blocks hold [`ParamId`]s into a caller-owned [`ParamStore`] and record their
//! forward pass on a [`Tape`].

mod attention;
mod mlp;
mod se;
mod transformer;
mod tsm;

pub use attention::{AttentionConfig, AttentionInit, AttentionOutput, CrossAttention, MultiHeadAttention};
pub use mlp::MlpHead;
pub use se::{SeConfig, SqueezeExcitation};
pub use transformer::{TransformerBlock, TransformerEncoder};
pub use tsm::{TemporalShift, TsmConfig};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Weight initialisation for an affine map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    Scaled(f64),
}

pub fn normal_tensor<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = if std == 0.0 {
        vec![T::zero(); n]
    } else {
        let dist = Normal::new(0.0, std).expect("positive std");
        (0..n).map(|_| T::lit(dist.sample(rng))).collect()
    };
    Tensor::new(shape, data).expect("valid shape")
}

/// `y = x·W + b` over the last axis of a rank-2 input.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        inputs: usize,
        outputs: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let std = match init {
            Init::Zeros => 0.0,
            Init::Scaled(gain) => gain / (inputs as f64).sqrt(),
        };
        let weight = store.add(format!("{prefix}.weight"), normal_tensor(rng, &[inputs, outputs], std))?;
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[outputs]))?;
        Ok(Self {
            weight,
            bias,
            inputs,
            outputs,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Layer normalisation over the last axis with a learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{prefix}.gain"), Tensor::full(&[dim], T::one()))?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, T::lit(LAYER_NORM_EPS))?;
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        let y = tape.mul_row(n, g)?;
        tape.add_row(y, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gain, self.bias]
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
