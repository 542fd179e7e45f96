use rand::Rng;

use super::{AttentionConfig, AttentionInit, Init, LayerNorm, Linear, MultiHeadAttention};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Real, Tape, Var};

/// Pre-norm residual block: `h = x + MHSA(LN(x))`, `y = h + FFN(LN(h))`
/// with a GELU feed-forward of width `4·D`. The attention output and
/// second FFN layer start at zero, so a fresh block is the identity.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub cfg: AttentionConfig,
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl TransformerBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(Self {
            cfg,
            ln1: LayerNorm::new(store, &format!("{prefix}.ln1"), d)?,
            attn: MultiHeadAttention::new(store, &format!("{prefix}.attn"), cfg, AttentionInit::RESIDUAL, rng)?,
            ln2: LayerNorm::new(store, &format!("{prefix}.ln2"), d)?,
            ff1: Linear::new(store, &format!("{prefix}.ff1"), d, 4 * d, Init::Scaled(1.0), rng)?,
            ff2: Linear::new(store, &format!("{prefix}.ff2"), 4 * d, d, Init::Zeros, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        if tape.shape(x).len() != 2 || tape.shape(x)[1] != self.cfg.model_dim {
            return Err(Error::dim("transformer_encoder_block", tape.shape(x), &[self.cfg.model_dim]));
        }
        let n = self.ln1.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, n)?;
        let h = tape.add(x, a)?;
        let n = self.ln2.forward(tape, store, h)?;
        let f = self.ff1.forward(tape, store, n)?;
        let f = tape.gelu(f)?;
        let f = self.ff2.forward(tape, store, f)?;
        tape.add(h, f)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.ln1.params();
        p.extend(self.attn.params());
        p.extend(self.ln2.params());
        p.extend(self.ff1.params());
        p.extend(self.ff2.params());
        p
    }
}

/// A stack of [`TransformerBlock`]s.
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub blocks: Vec<TransformerBlock>,
}

impl TransformerEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: AttentionConfig,
        depth: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| TransformerBlock::new(store, &format!("{prefix}.{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(tape, store, x)?;
        }
        Ok(x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(TransformerBlock::params).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fresh_block_is_identity_and_keeps_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f64>::new();
        let blk = TransformerBlock::new(&mut store, "te", AttentionConfig::new(32, 4), &mut rng).unwrap();
        let xt = Tensor::new(&[8, 32], (0..256).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(xt.clone());
        let y = blk.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(y), &[8, 32]);
        assert_eq!(tape.value(y).data(), xt.data());
    }

    #[test]
    fn wrong_width_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f64>::new();
        let blk = TransformerBlock::new(&mut store, "te", AttentionConfig::new(8, 2), &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 6]));
        assert!(blk.forward(&mut tape, &store, x).is_err());
    }
}
