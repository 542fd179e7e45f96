//! The macro-micro motion encoder used as every region expert: self-attention
//! for sequence-wide context, then an SGP layer for frame-level and
//! short-window motion, then mean pooling over time.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AttentionConfig, AttentionInit, Init, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct M3eConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    #[serde(default = "default_window")]
    pub sgp_window: usize,
    #[serde(default = "default_scale_k")]
    pub sgp_scale_k: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
}

fn default_window() -> usize {
    3
}
fn default_scale_k() -> usize {
    3
}
fn default_depth() -> usize {
    1
}

impl M3eConfig {
    pub fn new(model_dim: usize, num_heads: usize) -> Self {
        Self {
            model_dim,
            num_heads,
            sgp_window: 3,
            sgp_scale_k: 3,
            depth: 1,
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig::new(self.model_dim, self.num_heads)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(Error::Validation(p)) = self.attention().validate() {
            problems.extend(p);
        }
        if self.sgp_window.is_multiple_of(2) {
            problems.push(format!("SGP window {} must be odd", self.sgp_window));
        }
        if self.sgp_scale_k == 0 || self.sgp_scale_k.is_multiple_of(2) {
            problems.push(format!("SGP scale multiplier {} must be odd and at least 1", self.sgp_scale_k));
        }
        if self.depth == 0 {
            problems.push("M3E depth must be at least 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// `out = x + fc(n) ⊙ σ(g(mean_T n)) + ψ(n) ⊙ (conv_w(n) + conv_kw(n))`
/// with `n = LN(x)`. `fc` and both depthwise kernels start at zero.
#[derive(Clone, Debug)]
pub struct SgpLayer {
    pub norm: LayerNorm,
    pub instant: Linear,
    pub global: Linear,
    pub psi: Linear,
    pub conv_short: ParamId,
    pub conv_long: ParamId,
    dim: usize,
}

impl SgpLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &M3eConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{prefix}.ln"), d)?,
            instant: Linear::new(store, &format!("{prefix}.instant"), d, d, Init::Zeros, rng)?,
            global: Linear::new(store, &format!("{prefix}.global"), d, d, Init::Scaled(1.0), rng)?,
            psi: Linear::new(store, &format!("{prefix}.psi"), d, d, Init::Scaled(1.0), rng)?,
            conv_short: store.add(format!("{prefix}.conv_short"), Tensor::zeros(&[d, cfg.sgp_window]))?,
            conv_long: store.add(
                format!("{prefix}.conv_long"),
                Tensor::zeros(&[d, cfg.sgp_window * cfg.sgp_scale_k]),
            )?,
            dim: d,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        match tape.shape(x) {
            [t, d] if *t > 0 && *d == self.dim => {}
            s => return Err(Error::dim("sgp_layer", s, &[0, self.dim])),
        }
        let n = self.norm.forward(tape, store, x)?;
        let mean = tape.mean_rows(n)?;
        let g = self.global.forward(tape, store, mean)?;
        let g = tape.sigmoid(g)?;
        let inst = self.instant.forward(tape, store, n)?;
        let inst = tape.mul_row(inst, g)?;

        let ws = tape.param(store, self.conv_short);
        let wl = tape.param(store, self.conv_long);
        let cs = tape.dwconv1d(n, ws)?;
        let cl = tape.dwconv1d(n, wl)?;
        let conv = tape.add(cs, cl)?;
        let gate = self.psi.forward(tape, store, n)?;
        let window = tape.mul(gate, conv)?;

        let y = tape.add(x, inst)?;
        tape.add(y, window)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.norm.params();
        p.extend(self.instant.params());
        p.extend(self.global.params());
        p.extend(self.psi.params());
        p.extend([self.conv_short, self.conv_long]);
        p
    }
}

#[derive(Clone, Debug)]
pub struct M3eLayer {
    pub norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub sgp: SgpLayer,
}

/// One region expert.
#[derive(Clone, Debug)]
pub struct M3e {
    pub cfg: M3eConfig,
    pub layers: Vec<M3eLayer>,
}

impl M3e {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: M3eConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.depth)
            .map(|i| {
                let p = format!("{prefix}.{i}");
                Ok(M3eLayer {
                    norm: LayerNorm::new(store, &format!("{p}.ln"), cfg.model_dim)?,
                    attn: MultiHeadAttention::new(
                        store,
                        &format!("{p}.attn"),
                        cfg.attention(),
                        AttentionInit::RESIDUAL,
                        rng,
                    )?,
                    sgp: SgpLayer::new(store, &format!("{p}.sgp"), &cfg, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { cfg, layers })
    }

    /// Contextualised token sequence before pooling.
    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, tokens: Var) -> Result<Var> {
        if tape.shape(tokens).first() == Some(&0) {
            return Err(Error::contract("m3e needs at least one token"));
        }
        let mut x = tokens;
        for layer in &self.layers {
            let n = layer.norm.forward(tape, store, x)?;
            let a = layer.attn.forward(tape, store, n)?;
            x = tape.add(x, a)?;
            x = layer.sgp.forward(tape, store, x)?;
        }
        Ok(x)
    }

    /// Pooled expert embedding `[1×D]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, tokens: Var) -> Result<Var> {
        let x = self.encode(tape, store, tokens)?;
        tape.mean_rows(x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| {
                let mut p = l.norm.params();
                p.extend(l.attn.params());
                p.extend(l.sgp.params());
                p
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tokens(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Tensor<f64> {
        Tensor::new(&[t, d], (0..t * d).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    fn row_mean(x: &Tensor<f64>) -> Vec<f64> {
        let d = x.shape()[1];
        let t = x.shape()[0];
        let mut acc = vec![0.0; d];
        for row in x.data().chunks(d) {
            acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        acc.iter().map(|a| a * (1.0 / t as f64)).collect()
    }

    #[test]
    fn fresh_sgp_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let sgp = SgpLayer::new(&mut store, "s", &M3eConfig::new(8, 2), &mut rng).unwrap();
        let x = tokens(&mut rng, 6, 8);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = sgp.forward(&mut tape, &store, xv).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn fresh_expert_pools_to_the_token_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let mut cfg = M3eConfig::new(32, 4);
        cfg.depth = 2;
        let m3e = M3e::new(&mut store, "e", cfg, &mut rng).unwrap();
        let x = tokens(&mut rng, 8, 32);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let z = m3e.forward(&mut tape, &store, xv).unwrap();
        assert_eq!(tape.shape(z), &[1, 32]);
        assert_eq!(tape.value(z).data(), row_mean(&x).as_slice());
    }

    #[test]
    fn constant_signal_stays_constant_in_the_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let cfg = M3eConfig::new(4, 1);
        let sgp = SgpLayer::new(&mut store, "s", &cfg, &mut rng).unwrap();
        for id in [sgp.conv_short, sgp.conv_long, sgp.instant.weight] {
            let n = store.get(id).numel();
            let vals: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            store.get_mut(id).data_mut().copy_from_slice(&vals);
        }
        let t = 14;
        let row = [0.3, -1.2, 0.8, 2.0];
        let x = Tensor::new(&[t, 4], row.iter().copied().cycle().take(t * 4).collect()).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = sgp.forward(&mut tape, &store, xv).unwrap();
        let out = tape.value(y).data();
        let half = 9 / 2;
        let interior: Vec<&[f64]> = out.chunks(4).skip(half).take(t - 2 * half).collect();
        for r in &interior[1..] {
            for (a, b) in r.iter().zip(interior[0]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_configs_are_listed() {
        let cfg = M3eConfig {
            model_dim: 6,
            num_heads: 4,
            sgp_window: 2,
            sgp_scale_k: 2,
            depth: 0,
        };
        match cfg.validate() {
            Err(Error::Validation(p)) => assert_eq!(p.len(), 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn token_width_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let m3e = M3e::new(&mut store, "e", M3eConfig::new(4, 1), &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(m3e.forward(&mut tape, &store, x).is_err());
    }
}
