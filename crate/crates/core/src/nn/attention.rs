use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Init, Linear};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    /// Skip every projection: queries, keys and values are the raw inputs.
    #[serde(default)]
    pub identity_mode: bool,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, num_heads: usize) -> Self {
        Self {
            model_dim,
            num_heads,
            identity_mode: false,
        }
    }

    pub fn identity(model_dim: usize) -> Self {
        Self {
            model_dim,
            num_heads: 1,
            identity_mode: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.model_dim == 0 || self.num_heads == 0 {
            problems.push("attention model_dim and num_heads must be positive".to_string());
        } else if !self.model_dim.is_multiple_of(self.num_heads) {
            problems.push(format!(
                "attention model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.identity_mode && self.num_heads != 1 {
            problems.push("identity_mode attention requires a single head".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// Initial scales for the projections.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionInit {
    pub qkv_gain: f64,
    pub zero_output: bool,
}

impl AttentionInit {
    /// Residual branch that starts as the zero map.
    pub const RESIDUAL: Self = Self {
        qkv_gain: 1.0,
        zero_output: true,
    };
    pub const RANDOM: Self = Self {
        qkv_gain: 1.0,
        zero_output: false,
    };
}

#[derive(Clone, Debug)]
struct Projections {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Projections {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        init: AttentionInit,
        rng: &mut R,
    ) -> Result<Self> {
        let qkv = Init::Scaled(init.qkv_gain);
        let out = if init.zero_output { Init::Zeros } else { Init::Scaled(1.0) };
        Ok(Self {
            q: Linear::new(store, &format!("{prefix}.q"), d, d, qkv, rng)?,
            k: Linear::new(store, &format!("{prefix}.k"), d, d, qkv, rng)?,
            v: Linear::new(store, &format!("{prefix}.v"), d, d, qkv, rng)?,
            o: Linear::new(store, &format!("{prefix}.o"), d, d, out, rng)?,
        })
    }

    fn params(&self) -> Vec<ParamId> {
        [&self.q, &self.k, &self.v, &self.o].iter().flat_map(|l| l.params()).collect()
    }
}

/// Result of an attention call: the output and one weight matrix per head
/// (`[queries × keys]`, rows on the probability simplex).
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

fn check_width<T: Real>(tape: &Tape<T>, x: Var, cfg: &AttentionConfig, op: &'static str) -> Result<usize> {
    match tape.shape(x) {
        [m, d] if *d == cfg.model_dim && *m > 0 => Ok(*m),
        s => Err(Error::dim(op, s, &[s.first().copied().unwrap_or(0), cfg.model_dim])),
    }
}

/// Scaled dot-product attention of `query` rows over `source` rows.
fn attend<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &AttentionConfig,
    proj: Option<&Projections>,
    query: Var,
    source: Var,
) -> Result<AttentionOutput> {
    let (q, k, v) = match proj {
        Some(p) => (
            p.q.forward(tape, store, query)?,
            p.k.forward(tape, store, source)?,
            p.v.forward(tape, store, source)?,
        ),
        None => (query, source, source),
    };
    let hd = cfg.head_dim();
    let scale = T::lit(1.0 / (hd as f64).sqrt());
    let single_query = tape.shape(query)[0] == 1;
    let mut heads = Vec::with_capacity(cfg.num_heads);
    let mut weights = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let (qh, kh, vh) = if cfg.num_heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * hd, hd)?,
                tape.slice_cols(k, h * hd, hd)?,
                tape.slice_cols(v, h * hd, hd)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let w = tape.softmax(scores, 1)?;
        let out = if single_query {
            tape.weighted_row_sum(w, vh)?
        } else {
            tape.matmul(w, vh)?
        };
        heads.push(out);
        weights.push(w);
    }
    let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    let output = match proj {
        Some(p) => p.o.forward(tape, store, merged)?,
        None => merged,
    };
    Ok(AttentionOutput { output, weights })
}

/// Multi-head self-attention over the rows of `x[T×D]`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    proj: Option<Projections>,
}

impl MultiHeadAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: AttentionConfig,
        init: AttentionInit,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let proj = if cfg.identity_mode {
            None
        } else {
            Some(Projections::new(store, prefix, cfg.model_dim, init, rng)?)
        };
        Ok(Self { cfg, proj })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(tape, store, x)?.output)
    }

    pub fn forward_with_weights<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<AttentionOutput> {
        check_width(tape, x, &self.cfg, "multi_head_self_attention")?;
        attend(tape, store, &self.cfg, self.proj.as_ref(), x, x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.proj.as_ref().map(Projections::params).unwrap_or_default()
    }
}

/// A single query row attending over `K` key/value rows that share projections.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub cfg: AttentionConfig,
    proj: Option<Projections>,
}

impl CrossAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: AttentionConfig,
        init: AttentionInit,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let proj = if cfg.identity_mode {
            None
        } else {
            Some(Projections::new(store, prefix, cfg.model_dim, init, rng)?)
        };
        Ok(Self { cfg, proj })
    }

    /// Returns the `[1×D]` output and the head-0 weight vector `[1×K]`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        query: Var,
        keys_values: Var,
    ) -> Result<(Var, Var)> {
        let m = check_width(tape, query, &self.cfg, "cross_attention")?;
        if m != 1 {
            return Err(Error::dim("cross_attention", tape.shape(query), &[1, self.cfg.model_dim]));
        }
        if tape.shape(keys_values).len() == 2 && tape.shape(keys_values)[0] == 0 {
            return Err(Error::contract("cross_attention needs at least one key/value row"));
        }
        check_width(tape, keys_values, &self.cfg, "cross_attention")?;
        let out = attend(tape, store, &self.cfg, self.proj.as_ref(), query, keys_values)?;
        Ok((out.output, out.weights[0]))
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.proj.as_ref().map(Projections::params).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_rows(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Tensor<f64> {
        Tensor::new(&[m, d], (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(AttentionConfig::new(8, 3).validate().is_err());
        let bad = AttentionConfig {
            model_dim: 8,
            num_heads: 2,
            identity_mode: true,
        };
        assert!(bad.validate().is_err());
        assert!(AttentionConfig::new(8, 2).validate().is_ok());
    }

    #[test]
    fn single_token_identity_attention_returns_input() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mha = MultiHeadAttention::new(&mut store, "a", AttentionConfig::identity(4), AttentionInit::RANDOM, &mut rng).unwrap();
        let mut tape = Tape::new();
        let xt = rand_rows(&mut rng, 1, 4);
        let x = tape.constant(xt.clone());
        let y = mha.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y).data(), xt.data());
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mha = MultiHeadAttention::new(&mut store, "a", AttentionConfig::identity(3), AttentionInit::RANDOM, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_f64(&[2, 3], &[0.3, -1.0, 2.0, 0.3, -1.0, 2.0]).unwrap());
        let y = mha.forward(&mut tape, &store, x).unwrap();
        let v = tape.value(y).data();
        assert_eq!(&v[..3], &v[3..]);
    }

    #[test]
    fn self_attention_rows_sum_to_one() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mha = MultiHeadAttention::new(&mut store, "a", AttentionConfig::new(8, 2), AttentionInit::RANDOM, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(rand_rows(&mut rng, 4, 8));
        let out = mha.forward_with_weights(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(out.output), &[4, 8]);
        for w in out.weights {
            for row in tape.value(w).data().chunks(4) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6 && row.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn width_mismatch_is_a_dimension_error() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mha = MultiHeadAttention::new(&mut store, "a", AttentionConfig::new(8, 2), AttentionInit::RANDOM, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(rand_rows(&mut rng, 4, 6));
        assert!(matches!(mha.forward(&mut tape, &store, x), Err(Error::Dimension { .. })));
    }

    fn identity_cross(q: &[f64], kv: &[f64], k: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ca = CrossAttention::new(&mut store, "x", AttentionConfig::identity(d), AttentionInit::RANDOM, &mut rng).unwrap();
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_f64(&[1, d], q).unwrap());
        let kv = tape.constant(Tensor::from_f64(&[k, d], kv).unwrap());
        let (o, w) = ca.forward(&mut tape, &store, q, kv).unwrap();
        (tape.value(o).data().to_vec(), tape.value(w).data().to_vec())
    }

    #[test]
    fn cross_attention_degenerate_cases() {
        let (o, w) = identity_cross(&[5.0, -2.0], &[0.25, 0.75], 1, 2);
        assert_eq!(o, vec![0.25, 0.75]);
        assert_eq!(w, vec![1.0]);

        let (o, _) = identity_cross(&[3.0, 1.0], &[0.5, -0.5, 0.5, -0.5, 0.5, -0.5], 3, 2);
        for (a, b) in o.iter().zip([0.5, -0.5]) {
            assert!((a - b).abs() < 1e-15);
        }

        // Query orthogonal to both keys, keys of equal norm.
        let (o, w) = identity_cross(&[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0], 2, 3);
        assert_eq!(w, vec![0.5, 0.5]);
        assert_eq!(o, vec![0.5, 0.5, 0.0]);
    }

    proptest! {
        #[test]
        fn cross_attention_is_permutation_equivariant(seed in 0u64..1000, k in 1usize..6, shift in 0usize..6) {
            let d = 4;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::<f64>::new();
            let ca = CrossAttention::new(&mut store, "x", AttentionConfig::new(d, 1), AttentionInit::RANDOM, &mut rng).unwrap();
            let q = rand_rows(&mut rng, 1, d);
            let kv = rand_rows(&mut rng, k, d);
            let perm: Vec<usize> = (0..k).map(|i| (i + shift) % k).collect();
            let permuted: Vec<f64> = perm.iter().flat_map(|&i| kv.data()[i * d..(i + 1) * d].to_vec()).collect();
            let run = |kvt: Tensor<f64>| {
                let mut tape = Tape::new();
                let qv = tape.constant(q.clone());
                let kvv = tape.constant(kvt);
                let (o, w) = ca.forward(&mut tape, &store, qv, kvv).unwrap();
                (tape.value(o).data().to_vec(), tape.value(w).data().to_vec())
            };
            let (o1, w1) = run(kv.clone());
            let (o2, w2) = run(Tensor::new(&[k, d], permuted).unwrap());
            prop_assert_eq!(o1, o2);
            for (j, &i) in perm.iter().enumerate() {
                prop_assert_eq!(w2[j], w1[i]);
            }
            let s: f64 = w1.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6 && w1.iter().all(|&p| p >= 0.0));
        }
    }
}
