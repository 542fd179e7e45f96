use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AttentionConfig, Init, Linear, TransformerEncoder};
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemanticConfig {
    pub model_dim: usize,
    /// Side of the square grid every crop is resized to.
    pub patch: usize,
    pub depth: usize,
    pub num_heads: usize,
    /// Consecutive frames averaged into one token.
    #[serde(default = "default_tubelet")]
    pub tubelet: usize,
}

fn default_tubelet() -> usize {
    1
}

impl SemanticConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(Error::Validation(p)) = AttentionConfig::new(self.model_dim, self.num_heads).validate() {
            problems.extend(p);
        }
        if self.patch == 0 {
            problems.push("semantic patch grid must be at least 1x1".into());
        }
        if self.tubelet == 0 {
            problems.push("semantic tubelet must be at least 1 frame".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn num_tokens(&self, frames: usize) -> usize {
        frames.div_ceil(self.tubelet)
    }
}

/// Nearest-neighbour resize of `[T×h×w×C]` frames to `p×p`, flattened per
/// frame, then averaged over groups of `tubelet` frames: `[T'×(p·p·C)]`.
pub fn patchify<T: Real>(frames: &Tensor<f32>, patch: usize, tubelet: usize) -> Tensor<T> {
    let [t, h, w, c] = *frames.shape() else {
        panic!("patchify expects [T,H,W,C] frames, got {:?}", frames.shape());
    };
    let src = frames.data();
    let near = |i: usize, n: usize| (((2 * i + 1) * n) / (2 * patch)).min(n - 1);
    let width = patch * patch * c;
    let tokens = t.div_ceil(tubelet);
    let mut out = vec![T::zero(); tokens * width];
    for (k, group) in (0..t).collect::<Vec<_>>().chunks(tubelet).enumerate() {
        let inv = T::one() / T::lit(group.len() as f64);
        let row = &mut out[k * width..(k + 1) * width];
        for &f in group {
            for y in 0..patch {
                for x in 0..patch {
                    let base = ((f * h + near(y, h)) * w + near(x, w)) * c;
                    for ch in 0..c {
                        row[(y * patch + x) * c + ch] += T::lit(src[base + ch] as f64);
                    }
                }
            }
        }
        row.iter_mut().for_each(|v| *v *= inv);
    }
    Tensor::new(&[tokens, width], out).expect("patch shape")
}

/// Fixed sinusoidal position table `[T×D]`.
pub fn positional_encoding<T: Real>(tokens: usize, dim: usize) -> Tensor<T> {
    let data = (0..tokens)
        .flat_map(|t| {
            (0..dim).map(move |j| {
                let freq = 10000f64.powf(-((j / 2 * 2) as f64) / dim as f64);
                let a = t as f64 * freq;
                T::lit(if j % 2 == 0 { a.sin() } else { a.cos() })
            })
        })
        .collect();
    Tensor::new(&[tokens, dim], data).expect("position table shape")
}

/// Token transformer shared by every region crop and the full frame.
#[derive(Clone, Debug)]
pub struct SemanticEncoder {
    pub cfg: SemanticConfig,
    pub channels: usize,
    pub embed: Linear,
    pub blocks: TransformerEncoder,
}

impl SemanticEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: SemanticConfig,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let inputs = cfg.patch * cfg.patch * channels;
        Ok(Self {
            cfg,
            channels,
            embed: Linear::new(store, &format!("{prefix}.embed"), inputs, cfg.model_dim, Init::Scaled(1.0), rng)?,
            blocks: TransformerEncoder::new(
                store,
                &format!("{prefix}.blocks"),
                AttentionConfig::new(cfg.model_dim, cfg.num_heads),
                cfg.depth,
                rng,
            )?,
        })
    }

    pub fn patchify<T: Real>(&self, frames: &Tensor<f32>) -> Tensor<T> {
        patchify(frames, self.cfg.patch, self.cfg.tubelet)
    }

    /// Tokens `[T'×D]` from patch rows produced by [`SemanticEncoder::patchify`].
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, patches: Var) -> Result<Var> {
        let width = self.cfg.patch * self.cfg.patch * self.channels;
        let tokens = match tape.shape(patches) {
            [t, w] if *w == width => *t,
            s => return Err(Error::dim("semantic_encoder", s, &[0, width])),
        };
        let x = self.embed.forward(tape, store, patches)?;
        let pe = tape.constant(positional_encoding(tokens, self.cfg.model_dim));
        let x = tape.add(x, pe)?;
        self.blocks.forward(tape, store, x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.embed.params();
        p.extend(self.blocks.params());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_picks_nearest_pixels() {
        let f = Tensor::new(&[1, 4, 4, 1], (0..16).map(|v| v as f32).collect()).unwrap();
        let p: Tensor<f64> = patchify(&f, 2, 1);
        assert_eq!(p.data(), &[5.0, 7.0, 13.0, 15.0]);
        let same: Tensor<f64> = patchify(&f, 4, 1);
        assert_eq!(same.data(), &(0..16).map(|v| v as f64).collect::<Vec<_>>()[..]);
        let unit = Tensor::new(&[1, 1, 1, 1], vec![3.0f32]).unwrap();
        let up: Tensor<f64> = patchify(&unit, 3, 1);
        assert_eq!(up.data(), &[3.0; 9]);
    }

    #[test]
    fn tubelets_average_consecutive_frames() {
        let f = Tensor::new(&[3, 1, 1, 1], vec![1.0f32, 3.0, 10.0]).unwrap();
        let p: Tensor<f64> = patchify(&f, 1, 2);
        assert_eq!(p.shape(), &[2, 1]);
        assert_eq!(p.data(), &[2.0, 10.0]);
    }

    #[test]
    fn position_table_starts_with_sin_cos_of_zero() {
        let pe: Tensor<f64> = positional_encoding(3, 4);
        assert_eq!(&pe.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.data()[4] - 1f64.sin()).abs() < 1e-15);
    }
}
