use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{normal_tensor, Init, LayerNorm, SeConfig, SqueezeExcitation, TemporalShift, TsmConfig};
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionConfig {
    pub stem_channels: usize,
    /// Output channels of each shift-conv-SE stage; the last is the embedding width.
    pub stage_channels: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_shift")]
    pub shift_fraction: f64,
    #[serde(default = "default_reduction")]
    pub se_reduction: usize,
}

fn default_kernel() -> usize {
    3
}
fn default_shift() -> f64 {
    0.25
}
fn default_reduction() -> usize {
    4
}

impl MotionConfig {
    pub fn output_dim(&self) -> usize {
        self.stage_channels.last().copied().unwrap_or(self.stem_channels)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.kernel.is_multiple_of(2) {
            problems.push(format!("motion conv kernel {} must be odd", self.kernel));
        }
        if self.stage_channels.is_empty() {
            problems.push("motion encoder needs at least one stage".into());
        }
        let mut cin = self.stem_channels;
        for &cout in &self.stage_channels {
            for r in [TsmConfig::new(self.shift_fraction, cin).validate(), SeConfig::new(cout, self.se_reduction).validate()] {
                if let Err(Error::Validation(p)) = r {
                    problems.extend(p);
                }
            }
            cin = cout;
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

#[derive(Clone, Debug)]
pub struct MotionStage {
    pub shift: TemporalShift,
    pub conv: ParamId,
    pub bias: ParamId,
    pub norm: LayerNorm,
    pub se: SqueezeExcitation,
}

/// Full-frame motion stream: a stem convolution with 2×2 pooling, then
/// stages of temporal shift, spatial convolution, GELU and channel gating,
/// then a global average over time and space. Every convolution is followed
/// by a per-position layer norm over channels.
#[derive(Clone, Debug)]
pub struct MotionEncoder {
    pub cfg: MotionConfig,
    pub in_channels: usize,
    pub stem: ParamId,
    pub stem_bias: ParamId,
    pub stem_norm: LayerNorm,
    pub stages: Vec<MotionStage>,
}

fn conv_weight<T: Real, R: Rng + ?Sized>(rng: &mut R, k: usize, cin: usize, cout: usize) -> Tensor<T> {
    normal_tensor(rng, &[k, k, cin, cout], 1.0 / ((k * k * cin) as f64).sqrt())
}

impl MotionEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: MotionConfig,
        in_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.kernel;
        let stem = store.add(format!("{prefix}.stem.weight"), conv_weight(rng, k, in_channels, cfg.stem_channels))?;
        let stem_bias = store.add(format!("{prefix}.stem.bias"), Tensor::zeros(&[cfg.stem_channels]))?;
        let stem_norm = LayerNorm::new(store, &format!("{prefix}.stem.norm"), cfg.stem_channels)?;
        let mut stages = Vec::with_capacity(cfg.stage_channels.len());
        let mut cin = cfg.stem_channels;
        for (i, &cout) in cfg.stage_channels.iter().enumerate() {
            let p = format!("{prefix}.stage{i}");
            stages.push(MotionStage {
                shift: TemporalShift::new(TsmConfig::new(cfg.shift_fraction, cin))?,
                conv: store.add(format!("{p}.conv.weight"), conv_weight(rng, k, cin, cout))?,
                bias: store.add(format!("{p}.conv.bias"), Tensor::zeros(&[cout]))?,
                norm: LayerNorm::new(store, &format!("{p}.norm"), cout)?,
                se: SqueezeExcitation::new(
                    store,
                    &format!("{p}.se"),
                    SeConfig::new(cout, cfg.se_reduction),
                    Init::Scaled(1.0),
                    rng,
                )?,
            });
            cin = cout;
        }
        Ok(Self {
            stem_norm,
            cfg,
            in_channels,
            stem,
            stem_bias,
            stages,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.cfg.output_dim()
    }

    /// `z_m[1×D_m]` from full frames `[T×H×W×C]`. Pooling is skipped when
    /// either spatial extent is odd.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, frames: Var) -> Result<Var> {
        let (h, w) = match tape.shape(frames) {
            [_, h, w, c] if *c == self.in_channels => (*h, *w),
            s => return Err(Error::dim("motion_encoder", s, &[0, 0, 0, self.in_channels])),
        };
        let wt = tape.param(store, self.stem);
        let b = tape.param(store, self.stem_bias);
        let x = tape.conv2d(frames, wt)?;
        let x = tape.add_row(x, b)?;
        let x = self.stem_norm.forward(tape, store, x)?;
        let mut x = tape.gelu(x)?;
        if h % 2 == 0 && w % 2 == 0 {
            x = tape.avg_pool2(x)?;
        }
        for st in &self.stages {
            let s = st.shift.forward(tape, x)?;
            let wt = tape.param(store, st.conv);
            let b = tape.param(store, st.bias);
            let y = tape.conv2d(s, wt)?;
            let y = tape.add_row(y, b)?;
            let y = st.norm.forward(tape, store, y)?;
            let y = tape.gelu(y)?;
            x = st.se.forward(tape, store, y)?;
        }
        tape.mean_rows(x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.stem, self.stem_bias];
        p.extend(self.stem_norm.params());
        for st in &self.stages {
            p.extend([st.conv, st.bias]);
            p.extend(st.norm.params());
            p.extend(st.se.params());
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(store: &mut ParamStore<f64>, c: usize) -> MotionEncoder {
        let cfg = MotionConfig {
            stem_channels: 8,
            stage_channels: vec![8, 12],
            kernel: 3,
            shift_fraction: 0.25,
            se_reduction: 4,
        };
        MotionEncoder::new(store, "m", cfg, c, &mut ChaCha8Rng::seed_from_u64(2)).unwrap()
    }

    #[test]
    fn output_width_and_zero_input() {
        let mut store = ParamStore::new();
        let enc = encoder(&mut store, 4);
        let run = |x: Tensor<f64>| {
            let mut tape = Tape::new();
            let v = tape.constant(x);
            let z = enc.forward(&mut tape, &store, v).unwrap();
            tape.value(z).clone()
        };
        let z = run(Tensor::zeros(&[8, 16, 16, 4]));
        assert_eq!(z.shape(), &[1, 12]);
        assert!(z.is_finite());
        assert_eq!(z, run(Tensor::zeros(&[8, 16, 16, 4])));
    }

    #[test]
    fn shift_that_moves_no_channel_is_rejected() {
        let cfg = MotionConfig {
            stem_channels: 2,
            stage_channels: vec![4],
            kernel: 3,
            shift_fraction: 0.25,
            se_reduction: 4,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let mut store = ParamStore::new();
        let enc = encoder(&mut store, 2);
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::zeros(&[2, 4, 4, 3]));
        assert!(matches!(enc.forward(&mut tape, &store, v), Err(Error::Dimension { .. })));
    }
}
