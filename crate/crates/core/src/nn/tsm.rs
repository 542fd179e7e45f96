use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsmConfig {
    pub shift_fraction: f64,
    pub channels: usize,
}

impl TsmConfig {
    pub fn new(shift_fraction: f64, channels: usize) -> Self {
        Self { shift_fraction, channels }
    }

    /// Channels shifted in each direction.
    pub fn fold(&self) -> usize {
        (self.shift_fraction * self.channels as f64).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.shift_fraction > 0.0 && self.shift_fraction <= 0.5) {
            problems.push(format!("TSM shift fraction {} must lie in (0, 0.5]", self.shift_fraction));
        }
        if self.fold() < 1 {
            problems.push(format!(
                "TSM with fraction {} over {} channels shifts no channel",
                self.shift_fraction, self.channels
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// Parameter-free temporal shift over the leading (time) axis.
#[derive(Clone, Copy, Debug)]
pub struct TemporalShift {
    pub cfg: TsmConfig,
}

impl TemporalShift {
    pub fn new(cfg: TsmConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let c = *tape.shape(x).last().expect("non-empty shape");
        if c != self.cfg.channels {
            return Err(Error::dim("temporal_shift", tape.shape(x), &[self.cfg.channels]));
        }
        tape.temporal_shift(x, self.cfg.fold())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn shift(x: Tensor<f64>, f: f64) -> Vec<f64> {
        let c = *x.shape().last().unwrap();
        let tsm = TemporalShift::new(TsmConfig::new(f, c)).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = tsm.forward(&mut tape, v).unwrap();
        tape.value(y).data().to_vec()
    }

    fn column(y: &[f64], c: usize, ch: usize) -> Vec<f64> {
        y.chunks(c).map(|r| r[ch]).collect()
    }

    #[test]
    fn all_ones_boundaries() {
        let y = shift(Tensor::full(&[3, 4], 1.0), 0.25);
        assert_eq!(column(&y, 4, 0), vec![1.0, 1.0, 0.0]);
        assert_eq!(column(&y, 4, 1), vec![0.0, 1.0, 1.0]);
        assert_eq!(column(&y, 4, 2), vec![1.0; 3]);
        assert_eq!(column(&y, 4, 3), vec![1.0; 3]);
    }

    #[test]
    fn single_frame_zeroes_shifted_channels() {
        let y = shift(Tensor::from_f64(&[1, 4], &[1.0, 2.0, 3.0, 4.0]).unwrap(), 0.25);
        assert_eq!(y, vec![0.0, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn fraction_that_shifts_nothing_is_rejected() {
        assert!(TsmConfig::new(0.25, 2).validate().is_err());
        assert!(TsmConfig::new(0.6, 8).validate().is_err());
    }

    proptest! {
        #[test]
        fn shape_and_zero_fill_count(t in 1usize..7, c in 4usize..12, seed in any::<u64>()) {
            let data: Vec<f64> = (0..t * c).map(|i| 1.0 + ((i as u64).wrapping_mul(seed | 1) % 97) as f64).collect();
            let x = Tensor::new(&[t, c], data).unwrap();
            let y = shift(x, 0.25);
            prop_assert_eq!(y.len(), t * c);
            let fold = (0.25 * c as f64).floor() as usize;
            prop_assert_eq!(y.iter().filter(|&&v| v == 0.0).count(), 2 * fold);
        }

        #[test]
        fn left_then_right_restores_interior(t in 3usize..8, seed in any::<u64>()) {
            let c = 4;
            let data: Vec<f64> = (0..t * c).map(|i| ((i as u64 + 1).wrapping_mul(seed | 1) % 1009) as f64).collect();
            let swap = |v: &[f64]| -> Vec<f64> { v.chunks(c).flat_map(|r| [r[1], r[0], r[2], r[3]]).collect() };
            // Shift channel 0 left, move it to the right-shifted slot, shift again.
            let once = shift(Tensor::new(&[t, c], data.clone()).unwrap(), 0.25);
            let twice = swap(&shift(Tensor::new(&[t, c], swap(&once)).unwrap(), 0.25));
            for tt in 1..t - 1 {
                prop_assert_eq!(twice[tt * c], data[tt * c]);
                prop_assert_eq!(twice[tt * c + 1], data[tt * c + 1]);
            }
        }
    }
}
