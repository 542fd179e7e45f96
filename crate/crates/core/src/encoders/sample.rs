use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{RegionId, NUM_REGIONS};

/// Binary `[H×W]` mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::dim("mask", &[height, width], &[bits.len()]));
        }
        Ok(Self { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    /// Mask of the rectangle `rows × cols` (half-open ranges).
    pub fn rect(height: usize, width: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Self {
        let bits = (0..height * width)
            .map(|i| rows.contains(&(i / width)) && cols.contains(&(i % width)))
            .collect();
        Self { height, width, bits }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Tightest `(y0, y1, x0, x1)` half-open box containing every set pixel.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for (i, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            let (y, x) = (i / self.width, i % self.width);
            bb = Some(match bb {
                None => (y, y + 1, x, x + 1),
                Some((y0, y1, x0, x1)) => (y0.min(y), y1.max(y + 1), x0.min(x), x1.max(x + 1)),
            });
        }
        bb
    }
}

/// One synthetic clip: `[T×H×W×C]` frames, one mask per region, and its label.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub frames: Tensor<f32>,
    pub masks: [Mask; NUM_REGIONS],
    pub label: usize,
    pub region: RegionId,
}

impl VideoSample {
    /// `(T, H, W, C)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        match self.frames.shape() {
            [t, h, w, c] => (*t, *h, *w, *c),
            _ => (0, 0, 0, 0),
        }
    }

    pub fn mask(&self, r: RegionId) -> &Mask {
        &self.masks[r.index()]
    }

    /// Checks the frame rank, mask geometry and disjointness, and the label.
    pub fn validate(&self, class_region_map: &[RegionId]) -> Result<()> {
        let mut problems = Vec::new();
        if self.frames.rank() != 4 {
            problems.push(format!("frames must be [T,H,W,C], got {:?}", self.frames.shape()));
        }
        let (_, h, w, _) = self.dims();
        for (r, m) in RegionId::ALL.iter().zip(&self.masks) {
            if m.height != h || m.width != w {
                problems.push(format!("{r} mask is {}x{}, frames are {h}x{w}", m.height, m.width));
            }
        }
        if problems.is_empty() {
            let overlap = (0..h * w).any(|i| self.masks.iter().filter(|m| m.bits[i]).count() > 1);
            if overlap {
                problems.push("region masks overlap".into());
            }
        }
        match class_region_map.get(self.label) {
            None => problems.push(format!("label {} out of range for {} classes", self.label, class_region_map.len())),
            Some(&r) if r != self.region => {
                problems.push(format!("label {} belongs to {r}, sample says {}", self.label, self.region))
            }
            _ => {}
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounding_boxes() {
        let m = Mask::rect(8, 8, 2..5, 1..3);
        assert_eq!(m.bounding_box(), Some((2, 5, 1, 3)));
        assert_eq!(m.count(), 6);
        assert_eq!(Mask::empty(4, 4).bounding_box(), None);
        assert_eq!(Mask::full(3, 5).bounding_box(), Some((0, 3, 0, 5)));
    }

    #[test]
    fn overlapping_masks_and_bad_labels_are_reported() {
        let s = VideoSample {
            frames: Tensor::zeros(&[2, 4, 4, 1]),
            masks: [Mask::full(4, 4), Mask::rect(4, 4, 0..1, 0..1), Mask::empty(4, 4), Mask::empty(4, 4)],
            label: 3,
            region: RegionId::Head,
        };
        match s.validate(&[RegionId::Head]) {
            Err(Error::Validation(p)) => assert_eq!(p.len(), 2, "{p:?}"),
            other => panic!("{other:?}"),
        }
    }
}
