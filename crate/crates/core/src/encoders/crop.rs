use crate::tensor::Tensor;

use super::{Mask, RegionId, VideoSample};

/// Frames cut to a region's bounding box, with pixels outside the mask zeroed.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionCrop {
    pub region: RegionId,
    pub frames: Tensor<f32>,
}

/// Crops `[T×H×W×C]` frames to the tight box around `mask`. An empty mask
/// gives a `[T×1×1×C]` zero crop.
pub fn crop_to_mask(frames: &Tensor<f32>, mask: &Mask) -> Tensor<f32> {
    let [t, h, w, c] = *frames.shape() else {
        panic!("crop_to_mask expects [T,H,W,C] frames, got {:?}", frames.shape());
    };
    debug_assert_eq!((mask.height, mask.width), (h, w));
    let Some((y0, y1, x0, x1)) = mask.bounding_box() else {
        return Tensor::zeros(&[t, 1, 1, c]);
    };
    let (ch, cw) = (y1 - y0, x1 - x0);
    let src = frames.data();
    let mut out = Vec::with_capacity(t * ch * cw * c);
    for f in 0..t {
        for y in y0..y1 {
            for x in x0..x1 {
                let base = ((f * h + y) * w + x) * c;
                if mask.get(y, x) {
                    out.extend_from_slice(&src[base..base + c]);
                } else {
                    out.extend(std::iter::repeat_n(0.0, c));
                }
            }
        }
    }
    Tensor::new(&[t, ch, cw, c], out).expect("crop shape")
}

pub fn extract_region_crops(sample: &VideoSample) -> Vec<RegionCrop> {
    RegionId::ALL
        .iter()
        .map(|&region| RegionCrop {
            region,
            frames: crop_to_mask(&sample.frames, sample.mask(region)),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(t: usize, h: usize, w: usize, c: usize) -> Tensor<f32> {
        Tensor::new(&[t, h, w, c], (0..t * h * w * c).map(|i| 1.0 + i as f32).collect()).unwrap()
    }

    #[test]
    fn full_mask_is_identity() {
        let f = ramp(2, 3, 5, 2);
        assert_eq!(crop_to_mask(&f, &Mask::full(3, 5)), f);
    }

    #[test]
    fn empty_mask_gives_unit_zero_crop() {
        let c = crop_to_mask(&ramp(3, 4, 4, 2), &Mask::empty(4, 4));
        assert_eq!(c.shape(), &[3, 1, 1, 2]);
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quadrant_crop_preserves_masked_sum() {
        let f = ramp(2, 8, 8, 2);
        let m = Mask::rect(8, 8, 4..8, 0..4);
        let c = crop_to_mask(&f, &m);
        assert_eq!(c.shape(), &[2, 4, 4, 2]);
        let mut expected = 0.0f64;
        for (i, v) in f.data().iter().enumerate() {
            let pix = (i / 2) % 64;
            if m.bits[pix] {
                expected += *v as f64;
            }
        }
        let got: f64 = c.data().iter().map(|&v| v as f64).sum();
        assert_eq!(got, expected);
    }

    proptest! {
        #[test]
        fn nothing_outside_the_mask_leaks(bits in proptest::collection::vec(any::<bool>(), 36)) {
            let f = ramp(2, 6, 6, 1);
            let m = Mask::new(6, 6, bits).unwrap();
            let c = crop_to_mask(&f, &m);
            if let Some((y0, _, x0, _)) = m.bounding_box() {
                let [t, ch, cw, _] = *c.shape() else { unreachable!() };
                prop_assert!(ch * cw >= m.count());
                for f_ in 0..t {
                    for y in 0..ch {
                        for x in 0..cw {
                            let v = c.data()[(f_ * ch + y) * cw + x];
                            prop_assert_eq!(v != 0.0, m.get(y0 + y, x0 + x));
                        }
                    }
                }
                // Tightness: every edge of the box touches the mask.
                let (y0, y1, x0, x1) = m.bounding_box().unwrap();
                prop_assert!((x0..x1).any(|x| m.get(y0, x)) && (x0..x1).any(|x| m.get(y1 - 1, x)));
                prop_assert!((y0..y1).any(|y| m.get(y, x0)) && (y0..y1).any(|y| m.get(y, x1 - 1)));
            } else {
                prop_assert_eq!(c.shape(), &[2, 1, 1, 1]);
            }
        }
    }
}
