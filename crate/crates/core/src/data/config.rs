use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::encoders::{Mask, RegionId, NUM_REGIONS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    /// Half-sine pulse lasting a few frames at a random start.
    Burst,
    /// Linear drift over the whole clip.
    Sustained,
}

/// Part of the region's pixels that carries the signal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    Whole,
    LeftHalf,
    RightHalf,
    /// The first pixel column of the left half.
    LeftLine,
    /// The first pixel column of the right half.
    RightLine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub class_id: usize,
    /// Words describing the action.
    pub name: Vec<String>,
    pub region: RegionId,
    pub motion_kind: MotionKind,
    /// Inclusive `[min, max]` pulse length in frames (bursts only).
    pub duration_frames: [usize; 2],
    pub amplitude: f64,
    /// Index of the per-channel direction the signal points along.
    #[serde(default)]
    pub pattern: usize,
    /// Amplitude of an extra `(−1)^t` component along the same direction.
    #[serde(default)]
    pub flicker: f64,
    #[serde(default)]
    pub placement: Placement,
}

impl ClassSpec {
    pub fn display_name(&self) -> String {
        self.name.iter().flat_map(|w| w.split_whitespace()).collect::<Vec<_>>().join("_")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub classes: Vec<ClassSpec>,
    pub clip_length: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub noise_std: f64,
    pub samples_per_class: usize,
    /// Per-class sample counts; overrides `samples_per_class` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_counts: Option<Vec<usize>>,
    /// Whether each sample assigns regions to quadrants in a random order.
    #[serde(default)]
    pub region_layout: RegionLayout,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionLayout {
    /// Head, body, upper limb, lower limb at top-left, top-right, bottom-left, bottom-right.
    #[default]
    Fixed,
    /// A per-sample random permutation of the quadrants.
    Shuffled,
}

impl DatasetConfig {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.class_counts
            .clone()
            .unwrap_or_else(|| vec![self.samples_per_class; self.classes.len()])
    }

    pub fn total_samples(&self) -> usize {
        self.counts().iter().sum()
    }

    pub fn class_region_map(&self) -> Vec<RegionId> {
        self.classes.iter().map(|c| c.region).collect()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(ClassSpec::display_name).collect()
    }

    /// Region masks of the fixed layout: the four spatial quadrants, in
    /// [`RegionId`] order (top-left, top-right, bottom-left, bottom-right).
    pub fn masks(&self) -> [Mask; NUM_REGIONS] {
        quadrant_masks(self.height, self.width)
    }

    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.classes.is_empty() {
            p.push("dataset needs at least one class".to_string());
        }
        if self.clip_length == 0 || self.channels == 0 {
            p.push("clip length and channel count must be positive".to_string());
        }
        if self.height < 2 || self.width < 2 || !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) {
            p.push(format!("frame size {}x{} must be even in both axes", self.height, self.width));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            p.push(format!("noise_std {} must be finite and non-negative", self.noise_std));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.class_id != i {
                p.push(format!("class at position {i} has class_id {}", c.class_id));
            }
            if c.name.is_empty() || c.name.iter().any(|w| w.trim().is_empty()) {
                p.push(format!("class {i} needs a non-empty word list"));
            }
            if !(c.amplitude >= 0.0 && c.amplitude.is_finite()) {
                p.push(format!("class {i} amplitude {} must be finite and non-negative", c.amplitude));
            }
            if !c.flicker.is_finite() {
                p.push(format!("class {i} flicker must be finite"));
            }
            let [lo, hi] = c.duration_frames;
            if lo == 0 || lo > hi || hi > self.clip_length {
                p.push(format!(
                    "class {i} duration range [{lo}, {hi}] must lie within 1..={}",
                    self.clip_length
                ));
            }
        }
        let owned: BTreeSet<RegionId> = self.classes.iter().map(|c| c.region).collect();
        for r in RegionId::ALL {
            if !owned.contains(&r) {
                p.push(format!("region {r} owns no class"));
            }
        }
        match &self.class_counts {
            Some(counts) if counts.len() != self.classes.len() => {
                p.push(format!("{} class counts for {} classes", counts.len(), self.classes.len()))
            }
            Some(counts) if counts.contains(&0) => p.push("every class count must be at least 1".into()),
            None if self.samples_per_class == 0 => p.push("samples_per_class must be at least 1".into()),
            _ => {}
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(p))
        }
    }

    /// Eight classes, two per region (a burst and a sustained drift along the
    /// same direction), at small noise.
    pub fn separable(seed: u64) -> Self {
        let mut classes = Vec::new();
        for r in RegionId::ALL {
            for kind in [MotionKind::Burst, MotionKind::Sustained] {
                let word = match kind {
                    MotionKind::Burst => "twitch",
                    MotionKind::Sustained => "drift",
                };
                classes.push(ClassSpec {
                    class_id: classes.len(),
                    name: vec![r.name().replace('_', " "), word.to_string()],
                    region: r,
                    motion_kind: kind,
                    duration_frames: [3, 5],
                    amplitude: 1.0,
                    pattern: 0,
                    flicker: 0.0,
                    placement: Placement::Whole,
                });
            }
        }
        Self {
            classes,
            clip_length: 8,
            height: 8,
            width: 8,
            channels: 2,
            noise_std: 0.1,
            samples_per_class: 100,
            class_counts: None,
            region_layout: RegionLayout::Fixed,
            seed,
        }
    }
}

impl DatasetConfig {
    /// Eight classes in two groups, with shuffled region layout. In the
    /// first, Head and Body classes differ only in a frame-alternating flicker
    /// that two-frame averaging removes. In the second, upper- and lower-limb
    /// classes share one envelope and differ only in which region moves and
    /// their channel pattern.
    pub fn stream_contrast(seed: u64) -> Self {
        let mut classes = Vec::new();
        let mut push = |region: RegionId, pattern: usize, flicker: f64, kind: MotionKind, word: &str| {
            classes.push(ClassSpec {
                class_id: classes.len(),
                name: vec![region.name().replace('_', " "), word.to_string()],
                region,
                motion_kind: kind,
                duration_frames: [3, 5],
                amplitude: 1.0,
                pattern,
                flicker,
                placement: Placement::Whole,
            });
        };
        for (r, p) in [(RegionId::Head, 0), (RegionId::Body, 1)] {
            push(r, p, 0.0, MotionKind::Sustained, "rise");
            push(r, p, 0.6, MotionKind::Sustained, "tremor");
        }
        for r in [RegionId::UpperLimb, RegionId::LowerLimb] {
            push(r, 2, 0.0, MotionKind::Burst, "flick");
            push(r, 3, 0.0, MotionKind::Burst, "jerk");
        }
        Self {
            classes,
            region_layout: RegionLayout::Shuffled,
            ..Self::separable(seed)
        }
    }

    /// Eight classes, two per region, with shuffled region layout. Each
    /// region has its own channel pattern; its two classes differ only in
    /// which half of the region carries the signal, as a single pixel column
    /// on even coordinates at amplitude 4.
    pub fn half_placement(seed: u64) -> Self {
        let mut cfg = Self::separable(seed);
        for (i, c) in cfg.classes.iter_mut().enumerate() {
            let (placement, word) = if i % 2 == 0 {
                (Placement::LeftLine, "left")
            } else {
                (Placement::RightLine, "right")
            };
            c.motion_kind = MotionKind::Burst;
            c.amplitude = 4.0;
            c.pattern = c.region.index();
            c.placement = placement;
            c.name[1] = word.to_string();
        }
        cfg.region_layout = RegionLayout::Shuffled;
        cfg
    }
}

pub fn quadrant_masks(height: usize, width: usize) -> [Mask; NUM_REGIONS] {
    let (h2, w2) = (height / 2, width / 2);
    [
        Mask::rect(height, width, 0..h2, 0..w2),
        Mask::rect(height, width, 0..h2, w2..width),
        Mask::rect(height, width, h2..height, 0..w2),
        Mask::rect(height, width, h2..height, w2..width),
    ]
}

/// Scales the counts of `tail_classes` by `tail_fraction` (floored, at least 1).
pub fn make_imbalanced(cfg: &DatasetConfig, tail_classes: &[usize], tail_fraction: f64) -> Result<DatasetConfig> {
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(Error::Validation(vec![format!("tail fraction {tail_fraction} must lie in (0, 1]")]));
    }
    let mut counts = cfg.counts();
    for &c in tail_classes {
        let n = counts
            .get_mut(c)
            .ok_or_else(|| Error::Validation(vec![format!("unknown class id {c}")]))?;
        *n = (((*n as f64) * tail_fraction + 1e-9).floor() as usize).max(1);
    }
    Ok(DatasetConfig {
        class_counts: Some(counts),
        ..cfg.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_config_is_valid() {
        let cfg = DatasetConfig::separable(1);
        cfg.validate().unwrap();
        assert_eq!(cfg.num_classes(), 8);
        assert_eq!(cfg.total_samples(), 800);
        assert_eq!(cfg.class_names()[2], "body_twitch");
    }

    #[test]
    fn quadrants_tile_the_frame() {
        let m = quadrant_masks(6, 4);
        for i in 0..24 {
            assert_eq!(m.iter().filter(|q| q.bits[i]).count(), 1);
        }
        assert_eq!(m[1].bounding_box(), Some((0, 3, 2, 4)));
    }

    #[test]
    fn validation_lists_every_problem() {
        let mut cfg = DatasetConfig::separable(0);
        cfg.classes.retain(|c| c.region != RegionId::Body);
        cfg.height = 7;
        cfg.classes[0].duration_frames = [4, 2];
        match cfg.validate() {
            Err(Error::Validation(p)) => {
                assert!(p.iter().any(|m| m.contains("body owns no class")), "{p:?}");
                assert!(p.iter().any(|m| m.contains("even")));
                assert!(p.iter().any(|m| m.contains("duration")));
                assert!(p.iter().any(|m| m.contains("class_id")));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn imbalance_scales_tail_counts() {
        let cfg = DatasetConfig::separable(0);
        assert_eq!(make_imbalanced(&cfg, &[0, 1], 1.0).unwrap().counts(), cfg.counts());
        let im = make_imbalanced(&cfg, &[3], 0.05).unwrap();
        assert_eq!(im.counts()[3], 5);
        assert_eq!(make_imbalanced(&cfg, &[3], 0.001).unwrap().counts()[3], 1);
        assert!(make_imbalanced(&cfg, &[99], 0.5).is_err());
        assert!(make_imbalanced(&cfg, &[0], 0.0).is_err());
    }
}
