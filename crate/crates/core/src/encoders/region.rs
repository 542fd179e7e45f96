use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Number of body regions, and so of experts.
pub const NUM_REGIONS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionId {
    Head,
    Body,
    UpperLimb,
    LowerLimb,
}

impl RegionId {
    pub const ALL: [RegionId; NUM_REGIONS] = [RegionId::Head, RegionId::Body, RegionId::UpperLimb, RegionId::LowerLimb];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            RegionId::Head => "head",
            RegionId::Body => "body",
            RegionId::UpperLimb => "upper_limb",
            RegionId::LowerLimb => "lower_limb",
        }
    }
}

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RegionId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|r| r.name() == norm || r.name().replace('_', "") == norm)
            .ok_or_else(|| Error::Validation(vec![format!("unknown region `{s}`")]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for r in RegionId::ALL {
            assert_eq!(r.name().parse::<RegionId>().unwrap(), r);
            assert_eq!(RegionId::from_index(r.index()), Some(r));
        }
        assert_eq!("UpperLimb".parse::<RegionId>().unwrap(), RegionId::UpperLimb);
        assert!("torso".parse::<RegionId>().is_err());
        assert_eq!(serde_json::to_string(&RegionId::LowerLimb).unwrap(), "\"lower_limb\"");
    }
}
