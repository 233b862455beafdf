use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Number of segmentation classes.
pub const NUM_CLASSES: usize = 4;

/// Frame-level segmentation classes, in logit-row order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Class {
    /// Speech activity.
    Sad,
    /// Music.
    Md,
    /// Noise.
    Nd,
    /// Overlapped speech (two or more concurrent speakers).
    Osd,
}

impl Class {
    pub const ALL: [Class; NUM_CLASSES] = [Class::Sad, Class::Md, Class::Nd, Class::Osd];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Class> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Sad => "SAD",
            Class::Md => "MD",
            Class::Nd => "ND",
            Class::Osd => "OSD",
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Class {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "SAD" | "SPEECH" => Ok(Class::Sad),
            "MD" | "MUSIC" => Ok(Class::Md),
            "ND" | "NOISE" => Ok(Class::Nd),
            "OSD" | "OVERLAP" => Ok(Class::Osd),
            other => Err(Error::Config(format!("unknown class `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_index_round_trip() {
        for c in Class::ALL {
            assert_eq!(c.name().parse::<Class>().unwrap(), c);
            assert_eq!(Class::from_index(c.index()), Some(c));
        }
        assert_eq!("music".parse::<Class>().unwrap(), Class::Md);
        assert!("cat".parse::<Class>().is_err());
    }
}
