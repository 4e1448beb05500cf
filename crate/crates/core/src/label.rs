//! The semantic label set: eleven object classes plus the empty label.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of object classes (the empty label excluded).
pub const NUM_CLASSES: usize = 11;

/// Segmentation-map code for pixels with no label.
pub const UNKNOWN_CODE: u8 = 255;

const NAMES: [&str; NUM_CLASSES + 1] = [
    "empty",
    "ceiling",
    "floor",
    "wall",
    "window",
    "chair",
    "bed",
    "sofa",
    "table",
    "tvs",
    "furniture",
    "objects",
];

/// A semantic label code in `0..=11`; `0` is empty/background.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct SemanticLabel(u8);

impl SemanticLabel {
    pub const EMPTY: Self = Self(0);
    pub const CEILING: Self = Self(1);
    pub const FLOOR: Self = Self(2);
    pub const WALL: Self = Self(3);
    pub const WINDOW: Self = Self(4);
    pub const CHAIR: Self = Self(5);
    pub const BED: Self = Self(6);
    pub const SOFA: Self = Self(7);
    pub const TABLE: Self = Self(8);
    pub const TVS: Self = Self(9);
    pub const FURNITURE: Self = Self(10);
    pub const OBJECTS: Self = Self(11);

    pub fn new(code: u8) -> Result<Self> {
        if code as usize <= NUM_CLASSES {
            Ok(Self(code))
        } else {
            Err(Error::OutOfRange(format!("label code {code} not in 0..=11")))
        }
    }

    /// Label for a zero-based class index (`0` is ceiling).
    pub fn from_class_index(index: usize) -> Option<Self> {
        (index < NUM_CLASSES).then(|| Self(index as u8 + 1))
    }

    pub fn code(self) -> u8 {
        self.0
    }

    /// Zero-based class index, `None` for the empty label.
    pub fn class_index(self) -> Option<usize> {
        (self.0 > 0).then(|| self.0 as usize - 1)
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn name(self) -> &'static str {
        NAMES[self.0 as usize]
    }

    /// All eleven object classes in code order.
    pub fn classes() -> impl Iterator<Item = Self> {
        (1..=NUM_CLASSES as u8).map(Self)
    }
}

impl TryFrom<u8> for SemanticLabel {
    type Error = Error;

    fn try_from(code: u8) -> Result<Self> {
        Self::new(code)
    }
}

impl From<SemanticLabel> for u8 {
    fn from(label: SemanticLabel) -> u8 {
        label.0
    }
}

impl fmt::Display for SemanticLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
