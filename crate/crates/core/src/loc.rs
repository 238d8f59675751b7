use std::fmt;

use serde::{Deserialize, Serialize};

/// Identifier of a monitored point location.
///
/// Grid locations use the `"i_j"` form (row `i`, column `j`), but any
/// non-empty label is accepted so externally captured knowledge bases with
/// arbitrary labels can be loaded. Ordering is plain lexicographic on the
/// label, which is also the tie-break order used when ranking candidates.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LocId(String);

impl LocId {
    pub fn new(label: impl Into<String>) -> Self {
        LocId(label.into())
    }

    pub fn grid(row: usize, col: usize) -> Self {
        LocId(format!("{row}_{col}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Parses the `"i_j"` grid form.
    pub fn grid_position(&self) -> Option<(usize, usize)> {
        let (row, col) = self.0.split_once('_')?;
        Some((row.parse().ok()?, col.parse().ok()?))
    }

    /// Stable 64-bit FNV-1a hash of the label, used to salt per-location
    /// random streams. Must not change between releases.
    pub fn stable_hash(&self) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        self.0
            .bytes()
            .fold(OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(PRIME))
    }
}

impl fmt::Display for LocId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for LocId {
    fn from(s: &str) -> Self {
        LocId::new(s)
    }
}

impl From<String> for LocId {
    fn from(s: String) -> Self {
        LocId(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_labels_round_trip() {
        let id = LocId::grid(4, 9);
        assert_eq!(id.as_str(), "4_9");
        assert_eq!(id.grid_position(), Some((4, 9)));
        assert_eq!(LocId::new("1").grid_position(), None);
    }

    #[test]
    fn stable_hash_is_fnv1a() {
        // FNV-1a of the empty string is the offset basis.
        assert_eq!(LocId::new("").stable_hash(), 0xcbf2_9ce4_8422_2325);
        assert_eq!(LocId::new("a").stable_hash(), 0xaf63_dc4c_8601_ec8c);
        assert_ne!(LocId::grid(0, 0).stable_hash(), LocId::grid(0, 1).stable_hash());
    }
}
