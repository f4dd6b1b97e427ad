use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Split of a matrix's columns into salient and non-salient sets. Both lists
/// are ascending, disjoint, and together cover `0..width`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PartitionRepr", into = "PartitionRepr")]
pub struct SalientPartition {
    salient: Vec<usize>,
    non_salient: Vec<usize>,
    width: usize,
}

#[derive(Serialize, Deserialize)]
struct PartitionRepr {
    width: usize,
    salient: Vec<usize>,
}

impl TryFrom<PartitionRepr> for SalientPartition {
    type Error = Error;

    fn try_from(r: PartitionRepr) -> Result<Self> {
        SalientPartition::new(r.width, r.salient)
    }
}

impl From<SalientPartition> for PartitionRepr {
    fn from(p: SalientPartition) -> Self {
        PartitionRepr {
            width: p.width,
            salient: p.salient,
        }
    }
}

impl SalientPartition {
    pub fn new(width: usize, mut salient: Vec<usize>) -> Result<Self> {
        salient.sort_unstable();
        if salient.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("duplicate salient column".into()));
        }
        if let Some(&c) = salient.iter().find(|&&c| c >= width) {
            return Err(Error::InvalidConfig(format!(
                "salient column {c} outside width {width}"
            )));
        }
        let mut mask = vec![false; width];
        for &c in &salient {
            mask[c] = true;
        }
        let non_salient = (0..width).filter(|&c| !mask[c]).collect();
        Ok(Self {
            salient,
            non_salient,
            width,
        })
    }

    pub fn all_salient(width: usize) -> Self {
        Self {
            salient: (0..width).collect(),
            non_salient: Vec::new(),
            width,
        }
    }

    pub fn none_salient(width: usize) -> Self {
        Self {
            salient: Vec::new(),
            non_salient: (0..width).collect(),
            width,
        }
    }

    pub fn salient(&self) -> &[usize] {
        &self.salient
    }

    pub fn non_salient(&self) -> &[usize] {
        &self.non_salient
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn k(&self) -> usize {
        self.salient.len()
    }

    /// `true` at every salient column.
    pub fn mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.width];
        for &c in &self.salient {
            mask[c] = true;
        }
        mask
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complement_is_computed() {
        let p = SalientPartition::new(5, vec![3, 0]).unwrap();
        assert_eq!(p.salient(), &[0, 3]);
        assert_eq!(p.non_salient(), &[1, 2, 4]);
        assert_eq!(p.k(), 2);
    }

    #[test]
    fn rejects_bad_indices() {
        assert!(SalientPartition::new(3, vec![3]).is_err());
        assert!(SalientPartition::new(3, vec![1, 1]).is_err());
    }

    #[test]
    fn serde_round_trip_validates() {
        let p = SalientPartition::new(4, vec![2]).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, r#"{"width":4,"salient":[2]}"#);
        let back: SalientPartition = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        assert!(serde_json::from_str::<SalientPartition>(r#"{"width":2,"salient":[5]}"#).is_err());
    }
}
