use serde::{Deserialize, Serialize};

use super::FactoredState;

/// Bit set over factor indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FactorMask(pub u64);

impl FactorMask {
    #[inline]
    pub fn contains(self, factor: usize) -> bool {
        self.0 & (1 << factor) != 0
    }

    pub fn to_vec(self, factor_count: usize) -> Vec<bool> {
        (0..factor_count).map(|f| self.contains(f)).collect()
    }
}

/// Task-endogenous part of a state-goal pair.
///
/// The agent position is always endogenous; an object is endogenous when it
/// differs between `s` and `g` or (transitively) guards an endogenous factor.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EndogenousLabel {
    pub mask: Vec<bool>,
    /// Values of `s` on the masked factors.
    pub source: Vec<usize>,
    /// Values of `g` on the masked factors.
    pub goal: Vec<usize>,
}

impl EndogenousLabel {
    pub(crate) fn new(mask: FactorMask, s: &FactoredState, g: &FactoredState, n: usize) -> Self {
        let pick = |st: &FactoredState| {
            (0..n)
                .filter(|&f| mask.contains(f))
                .map(|f| st.0[f])
                .collect()
        };
        EndogenousLabel {
            mask: mask.to_vec(n),
            source: pick(s),
            goal: pick(g),
        }
    }

    /// Indices of exogenous factors.
    pub fn exogenous(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| !m)
            .map(|(i, _)| i)
            .collect()
    }
}
