//! Sign election: for every parameter, the consensus direction is the sign
//! of the magnitude-weighted sum of the pruned task vectors, γ_m = sgn(Σ γ̂⊙μ̂).
//! Since γ̂ ⊙ μ̂ = τ̂ exactly, this is the sign of Σ τ̂.

use std::collections::BTreeMap;

use crate::error::MergeError;
use crate::prune::PrunedTaskVector;

/// Per-parameter elected directions in {−1, 0, +1}, same layout as the task
/// vectors they were elected from. A zero means the contributions cancelled
/// exactly or nothing survived pruning at that parameter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsensusSigns {
    signs: BTreeMap<String, Vec<i8>>,
}

impl ConsensusSigns {
    pub fn signs(&self, name: &str) -> Option<&[i8]> {
        self.signs.get(name).map(Vec::as_slice)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.signs.keys().map(String::as_str)
    }

    pub fn layout_matches(&self, pruned: &PrunedTaskVector) -> bool {
        self.signs.len() == pruned.tensor_count()
            && self
                .signs
                .iter()
                .all(|(name, v)| pruned.tau_hat(name).is_some_and(|t| t.len() == v.len()))
    }
}

/// Elect the consensus sign per parameter. Summation is order-insensitive
/// (contributions are totally ordered before adding), so the result is
/// invariant under permutation of the input list.
pub fn elect_sign(pruned: &[PrunedTaskVector]) -> Result<ConsensusSigns, MergeError> {
    let first = pruned.first().ok_or(MergeError::NoModels)?;
    for p in &pruned[1..] {
        if !first.layout_matches(p) {
            return Err(MergeError::LayoutMismatch(format!(
                "pruned vector {:?} does not match {:?}",
                p.source_label, first.source_label
            )));
        }
    }

    let mut signs = BTreeMap::new();
    let mut contributions: Vec<f64> = Vec::with_capacity(pruned.len());
    for name in first.names() {
        let buffers: Vec<&[f64]> = pruned
            .iter()
            .map(|p| p.tau_hat(name).expect("layout checked"))
            .collect();
        let len = buffers[0].len();
        let mut out = Vec::with_capacity(len);
        for i in 0..len {
            contributions.clear();
            contributions.extend(buffers.iter().map(|b| b[i]));
            contributions.sort_by(f64::total_cmp);
            let total: f64 = contributions.iter().sum();
            out.push(if total > 0.0 {
                1
            } else if total < 0.0 {
                -1
            } else {
                0
            });
        }
        signs.insert(name.to_string(), out);
    }
    Ok(ConsensusSigns { signs })
}
