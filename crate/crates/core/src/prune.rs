//! Dual-tail magnitude pruning: per layer, drop the largest-magnitude
//! outliers (top α%) and the smallest-magnitude perturbations (bottom β%) of
//! a task vector, keeping the middle band.
//!
//! Tail membership is decided on one total order per layer: elements sorted
//! ascending by (|value|, flat index). The first `floor(β·n/100)` entries of
//! that order form the bottom tail and the last `floor(α·n/100)` the top
//! tail, which keeps the two tails disjoint for every input — including
//! all-tied buffers at α+β = 100 — and makes the kept count exactly
//! `n − floor(α·n/100) − floor(β·n/100)`.

use std::collections::BTreeMap;

use crate::error::MergeError;
use crate::task_vector::TaskVector;

/// How tensors are partitioned into layers for masking.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum LayerGrouping {
    /// Each named tensor is its own layer (the default, finest partition).
    #[default]
    PerTensor,
    /// Tensors sharing the name up to the last `.` form one layer, so
    /// `l0.w` and `l0.b` are masked together as layer `l0`.
    NamePrefix,
}

/// Tail fractions for dual-tail pruning, in percent.
#[derive(Debug, Clone, Copy)]
pub struct PruneConfig {
    /// Right tail: percentage of large-magnitude outliers dropped per layer.
    pub alpha: f64,
    /// Left tail: percentage of small-magnitude perturbations dropped per layer.
    pub beta: f64,
    pub grouping: LayerGrouping,
}

impl PruneConfig {
    pub fn new(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            grouping: LayerGrouping::PerTensor,
        }
    }

    pub fn validate(&self) -> Result<(), MergeError> {
        let ok = self.alpha.is_finite()
            && self.beta.is_finite()
            && self.alpha >= 0.0
            && self.beta >= 0.0
            && self.alpha + self.beta <= 100.0;
        if ok {
            Ok(())
        } else {
            Err(MergeError::InvalidFractions {
                alpha: self.alpha,
                beta: self.beta,
            })
        }
    }
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self::new(20.0, 20.0)
    }
}

/// A task vector after masking: the refined deltas τ̂ together with their
/// element-wise signs γ̂ and magnitudes μ̂, satisfying τ̂ = γ̂ ⊙ μ̂ exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedTaskVector {
    pub source_label: String,
    tau_hat: BTreeMap<String, Vec<f64>>,
    gamma_hat: BTreeMap<String, Vec<i8>>,
    mu_hat: BTreeMap<String, Vec<f64>>,
}

impl PrunedTaskVector {
    pub fn tau_hat(&self, name: &str) -> Option<&[f64]> {
        self.tau_hat.get(name).map(Vec::as_slice)
    }

    pub fn gamma_hat(&self, name: &str) -> Option<&[i8]> {
        self.gamma_hat.get(name).map(Vec::as_slice)
    }

    pub fn mu_hat(&self, name: &str) -> Option<&[f64]> {
        self.mu_hat.get(name).map(Vec::as_slice)
    }

    /// Tensor names in lexicographic order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tau_hat.keys().map(String::as_str)
    }

    pub fn tensor_count(&self) -> usize {
        self.tau_hat.len()
    }

    pub fn layout_matches(&self, other: &PrunedTaskVector) -> bool {
        self.tau_hat.len() == other.tau_hat.len()
            && self
                .tau_hat
                .iter()
                .all(|(name, v)| other.tau_hat.get(name).is_some_and(|o| o.len() == v.len()))
    }
}

/// Keep/drop marks for one layer buffer: `true` = kept.
///
/// Exactly `floor(α·n/100)` largest-magnitude and `floor(β·n/100)`
/// smallest-magnitude elements are dropped; rank ties resolve by flat index
/// on the single ascending (|value|, index) order described at module level.
pub fn layer_mask(values: &[f64], alpha: f64, beta: f64) -> Result<Vec<bool>, MergeError> {
    PruneConfig::new(alpha, beta).validate()?;
    let n = values.len();
    let drop_top = tail_count(alpha, n);
    let drop_bottom = tail_count(beta, n);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        values[i]
            .abs()
            .total_cmp(&values[j].abs())
            .then_with(|| i.cmp(&j))
    });

    let mut mask = vec![true; n];
    for &i in &order[..drop_bottom] {
        mask[i] = false;
    }
    for &i in &order[n - drop_top..] {
        mask[i] = false;
    }
    Ok(mask)
}

pub(crate) fn tail_count(percent: f64, n: usize) -> usize {
    (percent * n as f64 / 100.0).floor() as usize
}

/// Group tensor names into layers under the given grouping. Group keys and
/// the names within each group are in lexicographic order.
pub(crate) fn group_layers<'a>(
    names: impl Iterator<Item = &'a str>,
    grouping: LayerGrouping,
) -> BTreeMap<String, Vec<&'a str>> {
    let mut groups: BTreeMap<String, Vec<&'a str>> = BTreeMap::new();
    for name in names {
        let key = match grouping {
            LayerGrouping::PerTensor => name.to_string(),
            LayerGrouping::NamePrefix => name
                .rsplit_once('.')
                .map(|(prefix, _)| prefix.to_string())
                .unwrap_or_else(|| name.to_string()),
        };
        groups.entry(key).or_default().push(name);
    }
    groups
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Mask every layer of a task vector independently and derive γ̂ and μ̂.
/// Dropped elements become exactly 0 in τ̂.
pub fn prune_task_vector(
    tau: &TaskVector,
    cfg: &PruneConfig,
) -> Result<PrunedTaskVector, MergeError> {
    cfg.validate()?;
    let mut tau_hat: BTreeMap<String, Vec<f64>> = tau
        .deltas()
        .map(|(name, v)| (name.to_string(), v.to_vec()))
        .collect();

    for (_, members) in group_layers(tau.deltas().map(|(n, _)| n), cfg.grouping) {
        // One flat buffer per layer: member tensors concatenated in
        // lexicographic name order.
        let mut flat = Vec::new();
        for name in &members {
            flat.extend_from_slice(tau.delta(name).expect("name from this vector"));
        }
        let mask = layer_mask(&flat, cfg.alpha, cfg.beta)?;
        let mut cursor = 0;
        for name in &members {
            let out = tau_hat.get_mut(*name).expect("same name set");
            for v in out.iter_mut() {
                if !mask[cursor] {
                    *v = 0.0;
                }
                cursor += 1;
            }
        }
    }

    let gamma_hat = tau_hat
        .iter()
        .map(|(k, v)| (k.clone(), v.iter().map(|&x| sign(x)).collect()))
        .collect();
    let mu_hat = tau_hat
        .iter()
        .map(|(k, v)| (k.clone(), v.iter().map(|x| x.abs()).collect()))
        .collect();
    Ok(PrunedTaskVector {
        source_label: tau.source_label.clone(),
        tau_hat,
        gamma_hat,
        mu_hat,
    })
}
