//! Survivor averaging and end-to-end merge orchestration.
//!
//! For every parameter p the chosen set A^p holds the models whose pruned
//! sign equals the elected consensus sign (zeros never qualify); τ_m^p is the
//! mean of their τ̂ values, or 0 when the set is empty. The merged model is
//! θ_base + λ·τ_m.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::checkpoint::{validate_compatible, Checkpoint};
use crate::consensus::{elect_sign, ConsensusSigns};
use crate::error::MergeError;
use crate::prune::{group_layers, prune_task_vector, tail_count, PruneConfig, PrunedTaskVector};
use crate::task_vector::{apply_task_vector, build_task_vector, TaskVector};

/// Full pipeline configuration: tail fractions, merge scale, and whether to
/// collect per-layer statistics.
#[derive(Debug, Clone)]
pub struct MergeConfig {
    pub prune: PruneConfig,
    /// Scale applied to the merged task vector before adding it to the base.
    pub lambda: f64,
    pub report_stats: bool,
}

impl MergeConfig {
    pub fn validate(&self) -> Result<(), MergeError> {
        self.prune.validate()?;
        if !self.lambda.is_finite() {
            return Err(MergeError::NonFiniteLambda(self.lambda));
        }
        Ok(())
    }
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            prune: PruneConfig::default(),
            lambda: 1.0,
            report_stats: false,
        }
    }
}

/// Per-layer merge statistics, for picking tail fractions.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct LayerStats {
    /// Elements in the layer.
    pub n: usize,
    /// Elements dropped from the large-magnitude tail, per model.
    pub dropped_top: usize,
    /// Elements dropped from the small-magnitude tail, per model.
    pub dropped_bottom: usize,
    /// Fraction of surviving (non-zero) per-model signs that equal the
    /// consensus sign; 1.0 when nothing survived.
    pub agreement_rate: f64,
    /// Mean |τ̂| over all models and elements of the layer (zeros included).
    pub mean_abs_tau: f64,
}

/// Layer name → statistics, keyed by the prune grouping's layer keys.
pub type MergeStats = BTreeMap<String, LayerStats>;

/// Result of [`merge_models`]: the merged checkpoint and, when requested,
/// per-layer statistics.
#[derive(Debug, Clone)]
pub struct MergeOutcome {
    pub merged: Checkpoint,
    pub stats: Option<MergeStats>,
}

/// Average the sign-agreeing survivors per parameter.
///
/// Summation per parameter is order-insensitive, so the output is invariant
/// under permutation of the input list.
pub fn merge_task_vectors(
    pruned: &[PrunedTaskVector],
    signs: &ConsensusSigns,
) -> Result<TaskVector, MergeError> {
    let first = pruned.first().ok_or(MergeError::NoModels)?;
    for p in &pruned[1..] {
        if !first.layout_matches(p) {
            return Err(MergeError::LayoutMismatch(format!(
                "pruned vector {:?} does not match {:?}",
                p.source_label, first.source_label
            )));
        }
    }
    if !signs.layout_matches(first) {
        return Err(MergeError::LayoutMismatch(
            "consensus signs do not match the pruned task vectors".into(),
        ));
    }

    let mut deltas = BTreeMap::new();
    let mut chosen: Vec<f64> = Vec::with_capacity(pruned.len());
    for name in first.names() {
        let sign_buf = signs.signs(name).expect("layout checked");
        let tau_bufs: Vec<&[f64]> = pruned
            .iter()
            .map(|p| p.tau_hat(name).expect("layout checked"))
            .collect();
        let gamma_bufs: Vec<&[i8]> = pruned
            .iter()
            .map(|p| p.gamma_hat(name).expect("layout checked"))
            .collect();

        let mut out = Vec::with_capacity(sign_buf.len());
        for (i, &consensus) in sign_buf.iter().enumerate() {
            chosen.clear();
            if consensus != 0 {
                for t in 0..pruned.len() {
                    if gamma_bufs[t][i] == consensus {
                        chosen.push(tau_bufs[t][i]);
                    }
                }
            }
            if chosen.is_empty() {
                out.push(0.0);
            } else {
                chosen.sort_by(f64::total_cmp);
                let total: f64 = chosen.iter().sum();
                out.push(total / chosen.len() as f64);
            }
        }
        deltas.insert(name.to_string(), out);
    }
    Ok(TaskVector::from_deltas("merged", deltas))
}

/// Run the whole procedure: build task vectors against the base, prune,
/// elect signs, average the survivors, scale by λ, and add back to the base.
/// The merged checkpoint mirrors the base's layout, dtype tags, and metadata.
pub fn merge_models(
    base: &Checkpoint,
    models: &[Checkpoint],
    cfg: &MergeConfig,
) -> Result<MergeOutcome, MergeError> {
    cfg.validate()?;
    if models.is_empty() {
        return Err(MergeError::NoModels);
    }
    for model in models {
        validate_compatible(base, model)?;
    }

    let pruned: Vec<PrunedTaskVector> = models
        .iter()
        .enumerate()
        .map(|(i, model)| {
            let tau = build_task_vector(model, base, format!("model-{i}"))?;
            prune_task_vector(&tau, &cfg.prune)
        })
        .collect::<Result<_, _>>()?;

    let signs = elect_sign(&pruned)?;
    let tau_m = merge_task_vectors(&pruned, &signs)?;
    let merged = apply_task_vector(base, &tau_m, cfg.lambda)?;

    let stats = cfg
        .report_stats
        .then(|| collect_stats(&pruned, &signs, cfg));
    Ok(MergeOutcome { merged, stats })
}

fn collect_stats(
    pruned: &[PrunedTaskVector],
    signs: &ConsensusSigns,
    cfg: &MergeConfig,
) -> MergeStats {
    let first = &pruned[0];
    let mut stats = BTreeMap::new();
    for (layer, members) in group_layers(first.names(), cfg.prune.grouping) {
        let n: usize = members
            .iter()
            .map(|name| first.tau_hat(name).expect("own name").len())
            .sum();
        let mut agreements = 0usize;
        let mut candidates = 0usize;
        let mut abs_sum = 0.0;
        for name in &members {
            let sign_buf = signs.signs(name).expect("layout checked");
            for p in pruned {
                let gamma = p.gamma_hat(name).expect("layout checked");
                let mu = p.mu_hat(name).expect("layout checked");
                for i in 0..gamma.len() {
                    abs_sum += mu[i];
                    if gamma[i] != 0 {
                        candidates += 1;
                        if gamma[i] == sign_buf[i] {
                            agreements += 1;
                        }
                    }
                }
            }
        }
        stats.insert(
            layer,
            LayerStats {
                n,
                dropped_top: tail_count(cfg.prune.alpha, n),
                dropped_bottom: tail_count(cfg.prune.beta, n),
                agreement_rate: if candidates == 0 {
                    1.0
                } else {
                    agreements as f64 / candidates as f64
                },
                mean_abs_tau: if n == 0 || pruned.is_empty() {
                    0.0
                } else {
                    abs_sum / (n * pruned.len()) as f64
                },
            },
        );
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::Dtype;
    use crate::rng::SplitMix64;

    fn ckpt(entries: &[(&str, Vec<f64>)]) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (name, values) in entries {
            c.insert_tensor(*name, Dtype::F64, vec![values.len()], values.clone())
                .unwrap();
        }
        c
    }

    fn pruned_single(values: Vec<f64>) -> PrunedTaskVector {
        let tau = TaskVector::from_deltas("t", [("w".to_string(), values)].into());
        prune_task_vector(&tau, &PruneConfig::new(0.0, 0.0)).unwrap()
    }

    #[test]
    fn averages_only_the_agreeing_survivors() {
        // τ̂ = (+0.4, −0.2, +0.6): consensus +1 (sum +0.8), chosen {0.4, 0.6},
        // mean 0.5.
        let models = vec![
            pruned_single(vec![0.4]),
            pruned_single(vec![-0.2]),
            pruned_single(vec![0.6]),
        ];
        let signs = elect_sign(&models).unwrap();
        let tau_m = merge_task_vectors(&models, &signs).unwrap();
        assert!((tau_m.delta("w").unwrap()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn unanimous_value_is_preserved() {
        let models = vec![pruned_single(vec![-0.7]); 3];
        let signs = elect_sign(&models).unwrap();
        let tau_m = merge_task_vectors(&models, &signs).unwrap();
        assert!((tau_m.delta("w").unwrap()[0] - (-0.7)).abs() <= 1e-15);
    }

    #[test]
    fn zero_consensus_yields_zero() {
        let models = vec![pruned_single(vec![0.3]), pruned_single(vec![-0.3])];
        let signs = elect_sign(&models).unwrap();
        let tau_m = merge_task_vectors(&models, &signs).unwrap();
        assert_eq!(tau_m.delta("w").unwrap(), &[0.0]);
    }

    #[test]
    fn single_model_identity_path() {
        let base = ckpt(&[("w", vec![1.0, -2.0, 0.5]), ("b", vec![0.25])]);
        let model = ckpt(&[("w", vec![1.5, -1.0, 0.0]), ("b", vec![-0.75])]);
        let cfg = MergeConfig {
            prune: PruneConfig::new(0.0, 0.0),
            lambda: 1.0,
            report_stats: false,
        };
        let out = merge_models(&base, std::slice::from_ref(&model), &cfg).unwrap();
        for (name, t) in model.tensors() {
            let merged = &out.merged.tensor(name).unwrap().values;
            for (a, b) in merged.iter().zip(&t.values) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn duplicate_models_collapse_to_the_model() {
        let base = ckpt(&[("w", vec![0.0, 1.0])]);
        let model = ckpt(&[("w", vec![2.0, -1.0])]);
        let cfg = MergeConfig {
            prune: PruneConfig::new(0.0, 0.0),
            lambda: 1.0,
            report_stats: false,
        };
        let out = merge_models(&base, &[model.clone(), model.clone()], &cfg).unwrap();
        for (a, b) in out
            .merged
            .tensor("w")
            .unwrap()
            .values
            .iter()
            .zip(&model.tensor("w").unwrap().values)
        {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn all_models_equal_base_returns_base_exactly() {
        let base = ckpt(&[("w", vec![0.5, -0.5, 2.0])]);
        let out = merge_models(
            &base,
            &[base.clone(), base.clone(), base.clone()],
            &MergeConfig::default(),
        )
        .unwrap();
        assert_eq!(out.merged, base);
    }

    #[test]
    fn merged_layout_mirrors_base() {
        let mut base = ckpt(&[("w", vec![0.0; 4])]);
        base.metadata = Some([("k".to_string(), "v".to_string())].into());
        let model = ckpt(&[("w", vec![1.0, 2.0, 3.0, 4.0])]);
        let out = merge_models(&base, &[model], &MergeConfig::default()).unwrap();
        assert_eq!(out.merged.tensor("w").unwrap().dtype, Dtype::F64);
        assert_eq!(out.merged.tensor("w").unwrap().shape, vec![4]);
        assert_eq!(out.merged.metadata, base.metadata);
    }

    #[test]
    fn empty_model_list_is_rejected() {
        let base = ckpt(&[("w", vec![0.0])]);
        assert!(matches!(
            merge_models(&base, &[], &MergeConfig::default()),
            Err(MergeError::NoModels)
        ));
    }

    #[test]
    fn incompatible_model_is_rejected() {
        let base = ckpt(&[("w", vec![0.0])]);
        let other = ckpt(&[("v", vec![0.0])]);
        assert!(merge_models(&base, &[other], &MergeConfig::default()).is_err());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let base = ckpt(&[("w", vec![0.0])]);
        let cfg = MergeConfig {
            prune: PruneConfig::new(80.0, 30.0),
            lambda: 1.0,
            report_stats: false,
        };
        assert!(merge_models(&base, std::slice::from_ref(&base), &cfg).is_err());
        let cfg = MergeConfig {
            prune: PruneConfig::new(0.0, 0.0),
            lambda: f64::INFINITY,
            report_stats: false,
        };
        assert!(merge_models(&base, std::slice::from_ref(&base), &cfg).is_err());
    }

    #[test]
    fn merge_is_permutation_invariant() {
        let mut rng = SplitMix64::new(23);
        let n = 64;
        let base = ckpt(&[("w", (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect())]);
        let mut models: Vec<Checkpoint> = (0..4)
            .map(|_| ckpt(&[("w", (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect())]))
            .collect();
        let cfg = MergeConfig {
            prune: PruneConfig::new(20.0, 20.0),
            lambda: 0.9,
            report_stats: false,
        };
        let baseline = merge_models(&base, &models, &cfg).unwrap().merged;
        models.reverse();
        assert_eq!(merge_models(&base, &models, &cfg).unwrap().merged, baseline);
        models.swap(0, 2);
        assert_eq!(merge_models(&base, &models, &cfg).unwrap().merged, baseline);
    }

    #[test]
    fn stats_report_counts_and_agreement() {
        let base = ckpt(&[("w", vec![0.0; 10])]);
        let mut rng = SplitMix64::new(31);
        let models: Vec<Checkpoint> = (0..2)
            .map(|_| ckpt(&[("w", (0..10).map(|_| rng.uniform(-1.0, 1.0)).collect())]))
            .collect();
        let cfg = MergeConfig {
            prune: PruneConfig::new(20.0, 10.0),
            lambda: 1.0,
            report_stats: true,
        };
        let out = merge_models(&base, &models, &cfg).unwrap();
        let stats = out.stats.unwrap();
        let layer = &stats["w"];
        assert_eq!(layer.n, 10);
        assert_eq!(layer.dropped_top, 2);
        assert_eq!(layer.dropped_bottom, 1);
        assert!((0.0..=1.0).contains(&layer.agreement_rate));
        assert!(layer.mean_abs_tau > 0.0);
    }
}
