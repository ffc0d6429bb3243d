//! Task vectors: the per-model parameter deltas the merge pipeline operates
//! on. A task vector shares its layout (names and element counts) with the
//! base checkpoint it was built from; all arithmetic runs in f64.

use std::collections::BTreeMap;

use crate::checkpoint::{validate_compatible, Checkpoint};
use crate::error::MergeError;

/// Element-wise difference between a fine-tuned checkpoint and its base.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    /// Identifies the fine-tuned model this delta came from.
    pub source_label: String,
    deltas: BTreeMap<String, Vec<f64>>,
}

impl TaskVector {
    /// Build directly from per-tensor delta buffers. Intended for tests and
    /// synthetic pipelines; [`build_task_vector`] is the checkpoint route.
    pub fn from_deltas(
        source_label: impl Into<String>,
        deltas: BTreeMap<String, Vec<f64>>,
    ) -> Self {
        Self {
            source_label: source_label.into(),
            deltas,
        }
    }

    pub fn delta(&self, name: &str) -> Option<&[f64]> {
        self.deltas.get(name).map(Vec::as_slice)
    }

    /// Deltas in lexicographic name order.
    pub fn deltas(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.deltas.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn tensor_count(&self) -> usize {
        self.deltas.len()
    }

    /// Element-wise scaling; keeps the layout.
    pub fn scale(&self, c: f64) -> TaskVector {
        TaskVector {
            source_label: self.source_label.clone(),
            deltas: self
                .deltas
                .iter()
                .map(|(k, v)| (k.clone(), v.iter().map(|x| c * x).collect()))
                .collect(),
        }
    }

    /// True when `self` and the checkpoint agree on names and element counts.
    pub fn layout_matches(&self, ckpt: &Checkpoint) -> bool {
        self.deltas.len() == ckpt.tensor_count()
            && self
                .deltas
                .iter()
                .all(|(name, v)| ckpt.tensor(name).is_some_and(|t| t.values.len() == v.len()))
    }
}

/// τ = θ_t − θ_base, element-wise. Fails when the layouts diverge.
pub fn build_task_vector(
    theta_t: &Checkpoint,
    theta_base: &Checkpoint,
    label: impl Into<String>,
) -> Result<TaskVector, MergeError> {
    validate_compatible(theta_t, theta_base)?;
    let deltas = theta_t
        .tensors()
        .map(|(name, t)| {
            let base = &theta_base.tensor(name).expect("validated layout").values;
            let delta = t.values.iter().zip(base).map(|(a, b)| a - b).collect();
            (name.to_string(), delta)
        })
        .collect();
    Ok(TaskVector {
        source_label: label.into(),
        deltas,
    })
}

/// θ_base + λ·τ, element-wise. The output carries the base checkpoint's
/// dtype tags and metadata.
pub fn apply_task_vector(
    theta_base: &Checkpoint,
    tau: &TaskVector,
    lambda: f64,
) -> Result<Checkpoint, MergeError> {
    if !lambda.is_finite() {
        return Err(MergeError::NonFiniteLambda(lambda));
    }
    if !tau.layout_matches(theta_base) {
        return Err(MergeError::LayoutMismatch(format!(
            "task vector {:?} does not match the base checkpoint layout",
            tau.source_label
        )));
    }
    let mut out = Checkpoint::new();
    out.metadata = theta_base.metadata.clone();
    for (name, t) in theta_base.tensors() {
        let delta = tau.delta(name).expect("layout checked");
        let values = t
            .values
            .iter()
            .zip(delta)
            .map(|(b, d)| b + lambda * d)
            .collect();
        out.insert_tensor(name, t.dtype, t.shape.clone(), values)
            .expect("base invariants carry over");
    }
    Ok(out)
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

    #[test]
    fn identical_checkpoints_give_zero_vector() {
        let base = ckpt(&[("w", vec![1.0, -2.0, 3.5])]);
        let tau = build_task_vector(&base, &base, "t").unwrap();
        assert_eq!(tau.delta("w").unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn subtraction_is_element_wise() {
        let t = ckpt(&[("w", vec![3.0, 1.0])]);
        let base = ckpt(&[("w", vec![1.0, 1.0])]);
        let tau = build_task_vector(&t, &base, "t").unwrap();
        assert_eq!(tau.delta("w").unwrap(), &[2.0, 0.0]);
    }

    #[test]
    fn apply_with_zero_lambda_returns_base_exactly() {
        let base = ckpt(&[("w", vec![1.0, 2.0]), ("b", vec![-0.5])]);
        let t = ckpt(&[("w", vec![9.0, -9.0]), ("b", vec![4.0])]);
        let tau = build_task_vector(&t, &base, "t").unwrap();
        let out = apply_task_vector(&base, &tau, 0.0).unwrap();
        assert_eq!(out, base);
    }

    #[test]
    fn apply_inverts_build() {
        let base = ckpt(&[("w", vec![0.25, -1.0, 2.0])]);
        let t = ckpt(&[("w", vec![1.5, 0.0, -3.25])]);
        let tau = build_task_vector(&t, &base, "t").unwrap();
        let out = apply_task_vector(&base, &tau, 1.0).unwrap();
        for (a, b) in out
            .tensor("w")
            .unwrap()
            .values
            .iter()
            .zip(&t.tensor("w").unwrap().values)
        {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn scalar_arithmetic_example() {
        let base = ckpt(&[("w", vec![1.0])]);
        let tau = TaskVector::from_deltas("t", [("w".to_string(), vec![0.5])].into());
        let out = apply_task_vector(&base, &tau, 2.0).unwrap();
        assert_eq!(out.tensor("w").unwrap().values, vec![2.0]);
    }

    #[test]
    fn incompatible_layouts_fail() {
        let a = ckpt(&[("w", vec![1.0])]);
        let b = ckpt(&[("v", vec![1.0])]);
        assert!(build_task_vector(&a, &b, "t").is_err());

        let tau = TaskVector::from_deltas("t", [("w".to_string(), vec![0.0, 0.0])].into());
        assert!(apply_task_vector(&a, &tau, 1.0).is_err());
    }

    #[test]
    fn non_finite_lambda_rejected() {
        let base = ckpt(&[("w", vec![1.0])]);
        let tau = build_task_vector(&base, &base, "t").unwrap();
        assert!(matches!(
            apply_task_vector(&base, &tau, f64::NAN),
            Err(MergeError::NonFiniteLambda(_))
        ));
    }

    // Linearity: scaling the fine-tuned offsets by c scales the built vector
    // by c.
    #[test]
    fn build_is_linear_in_the_deltas() {
        let mut rng = SplitMix64::new(29);
        for &c in &[0.5, 2.0, -3.0] {
            let n = 1 + rng.below(32);
            let base_vals: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let delta: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let base = ckpt(&[("w", base_vals.clone())]);
            let t = ckpt(&[(
                "w",
                base_vals.iter().zip(&delta).map(|(b, d)| b + d).collect(),
            )]);
            let t_scaled = ckpt(&[(
                "w",
                base_vals
                    .iter()
                    .zip(&delta)
                    .map(|(b, d)| b + c * d)
                    .collect(),
            )]);
            let tau = build_task_vector(&t, &base, "t").unwrap().scale(c);
            let tau_scaled = build_task_vector(&t_scaled, &base, "t").unwrap();
            for (a, b) in tau
                .delta("w")
                .unwrap()
                .iter()
                .zip(tau_scaled.delta("w").unwrap())
            {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
    }

    // Randomized inverse-pair property: build(apply(base, τ, 1), base) = τ.
    #[test]
    fn build_inverts_apply_within_1e12() {
        let mut rng = SplitMix64::new(17);
        for _ in 0..20 {
            let n = 1 + rng.below(64);
            let base_vals: Vec<f64> = (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let delta: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let base = ckpt(&[("w", base_vals)]);
            let tau = TaskVector::from_deltas("t", [("w".to_string(), delta.clone())].into());
            let applied = apply_task_vector(&base, &tau, 1.0).unwrap();
            let back = build_task_vector(&applied, &base, "t").unwrap();
            for (a, b) in back.delta("w").unwrap().iter().zip(&delta) {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
    }
}
