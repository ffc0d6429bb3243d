//! Synthetic data generators shared by the benchmarks.

use tvmerge_core::checkpoint::{Checkpoint, Dtype};
use tvmerge_core::metrics::{Quadruple, SampleExtraction};
use tvmerge_core::rng::SplitMix64;

/// A checkpoint with `layers` tensors of `layer_len` uniform values.
pub fn synthetic_checkpoint(seed: u64, layers: usize, layer_len: usize) -> Checkpoint {
    let mut rng = SplitMix64::new(seed);
    let mut ckpt = Checkpoint::new();
    for i in 0..layers {
        let values: Vec<f64> = (0..layer_len).map(|_| rng.uniform(-1.0, 1.0)).collect();
        ckpt.insert_tensor(
            format!("layer{i:02}.w"),
            Dtype::F32,
            vec![layer_len],
            values,
        )
        .unwrap();
    }
    ckpt
}

/// A flat buffer of uniform values for mask benchmarks.
pub fn uniform_buffer(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = SplitMix64::new(seed);
    (0..len).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

/// A quadruple corpus with partially-overlapping predictions and golds.
pub fn synthetic_corpus(
    seed: u64,
    samples: usize,
) -> (Vec<SampleExtraction>, Vec<SampleExtraction>) {
    let targets = ["张三", "李四", "那些人", "NULL", "某群体"];
    let args = ["太坏了", "没素质", "不像话", "有点意思"];
    let groups = ["Racism", "Region", "Sexism", "non-hate"];
    let hatefuls = ["hate", "non-hate"];
    let mut rng = SplitMix64::new(seed);
    let quad = |rng: &mut SplitMix64| {
        Quadruple::new(
            targets[rng.below(targets.len())],
            args[rng.below(args.len())],
            groups[rng.below(groups.len())],
            hatefuls[rng.below(hatefuls.len())],
        )
    };
    let mut preds = Vec::with_capacity(samples);
    let mut golds = Vec::with_capacity(samples);
    for i in 0..samples {
        let gold_quads: Vec<Quadruple> = (0..1 + rng.below(3)).map(|_| quad(&mut rng)).collect();
        // Predictions reuse some gold quads so hard matches occur.
        let pred_quads: Vec<Quadruple> = gold_quads
            .iter()
            .map(|g| {
                if rng.below(3) == 0 {
                    quad(&mut rng)
                } else {
                    g.clone()
                }
            })
            .collect();
        golds.push(SampleExtraction {
            sample_id: format!("s{i}"),
            quads: gold_quads,
        });
        preds.push(SampleExtraction {
            sample_id: format!("s{i}"),
            quads: pred_quads,
        });
    }
    (preds, golds)
}
