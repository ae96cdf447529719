#![allow(dead_code)]

use std::path::PathBuf;

use fedd2p::orchestrator::ExperimentConfig;

/// A run small enough for tests to repeat freely.
pub fn tiny() -> ExperimentConfig {
    ExperimentConfig {
        clients: 4,
        classes: 5,
        d: 8,
        d_in: 12,
        rounds: 3,
        local_epochs: 8,
        batch: 16,
        lr_local: 0.3,
        gen_steps: 10,
        hidden: 16,
        train_per_class: 40,
        test_per_class: 20,
        alpha: 1.0,
        ..ExperimentConfig::default()
    }
}

/// The shipped desk-benchmark config.
pub fn desk() -> ExperimentConfig {
    ExperimentConfig::from_json(include_str!("../../../../configs/desk.json")).expect("desk config parses")
}

pub fn desk_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json")
}

pub mod oracle {
    use fedd2p::client::class_knowledge;
    use fedd2p::model::{LocalModelParams, DEPTHS};
    use fedd2p::numerics::{softmax_slice, Temperature};
    use fedd2p::partition::Dataset;
    use fedd2p::seed;
    use fedd2p::server::aggregate;
    use ndarray::Array2;
    use rand::Rng;

    pub const CLIENTS: usize = 5;
    pub const CLASSES: usize = 6;

    /// Builds a random federation of `CLIENTS` heterogeneous models with
    /// label-skewed shards, then compares server aggregation with averaging the
    /// tempered softmax of every sample of each class directly. Returns the
    /// largest absolute difference.
    pub fn aggregation_gap(case: u64) -> f64 {
        let mut rng = seed::rng(case);
        let d_in = 3;
        let tau = Temperature::new(rng.random_range(0.5..12.0)).unwrap();
        let mut shards = Vec::new();
        let mut models = Vec::new();
        for n in 0..CLIENTS {
            let mut labels = Vec::new();
            for c in 0..CLASSES {
                let k = if rng.random_bool(0.4) { 0 } else { rng.random_range(1..6) };
                labels.extend(std::iter::repeat_n(c, k));
            }
            // every class must exist somewhere; client 0 guarantees it
            if n == 0 {
                labels.extend(0..CLASSES);
            }
            let features = Array2::from_shape_simple_fn((labels.len(), d_in), || rng.random_range(-2.0..2.0));
            shards.push(Dataset::new(features, labels, CLASSES).unwrap());
            let depth = DEPTHS[rng.random_range(0..DEPTHS.len())];
            models.push(LocalModelParams::init(d_in, 5, depth, CLASSES, rng.random()).unwrap());
        }
        let knowledge: Vec<_> = models
            .iter()
            .zip(&shards)
            .map(|(m, s)| class_knowledge(m, s, tau).unwrap())
            .collect();
        let agg = aggregate(&knowledge).unwrap();

        let mut sums = vec![vec![0.0; CLASSES]; CLASSES];
        let mut counts = [0usize; CLASSES];
        for (m, s) in models.iter().zip(&shards) {
            let logits = m.logits(s.features().view());
            for (row, y) in logits.outer_iter().zip(s.labels()) {
                let p = softmax_slice(row.as_slice().unwrap(), tau).unwrap();
                for (acc, v) in sums[*y].iter_mut().zip(p.as_slice()) {
                    *acc += v;
                }
                counts[*y] += 1;
            }
        }
        let mut gap: f64 = 0.0;
        for (c, (row, n)) in sums.iter().zip(counts).enumerate() {
            assert_eq!(agg.totals[c], n);
            for (got, sum) in agg.per_class[c].as_slice().iter().zip(row) {
                gap = gap.max((got - sum / n as f64).abs());
            }
        }
        gap
    }
}
