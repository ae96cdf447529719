//! Labeled feature datasets and Dirichlet label-skew partitioning.

use ndarray::{Array2, Axis};
use rand::seq::IndexedRandom;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::frozen_fm::EmbeddingMatrix;
use crate::seed::{self, stream};

/// Feature matrix plus class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    classes: usize,
    counts: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= classes) {
            return Err(Error::InvalidInput(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature".into()));
        }
        let mut counts = vec![0; classes];
        for l in &labels {
            counts[*l] += 1;
        }
        Ok(Dataset {
            features,
            labels,
            classes,
            counts,
        })
    }

    /// One sample per embedding row, labeled by row index.
    pub fn from_embeddings(emb: &EmbeddingMatrix) -> Result<Self> {
        let labels = (0..emb.classes()).collect();
        Dataset::new(emb.rows().clone(), labels, emb.classes())
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-class sample counts.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let features = self.features.select(Axis(0), indices);
        let labels = indices.iter().map(|i| self.labels[*i]).collect();
        Dataset::new(features, labels, self.classes).expect("subset of a valid dataset")
    }
}

/// Shape of a synthetic class-conditional Gaussian dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub classes: usize,
    pub d_in: usize,
    pub per_class: usize,
    pub spread: f64,
}

/// Unit-norm class means drawn from `seed`.
pub fn class_means(classes: usize, d_in: usize, seed: u64) -> Array2<f64> {
    let mut rng = seed::rng(seed::derive(seed, &[stream::MEANS]));
    let mut means = Array2::<f64>::zeros((classes, d_in));
    for mut row in means.rows_mut() {
        loop {
            for v in row.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let n = row.dot(&row).sqrt();
            if n > 1e-12 {
                row /= n;
                break;
            }
        }
    }
    means
}

/// `per_class` samples of each class around the given means, labels in class order.
pub fn synth_from_means(means: &Array2<f64>, per_class: usize, spread: f64, seed: u64) -> Result<Dataset> {
    let (classes, d_in) = means.dim();
    if classes < 2 || per_class < 1 || d_in < 1 {
        return Err(Error::InvalidInput(format!(
            "need >= 2 classes, >= 1 sample per class and >= 1 feature, got C={classes}, per_class={per_class}, d_in={d_in}"
        )));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(Error::InvalidInput(format!("spread must be non-negative, got {spread}")));
    }
    let mut rng = seed::rng(seed);
    let m = classes * per_class;
    let mut features = Array2::zeros((m, d_in));
    let mut labels = Vec::with_capacity(m);
    for c in 0..classes {
        for k in 0..per_class {
            let mut row = features.row_mut(c * per_class + k);
            for (v, mu) in row.iter_mut().zip(means.row(c)) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = mu + spread * z;
            }
            labels.push(c);
        }
    }
    Dataset::new(features, labels, classes)
}

pub fn synth_dataset(params: SynthParams, seed: u64) -> Result<Dataset> {
    let means = class_means(params.classes, params.d_in, seed);
    synth_from_means(&means, params.per_class, params.spread, seed::derive(seed, &[stream::DATA]))
}

/// Training set plus a held-out test set sharing the same class means.
pub fn synth_split(params: SynthParams, test_per_class: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let means = class_means(params.classes, params.d_in, seed);
    split_from_means(&means, params.per_class, test_per_class, params.spread, seed)
}

pub fn split_from_means(
    means: &Array2<f64>,
    per_class: usize,
    test_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let train = synth_from_means(means, per_class, spread, seed::derive(seed, &[stream::DATA]))?;
    let test = synth_from_means(means, test_per_class, spread, seed::derive(seed, &[stream::TEST]))?;
    Ok((train, test))
}

/// Per-client sample indices.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub assignments: Vec<Vec<usize>>,
    pub alpha: f64,
    pub seed: u64,
}

impl PartitionPlan {
    pub fn clients(&self) -> usize {
        self.assignments.len()
    }

    /// Entropy (nats) of each client's empirical label distribution.
    pub fn label_entropies(&self, labels: &[usize], classes: usize) -> Vec<f64> {
        self.assignments
            .iter()
            .map(|idx| {
                let mut counts = vec![0usize; classes];
                for i in idx {
                    counts[labels[*i]] += 1;
                }
                let n = idx.len() as f64;
                counts
                    .iter()
                    .filter(|c| **c > 0)
                    .map(|c| {
                        let p = *c as f64 / n;
                        -p * p.ln()
                    })
                    .sum()
            })
            .collect()
    }
}

const MAX_REDRAWS: usize = 50;

fn dirichlet(alpha: f64, n: usize, rng: &mut seed::Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return draws.into_iter().map(|g| g / sum).collect();
        }
    }
}

/// Integer block sizes summing exactly to `total`, by largest remainder.
/// Ties in the remainder go to the lower index.
pub fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut sizes: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|a, b| {
        let ra = raw[*a] - raw[*a].floor();
        let rb = raw[*b] - raw[*b].floor();
        rb.total_cmp(&ra).then(a.cmp(b))
    });
    for i in order.into_iter().take(total.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

/// Splits samples across `clients` with per-class proportions drawn from
/// `Dir(alpha)`. Each class's indices are handed out in contiguous blocks.
pub fn dirichlet_partition(labels: &[usize], clients: usize, alpha: f64, seed: u64) -> Result<PartitionPlan> {
    if clients < 1 {
        return Err(Error::InvalidInput("need at least one client".into()));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Domain(format!("alpha must be positive, got {alpha}")));
    }
    if clients > labels.len() {
        return Err(Error::InfeasiblePartition(format!(
            "{clients} clients but only {} samples",
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, l) in labels.iter().enumerate() {
        by_class[*l].push(i);
    }

    let mut rng = seed::rng(seed::derive(seed, &[stream::PARTITION]));
    let mut assignments = Vec::new();
    for _ in 0..MAX_REDRAWS {
        assignments = vec![Vec::new(); clients];
        for idx in &by_class {
            let p = dirichlet(alpha, clients, &mut rng);
            let sizes = largest_remainder(&p, idx.len());
            let mut start = 0;
            for (n, size) in sizes.into_iter().enumerate() {
                assignments[n].extend_from_slice(&idx[start..start + size]);
                start += size;
            }
        }
        if assignments.iter().all(|a| !a.is_empty()) {
            break;
        }
    }

    // Fallback after the redraw budget: empty clients take one sample each,
    // round-robin from whichever client currently holds the most.
    while let Some(empty) = assignments.iter().position(|a| a.is_empty()) {
        let donor = (0..clients)
            .max_by(|a, b| assignments[*a].len().cmp(&assignments[*b].len()).then(b.cmp(a)))
            .expect("at least one client");
        let moved = assignments[donor].pop().expect("donor holds >= 2 samples");
        assignments[empty].push(moved);
    }
    for a in &mut assignments {
        a.sort_unstable();
    }
    Ok(PartitionPlan {
        assignments,
        alpha,
        seed,
    })
}

/// Shard indices reduced to at most `cap` samples, chosen without replacement.
pub fn cap_shard(indices: &[usize], cap: usize, seed: u64) -> Vec<usize> {
    if indices.len() <= cap {
        return indices.to_vec();
    }
    let mut rng = seed::rng(seed);
    let mut picked: Vec<usize> = indices.choose_multiple(&mut rng, cap).copied().collect();
    picked.sort_unstable();
    picked
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(classes: usize, per_class: usize, spread: f64) -> SynthParams {
        SynthParams {
            classes,
            d_in: 5,
            per_class,
            spread,
        }
    }

    #[test]
    fn synth_is_balanced() {
        let ds = synth_dataset(params(2, 10, 0.3), 1).unwrap();
        assert_eq!(ds.len(), 20);
        assert_eq!(ds.counts(), &[10, 10]);
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_dataset(params(3, 7, 0.3), 42).unwrap();
        let b = synth_dataset(params(3, 7, 0.3), 42).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset(params(3, 7, 0.3), 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_spread_collapses_to_means() {
        let ds = synth_dataset(params(3, 4, 0.0), 9).unwrap();
        let means = class_means(3, 5, 9);
        for (row, label) in ds.features().rows().into_iter().zip(ds.labels()) {
            assert_eq!(row, means.row(*label));
        }
    }

    #[test]
    fn test_split_is_independent_but_shares_means() {
        let (train, test) = synth_split(params(3, 50, 0.0), 20, 5).unwrap();
        assert_eq!(test.len(), 60);
        assert_eq!(train.features().row(0), test.features().row(0));
        let (train, test) = synth_split(params(3, 50, 0.2), 20, 5).unwrap();
        assert_ne!(train.features().row(0), test.features().row(0));
    }

    #[test]
    fn synth_rejects_single_class() {
        assert!(synth_dataset(params(1, 10, 0.1), 0).is_err());
        assert!(synth_dataset(params(2, 0, 0.1), 0).is_err());
    }

    #[test]
    fn largest_remainder_exhausts() {
        assert_eq!(largest_remainder(&[0.5, 0.5], 3), vec![2, 1]);
        assert_eq!(largest_remainder(&[0.1, 0.2, 0.7], 10), vec![1, 2, 7]);
        assert_eq!(largest_remainder(&[1.0 / 3.0; 3], 100).iter().sum::<usize>(), 100);
    }

    #[test]
    fn single_client_gets_everything() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let plan = dirichlet_partition(&labels, 1, 0.1, 3).unwrap();
        assert_eq!(plan.assignments, vec![(0..30).collect::<Vec<_>>()]);
    }

    #[test]
    fn partition_is_deterministic() {
        let labels: Vec<usize> = (0..200).map(|i| i % 4).collect();
        let a = dirichlet_partition(&labels, 5, 0.5, 11).unwrap();
        let b = dirichlet_partition(&labels, 5, 0.5, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_many_clients_is_infeasible() {
        assert!(matches!(
            dirichlet_partition(&[0, 1, 0], 4, 1.0, 0),
            Err(Error::InfeasiblePartition(_))
        ));
        assert!(dirichlet_partition(&[0, 1], 1, 0.0, 0).is_err());
    }

    #[test]
    fn huge_alpha_splits_evenly() {
        let labels: Vec<usize> = (0..1000).map(|i| i % 5).collect();
        for seed in 0..100 {
            let plan = dirichlet_partition(&labels, 2, 1e6, seed).unwrap();
            for client in &plan.assignments {
                for c in 0..5 {
                    let held = client.iter().filter(|i| labels[**i] == c).count() as f64;
                    assert!((held / 200.0 - 0.5).abs() <= 0.02, "seed {seed} class {c}: {held}");
                }
            }
        }
    }

    #[test]
    fn skew_lowers_label_entropy() {
        let labels: Vec<usize> = (0..2000).map(|i| i % 10).collect();
        let mean_entropy = |alpha: f64| {
            let mut total = 0.0;
            for seed in 0..50 {
                let e = dirichlet_partition(&labels, 10, alpha, seed).unwrap().label_entropies(&labels, 10);
                total += e.iter().sum::<f64>() / e.len() as f64;
            }
            total / 50.0
        };
        let skewed = mean_entropy(0.1);
        let even = mean_entropy(10.0);
        assert!(skewed < even, "{skewed} vs {even}");
    }

    #[test]
    fn fallback_fills_empty_clients() {
        // Two samples, two clients, tiny alpha: redraws may all fail, fallback must not.
        for seed in 0..20 {
            let plan = dirichlet_partition(&[0, 0], 2, 1e-3, seed).unwrap();
            assert!(plan.assignments.iter().all(|a| a.len() == 1));
        }
    }

    #[test]
    fn cap_shard_limits_size() {
        let idx: Vec<usize> = (0..100).collect();
        let capped = cap_shard(&idx, 10, 1);
        assert_eq!(capped.len(), 10);
        assert!(capped.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(cap_shard(&idx[..5], 10, 1), idx[..5].to_vec());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn partition_is_exact_and_disjoint(
            labels in prop::collection::vec(0usize..6, 10..300),
            clients in 1usize..10,
            alpha in 0.05f64..20.0,
            seed in any::<u64>(),
        ) {
            prop_assume!(clients <= labels.len());
            let plan = dirichlet_partition(&labels, clients, alpha, seed).unwrap();
            let mut seen = vec![false; labels.len()];
            for a in &plan.assignments {
                prop_assert!(!a.is_empty());
                for i in a {
                    prop_assert!(!seen[*i]);
                    seen[*i] = true;
                }
            }
            prop_assert!(seen.iter().all(|s| *s));
        }
    }
}
