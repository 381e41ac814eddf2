//! Stochastic block model generation: the desk-scale testbed.
//!
//! Nodes split into contiguous blocks; intra-block pairs connect with
//! probability `p_in`, cross-block pairs with `p_out`. Features are standard
//! normal draws shifted by a per-class mean of L2 norm `feature_shift`, the
//! class is the block id, and the train mask samples `labels_per_class`
//! nodes per class. A fixed generator reproduces the dataset exactly.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use gust_core::{DenseMatrix, Graph};

use crate::dataset::DatasetBundle;
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SbmParams {
    pub n: usize,
    pub blocks: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    pub feature_shift: f64,
    pub labels_per_class: usize,
}

/// Named presets used by the CLI and the test suites.
///
/// `easy` is the acceptance testbed: two well-separated communities with
/// informative features and five labels per class.
pub fn preset(name: &str) -> Option<SbmParams> {
    match name {
        "easy" => Some(SbmParams {
            n: 200,
            blocks: 2,
            p_in: 0.1,
            p_out: 0.01,
            feature_dim: 16,
            feature_shift: 1.0,
            labels_per_class: 5,
        }),
        "hard" => Some(SbmParams {
            n: 300,
            blocks: 3,
            p_in: 0.05,
            p_out: 0.02,
            feature_dim: 16,
            feature_shift: 0.5,
            labels_per_class: 5,
        }),
        "tiny" => Some(SbmParams {
            n: 40,
            blocks: 2,
            p_in: 0.3,
            p_out: 0.05,
            feature_dim: 8,
            feature_shift: 1.5,
            labels_per_class: 3,
        }),
        _ => None,
    }
}

pub fn preset_names() -> &'static [&'static str] {
    &["easy", "hard", "tiny"]
}

/// Generates a block-model dataset from the given generator.
///
/// Remaining nodes after the train sample split deterministically into
/// validation (a quarter) and test (the rest).
pub fn generate_sbm(params: &SbmParams, rng: &mut ChaCha20Rng) -> Result<DatasetBundle, CliError> {
    if params.blocks == 0 || params.n < params.blocks {
        return Err(CliError::Config(format!(
            "need at least one node per block, got n={} blocks={}",
            params.n, params.blocks
        )));
    }
    if !(0.0..=1.0).contains(&params.p_in) || !(0.0..=1.0).contains(&params.p_out) {
        return Err(CliError::Config(format!(
            "edge probabilities must lie in [0, 1], got p_in={} p_out={}",
            params.p_in, params.p_out
        )));
    }
    if params.labels_per_class == 0 {
        return Err(CliError::Config("labels_per_class must be >= 1".into()));
    }
    if params.feature_dim == 0 {
        return Err(CliError::Config("feature_dim must be >= 1".into()));
    }

    let n = params.n;
    let k = params.blocks;
    // Contiguous blocks; the first `n % k` blocks take the remainder.
    let base = n / k;
    let extra = n % k;
    let mut block_of = Vec::with_capacity(n);
    for b in 0..k {
        let size = base + usize::from(b < extra);
        block_of.extend(std::iter::repeat_n(b, size));
    }
    for (block, &count) in block_sizes(&block_of, k).iter().enumerate() {
        if count < params.labels_per_class {
            return Err(CliError::Config(format!(
                "class {block} has {count} nodes, cannot sample {} labels",
                params.labels_per_class
            )));
        }
    }

    // Per-class mean directions with L2 norm feature_shift.
    let mut class_means = Vec::with_capacity(k);
    for _ in 0..k {
        let mut dir: Vec<f64> = (0..params.feature_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in &mut dir {
            *v *= params.feature_shift / norm;
        }
        class_means.push(dir);
    }

    let mut features = DenseMatrix::zeros(n, params.feature_dim);
    for i in 0..n {
        let mean = &class_means[block_of[i]];
        for (j, &m) in mean.iter().enumerate() {
            let noise: f64 = rng.sample(StandardNormal);
            features.set(i, j, m + noise);
        }
    }

    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if block_of[i] == block_of[j] {
                params.p_in
            } else {
                params.p_out
            };
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }

    let labels: Vec<Option<usize>> = block_of.iter().map(|&b| Some(b)).collect();

    // Class-balanced train sample.
    let mut train = Vec::new();
    for class in 0..k {
        let members: Vec<usize> = (0..n).filter(|&i| block_of[i] == class).collect();
        for idx in rand::seq::index::sample(rng, members.len(), params.labels_per_class) {
            train.push(members[idx]);
        }
    }
    train.sort_unstable();

    let in_train: Vec<bool> = {
        let mut v = vec![false; n];
        for &i in &train {
            v[i] = true;
        }
        v
    };
    let mut rest: Vec<usize> = (0..n).filter(|&i| !in_train[i]).collect();
    use rand::seq::SliceRandom;
    rest.shuffle(rng);
    let val_count = rest.len() / 4;
    let val: Vec<usize> = rest[..val_count].to_vec();
    let test: Vec<usize> = rest[val_count..].to_vec();

    let graph = Graph::new(edges, features, labels, train, val, test)
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(DatasetBundle {
        name: "sbm".to_owned(),
        graph,
        num_classes: k,
        feature_dim: params.feature_dim,
        node_ids: (0..n as u64).collect(),
    })
}

fn block_sizes(block_of: &[usize], k: usize) -> Vec<usize> {
    let mut sizes = vec![0usize; k];
    for &b in block_of {
        sizes[b] += 1;
    }
    sizes
}
