//! Tab-separated dataset loading and the default split convention.
//!
//! A dataset directory holds UTF-8, LF, tab-separated files:
//!
//! - `nodes.tsv`: `node_id<TAB>f_1<TAB>...<TAB>f_d`
//! - `edges.tsv`: `src_id<TAB>dst_id` (undirected, either orientation)
//! - `labels.tsv`: `node_id<TAB>class_index`
//! - `splits.tsv` (optional): `node_id<TAB>{train|val|test}`
//!
//! Node ids may be arbitrary integers; they are remapped densely in ascending
//! order and the mapping is kept on the bundle. Duplicate edges are
//! deduplicated; self-loops are rejected. When no split file is present the
//! masks stay empty and [`apply_planetoid_split`] selects the conventional
//! 20-per-class / 500 / 1000 split from the run seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use gust_core::{DenseMatrix, Graph};

use crate::error::CliError;

/// A loaded dataset: the graph plus its class and feature counts.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub name: String,
    pub graph: Graph,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Dense index -> original node id, ascending in the original ids.
    pub node_ids: Vec<u64>,
}

/// RNG stream id for split selection, kept distinct from training draws.
const SPLIT_STREAM: u64 = 1;

fn load_err(file: &Path, line: usize, reason: impl Into<String>) -> CliError {
    CliError::Load {
        file: file.display().to_string(),
        line,
        reason: reason.into(),
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    let content = fs::read_to_string(path).map_err(CliError::io(path))?;
    Ok(content.lines().map(str::to_owned).collect())
}

struct ParsedLine<'a> {
    line_no: usize,
    fields: Vec<&'a str>,
}

fn parse_tsv(lines: &[String]) -> Vec<ParsedLine<'_>> {
    lines
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| ParsedLine {
            line_no: i + 1,
            fields: l.split('\t').collect(),
        })
        .collect()
}

fn parse_id(raw: &str, file: &Path, line: usize) -> Result<u64, CliError> {
    raw.trim()
        .parse::<u64>()
        .map_err(|_| load_err(file, line, format!("non-integer node id '{raw}'")))
}

/// Loads and validates a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<DatasetBundle, CliError> {
    let nodes_path = dir.join("nodes.tsv");
    let edges_path = dir.join("edges.tsv");
    let labels_path = dir.join("labels.tsv");
    let splits_path = dir.join("splits.tsv");

    // nodes.tsv
    let node_lines = read_lines(&nodes_path)?;
    let parsed = parse_tsv(&node_lines);
    if parsed.is_empty() {
        return Err(load_err(&nodes_path, 1, "no nodes"));
    }
    let feature_dim = parsed[0].fields.len() - 1;
    if feature_dim == 0 {
        return Err(load_err(&nodes_path, parsed[0].line_no, "node has no features"));
    }
    let mut by_id: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for p in &parsed {
        let id = parse_id(p.fields[0], &nodes_path, p.line_no)?;
        if p.fields.len() - 1 != feature_dim {
            return Err(load_err(
                &nodes_path,
                p.line_no,
                format!("expected {feature_dim} features, found {}", p.fields.len() - 1),
            ));
        }
        let mut feats = Vec::with_capacity(feature_dim);
        for raw in &p.fields[1..] {
            let v: f64 = raw.trim().parse().map_err(|_| {
                load_err(&nodes_path, p.line_no, format!("bad feature value '{raw}'"))
            })?;
            feats.push(v);
        }
        if by_id.insert(id, feats).is_some() {
            return Err(load_err(
                &nodes_path,
                p.line_no,
                format!("duplicate node id {id}"),
            ));
        }
    }
    let node_ids: Vec<u64> = by_id.keys().copied().collect();
    let index_of: BTreeMap<u64, usize> = node_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i))
        .collect();
    let n = node_ids.len();
    let mut feature_data = Vec::with_capacity(n * feature_dim);
    for feats in by_id.values() {
        feature_data.extend_from_slice(feats);
    }
    let features = DenseMatrix::from_vec(n, feature_dim, feature_data)
        .map_err(|e| load_err(&nodes_path, 0, e.to_string()))?;

    // edges.tsv
    let edge_lines = read_lines(&edges_path)?;
    let mut edges = Vec::new();
    for p in parse_tsv(&edge_lines) {
        if p.fields.len() != 2 {
            return Err(load_err(
                &edges_path,
                p.line_no,
                format!("expected 2 columns, found {}", p.fields.len()),
            ));
        }
        let src = parse_id(p.fields[0], &edges_path, p.line_no)?;
        let dst = parse_id(p.fields[1], &edges_path, p.line_no)?;
        if src == dst {
            return Err(load_err(
                &edges_path,
                p.line_no,
                format!("self-loop on node {src}"),
            ));
        }
        let (a, b) = match (index_of.get(&src), index_of.get(&dst)) {
            (Some(&a), Some(&b)) => (a, b),
            (None, _) => {
                return Err(load_err(&edges_path, p.line_no, format!("unknown node id {src}")))
            }
            (_, None) => {
                return Err(load_err(&edges_path, p.line_no, format!("unknown node id {dst}")))
            }
        };
        edges.push((a, b));
    }

    // labels.tsv
    let label_lines = read_lines(&labels_path)?;
    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut label_entries: Vec<(usize, usize, usize)> = Vec::new(); // (node, label, line)
    for p in parse_tsv(&label_lines) {
        if p.fields.len() != 2 {
            return Err(load_err(
                &labels_path,
                p.line_no,
                format!("expected 2 columns, found {}", p.fields.len()),
            ));
        }
        let id = parse_id(p.fields[0], &labels_path, p.line_no)?;
        let idx = *index_of
            .get(&id)
            .ok_or_else(|| load_err(&labels_path, p.line_no, format!("unknown node id {id}")))?;
        let label: usize = p.fields[1].trim().parse().map_err(|_| {
            load_err(&labels_path, p.line_no, format!("bad class index '{}'", p.fields[1]))
        })?;
        if labels[idx].is_some() {
            return Err(load_err(
                &labels_path,
                p.line_no,
                format!("duplicate label for node id {id}"),
            ));
        }
        labels[idx] = Some(label);
        label_entries.push((idx, label, p.line_no));
    }
    // Classes must be the dense range 0..K.
    let mut seen = std::collections::BTreeSet::new();
    for (_, label, _) in &label_entries {
        seen.insert(*label);
    }
    let num_classes = seen.len();
    for (_, label, line_no) in &label_entries {
        if *label >= num_classes {
            return Err(load_err(
                &labels_path,
                *line_no,
                format!("label {label} out of range for {num_classes} classes"),
            ));
        }
    }

    // splits.tsv (optional)
    let mut train_mask = Vec::new();
    let mut val_mask = Vec::new();
    let mut test_mask = Vec::new();
    if splits_path.exists() {
        let split_lines = read_lines(&splits_path)?;
        let mut assigned: Vec<Option<usize>> = vec![None; n];
        for p in parse_tsv(&split_lines) {
            if p.fields.len() != 2 {
                return Err(load_err(
                    &splits_path,
                    p.line_no,
                    format!("expected 2 columns, found {}", p.fields.len()),
                ));
            }
            let id = parse_id(p.fields[0], &splits_path, p.line_no)?;
            let idx = *index_of.get(&id).ok_or_else(|| {
                load_err(&splits_path, p.line_no, format!("unknown node id {id}"))
            })?;
            if assigned[idx].is_some() {
                return Err(load_err(
                    &splits_path,
                    p.line_no,
                    format!("node id {id} assigned to two splits"),
                ));
            }
            match p.fields[1].trim() {
                "train" => {
                    if labels[idx].is_none() {
                        return Err(load_err(
                            &splits_path,
                            p.line_no,
                            format!("train node id {id} has no label"),
                        ));
                    }
                    train_mask.push(idx);
                }
                "val" => val_mask.push(idx),
                "test" => test_mask.push(idx),
                other => {
                    return Err(load_err(
                        &splits_path,
                        p.line_no,
                        format!("unknown split tag '{other}'"),
                    ))
                }
            }
            assigned[idx] = Some(p.line_no);
        }
    }

    let graph = Graph::new(edges, features, labels, train_mask, val_mask, test_mask)
        .map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_owned());
    Ok(DatasetBundle {
        name,
        graph,
        num_classes,
        feature_dim,
        node_ids,
    })
}

/// Standard citation-benchmark split: 20 labeled nodes per class for
/// training, 500 validation, 1000 test, selected deterministically from the
/// seed. Replaces the bundle's masks.
pub fn apply_planetoid_split(bundle: &mut DatasetBundle, seed: u64) -> Result<(), CliError> {
    const TRAIN_PER_CLASS: usize = 20;
    const VAL_COUNT: usize = 500;
    const TEST_COUNT: usize = 1000;

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);

    let labels = bundle.graph.labels();
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); bundle.num_classes];
    for (i, label) in labels.iter().enumerate() {
        if let Some(l) = *label {
            per_class[l].push(i);
        }
    }
    let mut train = Vec::new();
    for (class, members) in per_class.iter().enumerate() {
        if members.len() < TRAIN_PER_CLASS {
            return Err(CliError::Config(format!(
                "class {class} has only {} labeled nodes, need {TRAIN_PER_CLASS} for the default split",
                members.len()
            )));
        }
        for idx in rand::seq::index::sample(&mut rng, members.len(), TRAIN_PER_CLASS) {
            train.push(members[idx]);
        }
    }
    train.sort_unstable();

    let in_train: std::collections::BTreeSet<usize> = train.iter().copied().collect();
    let mut pool: Vec<usize> = (0..bundle.graph.n())
        .filter(|i| labels[*i].is_some() && !in_train.contains(i))
        .collect();
    if pool.len() < VAL_COUNT + TEST_COUNT {
        return Err(CliError::Config(format!(
            "dataset has {} labeled nodes outside the train split, need {}",
            pool.len(),
            VAL_COUNT + TEST_COUNT
        )));
    }
    use rand::seq::SliceRandom;
    pool.shuffle(&mut rng);
    let val: Vec<usize> = pool[..VAL_COUNT].to_vec();
    let test: Vec<usize> = pool[VAL_COUNT..VAL_COUNT + TEST_COUNT].to_vec();

    bundle.graph = bundle.graph.with_masks(train, val, test)?;
    Ok(())
}
