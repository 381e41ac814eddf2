//! Experiment orchestration behind the CLI subcommands.
//!
//! Each seeded run owns its dataset instance, generator streams, metrics
//! file, and checkpoint; aggregation re-reads the JSONL it wrote so printed
//! numbers are re-derivable from the raw files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use gust_core::encoder::{
    encode, mean_uncertainty, predict, sample_latent_with_noise, EncoderDims, EncoderParams,
    Features, LatentDistribution, ParamLeaves,
};
use gust_core::gradcheck::finite_diff_check;
use gust_core::graph::build_normalized_adjacency;
use gust_core::rand_util::{seeded_rng, standard_normal_matrix};
use gust_core::trainer::{compute_alpha, e_step, run_method, EmHistory, FrozenLoss};
use gust_core::{Method, Tape, TrainConfig};

use crate::checkpoint::save_checkpoint;
use crate::dataset::{apply_planetoid_split, load_dataset, DatasetBundle};
use crate::error::CliError;
use crate::metrics::{mean_std, read_summary, write_metrics, RunMeta};
use crate::sbm::{generate_sbm, preset, preset_names};

/// RNG stream for synthetic dataset generation, distinct from training and
/// split selection.
const SBM_STREAM: u64 = 2;
/// RNG stream for sweep-time train-mask subsampling.
const SWEEP_STREAM: u64 = 3;

/// Where a run's data comes from.
#[derive(Debug, Clone)]
pub enum DataSource {
    /// Directory with the tab-separated dataset files.
    Dataset(PathBuf),
    /// Named synthetic preset.
    SbmPreset(String),
}

/// Everything one subcommand invocation needs.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub data: DataSource,
    pub method: Method,
    pub config: TrainConfig,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

impl RunSpec {
    fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::Usage("need at least one seed".into()));
        }
        self.config.validate()?;
        Ok(())
    }
}

/// Materializes the dataset for one seed. Synthetic data is regenerated per
/// seed (same seed, same data, regardless of method); file datasets without
/// split masks get the default split derived from the seed.
pub fn bundle_for_seed(data: &DataSource, seed: u64) -> Result<DatasetBundle, CliError> {
    match data {
        DataSource::Dataset(dir) => {
            let mut bundle = load_dataset(dir)?;
            if bundle.graph.train_mask().is_empty() {
                apply_planetoid_split(&mut bundle, seed)?;
            }
            Ok(bundle)
        }
        DataSource::SbmPreset(name) => {
            let params = preset(name).ok_or_else(|| {
                CliError::Usage(format!(
                    "unknown sbm preset '{name}', available: {}",
                    preset_names().join(", ")
                ))
            })?;
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(SBM_STREAM);
            let mut bundle = generate_sbm(&params, &mut rng)?;
            bundle.name = format!("sbm-{name}");
            Ok(bundle)
        }
    }
}

fn run_id(dataset: &str, variant: &str, seed: u64) -> String {
    format!("{dataset}_{variant}_seed{seed}")
}

/// One completed seeded run. `best_params` holds the weights at the best
/// validation iteration; they back the saved checkpoint and the reported
/// accuracy.
pub struct SeedRun {
    pub seed: u64,
    pub history: EmHistory,
    pub best_params: EncoderParams,
    pub metrics_path: PathBuf,
}

fn run_one(
    data: &DataSource,
    method: Method,
    base: &TrainConfig,
    variant: &str,
    seed: u64,
    out: &Path,
) -> Result<SeedRun, CliError> {
    let bundle = bundle_for_seed(data, seed)?;
    let mut config = base.clone();
    config.seed = seed;
    let outcome = run_method(&bundle.graph, bundle.num_classes, &config, method)?;
    for warning in &outcome.history.warnings {
        eprintln!("warning: seed {seed}: {warning}");
    }
    let meta = RunMeta {
        run_id: run_id(&bundle.name, variant, seed),
        seed,
        dataset: bundle.name.clone(),
        method,
        config,
    };
    let metrics_path = out.join(format!("{}.jsonl", meta.run_id));
    write_metrics(&outcome.history, &meta, &metrics_path)?;
    Ok(SeedRun {
        seed,
        history: outcome.history,
        best_params: outcome.best_params,
        metrics_path,
    })
}

/// Aggregate over one variant's seeds, re-derived from the metrics files.
pub struct VariantReport {
    pub variant: String,
    pub per_seed: Vec<(u64, f64)>,
    pub mean: f64,
    pub std: f64,
}

fn aggregate(variant: &str, metrics_paths: &[PathBuf]) -> Result<VariantReport, CliError> {
    let mut per_seed = Vec::new();
    for path in metrics_paths {
        let summary = read_summary(path)?;
        let acc = summary.test_acc.ok_or_else(|| {
            CliError::Config(format!("{}: run has no test accuracy", path.display()))
        })?;
        per_seed.push((summary.seed, acc));
    }
    let accs: Vec<f64> = per_seed.iter().map(|&(_, a)| a).collect();
    let (mean, std) = mean_std(&accs);
    Ok(VariantReport {
        variant: variant.to_owned(),
        per_seed,
        mean,
        std,
    })
}

/// `train`: one run per seed, metrics plus a final checkpoint each, and a
/// mean ± std test accuracy summary recomputed from the written JSONL.
pub fn cmd_train(spec: &RunSpec) -> Result<VariantReport, CliError> {
    spec.validate()?;
    fs::create_dir_all(&spec.out).map_err(CliError::io(&spec.out))?;
    let variant = spec.method.name().to_owned();
    let mut metrics_paths = Vec::new();
    for &seed in &spec.seeds {
        let run = run_one(&spec.data, spec.method, &spec.config, &variant, seed, &spec.out)?;
        let mut config = spec.config.clone();
        config.seed = seed;
        let ckpt_dir = spec
            .out
            .join(format!("{}_checkpoint", run.metrics_path.file_stem().unwrap().to_string_lossy()));
        save_checkpoint(&run.best_params, &config, &ckpt_dir)?;
        if let Some(acc) = run.history.reported_test_acc() {
            println!("seed {seed}: test_acc {acc:.4}");
        } else {
            println!("seed {seed}: no test mask");
        }
        metrics_paths.push(run.metrics_path);
    }
    let report = aggregate(&variant, &metrics_paths)?;
    println!(
        "method {} over {} seeds: test_acc {:.4} ± {:.4}",
        report.variant,
        report.per_seed.len(),
        report.mean,
        report.std
    );
    Ok(report)
}

/// Per-class proportional subsample of the train mask, at least one node per
/// class. Returns `None` when some class has no labeled train node at all.
fn subsample_train_mask(
    bundle: &DatasetBundle,
    fraction: f64,
    rng: &mut ChaCha20Rng,
) -> Option<Vec<usize>> {
    let labels = bundle.graph.labels();
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); bundle.num_classes];
    for &i in bundle.graph.train_mask() {
        let label = labels[i].expect("train nodes are labeled");
        per_class[label].push(i);
    }
    let mut subsampled = Vec::new();
    for members in &per_class {
        if members.is_empty() {
            return None;
        }
        let keep = ((members.len() as f64 * fraction).round() as usize)
            .clamp(1, members.len());
        for idx in rand::seq::index::sample(rng, members.len(), keep) {
            subsampled.push(members[idx]);
        }
    }
    subsampled.sort_unstable();
    Some(subsampled)
}

/// `sweep`: label-fraction curve. For each fraction and seed the train mask
/// is subsampled per class (at least one node per class) and one run is
/// executed; rows land in `sweep.csv` as `fraction,seed,method,test_acc`.
/// Fraction 1.0 keeps the mask untouched and reproduces `train` exactly.
pub fn cmd_sweep(spec: &RunSpec, fractions: &[f64]) -> Result<PathBuf, CliError> {
    spec.validate()?;
    if fractions.is_empty() {
        return Err(CliError::Usage("sweep needs at least one fraction".into()));
    }
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(CliError::Usage(format!(
                "fractions must lie in (0, 1], got {f}"
            )));
        }
    }
    fs::create_dir_all(&spec.out).map_err(CliError::io(&spec.out))?;
    let csv_path = spec.out.join("sweep.csv");
    let mut csv = String::from("fraction,seed,method,test_acc\n");

    for &fraction in fractions {
        for &seed in &spec.seeds {
            let mut bundle = bundle_for_seed(&spec.data, seed)?;
            if fraction < 1.0 {
                let mut mask_rng = ChaCha20Rng::seed_from_u64(seed);
                mask_rng.set_stream(SWEEP_STREAM);
                match subsample_train_mask(&bundle, fraction, &mut mask_rng) {
                    Some(train) => {
                        bundle.graph = bundle.graph.with_masks(
                            train,
                            bundle.graph.val_mask().to_vec(),
                            bundle.graph.test_mask().to_vec(),
                        )?;
                    }
                    None => {
                        eprintln!(
                            "warning: fraction {fraction} seed {seed}: a class has no labeled train node, skipping"
                        );
                        csv.push_str(&format!(
                            "{fraction},{seed},{},nan\n",
                            spec.method.name()
                        ));
                        continue;
                    }
                }
            }
            let mut config = spec.config.clone();
            config.seed = seed;
            let outcome =
                run_method(&bundle.graph, bundle.num_classes, &config, spec.method)?;
            let acc = outcome.history.reported_test_acc().ok_or_else(|| {
                CliError::Config("sweep requires a dataset with a test mask".into())
            })?;
            csv.push_str(&format!(
                "{fraction},{seed},{},{acc}\n",
                spec.method.name()
            ));
        }
    }
    let mut file = fs::File::create(&csv_path).map_err(CliError::io(&csv_path))?;
    file.write_all(csv.as_bytes()).map_err(CliError::io(&csv_path))?;
    println!("wrote {}", csv_path.display());
    Ok(csv_path)
}

/// Ablation report: per-variant aggregate and its drop versus full gust.
pub struct AblationReport {
    pub full: VariantReport,
    pub ablations: Vec<(VariantReport, f64)>,
}

/// `ablate`: runs full gust plus each single-flag ablation over the seed
/// list and reports mean deltas against the full configuration.
pub fn cmd_ablate(spec: &RunSpec) -> Result<AblationReport, CliError> {
    spec.validate()?;
    fs::create_dir_all(&spec.out).map_err(CliError::io(&spec.out))?;
    type FlagSetter = fn(&mut TrainConfig);
    let variants: [(&str, FlagSetter); 4] = [
        ("gust_full", |_| {}),
        ("ablate_deterministic_encoder", |c| {
            c.deterministic_encoder = true;
        }),
        ("ablate_single_step", |c| c.single_step = true),
        ("ablate_no_graph_reg", |c| c.no_graph_reg = true),
    ];

    let mut reports = Vec::new();
    for (name, apply) in variants {
        let mut config = spec.config.clone();
        apply(&mut config);
        let mut paths = Vec::new();
        for &seed in &spec.seeds {
            let run = run_one(&spec.data, Method::Gust, &config, name, seed, &spec.out)?;
            paths.push(run.metrics_path);
        }
        reports.push(aggregate(name, &paths)?);
    }

    let full = reports.remove(0);
    println!(
        "gust_full: test_acc {:.4} ± {:.4} over {} seeds",
        full.mean,
        full.std,
        full.per_seed.len()
    );
    let mut ablations = Vec::new();
    for report in reports {
        let delta = full.mean - report.mean;
        println!(
            "{}: test_acc {:.4} ± {:.4} (full - ablation = {:+.4})",
            report.variant, report.mean, report.std, delta
        );
        ablations.push((report, delta));
    }
    Ok(AblationReport { full, ablations })
}

/// Gradient-gate outcome.
pub struct GradcheckOutcome {
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub pass: bool,
    pub seconds: f64,
}

/// Tolerance of the gradient gate.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// `gradcheck`: builds a fixed 12-node synthetic instance, runs one E-step to
/// freeze a pseudo-label table, then compares analytic gradients of the full
/// objective (gamma = 1, lambda = 0.5) against central finite differences
/// over every weight coordinate.
pub fn cmd_gradcheck() -> Result<GradcheckOutcome, CliError> {
    let start = Instant::now();
    let gamma = 1.0;
    let lambda = 0.5;

    let sbm = crate::sbm::SbmParams {
        n: 12,
        blocks: 3,
        p_in: 0.6,
        p_out: 0.15,
        feature_dim: 6,
        feature_shift: 1.2,
        labels_per_class: 2,
    };
    let mut data_rng = ChaCha20Rng::seed_from_u64(42);
    data_rng.set_stream(SBM_STREAM);
    let bundle = generate_sbm(&sbm, &mut data_rng)?;
    let graph = &bundle.graph;

    let mut rng = seeded_rng(42);
    let dims = EncoderDims {
        in_dim: bundle.feature_dim,
        hidden_dim: 8,
        latent_dim: 4,
        num_classes: bundle.num_classes,
    };
    let params = EncoderParams::init(dims, &mut rng);
    let adj = std::sync::Arc::new(build_normalized_adjacency(graph));
    let features = Features::auto(graph.features());

    // One E-step with its own frozen sample produces the pseudo-label table.
    let mut tape = Tape::new();
    let leaves = ParamLeaves::create(&mut tape, &params);
    let enc = encode(&mut tape, &adj, &features, &leaves)?;
    let e_noise = standard_normal_matrix(&mut rng, graph.n(), dims.latent_dim);
    let sample = sample_latent_with_noise(&mut tape, &enc, e_noise)?;
    let probs = predict(&mut tape, sample.z, leaves.w_cls)?;
    let dist = LatentDistribution::from_tape(&tape, &enc);
    let alpha = compute_alpha(&mean_uncertainty(&dist), gamma);
    let predictions = tape.value(probs).clone();
    let y_hat = e_step(&predictions, &alpha, graph.labels(), graph.train_mask())?;

    let m_noise = standard_normal_matrix(&mut rng, graph.n(), dims.latent_dim);
    let frozen = FrozenLoss::new(
        graph,
        bundle.num_classes,
        &y_hat,
        &graph.unlabeled_nodes(),
        m_noise,
        lambda,
    )?;
    let values = params.values();
    let (_, grads) = frozen.value_and_grads(&values)?;
    let report = finite_diff_check(&values, &grads, 1e-5, |v| frozen.value(v))?;

    let outcome = GradcheckOutcome {
        max_rel_error: report.max_rel_error,
        coordinates: report.coordinates_checked,
        pass: report.max_rel_error <= GRADCHECK_TOLERANCE,
        seconds: start.elapsed().as_secs_f64(),
    };
    println!(
        "gradcheck: max relative error {:.3e} over {} coordinates in {:.2}s -> {}",
        outcome.max_rel_error,
        outcome.coordinates,
        outcome.seconds,
        if outcome.pass { "PASS" } else { "FAIL" }
    );
    Ok(outcome)
}
