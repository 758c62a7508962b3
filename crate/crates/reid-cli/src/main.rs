//! `reid` — synthetic-data generation, retrieval evaluation, re-ranking,
//! pseudo-label tooling, and the three toy training loops, over embedding
//! files.
//!
//! Exit codes: 0 success, 1 user error (arguments, files, formats),
//! 2 internal error or failed self-check.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use reid_core::cluster::{dbscan, dbscan_precomputed};
use reid_core::embedding::{l2_normalize, pairwise_distances, EmbeddingMatrix, Metric, SampleMeta};
use reid_core::eval::{
    adjusted_rand_index, assignment_labels_with_noise_singletons,
    normalized_mutual_information, rank_distances, rank_gallery, MetricSummary, RankOptions,
};
use reid_core::pipeline::{
    train_daprh_stage2, train_scm, train_vitc, RunConfig, TokenData, TrainLog,
};
use reid_core::rerank::{jaccard_distance, jaccard_distance_matrix, rerank_final, JaccardEncoding};
use reid_core::silhouette::silhouette;
use reid_core::softlabel::{refine_labels, soft_assignment_matrix, SoftAssignSign, SoftLabelMatrix};
use reid_core::synth::{synth_dataset, SyntheticDataset, SyntheticSpec};

#[derive(Parser)]
#[command(name = "reid", version, about = "Embedding-level person re-identification toolkit")]
struct Cli {
    /// Seed for all randomness in the invoked command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// JSON run-configuration file; command-line flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print only the machine-readable summary.
    #[arg(long, global = true, default_value_t = false)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Euclidean,
    Squared,
    Cosine,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Euclidean => Metric::Euclidean,
            MetricArg::Squared => Metric::SquaredEuclidean,
            MetricArg::Cosine => Metric::CosineDistance,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    /// 8 identities × 2 cameras × 10 samples, mild noise.
    Easy,
    /// Pronounced camera gap for camera-aware runs.
    CameraOffset,
    /// Globally shifted noisy target domain.
    TwoDomain,
}

impl PresetArg {
    fn spec(self, seed: u64) -> SyntheticSpec {
        match self {
            PresetArg::Easy => SyntheticSpec::easy(seed),
            PresetArg::CameraOffset => SyntheticSpec::camera_offset(seed),
            PresetArg::TwoDomain => SyntheticSpec::two_domain_target(seed),
        }
    }
}

#[derive(Args)]
struct DataArgs {
    /// Embedding file to train on.
    #[arg(long, conflicts_with = "preset")]
    data: Option<PathBuf>,
    /// Generate the named synthetic preset instead of reading a file.
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-camera dataset and write an embedding file.
    Synth {
        #[arg(long, value_enum, default_value = "easy")]
        preset: PresetArg,
        #[arg(long)]
        out: PathBuf,
        /// Override the preset's identity count.
        #[arg(long)]
        identities: Option<usize>,
        /// Override the preset's camera count.
        #[arg(long)]
        cameras: Option<usize>,
        /// Override the preset's samples per (identity, camera).
        #[arg(long)]
        samples_per_pair: Option<usize>,
        /// Override the preset's noise sigma.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Rank a gallery for every query and report mAP and CMC.
    Eval {
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long, value_enum, default_value = "euclidean")]
        metric: MetricArg,
        /// Disable the same-identity/same-camera protocol mask.
        #[arg(long)]
        no_protocol_filter: bool,
        /// L2-normalize features before ranking.
        #[arg(long)]
        normalize: bool,
    },
    /// k-reciprocal re-ranking: report metrics before and after.
    Rerank {
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        k1: Option<usize>,
        #[arg(long)]
        k2: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Literal hard-set Jaccard instead of the fuzzy encoding.
        #[arg(long)]
        hard_set: bool,
        #[arg(long)]
        no_protocol_filter: bool,
        #[arg(long)]
        normalize: bool,
    },
    /// DBSCAN over an embedding file; reports cluster count and agreement
    /// with the stored labels.
    Cluster {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        min_pts: Option<usize>,
        /// Cluster on k-reciprocal Jaccard distances.
        #[arg(long)]
        jaccard: bool,
        /// Skip L2 normalization before clustering.
        #[arg(long)]
        no_normalize: bool,
    },
    /// Cluster, silhouette-filter the centroids, and emit refined soft labels.
    Refine {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        sigma_threshold: Option<f64>,
        /// Reproduce the printed positive-sign assignment formula.
        #[arg(long)]
        paper_literal_sign: bool,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        min_pts: Option<usize>,
        /// Write the refined soft-label matrix as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Supervised training on labeled data with a held-out evaluation.
    TrainScm {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Write the batch/epoch log as line-delimited JSON.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Teacher-student self-training on unlabeled data.
    TrainDaprh {
        #[command(flatten)]
        data: DataArgs,
        /// Labeled source-domain embedding file (enables the two-domain mode).
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Camera-aware unsupervised training with contrastive memories.
    TrainVitc {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        lambda_cap: Option<f64>,
        /// Synthesize this many token features per sample and train on the
        /// attention-fused representation.
        #[arg(long)]
        synthetic_tokens: Option<usize>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Verify every loss gradient against central finite differences.
    Gradcheck {
        /// Check the full suite.
        #[arg(long, conflicts_with = "op")]
        all: bool,
        /// Check one op by name.
        #[arg(long)]
        op: Option<String>,
    },
    /// Verify embedding-file round-trips.
    IoRoundtrip {
        /// File to round-trip; without it, a randomized self-test runs.
        #[arg(long = "in")]
        input: Option<PathBuf>,
    },
}

struct CliError {
    message: String,
    exit: u8,
}

impl CliError {
    fn user(message: impl Into<String>) -> Self {
        Self { message: message.into(), exit: 1 }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self { message: message.into(), exit: 2 }
    }
}

impl From<reid_core::Error> for CliError {
    fn from(e: reid_core::Error) -> Self {
        use reid_core::Error::*;
        match e {
            Io(_) | BadMagic { .. } | VersionUnsupported(_) | TruncatedFile { .. }
            | BadCsv { .. } | DimMismatch { .. } | InsufficientSamples { .. }
            | EmptyGallery => CliError::user(e.to_string()),
            other => CliError::internal(other.to_string()),
        }
    }
}

fn run_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::user(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::user(format!("bad config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    cfg.seed = cli.seed;
    Ok(cfg)
}

/// Reads either the binary embedding format or the CSV import layout,
/// switched on the file extension.
fn read_any(path: &Path) -> Result<(EmbeddingMatrix, SampleMeta), CliError> {
    if path.extension().is_some_and(|e| e == "csv") {
        Ok(reid_core::io::read_csv(path)?)
    } else {
        Ok(reid_core::io::read_embeddings(path)?)
    }
}

fn load_dataset(path: &Path) -> Result<SyntheticDataset, CliError> {
    let (features, meta) = read_any(path)?;
    let ground_truth = meta.labels().to_vec();
    Ok(SyntheticDataset { features, meta, ground_truth })
}

fn resolve_data(args: &DataArgs, seed: u64) -> Result<SyntheticDataset, CliError> {
    match (&args.data, args.preset) {
        (Some(path), _) => load_dataset(path),
        (None, Some(preset)) => Ok(synth_dataset(&preset.spec(seed))),
        (None, None) => Err(CliError::user("provide --data <file> or --preset <name>")),
    }
}

fn write_log(path: &Option<PathBuf>, log: &TrainLog) -> Result<(), CliError> {
    if let Some(path) = path {
        std::fs::write(path, log.to_jsonl())
            .map_err(|e| CliError::user(format!("cannot write log {}: {e}", path.display())))?;
    }
    Ok(())
}

fn print_summary(quiet: bool, summary: &MetricSummary) {
    if !quiet {
        print!("{}", summary.tsv());
    }
    println!("{}", serde_json::to_string(summary).expect("summary serializes"));
}

fn print_epochs(quiet: bool, log: &TrainLog) {
    if quiet {
        return;
    }
    for e in &log.epochs {
        println!("{}", serde_json::to_string(e).expect("record serializes"));
    }
}

fn maybe_normalized(e: EmbeddingMatrix, normalize: bool) -> Result<EmbeddingMatrix, CliError> {
    if normalize {
        Ok(l2_normalize(&e)?)
    } else {
        Ok(e)
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Synth { preset, out, identities, cameras, samples_per_pair, noise } => {
            let mut spec = preset.spec(cli.seed);
            if let Some(v) = identities {
                spec.identities = *v;
            }
            if let Some(v) = cameras {
                spec.cameras = *v;
            }
            if let Some(v) = samples_per_pair {
                spec.samples_per_pair = *v;
            }
            if let Some(v) = noise {
                spec.noise = *v;
            }
            let data = synth_dataset(&spec);
            reid_core::io::write_embeddings(out, &data.features, &data.meta)?;
            if !cli.quiet {
                println!(
                    "wrote {} samples ({} identities x {} cameras, dim {}) to {}",
                    data.len(),
                    spec.identities,
                    spec.cameras,
                    spec.raw_dim,
                    out.display()
                );
            }
            Ok(())
        }

        Command::Eval { query, gallery, metric, no_protocol_filter, normalize } => {
            let (qe, qm) = read_any(query)?;
            let (ge, gm) = read_any(gallery)?;
            let qe = maybe_normalized(qe, *normalize)?;
            let ge = maybe_normalized(ge, *normalize)?;
            let opts = RankOptions { cross_camera_filter: !no_protocol_filter, top_k: None };
            let ranking = rank_gallery((&qe, &qm), (&ge, &gm), (*metric).into(), &opts)?;
            let summary = MetricSummary::from_ranking(&ranking)?;
            print_summary(cli.quiet, &summary);
            Ok(())
        }

        Command::Rerank {
            query,
            gallery,
            k1,
            k2,
            lambda,
            hard_set,
            no_protocol_filter,
            normalize,
        } => {
            let cfg = run_config(cli)?;
            let mut rerank_cfg = cfg.rerank.clone();
            if let Some(v) = k1 {
                rerank_cfg.k1 = *v;
            }
            if let Some(v) = k2 {
                rerank_cfg.k2 = *v;
            }
            if let Some(v) = lambda {
                rerank_cfg.lambda = *v;
            }
            rerank_cfg.validate()?;
            let (qe, qm) = read_any(query)?;
            let (ge, gm) = read_any(gallery)?;
            let qe = maybe_normalized(qe, *normalize)?;
            let ge = maybe_normalized(ge, *normalize)?;
            let opts = RankOptions { cross_camera_filter: !no_protocol_filter, top_k: None };

            let plain = rank_gallery((&qe, &qm), (&ge, &gm), Metric::Euclidean, &opts)?;
            let before = MetricSummary::from_ranking(&plain)?;

            // stack queries then gallery for the reciprocal-set encoding
            let mut rows: Vec<Vec<f64>> = Vec::with_capacity(qe.n() + ge.n());
            for i in 0..qe.n() {
                rows.push(qe.row(i).to_vec());
            }
            for i in 0..ge.n() {
                rows.push(ge.row(i).to_vec());
            }
            let all = EmbeddingMatrix::from_rows(&rows)?;
            let encoding = if *hard_set { JaccardEncoding::HardSet } else { JaccardEncoding::Fuzzy };
            let d_j = jaccard_distance(&all, qe.n(), &rerank_cfg, encoding)?;
            let d_e = pairwise_distances(&qe, &ge, Metric::Euclidean)?;
            let blended = rerank_final(&d_j, &d_e, rerank_cfg.lambda)?;
            let reranked = rank_distances(&blended, &qm, &gm, &opts)?;
            let after = MetricSummary::from_ranking(&reranked)?;
            if !cli.quiet {
                println!("before\tmAP\t{}", before.map);
                println!("before\trank1\t{}", before.rank1);
                print!("{}", after.tsv());
            }
            println!("{}", serde_json::to_string(&after).expect("summary serializes"));
            Ok(())
        }

        Command::Cluster { input, epsilon, min_pts, jaccard, no_normalize } => {
            let cfg = run_config(cli)?;
            let mut cluster_cfg = cfg.cluster.clone();
            if let Some(v) = epsilon {
                cluster_cfg.epsilon = *v;
            }
            if let Some(v) = min_pts {
                cluster_cfg.min_pts = *v;
            }
            let (features, meta) = read_any(input)?;
            let features = maybe_normalized(features, !no_normalize)?;
            let assignment = if *jaccard {
                let dist =
                    jaccard_distance_matrix(&features, &cfg.rerank, JaccardEncoding::Fuzzy)?;
                dbscan_precomputed(&dist, &cluster_cfg)
            } else {
                dbscan(&features, &cluster_cfg)
            };
            let labels = assignment_labels_with_noise_singletons(&assignment);
            let truth = meta.labels();
            let has_truth = truth.iter().any(|&l| l >= 0);
            #[derive(serde::Serialize)]
            struct ClusterSummary {
                clusters: usize,
                noise: usize,
                samples: usize,
                ari: Option<f64>,
                nmi: Option<f64>,
                mean_silhouette: Option<f64>,
            }
            let mean_silhouette = if assignment.num_clusters() >= 2 {
                let dist = pairwise_distances(&features, &features, cluster_cfg.metric)?;
                silhouette(&dist, &assignment)?.mean()
            } else {
                None
            };
            let summary = ClusterSummary {
                clusters: assignment.num_clusters(),
                noise: assignment.noise_count(),
                samples: assignment.len(),
                ari: if has_truth { Some(adjusted_rand_index(&labels, truth)) } else { None },
                nmi: if has_truth {
                    Some(normalized_mutual_information(&labels, truth))
                } else {
                    None
                },
                mean_silhouette,
            };
            if !cli.quiet {
                println!("clusters\t{}", summary.clusters);
                println!("noise\t{}", summary.noise);
                if let Some(ari) = summary.ari {
                    println!("ari\t{ari}");
                }
                if let Some(nmi) = summary.nmi {
                    println!("nmi\t{nmi}");
                }
                if let Some(s) = summary.mean_silhouette {
                    println!("mean_silhouette\t{s}");
                }
            }
            println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
            Ok(())
        }

        Command::Refine {
            input,
            alpha,
            tau,
            sigma_threshold,
            paper_literal_sign,
            epsilon,
            min_pts,
            out,
        } => {
            let cfg = run_config(cli)?;
            let mut cluster_cfg = cfg.cluster.clone();
            if let Some(v) = epsilon {
                cluster_cfg.epsilon = *v;
            }
            if let Some(v) = min_pts {
                cluster_cfg.min_pts = *v;
            }
            let alpha = alpha.unwrap_or(cfg.refine_alpha);
            let tau = tau.unwrap_or(cfg.tau_refine);
            let sigma = sigma_threshold.unwrap_or(cfg.sigma_threshold);
            let sign = if *paper_literal_sign || cfg.paper_literal_sign {
                SoftAssignSign::PaperLiteral
            } else {
                SoftAssignSign::NegatedDistance
            };
            let (features, _) = read_any(input)?;
            let features = l2_normalize(&features)?;
            let assignment = dbscan(&features, &cluster_cfg);
            if assignment.num_clusters() == 0 {
                return Err(CliError::user(
                    "clustering produced zero clusters; relax epsilon/min-pts",
                ));
            }
            let keep = assignment.non_noise_indices();
            let kept = features.select_rows(&keep);
            let kept_assignment = reid_core::cluster::ClusterAssignment::new(
                keep.iter().map(|&i| assignment.get(i)).collect(),
                assignment.num_clusters(),
            )?;
            let dist = pairwise_distances(&kept, &kept, Metric::Euclidean)?;
            let cents = match silhouette(&dist, &kept_assignment) {
                Ok(s) => {
                    reid_core::cluster::confident_centroids(&kept, &kept_assignment, &s, sigma)?
                }
                Err(reid_core::Error::FewerThanTwoClusters) => {
                    reid_core::cluster::centroids(&kept, &kept_assignment)?
                }
                Err(e) => return Err(e.into()),
            };
            let g = soft_assignment_matrix(&kept, &cents, tau, sign);
            let hard = SoftLabelMatrix::one_hot_from_assignment(&kept_assignment)?;
            let refined = refine_labels(&hard, &g, alpha)?;
            if let Some(path) = out {
                let mut text = String::new();
                for (slot, &row) in keep.iter().enumerate() {
                    text.push_str(&row.to_string());
                    for v in refined.values().row(slot).iter() {
                        text.push(',');
                        text.push_str(&v.to_string());
                    }
                    text.push('\n');
                }
                std::fs::write(path, text)
                    .map_err(|e| CliError::user(format!("cannot write {}: {e}", path.display())))?;
            }
            #[derive(serde::Serialize)]
            struct RefineSummary {
                clusters: usize,
                noise: usize,
                refined_rows: usize,
                alpha: f64,
                tau: f64,
                sigma_threshold: f64,
            }
            let summary = RefineSummary {
                clusters: assignment.num_clusters(),
                noise: assignment.noise_count(),
                refined_rows: refined.n(),
                alpha,
                tau,
                sigma_threshold: sigma,
            };
            if !cli.quiet {
                println!("clusters\t{}", summary.clusters);
                println!("noise\t{}", summary.noise);
                println!("refined_rows\t{}", summary.refined_rows);
            }
            println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
            Ok(())
        }

        Command::TrainScm { data, epochs, learning_rate, log } => {
            let mut cfg = run_config(cli)?;
            if let Some(v) = epochs {
                cfg.epochs = *v;
            }
            if let Some(v) = learning_rate {
                cfg.learning_rate = *v;
            }
            let dataset = resolve_data(data, cli.seed)?;
            let (train, held) = dataset.split_holdout(cfg.holdout_per_pair);
            let result = train_scm(&train, &held, &cfg)?;
            write_log(log, &result.log)?;
            print_epochs(cli.quiet, &result.log);
            if !cli.quiet {
                println!("baseline_rank1\t{}", result.baseline.rank1);
            }
            print_summary(cli.quiet, &result.final_metrics);
            Ok(())
        }

        Command::TrainDaprh { data, source, epochs, learning_rate, log } => {
            let mut cfg = if cli.config.is_none() {
                RunConfig { seed: cli.seed, ..RunConfig::daprh_target(cli.seed) }
            } else {
                run_config(cli)?
            };
            if let Some(v) = epochs {
                cfg.epochs = *v;
            }
            if let Some(v) = learning_rate {
                cfg.learning_rate = *v;
            }
            let dataset = resolve_data(data, cli.seed)?.blinded();
            let source_data = match source {
                Some(p) => Some(load_dataset(p)?),
                None => None,
            };
            let result = train_daprh_stage2(&dataset, source_data.as_ref(), &cfg)?;
            write_log(log, &result.log)?;
            print_epochs(cli.quiet, &result.log);
            print_summary(cli.quiet, &result.final_metrics);
            Ok(())
        }

        Command::TrainVitc { data, epochs, learning_rate, lambda_cap, synthetic_tokens, log } => {
            let mut cfg = if cli.config.is_none() {
                RunConfig { seed: cli.seed, ..RunConfig::vitc_camera_offset(cli.seed) }
            } else {
                run_config(cli)?
            };
            if let Some(v) = epochs {
                cfg.epochs = *v;
            }
            if let Some(v) = learning_rate {
                cfg.learning_rate = *v;
            }
            if let Some(v) = lambda_cap {
                cfg.loss.lambda_cap = *v;
            }
            let dataset = resolve_data(data, cli.seed)?.blinded();
            let tokens = match synthetic_tokens {
                Some(m) => Some(synthesize_tokens(&dataset, *m, cli.seed)?),
                None => None,
            };
            let result = train_vitc(&dataset, tokens.as_ref(), &cfg)?;
            write_log(log, &result.log)?;
            print_epochs(cli.quiet, &result.log);
            print_summary(cli.quiet, &result.final_metrics);
            Ok(())
        }

        Command::Gradcheck { all, op } => {
            let reports = match (all, op) {
                (_, Some(name)) => match reid_core::gradcheck::run_one(name, cli.seed) {
                    Some(r) => vec![r],
                    None => {
                        let known = reid_core::gradcheck::op_names().join(", ");
                        return Err(CliError::user(format!(
                            "unknown op {name}; known ops: {known}"
                        )));
                    }
                },
                _ => reid_core::gradcheck::run_all(cli.seed),
            };
            let mut all_passed = true;
            for r in &reports {
                all_passed &= r.passed;
                if !cli.quiet {
                    println!(
                        "{}\t{}\tmax_rel_err={:.3e}\ttol={:.0e}",
                        r.op,
                        if r.passed { "pass" } else { "FAIL" },
                        r.max_rel_err,
                        r.tolerance
                    );
                }
            }
            println!(
                "{}",
                serde_json::json!({
                    "checked": reports.len(),
                    "passed": reports.iter().filter(|r| r.passed).count(),
                })
            );
            if all_passed {
                Ok(())
            } else {
                Err(CliError::internal("gradient check failed"))
            }
        }

        Command::IoRoundtrip { input } => match input {
            Some(path) => {
                let original = std::fs::read(path)
                    .map_err(|e| CliError::user(format!("cannot read {}: {e}", path.display())))?;
                let (e, meta) = reid_core::io::decode_embeddings(&original)?;
                let rewritten = reid_core::io::encode_embeddings(&e, &meta)?;
                if rewritten == original {
                    if !cli.quiet {
                        println!("roundtrip\tok\t{} bytes", original.len());
                    }
                    Ok(())
                } else {
                    Err(CliError::internal("file round-trip is not bit-exact"))
                }
            }
            None => {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cli.seed);
                for case in 0..100 {
                    let n = if case == 0 { 0 } else { rng.gen_range(0..32) };
                    let d = if case == 1 { 1 } else { rng.gen_range(1..16) };
                    let flat: Vec<f64> = (0..n * d)
                        .map(|_| rng.gen_range(-8.0f32..8.0f32) as f64)
                        .collect();
                    let e = EmbeddingMatrix::from_flat(n, d, flat)?;
                    let meta = SampleMeta::new(
                        (0..n).map(|i| if i % 3 == 0 { -1 } else { i as i64 }).collect(),
                        (0..n).map(|i| (i % 4) as u32).collect(),
                    )?;
                    let bytes = reid_core::io::encode_embeddings(&e, &meta)?;
                    let (e2, meta2) = reid_core::io::decode_embeddings(&bytes)?;
                    if e2.values() != e.values()
                        || meta2 != meta
                        || reid_core::io::encode_embeddings(&e2, &meta2)? != bytes
                    {
                        return Err(CliError::internal(format!(
                            "random round-trip case {case} mismatched"
                        )));
                    }
                }
                if !cli.quiet {
                    println!("roundtrip\tok\t100 random datasets");
                }
                Ok(())
            }
        },
    }
}

fn synthesize_tokens(
    data: &SyntheticDataset,
    tokens_per_sample: usize,
    seed: u64,
) -> Result<TokenData, CliError> {
    use rand::{Rng, SeedableRng};
    if tokens_per_sample == 0 {
        return Err(CliError::user("--synthetic-tokens must be at least 1"));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x70BE17);
    let d = data.features.dim();
    let n = data.len();
    // tokens jitter around the sample's own feature vector
    let mut flat = Vec::with_capacity(n * tokens_per_sample * d);
    for i in 0..n {
        for _ in 0..tokens_per_sample {
            for k in 0..d {
                flat.push(data.features.values()[(i, k)] + rng.gen_range(-0.2..0.2));
            }
        }
    }
    let tokens = reid_core::parts::PartFeatures::from_flat(n, tokens_per_sample, d, flat)?;
    let attention: Vec<f64> = (0..tokens_per_sample)
        .map(|_| rng.gen_range(0.1..1.0))
        .collect();
    Ok(TokenData { tokens, attention })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version to stdout with success status; real
            // usage errors go to stderr and count as user errors
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.exit)
        }
    }
}
