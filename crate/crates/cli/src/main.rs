//! Command-line surface for the landmark localization pipeline.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flags or
//! missing input files).

mod pipeline;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use facealign_core::cascade::{
    load_model, save_model, train_cascade, CascadeConfig, InitStrategy, TrainingSample,
};
use facealign_core::dataset::{
    load_image_gray, load_manifest, read_results, write_manifest, write_results,
    DatasetManifest, ResultRecord, Split,
};
use facealign_core::error::AlignError;
use facealign_core::eval::{curve_svg, evaluate, write_ced_csv, write_pr_csv, EvalCase};
use facealign_core::fusion::{early_goodness, FusionConfig};
use facealign_core::lbp::LbpConfig;
use facealign_core::shapes::{fiducials_from_ground_truth, LandmarkIndexMap};
use facealign_core::texture::{build_gallery, load_gallery, save_gallery};
use facealign_core::{eval, synthetic};

use pipeline::{process_all, ranked_texture_runs, PipelineConfig};

#[derive(Parser)]
#[command(
    name = "facealign",
    about = "Occlusion-robust facial landmark localization",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a manifest and rewrite it in canonical form.
    Convert {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fill missing fiducials from ground-truth landmarks.
        #[arg(long)]
        derive_fiducials: bool,
    },
    /// Generate a synthetic dataset (images + manifest) for smoke testing.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.4)]
        occlusion_rate: f64,
        #[arg(long, default_value_t = 0.7)]
        train_fraction: f64,
    },
    /// Precompute the texture gallery from training records.
    GalleryBuild {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory image paths are relative to (default: manifest's).
        #[arg(long)]
        image_root: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
    },
    /// Train the cascade on the manifest's train split.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        image_root: Option<PathBuf>,
        /// Output model file.
        #[arg(long)]
        out: PathBuf,
        /// Optional per-stage training error CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        stages: usize,
        #[arg(long, default_value_t = 15)]
        ferns: usize,
        #[arg(long, default_value_t = 4)]
        eta: usize,
        #[arg(long, default_value_t = 5)]
        depth: usize,
        #[arg(long, default_value_t = 400)]
        pool: usize,
        #[arg(long, default_value_t = 1000.0)]
        shrinkage: f64,
        #[arg(long, default_value_t = 10)]
        augmentation: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run inference over the manifest's test split.
    Infer {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        image_root: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        /// Output results JSONL.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        workers: Option<usize>,
        /// Texture-correlated initial shapes.
        #[arg(long, default_value_t = 5)]
        l_texture: usize,
        /// Pose-correlated initial shapes.
        #[arg(long, default_value_t = 5)]
        l_pose: usize,
        /// Variance gate threshold.
        #[arg(long, default_value_t = 0.08)]
        zeta: f64,
        /// Record timing as 0 so reruns are byte-identical.
        #[arg(long)]
        zero_timing: bool,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Score a results file against manifest ground truth.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        results: PathBuf,
        /// Output directory for summary.json, ced.csv, pr.csv.
        #[arg(long)]
        out: PathBuf,
        /// Also emit ced.svg / pr.svg.
        #[arg(long)]
        plot_svg: bool,
    },
    /// Correlation-distance rank vs downstream error analysis.
    InitAnalyze {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        image_root: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        /// Output directory for init_ranks.csv and init_goodness.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        l_texture: usize,
        /// Variance gate thresholds to sweep for the good/bad counts.
        #[arg(long, value_delimiter = ',', default_value = "0.08")]
        zeta: Vec<f64>,
    },
    /// Render CED / PR CSV files to SVG.
    Plot {
        /// CED CSV (threshold,fraction).
        #[arg(long)]
        ced: Option<PathBuf>,
        /// PR CSV (threshold,precision,recall).
        #[arg(long)]
        pr: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

struct CliError {
    code: i32,
    message: String,
}

impl From<AlignError> for CliError {
    fn from(e: AlignError) -> Self {
        let code = match &e {
            AlignError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
            _ => 1,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), CliError>;

fn usage_error(message: impl Into<String>) -> CliError {
    CliError {
        code: 2,
        message: message.into(),
    }
}

fn runtime_error(message: impl Into<String>) -> CliError {
    CliError {
        code: 1,
        message: message.into(),
    }
}

fn require_input(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage_error(format!(
            "{what} not found: {}",
            path.display()
        )))
    }
}

fn default_image_root(manifest: &Path, image_root: &Option<PathBuf>) -> PathBuf {
    image_root.clone().unwrap_or_else(|| {
        manifest
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    })
}

fn split_records(manifest: &DatasetManifest, split: SplitArg) -> Vec<usize> {
    match split {
        SplitArg::Train => manifest.split_indices(Split::Train),
        SplitArg::Test => manifest.split_indices(Split::Test),
        SplitArg::All => (0..manifest.len()).collect(),
    }
}

fn install_pool(workers: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| runtime_error(format!("worker pool: {e}")))?;
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {}", e.message);
        std::process::exit(e.code);
    }
}

fn run(command: Command) -> CmdResult {
    match command {
        Command::Convert {
            manifest,
            out,
            derive_fiducials,
        } => cmd_convert(&manifest, &out, derive_fiducials),
        Command::Synth {
            out,
            count,
            image_size,
            seed,
            occlusion_rate,
            train_fraction,
        } => cmd_synth(&out, count, image_size, seed, occlusion_rate, train_fraction),
        Command::GalleryBuild {
            manifest,
            image_root,
            out,
            split,
        } => cmd_gallery_build(&manifest, &image_root, &out, split),
        Command::Train {
            manifest,
            image_root,
            out,
            trace,
            stages,
            ferns,
            eta,
            depth,
            pool,
            shrinkage,
            augmentation,
            seed,
            workers,
        } => {
            install_pool(workers)?;
            let config = CascadeConfig {
                stages,
                ferns_per_stage: ferns,
                regressors_per_fern: eta,
                fern_depth: depth,
                feature_pool: pool,
                shrinkage,
                augmentation,
                seed,
                ..Default::default()
            };
            cmd_train(&manifest, &image_root, &out, trace.as_deref(), &config)
        }
        Command::Infer {
            manifest,
            image_root,
            model,
            gallery,
            out,
            seed,
            workers,
            l_texture,
            l_pose,
            zeta,
            zero_timing,
            split,
        } => {
            install_pool(workers)?;
            cmd_infer(
                &manifest,
                &image_root,
                &model,
                &gallery,
                &out,
                seed,
                l_texture,
                l_pose,
                zeta,
                zero_timing,
                split,
            )
        }
        Command::Evaluate {
            manifest,
            results,
            out,
            plot_svg,
        } => cmd_evaluate(&manifest, &results, &out, plot_svg),
        Command::InitAnalyze {
            manifest,
            image_root,
            model,
            gallery,
            out,
            l_texture,
            zeta,
        } => cmd_init_analyze(&manifest, &image_root, &model, &gallery, &out, l_texture, &zeta),
        Command::Plot { ced, pr, out } => cmd_plot(ced.as_deref(), pr.as_deref(), &out),
    }
}

fn cmd_convert(manifest_path: &Path, out: &Path, derive_fiducials: bool) -> CmdResult {
    require_input(manifest_path, "manifest")?;
    let mut manifest = load_manifest(manifest_path)?;
    let index_map = LandmarkIndexMap::default();
    let mut derived = 0usize;
    if derive_fiducials {
        for record in &mut manifest.records {
            if record.fiducials.is_none() {
                if let Some(gt) = &record.ground_truth {
                    record.fiducials = Some(fiducials_from_ground_truth(gt, &index_map)?);
                    derived += 1;
                }
            }
        }
    }
    write_manifest(&manifest, out)?;
    println!(
        "wrote {} records to {} ({} fiducial sets derived)",
        manifest.len(),
        out.display(),
        derived
    );
    Ok(())
}

fn cmd_synth(
    out: &Path,
    count: usize,
    image_size: usize,
    seed: u64,
    occlusion_rate: f64,
    train_fraction: f64,
) -> CmdResult {
    std::fs::create_dir_all(out).map_err(AlignError::from)?;
    let manifest =
        synthetic::write_dataset(out, count, image_size, seed, occlusion_rate, train_fraction)?;
    println!("wrote {count} synthetic records; manifest at {}", manifest.display());
    Ok(())
}

fn cmd_gallery_build(
    manifest_path: &Path,
    image_root: &Option<PathBuf>,
    out: &Path,
    split: SplitArg,
) -> CmdResult {
    require_input(manifest_path, "manifest")?;
    let manifest = load_manifest(manifest_path)?;
    let root = default_image_root(manifest_path, image_root);
    let indices = split_records(&manifest, split);
    if indices.is_empty() {
        return Err(runtime_error("no records in the selected split"));
    }
    let filtered = DatasetManifest {
        records: indices.iter().map(|&i| manifest.records[i].clone()).collect(),
    };
    let mut report = build_gallery(&filtered, &root, &LbpConfig::default())?;
    // Restore original manifest indices on entries and failures.
    for entry in &mut report.gallery.entries {
        entry.source_index = indices[entry.source_index];
    }
    for failure in &mut report.failures {
        failure.0 = indices[failure.0];
    }
    for (index, message) in &report.failures {
        eprintln!("warning: record {index}: {message}");
    }
    if report.gallery.entries.is_empty() {
        return Err(runtime_error("every record failed; no gallery written"));
    }
    save_gallery(&report.gallery, out)?;
    println!(
        "gallery: {} entries, {} failures -> {}",
        report.gallery.entries.len(),
        report.failures.len(),
        out.display()
    );
    Ok(())
}

fn load_training_samples(
    manifest: &DatasetManifest,
    root: &Path,
) -> Result<Vec<TrainingSample>, CliError> {
    let indices = manifest.split_indices(Split::Train);
    if indices.is_empty() {
        return Err(runtime_error("manifest has no train split"));
    }
    let mut samples = Vec::with_capacity(indices.len());
    for i in indices {
        let record = &manifest.records[i];
        let gt = record.ground_truth.clone().ok_or_else(|| {
            runtime_error(format!("train record {i} has no ground truth"))
        })?;
        samples.push(TrainingSample {
            image: load_image_gray(&root.join(&record.image))?,
            face_box: record.face_box,
            ground_truth: gt,
        });
    }
    Ok(samples)
}

fn cmd_train(
    manifest_path: &Path,
    image_root: &Option<PathBuf>,
    out: &Path,
    trace_path: Option<&Path>,
    config: &CascadeConfig,
) -> CmdResult {
    require_input(manifest_path, "manifest")?;
    let manifest = load_manifest(manifest_path)?;
    let root = default_image_root(manifest_path, image_root);
    let samples = load_training_samples(&manifest, &root)?;
    let index_map = LandmarkIndexMap::default();
    let (model, trace) =
        train_cascade(&samples, InitStrategy::RandomOther, config, &index_map)?;
    save_model(&model, out)?;
    if let Some(path) = trace_path {
        let mut w = BufWriter::new(File::create(path).map_err(AlignError::from)?);
        writeln!(w, "stage,nme").map_err(AlignError::from)?;
        writeln!(w, "0,{}", trace.initial_error).map_err(AlignError::from)?;
        for (t, e) in trace.per_stage_error.iter().enumerate() {
            writeln!(w, "{},{}", t + 1, e).map_err(AlignError::from)?;
        }
    }
    println!(
        "trained {} stages on {} samples; error {:.5} -> {:.5}; model at {}",
        config.stages,
        samples.len(),
        trace.initial_error,
        trace.per_stage_error.last().copied().unwrap_or(trace.initial_error),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_infer(
    manifest_path: &Path,
    image_root: &Option<PathBuf>,
    model_path: &Path,
    gallery_path: &Path,
    out: &Path,
    seed: u64,
    l_texture: usize,
    l_pose: usize,
    zeta: f64,
    zero_timing: bool,
    split: SplitArg,
) -> CmdResult {
    require_input(manifest_path, "manifest")?;
    require_input(model_path, "model")?;
    require_input(gallery_path, "gallery")?;
    let manifest = load_manifest(manifest_path)?;
    let root = default_image_root(manifest_path, image_root);
    let model = load_model(model_path)?;
    let gallery = load_gallery(gallery_path)?;
    let index_map = LandmarkIndexMap::default();
    let variants = pipeline::pose_variant_bank(&gallery, l_pose.max(1))?;
    let config = PipelineConfig {
        l_texture,
        l_pose,
        fusion: FusionConfig {
            zeta,
            ..Default::default()
        },
        seed,
    };

    let indices = split_records(&manifest, split);
    if indices.is_empty() {
        return Err(runtime_error("no records in the selected split"));
    }
    let records: Vec<(usize, &facealign_core::dataset::DatasetRecord)> =
        indices.iter().map(|&i| (i, &manifest.records[i])).collect();
    let outcomes = process_all(
        &records, &root, &model, &gallery, &variants, &index_map, &config,
    );

    let mut results = Vec::new();
    let mut failures = Vec::new();
    let mut pose_skips = 0usize;
    for (index, outcome) in outcomes {
        match outcome {
            Ok(o) => {
                if o.pose_skipped {
                    pose_skips += 1;
                    eprintln!(
                        "warning: record {index}: no fiducials; pose branch skipped"
                    );
                }
                results.push(ResultRecord {
                    id: format!("{index}"),
                    shape: o.shape,
                    occlusion_scores: o.occlusion_scores,
                    fusion: o.fusion,
                    timing_ms: if zero_timing { 0.0 } else { o.timing_ms },
                });
            }
            Err(message) => {
                eprintln!("warning: record {index} failed: {message}");
                failures.push((index, message));
            }
        }
    }
    if results.is_empty() {
        return Err(runtime_error("every record failed"));
    }
    write_results(&results, out)?;
    println!(
        "inferred {} records ({} failed, {} without pose branch) -> {}",
        results.len(),
        failures.len(),
        pose_skips,
        out.display()
    );
    Ok(())
}

fn cmd_evaluate(
    manifest_path: &Path,
    results_path: &Path,
    out_dir: &Path,
    plot_svg: bool,
) -> CmdResult {
    require_input(manifest_path, "manifest")?;
    require_input(results_path, "results")?;
    let manifest = load_manifest(manifest_path)?;
    let results = read_results(results_path)?;
    std::fs::create_dir_all(out_dir).map_err(AlignError::from)?;
    let index_map = LandmarkIndexMap::default();

    let mut cases = Vec::new();
    for r in &results {
        let index: usize = r
            .id
            .parse()
            .map_err(|_| runtime_error(format!("result id '{}' is not a record index", r.id)))?;
        let record = manifest
            .records
            .get(index)
            .ok_or_else(|| runtime_error(format!("result id {index} beyond manifest")))?;
        let gt = record.ground_truth.clone().ok_or_else(|| {
            runtime_error(format!("record {index} has no ground truth to score against"))
        })?;
        cases.push(EvalCase {
            predicted: r.shape.clone(),
            occlusion_scores: r.occlusion_scores.clone(),
            ground_truth: gt,
        });
    }
    let summary = evaluate(&cases, &index_map)?;
    let summary_path = out_dir.join("summary.json");
    std::fs::write(
        &summary_path,
        serde_json::to_string_pretty(&summary).map_err(AlignError::from)?,
    )
    .map_err(AlignError::from)?;
    write_ced_csv(&summary.ced, &out_dir.join("ced.csv"))?;
    write_pr_csv(&summary.pr, &out_dir.join("pr.csv"))?;
    if plot_svg {
        eval::write_svg(&summary.ced, 0.3, "Cumulative error distribution", &out_dir.join("ced.svg"))?;
        let pr_points: Vec<(f64, f64)> =
            summary.pr.iter().map(|p| (p.recall, p.precision)).collect();
        eval::write_svg(&pr_points, 1.0, "Occlusion precision vs recall", &out_dir.join("pr.svg"))?;
    }
    println!("NME: {:.3}%", summary.nme_percent);
    match summary.recall_at_p80 {
        Some(r) => println!("occlusion recall at precision >= 0.80: {:.3}", r),
        None => println!("occlusion recall at precision >= 0.80: not reached"),
    }
    println!("reports in {}", out_dir.display());
    Ok(())
}

fn cmd_init_analyze(
    manifest_path: &Path,
    image_root: &Option<PathBuf>,
    model_path: &Path,
    gallery_path: &Path,
    out_dir: &Path,
    l_texture: usize,
    zetas: &[f64],
) -> CmdResult {
    require_input(manifest_path, "manifest")?;
    require_input(model_path, "model")?;
    require_input(gallery_path, "gallery")?;
    let manifest = load_manifest(manifest_path)?;
    let root = default_image_root(manifest_path, image_root);
    let model = load_model(model_path)?;
    let gallery = load_gallery(gallery_path)?;
    let index_map = LandmarkIndexMap::default();
    std::fs::create_dir_all(out_dir).map_err(AlignError::from)?;

    // rank -> (sum distance, sum NME, count); zeta -> (good, bad).
    let mut per_rank: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
    let mut goodness: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
    let mut scored_images = 0usize;

    for &i in &manifest.split_indices(Split::Test) {
        let record = &manifest.records[i];
        let Some(gt) = &record.ground_truth else {
            continue;
        };
        let ranked = match ranked_texture_runs(record, &root, &model, &gallery, l_texture) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("warning: record {i} failed: {e}");
                continue;
            }
        };
        scored_images += 1;
        for (rank, (candidate, run)) in
            ranked.candidates.iter().zip(ranked.runs.iter()).enumerate()
        {
            let nme = eval::image_nme(&run.shape, gt, &index_map)?;
            let slot = per_rank.entry(rank + 1).or_insert((0.0, 0.0, 0));
            slot.0 += candidate.distance;
            slot.1 += nme;
            slot.2 += 1;
        }
        let checkpoints: Vec<&facealign_core::shapes::AnnotatedShape> =
            ranked.runs.iter().map(|r| &r.checkpoint).collect();
        for &zeta in zetas {
            let config = FusionConfig {
                zeta,
                ..Default::default()
            };
            let good = early_goodness(&checkpoints, record.face_box.diagonal(), &config);
            let slot = goodness.entry(zeta.to_bits()).or_insert((0, 0));
            if good {
                slot.0 += 1;
            } else {
                slot.1 += 1;
            }
        }
    }
    if scored_images == 0 {
        return Err(runtime_error("no scorable test records"));
    }

    let ranks_path = out_dir.join("init_ranks.csv");
    let mut w = BufWriter::new(File::create(&ranks_path).map_err(AlignError::from)?);
    writeln!(w, "rank,mean_distance,mean_nme").map_err(AlignError::from)?;
    for (rank, (d, e, n)) in &per_rank {
        writeln!(w, "{rank},{},{}", d / *n as f64, e / *n as f64).map_err(AlignError::from)?;
    }
    drop(w);

    let goodness_path = out_dir.join("init_goodness.csv");
    let mut w = BufWriter::new(File::create(&goodness_path).map_err(AlignError::from)?);
    writeln!(w, "zeta,good,bad").map_err(AlignError::from)?;
    for (bits, (good, bad)) in &goodness {
        writeln!(w, "{},{good},{bad}", f64::from_bits(*bits)).map_err(AlignError::from)?;
    }
    drop(w);

    println!(
        "analyzed {scored_images} images over {} ranks -> {}, {}",
        per_rank.len(),
        ranks_path.display(),
        goodness_path.display()
    );
    Ok(())
}

fn read_csv_points(path: &Path, x_col: usize, y_col: usize) -> Result<Vec<(f64, f64)>, CliError> {
    let text = std::fs::read_to_string(path).map_err(AlignError::from)?;
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let parse = |i: usize| -> Result<f64, CliError> {
            fields
                .get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| {
                    runtime_error(format!(
                        "{}: line {}: bad field {i}",
                        path.display(),
                        lineno + 1
                    ))
                })
        };
        points.push((parse(x_col)?, parse(y_col)?));
    }
    Ok(points)
}

fn cmd_plot(ced: Option<&Path>, pr: Option<&Path>, out_dir: &Path) -> CmdResult {
    if ced.is_none() && pr.is_none() {
        return Err(usage_error("nothing to plot: pass --ced and/or --pr"));
    }
    std::fs::create_dir_all(out_dir).map_err(AlignError::from)?;
    if let Some(path) = ced {
        require_input(path, "CED CSV")?;
        let points = read_csv_points(path, 0, 1)?;
        let x_max = points.iter().map(|(x, _)| *x).fold(0.0f64, f64::max);
        let svg = curve_svg(&points, x_max.max(1e-12), "Cumulative error distribution");
        std::fs::write(out_dir.join("ced.svg"), svg).map_err(AlignError::from)?;
        println!("wrote {}", out_dir.join("ced.svg").display());
    }
    if let Some(path) = pr {
        require_input(path, "PR CSV")?;
        let points = read_csv_points(path, 2, 1)?;
        let svg = curve_svg(&points, 1.0, "Occlusion precision vs recall");
        std::fs::write(out_dir.join("pr.svg"), svg).map_err(AlignError::from)?;
        println!("wrote {}", out_dir.join("pr.svg").display());
    }
    Ok(())
}
