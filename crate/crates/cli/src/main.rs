//! Command-line interface: `train`, `detect`, `register`, `eval`, and
//! `phantom` subcommands wiring the toolkit into reproducible workflows.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vkr_core::config::{load_config, parse_config, to_toml_string, ToolkitConfig};
use vkr_core::data::{load_image_gray, load_manifest, save_map_png, to_working, write_phantom_dataset};
use vkr_core::geometry::{nms_extract, render_heatmap};
use vkr_core::matching::{
    register_pair, register_pair_with_matches, top_k, HomographyFile, MatchFile, RegisterConfig,
};
use vkr_core::metrics::{
    aggregate_with, load_pairs_manifest, pair_errors, render_overlay, report, AucStatistic,
    EvalStatus, OverlayJob, PairEvaluation, ReportConfig,
};
use vkr_core::network::{load_checkpoint, CHECKPOINT_FORMAT};
use vkr_core::trainer::{prepare_items, train};
use vkr_core::types::{FrameSize, Homography, KeypointAnnotation, KeypointSet};
use vkr_core::{Error, Validate, Violation};

#[derive(Parser)]
#[command(name = "vkr", version, about = "Vascular keypoint registration toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// RNG seed for all stochastic components.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Pin deterministic execution. All kernels are deterministic by
    /// construction; this flag documents reproducible invocations.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a dataset manifest.
    Train {
        /// TOML config (defaults to the full-scale preset).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dotted-path config overrides, e.g. `trainer.max_epochs=2`.
        #[arg(long = "override", value_name = "PATH=VALUE")]
        overrides: Vec<String>,
        /// Training manifest (JSON).
        #[arg(long)]
        manifest: PathBuf,
        /// Optional validation manifest (best-repeatability checkpoint).
        #[arg(long)]
        val_manifest: Option<PathBuf>,
        /// Run directory for checkpoints, logs and the resolved config.
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Detect keypoints on images with a trained checkpoint.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image files.
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[arg(long, default_value = "detections")]
        out: PathBuf,
        /// NMS radius in working-resolution pixels.
        #[arg(long, default_value_t = 10.0)]
        nms_radius: f64,
        #[arg(long, default_value_t = 0.5)]
        nms_threshold: f64,
        /// Also write the keypoint-prompted segmentation map.
        #[arg(long)]
        segmentation: bool,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Register image pairs: matches, homographies, red/green overlays.
    Register {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Pairs manifest (JSON `{"pairs": [{"moving": .., "fixed": ..}]}`).
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value = "registration")]
        out: PathBuf,
        /// Directory of externally produced match files (`<pair>.json`),
        /// bypassing nnBF matching.
        #[arg(long)]
        import_matches: Option<PathBuf>,
        #[arg(long, default_value_t = 10.0)]
        nms_radius: f64,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Evaluate alignment accuracy against ground-truth keypoint pairs.
    Eval {
        /// Ground-truth pairs manifest (with points_m / points_f).
        #[arg(long)]
        pairs: PathBuf,
        /// Directory of homography files (`<pair>.json`) from `register`.
        #[arg(long, conflicts_with = "checkpoint")]
        homographies: Option<PathBuf>,
        /// Checkpoint to register the pairs with (instead of files).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "evaluation")]
        out: PathBuf,
        /// AUC threshold in pixels.
        #[arg(long, default_value_t = 25)]
        auc_threshold: u32,
        /// Per-pair statistic: max (benchmark convention) or mean.
        #[arg(long, default_value = "max")]
        statistic: String,
        #[arg(long, default_value = "dataset")]
        dataset_name: String,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Generate a synthetic vessel-phantom dataset.
    Phantom {
        #[arg(long, default_value = "phantom_data")]
        out: PathBuf,
        /// Number of distinct geometries (two styles each).
        #[arg(long, default_value_t = 32)]
        geometries: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
        /// Label every k-th geometry (0 = no labels).
        #[arg(long, default_value_t = 2)]
        label_every: usize,
        #[command(flatten)]
        common: CommonOpts,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) | Error::Invalid(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn run(cli: Cli) -> vkr_core::Result<()> {
    match cli.command {
        Command::Train {
            config,
            overrides,
            manifest,
            val_manifest,
            out,
            common,
        } => cmd_train(config.as_deref(), &overrides, &manifest, val_manifest.as_deref(), &out, &common),
        Command::Detect {
            checkpoint,
            images,
            out,
            nms_radius,
            nms_threshold,
            segmentation,
            common: _,
        } => cmd_detect(&checkpoint, &images, &out, nms_radius, nms_threshold, segmentation),
        Command::Register {
            checkpoint,
            pairs,
            out,
            import_matches,
            nms_radius,
            common,
        } => cmd_register(&checkpoint, &pairs, &out, import_matches.as_deref(), nms_radius, &common),
        Command::Eval {
            pairs,
            homographies,
            checkpoint,
            out,
            auc_threshold,
            statistic,
            dataset_name,
            common,
        } => cmd_eval(
            &pairs,
            homographies.as_deref(),
            checkpoint.as_deref(),
            &out,
            auc_threshold,
            &statistic,
            &dataset_name,
            &common,
        ),
        Command::Phantom {
            out,
            geometries,
            size,
            label_every,
            common,
        } => {
            let manifest = write_phantom_dataset(
                &out,
                geometries,
                FrameSize::new(size, size),
                common.seed,
                label_every,
            )?;
            println!(
                "wrote {} ({geometries} geometries, 2 styles each)",
                manifest.display()
            );
            Ok(())
        }
    }
}

fn resolve_config(
    path: Option<&Path>,
    overrides: &[String],
    seed: u64,
) -> vkr_core::Result<ToolkitConfig> {
    let mut cfg = match path {
        Some(p) => load_config(p, overrides)?,
        None => {
            let text = to_toml_string(&ToolkitConfig::full())?;
            parse_config(&text, overrides)?
        }
    };
    cfg.trainer.seed = seed;
    cfg.trainer.sampler.seed = seed;
    cfg.register.seed = seed;
    Ok(cfg)
}

fn cmd_train(
    config: Option<&Path>,
    overrides: &[String],
    manifest: &Path,
    val_manifest: Option<&Path>,
    out: &Path,
    common: &CommonOpts,
) -> vkr_core::Result<()> {
    let cfg = resolve_config(config, overrides, common.seed)?;
    cfg.validate().map_err(Error::Invalid)?;
    let dataset = load_manifest(manifest)?;
    if dataset.labeled_count() == 0 {
        return Err(Error::Invalid(Violation {
            path: "manifest".into(),
            constraint: "the supervised detection loss (det_sup) requires at least one labeled image"
                .into(),
        }));
    }
    let working = cfg.network.frame();
    let items = prepare_items(&dataset, working)?;
    let val_items = match val_manifest {
        Some(p) => prepare_items(&load_manifest(p)?, working)?,
        None => Vec::new(),
    };

    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("resolved_config.toml"), to_toml_string(&cfg)?)?;
    std::fs::write(
        out.join("version.txt"),
        format!(
            "vkr {} (checkpoint format {CHECKPOINT_FORMAT})\n",
            env!("CARGO_PKG_VERSION")
        ),
    )?;

    let (_state, train_report) =
        train(cfg.network.clone(), &items, &val_items, &cfg.trainer, Some(out))?;
    std::fs::write(
        out.join("train_report.json"),
        serde_json::to_string_pretty(&train_report)?,
    )?;
    println!(
        "trained {} epochs ({} steps), {} labels added by expansion; checkpoints in {}",
        train_report.epochs_run,
        train_report.steps,
        train_report.expansion_added,
        out.join("checkpoints").display()
    );
    Ok(())
}

fn cmd_detect(
    checkpoint: &Path,
    images: &[PathBuf],
    out: &Path,
    nms_radius: f64,
    nms_threshold: f64,
    segmentation: bool,
) -> vkr_core::Result<()> {
    let state = load_checkpoint(checkpoint)?;
    let model = &state.model;
    std::fs::create_dir_all(out)?;
    let working = model.config.frame();

    for path in images {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .to_string();
        let native = load_image_gray(path)?;
        let (img, _, scale) = to_working(&native, None, working);

        // Candidate feedback pass, as in training.
        let empty = KeypointSet::empty(working);
        let (pyr0, _) = model.encode(&img, &empty)?;
        let p0 = model.detect(&pyr0)?;
        let candidates = top_k(nms_extract(&p0, nms_threshold, nms_radius)?, 1024);
        let (pyr, _) = model.encode(&img, &candidates)?;
        let p = model.detect(&pyr)?;
        let keypoints = nms_extract(&p, nms_threshold, nms_radius)?;

        // Keypoints at native resolution.
        let native_points: Vec<[f64; 2]> = keypoints
            .coords
            .iter()
            .map(|c| {
                let (x, y) = scale.invert(c[0], c[1]);
                [x, y]
            })
            .collect();
        let ann = KeypointAnnotation {
            image: stem.clone(),
            points: native_points,
        };
        std::fs::write(
            out.join(format!("{stem}_keypoints.json")),
            serde_json::to_string_pretty(&ann)?,
        )?;
        save_map_png(&out.join(format!("{stem}_probability.png")), &p)?;
        if segmentation {
            let heat = render_heatmap(&keypoints, 2.0, 13, working)?;
            let seg = model.segment(&img, &heat)?;
            save_map_png(&out.join(format!("{stem}_segmentation.png")), &seg)?;
        }
        println!("{stem}: {} keypoints", keypoints.len());
    }
    Ok(())
}

fn cmd_register(
    checkpoint: &Path,
    pairs_path: &Path,
    out: &Path,
    import_matches: Option<&Path>,
    nms_radius: f64,
    common: &CommonOpts,
) -> vkr_core::Result<()> {
    let state = load_checkpoint(checkpoint)?;
    let model = &state.model;
    let manifest = load_pairs_manifest(pairs_path)?;
    std::fs::create_dir_all(out)?;
    let base = pairs_path.parent().unwrap_or(Path::new("."));
    let cfg = RegisterConfig {
        nms_radius,
        seed: common.seed,
        ..RegisterConfig::default()
    };

    let mut failures: Vec<String> = Vec::new();
    for spec in &manifest.pairs {
        let id = spec.id();
        let moving = load_image_gray(&base.join(&spec.moving))?;
        let fixed = load_image_gray(&base.join(&spec.fixed))?;

        let result = match import_matches {
            None => register_pair(&moving, &fixed, model, &cfg),
            Some(dir) => {
                let mf_path = dir.join(format!("{id}.json"));
                let mf: MatchFile = serde_json::from_str(&std::fs::read_to_string(&mf_path)?)?;
                register_pair_with_matches(&moving, &fixed, model, &cfg, &mf.matches)
            }
        };
        match result {
            Ok((h, matches, diags)) => {
                let hf = HomographyFile::new(&id, &h);
                std::fs::write(
                    out.join(format!("{id}.json")),
                    serde_json::to_string_pretty(&hf)?,
                )?;
                let mf = MatchFile::from_result(&id, &matches);
                std::fs::write(
                    out.join(format!("{id}_matches.json")),
                    serde_json::to_string_pretty(&mf)?,
                )?;
                let overlay = render_overlay(&fixed, &moving, &h)?;
                overlay
                    .save(out.join(format!("{id}_overlay.png")))
                    .map_err(Error::Image)?;
                println!(
                    "{id}: {} matches, {} inliers, median residual {:.2} px",
                    diags.n_matches, diags.n_inliers, diags.median_residual
                );
            }
            Err(err) => {
                eprintln!("{id}: registration failed: {err}");
                failures.push(id);
            }
        }
    }
    let summary = serde_json::json!({
        "pairs": manifest.pairs.len(),
        "failed": failures,
    });
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    if !failures.is_empty() {
        println!(
            "{} of {} pairs failed; see summary.json",
            failures.len(),
            manifest.pairs.len()
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    pairs_path: &Path,
    homographies: Option<&Path>,
    checkpoint: Option<&Path>,
    out: &Path,
    auc_threshold: u32,
    statistic: &str,
    dataset_name: &str,
    common: &CommonOpts,
) -> vkr_core::Result<()> {
    let manifest = load_pairs_manifest(pairs_path)?;
    if manifest.pairs.is_empty() {
        return Err(Error::Metrics("eval: empty pairs manifest".into()));
    }
    let statistic = match statistic {
        "max" => AucStatistic::Max,
        "mean" => AucStatistic::Mean,
        other => {
            return Err(Error::Config(format!(
                "statistic must be `max` or `mean`, got `{other}`"
            )))
        }
    };
    let base = pairs_path.parent().unwrap_or(Path::new("."));
    let model_state = match checkpoint {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    if model_state.is_none() && homographies.is_none() {
        return Err(Error::Config("eval needs --homographies or --checkpoint".into()));
    }

    let mut evaluations = Vec::new();
    let mut overlays = Vec::new();
    for spec in &manifest.pairs {
        let id = spec.id();
        let (Some(pm), Some(pf)) = (&spec.points_m, &spec.points_f) else {
            return Err(Error::Metrics(format!(
                "eval: pair `{id}` lacks ground-truth points"
            )));
        };
        let moving = load_image_gray(&base.join(&spec.moving))?;
        let fixed = load_image_gray(&base.join(&spec.fixed))?;
        let frame_m = FrameSize::new(moving.dim().0, moving.dim().1);
        let frame_f = FrameSize::new(fixed.dim().0, fixed.dim().1);
        let k_m = KeypointSet::from_points(pm.clone(), frame_m).map_err(Error::Invalid)?;
        let k_f = KeypointSet::from_points(pf.clone(), frame_f).map_err(Error::Invalid)?;

        let homography: Option<Homography> = match (&model_state, homographies) {
            (Some(state), _) => {
                let cfg = RegisterConfig {
                    seed: common.seed,
                    ..RegisterConfig::default()
                };
                match register_pair(&moving, &fixed, &state.model, &cfg) {
                    Ok((h, _, _)) => Some(h),
                    Err(err) => {
                        eprintln!("{id}: registration failed: {err}");
                        None
                    }
                }
            }
            (None, Some(dir)) => {
                let path = dir.join(format!("{id}.json"));
                match std::fs::read_to_string(&path) {
                    Ok(text) => {
                        let hf: HomographyFile = serde_json::from_str(&text)?;
                        Some(hf.to_homography()?)
                    }
                    Err(_) => {
                        eprintln!("{id}: missing homography file; counted as failure");
                        None
                    }
                }
            }
            (None, None) => unreachable!(),
        };

        match homography {
            Some(h) => {
                let errors = pair_errors(&h, &k_m, &k_f)?;
                evaluations.push(PairEvaluation {
                    pair: id.clone(),
                    errors,
                    status: EvalStatus::Evaluated,
                });
                overlays.push(OverlayJob {
                    pair: id,
                    fixed,
                    moving,
                    homography: h,
                });
            }
            None => evaluations.push(PairEvaluation::failed(id)),
        }
    }

    let report_cfg = ReportConfig {
        out_dir: out.to_path_buf(),
        dataset_name: dataset_name.to_string(),
        auc_threshold,
        statistic,
    };
    let paths = report(&evaluations, &overlays, &report_cfg)?;
    let agg = aggregate_with(&evaluations, auc_threshold, statistic)?;
    println!(
        "AUC@{} = {:.3}  mMAE = {}  mMEE = {}  ({} pairs, {} failed)",
        auc_threshold,
        agg.auc,
        agg.mmae.map_or("n/a".into(), |v| format!("{v:.2}")),
        agg.mmee.map_or("n/a".into(), |v| format!("{v:.2}")),
        agg.n_pairs,
        agg.n_failed
    );
    println!("report: {}", paths.table.display());
    Ok(())
}
