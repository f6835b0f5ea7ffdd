//! Alignment-accuracy evaluation: per-pair keypoint transfer errors and the
//! mMAE / mMEE / AUC aggregates, plus report artifacts (table, curve CSV,
//! red/green overlays).

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Validate, Violation};
use crate::geometry::warp_image;
use crate::types::{FrameSize, Homography, KeypointSet};

/// Outcome status of one evaluated pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalStatus {
    Evaluated,
    RegistrationFailed,
}

/// Per-pair evaluation record; failed registrations carry no errors and
/// count as failures at every threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEvaluation {
    pub pair: String,
    /// Per-keypoint L2 transfer errors at original resolution (pixels).
    pub errors: Vec<f64>,
    pub status: EvalStatus,
}

impl PairEvaluation {
    pub fn failed(pair: impl Into<String>) -> Self {
        Self {
            pair: pair.into(),
            errors: Vec::new(),
            status: EvalStatus::RegistrationFailed,
        }
    }
}

impl Validate for PairEvaluation {
    fn validate(&self) -> std::result::Result<(), Violation> {
        if self.status == EvalStatus::RegistrationFailed && !self.errors.is_empty() {
            return Err(Violation {
                path: "errors".into(),
                constraint: "registration_failed pairs carry empty errors".into(),
            });
        }
        for (i, &e) in self.errors.iter().enumerate() {
            if !(e >= 0.0) {
                return Err(Violation {
                    path: format!("errors[{i}]"),
                    constraint: "nonnegative".into(),
                });
            }
        }
        Ok(())
    }
}

/// Per-keypoint transfer errors `‖M(K_m_i) − K_f_i‖₂` for index-corresponding
/// ground-truth sets; degenerate transforms yield infinite error.
pub fn pair_errors(m: &Homography, k_m: &KeypointSet, k_f: &KeypointSet) -> Result<Vec<f64>> {
    if k_m.len() != k_f.len() {
        return Err(Error::Metrics(format!(
            "pair_errors: length mismatch ({} vs {})",
            k_m.len(),
            k_f.len()
        )));
    }
    Ok(k_m
        .coords
        .iter()
        .zip(&k_f.coords)
        .map(|(pm, pf)| match m.apply(pm[0], pm[1]) {
            Some((x, y)) => ((x - pf[0]).powi(2) + (y - pf[1]).powi(2)).sqrt(),
            None => f64::INFINITY,
        })
        .collect())
}

/// Per-pair statistic driving the success curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AucStatistic {
    /// Maximum per-pair error (benchmark convention, default).
    #[default]
    Max,
    /// Mean per-pair error.
    Mean,
}

/// Aggregated accuracy over an evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// Mean of per-pair maximum errors over evaluated pairs (`None` when
    /// every pair failed).
    pub mmae: Option<f64>,
    /// Mean of per-pair median errors over evaluated pairs.
    pub mmee: Option<f64>,
    /// Normalized area under the success curve over thresholds `1..=T`;
    /// failed pairs count as failures at every threshold.
    pub auc: f64,
    pub threshold: u32,
    pub statistic: AucStatistic,
    pub n_pairs: usize,
    pub n_failed: usize,
}

fn median_of(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn pair_statistic(errors: &[f64], statistic: AucStatistic) -> f64 {
    match statistic {
        AucStatistic::Max => errors.iter().cloned().fold(0.0, f64::max),
        AucStatistic::Mean => errors.iter().sum::<f64>() / errors.len() as f64,
    }
}

/// mMAE, mMEE and AUC at the default 25-px threshold with the max-error
/// statistic.
pub fn aggregate(evaluations: &[PairEvaluation], threshold: u32) -> Result<Aggregate> {
    aggregate_with(evaluations, threshold, AucStatistic::Max)
}

pub fn aggregate_with(
    evaluations: &[PairEvaluation],
    threshold: u32,
    statistic: AucStatistic,
) -> Result<Aggregate> {
    if evaluations.is_empty() {
        return Err(Error::Metrics("aggregate: empty evaluation set".into()));
    }
    if threshold == 0 {
        return Err(Error::Metrics("aggregate: threshold must be positive".into()));
    }
    for e in evaluations {
        if e.status == EvalStatus::Evaluated && e.errors.is_empty() {
            return Err(Error::Metrics(format!(
                "aggregate: pair `{}` evaluated with no errors",
                e.pair
            )));
        }
    }
    let evaluated: Vec<&PairEvaluation> = evaluations
        .iter()
        .filter(|e| e.status == EvalStatus::Evaluated)
        .collect();
    let n_failed = evaluations.len() - evaluated.len();

    let (mmae, mmee) = if evaluated.is_empty() {
        (None, None)
    } else {
        let mut max_sum = 0.0;
        let mut med_sum = 0.0;
        for e in &evaluated {
            let mut sorted = e.errors.clone();
            sorted.sort_by(f64::total_cmp);
            max_sum += *sorted.last().unwrap();
            med_sum += median_of(&sorted);
        }
        let n = evaluated.len() as f64;
        (Some(max_sum / n), Some(med_sum / n))
    };

    let curve = success_curve(evaluations, threshold, statistic);
    let auc = curve.iter().map(|&(_, s)| s).sum::<f64>() / threshold as f64;

    Ok(Aggregate {
        mmae,
        mmee,
        auc,
        threshold,
        statistic,
        n_pairs: evaluations.len(),
        n_failed,
    })
}

/// Success rate at each integer threshold `1..=T`: the fraction of all
/// pairs whose per-pair statistic is ≤ t (failed pairs never succeed).
pub fn success_curve(
    evaluations: &[PairEvaluation],
    threshold: u32,
    statistic: AucStatistic,
) -> Vec<(u32, f64)> {
    let n = evaluations.len() as f64;
    let stats: Vec<Option<f64>> = evaluations
        .iter()
        .map(|e| match e.status {
            EvalStatus::RegistrationFailed => None,
            EvalStatus::Evaluated => Some(pair_statistic(&e.errors, statistic)),
        })
        .collect();
    (1..=threshold)
        .map(|t| {
            let ok = stats
                .iter()
                .filter(|s| matches!(s, Some(v) if *v <= t as f64))
                .count();
            (t, ok as f64 / n)
        })
        .collect()
}

/// Report configuration.
#[derive(Debug, Clone)]
pub struct ReportConfig {
    pub out_dir: PathBuf,
    pub dataset_name: String,
    pub auc_threshold: u32,
    pub statistic: AucStatistic,
}

/// Overlay job: render the moving image under `homography` into the red
/// channel against the fixed image in green.
pub struct OverlayJob {
    pub pair: String,
    pub fixed: Array2<f64>,
    pub moving: Array2<f64>,
    pub homography: Homography,
}

/// Written report artifact paths.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportPaths {
    pub table: PathBuf,
    pub json: PathBuf,
    pub curve: PathBuf,
    pub overlays: Vec<PathBuf>,
}

/// Emits the metrics table (text), the aggregate JSON, the cumulative
/// error-curve CSV, and alignment overlays.
pub fn report(
    evaluations: &[PairEvaluation],
    overlays: &[OverlayJob],
    cfg: &ReportConfig,
) -> Result<ReportPaths> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let agg = aggregate_with(evaluations, cfg.auc_threshold, cfg.statistic)?;

    let fmt = |v: Option<f64>| match v {
        Some(x) => format!("{x:8.3}"),
        None => format!("{:>8}", "n/a"),
    };
    let mut table = String::new();
    table.push_str(&format!(
        "{:<16} {:>8} {:>8} {:>8} {:>6} {:>7}\n",
        "dataset",
        "mMAE",
        "mMEE",
        format!("AUC@{}", agg.threshold),
        "pairs",
        "failed"
    ));
    table.push_str(&format!(
        "{:<16} {} {} {:8.3} {:>6} {:>7}\n",
        cfg.dataset_name,
        fmt(agg.mmae),
        fmt(agg.mmee),
        agg.auc,
        agg.n_pairs,
        agg.n_failed
    ));
    let table_path = cfg.out_dir.join("metrics_table.txt");
    std::fs::write(&table_path, &table)?;

    let json_path = cfg.out_dir.join("metrics.json");
    let per_pair: Vec<&PairEvaluation> = evaluations.iter().collect();
    let json = serde_json::json!({
        "dataset": cfg.dataset_name,
        "aggregate": agg,
        "pairs": per_pair,
    });
    std::fs::write(&json_path, serde_json::to_string_pretty(&json)?)?;

    let curve = success_curve(evaluations, cfg.auc_threshold, cfg.statistic);
    let mut csv = String::from("threshold_px,success_rate\n");
    for (t, s) in &curve {
        csv.push_str(&format!("{t},{s}\n"));
    }
    let curve_path = cfg.out_dir.join("error_curve.csv");
    std::fs::write(&curve_path, csv)?;

    let mut overlay_paths = Vec::new();
    for job in overlays {
        let path = cfg.out_dir.join(format!("{}_overlay.png", job.pair));
        let img = render_overlay(&job.fixed, &job.moving, &job.homography)?;
        img.save(&path)?;
        overlay_paths.push(path);
    }

    Ok(ReportPaths {
        table: table_path,
        json: json_path,
        curve: curve_path,
        overlays: overlay_paths,
    })
}

/// Red/green alignment overlay: red = moving image warped by `m`,
/// green = fixed image.
pub fn render_overlay(
    fixed: &Array2<f64>,
    moving: &Array2<f64>,
    m: &Homography,
) -> Result<image::RgbImage> {
    let (h, w) = fixed.dim();
    let warped = warp_image(moving, m, FrameSize::new(h, w))?;
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let r = (warped[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        let g = (fixed[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        *px = image::Rgb([r, g, 0]);
    }
    Ok(out)
}

// ---- ground-truth pair manifests ----

/// One image pair; ground-truth keypoint lists are index-corresponding and
/// optional (registration-only manifests omit them).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSpec {
    pub moving: PathBuf,
    pub fixed: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points_m: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points_f: Option<Vec<[f64; 2]>>,
}

impl PairSpec {
    /// Stable pair id derived from the two file stems.
    pub fn id(&self) -> String {
        let stem = |p: &Path| {
            p.file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("img")
                .to_string()
        };
        format!("{}__{}", stem(&self.moving), stem(&self.fixed))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairsManifest {
    pub pairs: Vec<PairSpec>,
}

pub fn load_pairs_manifest(path: &Path) -> Result<PairsManifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Metrics(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Metrics(format!("{}: malformed pairs manifest: {e}", path.display())))
}

/// Published benchmark figures for a full-scale model (documentation
/// reference values for the harness layout; not acceptance targets).
pub mod reference {
    /// (dataset, matcher, mMAE, mMEE, AUC@25).
    pub const BENCHMARK_FIGURES: &[(&str, &str, f64, f64, f64)] = &[
        ("FIRE", "nnBF", 14.2, 4.97, 0.761),
        ("FIRE", "LightGlue (imported)", 13.9, 4.42, 0.778),
        ("CF-FA", "nnBF", 18.4, 2.99, 0.808),
        ("CF-FA", "LightGlue (imported)", 16.3, 2.01, 0.858),
        ("OCT-SLO", "nnBF", 20.8, 14.6, 0.788),
        ("OCT-SLO", "LightGlue (imported)", 19.9, 12.8, 0.818),
    ];
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Provenance;

    fn eval(pair: &str, errors: Vec<f64>) -> PairEvaluation {
        PairEvaluation {
            pair: pair.into(),
            errors,
            status: EvalStatus::Evaluated,
        }
    }

    #[test]
    fn pair_errors_exact_homography_gives_zero() {
        let h = Homography::new(
            [[1.1, 0.05, 4.0], [0.0, 0.92, -2.0], [1e-4, 0.0, 1.0]],
            Provenance::Sampled,
        )
        .unwrap();
        let frame = FrameSize::new(512, 512);
        let k_m =
            KeypointSet::from_points(vec![[10.0, 20.0], [100.0, 50.0], [200.0, 300.0]], frame)
                .unwrap();
        let mapped: Vec<[f64; 2]> = k_m
            .coords
            .iter()
            .map(|c| {
                let (x, y) = h.apply(c[0], c[1]).unwrap();
                [x, y]
            })
            .collect();
        let k_f = KeypointSet::from_points(mapped, frame).unwrap();
        let errors = pair_errors(&h, &k_m, &k_f).unwrap();
        assert!(errors.iter().all(|&e| e < 1e-9));
    }

    #[test]
    fn pair_errors_identity_translation_is_345() {
        let frame = FrameSize::new(64, 64);
        let k_m = KeypointSet::from_points(vec![[10.0, 10.0], [20.0, 30.0]], frame).unwrap();
        let k_f = KeypointSet::from_points(vec![[13.0, 14.0], [23.0, 34.0]], frame).unwrap();
        let errors = pair_errors(&Homography::identity(), &k_m, &k_f).unwrap();
        for e in errors {
            assert!((e - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pair_errors_matches_matrix_oracle() {
        let m = Homography::new(
            [[0.9, -0.1, 7.0], [0.12, 1.05, -3.0], [2e-4, 1e-4, 1.0]],
            Provenance::Estimated,
        )
        .unwrap();
        let frame = FrameSize::new(400, 400);
        let pts: Vec<[f64; 2]> = (0..6).map(|i| [10.0 + 30.0 * i as f64, 15.0 + 20.0 * i as f64]).collect();
        let k_m = KeypointSet::from_points(pts.clone(), frame).unwrap();
        let k_f =
            KeypointSet::from_points(pts.iter().map(|p| [p[0] + 1.0, p[1]]).collect(), frame)
                .unwrap();
        let errors = pair_errors(&m, &k_m, &k_f).unwrap();
        for (i, p) in pts.iter().enumerate() {
            let mm = &m.matrix;
            let w = mm[2][0] * p[0] + mm[2][1] * p[1] + mm[2][2];
            let x = (mm[0][0] * p[0] + mm[0][1] * p[1] + mm[0][2]) / w;
            let y = (mm[1][0] * p[0] + mm[1][1] * p[1] + mm[1][2]) / w;
            let expect = ((x - (p[0] + 1.0)).powi(2) + (y - p[1]).powi(2)).sqrt();
            assert!((errors[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn pair_errors_rejects_length_mismatch() {
        let frame = FrameSize::new(64, 64);
        let a = KeypointSet::from_points(vec![[1.0, 1.0]], frame).unwrap();
        let b = KeypointSet::from_points(vec![[1.0, 1.0], [2.0, 2.0]], frame).unwrap();
        assert!(pair_errors(&Homography::identity(), &a, &b).is_err());
    }

    #[test]
    fn aggregate_all_zero_errors() {
        let evals = vec![eval("a", vec![0.0, 0.0]), eval("b", vec![0.0])];
        let agg = aggregate(&evals, 25).unwrap();
        assert_eq!(agg.auc, 1.0);
        assert_eq!(agg.mmae, Some(0.0));
        assert_eq!(agg.mmee, Some(0.0));
    }

    #[test]
    fn aggregate_all_above_threshold() {
        let evals = vec![eval("a", vec![30.0]), eval("b", vec![40.0, 35.0])];
        let agg = aggregate(&evals, 25).unwrap();
        assert_eq!(agg.auc, 0.0);
    }

    #[test]
    fn aggregate_hand_computed_step_curve() {
        // Max errors {10, 40}: success = 0.5 for 10 ≤ t ≤ 25 →
        // AUC = 0.5·(25−9)/25 = 0.32 exactly.
        let evals = vec![eval("a", vec![2.0, 10.0]), eval("b", vec![40.0])];
        let agg = aggregate(&evals, 25).unwrap();
        assert_eq!(agg.auc, 0.32);
    }

    #[test]
    fn aggregate_handles_failures() {
        let evals = vec![
            eval("a", vec![5.0, 1.0]),
            PairEvaluation::failed("b"),
        ];
        let agg = aggregate(&evals, 25).unwrap();
        assert_eq!(agg.n_failed, 1);
        // Failed pair counts against AUC at every threshold.
        assert_eq!(agg.auc, 0.5 * (21.0 / 25.0));
        // Means exclude the failure.
        assert_eq!(agg.mmae, Some(5.0));
        assert_eq!(agg.mmee, Some(3.0));
    }

    #[test]
    fn aggregate_mmee_le_mmae() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let evals: Vec<PairEvaluation> = (0..5)
                .map(|i| {
                    let n = rng.random_range(1..10);
                    eval(
                        &format!("p{i}"),
                        (0..n).map(|_| rng.random_range(0.0..60.0)).collect(),
                    )
                })
                .collect();
            let agg = aggregate(&evals, 25).unwrap();
            assert!(agg.mmee.unwrap() <= agg.mmae.unwrap() + 1e-12);
        }
    }

    #[test]
    fn aggregate_rejects_empty() {
        assert!(aggregate(&[], 25).is_err());
    }

    #[test]
    fn auc_monotone_in_errors() {
        let base = vec![eval("a", vec![10.0]), eval("b", vec![20.0])];
        let worse = vec![eval("a", vec![10.0]), eval("b", vec![24.0])];
        let a = aggregate(&base, 25).unwrap().auc;
        let b = aggregate(&worse, 25).unwrap().auc;
        assert!(b <= a);
    }

    #[test]
    fn report_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let evals = vec![eval("p0", vec![1.0, 2.0]), eval("p1", vec![30.0])];
        let fixed = Array2::from_elem((32, 32), 0.5);
        let moving = Array2::from_elem((32, 32), 0.25);
        let jobs = vec![
            OverlayJob {
                pair: "p0".into(),
                fixed: fixed.clone(),
                moving: moving.clone(),
                homography: Homography::identity(),
            },
            OverlayJob {
                pair: "p1".into(),
                fixed,
                moving,
                homography: Homography::translation(2.0, 0.0),
            },
        ];
        let cfg = ReportConfig {
            out_dir: dir.path().join("report"),
            dataset_name: "phantom".into(),
            auc_threshold: 25,
            statistic: AucStatistic::Max,
        };
        let paths = report(&evals, &jobs, &cfg).unwrap();
        assert!(paths.table.exists());
        assert!(paths.json.exists());
        assert!(paths.curve.exists());
        assert_eq!(paths.overlays.len(), 2);
        let table = std::fs::read_to_string(&paths.table).unwrap();
        assert!(table.contains("phantom"));
        let curve = std::fs::read_to_string(&paths.curve).unwrap();
        assert_eq!(curve.lines().count(), 26); // header + 25 thresholds
    }

    #[test]
    fn pair_spec_id_from_stems() {
        let spec = PairSpec {
            moving: PathBuf::from("data/geo001_b.png"),
            fixed: PathBuf::from("data/geo001_a.png"),
            points_m: None,
            points_f: None,
        };
        assert_eq!(spec.id(), "geo001_b__geo001_a");
    }
}
