//! Descriptor matching and robust homography estimation between an image
//! pair: nearest-neighbor brute-force matching with ratio/mutual checks,
//! least-median-of-squares model fitting, and the full registration path
//! from two images to an original-resolution homography.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{to_working, ScaleRecord};
use crate::error::{Error, Result};
use crate::geometry::{dlt_homography, nms_extract};
use crate::network::Model;
use crate::types::{FrameSize, Homography, KeypointSet, Provenance};

/// One descriptor match.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub index_a: usize,
    pub index_b: usize,
    pub distance: f64,
}

/// Matching output; `ratio_test_applied` is false when side B had fewer
/// than two keypoints (test skipped, flagged).
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub matches: Vec<Match>,
    pub ratio_test_applied: bool,
}

/// Nearest-neighbor brute-force matching on unit-norm descriptor rows.
///
/// Keeps a→b pairs whose nearest/second-nearest L2 ratio is below `ratio`
/// and, when `mutual` is set, where `a` is also `b`'s nearest.
pub fn nnbf_match(
    desc_a: &Array2<f64>,
    desc_b: &Array2<f64>,
    ratio: f64,
    mutual: bool,
) -> Result<MatchResult> {
    let (na, da) = desc_a.dim();
    let (nb, db) = desc_b.dim();
    if na == 0 || nb == 0 {
        return Err(Error::Matching("nnbf_match: empty keypoint set".into()));
    }
    if da != db {
        return Err(Error::Matching("nnbf_match: descriptor dims differ".into()));
    }
    let ratio_test_applied = nb >= 2;

    // Unit-norm rows: d² = 2 − 2·cos, computed via the Gram matrix.
    let gram = desc_a.dot(&desc_b.t());
    let dist2 = |i: usize, j: usize| (2.0 - 2.0 * gram[[i, j]]).max(0.0);

    // Nearest b per a (and second nearest for the ratio test).
    let mut nearest_b = vec![(0usize, f64::INFINITY, f64::INFINITY); na];
    for i in 0..na {
        let mut best = (0usize, f64::INFINITY);
        let mut second = f64::INFINITY;
        for j in 0..nb {
            let d = dist2(i, j);
            if d < best.1 {
                second = best.1;
                best = (j, d);
            } else if d < second {
                second = d;
            }
        }
        nearest_b[i] = (best.0, best.1, second);
    }
    // Nearest a per b for the mutual check.
    let nearest_a: Vec<usize> = if mutual {
        (0..nb)
            .map(|j| {
                let mut best = (0usize, f64::INFINITY);
                for i in 0..na {
                    let d = dist2(i, j);
                    if d < best.1 {
                        best = (i, d);
                    }
                }
                best.0
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut matches = Vec::new();
    for (i, &(j, d2_best, d2_second)) in nearest_b.iter().enumerate() {
        if ratio_test_applied {
            let d1 = d2_best.sqrt();
            let d2 = d2_second.sqrt();
            if !(d2 > 0.0 && d1 / d2 < ratio) {
                continue;
            }
        }
        if mutual && nearest_a[j] != i {
            continue;
        }
        matches.push(Match {
            index_a: i,
            index_b: j,
            distance: d2_best.sqrt(),
        });
    }
    Ok(MatchResult {
        matches,
        ratio_test_applied,
    })
}

/// Number of LMedS minimal samples for 50% outliers, 99% confidence.
pub fn lmeds_sample_count(cap: usize) -> usize {
    let e: f64 = 0.5;
    let n = (0.01f64.ln() / (1.0 - (1.0 - e).powi(4)).ln()).ceil() as usize;
    n.min(cap)
}

/// Robust homography from matched point pairs `(src, dst)` by
/// least-median-of-squares over 4-point DLT hypotheses, scored with the
/// median squared symmetric transfer error, then refit on the inliers.
///
/// Deterministic and invariant to the ordering of `pairs`: sampling runs
/// over a canonical lexicographic order with a fixed-seed RNG.
pub fn estimate_homography(
    pairs: &[([f64; 2], [f64; 2])],
    seed: u64,
) -> Result<(Homography, Vec<bool>)> {
    let n = pairs.len();
    if n < 4 {
        return Err(Error::Matching(format!(
            "estimate_homography: insufficient correspondences ({n} < 4)"
        )));
    }
    // Canonical processing order.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&pairs[a], &pairs[b]);
        pa.0[0]
            .total_cmp(&pb.0[0])
            .then(pa.0[1].total_cmp(&pb.0[1]))
            .then(pa.1[0].total_cmp(&pb.1[0]))
            .then(pa.1[1].total_cmp(&pb.1[1]))
    });
    let sorted: Vec<([f64; 2], [f64; 2])> = order.iter().map(|&i| pairs[i]).collect();
    let src: Vec<[f64; 2]> = sorted.iter().map(|p| p.0).collect();
    let dst: Vec<[f64; 2]> = sorted.iter().map(|p| p.1).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c6d_6564_7300);
    let iterations = lmeds_sample_count(2000);
    let mut best: Option<([[f64; 3]; 3], f64)> = None;
    let mut any_valid = false;

    for _ in 0..iterations {
        // Four distinct indices.
        let mut idx = [0usize; 4];
        let mut chosen = 0;
        while chosen < 4 {
            let k = rng.random_range(0..n);
            if !idx[..chosen].contains(&k) {
                idx[chosen] = k;
                chosen += 1;
            }
        }
        let s: Vec<[f64; 2]> = idx.iter().map(|&k| src[k]).collect();
        let d: Vec<[f64; 2]> = idx.iter().map(|&k| dst[k]).collect();
        let Some(h) = dlt_homography(&s, &d) else {
            continue;
        };
        any_valid = true;
        let residuals = symmetric_errors(&h, &src, &dst);
        let med = median(&mut residuals.clone());
        match &best {
            Some((_, best_med)) if med >= *best_med => {}
            _ => best = Some((h, med)),
        }
    }
    if !any_valid {
        return Err(Error::Matching(
            "estimate_homography: all minimal samples degenerate".into(),
        ));
    }
    let (h_best, med) = best.unwrap();

    // Robust scale from the best median (finite-sample corrected), inliers
    // below 2.5σ.
    let sigma = 1.4826 * (1.0 + 5.0 / (n as f64 - 4.0)) * med.sqrt();
    let thresh2 = (2.5 * sigma).powi(2).max(1e-12);
    let residuals = symmetric_errors(&h_best, &src, &dst);
    let inlier_sorted: Vec<bool> = residuals.iter().map(|&r| r < thresh2).collect();

    // Least-squares refit on the inliers.
    let in_src: Vec<[f64; 2]> = src
        .iter()
        .zip(&inlier_sorted)
        .filter(|(_, &m)| m)
        .map(|(p, _)| *p)
        .collect();
    let in_dst: Vec<[f64; 2]> = dst
        .iter()
        .zip(&inlier_sorted)
        .filter(|(_, &m)| m)
        .map(|(p, _)| *p)
        .collect();
    let h_final = if in_src.len() >= 4 {
        dlt_homography(&in_src, &in_dst).unwrap_or(h_best)
    } else {
        h_best
    };

    // Map the mask back to the caller's order.
    let mut mask = vec![false; n];
    for (sorted_pos, &orig_idx) in order.iter().enumerate() {
        mask[orig_idx] = inlier_sorted[sorted_pos];
    }
    let h = Homography::new(h_final, Provenance::Estimated)
        .map_err(|v| Error::Matching(format!("estimate_homography: degenerate result: {v}")))?;
    Ok((h, mask))
}

/// Squared symmetric transfer error per pair.
fn symmetric_errors(h: &[[f64; 3]; 3], src: &[[f64; 2]], dst: &[[f64; 2]]) -> Vec<f64> {
    let hom = Homography {
        matrix: *h,
        provenance: Provenance::Estimated,
    };
    let inv = hom.inverse();
    src.iter()
        .zip(dst)
        .map(|(s, d)| {
            let fwd = match hom.apply(s[0], s[1]) {
                Some((x, y)) => (x - d[0]).powi(2) + (y - d[1]).powi(2),
                None => return f64::INFINITY,
            };
            let bwd = match inv.as_ref().and_then(|i| i.apply(d[0], d[1])) {
                Some((x, y)) => (x - s[0]).powi(2) + (y - s[1]).powi(2),
                None => return f64::INFINITY,
            };
            fwd + bwd
        })
        .collect()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::INFINITY;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Registration tuning knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegisterConfig {
    pub nms_threshold: f64,
    pub nms_radius: f64,
    pub ratio: f64,
    pub mutual: bool,
    pub max_keypoints: usize,
    pub seed: u64,
}

impl Default for RegisterConfig {
    fn default() -> Self {
        Self {
            nms_threshold: 0.5,
            nms_radius: 10.0,
            ratio: 0.9,
            mutual: true,
            max_keypoints: 1024,
            seed: 0,
        }
    }
}

/// Per-pair registration diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub keypoints_moving: usize,
    pub keypoints_fixed: usize,
    pub n_matches: usize,
    pub n_inliers: usize,
    /// Median symmetric transfer error of the inliers, working-resolution px.
    pub median_residual: f64,
}

/// Keypoints and unit-norm descriptors of one image at working size,
/// plus the scale back to native resolution.
pub struct ImageFeatures {
    pub keypoints: KeypointSet,
    pub descriptors: Array2<f64>,
    pub scale: ScaleRecord,
}

/// Detects and describes one image: two encoder passes (the second feeds
/// the first pass's detections back as fusion candidates), NMS, and sparse
/// descriptor sampling at the keypoints.
pub fn extract_features(
    img: &Array2<f64>,
    model: &Model,
    cfg: &RegisterConfig,
) -> Result<ImageFeatures> {
    let working = model.config.frame();
    let (img_w, _, scale) = to_working(img, None, working);

    let empty = KeypointSet::empty(working);
    let (pyr0, _) = model.encode(&img_w, &empty)?;
    let p0 = model.detect(&pyr0)?;
    let candidates = top_k(
        nms_extract(&p0, cfg.nms_threshold, cfg.nms_radius)?,
        cfg.max_keypoints,
    );

    let (pyr, _) = model.encode(&img_w, &candidates)?;
    let p = model.detect(&pyr)?;
    let keypoints = top_k(
        nms_extract(&p, cfg.nms_threshold, cfg.nms_radius)?,
        cfg.max_keypoints,
    );
    if keypoints.is_empty() {
        return Err(Error::Matching("no keypoints detected".into()));
    }
    let pts: Vec<(f64, f64)> = keypoints.iter().map(|(x, y, _)| (x, y)).collect();
    let descriptors = model.describe_at(&pyr, &pts)?;
    Ok(ImageFeatures {
        keypoints,
        descriptors,
        scale,
    })
}

/// Keeps the `k` highest-scoring keypoints.
pub fn top_k(set: KeypointSet, k: usize) -> KeypointSet {
    if set.len() <= k {
        return set;
    }
    let mut idx: Vec<usize> = (0..set.len()).collect();
    idx.sort_by(|&a, &b| {
        set.scores[b]
            .total_cmp(&set.scores[a])
            .then_with(|| set.coords[a][1].total_cmp(&set.coords[b][1]))
            .then_with(|| set.coords[a][0].total_cmp(&set.coords[b][0]))
    });
    idx.truncate(k);
    KeypointSet {
        coords: idx.iter().map(|&i| set.coords[i]).collect(),
        scores: idx.iter().map(|&i| set.scores[i]).collect(),
        frame: set.frame,
    }
}

/// Registers a moving image onto a fixed image with a trained model:
/// detect → NMS → describe → match → LMedS, then rescales the estimated
/// homography back to the original resolutions.
pub fn register_pair(
    img_moving: &Array2<f64>,
    img_fixed: &Array2<f64>,
    model: &Model,
    cfg: &RegisterConfig,
) -> Result<(Homography, MatchResult, Diagnostics)> {
    let feat_m = extract_features(img_moving, model, cfg)?;
    let feat_f = extract_features(img_fixed, model, cfg)?;
    let matched = nnbf_match(&feat_m.descriptors, &feat_f.descriptors, cfg.ratio, cfg.mutual)?;
    finish_registration(&feat_m, &feat_f, matched, cfg.seed)
}

/// Registration with externally produced matches (index pairs into this
/// toolkit's detected keypoints), bypassing nnBF.
pub fn register_pair_with_matches(
    img_moving: &Array2<f64>,
    img_fixed: &Array2<f64>,
    model: &Model,
    cfg: &RegisterConfig,
    imported: &[(usize, usize, f64)],
) -> Result<(Homography, MatchResult, Diagnostics)> {
    let feat_m = extract_features(img_moving, model, cfg)?;
    let feat_f = extract_features(img_fixed, model, cfg)?;
    let mut matches = Vec::with_capacity(imported.len());
    for &(ia, ib, score) in imported {
        if ia >= feat_m.keypoints.len() || ib >= feat_f.keypoints.len() {
            return Err(Error::Matching(format!(
                "imported match ({ia}, {ib}) out of range"
            )));
        }
        matches.push(Match {
            index_a: ia,
            index_b: ib,
            distance: score,
        });
    }
    let matched = MatchResult {
        matches,
        ratio_test_applied: false,
    };
    finish_registration(&feat_m, &feat_f, matched, cfg.seed)
}

fn finish_registration(
    feat_m: &ImageFeatures,
    feat_f: &ImageFeatures,
    matched: MatchResult,
    seed: u64,
) -> Result<(Homography, MatchResult, Diagnostics)> {
    let pairs: Vec<([f64; 2], [f64; 2])> = matched
        .matches
        .iter()
        .map(|m| {
            (
                feat_m.keypoints.coords[m.index_a],
                feat_f.keypoints.coords[m.index_b],
            )
        })
        .collect();
    let (h_working, mask) = estimate_homography(&pairs, seed)?;

    let n_inliers = mask.iter().filter(|&&b| b).count();
    let mut inlier_res: Vec<f64> = symmetric_errors(
        &h_working.matrix,
        &pairs.iter().map(|p| p.0).collect::<Vec<_>>(),
        &pairs.iter().map(|p| p.1).collect::<Vec<_>>(),
    )
    .into_iter()
    .zip(&mask)
    .filter(|(_, &m)| m)
    .map(|(r, _)| (r / 2.0).sqrt())
    .collect();
    let median_residual = median(&mut inlier_res);

    // Rescale to original resolutions: M_orig = S_f⁻¹ · M · S_m.
    let s_m = Homography {
        matrix: feat_m.scale.matrix(),
        provenance: Provenance::Identity,
    };
    let s_f_inv = Homography {
        matrix: [
            [1.0 / feat_f.scale.sx, 0.0, 0.0],
            [0.0, 1.0 / feat_f.scale.sy, 0.0],
            [0.0, 0.0, 1.0],
        ],
        provenance: Provenance::Identity,
    };
    let h_orig = s_f_inv.compose(&h_working).compose(&s_m);
    let h_orig = Homography::new(h_orig.matrix, Provenance::Estimated)
        .map_err(|v| Error::Matching(format!("register_pair: degenerate rescale: {v}")))?;

    let diags = Diagnostics {
        keypoints_moving: feat_m.keypoints.len(),
        keypoints_fixed: feat_f.keypoints.len(),
        n_matches: matched.matches.len(),
        n_inliers,
        median_residual,
    };
    Ok((h_orig, matched, diags))
}

// ---- file formats ----

/// Match file: `{"pair": id, "matches": [[ia, ib, score], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchFile {
    pub pair: String,
    pub matches: Vec<(usize, usize, f64)>,
    #[serde(default)]
    pub ratio_test_applied: bool,
}

impl MatchFile {
    pub fn from_result(pair: impl Into<String>, result: &MatchResult) -> Self {
        Self {
            pair: pair.into(),
            matches: result
                .matches
                .iter()
                .map(|m| (m.index_a, m.index_b, m.distance))
                .collect(),
            ratio_test_applied: result.ratio_test_applied,
        }
    }
}

/// Homography artifact: row-major 3×3 with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomographyFile {
    pub pair: String,
    pub matrix: [[f64; 3]; 3],
    pub provenance: Provenance,
}

impl HomographyFile {
    pub fn new(pair: impl Into<String>, h: &Homography) -> Self {
        Self {
            pair: pair.into(),
            matrix: h.matrix,
            provenance: h.provenance,
        }
    }

    pub fn to_homography(&self) -> Result<Homography> {
        Homography::new(self.matrix, self.provenance)
            .map_err(|v| Error::Matching(format!("homography file invalid: {v}")))
    }
}

/// Frame helper for overlay rendering in downstream tooling.
pub fn working_frame(model: &Model) -> FrameSize {
    model.config.frame()
}
