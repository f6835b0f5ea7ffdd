//! The five training objectives and their weighted sum.
//!
//! Every loss has a differentiable tape form (`*_t`, used by the trainer
//! and by gradient checks) and a plain array-level wrapper that validates
//! the domain contracts and evaluates the same graph.

use ndarray::{Array2, Axis, Ix2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{render_heatmap, warp_valid_mask};
use crate::nn::{Tape, Var};
use crate::types::{DescriptorMap, Homography, KeypointEmbedding, KeypointSet, ScalarMap};

/// Smoothing term of the soft Dice loss.
pub const DICE_EPS: f64 = 1e-6;

/// Default triplet margin.
pub const DEFAULT_MARGIN: f64 = 0.8;

/// Default contrastive temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// Guard under square roots of squared distances.
const SQRT_GUARD: f64 = 1e-12;

/// Per-term weights of the total objective; defaults reproduce the plain
/// unweighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_det_sup: f64,
    pub w_det_self: f64,
    pub w_des: f64,
    pub w_seg: f64,
    pub w_ssl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_det_sup: 1.0,
            w_det_self: 1.0,
            w_des: 1.0,
            w_seg: 1.0,
            w_ssl: 1.0,
        }
    }
}

/// Values of the five loss terms for one image/step; `None` marks a term
/// that did not apply (e.g. no labels).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub det_sup: Option<f64>,
    pub det_self: Option<f64>,
    pub des: Option<f64>,
    pub seg: Option<f64>,
    pub ssl: Option<f64>,
}

/// One structured loss-log record (append-only JSONL).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: u64,
    pub image_id: String,
    #[serde(flatten)]
    pub components: LossComponents,
    pub total: f64,
}

/// Weighted sum of the present components; absent terms contribute 0.
pub fn total_loss(components: &LossComponents, weights: &LossWeights) -> Result<f64> {
    let terms = [
        ("det_sup", components.det_sup, weights.w_det_sup),
        ("det_self", components.det_self, weights.w_det_self),
        ("des", components.des, weights.w_des),
        ("seg", components.seg, weights.w_seg),
        ("ssl", components.ssl, weights.w_ssl),
    ];
    let mut total = 0.0;
    for (name, value, weight) in terms {
        if let Some(v) = value {
            if v.is_nan() {
                return Err(Error::Loss(format!("loss component `{name}` is NaN")));
            }
            total += weight * v;
        }
    }
    Ok(total)
}

// ---- tape-level losses ----

/// Soft Dice loss on same-shaped tensors:
/// `1 − (2·Σ p·t + ε) / (Σ p + Σ t + ε)`.
pub fn dice_loss_t(tape: &Tape, pred: Var, target: Var) -> Var {
    let inter = tape.sum_all(tape.mul(pred, target));
    let sums = tape.add(tape.sum_all(pred), tape.sum_all(target));
    let num = tape.add_scalar(tape.scale(inter, 2.0), DICE_EPS);
    let den = tape.add_scalar(sums, DICE_EPS);
    tape.add_scalar(tape.neg(tape.div(num, den)), 1.0)
}

/// Dice restricted to a binary mask (applied to both maps).
pub fn masked_dice_loss_t(tape: &Tape, pred: Var, target: Var, mask: Var) -> Var {
    let p = tape.mul(pred, mask);
    let t = tape.mul(target, mask);
    dice_loss_t(tape, p, t)
}

/// Triplet loss over anchor/positive rows `[n, d]` (not yet normalized):
/// rows are L2-normalized, the hardest other positive (max cosine
/// similarity, j ≠ i) serves as the negative, and
/// `loss = mean_i max(0, ‖a_i − p_i‖ − ‖a_i − n_i‖ + margin)`.
pub fn triplet_loss_t(tape: &Tape, anchors: Var, positives: Var, margin: f64) -> Var {
    let a = tape.l2_normalize_rows(anchors, 1e-12);
    let p = tape.l2_normalize_rows(positives, 1e-12);

    // Hardest-negative mining on detached values.
    let av = tape.value(a).into_dimensionality::<Ix2>().unwrap();
    let pv = tape.value(p).into_dimensionality::<Ix2>().unwrap();
    let n = av.dim().0;
    let cos = av.dot(&pv.t());
    let mut hardest = Vec::with_capacity(n);
    for i in 0..n {
        let mut best_j = usize::MAX;
        let mut best = f64::NEG_INFINITY;
        for j in 0..n {
            if j != i && cos[[i, j]] > best {
                best = cos[[i, j]];
                best_j = j;
            }
        }
        hardest.push(best_j);
    }
    let negatives = tape.gather_rows(p, hardest);

    let d_pos = row_distance(tape, a, p);
    let d_neg = row_distance(tape, a, negatives);
    let hinge = tape.relu(tape.add_scalar(tape.sub(d_pos, d_neg), margin));
    tape.mean_all(hinge)
}

/// Row-wise Euclidean distance `[n]` between `[n, d]` tensors.
fn row_distance(tape: &Tape, a: Var, b: Var) -> Var {
    let diff = tape.sub(a, b);
    tape.sqrt_eps(tape.sum_cols(tape.square(diff)), SQRT_GUARD)
}

/// Contrastive loss over keypoint embeddings (rows of `g_b` and `g_b_warp`
/// correspond 1:1): per row `i`,
/// `loss_i = −log( exp(cos(g_b[i], g_b_warp[i])/τ)
///          / [Σ_u exp(cos(g_b[i], g_r[u])/τ) + Σ_v exp(cos(g_b[i], g_r_warp[v])/τ)] )`,
/// averaged over rows.
pub fn ssl_loss_t(
    tape: &Tape,
    g_b: Var,
    g_b_warp: Var,
    g_r: Var,
    g_r_warp: Var,
    temperature: f64,
) -> Var {
    let nb = tape.l2_normalize_rows(g_b, 1e-12);
    let nbw = tape.l2_normalize_rows(g_b_warp, 1e-12);
    let nr = tape.l2_normalize_rows(g_r, 1e-12);
    let nrw = tape.l2_normalize_rows(g_r_warp, 1e-12);

    let pos = tape.sum_cols(tape.mul(nb, nbw)); // [n] cosine of paired rows
    let neg_a = tape.matmul(nb, tape.transpose2(nr));
    let neg_b = tape.matmul(nb, tape.transpose2(nrw));
    let negs = tape.concat(1, &[neg_a, neg_b]);
    let lse = tape.logsumexp_rows(tape.scale(negs, 1.0 / temperature));
    let per_row = tape.sub(lse, tape.scale(pos, 1.0 / temperature));
    tape.mean_all(per_row)
}

// ---- array-level operations ----

/// Soft Dice loss between two same-shaped maps.
pub fn dice_loss(pred: &ScalarMap, target: &ScalarMap) -> Result<f64> {
    if pred.values.dim() != target.values.dim() {
        return Err(Error::Loss(format!(
            "dice_loss: shape mismatch {:?} vs {:?}",
            pred.values.dim(),
            target.values.dim()
        )));
    }
    let tape = Tape::new();
    let p = tape.constant(pred.values.clone().into_dyn());
    let t = tape.constant(target.values.clone().into_dyn());
    Ok(tape.scalar(dice_loss_t(&tape, p, t)))
}

/// Supervised detection loss: Dice between the probability map and the
/// rendered label heatmap. Labels are required.
pub fn det_sup_loss(p: &ScalarMap, labels: &KeypointSet, sigma: f64, kernel: usize) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Loss(
            "det_sup_loss: supervised loss requires a nonempty label set".into(),
        ));
    }
    let heat = render_heatmap(labels, sigma, kernel, p.frame())?;
    dice_loss(p, &heat)
}

/// Self-supervised detection loss against the geometry-consistent set;
/// contributes 0 when that set is empty.
pub fn det_self_loss(
    p: &ScalarMap,
    consistent: &KeypointSet,
    sigma: f64,
    kernel: usize,
) -> Result<f64> {
    if consistent.is_empty() {
        return Ok(0.0);
    }
    let heat = render_heatmap(consistent, sigma, kernel, p.frame())?;
    dice_loss(p, &heat)
}

/// Converts an `[H, W, D]` descriptor array into the tape's `[D, H, W]`
/// channel-first layout.
fn descriptor_channels_first(map: &DescriptorMap) -> ndarray::Array3<f64> {
    map.values.view().permuted_axes([2, 0, 1]).to_owned()
}

/// Triplet descriptor loss between a map and its warped counterpart.
///
/// Anchors sample `d` at the keypoints, positives sample `d_warped` at the
/// homography images of the same keypoints (bilinear, renormalized); the
/// negative is the hardest other positive. Only points whose image under
/// `h` stays in frame participate; fewer than 2 such points is an error.
pub fn descriptor_triplet_loss(
    d: &DescriptorMap,
    d_warped: &DescriptorMap,
    pts: &KeypointSet,
    h: &Homography,
    margin: f64,
) -> Result<f64> {
    let (anchor_pts, positive_pts) = correspondences_under(pts, h)?;
    let tape = Tape::new();
    let dv = tape.constant(descriptor_channels_first(d).into_dyn());
    let dwv = tape.constant(descriptor_channels_first(d_warped).into_dyn());
    let anchors = tape.bilinear_sample(dv, anchor_pts);
    let positives = tape.bilinear_sample(dwv, positive_pts);
    Ok(tape.scalar(triplet_loss_t(&tape, anchors, positives, margin)))
}

/// Keypoints and their in-frame images under `h`; errors with fewer than
/// two surviving pairs.
pub fn correspondences_under(
    pts: &KeypointSet,
    h: &Homography,
) -> Result<(Vec<(f64, f64)>, Vec<(f64, f64)>)> {
    let mut anchors = Vec::new();
    let mut positives = Vec::new();
    for (x, y, _) in pts.iter() {
        if let Some((wx, wy)) = h.apply(x, y) {
            if pts.frame.contains(wx, wy) {
                anchors.push((x, y));
                positives.push((wx, wy));
            }
        }
    }
    if anchors.len() < 2 {
        return Err(Error::Loss(format!(
            "descriptor_triplet_loss: needs >= 2 valid points, got {}",
            anchors.len()
        )));
    }
    Ok((anchors, positives))
}

/// Segmentation consistency: Dice between `s` and the back-warped `s_warped`
/// on the region visible in both frames. Errors when that region is under
/// 10% of the frame.
pub fn seg_consistency_loss(s: &ScalarMap, s_warped: &ScalarMap, h: &Homography) -> Result<f64> {
    let frame = s.frame();
    if s_warped.frame() != frame {
        return Err(Error::Loss("seg_consistency_loss: frame mismatch".into()));
    }
    let h_inv = h
        .inverse()
        .ok_or_else(|| Error::Loss("seg_consistency_loss: singular homography".into()))?;
    // Back-warp samples s_warped at H(x); valid where H(x) is in frame.
    let mask = warp_valid_mask(&h_inv, frame, frame)?;
    let valid_frac = mask.sum() / (frame.height * frame.width) as f64;
    if valid_frac < 0.10 {
        return Err(Error::Loss(format!(
            "seg_consistency_loss: valid region {valid_frac:.3} below 10% (degenerate warp)"
        )));
    }
    let tape = Tape::new();
    let sv = tape.constant(to_chw(&s.values).into_dyn());
    let swv = tape.constant(to_chw(&s_warped.values).into_dyn());
    let maskv = tape.constant(to_chw(&mask).into_dyn());
    let loss = seg_consistency_loss_t(&tape, sv, swv, maskv, h, frame.height, frame.width);
    Ok(tape.scalar(loss))
}

/// Tape form of the segmentation consistency loss; `s`/`s_warped`/`mask`
/// are `[1, H, W]`.
pub fn seg_consistency_loss_t(
    tape: &Tape,
    s: Var,
    s_warped: Var,
    mask: Var,
    h: &Homography,
    height: usize,
    width: usize,
) -> Var {
    // Warping by H⁻¹ samples the source at H·x.
    let back = tape.warp_bilinear(s_warped, h.matrix, height, width);
    masked_dice_loss_t(tape, s, back, mask)
}

fn to_chw(a: &Array2<f64>) -> ndarray::Array3<f64> {
    let (h, w) = a.dim();
    a.clone().into_shape_with_order((1, h, w)).unwrap()
}

/// Contrastive keypoint-embedding loss (array level, validated).
pub fn ssl_contrastive_loss(
    g_b: &KeypointEmbedding,
    g_b_warp: &KeypointEmbedding,
    g_r: &KeypointEmbedding,
    g_r_warp: &KeypointEmbedding,
    temperature: f64,
) -> Result<f64> {
    if temperature <= 0.0 {
        return Err(Error::Loss(
            "ssl_contrastive_loss: temperature must be > 0".into(),
        ));
    }
    let all = [
        ("g_b", g_b),
        ("g_b_warp", g_b_warp),
        ("g_r", g_r),
        ("g_r_warp", g_r_warp),
    ];
    let cols = g_b.per_point.dim().1;
    for (name, e) in &all {
        if e.rows() == 0 {
            return Err(Error::Loss(format!(
                "ssl_contrastive_loss: `{name}` has zero rows"
            )));
        }
        if e.per_point.dim().1 != cols {
            return Err(Error::Loss(format!(
                "ssl_contrastive_loss: `{name}` column count differs"
            )));
        }
        for (i, row) in e.per_point.axis_iter(Axis(0)).enumerate() {
            let norm = row.dot(&row).sqrt();
            if norm < 1e-12 {
                return Err(Error::Loss(format!(
                    "ssl_contrastive_loss: `{name}` row {i} has zero norm"
                )));
            }
        }
    }
    if g_b.rows() != g_b_warp.rows() {
        return Err(Error::Loss(
            "ssl_contrastive_loss: g_b and g_b_warp must correspond row-for-row".into(),
        ));
    }
    let tape = Tape::new();
    let vb = tape.constant(g_b.per_point.clone().into_dyn());
    let vbw = tape.constant(g_b_warp.per_point.clone().into_dyn());
    let vr = tape.constant(g_r.per_point.clone().into_dyn());
    let vrw = tape.constant(g_r_warp.per_point.clone().into_dyn());
    Ok(tape.scalar(ssl_loss_t(&tape, vb, vbw, vr, vrw, temperature)))
}
