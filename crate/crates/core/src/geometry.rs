//! Homography sampling, point/image warping, Gaussian heatmap rendering,
//! non-maximum suppression and geometric consistency filtering.
//!
//! All operations are pure functions; RNG-backed sampling is deterministic
//! for a fixed seed.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result, Validate, Violation};
use crate::types::{
    FrameSize, Homography, KeypointSet, MapRole, Provenance, ScalarMap, HOMOGRAPHY_W_MIN,
};

/// Random homography sampler configuration.
///
/// The sample is a similarity part (rotation about the frame center, scale,
/// translation) composed with a projective part built from independent
/// uniform perturbations of the four frame corners. The corner-perturbation
/// part moves each corner by at most `max_corner_shift * min(H, W)` pixels.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct HomographySamplerConfig {
    /// Corner perturbation bound as a fraction of `min(H, W)`; in `[0, 0.5)`.
    pub max_corner_shift: f64,
    /// Rotation range in degrees (uniform in `±rotation_range`).
    pub rotation_range: f64,
    /// Scale factor range `(lo, hi)`, uniform.
    pub scale_range: (f64, f64),
    /// Translation range as a fraction of each frame dimension (uniform in
    /// `±translation_range`).
    pub translation_range: f64,
    pub seed: u64,
}

impl Default for HomographySamplerConfig {
    fn default() -> Self {
        Self {
            max_corner_shift: 0.1,
            rotation_range: 15.0,
            scale_range: (0.9, 1.1),
            translation_range: 0.05,
            seed: 0,
        }
    }
}

impl Validate for HomographySamplerConfig {
    fn validate(&self) -> std::result::Result<(), Violation> {
        if !(0.0..0.5).contains(&self.max_corner_shift) {
            return Err(Violation {
                path: "max_corner_shift".into(),
                constraint: "0 <= max_corner_shift < 0.5".into(),
            });
        }
        if self.rotation_range < 0.0 {
            return Err(Violation {
                path: "rotation_range".into(),
                constraint: "nonnegative".into(),
            });
        }
        if self.translation_range < 0.0 {
            return Err(Violation {
                path: "translation_range".into(),
                constraint: "nonnegative".into(),
            });
        }
        if self.scale_range.0 > self.scale_range.1 || self.scale_range.0 <= 0.0 {
            return Err(Violation {
                path: "scale_range".into(),
                constraint: "0 < lo <= hi".into(),
            });
        }
        Ok(())
    }
}

/// Translation homography from per-axis fractions of the frame size:
/// third column `(fx·W, fy·H, 1)`.
pub fn translation_from_fractions(fx: f64, fy: f64, frame: FrameSize) -> Homography {
    Homography::translation(fx * frame.width as f64, fy * frame.height as f64)
}

/// Exact homography from four (or more) point correspondences via the
/// normalized direct linear transform. Returns `None` for degenerate
/// configurations.
pub fn dlt_homography(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Option<[[f64; 3]; 3]> {
    let n = src.len();
    if n < 4 || dst.len() != n {
        return None;
    }
    let (src_n, t_src) = normalize_points(src)?;
    let (dst_n, t_dst) = normalize_points(dst)?;

    let mut a = nalgebra::DMatrix::<f64>::zeros(2 * n, 9);
    for i in 0..n {
        let [x, y] = src_n[i];
        let [u, v] = dst_n[i];
        let r0 = 2 * i;
        let r1 = 2 * i + 1;
        a[(r0, 0)] = -x;
        a[(r0, 1)] = -y;
        a[(r0, 2)] = -1.0;
        a[(r0, 6)] = u * x;
        a[(r0, 7)] = u * y;
        a[(r0, 8)] = u;
        a[(r1, 3)] = -x;
        a[(r1, 4)] = -y;
        a[(r1, 5)] = -1.0;
        a[(r1, 6)] = v * x;
        a[(r1, 7)] = v * y;
        a[(r1, 8)] = v;
    }

    // Null vector of A via SVD of AᵀA (9×9, cheap and deterministic).
    let ata = a.transpose() * &a;
    let eig = nalgebra::SymmetricEigen::new(ata);
    let mut min_idx = 0;
    for k in 1..9 {
        if eig.eigenvalues[k] < eig.eigenvalues[min_idx] {
            min_idx = k;
        }
    }
    let h_vec = eig.eigenvectors.column(min_idx);

    let h_n = [
        [h_vec[0], h_vec[1], h_vec[2]],
        [h_vec[3], h_vec[4], h_vec[5]],
        [h_vec[6], h_vec[7], h_vec[8]],
    ];
    // Denormalize: H = T_dst⁻¹ · H_n · T_src.
    let h = mat3_mul(&mat3_mul(&inv_similarity(&t_dst), &h_n), &t_src);
    let scale = h[2][2];
    if !scale.is_finite() || scale.abs() < 1e-14 {
        return None;
    }
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = h[r][c] / scale;
        }
    }
    out[2][2] = 1.0;
    let det = Homography {
        matrix: out,
        provenance: Provenance::Estimated,
    }
    .det();
    if !det.is_finite() || det.abs() <= 1e-12 {
        return None;
    }
    Some(out)
}

/// Hartley normalization: zero centroid, mean distance sqrt(2).
/// Returns normalized points and the similarity `T` with `p_n = T p`.
fn normalize_points(pts: &[[f64; 2]]) -> Option<(Vec<[f64; 2]>, [[f64; 3]; 3])> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    let mean_dist = pts
        .iter()
        .map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if mean_dist < 1e-12 {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    let t = [[s, 0.0, -s * cx], [0.0, s, -s * cy], [0.0, 0.0, 1.0]];
    let normed = pts
        .iter()
        .map(|p| [s * (p[0] - cx), s * (p[1] - cy)])
        .collect();
    Some((normed, t))
}

fn inv_similarity(t: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    // Inverse of [[s,0,tx],[0,s,ty],[0,0,1]].
    let s = t[0][0];
    [
        [1.0 / s, 0.0, -t[0][2] / s],
        [0.0, 1.0 / s, -t[1][2] / s],
        [0.0, 0.0, 1.0],
    ]
}

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut m = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            m[r][c] = (0..3).map(|k| a[r][k] * b[k][c]).sum();
        }
    }
    m
}

/// Samples a random homography for a frame; deterministic per `cfg.seed`.
///
/// Degenerate corner draws are resampled internally; fails after 100
/// attempts.
pub fn sample_homography(cfg: &HomographySamplerConfig, frame: FrameSize) -> Result<Homography> {
    cfg.validate().map_err(Error::Invalid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w) = (frame.height as f64, frame.width as f64);

    // Similarity part, exact identity when all ranges are degenerate.
    let rot = if cfg.rotation_range > 0.0 {
        rng.random_range(-cfg.rotation_range..=cfg.rotation_range)
            .to_radians()
    } else {
        0.0
    };
    let scale = if cfg.scale_range.0 < cfg.scale_range.1 {
        rng.random_range(cfg.scale_range.0..=cfg.scale_range.1)
    } else {
        cfg.scale_range.0
    };
    let (tx, ty) = if cfg.translation_range > 0.0 {
        (
            rng.random_range(-cfg.translation_range..=cfg.translation_range) * w,
            rng.random_range(-cfg.translation_range..=cfg.translation_range) * h,
        )
    } else {
        (0.0, 0.0)
    };

    let similarity = if rot == 0.0 && scale == 1.0 {
        Homography::translation(tx, ty)
    } else {
        let (cx, cy) = (w / 2.0, h / 2.0);
        let (c, s) = (rot.cos(), rot.sin());
        // T(center + t) · R·S · T(-center)
        Homography {
            matrix: [
                [scale * c, -scale * s, cx + tx - scale * (c * cx - s * cy)],
                [scale * s, scale * c, cy + ty - scale * (s * cx + c * cy)],
                [0.0, 0.0, 1.0],
            ],
            provenance: Provenance::Sampled,
        }
    };

    // Projective part from bounded corner perturbation.
    let shift = cfg.max_corner_shift * h.min(w);
    if shift == 0.0 {
        let mut out = similarity;
        out.provenance = Provenance::Sampled;
        return Ok(out);
    }
    let corners = [[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]];
    for _ in 0..100 {
        let mut targets = [[0.0; 2]; 4];
        for (t, c) in targets.iter_mut().zip(&corners) {
            t[0] = c[0] + rng.random_range(-shift..=shift);
            t[1] = c[1] + rng.random_range(-shift..=shift);
        }
        if let Some(m) = dlt_homography(&corners, &targets) {
            let corner_warp = Homography {
                matrix: m,
                provenance: Provenance::Sampled,
            };
            let out = corner_warp.compose(&similarity);
            if out.validate().is_ok() {
                let mut out = out;
                out.provenance = Provenance::Sampled;
                return Ok(out);
            }
        }
    }
    Err(Error::Geometry(
        "homography sampling failed after 100 attempts (degenerate corners)".into(),
    ))
}

/// One point after a homography transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MappedPoint {
    Valid {
        x: f64,
        y: f64,
        score: f64,
        in_frame: bool,
    },
    /// Denominator `w` fell below the guard; no finite image.
    Degenerate,
}

/// Result of [`transform_points`]: every input point accounted for, with
/// out-of-frame and degenerate points flagged rather than dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedPoints {
    pub points: Vec<MappedPoint>,
    /// Frame used for the in/out flags (the input frame).
    pub frame: FrameSize,
}

impl TransformedPoints {
    /// The in-frame valid points as a `KeypointSet` (order preserved).
    pub fn in_frame(&self) -> KeypointSet {
        let mut coords = Vec::new();
        let mut scores = Vec::new();
        for p in &self.points {
            if let MappedPoint::Valid {
                x,
                y,
                score,
                in_frame: true,
            } = *p
            {
                coords.push([x, y]);
                scores.push(score);
            }
        }
        dedup_exact(&mut coords, &mut scores);
        KeypointSet {
            coords,
            scores,
            frame: self.frame,
        }
    }

    /// Raw `(x, y)` of every valid point (in or out of frame), in order.
    pub fn valid_coords(&self) -> Vec<[f64; 2]> {
        self.points
            .iter()
            .filter_map(|p| match *p {
                MappedPoint::Valid { x, y, .. } => Some([x, y]),
                MappedPoint::Degenerate => None,
            })
            .collect()
    }
}

/// Drops later duplicates of exactly repeated coordinates (keeps first).
fn dedup_exact(coords: &mut Vec<[f64; 2]>, scores: &mut Vec<f64>) {
    let mut seen = std::collections::HashSet::new();
    let mut keep = Vec::with_capacity(coords.len());
    for c in coords.iter() {
        keep.push(seen.insert((c[0].to_bits(), c[1].to_bits())));
    }
    let mut it = keep.iter();
    coords.retain(|_| *it.next().unwrap());
    let mut it = keep.iter();
    scores.retain(|_| *it.next().unwrap());
}

/// Maps every keypoint through `h`, flagging (not dropping) points that
/// leave the frame or hit a degenerate denominator.
pub fn transform_points(pts: &KeypointSet, h: &Homography) -> TransformedPoints {
    let points = pts
        .iter()
        .map(|(x, y, score)| {
            let m = &h.matrix;
            let w = m[2][0] * x + m[2][1] * y + m[2][2];
            if w.abs() <= HOMOGRAPHY_W_MIN {
                MappedPoint::Degenerate
            } else {
                let nx = (m[0][0] * x + m[0][1] * y + m[0][2]) / w;
                let ny = (m[1][0] * x + m[1][1] * y + m[1][2]) / w;
                MappedPoint::Valid {
                    x: nx,
                    y: ny,
                    score,
                    in_frame: pts.frame.contains(nx, ny),
                }
            }
        })
        .collect();
    TransformedPoints {
        points,
        frame: pts.frame,
    }
}

/// Bilinear sample with zero fill outside the source.
#[inline]
pub(crate) fn sample_bilinear_zero(img: &Array2<f64>, x: f64, y: f64) -> f64 {
    let (h, w) = img.dim();
    if !(x > -1.0 && y > -1.0 && x < w as f64 && y < h as f64) {
        return 0.0;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0i, y0i) = (x0 as isize, y0 as isize);
    let at = |yy: isize, xx: isize| -> f64 {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            0.0
        } else {
            img[[yy as usize, xx as usize]]
        }
    };
    let v00 = at(y0i, x0i);
    let v01 = at(y0i, x0i + 1);
    let v10 = at(y0i + 1, x0i);
    let v11 = at(y0i + 1, x0i + 1);
    v00 * (1.0 - fx) * (1.0 - fy) + v01 * fx * (1.0 - fy) + v10 * (1.0 - fx) * fy + v11 * fx * fy
}

/// Warps an image by `h` using inverse-mapped bilinear resampling;
/// out-of-source pixels are zero.
pub fn warp_image(img: &Array2<f64>, h: &Homography, out_frame: FrameSize) -> Result<Array2<f64>> {
    let inv = h
        .inverse()
        .ok_or_else(|| Error::Geometry("warp_image: singular homography".into()))?;
    let mut out = Array2::zeros((out_frame.height, out_frame.width));
    let m = inv.matrix;
    for yy in 0..out_frame.height {
        for xx in 0..out_frame.width {
            let (x, y) = (xx as f64, yy as f64);
            let w = m[2][0] * x + m[2][1] * y + m[2][2];
            if w.abs() <= HOMOGRAPHY_W_MIN {
                continue;
            }
            let sx = (m[0][0] * x + m[0][1] * y + m[0][2]) / w;
            let sy = (m[1][0] * x + m[1][1] * y + m[1][2]) / w;
            out[[yy, xx]] = sample_bilinear_zero(img, sx, sy);
        }
    }
    Ok(out)
}

/// Warps a scalar map, clamping interpolation back into `[0, 1]`.
pub fn warp_map(map: &ScalarMap, h: &Homography, out_frame: FrameSize) -> Result<ScalarMap> {
    let mut values = warp_image(&map.values, h, out_frame)?;
    values.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(ScalarMap {
        values,
        role: map.role,
    })
}

/// Mask of output pixels whose `h⁻¹` pre-image lies inside `src_frame`.
pub fn warp_valid_mask(
    h: &Homography,
    src_frame: FrameSize,
    out_frame: FrameSize,
) -> Result<Array2<f64>> {
    let inv = h
        .inverse()
        .ok_or_else(|| Error::Geometry("warp_valid_mask: singular homography".into()))?;
    let mut mask = Array2::zeros((out_frame.height, out_frame.width));
    for yy in 0..out_frame.height {
        for xx in 0..out_frame.width {
            if let Some((sx, sy)) = inv.apply(xx as f64, yy as f64) {
                if src_frame.contains(sx, sy) {
                    mask[[yy, xx]] = 1.0;
                }
            }
        }
    }
    Ok(mask)
}

/// Stamps the Gaussian kernel at each rasterized point; equals convolving
/// the binary point image with the kernel.
fn stamp_heatmap(
    pts: &KeypointSet,
    sigma: f64,
    kernel: usize,
    frame: FrameSize,
) -> Result<Array2<f64>> {
    if sigma <= 0.0 {
        return Err(Error::Geometry("render_heatmap: sigma must be > 0".into()));
    }
    if kernel % 2 == 0 || kernel == 0 {
        return Err(Error::Geometry("render_heatmap: kernel must be odd".into()));
    }
    for (x, y, _) in pts.iter() {
        if !frame.contains(x, y) {
            return Err(Error::Geometry(format!(
                "render_heatmap: point ({x}, {y}) outside {}x{} frame",
                frame.height, frame.width
            )));
        }
    }
    let mut acc = Array2::<f64>::zeros((frame.height, frame.width));
    let r = (kernel / 2) as isize;
    let inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma);
    for (x, y, _) in pts.iter() {
        let px = (x.round() as isize).clamp(0, frame.width as isize - 1);
        let py = (y.round() as isize).clamp(0, frame.height as isize - 1);
        for dy in -r..=r {
            let ty = py + dy;
            if ty < 0 || ty >= frame.height as isize {
                continue;
            }
            for dx in -r..=r {
                let tx = px + dx;
                if tx < 0 || tx >= frame.width as isize {
                    continue;
                }
                let g = (-((dx * dx + dy * dy) as f64) * inv_two_sigma2).exp();
                acc[[ty as usize, tx as usize]] += g;
            }
        }
    }
    Ok(acc)
}

/// Renders keypoints as a peak-normalized Gaussian heatmap: a binary point
/// image convolved with a `kernel`×`kernel` Gaussian of width `sigma`, then
/// scaled so the maximum is 1 (all-zero for an empty set).
pub fn render_heatmap(
    pts: &KeypointSet,
    sigma: f64,
    kernel: usize,
    frame: FrameSize,
) -> Result<ScalarMap> {
    let mut acc = stamp_heatmap(pts, sigma, kernel, frame)?;
    let max = acc.iter().cloned().fold(0.0_f64, f64::max);
    if max > 0.0 {
        acc.mapv_inplace(|v| v / max);
    }
    Ok(ScalarMap {
        values: acc,
        role: MapRole::Heatmap,
    })
}

/// Pre-normalization heatmap accumulation (for linearity checks).
pub fn render_heatmap_unnormalized(
    pts: &KeypointSet,
    sigma: f64,
    kernel: usize,
    frame: FrameSize,
) -> Result<Array2<f64>> {
    stamp_heatmap(pts, sigma, kernel, frame)
}

/// Extracts local maxima above `threshold` with pairwise Chebyshev
/// separation greater than `radius`.
///
/// Selection is greedy best-first; ties break by higher value, then lower
/// `y`, then lower `x`. Returned scores are the map values at the peaks.
pub fn nms_extract(map: &ScalarMap, threshold: f64, radius: f64) -> Result<KeypointSet> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Geometry("nms_extract: threshold must be in (0, 1)".into()));
    }
    if radius < 1.0 {
        return Err(Error::Geometry("nms_extract: radius must be >= 1".into()));
    }
    let (h, w) = map.values.dim();
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for ((y, x), &v) in map.values.indexed_iter() {
        if v >= threshold {
            candidates.push((v, y, x));
        }
    }
    candidates.sort_unstable_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| a.1.cmp(&b.1))
            .then_with(|| a.2.cmp(&b.2))
    });

    // Grid of accepted points; Chebyshev neighbors live in adjacent cells.
    let cell = radius.ceil().max(1.0) as usize;
    let gw = w.div_ceil(cell);
    let gh = h.div_ceil(cell);
    let mut grid: Vec<Vec<(usize, usize)>> = vec![Vec::new(); gw * gh];
    let mut coords = Vec::new();
    let mut scores = Vec::new();

    'next: for (v, y, x) in candidates {
        let (cy, cx) = (y / cell, x / cell);
        let y0 = cy.saturating_sub(1);
        let x0 = cx.saturating_sub(1);
        for gy in y0..=(cy + 1).min(gh - 1) {
            for gx in x0..=(cx + 1).min(gw - 1) {
                for &(py, px) in &grid[gy * gw + gx] {
                    let d = (py as f64 - y as f64)
                        .abs()
                        .max((px as f64 - x as f64).abs());
                    if d <= radius {
                        continue 'next;
                    }
                }
            }
        }
        grid[cy * gw + cx].push((y, x));
        coords.push([x as f64, y as f64]);
        scores.push(v);
    }
    Ok(KeypointSet {
        coords,
        scores,
        frame: FrameSize::new(h, w),
    })
}

/// Keeps the points of `y` that are validated by a point of `backmapped`
/// within Euclidean distance `tol`; each backmapped point validates at most
/// one point (greedy nearest-first assignment). Output order follows `y`.
pub fn filter_consistent(y: &KeypointSet, backmapped: &KeypointSet, tol: f64) -> Result<KeypointSet> {
    if tol <= 0.0 {
        return Err(Error::Geometry("filter_consistent: tol must be > 0".into()));
    }
    // Candidate pairs within tol, ordered by distance with ties broken by
    // the y index and then the backmapped coordinates (so the result does
    // not depend on the ordering of `backmapped`).
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, yc) in y.coords.iter().enumerate() {
        for (j, bc) in backmapped.coords.iter().enumerate() {
            let d = ((yc[0] - bc[0]).powi(2) + (yc[1] - bc[1]).powi(2)).sqrt();
            if d <= tol {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_unstable_by(|a, b| {
        a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)).then_with(|| {
            let (ba, bb) = (backmapped.coords[a.2], backmapped.coords[b.2]);
            ba[0].total_cmp(&bb[0]).then(ba[1].total_cmp(&bb[1]))
        })
    });
    let mut y_used = vec![false; y.len()];
    let mut b_used = vec![false; backmapped.len()];
    for (_, i, j) in pairs {
        if !y_used[i] && !b_used[j] {
            y_used[i] = true;
            b_used[j] = true;
        }
    }
    let mut coords = Vec::new();
    let mut scores = Vec::new();
    for (i, used) in y_used.iter().enumerate() {
        if *used {
            coords.push(y.coords[i]);
            scores.push(y.scores[i]);
        }
    }
    Ok(KeypointSet {
        coords,
        scores,
        frame: y.frame,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn frame() -> FrameSize {
        FrameSize::new(100, 100)
    }

    #[test]
    fn sampler_all_zero_ranges_is_identity() {
        let cfg = HomographySamplerConfig {
            max_corner_shift: 0.0,
            rotation_range: 0.0,
            scale_range: (1.0, 1.0),
            translation_range: 0.0,
            seed: 7,
        };
        let h = sample_homography(&cfg, frame()).unwrap();
        assert_eq!(h.matrix, Homography::identity().matrix);
    }

    #[test]
    fn translation_fraction_mapping() {
        let h = translation_from_fractions(3.0, 5.0, FrameSize::new(10, 20));
        assert_eq!(h.matrix[0][2], 3.0 * 20.0);
        assert_eq!(h.matrix[1][2], 5.0 * 10.0);
        assert_eq!(h.matrix[2][2], 1.0);
    }

    #[test]
    fn sampler_is_deterministic_per_seed() {
        let cfg = HomographySamplerConfig {
            seed: 42,
            ..Default::default()
        };
        let a = sample_homography(&cfg, frame()).unwrap();
        let b = sample_homography(&cfg, frame()).unwrap();
        assert_eq!(a.matrix, b.matrix);
        let c = sample_homography(
            &HomographySamplerConfig {
                seed: 43,
                ..Default::default()
            },
            frame(),
        )
        .unwrap();
        assert_ne!(a.matrix, c.matrix);
    }

    #[test]
    fn sampler_corner_part_respects_bound() {
        // Only the projective corner part active: total corner displacement
        // must stay within max_corner_shift * min(H, W).
        let cfg = HomographySamplerConfig {
            max_corner_shift: 0.1,
            rotation_range: 0.0,
            scale_range: (1.0, 1.0),
            translation_range: 0.0,
            seed: 5,
        };
        let f = frame();
        let bound = 0.1 * 100.0 + 1e-9;
        for seed in 0..20 {
            let h = sample_homography(
                &HomographySamplerConfig {
                    seed,
                    ..cfg
                },
                f,
            )
            .unwrap();
            for c in [[0.0, 0.0], [100.0, 0.0], [100.0, 100.0], [0.0, 100.0]] {
                let (x, y) = h.apply(c[0], c[1]).unwrap();
                let d = ((x - c[0]).powi(2) + (y - c[1]).powi(2)).sqrt();
                // Independent per-axis bound means diagonal up to sqrt(2)·shift.
                assert!(d <= bound * std::f64::consts::SQRT_2, "corner moved {d}");
            }
        }
    }

    #[test]
    fn transform_points_identity_and_translation() {
        let pts = KeypointSet::from_points(vec![[10.0, 10.0]], frame()).unwrap();
        let id = transform_points(&pts, &Homography::identity());
        assert_eq!(id.in_frame().coords, vec![[10.0, 10.0]]);
        let t = transform_points(&pts, &Homography::translation(3.0, 5.0));
        assert_eq!(t.in_frame().coords, vec![[13.0, 15.0]]);
    }

    #[test]
    fn transform_points_matches_matrix_oracle() {
        // Independent 3-vector multiply-and-divide oracle.
        let h = Homography::new(
            [[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.001, 0.0, 1.0]],
            Provenance::Sampled,
        )
        .unwrap();
        let (px, py) = (100.0, 50.0);
        let v = [
            2.0 * px + 0.0 * py + 0.0,
            0.0 * px + 2.0 * py + 0.0,
            0.001 * px + 0.0 * py + 1.0,
        ];
        let expected = (v[0] / v[2], v[1] / v[2]);
        let pts = KeypointSet::from_points(vec![[px, py]], FrameSize::new(512, 512)).unwrap();
        let out = transform_points(&pts, &h);
        match out.points[0] {
            MappedPoint::Valid { x, y, .. } => {
                assert!((x - expected.0).abs() < 1e-12);
                assert!((y - expected.1).abs() < 1e-12);
            }
            _ => panic!("expected valid point"),
        }
    }

    #[test]
    fn transform_points_flags_out_of_frame_and_degenerate() {
        let pts = KeypointSet::from_points(vec![[99.0, 99.0], [1.0, 1.0]], frame()).unwrap();
        let out = transform_points(&pts, &Homography::translation(5.0, 0.0));
        assert!(matches!(
            out.points[0],
            MappedPoint::Valid {
                in_frame: false,
                ..
            }
        ));
        assert_eq!(out.in_frame().len(), 1);

        // w = 0 along the line x = 1 for this matrix.
        let h = Homography {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 1.0]],
            provenance: Provenance::Sampled,
        };
        let out = transform_points(&pts, &h);
        assert_eq!(out.points[1], MappedPoint::Degenerate);
    }

    #[test]
    fn warp_identity_is_pixel_exact() {
        let img = Array2::from_shape_fn((32, 32), |(y, x)| ((x * 7 + y * 3) % 11) as f64 / 10.0);
        let out = warp_image(&img, &Homography::identity(), FrameSize::new(32, 32)).unwrap();
        assert_eq!(img, out);
    }

    #[test]
    fn warp_integer_translation_shifts_columns() {
        let img = Array2::from_shape_fn((16, 16), |(y, x)| (x + 16 * y) as f64);
        let out = warp_image(&img, &Homography::translation(5.0, 0.0), FrameSize::new(16, 16))
            .unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let expect = if x < 5 { 0.0 } else { img[[y, x - 5]] };
                assert_eq!(out[[y, x]], expect);
            }
        }
    }

    #[test]
    fn warp_round_trip_interior_error_is_small() {
        // Smooth image so interpolation loss is bounded.
        let img = Array2::from_shape_fn((64, 64), |(y, x)| {
            0.5 + 0.5 * ((x as f64 / 9.0).sin() * (y as f64 / 7.0).cos())
        });
        let cfg = HomographySamplerConfig {
            max_corner_shift: 0.05,
            seed: 3,
            ..Default::default()
        };
        let h = sample_homography(&cfg, FrameSize::new(64, 64)).unwrap();
        let fwd = warp_image(&img, &h, FrameSize::new(64, 64)).unwrap();
        let back = warp_image(&fwd, &h.inverse().unwrap(), FrameSize::new(64, 64)).unwrap();
        let mut sum = 0.0;
        let mut n = 0.0;
        for y in 16..48 {
            for x in 16..48 {
                sum += (back[[y, x]] - img[[y, x]]).abs();
                n += 1.0;
            }
        }
        assert!(sum / n < 0.02, "round-trip MAE {} too large", sum / n);
    }

    #[test]
    fn heatmap_empty_is_all_zero() {
        let map = render_heatmap(&KeypointSet::empty(frame()), 2.0, 13, frame()).unwrap();
        assert!(map.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn heatmap_single_point_peaks_at_point() {
        let pts = KeypointSet::from_points(vec![[10.0, 10.0]], frame()).unwrap();
        let map = render_heatmap(&pts, 3.0, 13, frame()).unwrap();
        let mut best = ((0, 0), -1.0);
        for ((y, x), &v) in map.values.indexed_iter() {
            if v > best.1 {
                best = ((y, x), v);
            }
        }
        assert_eq!(best.0, (10, 10));
        assert_eq!(best.1, 1.0);
    }

    #[test]
    fn heatmap_is_linear_before_normalization() {
        let f = frame();
        let a = KeypointSet::from_points(vec![[20.0, 30.0]], f).unwrap();
        let b = KeypointSet::from_points(vec![[70.0, 30.0]], f).unwrap();
        let both = KeypointSet::from_points(vec![[20.0, 30.0], [70.0, 30.0]], f).unwrap();
        let ua = render_heatmap_unnormalized(&a, 3.0, 13, f).unwrap();
        let ub = render_heatmap_unnormalized(&b, 3.0, 13, f).unwrap();
        let uboth = render_heatmap_unnormalized(&both, 3.0, 13, f).unwrap();
        let diff = (&ua + &ub - &uboth).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn heatmap_rejects_outside_point() {
        let pts = KeypointSet {
            coords: vec![[150.0, 10.0]],
            scores: vec![1.0],
            frame: frame(),
        };
        assert!(render_heatmap(&pts, 2.0, 13, frame()).is_err());
    }

    #[test]
    fn nms_single_peak() {
        let mut v = Array2::zeros((32, 32));
        v[[5, 7]] = 0.9;
        let map = ScalarMap::new(v, MapRole::Probability).unwrap();
        let out = nms_extract(&map, 0.5, 4.0).unwrap();
        assert_eq!(out.coords, vec![[7.0, 5.0]]);
        assert_eq!(out.scores, vec![0.9]);
    }

    #[test]
    fn nms_below_threshold_is_empty() {
        let v = Array2::from_elem((16, 16), 0.4);
        let map = ScalarMap::new(v, MapRole::Probability).unwrap();
        assert!(nms_extract(&map, 0.5, 4.0).unwrap().is_empty());
    }

    #[test]
    fn nms_suppresses_close_second_peak() {
        let mut v = Array2::zeros((32, 32));
        v[[10, 10]] = 0.9;
        v[[10, 13]] = 0.8;
        let map = ScalarMap::new(v, MapRole::Probability).unwrap();
        let out = nms_extract(&map, 0.5, 10.0).unwrap();
        assert_eq!(out.coords, vec![[10.0, 10.0]]);
    }

    #[test]
    fn filter_consistent_identity_keeps_all() {
        let y = KeypointSet::from_points(vec![[1.0, 2.0], [5.0, 5.0]], frame()).unwrap();
        let out = filter_consistent(&y, &y.clone(), 0.5).unwrap();
        assert_eq!(out.coords, y.coords);
    }

    #[test]
    fn filter_consistent_rejects_beyond_tol() {
        let y = KeypointSet::from_points(vec![[10.0, 10.0]], frame()).unwrap();
        let b = KeypointSet::from_points(vec![[10.7, 10.0]], frame()).unwrap();
        assert!(filter_consistent(&y, &b, 0.5).unwrap().is_empty());
    }

    #[test]
    fn filter_consistent_exhaustive_oracle() {
        // 5 points: 3 within 0.3 px of distinct partners, 2 at 2 px.
        let y = KeypointSet::from_points(
            vec![[10.0, 10.0], [20.0, 20.0], [30.0, 30.0], [40.0, 40.0], [50.0, 50.0]],
            frame(),
        )
        .unwrap();
        let b = KeypointSet::from_points(
            vec![[10.3, 10.0], [20.0, 20.3], [29.8, 30.0], [42.0, 40.0], [50.0, 52.0]],
            frame(),
        )
        .unwrap();
        let out = filter_consistent(&y, &b, 0.5).unwrap();
        assert_eq!(
            out.coords,
            vec![[10.0, 10.0], [20.0, 20.0], [30.0, 30.0]]
        );
    }

    #[test]
    fn filter_consistent_is_order_invariant() {
        let y = KeypointSet::from_points(vec![[5.0, 5.0], [6.0, 5.0]], frame()).unwrap();
        let b1 = KeypointSet::from_points(vec![[5.4, 5.0], [5.6, 5.0]], frame()).unwrap();
        let b2 = KeypointSet::from_points(vec![[5.6, 5.0], [5.4, 5.0]], frame()).unwrap();
        let o1 = filter_consistent(&y, &b1, 0.5).unwrap();
        let o2 = filter_consistent(&y, &b2, 0.5).unwrap();
        assert_eq!(o1.coords, o2.coords);
    }

    #[test]
    fn dlt_recovers_exact_homography() {
        let h = Homography::new(
            [[1.2, 0.1, 5.0], [-0.05, 0.9, -3.0], [1e-4, 2e-4, 1.0]],
            Provenance::Sampled,
        )
        .unwrap();
        let src = [[0.0, 0.0], [100.0, 0.0], [100.0, 100.0], [0.0, 100.0], [37.0, 61.0]];
        let dst: Vec<[f64; 2]> = src
            .iter()
            .map(|p| {
                let (x, y) = h.apply(p[0], p[1]).unwrap();
                [x, y]
            })
            .collect();
        let m = dlt_homography(&src, &dst).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert!((m[r][c] - h.matrix[r][c]).abs() < 1e-9, "entry ({r},{c})");
            }
        }
    }

    #[test]
    fn dlt_rejects_collinear() {
        let src = [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        let dst = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 1.0]];
        assert!(dlt_homography(&src, &dst).is_none());
    }

    #[test]
    fn point_round_trip_through_inverse() {
        let cfg = HomographySamplerConfig {
            seed: 11,
            ..Default::default()
        };
        let h = sample_homography(&cfg, frame()).unwrap();
        let inv = h.inverse().unwrap();
        let pts = KeypointSet::from_points(
            vec![[10.0, 15.0], [50.0, 50.0], [80.0, 20.0], [33.3, 66.6]],
            frame(),
        )
        .unwrap();
        let fwd = transform_points(&pts, &h);
        let coords = fwd.valid_coords();
        for (orig, mapped) in pts.coords.iter().zip(&coords) {
            let (bx, by) = inv.apply(mapped[0], mapped[1]).unwrap();
            assert!(((bx - orig[0]).powi(2) + (by - orig[1]).powi(2)).sqrt() < 1e-6);
        }
    }

    #[test]
    fn smooth_map_nms_has_separated_peaks() {
        let v = array![
            [0.1, 0.2, 0.1, 0.1],
            [0.2, 0.9, 0.2, 0.1],
            [0.1, 0.2, 0.1, 0.8],
            [0.1, 0.1, 0.7, 0.8]
        ];
        let map = ScalarMap::new(v, MapRole::Probability).unwrap();
        let out = nms_extract(&map, 0.5, 1.0).unwrap();
        // 0.9 first; 0.8 at (2,3) is Chebyshev 2 away, kept; 0.8 at (3,3)
        // is adjacent to it, dropped; 0.7 adjacent too.
        assert_eq!(out.coords, vec![[1.0, 1.0], [3.0, 2.0]]);
    }
}
