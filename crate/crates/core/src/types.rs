//! Shared domain types: keypoint sets, scalar maps, descriptor maps,
//! homographies, feature pyramids and keypoint embeddings.
//!
//! All values are plain data and immutable by convention: operations build
//! new values instead of mutating. Coordinates are `(x, y)` with `x` the
//! column and `y` the row, sub-pixel reals in the image frame.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Validate, Violation};

/// Descriptor dimensionality of [`DescriptorMap`].
pub const DESCRIPTOR_DIM: usize = 256;

/// Tolerance on the per-pixel unit-norm invariant of [`DescriptorMap`].
pub const UNIT_NORM_TOL: f64 = 1e-5;

/// Image frame size in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSize {
    pub height: usize,
    pub width: usize,
}

impl FrameSize {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    /// `true` when `(x, y)` satisfies `0 <= x < W` and `0 <= y < H`.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && x < self.width as f64 && y >= 0.0 && y < self.height as f64
    }
}

/// Sub-pixel 2D keypoints with detection scores in a common frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    /// `(x, y)` coordinates, `x` = column, `y` = row.
    pub coords: Vec<[f64; 2]>,
    /// Detection scores in `[0, 1]`, one per coordinate.
    pub scores: Vec<f64>,
    pub frame: FrameSize,
}

impl KeypointSet {
    /// Builds a set and checks its invariants.
    pub fn new(
        coords: Vec<[f64; 2]>,
        scores: Vec<f64>,
        frame: FrameSize,
    ) -> Result<Self, Violation> {
        let set = Self {
            coords,
            scores,
            frame,
        };
        set.validate()?;
        Ok(set)
    }

    /// Builds a set from bare points with unit scores.
    pub fn from_points(coords: Vec<[f64; 2]>, frame: FrameSize) -> Result<Self, Violation> {
        let scores = vec![1.0; coords.len()];
        Self::new(coords, scores, frame)
    }

    pub fn empty(frame: FrameSize) -> Self {
        Self {
            coords: Vec::new(),
            scores: Vec::new(),
            frame,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Iterates `(x, y, score)` triples.
    pub fn iter(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.coords
            .iter()
            .zip(&self.scores)
            .map(|(c, &s)| (c[0], c[1], s))
    }
}

impl Validate for KeypointSet {
    fn validate(&self) -> Result<(), Violation> {
        if self.scores.len() != self.coords.len() {
            return Err(Violation {
                path: "scores".into(),
                constraint: "scores length equals coords length".into(),
            });
        }
        for (i, c) in self.coords.iter().enumerate() {
            let [x, y] = *c;
            if !(x >= 0.0 && x < self.frame.width as f64) || !x.is_finite() {
                return Err(Violation {
                    path: format!("coords[{i}].x"),
                    constraint: "0 <= x < W".into(),
                });
            }
            if !(y >= 0.0 && y < self.frame.height as f64) || !y.is_finite() {
                return Err(Violation {
                    path: format!("coords[{i}].y"),
                    constraint: "0 <= y < H".into(),
                });
            }
        }
        for (i, &s) in self.scores.iter().enumerate() {
            if !(0.0..=1.0).contains(&s) {
                return Err(Violation {
                    path: format!("scores[{i}]"),
                    constraint: "score in [0, 1]".into(),
                });
            }
        }
        // Exact duplicates forbidden.
        let mut seen: Vec<(u64, u64)> = self
            .coords
            .iter()
            .map(|c| (c[0].to_bits(), c[1].to_bits()))
            .collect();
        seen.sort_unstable();
        for w in seen.windows(2) {
            if w[0] == w[1] {
                return Err(Violation {
                    path: "coords".into(),
                    constraint: "no two coords are identical".into(),
                });
            }
        }
        Ok(())
    }
}

/// Role of a [`ScalarMap`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapRole {
    /// Detector output.
    Probability,
    /// Gaussian-blurred keypoint image.
    Heatmap,
    /// Vessel segmentation.
    Segmentation,
}

/// H×W map with values in `[0, 1]`, indexed `[y, x]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarMap {
    pub values: Array2<f64>,
    pub role: MapRole,
}

impl ScalarMap {
    pub fn new(values: Array2<f64>, role: MapRole) -> Result<Self, Violation> {
        let map = Self { values, role };
        map.validate()?;
        Ok(map)
    }

    pub fn zeros(frame: FrameSize, role: MapRole) -> Self {
        Self {
            values: Array2::zeros((frame.height, frame.width)),
            role,
        }
    }

    pub fn frame(&self) -> FrameSize {
        let (h, w) = self.values.dim();
        FrameSize::new(h, w)
    }
}

impl Validate for ScalarMap {
    fn validate(&self) -> Result<(), Violation> {
        for ((y, x), &v) in self.values.indexed_iter() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Violation {
                    path: format!("values[{y}][{x}]"),
                    constraint: "value in [0, 1]".into(),
                });
            }
        }
        Ok(())
    }
}

/// H×W×D map with a unit-norm descriptor vector at every pixel, indexed
/// `[y, x, d]` with `D = 256`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorMap {
    pub values: Array3<f64>,
}

impl DescriptorMap {
    pub fn new(values: Array3<f64>) -> Result<Self, Violation> {
        let map = Self { values };
        map.validate()?;
        Ok(map)
    }

    pub fn frame(&self) -> FrameSize {
        let (h, w, _) = self.values.dim();
        FrameSize::new(h, w)
    }

    pub fn dim(&self) -> usize {
        self.values.dim().2
    }
}

impl Validate for DescriptorMap {
    fn validate(&self) -> Result<(), Violation> {
        let (h, w, d) = self.values.dim();
        if d != DESCRIPTOR_DIM {
            return Err(Violation {
                path: "values".into(),
                constraint: format!("descriptor dimension equals {DESCRIPTOR_DIM}"),
            });
        }
        for y in 0..h {
            for x in 0..w {
                let norm2: f64 = (0..d).map(|k| self.values[[y, x, k]].powi(2)).sum();
                if (norm2.sqrt() - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(Violation {
                        path: format!("values[{y}][{x}]"),
                        constraint: "unit norm".into(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Where a homography came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Sampled,
    Estimated,
    Identity,
}

/// 3×3 invertible projective transform, last entry normalized to 1.
///
/// Acts on `(x, y)` points: `(x', y') = ((h11 x + h12 y + h13)/w,
/// (h21 x + h22 y + h23)/w)` with `w = h31 x + h32 y + h33`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    /// Row-major 3×3 matrix.
    pub matrix: [[f64; 3]; 3],
    pub provenance: Provenance,
}

/// Singularity guard on `|det|`.
pub const HOMOGRAPHY_DET_MIN: f64 = 1e-12;

/// Denominator guard for point transforms.
pub const HOMOGRAPHY_W_MIN: f64 = 1e-12;

impl Homography {
    /// Builds from a raw matrix, normalizing so `matrix[2][2] == 1`.
    pub fn new(matrix: [[f64; 3]; 3], provenance: Provenance) -> Result<Self, Violation> {
        let h = Self {
            matrix,
            provenance,
        }
        .normalized();
        h.validate()?;
        Ok(h)
    }

    pub fn identity() -> Self {
        Self {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            provenance: Provenance::Identity,
        }
    }

    /// Pure translation by `(tx, ty)` pixels.
    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            matrix: [[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]],
            provenance: Provenance::Sampled,
        }
    }

    /// Scales so the last entry is 1 (when representable).
    pub fn normalized(mut self) -> Self {
        let s = self.matrix[2][2];
        if s != 0.0 && s.is_finite() {
            for r in &mut self.matrix {
                for v in r.iter_mut() {
                    *v /= s;
                }
            }
            // Guard against -0.0 and rounding on the pivot itself.
            self.matrix[2][2] = 1.0;
        }
        self
    }

    pub fn det(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Applies to a point; `None` when the denominator is below the guard.
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let m = &self.matrix;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        if w.abs() <= HOMOGRAPHY_W_MIN {
            return None;
        }
        Some((
            (m[0][0] * x + m[0][1] * y + m[0][2]) / w,
            (m[1][0] * x + m[1][1] * y + m[1][2]) / w,
        ))
    }

    /// Inverse transform via the adjugate; `None` when singular.
    pub fn inverse(&self) -> Option<Self> {
        let det = self.det();
        if det.abs() <= HOMOGRAPHY_DET_MIN {
            return None;
        }
        let m = &self.matrix;
        let adj = [
            [
                m[1][1] * m[2][2] - m[1][2] * m[2][1],
                m[0][2] * m[2][1] - m[0][1] * m[2][2],
                m[0][1] * m[1][2] - m[0][2] * m[1][1],
            ],
            [
                m[1][2] * m[2][0] - m[1][0] * m[2][2],
                m[0][0] * m[2][2] - m[0][2] * m[2][0],
                m[0][2] * m[1][0] - m[0][0] * m[1][2],
            ],
            [
                m[1][0] * m[2][1] - m[1][1] * m[2][0],
                m[0][1] * m[2][0] - m[0][0] * m[2][1],
                m[0][0] * m[1][1] - m[0][1] * m[1][0],
            ],
        ];
        let mut inv = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                inv[r][c] = adj[r][c] / det;
            }
        }
        Some(
            Self {
                matrix: inv,
                provenance: self.provenance,
            }
            .normalized(),
        )
    }

    /// Composition `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let a = &self.matrix;
        let b = &other.matrix;
        let mut m = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] = (0..3).map(|k| a[r][k] * b[k][c]).sum();
            }
        }
        Self {
            matrix: m,
            provenance: self.provenance,
        }
        .normalized()
    }
}

impl Validate for Homography {
    fn validate(&self) -> Result<(), Violation> {
        for r in 0..3 {
            for c in 0..3 {
                if !self.matrix[r][c].is_finite() {
                    return Err(Violation {
                        path: format!("matrix[{r}][{c}]"),
                        constraint: "finite".into(),
                    });
                }
            }
        }
        if self.det().abs() <= HOMOGRAPHY_DET_MIN {
            return Err(Violation {
                path: "matrix".into(),
                constraint: "|det| > 1e-12".into(),
            });
        }
        if self.matrix[2][2] != 1.0 {
            return Err(Violation {
                path: "matrix[2][2]".into(),
                constraint: "== 1 after normalization".into(),
            });
        }
        Ok(())
    }
}

/// Multi-scale encoder feature maps; level `l` is stored `[C_l, H_l, W_l]`
/// with `H_l = ceil(H / 2^l)` and `W_l = ceil(W / 2^l)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePyramid {
    pub levels: Vec<Array3<f64>>,
}

impl FeaturePyramid {
    pub fn frame(&self) -> Option<FrameSize> {
        self.levels.first().map(|l| {
            let (_, h, w) = l.dim();
            FrameSize::new(h, w)
        })
    }
}

impl Validate for FeaturePyramid {
    fn validate(&self) -> Result<(), Violation> {
        let Some(base) = self.levels.first() else {
            return Err(Violation {
                path: "levels".into(),
                constraint: "at least one level".into(),
            });
        };
        let (_, h0, w0) = base.dim();
        for (l, lvl) in self.levels.iter().enumerate() {
            let (_, h, w) = lvl.dim();
            let expect_h = h0.div_ceil(1 << l);
            let expect_w = w0.div_ceil(1 << l);
            if h != expect_h || w != expect_w {
                return Err(Violation {
                    path: format!("levels[{l}]"),
                    constraint: format!("spatial dims equal ceil(level 0 / 2^{l})"),
                });
            }
        }
        Ok(())
    }
}

/// Per-keypoint fused embedding `g(I)`, one row per source keypoint with
/// `3·E` columns (three encoder levels concatenated).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointEmbedding {
    pub per_point: Array2<f64>,
    pub source_keypoints: KeypointSet,
}

impl KeypointEmbedding {
    /// Embedding width per encoder level implied by the column count.
    pub fn embed_dim(&self) -> usize {
        self.per_point.dim().1 / 3
    }

    pub fn rows(&self) -> usize {
        self.per_point.dim().0
    }
}

impl Validate for KeypointEmbedding {
    fn validate(&self) -> Result<(), Violation> {
        let (n, cols) = self.per_point.dim();
        if n != self.source_keypoints.len() {
            return Err(Violation {
                path: "per_point".into(),
                constraint: "row count equals keypoint count".into(),
            });
        }
        if cols % 3 != 0 || cols == 0 {
            return Err(Violation {
                path: "per_point".into(),
                constraint: "column count equals 3·E".into(),
            });
        }
        Ok(())
    }
}

/// Keypoint annotation file: one JSON document per image,
/// `{"image": name, "points": [[x, y], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointAnnotation {
    pub image: String,
    pub points: Vec<[f64; 2]>,
}

impl KeypointAnnotation {
    pub fn from_keypoints(image: impl Into<String>, set: &KeypointSet) -> Self {
        Self {
            image: image.into(),
            points: set.coords.clone(),
        }
    }

    /// Interprets the annotation in the given frame, with unit scores.
    pub fn to_keypoints(&self, frame: FrameSize) -> Result<KeypointSet, Violation> {
        KeypointSet::from_points(self.points.clone(), frame)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn frame() -> FrameSize {
        FrameSize::new(64, 96)
    }

    #[test]
    fn keypoint_set_accepts_interior_points() {
        let set = KeypointSet::new(
            vec![[0.0, 0.0], [95.5, 63.5]],
            vec![0.5, 1.0],
            frame(),
        )
        .unwrap();
        assert_eq!(set.len(), 2);
    }

    #[test]
    fn keypoint_set_rejects_boundary_x() {
        // (W, 0) violates x < W.
        let err = KeypointSet::from_points(vec![[96.0, 0.0]], frame()).unwrap_err();
        assert_eq!(err.constraint, "0 <= x < W");
        assert_eq!(err.path, "coords[0].x");
    }

    #[test]
    fn keypoint_set_rejects_duplicates() {
        let err =
            KeypointSet::from_points(vec![[1.0, 2.0], [3.0, 4.0], [1.0, 2.0]], frame()).unwrap_err();
        assert_eq!(err.constraint, "no two coords are identical");
    }

    #[test]
    fn keypoint_set_rejects_score_length_mismatch() {
        let err = KeypointSet::new(vec![[1.0, 1.0]], vec![], frame()).unwrap_err();
        assert_eq!(err.path, "scores");
    }

    #[test]
    fn scalar_map_rejects_out_of_range() {
        let v = array![[0.0, 1.0], [0.5, 1.5]];
        let err = ScalarMap::new(v, MapRole::Probability).unwrap_err();
        assert_eq!(err.path, "values[1][1]");
    }

    #[test]
    fn descriptor_map_zero_vector_violates_unit_norm() {
        let mut v = Array3::zeros((2, 2, DESCRIPTOR_DIM));
        for y in 0..2 {
            for x in 0..2 {
                v[[y, x, 0]] = 1.0;
            }
        }
        v[[1, 1, 0]] = 0.0; // zero vector at one pixel
        let err = DescriptorMap::new(v).unwrap_err();
        assert_eq!(err.constraint, "unit norm");
        assert_eq!(err.path, "values[1][1]");
    }

    #[test]
    fn homography_identity_is_valid() {
        assert!(Homography::identity().validate().is_ok());
    }

    #[test]
    fn homography_rejects_singular() {
        let err = Homography::new(
            [[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
            Provenance::Sampled,
        )
        .unwrap_err();
        assert_eq!(err.constraint, "|det| > 1e-12");
    }

    #[test]
    fn homography_normalizes_last_entry() {
        let h = Homography::new(
            [[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]],
            Provenance::Sampled,
        )
        .unwrap();
        assert_eq!(h.matrix[2][2], 1.0);
        assert_eq!(h.matrix[0][0], 1.0);
    }

    #[test]
    fn homography_inverse_round_trips() {
        let h = Homography::new(
            [[1.1, 0.02, 3.0], [-0.01, 0.95, -2.0], [1e-4, -2e-4, 1.0]],
            Provenance::Sampled,
        )
        .unwrap();
        let inv = h.inverse().unwrap();
        let (x, y) = h.apply(10.0, 20.0).unwrap();
        let (x2, y2) = inv.apply(x, y).unwrap();
        assert!((x2 - 10.0).abs() < 1e-9 && (y2 - 20.0).abs() < 1e-9);
    }

    #[test]
    fn pyramid_levels_must_halve() {
        let pyr = FeaturePyramid {
            levels: vec![
                Array3::zeros((4, 16, 24)),
                Array3::zeros((8, 8, 12)),
                Array3::zeros((8, 4, 6)),
            ],
        };
        assert!(pyr.validate().is_ok());
        let bad = FeaturePyramid {
            levels: vec![Array3::zeros((4, 16, 24)), Array3::zeros((8, 9, 12))],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn serialization_round_trip_is_exact() {
        let set = KeypointSet::new(
            vec![[1.5000000000001, 2.25], [10.125, 33.0 + 1e-13]],
            vec![0.25, 0.7500000000002],
            frame(),
        )
        .unwrap();
        let json = serde_json::to_string(&set).unwrap();
        let back: KeypointSet = serde_json::from_str(&json).unwrap();
        assert_eq!(set, back); // bit-exact round trip

        let map = ScalarMap::new(array![[0.1, 0.2], [0.3, 1.0 - 1e-16]], MapRole::Heatmap).unwrap();
        let json = serde_json::to_string(&map).unwrap();
        let back: ScalarMap = serde_json::from_str(&json).unwrap();
        assert_eq!(map, back);

        let h = Homography::new(
            [[1.0, 0.1, -3.0], [0.0, 0.9, 5.0], [1e-5, 0.0, 1.0]],
            Provenance::Estimated,
        )
        .unwrap();
        let json = serde_json::to_string(&h).unwrap();
        let back: Homography = serde_json::from_str(&json).unwrap();
        assert_eq!(h, back);
    }

    #[test]
    fn annotation_round_trip() {
        let set = KeypointSet::from_points(vec![[3.0, 4.0], [5.5, 6.25]], frame()).unwrap();
        let ann = KeypointAnnotation::from_keypoints("img_000", &set);
        let json = serde_json::to_string(&ann).unwrap();
        let back: KeypointAnnotation = serde_json::from_str(&json).unwrap();
        let set2 = back.to_keypoints(frame()).unwrap();
        assert_eq!(set.coords, set2.coords);
    }

    #[test]
    fn validate_is_total_on_malformed_values() {
        // NaN coordinate parses but must validate as a violation, not panic.
        let set = KeypointSet {
            coords: vec![[f64::NAN, 1.0]],
            scores: vec![1.0],
            frame: frame(),
        };
        assert!(set.validate().is_err());
    }
}
