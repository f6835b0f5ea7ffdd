//! Dataset ingestion, resizing, augmentation, and the synthetic
//! vessel-phantom generator used for desk-scale training and tests.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{FrameSize, KeypointAnnotation, KeypointSet, MapRole, ScalarMap};

/// Dataset split a manifest belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One manifest entry; paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<PathBuf>,
    pub modality: String,
    pub subject: String,
}

/// Dataset manifest file: `{"split": ..., "entries": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

/// A validated entry with its native frame and parsed annotation.
#[derive(Debug, Clone)]
pub struct LoadedEntry {
    /// Image file stem; unique within a dataset.
    pub id: String,
    pub image_path: PathBuf,
    pub modality: String,
    pub subject: String,
    pub frame: FrameSize,
    /// Annotated keypoints at native resolution, when labeled.
    pub labels: Option<KeypointSet>,
}

/// A loaded and validated dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub split: Split,
    pub entries: Vec<LoadedEntry>,
}

impl Dataset {
    pub fn labeled_count(&self) -> usize {
        self.entries.iter().filter(|e| e.labels.is_some()).count()
    }
}

/// Loads and validates a manifest: files must exist, annotations parse into
/// in-frame keypoint sets with at least one point, subjects are nonempty.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: malformed manifest: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));

    let mut entries = Vec::with_capacity(manifest.entries.len());
    let mut seen_ids = std::collections::HashSet::new();
    for (i, entry) in manifest.entries.iter().enumerate() {
        if entry.subject.is_empty() {
            return Err(Error::Data(format!("entries[{i}]: empty subject id")));
        }
        let image_path = base.join(&entry.image);
        let (w, h) = image::image_dimensions(&image_path)
            .map_err(|e| Error::Data(format!("entries[{i}]: {}: {e}", image_path.display())))?;
        let frame = FrameSize::new(h as usize, w as usize);
        let id = image_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .to_string();
        if !seen_ids.insert(id.clone()) {
            return Err(Error::Data(format!("duplicate image id `{id}`")));
        }
        let labels = match &entry.annotation {
            None => None,
            Some(ann_rel) => {
                let ann_path = base.join(ann_rel);
                let ann_text = std::fs::read_to_string(&ann_path).map_err(|e| {
                    Error::Data(format!("entries[{i}]: {}: {e}", ann_path.display()))
                })?;
                let ann: KeypointAnnotation = serde_json::from_str(&ann_text)
                    .map_err(|e| Error::Data(format!("entries[{i}]: malformed annotation: {e}")))?;
                if ann.points.is_empty() {
                    return Err(Error::Data(format!(
                        "entries[{i}]: labeled entry has no points"
                    )));
                }
                let set = ann
                    .to_keypoints(frame)
                    .map_err(|v| Error::Data(format!("entries[{i}]: annotation invalid: {v}")))?;
                Some(set)
            }
        };
        entries.push(LoadedEntry {
            id,
            image_path,
            modality: entry.modality.clone(),
            subject: entry.subject.clone(),
            frame,
            labels,
        });
    }
    Ok(Dataset {
        split: manifest.split,
        entries,
    })
}

// ---- image I/O ----

/// Loads an image as grayscale in `[0, 1]`; RGB inputs use the green
/// channel (best vessel contrast).
pub fn load_image_gray(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)?;
    let out = match img {
        image::DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                buf.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0
            })
        }
        image::DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                buf.get_pixel(x as u32, y as u32).0[0] as f64 / 65535.0
            })
        }
        other => {
            let rgb = other.to_rgb16();
            let (w, h) = rgb.dimensions();
            Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                rgb.get_pixel(x as u32, y as u32).0[1] as f64 / 65535.0
            })
        }
    };
    Ok(out)
}

/// Saves a `[0, 1]` image as 16-bit grayscale PNG.
pub fn save_image_gray(path: &Path, img: &Array2<f64>) -> Result<()> {
    let (h, w) = img.dim();
    let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        let v = img[[y as usize, x as usize]].clamp(0.0, 1.0);
        px.0[0] = (v * 65535.0).round() as u16;
    }
    buf.save(path)?;
    Ok(())
}

/// Saves a scalar map (probability/heatmap/segmentation) as 16-bit PNG.
pub fn save_map_png(path: &Path, map: &ScalarMap) -> Result<()> {
    save_image_gray(path, &map.values)
}

// ---- working-size resizing ----

/// Anisotropic scale factors from native to working resolution;
/// `working = original · (sx, sy)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleRecord {
    pub sx: f64,
    pub sy: f64,
}

impl ScaleRecord {
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.sx, y * self.sy)
    }

    /// Exact inverse for coordinates.
    pub fn invert(&self, x: f64, y: f64) -> (f64, f64) {
        (x / self.sx, y / self.sy)
    }

    /// Diagonal matrix `diag(sx, sy, 1)`.
    pub fn matrix(&self) -> [[f64; 3]; 3] {
        [[self.sx, 0.0, 0.0], [0.0, self.sy, 0.0], [0.0, 0.0, 1.0]]
    }
}

/// Anisotropic bilinear resize to the working size; keypoints scale by the
/// same per-axis factors.
pub fn to_working(
    img: &Array2<f64>,
    pts: Option<&KeypointSet>,
    working: FrameSize,
) -> (Array2<f64>, Option<KeypointSet>, ScaleRecord) {
    let (h, w) = img.dim();
    let scale = ScaleRecord {
        sx: working.width as f64 / w as f64,
        sy: working.height as f64 / h as f64,
    };
    let resized = resize_bilinear(img, working);
    let scaled_pts = pts.map(|set| {
        let coords = set
            .coords
            .iter()
            .map(|c| {
                let (x, y) = scale.apply(c[0], c[1]);
                // Rounding guard: scaled points must stay inside the frame.
                [
                    x.min(working.width as f64 * (1.0 - 1e-12)),
                    y.min(working.height as f64 * (1.0 - 1e-12)),
                ]
            })
            .collect();
        KeypointSet {
            coords,
            scores: set.scores.clone(),
            frame: working,
        }
    });
    (resized, scaled_pts, scale)
}

/// Pixel-center-aligned bilinear resize.
pub fn resize_bilinear(img: &Array2<f64>, out: FrameSize) -> Array2<f64> {
    let (h, w) = img.dim();
    if (h, w) == (out.height, out.width) {
        return img.clone();
    }
    let sy = h as f64 / out.height as f64;
    let sx = w as f64 / out.width as f64;
    Array2::from_shape_fn((out.height, out.width), |(y, x)| {
        let src_x = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let src_y = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let x0 = src_x.floor() as usize;
        let y0 = src_y.floor() as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fx = src_x - x0 as f64;
        let fy = src_y - y0 as f64;
        img[[y0, x0]] * (1.0 - fx) * (1.0 - fy)
            + img[[y0, x1]] * fx * (1.0 - fy)
            + img[[y1, x0]] * (1.0 - fx) * fy
            + img[[y1, x1]] * fx * fy
    })
}

// ---- augmentation ----

/// Random brightness/contrast/gamma jitter, deterministic per seed, output
/// clipped to `[0, 1]`. `strength = 0` returns the input unchanged.
pub fn color_jitter(img: &Array2<f64>, strength: f64, seed: u64) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::Data("color_jitter: strength must be in [0, 1]".into()));
    }
    if strength == 0.0 {
        return Ok(img.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let brightness = rng.random_range(-0.3..=0.3) * strength;
    let contrast = 1.0 + rng.random_range(-0.5..=0.5) * strength;
    let gamma = (1.0 + rng.random_range(-0.4..=0.4) * strength).max(0.05);
    Ok(img.mapv(|v| {
        let g = v.clamp(0.0, 1.0).powf(gamma);
        ((g - 0.5) * contrast + 0.5 + brightness).clamp(0.0, 1.0)
    }))
}

/// Inverts image polarity (cross-modality augmentation).
pub fn invert_polarity(img: &Array2<f64>) -> Array2<f64> {
    img.mapv(|v| 1.0 - v)
}

// ---- synthetic vessel phantom ----

/// Rendering style of a phantom; geometry is style-independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityStyle {
    /// Bright vessels on a dark background (angiography-like).
    BrightOnDark,
    /// Dark vessels on a bright background (fundus-like), extra blur.
    DarkOnBright,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub frame: FrameSize,
    pub n_trees: usize,
    pub branch_depth: usize,
    /// Root stroke width range in pixels.
    pub width_px: (f64, f64),
    /// Speckle noise amplitude in `[0, 1]`.
    pub noise_level: f64,
    pub modality_style: ModalityStyle,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            frame: FrameSize::new(256, 256),
            n_trees: 3,
            branch_depth: 4,
            width_px: (3.0, 5.0),
            noise_level: 0.3,
            modality_style: ModalityStyle::BrightOnDark,
            seed: 0,
        }
    }
}

/// Generated phantom: image, exact binary vessel mask, and the analytically
/// known bifurcation keypoints.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub image: Array2<f64>,
    pub mask: ScalarMap,
    pub keypoints: KeypointSet,
}

struct TreeRasterizer {
    mask: Array2<f64>,
    frame: FrameSize,
    bifurcations: Vec<[f64; 2]>,
}

impl TreeRasterizer {
    fn clamp_point(&self, p: [f64; 2]) -> [f64; 2] {
        let margin = 3.0;
        [
            p[0].clamp(margin, self.frame.width as f64 - 1.0 - margin),
            p[1].clamp(margin, self.frame.height as f64 - 1.0 - margin),
        ]
    }

    fn stamp_disk(&mut self, cx: f64, cy: f64, r: f64) {
        let (h, w) = (self.frame.height as isize, self.frame.width as isize);
        let x0 = ((cx - r).floor() as isize).max(0);
        let x1 = ((cx + r).ceil() as isize).min(w - 1);
        let y0 = ((cy - r).floor() as isize).max(0);
        let y1 = ((cy + r).ceil() as isize).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                if dx * dx + dy * dy <= r * r {
                    self.mask[[y as usize, x as usize]] = 1.0;
                }
            }
        }
    }

    /// Strokes a quadratic Bézier with linearly tapering width.
    fn stroke_bezier(&mut self, p0: [f64; 2], p1: [f64; 2], p2: [f64; 2], w0: f64, w1: f64) {
        let chord = ((p2[0] - p0[0]).powi(2) + (p2[1] - p0[1]).powi(2)).sqrt();
        let steps = (chord.ceil() as usize).max(2) * 2;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let mt = 1.0 - t;
            let x = mt * mt * p0[0] + 2.0 * mt * t * p1[0] + t * t * p2[0];
            let y = mt * mt * p0[1] + 2.0 * mt * t * p1[1] + t * t * p2[1];
            let w = w0 + (w1 - w0) * t;
            self.stamp_disk(x, y, (w / 2.0).max(0.7));
        }
    }

    /// One branch segment; recurses into two children until `depth` is 1.
    fn grow(
        &mut self,
        rng: &mut ChaCha8Rng,
        start: [f64; 2],
        angle: f64,
        length: f64,
        width: f64,
        depth: usize,
    ) {
        let end_raw = [
            start[0] + length * angle.cos(),
            start[1] + length * angle.sin(),
        ];
        let end = self.clamp_point(end_raw);
        // Curvature via a perpendicular control-point offset.
        let mid = [(start[0] + end[0]) / 2.0, (start[1] + end[1]) / 2.0];
        let perp_angle = angle + std::f64::consts::FRAC_PI_2;
        let bow = length * rng.random_range(-0.18..0.18);
        let ctrl = self.clamp_point([
            mid[0] + bow * perp_angle.cos(),
            mid[1] + bow * perp_angle.sin(),
        ]);
        let end_width = width * 0.85;
        self.stroke_bezier(start, ctrl, end, width, end_width);

        if depth <= 1 {
            return;
        }
        // The joint where the two children leave is a bifurcation.
        self.bifurcations.push(end);
        let actual_angle = (end[1] - start[1]).atan2(end[0] - start[0]);
        let split = rng.random_range(0.35..0.65);
        let spread = rng.random_range(0.5..0.9);
        for (dir, share) in [(-1.0, split), (1.0, 1.0 - split)] {
            let child_angle = actual_angle + dir * spread * (0.5 + share);
            let child_len = length * rng.random_range(0.68..0.85);
            let child_width = (end_width * (0.62 + 0.3 * share)).max(1.4);
            self.grow(rng, end, child_angle, child_len, child_width, depth - 1);
        }
    }
}

/// Renders branching vessel trees onto a textured background. Geometry
/// (mask and keypoints) depends only on `seed`; `modality_style` changes
/// the rendering alone.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<Phantom> {
    if cfg.frame.height < 64 || cfg.frame.width < 64 {
        return Err(Error::Data("generate_phantom: frame must be >= 64x64".into()));
    }
    if cfg.branch_depth < 1 {
        return Err(Error::Data(
            "generate_phantom: branch_depth must be >= 1".into(),
        ));
    }
    let frame = cfg.frame;
    let (h, w) = (frame.height as f64, frame.width as f64);

    // Geometry stream: independent of style.
    let mut geo = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7068_616e_746f_6d00);
    let mut raster = TreeRasterizer {
        mask: Array2::zeros((frame.height, frame.width)),
        frame,
        bifurcations: Vec::new(),
    };
    for _ in 0..cfg.n_trees {
        // Root on a border, heading inward toward a jittered center.
        let side = geo.random_range(0..4u32);
        let u = geo.random_range(0.15..0.85);
        let root = match side {
            0 => [u * w, 3.0],
            1 => [u * w, h - 4.0],
            2 => [3.0, u * h],
            _ => [w - 4.0, u * h],
        };
        let target = [w * geo.random_range(0.3..0.7), h * geo.random_range(0.3..0.7)];
        let angle = (target[1] - root[1]).atan2(target[0] - root[0]);
        let width = geo.random_range(cfg.width_px.0..=cfg.width_px.1);
        let length = h.min(w) * geo.random_range(0.22..0.34);
        raster.grow(&mut geo, root, angle, length, width, cfg.branch_depth);
    }

    // Deduplicate bifurcations (children of clamped segments can coincide).
    let mut coords: Vec<[f64; 2]> = Vec::new();
    for b in raster.bifurcations {
        if frame.contains(b[0], b[1])
            && !coords
                .iter()
                .any(|c| (c[0] - b[0]).abs() < 1e-9 && (c[1] - b[1]).abs() < 1e-9)
        {
            coords.push(b);
        }
    }
    let keypoints = KeypointSet::from_points(coords, frame)
        .map_err(|v| Error::Data(format!("phantom keypoints invalid: {v}")))?;

    // Style stream: seeded by (seed, style) so the same seed renders both
    // modalities of the same geometry.
    let style_tag: u64 = match cfg.modality_style {
        ModalityStyle::BrightOnDark => 0x0b,
        ModalityStyle::DarkOnBright => 0x0d,
    };
    let mut style = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x7374_796c_6500 + style_tag));

    // Smooth background: coarse value-noise grid, bilinearly upsampled.
    let grid = 8usize;
    let coarse = Array2::from_shape_fn((grid, grid), |_| style.random_range(0.0..1.0));
    let bg = resize_bilinear(&coarse, frame);

    // Soft vessel profile from the binary mask (style-dependent blur).
    let mut soft = raster.mask.clone();
    let passes = match cfg.modality_style {
        ModalityStyle::BrightOnDark => 1,
        ModalityStyle::DarkOnBright => 3,
    };
    for _ in 0..passes {
        soft = box_blur3(&soft);
    }

    let mut image = Array2::zeros((frame.height, frame.width));
    for ((y, x), out) in image.indexed_iter_mut() {
        let b = bg[[y, x]];
        let v = soft[[y, x]];
        let noise = cfg.noise_level * 0.12 * (style.random_range(0.0..1.0) - 0.5);
        *out = match cfg.modality_style {
            ModalityStyle::BrightOnDark => 0.12 + 0.18 * b + 0.55 * v + noise,
            ModalityStyle::DarkOnBright => 0.62 + 0.25 * b - 0.45 * v + noise,
        }
        .clamp(0.0, 1.0);
    }

    Ok(Phantom {
        image,
        mask: ScalarMap {
            values: raster.mask,
            role: MapRole::Segmentation,
        },
        keypoints,
    })
}

fn box_blur3(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut sum = 0.0;
        let mut n = 0.0;
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let yy = y as isize + dy;
                let xx = x as isize + dx;
                if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                    sum += img[[yy as usize, xx as usize]];
                    n += 1.0;
                }
            }
        }
        sum / n
    })
}

/// Writes `n_geometries` phantoms in both styles to `dir`: image + mask +
/// annotation triples plus a train manifest. Geometry `i` is labeled when
/// `i % label_every == 0` (`label_every = 0` disables labels); subjects are
/// the geometry ids.
pub fn write_phantom_dataset(
    dir: &Path,
    n_geometries: usize,
    frame: FrameSize,
    seed: u64,
    label_every: usize,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for i in 0..n_geometries {
        for style in [ModalityStyle::BrightOnDark, ModalityStyle::DarkOnBright] {
            let cfg = PhantomConfig {
                frame,
                modality_style: style,
                seed: seed.wrapping_add(i as u64),
                ..Default::default()
            };
            let phantom = generate_phantom(&cfg)?;
            let tag = match style {
                ModalityStyle::BrightOnDark => "a",
                ModalityStyle::DarkOnBright => "b",
            };
            let stem = format!("geo{i:03}_{tag}");
            save_image_gray(&dir.join(format!("{stem}.png")), &phantom.image)?;
            save_map_png(&dir.join(format!("{stem}_mask.png")), &phantom.mask)?;
            let labeled = label_every > 0 && i % label_every == 0 && !phantom.keypoints.is_empty();
            let annotation = if labeled {
                let ann = KeypointAnnotation::from_keypoints(&stem, &phantom.keypoints);
                let ann_path = dir.join(format!("{stem}.json"));
                std::fs::write(&ann_path, serde_json::to_string_pretty(&ann)?)?;
                Some(PathBuf::from(format!("{stem}.json")))
            } else {
                None
            };
            entries.push(ManifestEntry {
                image: PathBuf::from(format!("{stem}.png")),
                annotation,
                modality: tag.to_string(),
                subject: format!("geo{i:03}"),
            });
        }
    }
    let manifest = DatasetManifest {
        split: Split::Train,
        entries,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}
