//! The iterative keypoint training loop: five-term objective, per-step
//! candidate feedback into the fusion layers and the segmentation prompt,
//! and per-epoch progressive keypoint expansion.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{color_jitter, invert_polarity, to_working, Dataset};
use crate::error::{Error, Result, Validate, Violation};
use crate::geometry::{
    filter_consistent, nms_extract, render_heatmap, sample_homography, transform_points,
    warp_image, warp_valid_mask, HomographySamplerConfig,
};
use crate::losses::{
    dice_loss_t, seg_consistency_loss_t, ssl_loss_t, total_loss, triplet_loss_t, LossComponents,
    LossRecord, LossWeights,
};
use crate::matching::top_k;
use crate::network::{save_checkpoint, Model, ModelState, NetworkConfig, TapeNet};
use crate::nn::{Adam, Tape, Var};
use crate::types::{FrameSize, Homography, KeypointSet, MapRole, ScalarMap};

/// Learning-rate schedule; the paper states only an initial rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    Cosine,
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub nms_threshold: f64,
    pub nms_radius: f64,
    /// Geometric consistency tolerance in pixels.
    pub consistency_tol: f64,
    /// Minimum distance of an expansion candidate to every existing label.
    pub expansion_min_separation: f64,
    pub heatmap_sigma: f64,
    pub heatmap_kernel: usize,
    /// At most this many candidates feed fusion/prompts (top scores).
    pub candidate_cap: usize,
    pub jitter_strength: f64,
    /// Probability of polarity inversion on the warped branch
    /// (cross-modality augmentation; 0 disables).
    pub polarity_jitter_prob: f64,
    pub triplet_margin: f64,
    pub temperature: f64,
    pub weights: LossWeights,
    pub sampler: HomographySamplerConfig,
    /// Checkpoint cadence in epochs (0 = final checkpoint only).
    pub checkpoint_every: usize,
    pub lr_schedule: LrSchedule,
    /// Progressive keypoint expansion sweeps on/off.
    pub pke_enabled: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 2,
            learning_rate: 1e-4,
            max_epochs: 150,
            nms_threshold: 0.5,
            nms_radius: 10.0,
            consistency_tol: 0.5,
            expansion_min_separation: 10.0,
            heatmap_sigma: 0.2,
            heatmap_kernel: 13,
            candidate_cap: 1024,
            jitter_strength: 0.5,
            polarity_jitter_prob: 0.0,
            triplet_margin: crate::losses::DEFAULT_MARGIN,
            temperature: crate::losses::DEFAULT_TEMPERATURE,
            weights: LossWeights::default(),
            sampler: HomographySamplerConfig::default(),
            checkpoint_every: 10,
            lr_schedule: LrSchedule::Constant,
            pke_enabled: true,
            seed: 0,
        }
    }
}

impl Validate for TrainConfig {
    fn validate(&self) -> std::result::Result<(), Violation> {
        if self.batch_size < 2 {
            return Err(Violation {
                path: "batch_size".into(),
                constraint: "batch_size >= 2 (contrastive loss needs a within-batch negative subject)"
                    .into(),
            });
        }
        if self.learning_rate <= 0.0 {
            return Err(Violation {
                path: "learning_rate".into(),
                constraint: "learning_rate > 0".into(),
            });
        }
        if self.consistency_tol <= 0.0 {
            return Err(Violation {
                path: "consistency_tol".into(),
                constraint: "positive".into(),
            });
        }
        self.sampler.validate()
    }
}

/// One training image at working resolution.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub id: String,
    pub subject: String,
    pub image: Array2<f64>,
    pub labels: Option<KeypointSet>,
}

/// Loads dataset entries and rescales images and annotations to the
/// working size.
pub fn prepare_items(ds: &Dataset, working: FrameSize) -> Result<Vec<TrainItem>> {
    let mut items = Vec::with_capacity(ds.entries.len());
    for e in &ds.entries {
        let img = crate::data::load_image_gray(&e.image_path)?;
        let (image, labels, _) = to_working(&img, e.labels.as_ref(), working);
        items.push(TrainItem {
            id: e.id.clone(),
            subject: e.subject.clone(),
            image,
            labels,
        });
    }
    Ok(items)
}

/// Simple FNV-style seed derivation for independent RNG streams.
pub fn derive_seed(base: u64, tag: &str, a: u64, b: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ base;
    for byte in tag.bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h ^= a.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    h = h.wrapping_mul(0x100_0000_01b3);
    h ^= b.wrapping_add(0x517c_c1b7_2722_0a95);
    h.wrapping_mul(0x100_0000_01b3)
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub records: Vec<LossRecord>,
    /// False when the step was aborted on a non-finite loss.
    pub updated: bool,
}

/// One label-expansion event (for the expansion log).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionEvent {
    pub epoch: u64,
    pub image_id: String,
    pub point: [f64; 2],
    /// Distance to the validating back-mapped detection (≤ tolerance).
    pub consistency_distance: f64,
}

struct BranchForward {
    pyramid: Vec<Var>,
    prob: Option<Var>,
    embedding: Option<Var>,
}

fn forward_branch(
    net: &TapeNet<'_>,
    image: &Array2<f64>,
    candidates: &KeypointSet,
    with_detector: bool,
) -> BranchForward {
    let x = net.image_input(image);
    let enc = net.encode(x, candidates);
    let prob = with_detector.then(|| net.detect(&enc.pyramid));
    BranchForward {
        prob,
        embedding: enc.embedding,
        pyramid: enc.pyramid,
    }
}

/// Probability map value of a `[1, H, W]` tape var.
fn prob_map(tape: &Tape, v: Var) -> ScalarMap {
    let arr = tape.value(v).into_dimensionality::<ndarray::Ix3>().unwrap();
    let (_, h, w) = arr.dim();
    ScalarMap {
        values: arr.into_shape_with_order((h, w)).unwrap(),
        role: MapRole::Probability,
    }
}

/// Detached detector pass over tape pyramid values (no gradients): the
/// warped-branch map only produces NMS targets.
fn detect_detached(tape: &Tape, model: &Model, pyramid: &[Var]) -> crate::error::Result<ScalarMap> {
    let levels = pyramid
        .iter()
        .map(|&v| {
            tape.value(v)
                .into_dimensionality::<ndarray::Ix3>()
                .expect("pyramid level rank")
        })
        .collect();
    model.detect(&crate::types::FeaturePyramid { levels })
}

/// One optimizer step over a batch (≥ 2 distinct subjects): forwards the
/// original and warped branch of every image, assembles the five losses,
/// applies one update, and refreshes the candidate cache from this step's
/// probability maps.
pub fn train_step(
    state: &mut ModelState,
    opt: &mut Adam,
    batch: &[&TrainItem],
    cfg: &TrainConfig,
    epoch: u64,
    step_index: u64,
) -> Result<StepOutcome> {
    if batch.len() < 2 {
        return Err(Error::Train("train_step: batch must contain >= 2 images".into()));
    }
    let first_subject = &batch[0].subject;
    if batch.iter().all(|i| &i.subject == first_subject) {
        return Err(Error::Train(
            "train_step: distinct subjects required (within-batch contrastive negatives)".into(),
        ));
    }
    let frame = state.model.config.frame();
    let step_seed = derive_seed(cfg.seed, "step", epoch, step_index);

    let tape = Tape::new();
    let net = state.model.trainable(&tape);

    struct PerImage {
        id: String,
        main: BranchForward,
        warped: BranchForward,
        homography: Homography,
        terms: LossComponentsVars,
        raw_candidates: KeypointSet,
    }
    #[derive(Default)]
    struct LossComponentsVars {
        det_sup: Option<Var>,
        det_self: Option<Var>,
        des: Option<Var>,
        seg: Option<Var>,
        ssl: Option<Var>,
    }

    let mut per_image: Vec<PerImage> = Vec::with_capacity(batch.len());
    for (bi, item) in batch.iter().enumerate() {
        // (1) iteration-k candidates: labels for labeled images at k=0,
        // empty for unlabeled, cached detections afterwards.
        let raw_candidates = state
            .candidates
            .get(&item.id)
            .cloned()
            .unwrap_or_else(|| match &item.labels {
                Some(labels) => state
                    .expanded_labels
                    .get(&item.id)
                    .cloned()
                    .unwrap_or_else(|| labels.clone()),
                None => KeypointSet::empty(frame),
            });
        let raw_candidates = top_k(raw_candidates, cfg.candidate_cap);

        // (2) per-image homography.
        let hom_cfg = HomographySamplerConfig {
            seed: derive_seed(step_seed, "hom", bi as u64, 0),
            ..cfg.sampler
        };
        let homography = sample_homography(&hom_cfg, frame)?;

        // Candidates used by both branches: those staying in frame under H,
        // so embedding rows correspond 1:1.
        let cand_used = filter_in_frame_under(&raw_candidates, &homography);
        let cand_warped = transform_points(&cand_used, &homography).in_frame();

        // (3) warped-branch image with augmentation.
        let mut warped_img = warp_image(&item.image, &homography, frame)?;
        warped_img = color_jitter(
            &warped_img,
            cfg.jitter_strength,
            derive_seed(step_seed, "jitter", bi as u64, 0),
        )?;
        if cfg.polarity_jitter_prob > 0.0 {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(step_seed, "polarity", bi as u64, 0));
            if rand::Rng::random_range(&mut rng, 0.0..1.0) < cfg.polarity_jitter_prob {
                warped_img = invert_polarity(&warped_img);
            }
        }

        let main = forward_branch(&net, &item.image, &cand_used, true);
        let warped = forward_branch(&net, &warped_img, &cand_warped, false);

        let mut terms = LossComponentsVars::default();

        // (5a) supervised detection loss on the expanded label set.
        let main_prob = main.prob.expect("main branch carries the detector");
        if item.labels.is_some() {
            let labels = state
                .expanded_labels
                .get(&item.id)
                .cloned()
                .unwrap_or_else(|| item.labels.clone().unwrap());
            if !labels.is_empty() {
                let heat =
                    render_heatmap(&labels, cfg.heatmap_sigma, cfg.heatmap_kernel, frame)?;
                let target = net.map_input(&heat.values);
                terms.det_sup = Some(dice_loss_t(&tape, main_prob, target));
            }
        }

        // (5b) self-supervised detection loss from consistent detections;
        // the warped map is detached (it only provides targets).
        let p_main = prob_map(&tape, main_prob);
        let p_warp = detect_detached(&tape, &state.model, &warped.pyramid)?;
        let detections = nms_extract(&p_main, cfg.nms_threshold, cfg.nms_radius)?;
        let warped_detections = nms_extract(&p_warp, cfg.nms_threshold, cfg.nms_radius)?;
        let inv = homography
            .inverse()
            .ok_or_else(|| Error::Train("train_step: singular homography".into()))?;
        let backmapped = transform_points(&warped_detections, &inv).in_frame();
        let consistent = filter_consistent(&detections, &backmapped, cfg.consistency_tol)?;
        if !consistent.is_empty() {
            let heat =
                render_heatmap(&consistent, cfg.heatmap_sigma, cfg.heatmap_kernel, frame)?;
            let target = net.map_input(&heat.values);
            terms.det_self = Some(dice_loss_t(&tape, main_prob, target));
        }

        // (5c) descriptor triplet loss on the expanded labels.
        if cfg.weights.w_des > 0.0 {
            if let Some(labels) = state.expanded_labels.get(&item.id) {
                if let Ok((anchor_pts, positive_pts)) =
                    crate::losses::correspondences_under(labels, &homography)
                {
                    let anchors = net.describe_at(main.pyramid[3], anchor_pts);
                    let positives = net.describe_at(warped.pyramid[3], positive_pts);
                    terms.des = Some(triplet_loss_t(&tape, anchors, positives, cfg.triplet_margin));
                }
            }
        }

        // (5d) prompted segmentation consistency.
        if cfg.weights.w_seg > 0.0 {
            let mask = warp_valid_mask(&inv, frame, frame)?;
            let valid_frac = mask.sum() / (frame.height * frame.width) as f64;
            if valid_frac >= 0.10 {
                let prompt = render_heatmap(&cand_used, cfg.heatmap_sigma, cfg.heatmap_kernel, frame)?;
                let prompt_w =
                    render_heatmap(&cand_warped, cfg.heatmap_sigma, cfg.heatmap_kernel, frame)?;
                let s = net.segment(net.image_input(&item.image), net.map_input(&prompt.values));
                let s_w = net.segment(net.image_input(&warped_img), net.map_input(&prompt_w.values));
                let mask_v = net.map_input(&mask);
                terms.seg = Some(seg_consistency_loss_t(
                    &tape,
                    s,
                    s_w,
                    mask_v,
                    &homography,
                    frame.height,
                    frame.width,
                ));
            }
        }

        per_image.push(PerImage {
            id: item.id.clone(),
            main,
            warped,
            homography,
            terms,
            raw_candidates,
        });
    }

    // (5e) contrastive embedding loss: negatives come from another subject
    // in the batch, both plain and warped by this image's homography.
    if cfg.weights.w_ssl > 0.0 && state.model.config.fusion_enabled {
        for b in 0..per_image.len() {
            // First cyclic neighbor from a different subject.
            let Some(r) = (1..per_image.len())
                .map(|k| (b + k) % per_image.len())
                .find(|&r| batch[r].subject != batch[b].subject)
            else {
                continue;
            };
            let (g_b, g_bw) = (per_image[b].main.embedding, per_image[b].warped.embedding);
            let g_r = per_image[r].main.embedding;
            let (Some(g_b), Some(g_bw), Some(g_r)) = (g_b, g_bw, g_r) else {
                continue;
            };
            // Extra encoder pass: the negative subject under this image's
            // homography, g(H_b(I_r)).
            let r_item = batch[r];
            let cand_r_warped = transform_points(
                &per_image[r].raw_candidates,
                &per_image[b].homography,
            )
            .in_frame();
            if cand_r_warped.is_empty() {
                continue;
            }
            let warped_r = warp_image(&r_item.image, &per_image[b].homography, frame)?;
            let enc_rw = net.encode(net.image_input(&warped_r), &cand_r_warped);
            let Some(g_rw) = enc_rw.embedding else {
                continue;
            };
            per_image[b].terms.ssl = Some(ssl_loss_t(
                &tape,
                g_b,
                g_bw,
                g_r,
                g_rw,
                cfg.temperature,
            ));
        }
    }

    // Weighted per-image totals, averaged over the batch.
    let mut batch_terms: Vec<Var> = Vec::new();
    let mut records = Vec::with_capacity(per_image.len());
    for pi in &per_image {
        let mut image_terms: Vec<Var> = Vec::new();
        let weighted = [
            (pi.terms.det_sup, cfg.weights.w_det_sup),
            (pi.terms.det_self, cfg.weights.w_det_self),
            (pi.terms.des, cfg.weights.w_des),
            (pi.terms.seg, cfg.weights.w_seg),
            (pi.terms.ssl, cfg.weights.w_ssl),
        ];
        for (term, w) in weighted {
            if let Some(v) = term {
                image_terms.push(tape.scale(v, w));
            }
        }
        if let Some(total) = image_terms
            .into_iter()
            .reduce(|a, b| tape.add(a, b))
        {
            batch_terms.push(total);
        }
        let components = LossComponents {
            det_sup: pi.terms.det_sup.map(|v| tape.scalar(v)),
            det_self: pi.terms.det_self.map(|v| tape.scalar(v)),
            des: pi.terms.des.map(|v| tape.scalar(v)),
            seg: pi.terms.seg.map(|v| tape.scalar(v)),
            ssl: pi.terms.ssl.map(|v| tape.scalar(v)),
        };
        let total = total_loss(&components, &cfg.weights).unwrap_or(f64::NAN);
        records.push(LossRecord {
            step: state.iteration,
            epoch,
            image_id: pi.id.clone(),
            components,
            total,
        });
    }

    let Some(sum) = batch_terms.into_iter().reduce(|a, b| tape.add(a, b)) else {
        // Nothing to optimize this step (all terms skipped).
        state.iteration += 1;
        return Ok(StepOutcome {
            records,
            updated: false,
        });
    };
    let objective = tape.scale(sum, 1.0 / batch.len() as f64);
    let total_value = tape.scalar(objective);
    if !total_value.is_finite() {
        // Abort the update, keep the previous state.
        state.iteration += 1;
        return Ok(StepOutcome {
            records,
            updated: false,
        });
    }

    let mut grads = tape.backward(objective);
    let grad_vec: Vec<ndarray::ArrayD<f64>> = net
        .param_vars()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            grads
                .take(*v)
                .unwrap_or_else(|| ndarray::ArrayD::zeros(state.model.params.get(i).raw_dim()))
        })
        .collect();
    let lr = match cfg.lr_schedule {
        LrSchedule::Constant => cfg.learning_rate,
        LrSchedule::Cosine => {
            let t = epoch as f64 / cfg.max_epochs.max(1) as f64;
            cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    };
    opt.step_with_lr(&mut state.model.params, &grad_vec, lr);

    // (7) refresh the candidate cache from this step's probability maps.
    for (pi, _item) in per_image.iter().zip(batch.iter()) {
        let p = prob_map(&tape, pi.main.prob.expect("main branch detector"));
        let fresh = nms_extract(&p, cfg.nms_threshold, cfg.nms_radius)?;
        state
            .candidates
            .insert(pi.id.clone(), top_k(fresh, cfg.candidate_cap));
    }
    state.iteration += 1;
    Ok(StepOutcome {
        records,
        updated: true,
    })
}

/// Keypoints whose image under `h` stays inside their frame.
fn filter_in_frame_under(pts: &KeypointSet, h: &Homography) -> KeypointSet {
    let mut coords = Vec::new();
    let mut scores = Vec::new();
    for (x, y, s) in pts.iter() {
        if let Some((wx, wy)) = h.apply(x, y) {
            if pts.frame.contains(wx, wy) {
                coords.push([x, y]);
                scores.push(s);
            }
        }
    }
    KeypointSet {
        coords,
        scores,
        frame: pts.frame,
    }
}

/// Progressive keypoint expansion for one labeled image: detections that
/// survive the warp-consistency filter and keep their distance from every
/// existing label are appended to the expanded set.
pub fn expand_labels(
    state: &ModelState,
    image: &Array2<f64>,
    image_id: &str,
    cfg: &TrainConfig,
    epoch: u64,
) -> Result<(KeypointSet, Vec<ExpansionEvent>)> {
    let frame = state.model.config.frame();
    let labels = state
        .expanded_labels
        .get(image_id)
        .cloned()
        .ok_or_else(|| Error::Train(format!("expand_labels: `{image_id}` has no label set")))?;

    let candidates = state
        .candidates
        .get(image_id)
        .cloned()
        .unwrap_or_else(|| labels.clone());
    let hom_cfg = HomographySamplerConfig {
        seed: derive_seed(cfg.seed, "pke", epoch, hash_id(image_id)),
        ..cfg.sampler
    };
    let homography = sample_homography(&hom_cfg, frame)?;
    let cand_used = filter_in_frame_under(&candidates, &homography);
    let cand_warped = transform_points(&cand_used, &homography).in_frame();

    let (pyr, _) = state.model.encode(image, &cand_used)?;
    let p = state.model.detect(&pyr)?;
    let detections = top_k(
        nms_extract(&p, cfg.nms_threshold, cfg.nms_radius)?,
        cfg.candidate_cap,
    );

    let warped_img = warp_image(image, &homography, frame)?;
    let (pyr_w, _) = state.model.encode(&warped_img, &cand_warped)?;
    let p_w = state.model.detect(&pyr_w)?;
    let warped_detections = nms_extract(&p_w, cfg.nms_threshold, cfg.nms_radius)?;
    let inv = homography
        .inverse()
        .ok_or_else(|| Error::Train("expand_labels: singular homography".into()))?;
    let backmapped = transform_points(&warped_detections, &inv).in_frame();

    let consistent = filter_consistent(&detections, &backmapped, cfg.consistency_tol)?;

    let min_sep = cfg.expansion_min_separation;
    let mut out = labels.clone();
    let mut events = Vec::new();
    for (x, y, score) in consistent.iter() {
        let far_enough = out
            .coords
            .iter()
            .all(|c| ((c[0] - x).powi(2) + (c[1] - y).powi(2)).sqrt() > min_sep);
        if !far_enough {
            continue;
        }
        // Distance to the nearest validating back-mapped detection.
        let dist = backmapped
            .coords
            .iter()
            .map(|c| ((c[0] - x).powi(2) + (c[1] - y).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min);
        out.coords.push([x, y]);
        out.scores.push(score.clamp(0.0, 1.0));
        events.push(ExpansionEvent {
            epoch,
            image_id: image_id.to_string(),
            point: [x, y],
            consistency_distance: dist,
        });
    }
    Ok((out, events))
}

fn hash_id(id: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Detection repeatability: fraction of detections whose back-mapped
/// counterpart under a random homography lies within `tol` pixels,
/// averaged over items and homographies (top-`limit` detections).
pub fn evaluate_repeatability(
    model: &Model,
    items: &[TrainItem],
    cfg: &TrainConfig,
    n_homographies: u64,
    limit: usize,
    tol: f64,
) -> Result<f64> {
    let frame = model.config.frame();
    let empty = KeypointSet::empty(frame);
    let mut total = 0.0;
    let mut count = 0.0;
    for (ii, item) in items.iter().enumerate() {
        let (pyr, _) = model.encode(&item.image, &empty)?;
        let p = model.detect(&pyr)?;
        let detections = top_k(nms_extract(&p, cfg.nms_threshold, cfg.nms_radius)?, limit);
        for j in 0..n_homographies {
            let hom_cfg = HomographySamplerConfig {
                seed: derive_seed(cfg.seed, "repeat", ii as u64, j),
                ..cfg.sampler
            };
            let h = sample_homography(&hom_cfg, frame)?;
            let warped = warp_image(&item.image, &h, frame)?;
            let (pyr_w, _) = model.encode(&warped, &empty)?;
            let p_w = model.detect(&pyr_w)?;
            let det_w = top_k(nms_extract(&p_w, cfg.nms_threshold, cfg.nms_radius)?, limit);
            let inv = h.inverse().expect("sampled homography invertible");
            let backmapped = transform_points(&det_w, &inv).in_frame();
            let valid = filter_in_frame_under(&detections, &h);
            if valid.is_empty() {
                total += 0.0;
                count += 1.0;
                continue;
            }
            let consistent = filter_consistent(&valid, &backmapped, tol)?;
            total += consistent.len() as f64 / valid.len() as f64;
            count += 1.0;
        }
    }
    if count == 0.0 {
        return Ok(0.0);
    }
    Ok(total / count)
}

/// Training summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub steps: u64,
    /// Labels added by expansion across the run.
    pub expansion_added: usize,
    /// Per-epoch validation repeatability (empty without a val set).
    pub repeatability: Vec<f64>,
    /// Mean total loss of the final epoch.
    pub final_mean_total: f64,
    pub checkpoints: Vec<PathBuf>,
}

/// Run directory writer for loss/expansion logs and checkpoints.
struct RunLogs {
    loss_log: std::io::BufWriter<std::fs::File>,
    expansion_log: std::io::BufWriter<std::fs::File>,
    dir: PathBuf,
}

impl RunLogs {
    fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir.join("checkpoints"))?;
        Ok(Self {
            loss_log: std::io::BufWriter::new(std::fs::File::create(dir.join("loss_log.jsonl"))?),
            expansion_log: std::io::BufWriter::new(std::fs::File::create(
                dir.join("expansion_log.jsonl"),
            )?),
            dir: dir.to_path_buf(),
        })
    }
}

/// Full training loop: epochs of batched steps with per-epoch expansion
/// sweeps over the labeled images, periodic checkpoints and (with a val
/// set) a best-repeatability checkpoint. Deterministic for a fixed seed.
pub fn train(
    network: NetworkConfig,
    items: &[TrainItem],
    val_items: &[TrainItem],
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<(ModelState, TrainReport)> {
    cfg.validate().map_err(Error::Invalid)?;
    network.validate().map_err(Error::Invalid)?;
    if items.is_empty() {
        return Err(Error::Train("train: empty dataset".into()));
    }
    let labeled = items.iter().filter(|i| i.labels.is_some()).count();
    if labeled == 0 {
        return Err(Error::Train(
            "train: the supervised detection loss requires labeled data; the dataset has no labeled images"
                .into(),
        ));
    }
    let frame = network.frame();
    for item in items {
        let (h, w) = item.image.dim();
        if FrameSize::new(h, w) != frame {
            return Err(Error::Train(format!(
                "train: item `{}` is {h}x{w}, expected working size {}x{}",
                item.id, frame.height, frame.width
            )));
        }
    }

    let model = Model::init(network, cfg.seed);
    let mut state = ModelState::new(model);
    for item in items {
        if let Some(labels) = &item.labels {
            state.original_labels.insert(item.id.clone(), labels.clone());
            state.expanded_labels.insert(item.id.clone(), labels.clone());
            state.candidates.insert(
                item.id.clone(),
                top_k(labels.clone(), cfg.candidate_cap),
            );
        }
    }
    let mut opt = Adam::new(cfg.learning_rate, &state.model.params);
    let mut logs = match run_dir {
        Some(dir) => Some(RunLogs::create(dir)?),
        None => None,
    };

    let mut report = TrainReport {
        epochs_run: 0,
        steps: 0,
        expansion_added: 0,
        repeatability: Vec::new(),
        final_mean_total: f64::NAN,
        checkpoints: Vec::new(),
    };
    let mut best_repeatability = f64::NEG_INFINITY;

    for epoch in 0..cfg.max_epochs as u64 {
        // Deterministic shuffle with distinct-subject batch fixup.
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "order", epoch, 0));
        order.shuffle(&mut rng);
        fixup_batches(&mut order, items, cfg.batch_size);

        let mut epoch_totals = Vec::new();
        let mut step_in_epoch = 0u64;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < cfg.batch_size {
                break; // drop the remainder
            }
            let batch: Vec<&TrainItem> = chunk.iter().map(|&i| &items[i]).collect();
            if batch
                .iter()
                .all(|i| i.subject == batch[0].subject)
            {
                continue; // unfixable same-subject batch
            }
            let outcome = train_step(&mut state, &mut opt, &batch, cfg, epoch, step_in_epoch)?;
            for record in &outcome.records {
                epoch_totals.push(record.total);
                if let Some(logs) = logs.as_mut() {
                    serde_json::to_writer(&mut logs.loss_log, record)?;
                    logs.loss_log.write_all(b"\n")?;
                }
            }
            report.steps += 1;
            step_in_epoch += 1;
        }

        // Per-epoch progressive expansion over the labeled images.
        if cfg.pke_enabled {
            for item in items.iter().filter(|i| i.labels.is_some()) {
                let (expanded, events) =
                    expand_labels(&state, &item.image, &item.id, cfg, epoch)?;
                report.expansion_added += events.len();
                state.expanded_labels.insert(item.id.clone(), expanded);
                if let Some(logs) = logs.as_mut() {
                    for ev in &events {
                        serde_json::to_writer(&mut logs.expansion_log, ev)?;
                        logs.expansion_log.write_all(b"\n")?;
                    }
                }
            }
        }

        if !val_items.is_empty() {
            let rep = evaluate_repeatability(&state.model, val_items, cfg, 2, 100, 3.0)?;
            report.repeatability.push(rep);
            if rep > best_repeatability {
                best_repeatability = rep;
                if let Some(logs) = logs.as_ref() {
                    let path = logs.dir.join("checkpoints/best.ckpt");
                    save_checkpoint(&state, &path)?;
                }
            }
        }

        if cfg.checkpoint_every > 0 && (epoch as usize + 1) % cfg.checkpoint_every == 0 {
            if let Some(logs) = logs.as_ref() {
                let path = logs
                    .dir
                    .join(format!("checkpoints/epoch_{:04}.ckpt", epoch + 1));
                save_checkpoint(&state, &path)?;
                report.checkpoints.push(path);
            }
        }

        report.epochs_run = epoch as usize + 1;
        if !epoch_totals.is_empty() {
            report.final_mean_total =
                epoch_totals.iter().sum::<f64>() / epoch_totals.len() as f64;
        }
    }

    if let Some(logs) = logs.as_mut() {
        logs.loss_log.flush()?;
        logs.expansion_log.flush()?;
        let path = logs.dir.join("checkpoints/final.ckpt");
        save_checkpoint(&state, &path)?;
        report.checkpoints.push(path);
    }
    Ok((state, report))
}

/// Swaps entries so each `batch_size` chunk holds ≥ 2 subjects when the
/// pool allows it.
fn fixup_batches(order: &mut [usize], items: &[TrainItem], batch_size: usize) {
    let n_full = order.len() / batch_size;
    for b in 0..n_full {
        let start = b * batch_size;
        let chunk_same = |order: &[usize]| {
            let s = &items[order[start]].subject;
            (1..batch_size).all(|k| &items[order[start + k]].subject == s)
        };
        if !chunk_same(order) {
            continue;
        }
        let subject = items[order[start]].subject.clone();
        // Find a later entry with a different subject and swap it in.
        if let Some(j) = (start + batch_size..order.len())
            .find(|&j| items[order[j]].subject != subject)
        {
            order.swap(start + 1, j);
        }
    }
}

/// Expanded label sets keyed by image id (for tests and reporting).
pub fn expanded_snapshot(state: &ModelState) -> BTreeMap<String, usize> {
    state
        .expanded_labels
        .iter()
        .map(|(k, v)| (k.clone(), v.len()))
        .collect()
}
