//! The encoder with keypoint-augmented fusion layers and the three decoder
//! heads (detector, descriptor, segmentation).
//!
//! One [`ParamStore`] holds both the shared-trunk network and the separate
//! prompted segmentation U-Net. All forward passes run on the autodiff
//! tape; inference wraps the same graphs with non-tracking leaves.

mod arch;
mod checkpoint;

pub use arch::TapeNet;
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT};

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Validate, Violation};
use crate::nn::params::{kaiming, ones, zeros};
use crate::nn::{ParamStore, Tape};
use crate::types::{
    DescriptorMap, FeaturePyramid, FrameSize, KeypointEmbedding, KeypointSet, MapRole, ScalarMap,
    DESCRIPTOR_DIM,
};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// Encoder widths `C_0..C_3`.
    pub channels: [usize; 4],
    /// Keypoint-token embedding width `E`.
    pub embed_dim: usize,
    /// Descriptor dimensionality (256).
    pub descriptor_dim: usize,
    pub attention_heads: usize,
    /// `(H, W)`; both divisible by 8.
    pub working_size: (usize, usize),
    /// Decoder widths for levels 2, 1, 0 (detector and segmentation).
    pub decoder_channels: [usize; 3],
    /// Channels of the descriptor-head conv before the transposed conv.
    pub descriptor_mid_channels: usize,
    /// Keypoint-augmented fusion on/off (ablation switch).
    pub fusion_enabled: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            channels: [64, 128, 128, 256],
            embed_dim: 256,
            descriptor_dim: DESCRIPTOR_DIM,
            attention_heads: 4,
            working_size: (768, 768),
            decoder_channels: [64, 64, 32],
            descriptor_mid_channels: 128,
            fusion_enabled: true,
        }
    }
}

impl NetworkConfig {
    /// Desk-scale configuration for tests and quick experiments.
    pub fn tiny(working: usize) -> Self {
        Self {
            channels: [16, 32, 32, 64],
            embed_dim: 64,
            descriptor_dim: DESCRIPTOR_DIM,
            attention_heads: 4,
            working_size: (working, working),
            decoder_channels: [16, 8, 8],
            descriptor_mid_channels: 32,
            fusion_enabled: true,
        }
    }

    pub fn frame(&self) -> FrameSize {
        FrameSize::new(self.working_size.0, self.working_size.1)
    }
}

impl Validate for NetworkConfig {
    fn validate(&self) -> std::result::Result<(), Violation> {
        if self.embed_dim == 0 {
            return Err(Violation {
                path: "embed_dim".into(),
                constraint: "embed_dim > 0".into(),
            });
        }
        if self.descriptor_dim != DESCRIPTOR_DIM {
            return Err(Violation {
                path: "descriptor_dim".into(),
                constraint: format!("descriptor_dim = {DESCRIPTOR_DIM}"),
            });
        }
        if self.working_size.0 % 8 != 0 || self.working_size.1 % 8 != 0 {
            return Err(Violation {
                path: "working_size".into(),
                constraint: "divisible by 8".into(),
            });
        }
        if self.channels.iter().any(|&c| c == 0) || self.decoder_channels.iter().any(|&c| c == 0) {
            return Err(Violation {
                path: "channels".into(),
                constraint: "positive channel counts".into(),
            });
        }
        if self.attention_heads == 0 || self.embed_dim % self.attention_heads != 0 {
            return Err(Violation {
                path: "attention_heads".into(),
                constraint: "heads divide embed_dim".into(),
            });
        }
        Ok(())
    }
}

/// Network parameters plus configuration.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: NetworkConfig,
    pub params: ParamStore,
}

impl Model {
    /// Deterministic initialization.
    ///
    /// The fusion mixing convolution starts as a pass-through (identity on
    /// the convolutional features, zeros on the scatter branch), so fusion
    /// is a no-op at step 0. Detector/segmentation output biases start
    /// negative (sparse-foreground prior).
    pub fn init(config: NetworkConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e65_7477_6f72_6b00);
        let mut p = ParamStore::new();
        let c = config.channels;
        let e = config.embed_dim;
        let heads = config.attention_heads;
        let dh = e / heads;

        let conv_block = |p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize| {
            p.register(format!("{name}.w"), kaiming(rng, &[cout, cin, 3, 3], cin * 9));
            p.register(format!("{name}.b"), zeros(&[cout]));
            p.register(format!("{name}.gamma"), ones(&[cout]));
            p.register(format!("{name}.beta"), zeros(&[cout]));
        };

        // Shared-trunk encoder.
        let mut enc_in = 1;
        for l in 0..4 {
            conv_block(&mut p, &mut rng, &format!("enc{l}"), enc_in, c[l]);
            enc_in = c[l];
        }
        // Keypoint-augmented fusion per level 0..2.
        for (l, &cl) in c.iter().enumerate().take(3) {
            p.register(format!("fuse{l}.proj_w"), kaiming(&mut rng, &[cl, e], cl));
            p.register(format!("fuse{l}.proj_b"), zeros(&[e]));
            for h in 0..heads {
                p.register(format!("fuse{l}.q{h}"), kaiming(&mut rng, &[e, dh], e));
                p.register(format!("fuse{l}.k{h}"), kaiming(&mut rng, &[e, dh], e));
                p.register(format!("fuse{l}.v{h}"), kaiming(&mut rng, &[e, dh], e));
            }
            p.register(format!("fuse{l}.attn_out_w"), kaiming(&mut rng, &[e, e], e));
            p.register(format!("fuse{l}.attn_out_b"), zeros(&[e]));
            // Pass-through initialization: identity on features, zeros on
            // the scattered attention branch.
            let mut ident = zeros(&[cl, cl, 1, 1]);
            for ch in 0..cl {
                ident[[ch, ch, 0, 0]] = 1.0;
            }
            p.register(format!("fuse{l}.mix_f_w"), ident);
            p.register(format!("fuse{l}.mix_s_w"), zeros(&[e, cl]));
            p.register(format!("fuse{l}.mix_b"), zeros(&[cl]));
        }
        // Per-point embedding head g(I).
        p.register("gmlp.w", kaiming(&mut rng, &[3 * e, 3 * e], 3 * e));
        p.register("gmlp.b", zeros(&[3 * e]));

        // Detector decoder (levels 2, 1, 0) + 1×1 output.
        let d = config.decoder_channels;
        conv_block(&mut p, &mut rng, "det2", c[3] + c[2], d[0]);
        conv_block(&mut p, &mut rng, "det1", d[0] + c[1], d[1]);
        conv_block(&mut p, &mut rng, "det0", d[1] + c[0], d[2]);
        p.register("det_out.w", kaiming(&mut rng, &[1, d[2], 1, 1], d[2]));
        p.register("det_out.b", ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1]), -1.0));

        // Descriptor head: conv at the deepest level, then one stride-8
        // transposed convolution back to full resolution.
        let mid = config.descriptor_mid_channels;
        conv_block(&mut p, &mut rng, "desc", c[3], mid);
        p.register(
            "desc_up.w",
            kaiming(&mut rng, &[mid, config.descriptor_dim, 8, 8], mid),
        );
        p.register("desc_up.b", zeros(&[config.descriptor_dim]));

        // Prompted segmentation U-Net (image + heatmap input channels).
        let mut seg_in = 2;
        for l in 0..4 {
            conv_block(&mut p, &mut rng, &format!("seg_enc{l}"), seg_in, c[l]);
            seg_in = c[l];
        }
        conv_block(&mut p, &mut rng, "seg_dec2", c[3] + c[2], d[0]);
        conv_block(&mut p, &mut rng, "seg_dec1", d[0] + c[1], d[1]);
        conv_block(&mut p, &mut rng, "seg_dec0", d[1] + c[0], d[2]);
        p.register("seg_dec_out.w", kaiming(&mut rng, &[1, d[2], 1, 1], d[2]));
        p.register(
            "seg_dec_out.b",
            ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1]), -1.0),
        );

        Self { config, params: p }
    }

    /// Tape-level forward context with gradient tracking (training).
    pub fn trainable<'t>(&self, tape: &'t Tape) -> TapeNet<'t> {
        TapeNet::new(tape, self, true)
    }

    /// Tape-level forward context without gradient tracking (inference).
    pub fn inference<'t>(&self, tape: &'t Tape) -> TapeNet<'t> {
        TapeNet::new(tape, self, false)
    }

    fn check_frame(&self, got: FrameSize) -> Result<()> {
        if got != self.config.frame() {
            return Err(Error::Network(format!(
                "input is {}x{} but the working size is {}x{}",
                got.height, got.width, self.config.working_size.0, self.config.working_size.1
            )));
        }
        Ok(())
    }

    /// Encoder with keypoint-augmented fusion.
    ///
    /// Returns the fused feature pyramid (levels 0..2 fused, level 3 raw)
    /// and the per-candidate embedding `g(I)` (0 rows for no candidates).
    pub fn encode(
        &self,
        img: &Array2<f64>,
        candidates: &KeypointSet,
    ) -> Result<(FeaturePyramid, KeypointEmbedding)> {
        self.check_frame(FrameSize::new(img.dim().0, img.dim().1))?;
        let tape = Tape::new();
        let net = self.inference(&tape);
        let x = net.image_input(img);
        let enc = net.encode(x, candidates);
        let levels = enc
            .pyramid
            .iter()
            .map(|&v| {
                tape.value(v)
                    .into_dimensionality::<ndarray::Ix3>()
                    .expect("pyramid level rank")
            })
            .collect();
        let per_point = match enc.embedding {
            Some(g) => tape
                .value(g)
                .into_dimensionality::<ndarray::Ix2>()
                .expect("embedding rank"),
            None => Array2::zeros((0, 3 * self.config.embed_dim)),
        };
        Ok((
            FeaturePyramid { levels },
            KeypointEmbedding {
                per_point,
                source_keypoints: enc.used_candidates,
            },
        ))
    }

    /// Detector head over a fused pyramid: full-size probability map.
    pub fn detect(&self, pyr: &FeaturePyramid) -> Result<ScalarMap> {
        let tape = Tape::new();
        let net = self.inference(&tape);
        let levels: Vec<_> = pyr
            .levels
            .iter()
            .map(|l| tape.constant(l.clone().into_dyn()))
            .collect();
        let p = net.detect(&levels);
        let v = tape.value(p).into_dimensionality::<ndarray::Ix3>().unwrap();
        let (_, h, w) = v.dim();
        Ok(ScalarMap {
            values: v.into_shape_with_order((h, w)).unwrap(),
            role: MapRole::Probability,
        })
    }

    /// Descriptor head over a fused pyramid: full-size unit-norm map.
    pub fn describe(&self, pyr: &FeaturePyramid) -> Result<DescriptorMap> {
        let tape = Tape::new();
        let net = self.inference(&tape);
        let top = tape.constant(pyr.levels[3].clone().into_dyn());
        let dense = net.describe_dense(top);
        let (d, h, w) = dense.dim();
        // [D, H, W] -> [H, W, D] with per-pixel L2 normalization; zero
        // vectors fall back to e_1.
        let mut out = ndarray::Array3::<f64>::zeros((h, w, d));
        for y in 0..h {
            for x in 0..w {
                let mut norm2 = 0.0;
                for k in 0..d {
                    let v = dense[[k, y, x]];
                    norm2 += v * v;
                }
                let norm = norm2.sqrt();
                if norm < 1e-12 {
                    out[[y, x, 0]] = 1.0;
                } else {
                    for k in 0..d {
                        out[[y, x, k]] = dense[[k, y, x]] / norm;
                    }
                }
            }
        }
        Ok(DescriptorMap { values: out })
    }

    /// Unit-norm descriptors sampled at sub-pixel keypoints (sparse path;
    /// matches [`Model::describe`] + bilinear sampling + renormalization).
    pub fn describe_at(&self, pyr: &FeaturePyramid, points: &[(f64, f64)]) -> Result<Array2<f64>> {
        let tape = Tape::new();
        let net = self.inference(&tape);
        let top = tape.constant(pyr.levels[3].clone().into_dyn());
        let d = net.describe_at(top, points.to_vec());
        let normalized = tape.l2_normalize_rows(d, 1e-12);
        Ok(tape
            .value(normalized)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap())
    }

    /// Keypoint-prompted segmentation of an image.
    pub fn segment(&self, img: &Array2<f64>, kp_heatmap: &ScalarMap) -> Result<ScalarMap> {
        let frame = FrameSize::new(img.dim().0, img.dim().1);
        self.check_frame(frame)?;
        if kp_heatmap.frame() != frame {
            return Err(Error::Network(
                "segment: image and heatmap frames differ".into(),
            ));
        }
        let tape = Tape::new();
        let net = self.inference(&tape);
        let x = net.image_input(img);
        let heat = net.map_input(&kp_heatmap.values);
        let s = net.segment(x, heat);
        let v = tape.value(s).into_dimensionality::<ndarray::Ix3>().unwrap();
        let (_, h, w) = v.dim();
        Ok(ScalarMap {
            values: v.into_shape_with_order((h, w)).unwrap(),
            role: MapRole::Segmentation,
        })
    }
}

/// Full training state: parameters, iteration counter, label bookkeeping
/// and the per-image candidate cache of the iterative loop.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub model: Model,
    /// Optimizer steps taken.
    pub iteration: u64,
    /// Original annotations per labeled image id.
    pub original_labels: BTreeMap<String, KeypointSet>,
    /// Progressively expanded label sets (superset of the originals).
    pub expanded_labels: BTreeMap<String, KeypointSet>,
    /// Iteration-k keypoint candidates per image id.
    pub candidates: BTreeMap<String, KeypointSet>,
}

impl ModelState {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            iteration: 0,
            original_labels: BTreeMap::new(),
            expanded_labels: BTreeMap::new(),
            candidates: BTreeMap::new(),
        }
    }
}

impl Validate for ModelState {
    fn validate(&self) -> std::result::Result<(), Violation> {
        for (id, orig) in &self.original_labels {
            let Some(expanded) = self.expanded_labels.get(id) else {
                return Err(Violation {
                    path: format!("expanded_labels[{id}]"),
                    constraint: "labeled image has an expanded set".into(),
                });
            };
            let have: std::collections::HashSet<(u64, u64)> = expanded
                .coords
                .iter()
                .map(|c| (c[0].to_bits(), c[1].to_bits()))
                .collect();
            for c in &orig.coords {
                if !have.contains(&(c[0].to_bits(), c[1].to_bits())) {
                    return Err(Violation {
                        path: format!("expanded_labels[{id}]"),
                        constraint: "superset of the original annotation".into(),
                    });
                }
            }
        }
        Ok(())
    }
}
