//! Tape-level forward passes shared by training and inference.

use ndarray::{Array2, Array3};

use super::{Model, NetworkConfig};
use crate::nn::tape::conv_transpose_dense;
use crate::nn::{Tape, Var};
use crate::types::KeypointSet;

/// One injection of a model onto a tape; all forward passes hang off this.
pub struct TapeNet<'t> {
    tape: &'t Tape,
    cfg: NetworkConfig,
    vars: Vec<Var>,
    names: Vec<(String, usize)>,
}

/// Output of [`TapeNet::encode`].
pub struct EncodeOut {
    /// Levels 0..2 fused, level 3 raw (`[C_l, H_l, W_l]` each).
    pub pyramid: Vec<Var>,
    /// `g(I)` as `[N_k, 3E]`; `None` when there were no candidates.
    pub embedding: Option<Var>,
    /// The candidate set the embedding rows correspond to.
    pub used_candidates: KeypointSet,
}

impl<'t> TapeNet<'t> {
    pub(super) fn new(tape: &'t Tape, model: &Model, trainable: bool) -> Self {
        let mut vars = Vec::with_capacity(model.params.len());
        let mut names = Vec::with_capacity(model.params.len());
        for (i, (name, value)) in model.params.iter().enumerate() {
            let v = if trainable {
                tape.param(value.clone())
            } else {
                tape.constant(value.clone())
            };
            vars.push(v);
            names.push((name.to_string(), i));
        }
        Self {
            tape,
            cfg: model.config.clone(),
            vars,
            names,
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Tape vars in parameter-store order (for gradient collection).
    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    fn var(&self, name: &str) -> Var {
        let idx = self
            .names
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .1;
        self.vars[idx]
    }

    /// Grayscale image as a `[1, H, W]` constant.
    pub fn image_input(&self, img: &Array2<f64>) -> Var {
        self.tape.constant(to_chw(img).into_dyn())
    }

    /// Scalar map as a `[1, H, W]` constant.
    pub fn map_input(&self, map: &Array2<f64>) -> Var {
        self.tape.constant(to_chw(map).into_dyn())
    }

    /// conv3x3 → instance norm → ReLU.
    fn conv_block(&self, x: Var, name: &str) -> Var {
        let t = self.tape;
        let y = t.conv2d(x, self.var(&format!("{name}.w")), self.var(&format!("{name}.b")));
        let y = t.instance_norm(
            y,
            self.var(&format!("{name}.gamma")),
            self.var(&format!("{name}.beta")),
            1e-5,
        );
        t.relu(y)
    }

    /// Single self-attention layer (multi-head, residual, no positional
    /// encoding) over `[n, E]` tokens.
    fn attention(&self, level: usize, tokens: Var) -> Var {
        let t = self.tape;
        let e = self.cfg.embed_dim;
        let dh = e / self.cfg.attention_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.attention_heads);
        for h in 0..self.cfg.attention_heads {
            let q = t.matmul(tokens, self.var(&format!("fuse{level}.q{h}")));
            let k = t.matmul(tokens, self.var(&format!("fuse{level}.k{h}")));
            let v = t.matmul(tokens, self.var(&format!("fuse{level}.v{h}")));
            let scores = t.scale(t.matmul(q, t.transpose2(k)), scale);
            let attn = t.softmax_rows(scores);
            heads.push(t.matmul(attn, v));
        }
        let cat = t.concat(1, &heads);
        let out = t.linear(
            cat,
            self.var(&format!("fuse{level}.attn_out_w")),
            self.var(&format!("fuse{level}.attn_out_b")),
        );
        t.add(tokens, out)
    }

    /// Encoder with keypoint-augmented fusion at levels 0..2.
    pub fn encode(&self, img: Var, candidates: &KeypointSet) -> EncodeOut {
        let t = self.tape;
        let use_fusion = self.cfg.fusion_enabled;
        let n = candidates.len();
        let mut pyramid = Vec::with_capacity(4);
        let mut attended_per_level = Vec::new();
        let mut x = img;
        for l in 0..4 {
            let f = self.conv_block(x, &format!("enc{l}"));
            if l == 3 {
                pyramid.push(f);
                break;
            }
            let fused = if use_fusion {
                // Pass-through mixing conv on the features plus a sparse
                // linear scatter of the attended tokens (zero-initialized
                // branch), equivalent to a 1×1 conv on [F_l ; scatter].
                let mixed = t.conv2d(
                    f,
                    self.var(&format!("fuse{l}.mix_f_w")),
                    self.var(&format!("fuse{l}.mix_b")),
                );
                if n > 0 {
                    let (_, hl, wl) = dim3(t, f);
                    let pixels = level_pixels(candidates, l, hl, wl);
                    let raw = t.gather_pixels(f, pixels.clone());
                    let tokens = t.linear(
                        raw,
                        self.var(&format!("fuse{l}.proj_w")),
                        self.var(&format!("fuse{l}.proj_b")),
                    );
                    let attended = self.attention(l, tokens);
                    attended_per_level.push(attended);
                    let scat = self.scatter_linear(attended, pixels, l, hl, wl);
                    t.add(mixed, scat)
                } else {
                    mixed
                }
            } else {
                f
            };
            pyramid.push(fused);
            x = t.maxpool2(fused);
        }

        let embedding = if use_fusion && n > 0 {
            let cat = t.concat(1, &attended_per_level);
            Some(t.linear(cat, self.var("gmlp.w"), self.var("gmlp.b")))
        } else {
            None
        };
        EncodeOut {
            pyramid,
            embedding,
            used_candidates: candidates.clone(),
        }
    }

    /// Places `tokensᵀ·W_s` (collision-averaged) at the candidate pixels of
    /// a zero `[C_l, H_l, W_l]` map.
    fn scatter_linear(
        &self,
        attended: Var,
        pixels: Vec<(usize, usize)>,
        level: usize,
        h: usize,
        w: usize,
    ) -> Var {
        let t = self.tape;
        let scat_tokens = t.matmul(attended, self.var(&format!("fuse{level}.mix_s_w")));
        t.scatter_mean(scat_tokens, pixels, h, w)
    }

    /// Detector decoder over the fused pyramid: `[1, H, W]` probabilities.
    pub fn detect(&self, pyramid: &[Var]) -> Var {
        self.unet_decode(pyramid, "det")
    }

    fn unet_decode(&self, pyramid: &[Var], prefix: &str) -> Var {
        let t = self.tape;
        let mut d = pyramid[3];
        for l in (0..3).rev() {
            let up = t.upsample2(d);
            let cat = t.concat(0, &[up, pyramid[l]]);
            d = self.conv_block(cat, &format!("{prefix}{l}"));
        }
        let logits = t.conv2d(
            d,
            self.var(&format!("{prefix}_out.w")),
            self.var(&format!("{prefix}_out.b")),
        );
        t.sigmoid(logits)
    }

    /// Descriptor-head trunk at the deepest level.
    fn descriptor_mid(&self, top: Var) -> Var {
        self.conv_block(top, "desc")
    }

    /// Raw (pre-normalization) descriptors at sub-pixel full-resolution
    /// points: `[n, D]`.
    pub fn describe_at(&self, top: Var, points: Vec<(f64, f64)>) -> Var {
        let mid = self.descriptor_mid(top);
        self.tape
            .conv_transpose_sample(mid, self.var("desc_up.w"), self.var("desc_up.b"), 8, points)
    }

    /// Full-resolution raw descriptor map `[D, H, W]` (inference only).
    pub fn describe_dense(&self, top: Var) -> Array3<f64> {
        let mid = self.descriptor_mid(top);
        let mid_v = self
            .tape
            .value(mid)
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let w = self
            .tape
            .value(self.var("desc_up.w"))
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let b = self
            .tape
            .value(self.var("desc_up.b"))
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        conv_transpose_dense(&mid_v, &w, &b, 8)
    }

    /// Prompted segmentation: image + keypoint heatmap channels in,
    /// `[1, H, W]` probabilities out.
    pub fn segment(&self, img: Var, kp_heatmap: Var) -> Var {
        let t = self.tape;
        let mut x = t.concat(0, &[img, kp_heatmap]);
        let mut pyramid = Vec::with_capacity(4);
        for l in 0..4 {
            let f = self.conv_block(x, &format!("seg_enc{l}"));
            pyramid.push(f);
            if l < 3 {
                x = t.maxpool2(f);
            }
        }
        self.unet_decode(&pyramid, "seg_dec")
    }
}

/// Nearest coarse pixel per candidate at pyramid level `l`:
/// `floor(coord / 2^l)`, clamped into the level grid.
pub fn level_pixels(candidates: &KeypointSet, l: usize, h: usize, w: usize) -> Vec<(usize, usize)> {
    let f = (1usize << l) as f64;
    candidates
        .iter()
        .map(|(x, y, _)| {
            let px = ((x / f).floor() as usize).min(w - 1);
            let py = ((y / f).floor() as usize).min(h - 1);
            (py, px)
        })
        .collect()
}

fn dim3(tape: &Tape, v: Var) -> (usize, usize, usize) {
    let s = tape.shape(v);
    (s[0], s[1], s[2])
}

fn to_chw(a: &Array2<f64>) -> Array3<f64> {
    let (h, w) = a.dim();
    a.clone().into_shape_with_order((1, h, w)).unwrap()
}
