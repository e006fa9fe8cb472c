//! Architecture configuration and the analytic parameter count.

use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub image_size: usize,
    pub d_model: usize,
    pub image_encoder_layers: usize,
    pub text_encoder_layers: usize,
    pub fusion_layers: usize,
    pub decoder_layers: usize,
    pub decoder_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    pub l_max: usize,
    /// Fraction of patches hidden from the online image encoder.
    pub mask_ratio: f64,
    /// Width of the contrastive projection heads.
    pub proj_dim: usize,
    /// LayerNorm epsilon (inside the square root).
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    /// Desk-scale preset: 1/16 of the full-scale geometry.
    fn default() -> Self {
        ModelConfig {
            patch_size: 8,
            image_size: 64,
            d_model: 128,
            image_encoder_layers: 4,
            text_encoder_layers: 2,
            fusion_layers: 2,
            decoder_layers: 2,
            decoder_dim: 64,
            heads: 4,
            mlp_ratio: 4,
            vocab_size: 64,
            l_max: 16,
            mask_ratio: 0.5,
            proj_dim: 64,
            ln_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    /// Full-scale preset: ViT-B/16 image encoder on 256x256 inputs, 6-layer
    /// text encoder, 6-layer fusion learner, 4-layer 512-wide decoder. Used
    /// for compute accounting, not for desk-scale training.
    pub fn full_scale_preset() -> Self {
        ModelConfig {
            patch_size: 16,
            image_size: 256,
            d_model: 768,
            image_encoder_layers: 12,
            text_encoder_layers: 6,
            fusion_layers: 6,
            decoder_layers: 4,
            decoder_dim: 512,
            heads: 12,
            mlp_ratio: 4,
            vocab_size: 30522,
            l_max: 30,
            mask_ratio: 0.5,
            proj_dim: 256,
            ln_eps: 1e-6,
        }
    }

    pub fn num_patches(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    /// Flattened patch length: P * P * 3 channels.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Decoder keeps the encoder head width, so its head count scales with
    /// its hidden size (64/32 -> 2 at desk scale, 512/64 -> 8 full scale).
    pub fn decoder_heads(&self) -> usize {
        self.decoder_dim / self.head_dim()
    }

    /// Number of masked patches at this mask ratio (nearest integer).
    pub fn masked_count(&self) -> usize {
        (self.mask_ratio * self.num_patches() as f64).round() as usize
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(ModelError::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.decoder_dim % self.head_dim() != 0 {
            return Err(ModelError::Config(format!(
                "decoder_dim {} not divisible by head width {}",
                self.decoder_dim,
                self.head_dim()
            )));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(ModelError::Config(format!(
                "mask_ratio {} outside [0, 1)",
                self.mask_ratio
            )));
        }
        let n = self.num_patches();
        let m = self.masked_count();
        if m >= n {
            return Err(ModelError::Config(format!(
                "mask_ratio {} rounds to {m} masked of {n} patches; need M < N",
                self.mask_ratio
            )));
        }
        if self.l_max < 1 {
            return Err(ModelError::Config("l_max must be at least 1".into()));
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("image_encoder_layers", self.image_encoder_layers),
            ("text_encoder_layers", self.text_encoder_layers),
            ("fusion_layers", self.fusion_layers),
            ("decoder_layers", self.decoder_layers),
            ("decoder_dim", self.decoder_dim),
            ("mlp_ratio", self.mlp_ratio),
            ("vocab_size", self.vocab_size),
            ("proj_dim", self.proj_dim),
        ] {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Closed-form parameter count; guards against architecture drift.
    ///
    /// Per self-attention transformer block (width d, mlp ratio r):
    ///   ln1 2d + qkv (3d^2+3d) + out (d^2+d) + ln2 2d + fc1 (rd^2+rd) + fc2 (rd^2+d)
    ///   = (4+2r) d^2 + (9+r) d
    /// A fusion block adds a cross-attention unit (ln 2d + q/k/v/out each d^2+d):
    ///   (8+2r) d^2 + (15+r) d
    /// Embeddings, heads and the temperature are counted term by term below.
    pub fn param_count_formula(&self) -> usize {
        let d = self.d_model;
        let dd = self.decoder_dim;
        let r = self.mlp_ratio;
        let n = self.num_patches();
        let ppc = self.patch_dim();
        let v = self.vocab_size;
        let l = self.l_max;
        let p = self.proj_dim;

        let self_block = |w: usize| (4 + 2 * r) * w * w + (9 + r) * w;
        let fusion_block = (8 + 2 * r) * d * d + (15 + r) * d;

        let image = ppc * d + d          // patch embedding
            + d                          // [CLS] token
            + (n + 1) * d                // positional table
            + self.image_encoder_layers * self_block(d)
            + 2 * d;                     // final norm
        let text = v * d                 // token embeddings
            + l * d                      // positional table
            + self.text_encoder_layers * self_block(d)
            + 2 * d;
        let fusion = self.fusion_layers * fusion_block + 2 * d;
        let decoder = d * dd + dd        // image projection
            + d * dd + dd                // text projection
            + dd                         // mask token
            + (n + 1) * dd               // positional table
            + self.decoder_layers * self_block(dd)
            + 2 * dd
            + dd * ppc + ppc;            // pixel head
        let heads = (d * p + p) * 2      // contrastive projections
            + d * 2 + 2                  // two-way matching head
            + d * v + v                  // vocabulary head
            + 1;                         // log-temperature
        image + text + fusion + decoder + heads
    }
}
