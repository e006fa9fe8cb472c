//! Model core: configuration, parameters, masking, forwards, and EMA.

mod config;
mod forward;
mod mask;
mod params;

pub use config::ModelConfig;
pub use forward::{
    cls_attention_profile, decode_image, encode_image_full, encode_image_full_with_attention,
    encode_image_visible, encode_text, fuse, key_mask_tensor, take_cls,
};
pub use mask::{sample_mask_plan, MaskPlan};
pub use params::{
    ema_update, HeadsP, ImageEncoderP, Linear, ModelParams, MomentumShadow, TextEncoderP, Visit,
    TAU_INIT, TAU_MAX, TAU_MIN,
};

pub type ModelResult<T> = std::result::Result<T, ModelError>;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("model config error: {0}")]
    Config(String),
    #[error("model contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradcheck, Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            patch_size: 4,
            image_size: 8,
            d_model: 8,
            image_encoder_layers: 1,
            text_encoder_layers: 1,
            fusion_layers: 1,
            decoder_layers: 1,
            decoder_dim: 4,
            heads: 2,
            mlp_ratio: 2,
            vocab_size: 12,
            l_max: 5,
            mask_ratio: 0.5,
            proj_dim: 4,
            ln_eps: 1e-6,
        }
    }

    fn random_grids(rng: &mut ChaCha8Rng, b: usize, cfg: &ModelConfig) -> Tensor {
        let n = cfg.num_patches() * cfg.patch_dim() * b;
        let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        Tensor::from_vec(&[b, cfg.num_patches(), cfg.patch_dim()], data).unwrap()
    }

    #[test]
    fn visible_encoding_with_zero_ratio_equals_full_encoding() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ModelParams::init(&cfg, &mut rng).unwrap();
        let grids = random_grids(&mut rng, 2, &cfg);
        let tape = Tape::inference();
        let plans = vec![MaskPlan::full(cfg.num_patches()); 2];
        let a = encode_image_visible(&tape, &p.img, &grids, &plans, cfg.heads, cfg.ln_eps).unwrap();
        let b = encode_image_full(&tape, &p.img, &grids, cfg.heads, cfg.ln_eps).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
        assert_eq!(b.shape(), &[2, 1 + cfg.num_patches(), cfg.d_model]);
    }

    #[test]
    fn visible_sequence_length_tracks_plans() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ModelParams::init(&cfg, &mut rng).unwrap();
        let n = cfg.num_patches();
        for seed in 0..8 {
            let mut prng = ChaCha8Rng::seed_from_u64(seed);
            let plan = sample_mask_plan(&mut prng, n, 0.5).unwrap();
            let k = plan.num_visible();
            let grids = random_grids(&mut rng, 1, &cfg);
            let tape = Tape::inference();
            let out =
                encode_image_visible(&tape, &p.img, &grids, &[plan], cfg.heads, cfg.ln_eps)
                    .unwrap();
            assert_eq!(out.shape(), &[1, 1 + k, cfg.d_model]);
        }
    }

    #[test]
    fn masked_set_order_is_irrelevant() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ModelParams::init(&cfg, &mut rng).unwrap();
        let grids = random_grids(&mut rng, 1, &cfg);
        let tape = Tape::inference();
        let a = MaskPlan::new(vec![0, 2], vec![1, 3]);
        let b = MaskPlan::new(vec![2, 0], vec![3, 1]);
        let ya = encode_image_visible(&tape, &p.img, &grids, &[a], cfg.heads, cfg.ln_eps).unwrap();
        let yb = encode_image_visible(&tape, &p.img, &grids, &[b], cfg.heads, cfg.ln_eps).unwrap();
        assert_eq!(ya.to_vec(), yb.to_vec());
    }

    #[test]
    fn cls_reacts_to_single_patch_perturbation() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = ModelParams::init(&cfg, &mut rng).unwrap();
        let grids = random_grids(&mut rng, 1, &cfg);
        let tape = Tape::inference();
        let base = encode_image_full(&tape, &p.img, &grids, cfg.heads, cfg.ln_eps).unwrap();
        let mut bumped = grids.to_vec();
        bumped[0] += 0.25;
        let grids2 = Tensor::from_vec(grids.shape(), bumped).unwrap();
        let out = encode_image_full(&tape, &p.img, &grids2, cfg.heads, cfg.ln_eps).unwrap();
        let d = cfg.d_model;
        let diff: f64 = base.to_vec()[..d]
            .iter()
            .zip(&out.to_vec()[..d])
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert!(diff > 0.0);
    }

    #[test]
    fn text_cls_ignores_pad_tail_length() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ModelParams::init(&cfg, &mut rng).unwrap();
        let tape = Tape::inference();
        let short_ids = vec![vec![1usize, 4, 5]];
        let short_pad = vec![vec![false, false, false]];
        let long_ids = vec![vec![1usize, 4, 5, 0, 0]];
        let long_pad = vec![vec![false, false, false, true, true]];
        let a = encode_text(&tape, &p.txt, &short_ids, &short_pad, cfg.heads, cfg.ln_eps).unwrap();
        let b = encode_text(&tape, &p.txt, &long_ids, &long_pad, cfg.heads, cfg.ln_eps).unwrap();
        let d = cfg.d_model;
        for (x, y) in a.to_vec()[..d].iter().zip(&b.to_vec()[..d]) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn cls_only_sequence_is_accepted() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = ModelParams::init(&cfg, &mut rng).unwrap();
        let tape = Tape::inference();
        let out = encode_text(&tape, &p.txt, &[vec![1]], &[vec![false]], cfg.heads, cfg.ln_eps)
            .unwrap();
        assert_eq!(out.shape(), &[1, 1, cfg.d_model]);
    }

    #[test]
    fn out_of_range_token_is_a_data_error() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = ModelParams::init(&cfg, &mut rng).unwrap();
        let tape = Tape::inference();
        let r = encode_text(&tape, &p.txt, &[vec![99]], &[vec![false]], cfg.heads, cfg.ln_eps);
        assert!(r.is_err());
    }

    #[test]
    fn text_encoder_gradient_check() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = ModelParams::init(&cfg, &mut rng).unwrap();
        let ids = vec![vec![1usize, 4, 6, 0], vec![1, 7, 0, 0]];
        let pads = vec![
            vec![false, false, false, true],
            vec![false, true, true, true],
        ];
        // weight tensor turning the encoding into a scalar
        let w: Vec<f64> = (0..2 * 4 * cfg.d_model).map(|i| ((i % 7) as f64 - 3.0) * 0.1).collect();
        let w = Tensor::from_vec(&[2, 4, cfg.d_model], w).unwrap();
        let leaves: Vec<(String, Tensor)> = {
            let mut v = Vec::new();
            let mut push = |name: String, t: &Tensor| v.push((name, t.clone()));
            p.txt.visit("txt", &mut push);
            v
        };
        let refs: Vec<&Tensor> = leaves.iter().map(|(_, t)| t).collect();
        let report = gradcheck::check_gradients(
            |tape| {
                let enc = encode_text(tape, &p.txt, &ids, &pads, cfg.heads, cfg.ln_eps)
                    .map_err(|e| match e {
                        ModelError::Tensor(t) => t,
                        other => crate::tensor::TensorError::Contract {
                            op: "encode_text",
                            msg: other.to_string(),
                        },
                    })?;
                tape.sum_all(&tape.mul(&enc, &w)?)
            },
            &refs,
            gradcheck::FdConfig {
                max_per_leaf: 12,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn pad_mask_is_ragged_error() {
        assert!(key_mask_tensor(&[vec![false, true], vec![false]]).is_err());
    }

    #[test]
    fn fusion_handles_zero_image_sequence() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = ModelParams::init(&cfg, &mut rng).unwrap();
        let tape = Tape::inference();
        let img = Tensor::zeros(&[1, 3, cfg.d_model]).unwrap();
        let txt = encode_text(
            &tape,
            &p.txt,
            &[vec![1, 4, 5]],
            &[vec![false, false, false]],
            cfg.heads,
            cfg.ln_eps,
        )
        .unwrap();
        let fused = fuse(
            &tape,
            &p.fusion,
            &img,
            &txt,
            &[vec![false, false, false]],
            cfg.heads,
            cfg.ln_eps,
        )
        .unwrap();
        assert!(fused.to_vec().iter().all(|v| v.is_finite()));
        let cls = take_cls(&tape, &fused).unwrap();
        assert_eq!(cls.shape(), &[1, cfg.d_model]);
    }

    #[test]
    fn fusion_layer_gradient_check() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = ModelParams::init(&cfg, &mut rng).unwrap();
        let d = cfg.d_model;
        let img: Vec<f64> = (0..3 * d).map(|i| ((i % 5) as f64 - 2.0) * 0.3).collect();
        let img = Tensor::from_vec(&[1, 3, d], img).unwrap();
        let txt: Vec<f64> = (0..2 * d).map(|i| ((i % 3) as f64 - 1.0) * 0.4).collect();
        let txt = Tensor::from_vec(&[1, 2, d], txt).unwrap();
        let pads = vec![vec![false, false]];
        let w: Vec<f64> = (0..2 * d).map(|i| ((i % 11) as f64 - 5.0) * 0.05).collect();
        let w = Tensor::from_vec(&[1, 2, d], w).unwrap();
        let leaves: Vec<(String, Tensor)> = {
            let mut v = Vec::new();
            let mut push = |name: String, t: &Tensor| v.push((name, t.clone()));
            p.fusion.visit("fusion", &mut push);
            v
        };
        let refs: Vec<&Tensor> = leaves.iter().map(|(_, t)| t).collect();
        let report = gradcheck::check_gradients(
            |tape| {
                let fused = fuse(tape, &p.fusion, &img, &txt, &pads, cfg.heads, cfg.ln_eps)
                    .map_err(|e| crate::tensor::TensorError::Contract {
                        op: "fuse",
                        msg: e.to_string(),
                    })?;
                tape.sum_all(&tape.mul(&fused, &w)?)
            },
            &refs,
            gradcheck::FdConfig {
                max_per_leaf: 10,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn decoder_output_covers_all_patches_and_sees_text() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = ModelParams::init(&cfg, &mut rng).unwrap();
        let grids = random_grids(&mut rng, 1, &cfg);
        let n = cfg.num_patches();
        let tape = Tape::inference();
        let mut prng = ChaCha8Rng::seed_from_u64(0);
        let plan = sample_mask_plan(&mut prng, n, 0.5).unwrap();
        let masked = plan.masked().to_vec();
        let plans = vec![plan];
        let vis =
            encode_image_visible(&tape, &p.img, &grids, &plans, cfg.heads, cfg.ln_eps).unwrap();
        let pads = vec![vec![false, false, false]];
        let t1 = encode_text(&tape, &p.txt, &[vec![1, 4, 5]], &pads, cfg.heads, cfg.ln_eps)
            .unwrap();
        let t2 = encode_text(&tape, &p.txt, &[vec![1, 6, 7]], &pads, cfg.heads, cfg.ln_eps)
            .unwrap();
        let y1 = decode_image(
            &tape,
            &p.dec,
            &vis,
            &t1,
            &plans,
            &pads,
            cfg.decoder_heads(),
            cfg.ln_eps,
        )
        .unwrap();
        assert_eq!(y1.shape(), &[1, n, cfg.patch_dim()]);
        let y2 = decode_image(
            &tape,
            &p.dec,
            &vis,
            &t2,
            &plans,
            &pads,
            cfg.decoder_heads(),
            cfg.ln_eps,
        )
        .unwrap();
        // text conditioning must reach the masked positions
        let ppc = cfg.patch_dim();
        let (a, b) = (y1.to_vec(), y2.to_vec());
        let mut delta = 0.0;
        for &mi in &masked {
            for c in 0..ppc {
                delta += (a[mi * ppc + c] - b[mi * ppc + c]).abs();
            }
        }
        assert!(delta > 0.0);

        // alpha = 0: no mask tokens inserted, output still well-formed
        let full_plans = vec![MaskPlan::full(n)];
        let vis_full =
            encode_image_visible(&tape, &p.img, &grids, &full_plans, cfg.heads, cfg.ln_eps)
                .unwrap();
        let y_full = decode_image(
            &tape,
            &p.dec,
            &vis_full,
            &t1,
            &full_plans,
            &pads,
            cfg.decoder_heads(),
            cfg.ln_eps,
        )
        .unwrap();
        assert_eq!(y_full.shape(), &[1, n, cfg.patch_dim()]);
    }

    #[test]
    fn attention_profile_is_a_distribution() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = ModelParams::init(&cfg, &mut rng).unwrap();
        let grids = random_grids(&mut rng, 3, &cfg);
        let profiles = cls_attention_profile(&p, &grids).unwrap();
        assert_eq!(profiles.len(), 3);
        for w in &profiles {
            assert_eq!(w.len(), cfg.num_patches());
            assert!(w.iter().all(|&v| v >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_attention_when_all_logits_equal() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = ModelParams::init(&cfg, &mut rng).unwrap();
        // zero qkv weights in the last block make every attention logit equal
        let last = p.img.stack.blocks.last().unwrap();
        last.attn.qkv.w.update_data(|d| d.iter_mut().for_each(|v| *v = 0.0));
        last.attn.qkv.b.update_data(|d| d.iter_mut().for_each(|v| *v = 0.0));
        let grids = random_grids(&mut rng, 1, &cfg);
        let profiles = cls_attention_profile(&p, &grids).unwrap();
        let n = cfg.num_patches() as f64;
        for &w in &profiles[0] {
            assert!((w - 1.0 / n).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let p = ModelParams::init(&cfg, &mut rng).unwrap();
        let grids = random_grids(&mut rng, 2, &cfg);
        let tape = Tape::inference();
        let (_, probs) =
            encode_image_full_with_attention(&tape, &p.img, &grids, cfg.heads, cfg.ln_eps)
                .unwrap();
        let s = probs.shape()[2];
        let data = probs.data();
        for row in data.chunks(s) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }
}
