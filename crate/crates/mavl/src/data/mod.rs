//! Synthetic paired dataset: scenes of colored shapes with partial captions.
//!
//! Captions deliberately describe only the most salient objects for a
//! configurable fraction of pairs, reproducing the image/text information
//! disparity the training objectives are built around. Images are cheap to
//! re-render from their seed, so splits and manifests store seeds and
//! annotations rather than pixels.

mod batch;
mod scene;
mod split;
mod text;

pub use batch::{make_region_mask, patchify, unpatchify, Batch};
pub use scene::{Color, DataConfig, SceneImage, SceneObject, ShapeKind, COLORS, SHAPE_KINDS};
pub use split::{
    analysis_pairs, generate_dataset, read_manifest, types_contained, write_manifest, Dataset,
    ManifestRecord, Pair, oracle_text_to_image_r1,
};
pub use text::{
    caption_tokens, choose_described, mlm_corrupt, relation_between, Caption, Corruption,
    Relation, Vocabulary, CLS_ID, MASK_ID, PAD_ID,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type DataResult<T> = std::result::Result<T, DataError>;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("data config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Invalid(String),
    #[error("manifest i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest parse: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Produce one (image, caption) pair, fully determined by the seed.
///
/// The caption describes a strict subset of the objects with probability
/// `disparity_prob` (keeping the most salient ones), otherwise all of them,
/// mentioned in row-major cell order with `leftof`/`above` links.
pub fn generate_pair(
    seed: u64,
    cfg: &DataConfig,
    vocab: &Vocabulary,
) -> DataResult<(SceneImage, Caption)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = scene::generate_scene(&mut rng, cfg);
    let strict = rng.gen::<f64>() < cfg.disparity_prob;
    let described = choose_described(&image.objects, strict);
    let token_ids = caption_tokens(&image.objects, &described, vocab);
    Ok((
        image,
        Caption {
            token_ids,
            described_objects: described,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(64).unwrap()
    }

    #[test]
    fn pairs_are_deterministic() {
        let cfg = DataConfig::default();
        let v = vocab();
        let (ia, ca) = generate_pair(99, &cfg, &v).unwrap();
        let (ib, cb) = generate_pair(99, &cfg, &v).unwrap();
        assert_eq!(ia.pixels, ib.pixels);
        assert_eq!(ca, cb);
    }

    #[test]
    fn single_object_full_caption_covers_exactly_its_patches() {
        let cfg = DataConfig {
            object_count_min: 1,
            object_count_max: 1,
            disparity_prob: 0.0,
            ..DataConfig::default()
        };
        let v = vocab();
        let (img, cap) = generate_pair(7, &cfg, &v).unwrap();
        assert_eq!(cap.described_objects, vec![0]);
        let mask = make_region_mask(&img.objects, &cap.described_objects, img.size, 8);
        let (x0, y0, x1, y1) = img.objects[0].bbox;
        let per_side = img.size / 8;
        for (j, &m) in mask.iter().enumerate() {
            let (pr, pc) = (j / per_side, j % per_side);
            let (px0, py0) = (pc * 8, pr * 8);
            let hit = px0 < x1 && px0 + 8 > x0 && py0 < y1 && py0 + 8 > y0;
            assert_eq!(m, hit, "patch {j}");
        }
        assert!(mask.iter().any(|&m| m));
    }

    #[test]
    fn forced_disparity_gives_strict_subsets() {
        let cfg = DataConfig {
            object_count_min: 4,
            object_count_max: 4,
            disparity_prob: 1.0,
            ..DataConfig::default()
        };
        let v = vocab();
        for seed in 0..20 {
            let (img, cap) = generate_pair(seed, &cfg, &v).unwrap();
            assert_eq!(img.objects.len(), 4);
            assert_eq!(cap.described_objects.len(), 3);
        }
    }

    #[test]
    fn disparity_fraction_matches_probability() {
        let cfg = DataConfig::default(); // disparity 0.7
        let v = vocab();
        let mut strict = 0usize;
        let n = 1000;
        for seed in 0..n {
            let (img, cap) = generate_pair(seed as u64, &cfg, &v).unwrap();
            if cap.described_objects.len() < img.objects.len() {
                strict += 1;
            }
        }
        let frac = strict as f64 / n as f64;
        assert!((frac - 0.7).abs() < 0.05, "strict fraction {frac}");
    }

    #[test]
    fn caption_fits_within_sixteen_tokens() {
        let cfg = DataConfig::default();
        let v = vocab();
        for seed in 0..200 {
            let (_, cap) = generate_pair(seed, &cfg, &v).unwrap();
            assert!(cap.token_ids.len() <= 16, "{}", cap.token_ids.len());
            assert_eq!(cap.token_ids[0], CLS_ID);
        }
    }
}
