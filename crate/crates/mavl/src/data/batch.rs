//! Patch extraction, region masks, and training batch assembly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

use super::scene::{DataConfig, SceneObject};
use super::split::Pair;
use super::text::{Vocabulary, PAD_ID};
use super::{DataError, DataResult};

/// Split an H x W x 3 image into non-overlapping P x P patches, row-major
/// patch order; each patch is flattened row-major with interleaved channels.
/// `unpatchify(patchify(x)) == x` exactly.
pub fn patchify(pixels: &[f64], size: usize, patch: usize) -> DataResult<Vec<f64>> {
    if patch == 0 || size % patch != 0 {
        return Err(DataError::Config(format!(
            "image size {size} not divisible by patch size {patch}"
        )));
    }
    let per_side = size / patch;
    let ppc = patch * patch * 3;
    let mut out = vec![0.0; per_side * per_side * ppc];
    for pr in 0..per_side {
        for pc in 0..per_side {
            let dst = (pr * per_side + pc) * ppc;
            for py in 0..patch {
                let y = pr * patch + py;
                let src = (y * size + pc * patch) * 3;
                let row = patch * 3;
                out[dst + py * row..dst + (py + 1) * row]
                    .copy_from_slice(&pixels[src..src + row]);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &[f64], size: usize, patch: usize) -> DataResult<Vec<f64>> {
    if patch == 0 || size % patch != 0 {
        return Err(DataError::Config(format!(
            "image size {size} not divisible by patch size {patch}"
        )));
    }
    let per_side = size / patch;
    let ppc = patch * patch * 3;
    let mut out = vec![0.0; size * size * 3];
    for pr in 0..per_side {
        for pc in 0..per_side {
            let src = (pr * per_side + pc) * ppc;
            for py in 0..patch {
                let y = pr * patch + py;
                let dst = (y * size + pc * patch) * 3;
                let row = patch * 3;
                out[dst..dst + row].copy_from_slice(&patches[src + py * row..src + (py + 1) * row]);
            }
        }
    }
    Ok(out)
}

/// Per-patch flag: true where the patch rectangle intersects the bounding
/// box of any described object. With no described objects the whole image
/// counts as text-relevant (all true).
pub fn make_region_mask(
    objects: &[SceneObject],
    described: &[usize],
    size: usize,
    patch: usize,
) -> Vec<bool> {
    let per_side = size / patch;
    let n = per_side * per_side;
    if described.is_empty() {
        return vec![true; n];
    }
    let mut mask = vec![false; n];
    for &oi in described {
        let (x0, y0, x1, y1) = objects[oi].bbox;
        let pc0 = x0 / patch;
        let pc1 = (x1 - 1) / patch;
        let pr0 = y0 / patch;
        let pr1 = (y1 - 1) / patch;
        for pr in pr0..=pr1 {
            for pc in pc0..=pc1 {
                mask[pr * per_side + pc] = true;
            }
        }
    }
    mask
}

/// One training/eval batch. Images are re-rendered from pair seeds.
pub struct Batch {
    /// [B, N, P*P*3] flattened patch pixels.
    pub patch_grids: Tensor,
    /// [B][l_max] token ids, padded with [PAD].
    pub token_ids: Vec<Vec<usize>>,
    /// [B][l_max], true at [PAD] positions.
    pub pad_mask: Vec<Vec<bool>>,
    /// [B][N], true on text-relevant patches.
    pub region_mask: Vec<Vec<bool>>,
    pub pair_ids: Vec<u64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.pair_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pair_ids.is_empty()
    }

    pub fn build(
        pairs: &[&Pair],
        cfg: &DataConfig,
        patch: usize,
        l_max: usize,
        _vocab: &Vocabulary,
    ) -> DataResult<Batch> {
        if pairs.is_empty() {
            return Err(DataError::Invalid("empty batch".into()));
        }
        let per_side = cfg.image_size / patch;
        let n = per_side * per_side;
        let ppc = patch * patch * 3;
        let b = pairs.len();
        let mut grid = Vec::with_capacity(b * n * ppc);
        let mut token_ids = Vec::with_capacity(b);
        let mut pad_mask = Vec::with_capacity(b);
        let mut region_mask = Vec::with_capacity(b);
        let mut pair_ids = Vec::with_capacity(b);
        for p in pairs {
            let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
            let image = super::scene::generate_scene(&mut rng, cfg);
            grid.extend(patchify(&image.pixels, image.size, patch)?);
            if p.caption.token_ids.len() > l_max {
                return Err(DataError::Invalid(format!(
                    "caption of pair {} has {} tokens, l_max is {l_max}",
                    p.pair_id,
                    p.caption.token_ids.len()
                )));
            }
            let mut ids = p.caption.token_ids.clone();
            ids.resize(l_max, PAD_ID);
            pad_mask.push(ids.iter().map(|&t| t == PAD_ID).collect());
            token_ids.push(ids);
            region_mask.push(make_region_mask(
                &p.objects,
                &p.caption.described_objects,
                cfg.image_size,
                patch,
            ));
            pair_ids.push(p.pair_id);
        }
        let patch_grids = Tensor::from_vec(&[b, n, ppc], grid)
            .map_err(|e| DataError::Invalid(e.to_string()))?;
        Ok(Batch {
            patch_grids,
            token_ids,
            pad_mask,
            region_mask,
            pair_ids,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::{Color, ShapeKind};

    fn obj(cell: (usize, usize), bbox: (usize, usize, usize, usize)) -> SceneObject {
        SceneObject {
            kind: ShapeKind::Square,
            color: Color::Red,
            cell,
            bbox,
        }
    }

    #[test]
    fn patch_count_and_length() {
        let pixels = vec![0.5; 64 * 64 * 3];
        let patches = patchify(&pixels, 64, 8).unwrap();
        assert_eq!(patches.len(), 64 * 192);
    }

    #[test]
    fn constant_image_gives_identical_patches() {
        let pixels = vec![0.25; 64 * 64 * 3];
        let patches = patchify(&pixels, 64, 8).unwrap();
        let first = &patches[..192];
        for p in 1..64 {
            assert_eq!(&patches[p * 192..(p + 1) * 192], first);
        }
    }

    #[test]
    fn patchify_round_trip_is_bit_exact() {
        let pixels: Vec<f64> = (0..64 * 64 * 3).map(|i| (i as f64 * 0.618).fract()).collect();
        let patches = patchify(&pixels, 64, 8).unwrap();
        let back = unpatchify(&patches, 64, 8).unwrap();
        assert_eq!(pixels, back);
    }

    #[test]
    fn patchify_rejects_indivisible() {
        assert!(patchify(&vec![0.0; 63 * 63 * 3], 63, 8).is_err());
    }

    #[test]
    fn region_mask_single_patch() {
        // box strictly inside patch (1,1) of an 8x8 patch grid
        let objects = vec![obj((0, 0), (9, 9, 15, 15))];
        let mask = make_region_mask(&objects, &[0], 64, 8);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 1);
        assert!(mask[1 * 8 + 1]);
    }

    #[test]
    fn region_mask_empty_description_is_all_true() {
        let objects = vec![obj((0, 0), (0, 0, 8, 8))];
        let mask = make_region_mask(&objects, &[], 64, 8);
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn region_mask_straddling_box_hits_four_patches() {
        // box crossing the patch corner at (8, 8): patches (0,0), (0,1), (1,0), (1,1)
        let objects = vec![obj((0, 0), (6, 6, 10, 10))];
        let mask = make_region_mask(&objects, &[0], 64, 8);
        let hits: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect();
        assert_eq!(hits, vec![0, 1, 8, 9]);
    }
}
