//! Dataset splits, the held-out retrieval construction, and manifests.
//!
//! Held-out pairs are rejection-sampled so that each caption's described
//! type multiset is contained in exactly one held-out image (its own) and
//! image type multisets are pairwise distinct. That makes a ground-truth
//! matcher score a perfect R@1 on the split, which is the sanity ceiling the
//! retrieval evaluation is measured against.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{generate_scene, Color, DataConfig, SceneObject, ShapeKind};
use super::text::{caption_tokens, choose_described, Caption, Vocabulary};
use super::{make_region_mask, DataError, DataResult};

const ANALYSIS_SEED_SALT: u64 = 0xA11A_1515_0D0D_5EED;
const MAX_ATTEMPTS_PER_PAIR: usize = 100_000;

/// One dataset entry. Pixels are regenerated from `seed` on demand.
#[derive(Debug, Clone)]
pub struct Pair {
    pub pair_id: u64,
    pub seed: u64,
    pub objects: Vec<SceneObject>,
    pub caption: Caption,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitTag {
    Train,
    HeldOut,
    Analysis,
}

pub struct Dataset {
    pub train: Vec<Pair>,
    pub held_out: Vec<Pair>,
    pub vocab: Vocabulary,
    pub cfg: DataConfig,
}

fn type_multiset(objects: &[SceneObject]) -> Vec<(ShapeKind, Color)> {
    let mut v: Vec<_> = objects.iter().map(|o| o.type_key()).collect();
    v.sort_by_key(|&(k, c)| (k as u8, c as u8));
    v
}

/// Multiset containment: every type in `needle` occurs in `hay` at least as
/// many times (both sorted).
pub fn types_contained(needle: &[(ShapeKind, Color)], hay: &[(ShapeKind, Color)]) -> bool {
    let mut hi = 0;
    'outer: for t in needle {
        while hi < hay.len() {
            let h = hay[hi];
            hi += 1;
            if h == *t {
                continue 'outer;
            }
            if (h.0 as u8, h.1 as u8) > (t.0 as u8, t.1 as u8) {
                return false;
            }
        }
        return false;
    }
    true
}

fn described_types(pair_objects: &[SceneObject], described: &[usize]) -> Vec<(ShapeKind, Color)> {
    let objs: Vec<SceneObject> = described.iter().map(|&i| pair_objects[i].clone()).collect();
    type_multiset(&objs)
}

fn make_pair(
    pair_id: u64,
    seed: u64,
    cfg: &DataConfig,
    vocab: &Vocabulary,
) -> (Pair, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = generate_scene(&mut rng, cfg);
    let strict = rng.gen::<f64>() < cfg.disparity_prob;
    let described = choose_described(&image.objects, strict);
    let token_ids = caption_tokens(&image.objects, &described, vocab);
    (
        Pair {
            pair_id,
            seed,
            objects: image.objects,
            caption: Caption {
                token_ids,
                described_objects: described,
            },
        },
        image.pixels,
    )
}

fn region_fraction(pair: &Pair, cfg: &DataConfig, patch: usize) -> f64 {
    let mask = make_region_mask(
        &pair.objects,
        &pair.caption.described_objects,
        cfg.image_size,
        patch,
    );
    mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64
}

/// Generate disjoint train and held-out splits. `patch` is only used by the
/// optional region-coverage filter.
pub fn generate_dataset(
    cfg: &DataConfig,
    vocab_size: usize,
    patch: usize,
    data_seed: u64,
    n_train: usize,
    n_held_out: usize,
) -> DataResult<Dataset> {
    cfg.validate()?;
    let vocab = Vocabulary::new(vocab_size)?;
    let mut master = ChaCha8Rng::seed_from_u64(data_seed);

    let mut train = Vec::with_capacity(n_train);
    for pair_id in 0..n_train as u64 {
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > MAX_ATTEMPTS_PER_PAIR {
                return Err(DataError::Config(
                    "train generation exhausted attempts (region filter too strict?)".into(),
                ));
            }
            let seed = master.gen::<u64>();
            let (pair, _) = make_pair(pair_id, seed, cfg, &vocab);
            if cfg.min_region_fraction > 0.0
                && region_fraction(&pair, cfg, patch) < cfg.min_region_fraction
            {
                continue;
            }
            train.push(pair);
            break;
        }
    }

    let mut held_out: Vec<Pair> = Vec::with_capacity(n_held_out);
    let mut image_multisets: HashSet<Vec<(ShapeKind, Color)>> = HashSet::new();
    let mut accepted_types: Vec<Vec<(ShapeKind, Color)>> = Vec::new(); // image multisets
    let mut accepted_captions: Vec<Vec<(ShapeKind, Color)>> = Vec::new();
    for k in 0..n_held_out as u64 {
        let pair_id = n_train as u64 + k;
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > MAX_ATTEMPTS_PER_PAIR {
                return Err(DataError::Config(format!(
                    "held-out generation exhausted attempts at pair {k} \
                     (gallery too large for the configured object diversity?)"
                )));
            }
            let seed = master.gen::<u64>();
            let (pair, _) = make_pair(pair_id, seed, cfg, &vocab);
            if pair.caption.described_objects.is_empty() {
                continue;
            }
            if cfg.min_region_fraction > 0.0
                && region_fraction(&pair, cfg, patch) < cfg.min_region_fraction
            {
                continue;
            }
            let img_types = type_multiset(&pair.objects);
            if image_multisets.contains(&img_types) {
                continue;
            }
            let cap_types = described_types(&pair.objects, &pair.caption.described_objects);
            // caption must identify its image uniquely within the gallery
            if accepted_types.iter().any(|t| types_contained(&cap_types, t)) {
                continue;
            }
            if accepted_captions.iter().any(|c| types_contained(c, &img_types)) {
                continue;
            }
            image_multisets.insert(img_types.clone());
            accepted_types.push(img_types);
            accepted_captions.push(cap_types);
            held_out.push(pair);
            break;
        }
    }

    Ok(Dataset {
        train,
        held_out,
        vocab: Vocabulary::new(vocab_size)?,
        cfg: cfg.clone(),
    })
}

/// Extra image-only pairs for attention analysis; ids sit far above the
/// training ranges so they can never collide with either split.
pub fn analysis_pairs(
    cfg: &DataConfig,
    vocab: &Vocabulary,
    data_seed: u64,
    count: usize,
) -> DataResult<Vec<Pair>> {
    cfg.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(data_seed ^ ANALYSIS_SEED_SALT);
    let base = u64::MAX / 2;
    Ok((0..count)
        .map(|i| {
            let seed = master.gen::<u64>();
            make_pair(base + i as u64, seed, cfg, vocab).0
        })
        .collect())
}

/// Ground-truth matcher: a caption retrieves the images whose object types
/// contain its described types. Scores 1.0 exactly when every caption's
/// true image is the unique container in the gallery.
pub fn oracle_text_to_image_r1(pairs: &[Pair]) -> f64 {
    let galleries: Vec<Vec<(ShapeKind, Color)>> =
        pairs.iter().map(|p| type_multiset(&p.objects)).collect();
    let mut hits = 0usize;
    for (qi, q) in pairs.iter().enumerate() {
        let cap = described_types(&q.objects, &q.caption.described_objects);
        let containers: Vec<usize> = galleries
            .iter()
            .enumerate()
            .filter_map(|(gi, g)| types_contained(&cap, g).then_some(gi))
            .collect();
        if containers == [qi] {
            hits += 1;
        }
    }
    hits as f64 / pairs.len() as f64
}

// ── Manifest ────────────────────────────────────────────────────────

/// One line of the dataset manifest. Pixels are reconstructed from `seed`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestRecord {
    pub pair_id: u64,
    pub seed: u64,
    pub split: SplitTag,
    pub objects: Vec<SceneObject>,
    pub caption_tokens: Vec<usize>,
    pub described_objects: Vec<usize>,
}

impl ManifestRecord {
    fn from_pair(p: &Pair, split: SplitTag) -> ManifestRecord {
        ManifestRecord {
            pair_id: p.pair_id,
            seed: p.seed,
            split,
            objects: p.objects.clone(),
            caption_tokens: p.caption.token_ids.clone(),
            described_objects: p.caption.described_objects.clone(),
        }
    }
}

/// Write one JSON record per pair, line-delimited.
pub fn write_manifest(path: &std::path::Path, ds: &Dataset) -> DataResult<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in &ds.train {
        serde_json::to_writer(&mut f, &ManifestRecord::from_pair(p, SplitTag::Train))?;
        f.write_all(b"\n")?;
    }
    for p in &ds.held_out {
        serde_json::to_writer(&mut f, &ManifestRecord::from_pair(p, SplitTag::HeldOut))?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_manifest(path: &std::path::Path) -> DataResult<Vec<ManifestRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
