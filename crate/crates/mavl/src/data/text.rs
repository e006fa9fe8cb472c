//! Vocabulary, caption grammar, and token corruption.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{SceneObject, COLORS, SHAPE_KINDS};
use super::DataError;

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const MASK_ID: usize = 2;
const RESERVED: usize = 3;

/// Token table with stable reserved ids. Word ids depend only on the
/// vocabulary size, so they are identical across runs for the same config.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn new(vocab_size: usize) -> Result<Vocabulary, DataError> {
        let mut tokens = vec!["[PAD]".to_string(), "[CLS]".to_string(), "[MASK]".to_string()];
        tokens.push("a".into());
        for c in COLORS {
            tokens.push(c.word().into());
        }
        for s in SHAPE_KINDS {
            tokens.push(s.word().into());
        }
        tokens.push("leftof".into());
        tokens.push("above".into());
        if vocab_size < tokens.len() {
            return Err(DataError::Config(format!(
                "vocab_size {} smaller than the {} required tokens",
                vocab_size,
                tokens.len()
            )));
        }
        // padding words keep the embedding table at the configured size
        while tokens.len() < vocab_size {
            tokens.push(format!("tok{}", tokens.len()));
        }
        Ok(Vocabulary { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == word)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn is_reserved(id: usize) -> bool {
        id < RESERVED
    }

    /// Ids eligible for the random-word replacement in corruption.
    fn random_word(&self, rng: &mut ChaCha8Rng) -> usize {
        rng.gen_range(RESERVED..self.tokens.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    LeftOf,
    Above,
}

impl Relation {
    pub fn word(self) -> &'static str {
        match self {
            Relation::LeftOf => "leftof",
            Relation::Above => "above",
        }
    }
}

/// Tokenized caption plus the indices of the objects it describes.
#[derive(Debug, Clone, PartialEq)]
pub struct Caption {
    /// [CLS] followed by the words; never padded here.
    pub token_ids: Vec<usize>,
    /// Indices into the paired image's object list, in mention order.
    pub described_objects: Vec<usize>,
}

/// Relation used between two consecutively mentioned objects: `above` when
/// the first sits on a strictly smaller row, otherwise `leftof` (mention
/// order is row-major, so the remaining case is same row, smaller column).
pub fn relation_between(a: &SceneObject, b: &SceneObject) -> Relation {
    if a.cell.0 < b.cell.0 {
        Relation::Above
    } else {
        Relation::LeftOf
    }
}

/// Render the grammar "a <color> <shape> [<relation> a <color> <shape>]...".
pub fn caption_tokens(
    objects: &[SceneObject],
    described: &[usize],
    vocab: &Vocabulary,
) -> Vec<usize> {
    let mut ids = vec![CLS_ID];
    for (pos, &oi) in described.iter().enumerate() {
        if pos > 0 {
            let prev = &objects[described[pos - 1]];
            let rel = relation_between(prev, &objects[oi]);
            ids.push(vocab.id(rel.word()).expect("relation word in vocab"));
        }
        ids.push(vocab.id("a").expect("article in vocab"));
        ids.push(vocab.id(objects[oi].color.word()).expect("color word"));
        ids.push(vocab.id(objects[oi].kind.word()).expect("shape word"));
    }
    ids
}

/// Pick which objects a caption mentions. A strict subset keeps the most
/// salient objects; mention order is row-major over cells.
pub fn choose_described(objects: &[SceneObject], strict_subset: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..objects.len()).collect();
    if strict_subset {
        order.sort_by(|&a, &b| {
            objects[b]
                .salience()
                .cmp(&objects[a].salience())
                .then(objects[a].cell.cmp(&objects[b].cell))
        });
        order.truncate(objects.len().saturating_sub(1));
    }
    order.sort_by_key(|&i| objects[i].cell);
    order
}

/// Outcome of corrupting one token sequence for masked-word prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Corruption {
    pub corrupted_ids: Vec<usize>,
    pub target_positions: Vec<usize>,
    pub target_ids: Vec<usize>,
}

/// BERT-style corruption: each eligible token ([CLS] and [PAD] excluded) is
/// selected with probability 0.15; a selected token becomes [MASK] with
/// probability 0.8, a random vocabulary word with 0.1, and stays unchanged
/// with 0.1. Targets record the original ids at selected positions.
pub fn mlm_corrupt(token_ids: &[usize], vocab: &Vocabulary, rng: &mut ChaCha8Rng) -> Corruption {
    let mut corrupted = token_ids.to_vec();
    let mut target_positions = Vec::new();
    let mut target_ids = Vec::new();
    for (pos, &id) in token_ids.iter().enumerate() {
        if pos == 0 || id == PAD_ID {
            continue;
        }
        if rng.gen::<f64>() < 0.15 {
            target_positions.push(pos);
            target_ids.push(id);
            let r = rng.gen::<f64>();
            if r < 0.8 {
                corrupted[pos] = MASK_ID;
            } else if r < 0.9 {
                corrupted[pos] = vocab.random_word(rng);
            }
        }
    }
    Corruption {
        corrupted_ids: corrupted,
        target_positions,
        target_ids,
    }
}
