//! Evaluation and analysis: retrieval recall, focal-bias attention
//! statistics, ablation runs, and analytic compute accounting.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use crate::data::{Batch, DataConfig, Pair, Vocabulary};
use crate::model::{
    cls_attention_profile, encode_image_full, encode_text, fuse, take_cls, ModelConfig,
    ModelParams,
};
use crate::tensor::{Tape, Tensor};
use crate::train::{self, FileConfig, Objectives, TrainError};

pub type EvalResult<T> = std::result::Result<T, EvalError>;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("evaluation data error: {0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

impl From<crate::data::DataError> for EvalError {
    fn from(e: crate::data::DataError) -> Self {
        EvalError::Train(TrainError::Data(e))
    }
}

impl From<crate::tensor::TensorError> for EvalError {
    fn from(e: crate::tensor::TensorError) -> Self {
        EvalError::Model(crate::model::ModelError::Tensor(e))
    }
}

const EVAL_CHUNK: usize = 32;
/// Candidates re-scored by the matching head when reranking.
const RERANK_DEPTH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankMethod {
    ItcOnly,
    ItcItmRerank,
}

impl RankMethod {
    fn label(self) -> &'static str {
        match self {
            RankMethod::ItcOnly => "itc-only",
            RankMethod::ItcItmRerank => "itc+itm-rerank",
        }
    }
}

/// Recall@k for both retrieval directions over a held-out gallery.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub t2i_r1: f64,
    pub t2i_r5: f64,
    pub t2i_r10: f64,
    pub i2t_r1: f64,
    pub i2t_r5: f64,
    pub i2t_r10: f64,
    pub method: RankMethod,
    pub set_size: usize,
}

/// Project and normalize the image/text [CLS] embeddings of a pair set with
/// the online parameters. Full (unmasked) images.
fn embed_pairs(
    params: &ModelParams,
    pairs: &[Pair],
    data_cfg: &DataConfig,
    vocab: &Vocabulary,
) -> EvalResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let cfg = &params.cfg;
    let mut z_v = Vec::with_capacity(pairs.len());
    let mut z_w = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(EVAL_CHUNK) {
        let refs: Vec<&Pair> = chunk.iter().collect();
        let batch = Batch::build(&refs, data_cfg, cfg.patch_size, cfg.l_max, vocab)?;
        let tape = Tape::inference();
        let img = encode_image_full(&tape, &params.img, &batch.patch_grids, cfg.heads, cfg.ln_eps)?;
        let txt = encode_text(
            &tape,
            &params.txt,
            &batch.token_ids,
            &batch.pad_mask,
            cfg.heads,
            cfg.ln_eps,
        )?;
        let v = tape.l2_normalize_rows(&params.heads.proj_v.apply(&tape, &take_cls(&tape, &img)?)?)?;
        let w = tape.l2_normalize_rows(&params.heads.proj_w.apply(&tape, &take_cls(&tape, &txt)?)?)?;
        let p = cfg.proj_dim;
        let (vd, wd) = (v.to_vec(), w.to_vec());
        for i in 0..chunk.len() {
            z_v.push(vd[i * p..(i + 1) * p].to_vec());
            z_w.push(wd[i * p..(i + 1) * p].to_vec());
        }
    }
    Ok((z_v, z_w))
}

/// Matching probability p(matched) for one (image, text) candidate pair,
/// with the full image sequence (evaluation-time convention).
fn itm_match_probability(
    params: &ModelParams,
    image_pair: &Pair,
    text_pair: &Pair,
    data_cfg: &DataConfig,
    vocab: &Vocabulary,
) -> EvalResult<f64> {
    let cfg = &params.cfg;
    let tape = Tape::inference();
    let img_batch = Batch::build(&[image_pair], data_cfg, cfg.patch_size, cfg.l_max, vocab)?;
    let txt_batch = Batch::build(&[text_pair], data_cfg, cfg.patch_size, cfg.l_max, vocab)?;
    let img = encode_image_full(&tape, &params.img, &img_batch.patch_grids, cfg.heads, cfg.ln_eps)?;
    let txt = encode_text(
        &tape,
        &params.txt,
        &txt_batch.token_ids,
        &txt_batch.pad_mask,
        cfg.heads,
        cfg.ln_eps,
    )?;
    let fused = fuse(
        &tape,
        &params.fusion,
        &img,
        &txt,
        &txt_batch.pad_mask,
        cfg.heads,
        cfg.ln_eps,
    )?;
    let cls = take_cls(&tape, &fused)?;
    let logits = params.heads.itm.apply(&tape, &cls)?;
    let probs = tape.softmax(&logits, 1)?;
    Ok(probs.to_vec()[1])
}

fn recalls(ranks: &[usize]) -> (f64, f64, f64) {
    let n = ranks.len() as f64;
    let at = |k: usize| ranks.iter().filter(|&&r| r < k).count() as f64 / n;
    (at(1), at(5), at(10))
}

/// Rank the gallery by cosine similarity of the normalized projections; with
/// `rerank`, the top candidates are re-ordered by the matching head.
pub fn retrieval_eval(
    params: &ModelParams,
    pairs: &[Pair],
    data_cfg: &DataConfig,
    vocab: &Vocabulary,
    rerank: bool,
) -> EvalResult<RetrievalReport> {
    if pairs.is_empty() {
        return Err(EvalError::Data("empty evaluation set".into()));
    }
    let mut seen = HashSet::new();
    for p in pairs {
        if !seen.insert(p.pair_id) {
            return Err(EvalError::Data(format!(
                "duplicate pair_id {} across query/gallery",
                p.pair_id
            )));
        }
    }
    let n = pairs.len();
    let (z_v, z_w) = embed_pairs(params, pairs, data_cfg, vocab)?;
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };

    // candidate order for one query against a gallery, best first
    let order_for = |sims: Vec<f64>| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap().then(a.cmp(&b)));
        idx
    };

    let mut t2i_ranks = Vec::with_capacity(n);
    let mut i2t_ranks = Vec::with_capacity(n);
    for q in 0..n {
        let mut order = order_for((0..n).map(|g| dot(&z_w[q], &z_v[g])).collect());
        if rerank {
            let depth = RERANK_DEPTH.min(n);
            let mut scored: Vec<(usize, f64)> = Vec::with_capacity(depth);
            for &g in order.iter().take(depth) {
                let p = itm_match_probability(params, &pairs[g], &pairs[q], data_cfg, vocab)?;
                scored.push((g, p));
            }
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for (slot, (g, _)) in scored.into_iter().enumerate() {
                order[slot] = g;
            }
        }
        t2i_ranks.push(order.iter().position(|&g| g == q).expect("query in gallery"));

        let mut order = order_for((0..n).map(|g| dot(&z_w[g], &z_v[q])).collect());
        if rerank {
            let depth = RERANK_DEPTH.min(n);
            let mut scored: Vec<(usize, f64)> = Vec::with_capacity(depth);
            for &g in order.iter().take(depth) {
                let p = itm_match_probability(params, &pairs[q], &pairs[g], data_cfg, vocab)?;
                scored.push((g, p));
            }
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for (slot, (g, _)) in scored.into_iter().enumerate() {
                order[slot] = g;
            }
        }
        i2t_ranks.push(order.iter().position(|&g| g == q).expect("query in gallery"));
    }

    let (t2i_r1, t2i_r5, t2i_r10) = recalls(&t2i_ranks);
    let (i2t_r1, i2t_r5, i2t_r10) = recalls(&i2t_ranks);
    Ok(RetrievalReport {
        t2i_r1,
        t2i_r5,
        t2i_r10,
        i2t_r1,
        i2t_r5,
        i2t_r10,
        method: if rerank {
            RankMethod::ItcItmRerank
        } else {
            RankMethod::ItcOnly
        },
        set_size: n,
    })
}

// ── Focal-bias statistics ───────────────────────────────────────────

/// Per-image [CLS] -> patch attention summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStats {
    pub profiles: Vec<Vec<f64>>,
    /// Share of patches with weight below threshold / N, per image.
    pub low_attention_fraction: Vec<f64>,
    /// Shannon entropy (nats) of each weight vector.
    pub entropy: Vec<f64>,
    pub threshold: f64,
    pub mean_low_fraction: f64,
    pub std_low_fraction: f64,
}

/// Summaries for precomputed weight vectors.
pub fn attention_stats_from_profiles(profiles: Vec<Vec<f64>>, threshold: f64) -> AttentionStats {
    let mut low = Vec::with_capacity(profiles.len());
    let mut ent = Vec::with_capacity(profiles.len());
    for w in &profiles {
        let n = w.len() as f64;
        let cut = threshold / n;
        low.push(w.iter().filter(|&&v| v < cut).count() as f64 / n);
        ent.push(-w.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>());
    }
    let mean = low.iter().sum::<f64>() / low.len().max(1) as f64;
    let var = low.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / low.len().max(1) as f64;
    AttentionStats {
        profiles,
        low_attention_fraction: low,
        entropy: ent,
        threshold,
        mean_low_fraction: mean,
        std_low_fraction: var.sqrt(),
    }
}

/// Last-layer [CLS] attention statistics over a set of images (unmasked).
pub fn focal_bias_stats(
    params: &ModelParams,
    pairs: &[Pair],
    data_cfg: &DataConfig,
    vocab: &Vocabulary,
    threshold: f64,
) -> EvalResult<AttentionStats> {
    let cfg = &params.cfg;
    let mut profiles = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(EVAL_CHUNK) {
        let refs: Vec<&Pair> = chunk.iter().collect();
        let batch = Batch::build(&refs, data_cfg, cfg.patch_size, cfg.l_max, vocab)?;
        profiles.extend(cls_attention_profile(params, &batch.patch_grids)?);
    }
    Ok(attention_stats_from_profiles(profiles, threshold))
}

// ── Ablation ────────────────────────────────────────────────────────

pub struct AblationOutcome {
    pub retrieval: RetrievalReport,
    pub attention: AttentionStats,
    pub summary: train::RunSummary,
}

/// Train with only the listed objectives (must include the itc/itm/mlm
/// baseline) and evaluate retrieval plus attention statistics under the same
/// seed and data as any other subset.
pub fn ablation_run(
    cfg: &FileConfig,
    objective_subset: &[String],
    analysis_images: usize,
) -> EvalResult<AblationOutcome> {
    let _ = Objectives::from_names(objective_subset).map_err(EvalError::Train)?;
    let mut c = cfg.clone();
    c.train.objectives = objective_subset.iter().map(|s| s.to_string()).collect();
    let summary = train::run(c.clone(), None)?;
    let state = train::load_checkpoint(&summary.checkpoint)?;
    let ds = train::dataset_for(&c)?;
    let retrieval = retrieval_eval(&state.params, &ds.held_out, &c.data, &ds.vocab, false)?;
    let analysis = crate::data::analysis_pairs(&c.data, &ds.vocab, c.train.seed, analysis_images)?;
    let attention = focal_bias_stats(&state.params, &analysis, &c.data, &ds.vocab, 0.5)?;
    Ok(AblationOutcome {
        retrieval,
        attention,
        summary,
    })
}

// ── Compute accounting ──────────────────────────────────────────────

/// Analytic multiply-accumulate counts for one training forward pass.
///
/// Per self-attention transformer block on S tokens of width d:
///   attention 4 S d^2 + 2 S^2 d, MLP 2 S d (r d).
/// A cross-attention unit with S_q queries over S_kv keys costs
///   2 S_q d^2 + 2 S_kv d^2 + 2 S_q S_kv d.
/// Embeddings, norms and output heads are excluded by design; the counts
/// support ratio-level comparisons, not absolute hardware estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct MacsReport {
    pub components: Vec<ComponentMacs>,
    pub batch_size: usize,
    /// Total across components including pass multiplicity and batch size.
    pub total: u64,
    /// Online image encoder total (for the masking-ratio curve).
    pub image_encoder: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentMacs {
    pub name: &'static str,
    /// Forward passes per training step (e.g. fusion runs four times).
    pub passes: u64,
    pub macs_per_pass: u64,
}

fn self_block_macs(s: u64, d: u64, r: u64) -> u64 {
    4 * s * d * d + 2 * s * s * d + 2 * s * d * r * d
}

fn cross_macs(s_q: u64, s_kv: u64, d: u64) -> u64 {
    2 * s_q * d * d + 2 * s_kv * d * d + 2 * s_q * s_kv * d
}

/// Count one full five-objective training forward at mask ratio `alpha`.
pub fn count_macs(cfg: &ModelConfig, alpha: f64, batch_size: usize) -> MacsReport {
    let n = cfg.num_patches() as u64;
    let m = (alpha * n as f64).round() as u64;
    let d = cfg.d_model as u64;
    let dd = cfg.decoder_dim as u64;
    let r = cfg.mlp_ratio as u64;
    let l = cfg.l_max as u64;

    let s_vis = 1 + n - m;
    let s_full = 1 + n;
    let image = cfg.image_encoder_layers as u64 * self_block_macs(s_vis, d, r);
    let image_mom = cfg.image_encoder_layers as u64 * self_block_macs(s_full, d, r);
    let text = cfg.text_encoder_layers as u64 * self_block_macs(l, d, r);
    let fusion_block = self_block_macs(l, d, r) + cross_macs(l, s_vis, d);
    let fusion = cfg.fusion_layers as u64 * fusion_block;
    let s_dec = 1 + n + l;
    let decoder = cfg.decoder_layers as u64 * self_block_macs(s_dec, dd, r);

    let components = vec![
        ComponentMacs {
            name: "image_encoder",
            passes: 1,
            macs_per_pass: image,
        },
        ComponentMacs {
            name: "momentum_image_encoder",
            passes: 1,
            macs_per_pass: image_mom,
        },
        // clean text for contrast/matching plus the corrupted pass
        ComponentMacs {
            name: "text_encoder",
            passes: 2,
            macs_per_pass: text,
        },
        ComponentMacs {
            name: "momentum_text_encoder",
            passes: 1,
            macs_per_pass: text,
        },
        // matching positive, two mined negatives, masked-word pass
        ComponentMacs {
            name: "fusion_learner",
            passes: 4,
            macs_per_pass: fusion,
        },
        ComponentMacs {
            name: "image_decoder",
            passes: 1,
            macs_per_pass: decoder,
        },
    ];
    let total: u64 = components
        .iter()
        .map(|c| c.passes * c.macs_per_pass)
        .sum::<u64>()
        * batch_size as u64;
    MacsReport {
        components,
        batch_size,
        total,
        image_encoder: image * batch_size as u64,
    }
}

/// Total-compute ratio of a masked forward against the unmasked variant.
pub fn macs_ratio_vs_unmasked(cfg: &ModelConfig, alpha: f64) -> f64 {
    let masked = count_macs(cfg, alpha, 1);
    let full = count_macs(cfg, 0.0, 1);
    masked.total as f64 / full.total as f64
}

// ── Plot data emission ──────────────────────────────────────────────

pub enum PlotData<'a> {
    /// Per-image rows: index, low-attention fraction, entropy, weights.
    Attention(&'a AttentionStats),
    /// 20 uniform bins over [0, 4/N] of all per-patch weights.
    AttentionHistogram(&'a AttentionStats),
    /// Recall curve rows: method, direction, k, recall.
    Retrieval(&'a RetrievalReport),
}

pub const HISTOGRAM_BINS: usize = 20;

/// Write column-labeled, comma-delimited text. Floats use the shortest
/// round-trip form, so re-parsing reproduces the values exactly.
pub fn emit_plot_data(data: &PlotData, path: &Path) -> EvalResult<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    match data {
        PlotData::Attention(stats) => {
            let n = stats.profiles.first().map_or(0, |p| p.len());
            write!(f, "image_index,low_attention_fraction,entropy")?;
            for j in 0..n {
                write!(f, ",w{j}")?;
            }
            writeln!(f)?;
            for (i, w) in stats.profiles.iter().enumerate() {
                write!(
                    f,
                    "{i},{},{}",
                    stats.low_attention_fraction[i], stats.entropy[i]
                )?;
                for v in w {
                    write!(f, ",{v}")?;
                }
                writeln!(f)?;
            }
        }
        PlotData::AttentionHistogram(stats) => {
            writeln!(f, "bin_lo,bin_hi,count")?;
            if let Some(first) = stats.profiles.first() {
                let n = first.len() as f64;
                let hi = 4.0 / n;
                let width = hi / HISTOGRAM_BINS as f64;
                let mut counts = vec![0u64; HISTOGRAM_BINS];
                for w in &stats.profiles {
                    for &v in w {
                        let bin = ((v / width) as usize).min(HISTOGRAM_BINS - 1);
                        counts[bin] += 1;
                    }
                }
                for (b, c) in counts.iter().enumerate() {
                    writeln!(f, "{},{},{c}", b as f64 * width, (b + 1) as f64 * width)?;
                }
            }
        }
        PlotData::Retrieval(rep) => {
            writeln!(f, "method,direction,k,recall")?;
            let m = rep.method.label();
            for (dir, vals) in [
                ("t2i", [rep.t2i_r1, rep.t2i_r5, rep.t2i_r10]),
                ("i2t", [rep.i2t_r1, rep.i2t_r5, rep.i2t_r10]),
            ] {
                for (k, v) in [1, 5, 10].iter().zip(vals) {
                    writeln!(f, "{m},{dir},{k},{v}")?;
                }
            }
        }
    }
    f.flush()?;
    Ok(())
}

/// Re-read an attention CSV produced by [`emit_plot_data`].
pub fn parse_attention_csv(path: &Path) -> EvalResult<(Vec<Vec<f64>>, Vec<f64>, Vec<f64>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| EvalError::Parse("empty file".into()))?;
    if !header.starts_with("image_index,low_attention_fraction,entropy") {
        return Err(EvalError::Parse(format!("unexpected header: {header}")));
    }
    let mut profiles = Vec::new();
    let mut fractions = Vec::new();
    let mut entropies = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() < 3 {
            return Err(EvalError::Parse(format!("short row: {line}")));
        }
        let parse = |s: &str| -> EvalResult<f64> {
            s.parse::<f64>()
                .map_err(|e| EvalError::Parse(format!("{s}: {e}")))
        };
        fractions.push(parse(cells[1])?);
        entropies.push(parse(cells[2])?);
        profiles.push(cells[3..].iter().map(|s| parse(s)).collect::<EvalResult<Vec<f64>>>()?);
    }
    Ok((profiles, fractions, entropies))
}
