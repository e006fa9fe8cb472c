//! Forward passes for the four sub-networks.
//!
//! All blocks are pre-norm transformers. Attention masking is additive on
//! the key axis: padded keys get -1e30 before the softmax, which underflows
//! to an exact zero weight, so padded tails cannot perturb real positions
//! even at the last bit.

use crate::tensor::{Tape, Tensor};

use super::mask::MaskPlan;
use super::params::{
    CrossAttnP, DecoderP, FusionP, ImageEncoderP, MlpP, ModelParams, SelfAttnP, StackP,
    TextEncoderP,
};
use super::{ModelError, ModelResult};

const KEY_MASK_NEG: f64 = -1e30;

fn split_heads(tape: &Tape, x: &Tensor, heads: usize) -> ModelResult<Tensor> {
    let (b, s, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let dh = d / heads;
    let x4 = tape.reshape(x, &[b, s, heads, dh])?;
    let xs = tape.swap_axes(&x4, 1, 2)?;
    Ok(tape.reshape(&xs, &[b * heads, s, dh])?)
}

fn merge_heads(tape: &Tape, x: &Tensor, b: usize, heads: usize) -> ModelResult<Tensor> {
    let (s, dh) = (x.shape()[1], x.shape()[2]);
    let x4 = tape.reshape(x, &[b, heads, s, dh])?;
    let xs = tape.swap_axes(&x4, 1, 2)?;
    Ok(tape.reshape(&xs, &[b, s, heads * dh])?)
}

/// Additive key mask [B, 1, 1, L]: 0 on real tokens, -1e30 on padding.
pub fn key_mask_tensor(pad_mask: &[Vec<bool>]) -> ModelResult<Tensor> {
    let b = pad_mask.len();
    let l = pad_mask[0].len();
    let mut data = Vec::with_capacity(b * l);
    for row in pad_mask {
        if row.len() != l {
            return Err(ModelError::Contract("ragged pad mask".into()));
        }
        data.extend(row.iter().map(|&p| if p { KEY_MASK_NEG } else { 0.0 }));
    }
    Ok(Tensor::from_vec(&[b, 1, 1, l], data)?)
}

fn self_attention(
    tape: &Tape,
    p: &SelfAttnP,
    x: &Tensor,
    heads: usize,
    key_mask: Option<&Tensor>,
    eps: f64,
    want_probs: bool,
) -> ModelResult<(Tensor, Option<Tensor>)> {
    let (b, s, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let dh = d / heads;
    let xn = p.ln.apply(tape, x, eps)?;
    let qkv = p.qkv.apply(tape, &xn)?;
    let q = tape.slice_axis(&qkv, 2, 0, d)?;
    let k = tape.slice_axis(&qkv, 2, d, d)?;
    let v = tape.slice_axis(&qkv, 2, 2 * d, d)?;
    let qh = split_heads(tape, &q, heads)?;
    let kh = split_heads(tape, &k, heads)?;
    let vh = split_heads(tape, &v, heads)?;
    let mut scores = tape.scale(&tape.bmm_nt(&qh, &kh)?, 1.0 / (dh as f64).sqrt())?;
    if let Some(mask) = key_mask {
        let s4 = tape.reshape(&scores, &[b, heads, s, s])?;
        let masked = tape.add(&s4, mask)?;
        scores = tape.reshape(&masked, &[b * heads, s, s])?;
    }
    let probs = tape.softmax(&scores, 2)?;
    let captured = if want_probs {
        Some(tape.reshape(&probs, &[b, heads, s, s])?)
    } else {
        None
    };
    let ctx = tape.bmm(&probs, &vh)?;
    let merged = merge_heads(tape, &ctx, b, heads)?;
    Ok((p.out.apply(tape, &merged)?, captured))
}

/// Text queries attend over an image sequence (no mask: every image token is
/// real). Keys and values come from the image sequence as produced by its
/// encoder; only the query side is re-normalized.
fn cross_attention(
    tape: &Tape,
    p: &CrossAttnP,
    x: &Tensor,
    kv: &Tensor,
    heads: usize,
    eps: f64,
) -> ModelResult<Tensor> {
    let (b, _l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let dh = d / heads;
    let xn = p.ln.apply(tape, x, eps)?;
    let q = split_heads(tape, &p.q.apply(tape, &xn)?, heads)?;
    let k = split_heads(tape, &p.k.apply(tape, kv)?, heads)?;
    let v = split_heads(tape, &p.v.apply(tape, kv)?, heads)?;
    let scores = tape.scale(&tape.bmm_nt(&q, &k)?, 1.0 / (dh as f64).sqrt())?;
    let probs = tape.softmax(&scores, 2)?;
    let ctx = tape.bmm(&probs, &v)?;
    let merged = merge_heads(tape, &ctx, b, heads)?;
    Ok(p.out.apply(tape, &merged)?)
}

fn mlp(tape: &Tape, p: &MlpP, x: &Tensor, eps: f64) -> ModelResult<Tensor> {
    let xn = p.ln.apply(tape, x, eps)?;
    let h = tape.gelu(&p.fc1.apply(tape, &xn)?)?;
    Ok(p.fc2.apply(tape, &h)?)
}

fn run_stack(
    tape: &Tape,
    stack: &StackP,
    mut x: Tensor,
    heads: usize,
    key_mask: Option<&Tensor>,
    eps: f64,
    capture_last: bool,
) -> ModelResult<(Tensor, Option<Tensor>)> {
    let last = stack.blocks.len().saturating_sub(1);
    let mut captured = None;
    for (i, blk) in stack.blocks.iter().enumerate() {
        let want = capture_last && i == last;
        let (a, probs) = self_attention(tape, &blk.attn, &x, heads, key_mask, eps, want)?;
        if want {
            captured = probs;
        }
        x = tape.add(&x, &a)?;
        let m = mlp(tape, &blk.mlp, &x, eps)?;
        x = tape.add(&x, &m)?;
    }
    Ok((stack.ln_f.apply(tape, &x, eps)?, captured))
}

fn encode_image_inner(
    tape: &Tape,
    p: &ImageEncoderP,
    patch_grids: &Tensor,
    plans: &[MaskPlan],
    heads: usize,
    eps: f64,
    capture_last: bool,
) -> ModelResult<(Tensor, Option<Tensor>)> {
    if patch_grids.shape().len() != 3 {
        return Err(ModelError::Contract(format!(
            "patch grid must be [B, N, P*P*C], got {:?}",
            patch_grids.shape()
        )));
    }
    let (b, n) = (patch_grids.shape()[0], patch_grids.shape()[1]);
    if p.pos.shape()[0] != n + 1 {
        return Err(ModelError::Contract(format!(
            "positional table covers {} patches, input has {n}",
            p.pos.shape()[0] - 1
        )));
    }
    if plans.len() != b {
        return Err(ModelError::Contract(format!(
            "{} mask plans for batch of {b}",
            plans.len()
        )));
    }
    let k = plans[0].num_visible();
    for plan in plans {
        if plan.total() != n || plan.num_visible() != k {
            return Err(ModelError::Contract(
                "mask plans disagree with the patch count".into(),
            ));
        }
    }
    let d = p.pos.shape()[1];

    // project and position every patch by its original index, then gather
    let x = p.patch_embed.apply(tape, patch_grids)?;
    let pos_patches = tape.slice_axis(&p.pos, 0, 1, n)?;
    let x = tape.add(&x, &pos_patches)?;
    let flat = tape.reshape(&x, &[b * n, d])?;
    let mut idx = Vec::with_capacity(b * k);
    for (bi, plan) in plans.iter().enumerate() {
        idx.extend(plan.visible().iter().map(|&j| bi * n + j));
    }
    let visible = tape.reshape(&tape.select_rows(&flat, &idx)?, &[b, k, d])?;

    let pos_cls = tape.slice_axis(&p.pos, 0, 0, 1)?;
    let cls = tape.add(&p.cls, &pos_cls)?;
    let cls_b = tape.broadcast_to(&cls, &[b, 1, d])?;
    let seq = tape.concat(&[&cls_b, &visible], 1)?;
    run_stack(tape, &p.stack, seq, heads, None, eps, capture_last)
}

/// Encode only the visible patches: output is [B, 1 + N - M, d] with the
/// [CLS] slot first and visible patches in ascending original index order.
pub fn encode_image_visible(
    tape: &Tape,
    p: &ImageEncoderP,
    patch_grids: &Tensor,
    plans: &[MaskPlan],
    heads: usize,
    eps: f64,
) -> ModelResult<Tensor> {
    Ok(encode_image_inner(tape, p, patch_grids, plans, heads, eps, false)?.0)
}

/// Full-image encoding: the visible path with the degenerate all-visible
/// plan, so the two are identical by construction at mask ratio 0.
pub fn encode_image_full(
    tape: &Tape,
    p: &ImageEncoderP,
    patch_grids: &Tensor,
    heads: usize,
    eps: f64,
) -> ModelResult<Tensor> {
    let (b, n) = (patch_grids.shape()[0], patch_grids.shape()[1]);
    let plans = vec![MaskPlan::full(n); b];
    encode_image_visible(tape, p, patch_grids, &plans, heads, eps)
}

/// Full-image encoding that also returns the last block's attention
/// probabilities [B, H, S, S].
pub fn encode_image_full_with_attention(
    tape: &Tape,
    p: &ImageEncoderP,
    patch_grids: &Tensor,
    heads: usize,
    eps: f64,
) -> ModelResult<(Tensor, Tensor)> {
    let (b, n) = (patch_grids.shape()[0], patch_grids.shape()[1]);
    let plans = vec![MaskPlan::full(n); b];
    let (seq, probs) = encode_image_inner(tape, p, patch_grids, &plans, heads, eps, true)?;
    Ok((seq, probs.expect("capture requested")))
}

/// Encode token sequences; padded positions are excluded from attention and
/// position 0 carries the [CLS] summary.
pub fn encode_text(
    tape: &Tape,
    p: &TextEncoderP,
    token_ids: &[Vec<usize>],
    pad_mask: &[Vec<bool>],
    heads: usize,
    eps: f64,
) -> ModelResult<Tensor> {
    let b = token_ids.len();
    if b == 0 || pad_mask.len() != b {
        return Err(ModelError::Contract("empty or mismatched text batch".into()));
    }
    let l = token_ids[0].len();
    if token_ids.iter().any(|t| t.len() != l) {
        return Err(ModelError::Contract("ragged token batch".into()));
    }
    if l > p.pos.shape()[0] {
        return Err(ModelError::Contract(format!(
            "sequence length {l} exceeds positional table {}",
            p.pos.shape()[0]
        )));
    }
    let d = p.pos.shape()[1];
    let flat: Vec<usize> = token_ids.iter().flatten().copied().collect();
    let emb = tape.select_rows(&p.tok_emb, &flat)?;
    let emb = tape.reshape(&emb, &[b, l, d])?;
    let pos = tape.slice_axis(&p.pos, 0, 0, l)?;
    let x = tape.add(&emb, &pos)?;
    let mask = key_mask_tensor(pad_mask)?;
    Ok(run_stack(tape, &p.stack, x, heads, Some(&mask), eps, false)?.0)
}

/// Fusion learner: text tokens self-attend (pad-masked), cross-attend into
/// the image sequence, and pass through the MLP; the fused [CLS] is the text
/// position 0 after the final norm.
pub fn fuse(
    tape: &Tape,
    p: &FusionP,
    image_reps: &Tensor,
    text_reps: &Tensor,
    pad_mask: &[Vec<bool>],
    heads: usize,
    eps: f64,
) -> ModelResult<Tensor> {
    let mask = key_mask_tensor(pad_mask)?;
    let mut x = text_reps.clone();
    for blk in &p.blocks {
        let (a, _) = self_attention(tape, &blk.attn, &x, heads, Some(&mask), eps, false)?;
        x = tape.add(&x, &a)?;
        let c = cross_attention(tape, &blk.cross, &x, image_reps, heads, eps)?;
        x = tape.add(&x, &c)?;
        let m = mlp(tape, &blk.mlp, &x, eps)?;
        x = tape.add(&x, &m)?;
    }
    Ok(p.ln_f.apply(tape, &x, eps)?)
}

/// First sequence position as [B, d].
pub fn take_cls(tape: &Tape, seq: &Tensor) -> ModelResult<Tensor> {
    let (b, d) = (seq.shape()[0], seq.shape()[2]);
    let cls = tape.slice_axis(seq, 1, 0, 1)?;
    Ok(tape.reshape(&cls, &[b, d])?)
}

/// Reconstruct pixel predictions for every patch position.
///
/// Decoder sequence order is fixed: [projected image CLS, all N patch slots
/// (visible tokens scattered to their original index, mask tokens elsewhere),
/// projected text tokens]. Decoder positional embeddings apply to the image
/// slots only.
pub fn decode_image(
    tape: &Tape,
    p: &DecoderP,
    visible_seq: &Tensor,
    text_reps: &Tensor,
    plans: &[MaskPlan],
    pad_mask: &[Vec<bool>],
    heads: usize,
    eps: f64,
) -> ModelResult<Tensor> {
    let (b, k1) = (visible_seq.shape()[0], visible_seq.shape()[1]);
    let k = k1 - 1;
    let n = p.pos.shape()[0] - 1;
    let dd = p.pos.shape()[1];
    let l = text_reps.shape()[1];
    if plans.len() != b || plans.iter().any(|pl| pl.total() != n || pl.num_visible() != k) {
        return Err(ModelError::Contract(
            "mask plans disagree with the visible sequence".into(),
        ));
    }

    let proj = p.img_proj.apply(tape, visible_seq)?; // [B, 1+K, dd]
    let cls = tape.slice_axis(&proj, 1, 0, 1)?;
    let vis = tape.slice_axis(&proj, 1, 1, k)?;

    let base = tape.broadcast_to(&p.mask_token, &[b * n, dd])?;
    let mut idx = Vec::with_capacity(b * k);
    for (bi, plan) in plans.iter().enumerate() {
        idx.extend(plan.visible().iter().map(|&j| bi * n + j));
    }
    let vis_flat = tape.reshape(&vis, &[b * k, dd])?;
    let canvas = tape.scatter_rows(&base, &vis_flat, &idx)?;
    let canvas = tape.reshape(&canvas, &[b, n, dd])?;
    let pos_patches = tape.slice_axis(&p.pos, 0, 1, n)?;
    let canvas = tape.add(&canvas, &pos_patches)?;

    let pos_cls = tape.slice_axis(&p.pos, 0, 0, 1)?;
    let cls = tape.add(&cls, &pos_cls)?;

    let txt = p.txt_proj.apply(tape, text_reps)?;
    let seq = tape.concat(&[&cls, &canvas, &txt], 1)?;

    // only the text slots can be padding
    let mut full_pad = Vec::with_capacity(b);
    for row in pad_mask {
        let mut fp = vec![false; 1 + n];
        fp.extend_from_slice(row);
        full_pad.push(fp);
    }
    let mask = key_mask_tensor(&full_pad)?;
    let (out, _) = run_stack(tape, &p.stack, seq, heads, Some(&mask), eps, false)?;
    let patches = tape.slice_axis(&out, 1, 1, n)?;
    let _ = l;
    Ok(p.pixel_head.apply(tape, &patches)?)
}

/// Last-layer [CLS] -> patch attention on a full (unmasked) image, averaged
/// over heads, renormalized over the N patch slots. One weight vector per
/// image, each summing to 1.
pub fn cls_attention_profile(
    params: &ModelParams,
    patch_grids: &Tensor,
) -> ModelResult<Vec<Vec<f64>>> {
    let tape = Tape::inference();
    let cfg = &params.cfg;
    let (_, probs) = encode_image_full_with_attention(
        &tape,
        &params.img,
        patch_grids,
        cfg.heads,
        cfg.ln_eps,
    )?;
    let (b, h, s) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
    let n = s - 1;
    let data = probs.data();
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let mut w = vec![0.0; n];
        for hi in 0..h {
            let row = ((bi * h + hi) * s) * s; // query index 0
            for j in 0..n {
                w[j] += data[row + 1 + j];
            }
        }
        let total: f64 = w.iter().sum();
        for v in &mut w {
            *v /= total;
        }
        out.push(w);
    }
    Ok(out)
}
