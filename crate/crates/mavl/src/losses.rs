//! The five training objectives and their unweighted sum.
//!
//! Every loss is a pure function from model outputs and batch data to a
//! differentiable scalar. Momentum-branch inputs must be plain constants;
//! passing a gradient-tracked tensor where a shadow embedding is expected is
//! a contract error, which is how the no-gradient-to-teacher rule is
//! enforced at the type level of the graph.
//!
//! Averaging conventions (fixed here and mirrored by the test oracles):
//! - masked-region reconstruction: mean over the selected patches' pixels,
//!   then mean over batch samples (empty selections contribute 0);
//! - feature reconstruction: mean absolute error over all B*D entries;
//! - contrastive: per-direction cross-entropy averaged over the batch, the
//!   two directions averaged together;
//! - matching: cross-entropy averaged over all 3B examples;
//! - masked-word prediction: cross-entropy averaged over target positions.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::model::{Linear, MaskPlan, ModelError, ModelResult};
use crate::tensor::{Tape, Tensor};

/// Per-batch counters carried alongside the scalar losses.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    /// Total masked-and-text-relevant patches across the batch.
    pub masked_in_region: usize,
    /// Samples whose masked/region intersection was empty.
    pub empty_region_samples: usize,
    /// Masked-word targets across the batch.
    pub mlm_targets: usize,
    /// Mined matching negatives (two per positive pair).
    pub itm_negatives: usize,
}

/// The five scalar losses and their sum. A `None` component was not part of
/// the training objective for this run.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBundle {
    pub rmim: Option<f64>,
    pub ifr: Option<f64>,
    pub itc: Option<f64>,
    pub itm: Option<f64>,
    pub mlm: Option<f64>,
    pub total: f64,
    pub diagnostics: Diagnostics,
}

impl LossBundle {
    pub fn components(&self) -> [(&'static str, Option<f64>); 5] {
        [
            ("rmim", self.rmim),
            ("ifr", self.ifr),
            ("itc", self.itc),
            ("itm", self.itm),
            ("mlm", self.mlm),
        ]
    }
}

fn require_constant(op: &'static str, t: &Tensor) -> ModelResult<()> {
    if t.requires_grad() {
        return Err(ModelError::Contract(format!(
            "{op}: momentum-branch input carries gradient"
        )));
    }
    Ok(())
}

/// Pixel reconstruction restricted to masked patches inside the text-relevant
/// region, for a single sample. Returns the number of selected patches (0
/// means the loss is an empty constant and the sample should be flagged).
pub fn rmim_loss(
    tape: &Tape,
    predicted: &Tensor,
    target: &Tensor,
    plan: &MaskPlan,
    region_mask: &[bool],
) -> ModelResult<(Tensor, usize)> {
    if predicted.shape() != target.shape() || predicted.shape().len() != 2 {
        return Err(ModelError::Contract(format!(
            "rmim: prediction {:?} and target {:?} must both be [N, P*P*C]",
            predicted.shape(),
            target.shape()
        )));
    }
    let n = predicted.shape()[0];
    if region_mask.len() != n || plan.total() != n {
        return Err(ModelError::Contract(format!(
            "rmim: region mask ({}) / plan ({}) disagree with N = {n}",
            region_mask.len(),
            plan.total()
        )));
    }
    let selected: Vec<usize> = plan
        .masked()
        .iter()
        .copied()
        .filter(|&j| region_mask[j])
        .collect();
    if selected.is_empty() {
        return Ok((Tensor::scalar(0.0), 0));
    }
    let pred_sel = tape.select_rows(predicted, &selected)?;
    let tgt_sel = tape.select_rows(target, &selected)?;
    Ok((tape.mse(&pred_sel, &tgt_sel)?, selected.len()))
}

/// Batched regional reconstruction: mean over samples of the per-sample
/// masked-region MSE, with empty intersections contributing 0.
pub fn rmim_loss_batch(
    tape: &Tape,
    predicted: &Tensor,
    target: &Tensor,
    plans: &[MaskPlan],
    region_masks: &[Vec<bool>],
) -> ModelResult<(Tensor, usize, usize)> {
    if predicted.shape() != target.shape() || predicted.shape().len() != 3 {
        return Err(ModelError::Contract(format!(
            "rmim batch: shapes {:?} vs {:?}",
            predicted.shape(),
            target.shape()
        )));
    }
    let (b, n, ppc) = (
        predicted.shape()[0],
        predicted.shape()[1],
        predicted.shape()[2],
    );
    if plans.len() != b || region_masks.len() != b {
        return Err(ModelError::Contract(
            "rmim batch: plans/masks disagree with batch".into(),
        ));
    }
    let mut weights = vec![0.0; b * n * ppc];
    let mut total_selected = 0usize;
    let mut empty = 0usize;
    for (bi, (plan, region)) in plans.iter().zip(region_masks).enumerate() {
        let selected: Vec<usize> = plan
            .masked()
            .iter()
            .copied()
            .filter(|&j| region[j])
            .collect();
        if selected.is_empty() {
            empty += 1;
            continue;
        }
        let w = 1.0 / (b as f64 * selected.len() as f64 * ppc as f64);
        for &j in &selected {
            let base = (bi * n + j) * ppc;
            weights[base..base + ppc].iter_mut().for_each(|v| *v = w);
        }
        total_selected += selected.len();
    }
    if total_selected == 0 {
        return Ok((Tensor::scalar(0.0), 0, empty));
    }
    let w = Tensor::from_vec(predicted.shape(), weights).map_err(ModelError::Tensor)?;
    let diff = tape.sub(predicted, target)?;
    let sq = tape.mul(&diff, &diff)?;
    let loss = tape.sum_all(&tape.mul(&sq, &w)?)?;
    Ok((loss, total_selected, empty))
}

/// L1 regression of the visible-only [CLS] onto the momentum full-image
/// [CLS]. The shadow side must be gradient-free.
pub fn ifr_loss(tape: &Tape, online_cls: &Tensor, shadow_cls: &Tensor) -> ModelResult<Tensor> {
    require_constant("ifr", shadow_cls)?;
    if online_cls.shape() != shadow_cls.shape() {
        return Err(ModelError::Contract(format!(
            "ifr: shapes {:?} vs {:?}",
            online_cls.shape(),
            shadow_cls.shape()
        )));
    }
    Ok(tape.mae(online_cls, shadow_cls)?)
}

/// Similarity matrices the matching head mines its negatives from.
pub struct ItcAux {
    /// s(I_i, T_j) with the online image side, row-major B x B.
    pub sim_i2t: Vec<f64>,
    /// s(T_i, I_j) with the online text side.
    pub sim_t2i: Vec<f64>,
}

/// Per-direction target distributions: a (1 - lambda) one-hot / lambda
/// momentum-similarity mix. Rows are checked to sum to 1. Targets are plain
/// constants: this is where the stop-gradient to the teacher lives.
pub struct SoftTargets {
    pub i2t: Tensor,
    pub t2i: Tensor,
}

fn dot_matrix(rows: &Tensor, cols: &Tensor) -> Vec<f64> {
    let b = rows.shape()[0];
    let p = rows.shape()[1];
    let r = rows.data();
    let c = cols.data();
    let mut out = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            out[i * b + j] = (0..p).map(|k| r[i * p + k] * c[j * p + k]).sum();
        }
    }
    out
}

fn softmax_rows_inplace(m: &mut [f64], b: usize) {
    for row in m.chunks_mut(b) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
}

/// Build distillation targets from the momentum embeddings at the current
/// temperature value.
pub fn itc_soft_targets(
    shadow_z_v: &Tensor,
    shadow_z_w: &Tensor,
    tau: f64,
    lambda: f64,
) -> ModelResult<SoftTargets> {
    require_constant("itc targets", shadow_z_v)?;
    require_constant("itc targets", shadow_z_w)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(ModelError::Config(format!(
            "distillation weight {lambda} outside [0, 1]"
        )));
    }
    if tau <= 0.0 {
        return Err(ModelError::Config(format!("temperature {tau} must be positive")));
    }
    let b = shadow_z_v.shape()[0];
    let build = |rows: &Tensor, cols: &Tensor| -> ModelResult<Tensor> {
        let mut soft = dot_matrix(rows, cols);
        soft.iter_mut().for_each(|v| *v /= tau);
        softmax_rows_inplace(&mut soft, b);
        let mut y = vec![0.0; b * b];
        for i in 0..b {
            let mut sum = 0.0;
            for j in 0..b {
                let onehot = f64::from(i == j);
                y[i * b + j] = (1.0 - lambda) * onehot + lambda * soft[i * b + j];
                sum += y[i * b + j];
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(ModelError::Contract(format!(
                    "target row {i} sums to {sum}"
                )));
            }
        }
        Tensor::from_vec(&[b, b], y).map_err(ModelError::Tensor)
    };
    Ok(SoftTargets {
        i2t: build(shadow_z_v, shadow_z_w)?,
        t2i: build(shadow_z_w, shadow_z_v)?,
    })
}

/// In-batch contrastive loss against fixed target distributions.
///
/// Inputs are the projected, L2-normalized [CLS] embeddings: online image
/// `z_v`, online text `z_w`, and their momentum counterparts (constants).
/// i2t logits are z_v . shadow_z_w / tau over the batch; t2i symmetric; the
/// loss is the mean of the two per-direction batch-averaged cross-entropies.
pub fn itc_loss(
    tape: &Tape,
    z_v: &Tensor,
    z_w: &Tensor,
    shadow_z_v: &Tensor,
    shadow_z_w: &Tensor,
    log_tau: &Tensor,
    targets: &SoftTargets,
) -> ModelResult<(Tensor, ItcAux)> {
    for t in [z_v, z_w, shadow_z_v, shadow_z_w] {
        if t.shape().len() != 2 || t.shape() != z_v.shape() {
            return Err(ModelError::Contract(format!(
                "itc: embedding shapes must match, got {:?} vs {:?}",
                t.shape(),
                z_v.shape()
            )));
        }
    }
    require_constant("itc", shadow_z_v)?;
    require_constant("itc", shadow_z_w)?;
    require_constant("itc", &targets.i2t)?;
    require_constant("itc", &targets.t2i)?;
    let b = z_v.shape()[0];
    if targets.i2t.shape() != [b, b] || targets.t2i.shape() != [b, b] {
        return Err(ModelError::Contract(format!(
            "itc: targets must be [{b}, {b}]"
        )));
    }
    let inv_tau = tape.exp(&tape.neg(log_tau)?)?;

    let direction = |online: &Tensor, shadow: &Tensor, y: &Tensor| -> ModelResult<Tensor> {
        let shadow_t = tape.transpose(shadow)?;
        let sim = tape.matmul(online, &shadow_t)?;
        let logits = tape.mul(&sim, &inv_tau)?;
        let lp = tape.log_softmax_last(&logits)?;
        Ok(tape.scale(&tape.sum_all(&tape.mul(y, &lp)?)?, -1.0 / b as f64)?)
    };

    let ce_i2t = direction(z_v, shadow_z_w, &targets.i2t)?;
    let ce_t2i = direction(z_w, shadow_z_v, &targets.t2i)?;
    let loss = tape.scale(&tape.add(&ce_i2t, &ce_t2i)?, 0.5)?;
    let aux = ItcAux {
        sim_i2t: dot_matrix(z_v, shadow_z_w),
        sim_t2i: dot_matrix(z_w, shadow_z_v),
    };
    Ok((loss, aux))
}

/// Spec-shaped entry point: builds the distillation targets at the current
/// temperature, then evaluates the contrastive loss.
pub fn itc_loss_with_distillation(
    tape: &Tape,
    z_v: &Tensor,
    z_w: &Tensor,
    shadow_z_v: &Tensor,
    shadow_z_w: &Tensor,
    log_tau: &Tensor,
    lambda: f64,
) -> ModelResult<(Tensor, ItcAux)> {
    let tau = log_tau.data()[0].exp();
    let targets = itc_soft_targets(shadow_z_v, shadow_z_w, tau, lambda)?;
    itc_loss(tape, z_v, z_w, shadow_z_v, shadow_z_w, log_tau, &targets)
}

/// Sample one hard negative per direction per positive, proportionally to
/// the softened similarity of the non-matching candidates.
///
/// Returns (negative text index per image, negative image index per text).
pub fn mine_hard_negatives(
    aux: &ItcAux,
    b: usize,
    tau: f64,
    rng: &mut ChaCha8Rng,
) -> ModelResult<(Vec<usize>, Vec<usize>)> {
    if b < 2 {
        return Err(ModelError::Contract(
            "matching negatives need a batch of at least 2".into(),
        ));
    }
    let mut sample_row = |sims: &[f64], i: usize| -> usize {
        let row = &sims[i * b..(i + 1) * b];
        let mx = row
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut weights = vec![0.0; b];
        let mut z = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if j != i {
                let w = ((v - mx) / tau).exp();
                weights[j] = w;
                z += w;
            }
        }
        let draw = rng.gen::<f64>() * z;
        let mut acc = 0.0;
        for (j, &w) in weights.iter().enumerate() {
            acc += w;
            if j != i && draw < acc {
                return j;
            }
        }
        // numerical tail: last valid candidate
        if i == b - 1 {
            b - 2
        } else {
            b - 1
        }
    };
    let text_neg: Vec<usize> = (0..b).map(|i| sample_row(&aux.sim_i2t, i)).collect();
    let img_neg: Vec<usize> = (0..b).map(|i| sample_row(&aux.sim_t2i, i)).collect();
    Ok((text_neg, img_neg))
}

/// Two-way matching loss over the classifier head, averaged over all
/// positive and mined-negative examples. Label 1 means matched.
pub fn itm_loss(
    tape: &Tape,
    head: &Linear,
    fused_cls: &Tensor,
    labels: &[usize],
) -> ModelResult<Tensor> {
    if fused_cls.shape().len() != 2 || fused_cls.shape()[0] != labels.len() {
        return Err(ModelError::Contract(format!(
            "itm: {} fused embeddings vs {} labels",
            fused_cls.shape()[0],
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(ModelError::Contract("itm labels must be 0 or 1".into()));
    }
    let logits = head.apply(tape, fused_cls)?;
    Ok(tape.cross_entropy_logits(&logits, labels)?)
}

/// Masked-word prediction at the target positions only. `targets` are
/// (sample, position, original id) triples; zero targets yield a constant 0.
pub fn mlm_loss(
    tape: &Tape,
    head: &Linear,
    fused_tokens: &Tensor,
    targets: &[(usize, usize, usize)],
) -> ModelResult<(Tensor, usize)> {
    if fused_tokens.shape().len() != 3 {
        return Err(ModelError::Contract(format!(
            "mlm: fused tokens must be [B, L, d], got {:?}",
            fused_tokens.shape()
        )));
    }
    let (b, l, d) = (
        fused_tokens.shape()[0],
        fused_tokens.shape()[1],
        fused_tokens.shape()[2],
    );
    if targets.is_empty() {
        return Ok((Tensor::scalar(0.0), 0));
    }
    let mut rows = Vec::with_capacity(targets.len());
    let mut ids = Vec::with_capacity(targets.len());
    for &(bi, pos, id) in targets {
        if bi >= b || pos >= l {
            return Err(ModelError::Contract(format!(
                "mlm: target position ({bi}, {pos}) outside [B={b}, L={l}]"
            )));
        }
        rows.push(bi * l + pos);
        ids.push(id);
    }
    let flat = tape.reshape(fused_tokens, &[b * l, d])?;
    let picked = tape.select_rows(&flat, &rows)?;
    let logits = head.apply(tape, &picked)?;
    Ok((tape.cross_entropy_logits(&logits, &ids)?, targets.len()))
}

/// Sum the enabled components (unit weights, fixed order) and package the
/// bundle. Any non-finite component is an error naming it.
pub fn total_loss(
    tape: &Tape,
    rmim: Option<Tensor>,
    ifr: Option<Tensor>,
    itc: Option<Tensor>,
    itm: Option<Tensor>,
    mlm: Option<Tensor>,
    diagnostics: Diagnostics,
) -> ModelResult<(Tensor, LossBundle)> {
    let parts: [(&str, &Option<Tensor>); 5] = [
        ("rmim", &rmim),
        ("ifr", &ifr),
        ("itc", &itc),
        ("itm", &itm),
        ("mlm", &mlm),
    ];
    let mut values = [None; 5];
    let mut total: Option<Tensor> = None;
    for (i, (name, part)) in parts.iter().enumerate() {
        if let Some(t) = part {
            let v = t.item().map_err(ModelError::Tensor)?;
            if !v.is_finite() {
                return Err(ModelError::Contract(format!(
                    "loss component {name} is not finite"
                )));
            }
            values[i] = Some(v);
            total = Some(match total {
                None => t.clone(),
                Some(acc) => tape.add(&acc, t)?,
            });
        }
    }
    let total = total.ok_or_else(|| ModelError::Contract("no loss components enabled".into()))?;
    let total_v = total.item().map_err(ModelError::Tensor)?;
    if !total_v.is_finite() {
        return Err(ModelError::Contract("total loss is not finite".into()));
    }
    let bundle = LossBundle {
        rmim: values[0],
        ifr: values[1],
        itc: values[2],
        itm: values[3],
        mlm: values[4],
        total: total_v,
        diagnostics,
    };
    Ok((total, bundle))
}
