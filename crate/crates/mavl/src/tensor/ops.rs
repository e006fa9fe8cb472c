//! Differentiable operations.
//!
//! Each operation validates shapes, computes its forward value, checks the
//! result for NaN/Inf, and (when executed through a recording tape with at
//! least one gradient-tracked input) records itself for the reverse pass.
//!
//! Broadcasting is restricted to trailing-dimension alignment: the second
//! operand may have fewer axes than the first; axes are aligned from the
//! right and must either match exactly or be 1 on the second operand. A
//! one-element tensor broadcasts everywhere. Anything fancier is a shape
//! error by design.

use std::rc::Rc;

use super::kernels;
use super::{ensure_finite, Result, Tape, Tensor, TensorError};

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;
const L2_EPS: f64 = 1e-12;

// ── Broadcast plumbing ──────────────────────────────────────────────

enum Bc {
    Same,
    Scalar,
    /// b is an exact suffix of a: repeat a contiguous block.
    Suffix { block: usize },
    /// General right-aligned mapping with stretched size-1 axes.
    General { b_strides: Vec<usize> },
}

fn broadcast_spec(op: &'static str, a: &[usize], b: &[usize]) -> Result<Bc> {
    if a == b {
        return Ok(Bc::Same);
    }
    if b.iter().product::<usize>() == 1 {
        return Ok(Bc::Scalar);
    }
    if b.len() > a.len() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    let off = a.len() - b.len();
    if a[off..] == *b {
        return Ok(Bc::Suffix {
            block: b.iter().product(),
        });
    }
    let mut strides = vec![0usize; a.len()];
    let mut s = 1usize;
    for i in (0..b.len()).rev() {
        let (ad, bd) = (a[off + i], b[i]);
        if bd == ad {
            strides[off + i] = s;
            s *= bd;
        } else if bd == 1 {
            strides[off + i] = 0;
            s *= 1;
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
    }
    Ok(Bc::General { b_strides: strides })
}

/// Walk every element of the a-shaped output, yielding (a_index, b_index).
fn for_each_bc(a_shape: &[usize], bc: &Bc, mut f: impl FnMut(usize, usize)) {
    let n: usize = a_shape.iter().product();
    match bc {
        Bc::Same => (0..n).for_each(|i| f(i, i)),
        Bc::Scalar => (0..n).for_each(|i| f(i, 0)),
        Bc::Suffix { block } => (0..n).for_each(|i| f(i, i % block)),
        Bc::General { b_strides } => {
            let rank = a_shape.len();
            let mut coord = vec![0usize; rank];
            let mut bi = 0usize;
            for ai in 0..n {
                f(ai, bi);
                // odometer increment
                for d in (0..rank).rev() {
                    coord[d] += 1;
                    bi += b_strides[d];
                    if coord[d] < a_shape[d] {
                        break;
                    }
                    bi -= b_strides[d] * a_shape[d];
                    coord[d] = 0;
                }
            }
        }
    }
}

fn elementwise_bc(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Vec<f64>> {
    let bc = broadcast_spec(op, a.shape(), b.shape())?;
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; a.numel()];
    for_each_bc(a.shape(), &bc, |ai, bi| out[ai] = f(ad[ai], bd[bi]));
    Ok(out)
}

/// Reduce an a-shaped gradient onto b's shape (reverse of broadcast).
fn reduce_to(
    op: &'static str,
    g: &[f64],
    a_shape: &[usize],
    b: &Tensor,
    weight: impl Fn(usize, usize) -> f64,
) -> Result<Vec<f64>> {
    let bc = broadcast_spec(op, a_shape, b.shape())?;
    let mut out = vec![0.0; b.numel()];
    for_each_bc(a_shape, &bc, |ai, bi| out[bi] += g[ai] * weight(ai, bi));
    Ok(out)
}

// ── Operation record ────────────────────────────────────────────────

pub enum Op {
    Add { a: Tensor, b: Tensor },
    Sub { a: Tensor, b: Tensor },
    Mul { a: Tensor, b: Tensor },
    Neg { a: Tensor },
    Scale { a: Tensor, c: f64 },
    AddScalar { a: Tensor },
    Exp { a: Tensor },
    Clamp { a: Tensor, lo: f64, hi: f64 },
    Matmul { a: Tensor, b: Tensor },
    Bmm { a: Tensor, b: Tensor },
    BmmNt { a: Tensor, b: Tensor },
    Reshape { a: Tensor },
    SwapAxes { a: Tensor, ax0: usize, ax1: usize },
    Concat { parts: Vec<Tensor>, axis: usize },
    SliceAxis { a: Tensor, axis: usize, start: usize },
    SelectRows { a: Tensor, idx: Rc<Vec<usize>> },
    ScatterRows { base: Tensor, src: Tensor, idx: Rc<Vec<usize>> },
    BroadcastTo { a: Tensor },
    SoftmaxLast { a: Tensor },
    LogSoftmaxLast { a: Tensor },
    LayerNorm { x: Tensor, gain: Tensor, bias: Tensor, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu { a: Tensor },
    SumAll { a: Tensor },
    MeanAll { a: Tensor },
    Mse { a: Tensor, b: Tensor },
    Mae { a: Tensor, b: Tensor },
    CrossEntropyLogits { logits: Tensor, targets: Rc<Vec<usize>>, probs: Vec<f64> },
    L2NormRows { a: Tensor, inv_norm: Vec<f64> },
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("shapes are non-empty")
}

impl Op {
    pub(super) fn backward(&self, g: &[f64], out: &Tensor) -> Result<()> {
        match self {
            Op::Add { a, b } => {
                if a.requires_grad() {
                    a.accumulate_grad(g);
                }
                if b.requires_grad() {
                    let gb = reduce_to("add", g, a.shape(), b, |_, _| 1.0)?;
                    b.accumulate_grad(&gb);
                }
            }
            Op::Sub { a, b } => {
                if a.requires_grad() {
                    a.accumulate_grad(g);
                }
                if b.requires_grad() {
                    let mut gb = reduce_to("sub", g, a.shape(), b, |_, _| 1.0)?;
                    gb.iter_mut().for_each(|v| *v = -*v);
                    b.accumulate_grad(&gb);
                }
            }
            Op::Mul { a, b } => {
                if a.requires_grad() {
                    let bc = broadcast_spec("mul", a.shape(), b.shape())?;
                    let bd = b.data();
                    let mut ga = vec![0.0; a.numel()];
                    for_each_bc(a.shape(), &bc, |ai, bi| ga[ai] = g[ai] * bd[bi]);
                    drop(bd);
                    a.accumulate_grad(&ga);
                }
                if b.requires_grad() {
                    let ad = a.data();
                    let gb = reduce_to("mul", g, a.shape(), b, |ai, _| ad[ai])?;
                    drop(ad);
                    b.accumulate_grad(&gb);
                }
            }
            Op::Neg { a } => {
                if a.requires_grad() {
                    let ga: Vec<f64> = g.iter().map(|v| -v).collect();
                    a.accumulate_grad(&ga);
                }
            }
            Op::Scale { a, c } => {
                if a.requires_grad() {
                    let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
                    a.accumulate_grad(&ga);
                }
            }
            Op::AddScalar { a } => {
                if a.requires_grad() {
                    a.accumulate_grad(g);
                }
            }
            Op::Exp { a } => {
                if a.requires_grad() {
                    let od = out.data();
                    let ga: Vec<f64> = g.iter().zip(od.iter()).map(|(gi, oi)| gi * oi).collect();
                    drop(od);
                    a.accumulate_grad(&ga);
                }
            }
            Op::Clamp { a, lo, hi } => {
                if a.requires_grad() {
                    let ad = a.data();
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(ad.iter())
                        .map(|(gi, &xi)| if xi >= *lo && xi <= *hi { *gi } else { 0.0 })
                        .collect();
                    drop(ad);
                    a.accumulate_grad(&ga);
                }
            }
            Op::Matmul { a, b } => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if a.requires_grad() {
                    let bd = b.data();
                    let bt = kernels::transpose(&bd, k, n);
                    drop(bd);
                    let ga = kernels::matmul(g, &bt, m, n, k);
                    a.accumulate_grad(&ga);
                }
                if b.requires_grad() {
                    let ad = a.data();
                    let at = kernels::transpose(&ad, m, k);
                    drop(ad);
                    let gb = kernels::matmul(&at, g, k, m, n);
                    b.accumulate_grad(&gb);
                }
            }
            Op::Bmm { a, b } => {
                let (gr, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
                let n = b.shape()[2];
                if a.requires_grad() {
                    let bd = b.data();
                    let bt = kernels::batch_transpose(&bd, gr, k, n);
                    drop(bd);
                    let ga = kernels::bmm(g, &bt, gr, m, n, k);
                    a.accumulate_grad(&ga);
                }
                if b.requires_grad() {
                    let ad = a.data();
                    let at = kernels::batch_transpose(&ad, gr, m, k);
                    drop(ad);
                    let gb = kernels::bmm(&at, g, gr, k, m, n);
                    b.accumulate_grad(&gb);
                }
            }
            Op::BmmNt { a, b } => {
                // out[g] = a[g] @ b[g]^T with a [g,m,k], b [g,n,k]
                let (gr, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
                let n = b.shape()[1];
                if a.requires_grad() {
                    let bd = b.data();
                    let ga = kernels::bmm(g, &bd, gr, m, n, k);
                    drop(bd);
                    a.accumulate_grad(&ga);
                }
                if b.requires_grad() {
                    let gt = kernels::batch_transpose(g, gr, m, n);
                    let ad = a.data();
                    let gb = kernels::bmm(&gt, &ad, gr, n, m, k);
                    drop(ad);
                    b.accumulate_grad(&gb);
                }
            }
            Op::Reshape { a } => {
                if a.requires_grad() {
                    a.accumulate_grad(g);
                }
            }
            Op::SwapAxes { a, ax0, ax1 } => {
                if a.requires_grad() {
                    // the inverse of an axis swap is the same swap, with the
                    // input's shape as the destination layout
                    let ga = swap_axes_copy(g, a.shape(), *ax0, *ax1);
                    a.accumulate_grad(&ga);
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = out.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let out_mid = out_shape[*axis];
                let mut mid_off = 0usize;
                for p in parts {
                    let mid = p.shape()[*axis];
                    if p.requires_grad() {
                        let mut gp = vec![0.0; p.numel()];
                        for o in 0..outer {
                            let src = (o * out_mid + mid_off) * inner;
                            let dst = o * mid * inner;
                            gp[dst..dst + mid * inner]
                                .copy_from_slice(&g[src..src + mid * inner]);
                        }
                        p.accumulate_grad(&gp);
                    }
                    mid_off += mid;
                }
            }
            Op::SliceAxis { a, axis, start } => {
                if a.requires_grad() {
                    let in_shape = a.shape();
                    let out_shape = out.shape();
                    let outer: usize = in_shape[..*axis].iter().product();
                    let inner: usize = in_shape[*axis + 1..].iter().product();
                    let (in_mid, out_mid) = (in_shape[*axis], out_shape[*axis]);
                    let mut ga = vec![0.0; a.numel()];
                    for o in 0..outer {
                        let dst = (o * in_mid + start) * inner;
                        let src = o * out_mid * inner;
                        ga[dst..dst + out_mid * inner]
                            .copy_from_slice(&g[src..src + out_mid * inner]);
                    }
                    a.accumulate_grad(&ga);
                }
            }
            Op::SelectRows { a, idx } => {
                if a.requires_grad() {
                    let row = a.numel() / a.shape()[0];
                    let mut ga = vec![0.0; a.numel()];
                    for (t, &r) in idx.iter().enumerate() {
                        kernels::add_assign(&mut ga[r * row..(r + 1) * row], &g[t * row..(t + 1) * row]);
                    }
                    a.accumulate_grad(&ga);
                }
            }
            Op::ScatterRows { base, src, idx } => {
                let row = base.numel() / base.shape()[0];
                if base.requires_grad() {
                    let mut gb = g.to_vec();
                    for &r in idx.iter() {
                        gb[r * row..(r + 1) * row].iter_mut().for_each(|v| *v = 0.0);
                    }
                    base.accumulate_grad(&gb);
                }
                if src.requires_grad() {
                    let mut gs = vec![0.0; src.numel()];
                    for (t, &r) in idx.iter().enumerate() {
                        gs[t * row..(t + 1) * row].copy_from_slice(&g[r * row..(r + 1) * row]);
                    }
                    src.accumulate_grad(&gs);
                }
            }
            Op::BroadcastTo { a } => {
                if a.requires_grad() {
                    let ga = reduce_to("broadcast_to", g, out.shape(), a, |_, _| 1.0)?;
                    a.accumulate_grad(&ga);
                }
            }
            Op::SoftmaxLast { a } => {
                if a.requires_grad() {
                    let cols = last_dim(out.shape());
                    let rows = out.numel() / cols;
                    let y = out.data();
                    let mut ga = vec![0.0; out.numel()];
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                        for j in 0..cols {
                            ga[r * cols + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    drop(y);
                    a.accumulate_grad(&ga);
                }
            }
            Op::LogSoftmaxLast { a } => {
                if a.requires_grad() {
                    let cols = last_dim(out.shape());
                    let rows = out.numel() / cols;
                    let y = out.data();
                    let mut ga = vec![0.0; out.numel()];
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..cols {
                            ga[r * cols + j] = gr[j] - yr[j].exp() * gsum;
                        }
                    }
                    drop(y);
                    a.accumulate_grad(&ga);
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = last_dim(x.shape());
                let rows = x.numel() / d;
                let gd = gain.data();
                if x.requires_grad() {
                    let mut gx = vec![0.0; x.numel()];
                    for r in 0..rows {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gd[j];
                            m1 += dxh;
                            m2 += dxh * xh[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        let is = inv_std[r];
                        for j in 0..d {
                            let dxh = gr[j] * gd[j];
                            gx[r * d + j] = is * (dxh - m1 - xh[j] * m2);
                        }
                    }
                    x.accumulate_grad(&gx);
                }
                drop(gd);
                if gain.requires_grad() {
                    let mut gg = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    gain.accumulate_grad(&gg);
                }
                if bias.requires_grad() {
                    let mut gb = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                    bias.accumulate_grad(&gb);
                }
            }
            Op::Gelu { a } => {
                if a.requires_grad() {
                    let ad = a.data();
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(ad.iter())
                        .map(|(gi, &x)| {
                            let u = GELU_K * (x + GELU_C * x * x * x);
                            let t = u.tanh();
                            let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
                            gi * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                        })
                        .collect();
                    drop(ad);
                    a.accumulate_grad(&ga);
                }
            }
            Op::SumAll { a } => {
                if a.requires_grad() {
                    a.accumulate_grad(&vec![g[0]; a.numel()]);
                }
            }
            Op::MeanAll { a } => {
                if a.requires_grad() {
                    let s = g[0] / a.numel() as f64;
                    a.accumulate_grad(&vec![s; a.numel()]);
                }
            }
            Op::Mse { a, b } => {
                let n = a.numel() as f64;
                let ad = a.data();
                let bd = b.data();
                let diff: Vec<f64> = ad.iter().zip(bd.iter()).map(|(x, y)| x - y).collect();
                drop(ad);
                drop(bd);
                if a.requires_grad() {
                    let ga: Vec<f64> = diff.iter().map(|d| g[0] * 2.0 * d / n).collect();
                    a.accumulate_grad(&ga);
                }
                if b.requires_grad() {
                    let gb: Vec<f64> = diff.iter().map(|d| -g[0] * 2.0 * d / n).collect();
                    b.accumulate_grad(&gb);
                }
            }
            Op::Mae { a, b } => {
                let n = a.numel() as f64;
                let ad = a.data();
                let bd = b.data();
                let sgn: Vec<f64> = ad
                    .iter()
                    .zip(bd.iter())
                    .map(|(x, y)| (x - y).signum() * f64::from((x - y).abs() > 0.0))
                    .collect();
                drop(ad);
                drop(bd);
                if a.requires_grad() {
                    let ga: Vec<f64> = sgn.iter().map(|s| g[0] * s / n).collect();
                    a.accumulate_grad(&ga);
                }
                if b.requires_grad() {
                    let gb: Vec<f64> = sgn.iter().map(|s| -g[0] * s / n).collect();
                    b.accumulate_grad(&gb);
                }
            }
            Op::CrossEntropyLogits { logits, targets, probs } => {
                if logits.requires_grad() {
                    let c = last_dim(logits.shape());
                    let r = targets.len() as f64;
                    let mut gl = vec![0.0; logits.numel()];
                    for (row, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = f64::from(j == t);
                            gl[row * c + j] = g[0] * (probs[row * c + j] - onehot) / r;
                        }
                    }
                    logits.accumulate_grad(&gl);
                }
            }
            Op::L2NormRows { a, inv_norm } => {
                if a.requires_grad() {
                    let d = last_dim(a.shape());
                    let rows = a.numel() / d;
                    let y = out.data();
                    let mut ga = vec![0.0; a.numel()];
                    for r in 0..rows {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                        for j in 0..d {
                            ga[r * d + j] = inv_norm[r] * (gr[j] - yr[j] * dot);
                        }
                    }
                    drop(y);
                    a.accumulate_grad(&ga);
                }
            }
        }
        Ok(())
    }
}

fn swap_axes_copy(data: &[f64], shape: &[usize], ax0: usize, ax1: usize) -> Vec<f64> {
    // Copies `data` (laid out as `shape` with ax0/ax1 swapped relative to the
    // source) back into source order; also used for the forward direction
    // since the mapping is an involution applied to the destination shape.
    let rank = shape.len();
    let mut src_shape = shape.to_vec();
    src_shape.swap(ax0, ax1);
    let hi = ax0.max(ax1);
    let inner: usize = shape[hi + 1..].iter().product();
    let mut out = vec![0.0; data.len()];
    // strides of the source layout
    let mut src_strides = vec![1usize; rank];
    for d in (0..rank - 1).rev() {
        src_strides[d] = src_strides[d + 1] * src_shape[d + 1];
    }
    // walk destination coordinates up to `hi`, blocks of `inner` are contiguous
    let outer_dims = &shape[..=hi];
    let mut coord = vec![0usize; outer_dims.len()];
    let blocks: usize = outer_dims.iter().product();
    let mut dst = 0usize;
    for _ in 0..blocks {
        let mut src = 0usize;
        for (d, &c) in coord.iter().enumerate() {
            let sd = if d == ax0 {
                ax1
            } else if d == ax1 {
                ax0
            } else {
                d
            };
            src += c * src_strides[sd];
        }
        out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
        dst += inner;
        for d in (0..coord.len()).rev() {
            coord[d] += 1;
            if coord[d] < outer_dims[d] {
                break;
            }
            coord[d] = 0;
        }
    }
    out
}

impl Tape {
    fn finish(
        &self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: &[&Tensor],
        check: bool,
        make_op: impl FnOnce() -> Op,
    ) -> Result<Tensor> {
        if check {
            ensure_finite(op_name, &data)?;
        }
        let track = self.is_recording() && inputs.iter().any(|t| t.requires_grad());
        let out = Tensor::build(shape, data, track, false);
        if track {
            self.record(make_op(), &out);
        }
        Ok(out)
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let data = elementwise_bc("add", a, b, |x, y| x + y)?;
        self.finish("add", a.shape().to_vec(), data, &[a, b], true, || Op::Add {
            a: a.clone(),
            b: b.clone(),
        })
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let data = elementwise_bc("sub", a, b, |x, y| x - y)?;
        self.finish("sub", a.shape().to_vec(), data, &[a, b], true, || Op::Sub {
            a: a.clone(),
            b: b.clone(),
        })
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let data = elementwise_bc("mul", a, b, |x, y| x * y)?;
        self.finish("mul", a.shape().to_vec(), data, &[a, b], true, || Op::Mul {
            a: a.clone(),
            b: b.clone(),
        })
    }

    pub fn neg(&self, a: &Tensor) -> Result<Tensor> {
        let data: Vec<f64> = a.data().iter().map(|v| -v).collect();
        self.finish("neg", a.shape().to_vec(), data, &[a], false, || Op::Neg {
            a: a.clone(),
        })
    }

    pub fn scale(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        let data: Vec<f64> = a.data().iter().map(|v| v * c).collect();
        self.finish("scale", a.shape().to_vec(), data, &[a], true, || Op::Scale {
            a: a.clone(),
            c,
        })
    }

    pub fn add_scalar(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        let data: Vec<f64> = a.data().iter().map(|v| v + c).collect();
        self.finish("add_scalar", a.shape().to_vec(), data, &[a], true, || {
            Op::AddScalar { a: a.clone() }
        })
    }

    pub fn exp(&self, a: &Tensor) -> Result<Tensor> {
        let data: Vec<f64> = a.data().iter().map(|v| v.exp()).collect();
        self.finish("exp", a.shape().to_vec(), data, &[a], true, || Op::Exp {
            a: a.clone(),
        })
    }

    pub fn clamp(&self, a: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
        if lo > hi {
            return Err(TensorError::Contract {
                op: "clamp",
                msg: format!("lo {lo} > hi {hi}"),
            });
        }
        let data: Vec<f64> = a.data().iter().map(|v| v.clamp(lo, hi)).collect();
        self.finish("clamp", a.shape().to_vec(), data, &[a], true, || Op::Clamp {
            a: a.clone(),
            lo,
            hi,
        })
    }

    /// 2-D matrix product a[m,k] @ b[k,n].
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let data = kernels::matmul(&a.data(), &b.data(), m, k, n);
        self.finish("matmul", vec![m, n], data, &[a, b], true, || Op::Matmul {
            a: a.clone(),
            b: b.clone(),
        })
    }

    /// Batched matrix product a[g,m,k] @ b[g,k,n].
    pub fn bmm(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 3
            || b.shape().len() != 3
            || a.shape()[0] != b.shape()[0]
            || a.shape()[2] != b.shape()[1]
        {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (g, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let n = b.shape()[2];
        let data = kernels::bmm(&a.data(), &b.data(), g, m, k, n);
        self.finish("bmm", vec![g, m, n], data, &[a, b], true, || Op::Bmm {
            a: a.clone(),
            b: b.clone(),
        })
    }

    /// Batched product against the transposed last axes: a[g,m,k] @ b[g,n,k]^T.
    pub fn bmm_nt(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 3
            || b.shape().len() != 3
            || a.shape()[0] != b.shape()[0]
            || a.shape()[2] != b.shape()[2]
        {
            return Err(TensorError::ShapeMismatch {
                op: "bmm_nt",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (g, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let n = b.shape()[1];
        let bt = kernels::batch_transpose(&b.data(), g, n, k);
        let data = kernels::bmm(&a.data(), &bt, g, m, k, n);
        self.finish("bmm_nt", vec![g, m, n], data, &[a, b], true, || Op::BmmNt {
            a: a.clone(),
            b: b.clone(),
        })
    }

    /// Zero-copy reshape (contiguous row-major layouts only).
    pub fn reshape(&self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) || n != a.numel() {
            return Err(TensorError::Dimension {
                op: "reshape",
                shape: shape.to_vec(),
                msg: format!("incompatible with {} elements", a.numel()),
            });
        }
        let track = self.is_recording() && a.requires_grad();
        let out = a.view(shape.to_vec(), track);
        if track {
            self.record(Op::Reshape { a: a.clone() }, &out);
        }
        Ok(out)
    }

    pub fn swap_axes(&self, a: &Tensor, ax0: usize, ax1: usize) -> Result<Tensor> {
        let rank = a.shape().len();
        if ax0 >= rank || ax1 >= rank {
            return Err(TensorError::Dimension {
                op: "swap_axes",
                shape: a.shape().to_vec(),
                msg: format!("axes ({ax0},{ax1}) out of range"),
            });
        }
        if ax0 == ax1 {
            return self.reshape(a, &a.shape().to_vec());
        }
        let mut shape = a.shape().to_vec();
        shape.swap(ax0, ax1);
        let data = swap_axes_copy(&a.data(), &shape, ax0, ax1);
        self.finish("swap_axes", shape, data, &[a], false, || Op::SwapAxes {
            a: a.clone(),
            ax0,
            ax1,
        })
    }

    /// 2-D transpose.
    pub fn transpose(&self, a: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 2 {
            return Err(TensorError::Dimension {
                op: "transpose",
                shape: a.shape().to_vec(),
                msg: "expected rank 2".into(),
            });
        }
        self.swap_axes(a, 0, 1)
    }

    pub fn concat(&self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::Contract {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        let rank = parts[0].shape().len();
        if axis >= rank {
            return Err(TensorError::Dimension {
                op: "concat",
                shape: parts[0].shape().to_vec(),
                msg: format!("axis {axis} out of range"),
            });
        }
        let mut out_shape = parts[0].shape().to_vec();
        let mut mid_total = 0usize;
        for p in parts {
            if p.shape().len() != rank {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            for (d, (&a, &b)) in parts[0].shape().iter().zip(p.shape()).enumerate() {
                if d != axis && a != b {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: parts[0].shape().to_vec(),
                        rhs: p.shape().to_vec(),
                    });
                }
            }
            mid_total += p.shape()[axis];
        }
        out_shape[axis] = mid_total;
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * mid_total * inner];
        let mut mid_off = 0usize;
        for p in parts {
            let mid = p.shape()[axis];
            let pd = p.data();
            for o in 0..outer {
                let dst = (o * mid_total + mid_off) * inner;
                let src = o * mid * inner;
                data[dst..dst + mid * inner].copy_from_slice(&pd[src..src + mid * inner]);
            }
            mid_off += mid;
        }
        let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let refs: Vec<&Tensor> = parts.to_vec();
        self.finish("concat", out_shape, data, &refs, false, || Op::Concat {
            parts: owned,
            axis,
        })
    }

    pub fn slice_axis(&self, a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let rank = a.shape().len();
        if axis >= rank || len == 0 || start + len > a.shape()[axis] {
            return Err(TensorError::Dimension {
                op: "slice_axis",
                shape: a.shape().to_vec(),
                msg: format!("slice [{start}, {start}+{len}) on axis {axis}"),
            });
        }
        let mut out_shape = a.shape().to_vec();
        out_shape[axis] = len;
        let outer: usize = a.shape()[..axis].iter().product();
        let inner: usize = a.shape()[axis + 1..].iter().product();
        let in_mid = a.shape()[axis];
        let ad = a.data();
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = (o * in_mid + start) * inner;
            let dst = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&ad[src..src + len * inner]);
        }
        drop(ad);
        self.finish("slice_axis", out_shape, data, &[a], false, || Op::SliceAxis {
            a: a.clone(),
            axis,
            start,
        })
    }

    /// Gather rows (leading-axis slices) by an index list; also serves as
    /// embedding lookup. Gradient scatter-adds into the source.
    pub fn select_rows(&self, a: &Tensor, idx: &[usize]) -> Result<Tensor> {
        if idx.is_empty() {
            return Err(TensorError::Contract {
                op: "select_rows",
                msg: "empty index list".into(),
            });
        }
        let rows = a.shape()[0];
        if let Some(&bad) = idx.iter().find(|&&r| r >= rows) {
            return Err(TensorError::IndexOutOfBounds {
                op: "select_rows",
                index: bad,
                bound: rows,
            });
        }
        let row = a.numel() / rows;
        let ad = a.data();
        let mut data = vec![0.0; idx.len() * row];
        for (t, &r) in idx.iter().enumerate() {
            data[t * row..(t + 1) * row].copy_from_slice(&ad[r * row..(r + 1) * row]);
        }
        drop(ad);
        let mut out_shape = a.shape().to_vec();
        out_shape[0] = idx.len();
        let idx = Rc::new(idx.to_vec());
        self.finish("select_rows", out_shape, data, &[a], false, || {
            Op::SelectRows {
                a: a.clone(),
                idx,
            }
        })
    }

    /// Overwrite `base` rows at `idx` (unique, in order of `src`) with `src`.
    pub fn scatter_rows(&self, base: &Tensor, src: &Tensor, idx: &[usize]) -> Result<Tensor> {
        let rows = base.shape()[0];
        if src.shape()[0] != idx.len() || src.shape()[1..] != base.shape()[1..] {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_rows",
                lhs: base.shape().to_vec(),
                rhs: src.shape().to_vec(),
            });
        }
        let mut seen = vec![false; rows];
        for &r in idx {
            if r >= rows {
                return Err(TensorError::IndexOutOfBounds {
                    op: "scatter_rows",
                    index: r,
                    bound: rows,
                });
            }
            if seen[r] {
                return Err(TensorError::Contract {
                    op: "scatter_rows",
                    msg: format!("duplicate row index {r}"),
                });
            }
            seen[r] = true;
        }
        let row = base.numel() / rows;
        let mut data = base.to_vec();
        let sd = src.data();
        for (t, &r) in idx.iter().enumerate() {
            data[r * row..(r + 1) * row].copy_from_slice(&sd[t * row..(t + 1) * row]);
        }
        drop(sd);
        let idx = Rc::new(idx.to_vec());
        self.finish(
            "scatter_rows",
            base.shape().to_vec(),
            data,
            &[base, src],
            false,
            || Op::ScatterRows {
                base: base.clone(),
                src: src.clone(),
                idx,
            },
        )
    }

    /// Materialize `a` broadcast up to `shape` (trailing alignment rule).
    pub fn broadcast_to(&self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        check_positive(shape, "broadcast_to")?;
        let bc = broadcast_spec("broadcast_to", shape, a.shape())?;
        let ad = a.data();
        let mut data = vec![0.0; shape.iter().product()];
        for_each_bc(shape, &bc, |oi, ai| data[oi] = ad[ai]);
        drop(ad);
        self.finish("broadcast_to", shape.to_vec(), data, &[a], false, || {
            Op::BroadcastTo { a: a.clone() }
        })
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&self, a: &Tensor, axis: usize) -> Result<Tensor> {
        let rank = a.shape().len();
        if axis >= rank {
            return Err(TensorError::Dimension {
                op: "softmax",
                shape: a.shape().to_vec(),
                msg: format!("axis {axis} out of range"),
            });
        }
        if axis == rank - 1 {
            return self.softmax_last(a);
        }
        let moved = self.swap_axes(a, axis, rank - 1)?;
        let sm = self.softmax_last(&moved)?;
        self.swap_axes(&sm, axis, rank - 1)
    }

    fn softmax_last(&self, a: &Tensor) -> Result<Tensor> {
        let cols = *a.shape().last().unwrap();
        let rows = a.numel() / cols;
        let data = kernels::softmax_rows(&a.data(), rows, cols);
        self.finish("softmax", a.shape().to_vec(), data, &[a], true, || {
            Op::SoftmaxLast { a: a.clone() }
        })
    }

    pub fn log_softmax_last(&self, a: &Tensor) -> Result<Tensor> {
        let cols = *a.shape().last().unwrap();
        let rows = a.numel() / cols;
        let data = kernels::log_softmax_rows(&a.data(), rows, cols);
        self.finish("log_softmax", a.shape().to_vec(), data, &[a], true, || {
            Op::LogSoftmaxLast { a: a.clone() }
        })
    }

    /// Layer normalization over the last axis with affine gain/bias.
    /// Variance is the biased estimate; `eps` sits inside the square root.
    pub fn layernorm(&self, x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *x.shape().last().unwrap();
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layernorm",
                lhs: x.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let rows = x.numel() / d;
        let xd = x.data();
        let gd = gain.data();
        let bd = bias.data();
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; x.numel()];
        for r in 0..rows {
            let xr = &xd[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (xr[j] - mean) * is;
                xhat[r * d + j] = xh;
                data[r * d + j] = xh * gd[j] + bd[j];
            }
        }
        drop(xd);
        drop(gd);
        drop(bd);
        self.finish(
            "layernorm",
            x.shape().to_vec(),
            data,
            &[x, gain, bias],
            true,
            || Op::LayerNorm {
                x: x.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                xhat,
                inv_std,
            },
        )
    }

    /// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
    /// This form is fixed for the whole crate.
    pub fn gelu(&self, a: &Tensor) -> Result<Tensor> {
        let data: Vec<f64> = a
            .data()
            .iter()
            .map(|&x| {
                let u = GELU_K * (x + GELU_C * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            })
            .collect();
        self.finish("gelu", a.shape().to_vec(), data, &[a], true, || Op::Gelu {
            a: a.clone(),
        })
    }

    pub fn sum_all(&self, a: &Tensor) -> Result<Tensor> {
        let s: f64 = a.data().iter().sum();
        self.finish("sum_all", vec![1], vec![s], &[a], true, || Op::SumAll {
            a: a.clone(),
        })
    }

    pub fn mean_all(&self, a: &Tensor) -> Result<Tensor> {
        let s: f64 = a.data().iter().sum::<f64>() / a.numel() as f64;
        self.finish("mean_all", vec![1], vec![s], &[a], true, || Op::MeanAll {
            a: a.clone(),
        })
    }

    /// Mean squared error over all elements (shapes must match exactly).
    pub fn mse(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mse",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let s: f64 = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / a.numel() as f64;
        self.finish("mse", vec![1], vec![s], &[a, b], true, || Op::Mse {
            a: a.clone(),
            b: b.clone(),
        })
    }

    /// Mean absolute error over all elements.
    pub fn mae(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mae",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let s: f64 = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / a.numel() as f64;
        self.finish("mae", vec![1], vec![s], &[a, b], true, || Op::Mae {
            a: a.clone(),
            b: b.clone(),
        })
    }

    /// Mean cross-entropy of integer targets against logits [rows, classes].
    pub fn cross_entropy_logits(&self, logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
        if logits.shape().len() != 2 || logits.shape()[0] != targets.len() {
            return Err(TensorError::Dimension {
                op: "cross_entropy",
                shape: logits.shape().to_vec(),
                msg: format!("expected [{}, classes]", targets.len()),
            });
        }
        let c = logits.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::IndexOutOfBounds {
                op: "cross_entropy",
                index: bad,
                bound: c,
            });
        }
        let rows = targets.len();
        let lsm = kernels::log_softmax_rows(&logits.data(), rows, c);
        let loss = -targets
            .iter()
            .enumerate()
            .map(|(r, &t)| lsm[r * c + t])
            .sum::<f64>()
            / rows as f64;
        let probs: Vec<f64> = lsm.iter().map(|v| v.exp()).collect();
        let targets = Rc::new(targets.to_vec());
        self.finish("cross_entropy", vec![1], vec![loss], &[logits], true, || {
            Op::CrossEntropyLogits {
                logits: logits.clone(),
                targets,
                probs,
            }
        })
    }

    /// Normalize each last-axis slice to unit L2 norm (eps-guarded).
    pub fn l2_normalize_rows(&self, a: &Tensor) -> Result<Tensor> {
        let d = *a.shape().last().unwrap();
        let rows = a.numel() / d;
        let ad = a.data();
        let mut inv_norm = vec![0.0; rows];
        let mut data = vec![0.0; a.numel()];
        for r in 0..rows {
            let xr = &ad[r * d..(r + 1) * d];
            let ss: f64 = xr.iter().map(|v| v * v).sum();
            let inv = 1.0 / (ss + L2_EPS).sqrt();
            inv_norm[r] = inv;
            for j in 0..d {
                data[r * d + j] = xr[j] * inv;
            }
        }
        drop(ad);
        self.finish("l2_normalize", a.shape().to_vec(), data, &[a], true, || {
            Op::L2NormRows {
                a: a.clone(),
                inv_norm,
            }
        })
    }
}

fn check_positive(shape: &[usize], op: &'static str) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(TensorError::Dimension {
            op,
            shape: shape.to_vec(),
            msg: "dimensions must be positive".into(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::inference();
        let i2 = t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let x = t(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = tape.matmul(&i2, &x).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_projector() {
        let tape = Tape::inference();
        let p = t(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]);
        let x = t(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let y = tape.matmul(&p, &x).unwrap();
        assert_eq!(y.to_vec(), vec![5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::inference();
        let a = t(&[2, 3], vec![0.0; 6]);
        let b = t(&[2, 2], vec![0.0; 4]);
        match tape.matmul(&a, &b) {
            Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let tape = Tape::inference();
        let x = t(&[2], vec![0.0, 0.0]);
        assert_eq!(tape.softmax(&x, 0).unwrap().to_vec(), vec![0.5, 0.5]);
        let big = t(&[2], vec![1e4, 1e4]);
        let y = tape.softmax(&big, 0).unwrap().to_vec();
        assert_eq!(y, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_high_precision_oracle() {
        // Frozen from an independent 50-digit evaluation of exp(x)/sum(exp).
        let tape = Tape::inference();
        let x = t(&[3], vec![1.0, 2.0, 3.0]);
        let y = tape.softmax(&x, 0).unwrap().to_vec();
        let want = [
            0.09003057317038046,
            0.24472847105479765,
            0.6652409557748219,
        ];
        for (a, b) in y.iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        let tape = Tape::inference();
        let x = t(&[2, 2], vec![0.0; 4]);
        assert!(tape.softmax(&x, 2).is_err());
    }

    #[test]
    fn layernorm_constant_input_is_zero() {
        let tape = Tape::inference();
        let x = t(&[3], vec![4.2, 4.2, 4.2]);
        let gain = t(&[3], vec![1.0, 1.0, 1.0]);
        let bias = t(&[3], vec![0.0, 0.0, 0.0]);
        let y = tape.layernorm(&x, &gain, &bias, 1e-6).unwrap().to_vec();
        for v in y {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layernorm_two_point_symmetry() {
        let tape = Tape::inference();
        let x = t(&[2], vec![1.0, 3.0]);
        let gain = t(&[2], vec![1.0, 1.0]);
        let bias = t(&[2], vec![0.0, 0.0]);
        let y = tape.layernorm(&x, &gain, &bias, 1e-6).unwrap().to_vec();
        assert!((y[0] + 1.0).abs() < 1e-6);
        assert!((y[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layernorm_normalizes_mean_and_variance() {
        let tape = Tape::inference();
        let d = 64;
        let x: Vec<f64> = (0..d).map(|i| ((i * 2654435761) % 1000) as f64 / 250.0 - 2.0).collect();
        let xt = t(&[d], x);
        let gain = Tensor::full(&[d], 1.0).unwrap();
        let bias = Tensor::zeros(&[d]).unwrap();
        let y = tape.layernorm(&xt, &gain, &bias, 1e-6).unwrap().to_vec();
        let mean = y.iter().sum::<f64>() / d as f64;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        assert!(mean.abs() < 1e-7, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-5, "var {var}");
    }

    #[test]
    fn gelu_fixed_points() {
        let tape = Tape::inference();
        let x = t(&[3], vec![0.0, 10.0, 0.5]);
        let y = tape.gelu(&x).unwrap().to_vec();
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 10.0).abs() < 1e-6);
        // Frozen from an independent 50-digit evaluation of the tanh form.
        assert!((y[2] - 0.34571400982514392).abs() < 1e-15);
    }

    #[test]
    fn backward_of_square_is_2x() {
        let tape = Tape::new();
        let x = Tensor::param(&[1], vec![3.0]).unwrap();
        let y = tape.mul(&x, &x).unwrap();
        tape.backward(&y).unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn broadcast_suffix_and_scalar() {
        let tape = Tape::new();
        let a = Tensor::param(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::param(&[3], vec![10.0, 20.0, 30.0]).unwrap();
        let y = tape.add(&a, &b).unwrap();
        assert_eq!(y.to_vec(), vec![11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let s = Tensor::param(&[1], vec![2.0]).unwrap();
        let z = tape.mul(&y, &s).unwrap();
        let loss = tape.sum_all(&z).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(b.grad().unwrap(), vec![4.0, 4.0, 4.0]);
        assert_eq!(s.grad().unwrap(), vec![111.0 + 30.0]);
        assert_eq!(a.grad().unwrap(), vec![2.0; 6]);
    }

    #[test]
    fn broadcast_rejects_misaligned() {
        let tape = Tape::new();
        let a = t(&[2, 3], vec![0.0; 6]);
        let b = t(&[2], vec![0.0; 2]);
        assert!(tape.add(&a, &b).is_err());
    }

    #[test]
    fn nonfinite_is_an_error_naming_the_op() {
        let tape = Tape::inference();
        let a = t(&[1], vec![1e308]);
        let b = t(&[1], vec![1e308]);
        match tape.add(&a, &b) {
            Err(TensorError::NonFinite { op }) => assert_eq!(op, "add"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
        let x = t(&[1], vec![710.0]);
        assert!(matches!(
            tape.exp(&x),
            Err(TensorError::NonFinite { op: "exp" })
        ));
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let tape = Tape::inference();
        let a = t(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 3], vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        let c = tape.concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 5]);
        assert_eq!(c.to_vec(), vec![1., 2., 5., 6., 7., 3., 4., 8., 9., 10.]);
        let back = tape.slice_axis(&c, 1, 2, 3).unwrap();
        assert_eq!(back.to_vec(), b.to_vec());
    }

    #[test]
    fn select_and_scatter_rows() {
        let tape = Tape::inference();
        let a = t(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let picked = tape.select_rows(&a, &[2, 0]).unwrap();
        assert_eq!(picked.to_vec(), vec![5.0, 6.0, 1.0, 2.0]);
        let base = Tensor::zeros(&[3, 2]).unwrap();
        let out = tape.scatter_rows(&base, &picked, &[0, 2]).unwrap();
        assert_eq!(out.to_vec(), vec![5.0, 6.0, 0.0, 0.0, 1.0, 2.0]);
        assert!(tape.scatter_rows(&base, &picked, &[1, 1]).is_err());
    }

    #[test]
    fn swap_axes_matches_manual_transpose() {
        let tape = Tape::inference();
        let a = t(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let at = tape.transpose(&a).unwrap();
        assert_eq!(at.shape(), &[3, 2]);
        assert_eq!(at.to_vec(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        // rank-4 head split: [1,2,2,2] swap(1,2)
        let b = t(&[1, 2, 2, 2], (0..8).map(|v| v as f64).collect());
        let bs = tape.swap_axes(&b, 1, 2).unwrap();
        assert_eq!(bs.to_vec(), vec![0.0, 1.0, 4.0, 5.0, 2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_n() {
        let tape = Tape::inference();
        let logits = t(&[1, 2], vec![0.0, 0.0]);
        let loss = tape.cross_entropy_logits(&logits, &[0]).unwrap();
        assert!((loss.item().unwrap() - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn mse_and_mae_hand_values() {
        let tape = Tape::inference();
        let a = t(&[2], vec![1.0, 1.0]);
        let b = t(&[2], vec![0.0, 2.0]);
        assert!((tape.mse(&a, &b).unwrap().item().unwrap() - 1.0).abs() < 1e-15);
        let c = t(&[2], vec![1.0, 2.0]);
        let z = t(&[2], vec![0.0, 0.0]);
        assert!((tape.mae(&c, &z).unwrap().item().unwrap() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_unit_norm() {
        let tape = Tape::inference();
        let a = t(&[2, 3], vec![3.0, 0.0, 4.0, 1.0, 1.0, 1.0]);
        let y = tape.l2_normalize_rows(&a).unwrap().to_vec();
        let n0: f64 = y[..3].iter().map(|v| v * v).sum::<f64>().sqrt();
        let n1: f64 = y[3..].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n0 - 1.0).abs() < 1e-9 && (n1 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn matmul_associativity() {
        let tape = Tape::inference();
        let a = t(&[3, 4], (0..12).map(|i| (i as f64 * 0.7).sin()).collect());
        let b = t(&[4, 5], (0..20).map(|i| (i as f64 * 1.3).cos()).collect());
        let c = t(&[5, 2], (0..10).map(|i| (i as f64 * 0.3).sin()).collect());
        let left = tape
            .matmul(&tape.matmul(&a, &b).unwrap(), &c)
            .unwrap()
            .to_vec();
        let right = tape
            .matmul(&a, &tape.matmul(&b, &c).unwrap())
            .unwrap()
            .to_vec();
        for (l, r) in left.iter().zip(right) {
            assert!((l - r).abs() < 1e-9);
        }
    }
}
