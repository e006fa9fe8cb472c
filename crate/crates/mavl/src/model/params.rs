//! Parameter containers, initialization, and the momentum shadow copy.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Result as TResult, Tape, Tensor};

use super::config::ModelConfig;
use super::ModelError;

const INIT_STD: f64 = 0.02;
pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 1.0;

/// Truncated normal: resample anything beyond two standard deviations.
fn trunc_normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("valid normal");
    (0..n)
        .map(|_| loop {
            let v = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect()
}

fn weight(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(shape, trunc_normal(rng, n, INIT_STD)).expect("weight init")
}

fn zeros_param(shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(shape, vec![0.0; n]).expect("zeros init")
}

fn ones_param(shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(shape, vec![1.0; n]).expect("ones init")
}

/// Visits every tensor in a parameter tree with its dotted path.
pub trait Visit {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor));
}

#[derive(Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: weight(rng, &[fan_in, fan_out]),
            b: zeros_param(&[fan_out]),
        }
    }

    /// x[..., in] @ w + b, any leading shape.
    pub fn apply(&self, tape: &Tape, x: &Tensor) -> TResult<Tensor> {
        let shape = x.shape().to_vec();
        let fan_in = *shape.last().unwrap();
        let rows = x.numel() / fan_in;
        let x2 = tape.reshape(x, &[rows, fan_in])?;
        let y = tape.add(&tape.matmul(&x2, &self.w)?, &self.b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.w.shape()[1];
        tape.reshape(&y, &out_shape)
    }
}

impl Visit for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }
}

#[derive(Clone)]
pub struct LayerNormP {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormP {
    fn init(dim: usize) -> LayerNormP {
        LayerNormP {
            gain: ones_param(&[dim]),
            bias: zeros_param(&[dim]),
        }
    }

    pub fn apply(&self, tape: &Tape, x: &Tensor, eps: f64) -> TResult<Tensor> {
        tape.layernorm(x, &self.gain, &self.bias, eps)
    }
}

impl Visit for LayerNormP {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.gain"), &self.gain);
        f(format!("{prefix}.bias"), &self.bias);
    }
}

#[derive(Clone)]
pub struct SelfAttnP {
    pub ln: LayerNormP,
    pub qkv: Linear,
    pub out: Linear,
}

impl SelfAttnP {
    fn init(rng: &mut ChaCha8Rng, dim: usize) -> SelfAttnP {
        SelfAttnP {
            ln: LayerNormP::init(dim),
            qkv: Linear::init(rng, dim, 3 * dim),
            out: Linear::init(rng, dim, dim),
        }
    }
}

impl Visit for SelfAttnP {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.ln.visit(&format!("{prefix}.ln"), f);
        self.qkv.visit(&format!("{prefix}.qkv"), f);
        self.out.visit(&format!("{prefix}.out"), f);
    }
}

#[derive(Clone)]
pub struct MlpP {
    pub ln: LayerNormP,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl MlpP {
    fn init(rng: &mut ChaCha8Rng, dim: usize, ratio: usize) -> MlpP {
        MlpP {
            ln: LayerNormP::init(dim),
            fc1: Linear::init(rng, dim, ratio * dim),
            fc2: Linear::init(rng, ratio * dim, dim),
        }
    }
}

impl Visit for MlpP {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.ln.visit(&format!("{prefix}.ln"), f);
        self.fc1.visit(&format!("{prefix}.fc1"), f);
        self.fc2.visit(&format!("{prefix}.fc2"), f);
    }
}

#[derive(Clone)]
pub struct BlockP {
    pub attn: SelfAttnP,
    pub mlp: MlpP,
}

impl BlockP {
    fn init(rng: &mut ChaCha8Rng, dim: usize, ratio: usize) -> BlockP {
        BlockP {
            attn: SelfAttnP::init(rng, dim),
            mlp: MlpP::init(rng, dim, ratio),
        }
    }
}

impl Visit for BlockP {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.mlp.visit(&format!("{prefix}.mlp"), f);
    }
}

#[derive(Clone)]
pub struct CrossAttnP {
    pub ln: LayerNormP,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl CrossAttnP {
    fn init(rng: &mut ChaCha8Rng, dim: usize) -> CrossAttnP {
        CrossAttnP {
            ln: LayerNormP::init(dim),
            q: Linear::init(rng, dim, dim),
            k: Linear::init(rng, dim, dim),
            v: Linear::init(rng, dim, dim),
            out: Linear::init(rng, dim, dim),
        }
    }
}

impl Visit for CrossAttnP {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.ln.visit(&format!("{prefix}.ln"), f);
        self.q.visit(&format!("{prefix}.q"), f);
        self.k.visit(&format!("{prefix}.k"), f);
        self.v.visit(&format!("{prefix}.v"), f);
        self.out.visit(&format!("{prefix}.out"), f);
    }
}

#[derive(Clone)]
pub struct FusionBlockP {
    pub attn: SelfAttnP,
    pub cross: CrossAttnP,
    pub mlp: MlpP,
}

impl Visit for FusionBlockP {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.cross.visit(&format!("{prefix}.cross"), f);
        self.mlp.visit(&format!("{prefix}.mlp"), f);
    }
}

#[derive(Clone)]
pub struct StackP {
    pub blocks: Vec<BlockP>,
    pub ln_f: LayerNormP,
}

impl StackP {
    fn init(rng: &mut ChaCha8Rng, layers: usize, dim: usize, ratio: usize) -> StackP {
        StackP {
            blocks: (0..layers).map(|_| BlockP::init(rng, dim, ratio)).collect(),
            ln_f: LayerNormP::init(dim),
        }
    }
}

impl Visit for StackP {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.block{i}"), f);
        }
        self.ln_f.visit(&format!("{prefix}.ln_f"), f);
    }
}

#[derive(Clone)]
pub struct ImageEncoderP {
    pub patch_embed: Linear,
    /// [1, d] learned sequence prefix.
    pub cls: Tensor,
    /// [N+1, d]; row 0 belongs to the [CLS] slot.
    pub pos: Tensor,
    pub stack: StackP,
}

impl Visit for ImageEncoderP {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.patch_embed.visit(&format!("{prefix}.patch_embed"), f);
        f(format!("{prefix}.cls"), &self.cls);
        f(format!("{prefix}.pos"), &self.pos);
        self.stack.visit(&format!("{prefix}.stack"), f);
    }
}

#[derive(Clone)]
pub struct TextEncoderP {
    /// [V, d] token embeddings.
    pub tok_emb: Tensor,
    /// [L, d] positional table.
    pub pos: Tensor,
    pub stack: StackP,
}

impl Visit for TextEncoderP {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.tok_emb"), &self.tok_emb);
        f(format!("{prefix}.pos"), &self.pos);
        self.stack.visit(&format!("{prefix}.stack"), f);
    }
}

#[derive(Clone)]
pub struct FusionP {
    pub blocks: Vec<FusionBlockP>,
    pub ln_f: LayerNormP,
}

impl Visit for FusionP {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.block{i}"), f);
        }
        self.ln_f.visit(&format!("{prefix}.ln_f"), f);
    }
}

#[derive(Clone)]
pub struct DecoderP {
    pub img_proj: Linear,
    pub txt_proj: Linear,
    /// [1, decoder_dim] learned stand-in for masked patches.
    pub mask_token: Tensor,
    /// [N+1, decoder_dim]; applied to image slots only.
    pub pos: Tensor,
    pub stack: StackP,
    pub pixel_head: Linear,
}

impl Visit for DecoderP {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.img_proj.visit(&format!("{prefix}.img_proj"), f);
        self.txt_proj.visit(&format!("{prefix}.txt_proj"), f);
        f(format!("{prefix}.mask_token"), &self.mask_token);
        f(format!("{prefix}.pos"), &self.pos);
        self.stack.visit(&format!("{prefix}.stack"), f);
        self.pixel_head.visit(&format!("{prefix}.pixel_head"), f);
    }
}

#[derive(Clone)]
pub struct HeadsP {
    pub proj_v: Linear,
    pub proj_w: Linear,
    pub itm: Linear,
    pub mlm: Linear,
    /// Temperature stored as log(tau); exponentiated in the graph and the
    /// value is clamped to [TAU_MIN, TAU_MAX] after each optimizer step
    /// (clamping the parameter rather than the graph keeps its gradient
    /// alive at the bounds).
    pub log_tau: Tensor,
}

impl Visit for HeadsP {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.proj_v.visit(&format!("{prefix}.proj_v"), f);
        self.proj_w.visit(&format!("{prefix}.proj_w"), f);
        self.itm.visit(&format!("{prefix}.itm"), f);
        self.mlm.visit(&format!("{prefix}.mlm"), f);
        f(format!("{prefix}.log_tau"), &self.log_tau);
    }
}

/// All online (gradient-updated) parameters.
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub img: ImageEncoderP,
    pub txt: TextEncoderP,
    pub fusion: FusionP,
    pub dec: DecoderP,
    pub heads: HeadsP,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ModelParams, ModelError> {
        cfg.validate()?;
        let d = cfg.d_model;
        let dd = cfg.decoder_dim;
        let n = cfg.num_patches();
        let img = ImageEncoderP {
            patch_embed: Linear::init(rng, cfg.patch_dim(), d),
            cls: weight(rng, &[1, d]),
            pos: weight(rng, &[n + 1, d]),
            stack: StackP::init(rng, cfg.image_encoder_layers, d, cfg.mlp_ratio),
        };
        let txt = TextEncoderP {
            tok_emb: weight(rng, &[cfg.vocab_size, d]),
            pos: weight(rng, &[cfg.l_max, d]),
            stack: StackP::init(rng, cfg.text_encoder_layers, d, cfg.mlp_ratio),
        };
        let fusion = FusionP {
            blocks: (0..cfg.fusion_layers)
                .map(|_| FusionBlockP {
                    attn: SelfAttnP::init(rng, d),
                    cross: CrossAttnP::init(rng, d),
                    mlp: MlpP::init(rng, d, cfg.mlp_ratio),
                })
                .collect(),
            ln_f: LayerNormP::init(d),
        };
        let dec = DecoderP {
            img_proj: Linear::init(rng, d, dd),
            txt_proj: Linear::init(rng, d, dd),
            mask_token: weight(rng, &[1, dd]),
            pos: weight(rng, &[n + 1, dd]),
            stack: StackP::init(rng, cfg.decoder_layers, dd, cfg.mlp_ratio),
            pixel_head: Linear::init(rng, dd, cfg.patch_dim()),
        };
        let heads = HeadsP {
            proj_v: Linear::init(rng, d, cfg.proj_dim),
            proj_w: Linear::init(rng, d, cfg.proj_dim),
            itm: Linear::init(rng, d, 2),
            mlm: Linear::init(rng, d, cfg.vocab_size),
            log_tau: Tensor::param(&[1], vec![TAU_INIT.ln()]).expect("tau init"),
        };
        Ok(ModelParams {
            cfg: cfg.clone(),
            img,
            txt,
            fusion,
            dec,
            heads,
        })
    }

    /// Every trainable tensor exactly once, in a stable order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let mut push = |name: String, t: &Tensor| out.push((name, t.clone()));
        self.img.visit("img", &mut push);
        self.txt.visit("txt", &mut push);
        self.fusion.visit("fusion", &mut push);
        self.dec.visit("dec", &mut push);
        self.heads.visit("heads", &mut push);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.named_params() {
            t.zero_grad();
        }
    }

    /// Current temperature value (the stored parameter is log tau).
    pub fn tau(&self) -> f64 {
        self.heads.log_tau.data()[0].exp()
    }

    /// Clamp tau into its legal range by adjusting the log parameter.
    pub fn clamp_tau(&self) {
        self.heads.log_tau.update_data(|d| {
            d[0] = d[0].clamp(TAU_MIN.ln(), TAU_MAX.ln());
        });
    }
}

/// EMA copies of the image encoder, text encoder, and the two contrastive
/// projections. Shadow tensors never require gradients.
pub struct MomentumShadow {
    pub img: ImageEncoderP,
    pub txt: TextEncoderP,
    pub proj_v: Linear,
    pub proj_w: Linear,
}

fn clone_frozen(t: &Tensor) -> Tensor {
    Tensor::from_vec(t.shape(), t.to_vec()).expect("frozen clone")
}

fn freeze_linear(l: &Linear) -> Linear {
    Linear {
        w: clone_frozen(&l.w),
        b: clone_frozen(&l.b),
    }
}

fn freeze_ln(l: &LayerNormP) -> LayerNormP {
    LayerNormP {
        gain: clone_frozen(&l.gain),
        bias: clone_frozen(&l.bias),
    }
}

fn freeze_stack(s: &StackP) -> StackP {
    StackP {
        blocks: s
            .blocks
            .iter()
            .map(|b| BlockP {
                attn: SelfAttnP {
                    ln: freeze_ln(&b.attn.ln),
                    qkv: freeze_linear(&b.attn.qkv),
                    out: freeze_linear(&b.attn.out),
                },
                mlp: MlpP {
                    ln: freeze_ln(&b.mlp.ln),
                    fc1: freeze_linear(&b.mlp.fc1),
                    fc2: freeze_linear(&b.mlp.fc2),
                },
            })
            .collect(),
        ln_f: freeze_ln(&s.ln_f),
    }
}

impl MomentumShadow {
    /// Initialize as an exact copy of the online parameters.
    pub fn from_online(params: &ModelParams) -> MomentumShadow {
        MomentumShadow {
            img: ImageEncoderP {
                patch_embed: freeze_linear(&params.img.patch_embed),
                cls: clone_frozen(&params.img.cls),
                pos: clone_frozen(&params.img.pos),
                stack: freeze_stack(&params.img.stack),
            },
            txt: TextEncoderP {
                tok_emb: clone_frozen(&params.txt.tok_emb),
                pos: clone_frozen(&params.txt.pos),
                stack: freeze_stack(&params.txt.stack),
            },
            proj_v: freeze_linear(&params.heads.proj_v),
            proj_w: freeze_linear(&params.heads.proj_w),
        }
    }

    /// Shadow tensors paired with the online tensors they track.
    pub fn named_pairs<'a>(
        &'a self,
        online: &'a ModelParams,
    ) -> Vec<(String, Tensor, Tensor)> {
        let mut shadow = Vec::new();
        let mut push_s = |name: String, t: &Tensor| shadow.push((name, t.clone()));
        self.img.visit("img", &mut push_s);
        self.txt.visit("txt", &mut push_s);
        self.proj_v.visit("heads.proj_v", &mut push_s);
        self.proj_w.visit("heads.proj_w", &mut push_s);

        let mut online_map = Vec::new();
        let mut push_o = |name: String, t: &Tensor| online_map.push((name, t.clone()));
        online.img.visit("img", &mut push_o);
        online.txt.visit("txt", &mut push_o);
        online.heads.proj_v.visit("heads.proj_v", &mut push_o);
        online.heads.proj_w.visit("heads.proj_w", &mut push_o);

        debug_assert_eq!(shadow.len(), online_map.len());
        shadow
            .into_iter()
            .zip(online_map)
            .map(|((sn, st), (on, ot))| {
                debug_assert_eq!(sn, on);
                (sn, st, ot)
            })
            .collect()
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let mut push = |name: String, t: &Tensor| out.push((name, t.clone()));
        self.img.visit("img", &mut push);
        self.txt.visit("txt", &mut push);
        self.proj_v.visit("heads.proj_v", &mut push);
        self.proj_w.visit("heads.proj_w", &mut push);
        out
    }
}

/// theta_shadow := m * theta_shadow + (1 - m) * theta_online, elementwise.
/// No gradients flow; the shadow is mutated in place.
///
/// Evaluated as shadow + (1 - m) * (online - shadow), which is algebraically
/// identical and exact at both fixed points: m = 1 leaves the shadow bits
/// untouched and a converged shadow (equal to online) stays equal. m = 0 is
/// special-cased to a plain copy so it is exact too.
pub fn ema_update(
    shadow: &MomentumShadow,
    online: &ModelParams,
    m: f64,
) -> Result<(), ModelError> {
    if !(0.0..=1.0).contains(&m) {
        return Err(ModelError::Config(format!(
            "momentum coefficient {m} outside [0, 1]"
        )));
    }
    for (name, s, o) in shadow.named_pairs(online) {
        if s.shape() != o.shape() {
            return Err(ModelError::Contract(format!(
                "ema shapes diverged at {name}: {:?} vs {:?}",
                s.shape(),
                o.shape()
            )));
        }
        let ov = o.data();
        s.update_data(|sv| {
            if m == 0.0 {
                sv.copy_from_slice(&ov);
            } else {
                for (si, &oi) in sv.iter_mut().zip(ov.iter()) {
                    *si += (1.0 - m) * (oi - *si);
                }
            }
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            patch_size: 8,
            image_size: 16,
            d_model: 16,
            image_encoder_layers: 1,
            text_encoder_layers: 1,
            fusion_layers: 1,
            decoder_layers: 1,
            decoder_dim: 8,
            heads: 2,
            mlp_ratio: 2,
            vocab_size: 20,
            l_max: 8,
            mask_ratio: 0.5,
            proj_dim: 8,
            ln_eps: 1e-6,
        }
    }

    #[test]
    fn param_count_matches_formula() {
        for cfg in [small_cfg(), ModelConfig::default()] {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let p = ModelParams::init(&cfg, &mut rng).unwrap();
            assert_eq!(p.param_count(), cfg.param_count_formula(), "{cfg:?}");
        }
    }

    #[test]
    fn every_param_registered_exactly_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ModelParams::init(&small_cfg(), &mut rng).unwrap();
        let names: Vec<String> = p.named_params().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(names.len(), dedup.len());
        assert!(names.iter().all(|n| !n.is_empty()));
    }

    #[test]
    fn ema_fixed_points_and_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let online = ModelParams::init(&small_cfg(), &mut rng).unwrap();
        let shadow = MomentumShadow::from_online(&online);
        // m = 1: shadow unchanged
        let before: Vec<Vec<f64>> = shadow.named_tensors().iter().map(|(_, t)| t.to_vec()).collect();
        online.img.cls.update_data(|d| d.iter_mut().for_each(|v| *v += 1.0));
        ema_update(&shadow, &online, 1.0).unwrap();
        let after: Vec<Vec<f64>> = shadow.named_tensors().iter().map(|(_, t)| t.to_vec()).collect();
        assert_eq!(before, after);
        // m = 0: shadow == online
        ema_update(&shadow, &online, 0.0).unwrap();
        for (name, s, o) in shadow.named_pairs(&online) {
            assert_eq!(s.to_vec(), o.to_vec(), "{name}");
        }
        // scalar case: shadow 2, online 4, m 0.5 -> 3
        shadow.img.cls.update_data(|d| d.iter_mut().for_each(|v| *v = 2.0));
        online.img.cls.update_data(|d| d.iter_mut().for_each(|v| *v = 4.0));
        ema_update(&shadow, &online, 0.5).unwrap();
        assert!(shadow.img.cls.to_vec().iter().all(|&v| v == 3.0));
        assert!(ema_update(&shadow, &online, 1.5).is_err());
    }

    #[test]
    fn ema_geometric_convergence_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let online = ModelParams::init(&small_cfg(), &mut rng).unwrap();
        let shadow = MomentumShadow::from_online(&online);
        online.img.cls.update_data(|d| d.iter_mut().for_each(|v| *v += 0.5));
        let m: f64 = 0.995;
        let delta0: f64 = 0.5;
        let eps = 1e-6_f64;
        let steps = ((eps / delta0).ln() / m.ln()).ceil() as usize;
        for _ in 0..steps {
            ema_update(&shadow, &online, m).unwrap();
        }
        let mut max_diff = 0.0f64;
        for (_, s, o) in shadow.named_pairs(&online) {
            for (a, b) in s.to_vec().iter().zip(o.to_vec()) {
                max_diff = max_diff.max((a - b).abs());
            }
        }
        assert!(max_diff < 1e-6, "max diff {max_diff} after {steps} steps");
    }

    #[test]
    fn shadow_never_requires_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let online = ModelParams::init(&small_cfg(), &mut rng).unwrap();
        let shadow = MomentumShadow::from_online(&online);
        for (_, t) in shadow.named_tensors() {
            assert!(!t.requires_grad());
        }
    }

    #[test]
    fn tau_starts_at_007_and_clamps() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = ModelParams::init(&small_cfg(), &mut rng).unwrap();
        assert!((p.tau() - 0.07).abs() < 1e-12);
        p.heads.log_tau.update_data(|d| d[0] = 5.0);
        p.clamp_tau();
        assert!((p.tau() - TAU_MAX).abs() < 1e-12);
        p.heads.log_tau.update_data(|d| d[0] = -50.0);
        p.clamp_tau();
        assert!((p.tau() - TAU_MIN).abs() < 1e-9);
    }
}
