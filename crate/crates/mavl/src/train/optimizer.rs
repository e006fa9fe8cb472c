//! AdamW with decoupled weight decay and global-norm gradient clipping.

use crate::tensor::Tensor;

use super::TrainError;

const ADAM_EPS: f64 = 1e-8;

/// First/second moment buffers aligned with the parameter registry order.
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[(String, Tensor)]) -> AdamState {
        AdamState {
            step: 0,
            m: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }
}

/// Weight decay applies to weight matrices and embedding tables; biases and
/// the log-temperature are excluded. Every parameter lands in exactly one
/// class by construction (suffix match on the registry name).
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".b") || name.ends_with(".bias") || name == "heads.log_tau")
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(params: &[(String, Tensor)], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for (_, t) in params {
        if let Some(g) = t.grad() {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for (_, t) in params {
            if let Some(mut g) = t.grad() {
                g.iter_mut().for_each(|v| *v *= scale);
                t.set_grad(Some(g)).expect("grad shape unchanged");
            }
        }
    }
    norm
}

/// One decoupled-weight-decay Adam step:
///   p *= 1 - lr * wd          (decayed parameters only)
///   m = b1 m + (1 - b1) g
///   v = b2 v + (1 - b2) g^2
///   p -= lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
/// Parameters without a gradient this step still decay their moments.
pub fn adamw_step(
    params: &[(String, Tensor)],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (i, (name, p)) in params.iter().enumerate() {
        let grad = p.grad();
        if let Some(g) = &grad {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::Numeric(format!(
                    "non-finite gradient on parameter {name}"
                )));
            }
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let decay = decays(name);
        p.update_data(|data| {
            for j in 0..data.len() {
                let gj = grad.as_ref().map_or(0.0, |g| g[j]);
                if decay {
                    data[j] *= 1.0 - lr * weight_decay;
                }
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(name: &str, values: Vec<f64>) -> (String, Tensor) {
        (
            name.to_string(),
            Tensor::param(&[values.len()], values).unwrap(),
        )
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_parameters() {
        let p = param("x.w", vec![1.5, -2.0]);
        let mut st = AdamState::new(std::slice::from_ref(&p));
        adamw_step(std::slice::from_ref(&p), &mut st, 1e-3, 0.9, 0.999, 0.0).unwrap();
        assert_eq!(p.1.to_vec(), vec![1.5, -2.0]);
    }

    #[test]
    fn decay_only_shrinks_parameters() {
        let p = param("x.w", vec![2.0]);
        let mut st = AdamState::new(std::slice::from_ref(&p));
        let (lr, wd) = (0.1, 0.5);
        adamw_step(std::slice::from_ref(&p), &mut st, lr, 0.9, 0.999, wd).unwrap();
        assert!((p.1.to_vec()[0] - 2.0 * (1.0 - lr * wd)).abs() < 1e-15);
    }

    #[test]
    fn single_scalar_step_matches_hand_computation() {
        // one step of the published update rule, worked by hand
        let p = param("x.w", vec![1.0]);
        p.1.set_grad(Some(vec![0.5])).unwrap();
        let mut st = AdamState::new(std::slice::from_ref(&p));
        let (lr, b1, b2, wd) = (0.01, 0.9, 0.999, 0.02);
        adamw_step(std::slice::from_ref(&p), &mut st, lr, b1, b2, wd).unwrap();
        let decayed = 1.0 * (1.0 - lr * wd);
        let m = (1.0 - b1) * 0.5;
        let v = (1.0 - b2) * 0.25;
        let mhat = m / (1.0 - b1);
        let vhat = v / (1.0 - b2);
        let expected = decayed - lr * mhat / (vhat.sqrt() + 1e-8);
        assert!((p.1.to_vec()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_is_an_error_naming_the_parameter() {
        let p = param("enc.qkv.w", vec![1.0]);
        p.1.set_grad(Some(vec![f64::NAN])).unwrap();
        let mut st = AdamState::new(std::slice::from_ref(&p));
        let err = adamw_step(std::slice::from_ref(&p), &mut st, 1e-3, 0.9, 0.999, 0.0)
            .unwrap_err();
        assert!(err.to_string().contains("enc.qkv.w"));
    }

    #[test]
    fn exclusion_list_partitions_parameters() {
        let names = ["img.block0.qkv.w", "img.block0.qkv.b", "img.stack.ln_f.gain",
                     "img.stack.ln_f.bias", "heads.log_tau", "txt.tok_emb"];
        let decayed: Vec<_> = names.iter().filter(|n| decays(n)).collect();
        let excluded: Vec<_> = names.iter().filter(|n| !decays(n)).collect();
        assert_eq!(decayed.len() + excluded.len(), names.len());
        assert!(excluded.iter().any(|n| **n == "heads.log_tau"));
        assert!(excluded.iter().any(|n| n.ends_with(".b")));
        assert!(decayed.iter().any(|n| **n == "txt.tok_emb"));
        assert!(decayed.iter().any(|n| n.ends_with(".gain")));
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let p1 = param("a.w", vec![3.0]);
        let p2 = param("b.w", vec![4.0]);
        p1.1.set_grad(Some(vec![3.0])).unwrap();
        p2.1.set_grad(Some(vec![4.0])).unwrap();
        let params = vec![p1, p2];
        let norm = clip_global_norm(&params, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let g1 = params[0].1.grad().unwrap()[0];
        let g2 = params[1].1.grad().unwrap()[0];
        let new_norm = (g1 * g1 + g2 * g2).sqrt();
        assert!((new_norm - 1.0).abs() < 1e-12);
    }
}
