//! Central finite-difference gradient checking.
//!
//! The checker is an independent oracle: it only ever evaluates the forward
//! computation (through non-recording tapes), so it shares no code path with
//! [`Tape::backward`]. Used by unit tests and by the acceptance suite.

use super::{Result, Tape, Tensor, TensorError};

#[derive(Debug, Clone, Copy)]
pub struct FdConfig {
    /// Central-difference step.
    pub step: f64,
    /// Floor for the relative-error denominator; guards near-zero gradients.
    pub denom_floor: f64,
    /// Cap on elements probed per leaf (deterministic stride sampling).
    pub max_per_leaf: usize,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            step: 1e-5,
            denom_floor: 1e-4,
            max_per_leaf: usize::MAX,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// (leaf index, element index, analytic, finite-difference) of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compare tape gradients of `build`'s scalar output against central finite
/// differences over every listed leaf. `build` must be a pure function of the
/// current leaf values.
pub fn check_gradients<F>(build: F, leaves: &[&Tensor], cfg: FdConfig) -> Result<FdReport>
where
    F: Fn(&Tape) -> Result<Tensor>,
{
    let tape = Tape::new();
    let loss = build(&tape)?;
    if loss.numel() != 1 {
        return Err(TensorError::Contract {
            op: "gradcheck",
            msg: "build must return a scalar".into(),
        });
    }
    for l in leaves {
        l.zero_grad();
    }
    tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();
    drop(tape);

    let eval = |leaf: &Tensor, i: usize, v: f64| -> Result<f64> {
        let orig = leaf.data()[i];
        leaf.update_data(|d| d[i] = v);
        let out = build(&Tape::inference()).and_then(|t| t.item());
        leaf.update_data(|d| d[i] = orig);
        out
    };

    let mut report = FdReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    for (li, leaf) in leaves.iter().enumerate() {
        let n = leaf.numel();
        let stride = (n / cfg.max_per_leaf.max(1)).max(1);
        let mut i = 0;
        while i < n {
            let x = leaf.data()[i];
            let fp = eval(leaf, i, x + cfg.step)?;
            let fm = eval(leaf, i, x - cfg.step)?;
            let fd = (fp - fm) / (2.0 * cfg.step);
            let g = analytic[li][i];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(cfg.denom_floor);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((li, i, g, fd));
            }
            report.checked += 1;
            i += stride;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let (u1, u2): (f64, f64) = (rng.gen_range(1e-10..1.0), rng.gen());
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        Tensor::param(shape, data).unwrap()
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[4, 2]);
        let w = randn(&mut rng, &[3, 2]); // random projection to a scalar
        let report = check_gradients(
            |tape| {
                let y = tape.matmul(&a, &b)?;
                tape.sum_all(&tape.mul(&y, &w)?)
            },
            &[&a, &b],
            FdConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn layernorm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randn(&mut rng, &[2, 8]);
        let gain = randn(&mut rng, &[8]);
        let bias = randn(&mut rng, &[8]);
        let w = randn(&mut rng, &[2, 8]);
        let report = check_gradients(
            |tape| {
                let y = tape.layernorm(&x, &gain, &bias, 1e-6)?;
                tape.sum_all(&tape.mul(&y, &w)?)
            },
            &[&x, &gain, &bias],
            FdConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }

    #[test]
    fn composite_mlp_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = randn(&mut rng, &[4, 6]);
        let w1 = randn(&mut rng, &[6, 10]);
        let b1 = randn(&mut rng, &[10]);
        let w2 = randn(&mut rng, &[10, 3]);
        let b2 = randn(&mut rng, &[3]);
        let tgt = randn(&mut rng, &[4, 3]);
        let report = check_gradients(
            |tape| {
                let h = tape.gelu(&tape.add(&tape.matmul(&x, &w1)?, &b1)?)?;
                let y = tape.add(&tape.matmul(&h, &w2)?, &b2)?;
                tape.mse(&y, &tgt)
            },
            &[&x, &w1, &b1, &w2, &b2],
            FdConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn sum_backward_is_ones() {
        let x = Tensor::param(&[2, 3], vec![0.5; 6]).unwrap();
        let tape = Tape::new();
        let loss = tape.sum_all(&x).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }
}
