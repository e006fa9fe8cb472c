//! Visible/masked patch partitions.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ModelError;

/// One image's partition of patch indices. Both lists are kept sorted, so a
/// plan is a pure set partition: the order in which indices were drawn never
/// leaks into downstream computation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    visible_idx: Vec<usize>,
    masked_idx: Vec<usize>,
}

impl MaskPlan {
    pub fn new(mut visible_idx: Vec<usize>, mut masked_idx: Vec<usize>) -> MaskPlan {
        visible_idx.sort_unstable();
        masked_idx.sort_unstable();
        MaskPlan {
            visible_idx,
            masked_idx,
        }
    }

    /// The degenerate plan with every patch visible.
    pub fn full(n: usize) -> MaskPlan {
        MaskPlan {
            visible_idx: (0..n).collect(),
            masked_idx: Vec::new(),
        }
    }

    pub fn visible(&self) -> &[usize] {
        &self.visible_idx
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked_idx
    }

    pub fn num_visible(&self) -> usize {
        self.visible_idx.len()
    }

    pub fn num_masked(&self) -> usize {
        self.masked_idx.len()
    }

    pub fn total(&self) -> usize {
        self.visible_idx.len() + self.masked_idx.len()
    }
}

/// Uniformly partition `n` patches, masking round(alpha * n) of them.
pub fn sample_mask_plan(
    rng: &mut ChaCha8Rng,
    n: usize,
    alpha: f64,
) -> Result<MaskPlan, ModelError> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(ModelError::Config(format!(
            "mask ratio {alpha} outside [0, 1)"
        )));
    }
    let m = (alpha * n as f64).round() as usize;
    if m >= n {
        return Err(ModelError::Config(format!(
            "mask ratio {alpha} rounds to {m} masked of {n} patches; need M < N"
        )));
    }
    // partial Fisher-Yates: the first m slots become the masked set
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    let mut masked: Vec<usize> = idx[..m].to_vec();
    let mut visible: Vec<usize> = idx[m..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    Ok(MaskPlan {
        visible_idx: visible,
        masked_idx: masked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn half_ratio_masks_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plan = sample_mask_plan(&mut rng, 64, 0.5).unwrap();
        assert_eq!(plan.num_masked(), 32);
        assert_eq!(plan.num_visible(), 32);
    }

    #[test]
    fn zero_ratio_masks_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let plan = sample_mask_plan(&mut rng, 64, 0.0).unwrap();
        assert!(plan.masked().is_empty());
        assert_eq!(plan.visible(), MaskPlan::full(64).visible());
    }

    #[test]
    fn rejects_out_of_range_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(sample_mask_plan(&mut rng, 64, 1.0).is_err());
        assert!(sample_mask_plan(&mut rng, 64, -0.1).is_err());
    }

    #[test]
    fn partition_property_over_many_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10_000 {
            let plan = sample_mask_plan(&mut rng, 64, 0.5).unwrap();
            let mut all: Vec<usize> = plan
                .visible()
                .iter()
                .chain(plan.masked())
                .copied()
                .collect();
            all.sort_unstable();
            assert_eq!(all, (0..64).collect::<Vec<_>>());
        }
    }

    #[test]
    fn per_index_mask_frequency_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = 10_000;
        let mut counts = vec![0usize; 64];
        for _ in 0..draws {
            let plan = sample_mask_plan(&mut rng, 64, 0.5).unwrap();
            for &i in plan.masked() {
                counts[i] += 1;
            }
        }
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.5).abs() < 0.02, "index {i}: {freq}");
        }
    }

    #[test]
    fn construction_normalizes_order() {
        let a = MaskPlan::new(vec![3, 1, 2], vec![0, 4]);
        let b = MaskPlan::new(vec![2, 3, 1], vec![4, 0]);
        assert_eq!(a, b);
    }
}
