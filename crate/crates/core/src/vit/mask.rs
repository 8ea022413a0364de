use super::ModelError;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Patch-level mask. Both index lists are sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub ratio: f64,
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    pub seed: u64,
}

impl MaskSpec {
    /// Every patch visible; used for inference at mask ratio 0.
    pub fn full_visibility(num_tokens: usize) -> Self {
        Self {
            ratio: 0.0,
            visible: (0..num_tokens).collect(),
            masked: Vec::new(),
            seed: 0,
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.visible.len() + self.masked.len()
    }

    /// Per-token flag, `true` where masked.
    pub fn masked_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.num_tokens()];
        for &i in &self.masked {
            flags[i] = true;
        }
        flags
    }
}

/// Number of visible tokens for `n_tokens` at ratio `r`.
pub fn visible_count(n_tokens: usize, ratio: f64) -> usize {
    n_tokens - (ratio * n_tokens as f64).round() as usize
}

/// Uniform subset without replacement; the same seed gives the same mask.
pub fn sample_mask(n_tokens: usize, ratio: f64, seed: u64) -> Result<MaskSpec, ModelError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(ModelError::Mask(format!("ratio {ratio} outside (0, 1)")));
    }
    if n_tokens < 2 {
        return Err(ModelError::Mask(format!("need at least 2 tokens, got {n_tokens}")));
    }
    let n_visible = visible_count(n_tokens, ratio);
    if n_visible == 0 || n_visible == n_tokens {
        return Err(ModelError::Mask(format!(
            "ratio {ratio} leaves {n_visible} of {n_tokens} tokens visible"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n_tokens).collect();
    perm.shuffle(&mut rng);
    let mut visible = perm[..n_visible].to_vec();
    let mut masked = perm[n_visible..].to_vec();
    visible.sort_unstable();
    masked.sort_unstable();
    Ok(MaskSpec {
        ratio,
        visible,
        masked,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_ratio_counts() {
        let m = sample_mask(64, 0.75, 9).unwrap();
        assert_eq!((m.visible.len(), m.masked.len()), (16, 48));
        assert_eq!(m, sample_mask(64, 0.75, 9).unwrap());
        assert_ne!(m.visible, sample_mask(64, 0.75, 10).unwrap().visible);
    }

    #[test]
    fn partition_is_disjoint_and_complete() {
        for seed in 0..20 {
            let m = sample_mask(50, 0.6, seed).unwrap();
            let mut all: Vec<usize> = m.visible.iter().chain(&m.masked).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..50).collect::<Vec<_>>());
        }
    }

    #[test]
    fn degenerate_ratios_rejected() {
        assert!(sample_mask(64, 0.0, 0).is_err());
        assert!(sample_mask(64, 1.0, 0).is_err());
        assert!(sample_mask(1, 0.5, 0).is_err());
        // round(0.99 * 4) = 4 leaves nothing visible.
        assert!(sample_mask(4, 0.99, 0).is_err());
        assert!(sample_mask(4, 0.01, 0).is_err());
    }

    #[test]
    fn visibility_frequency_is_uniform() {
        let mut hits = [0usize; 64];
        let draws = 10_000;
        for seed in 0..draws {
            for &i in &sample_mask(64, 0.75, seed).unwrap().visible {
                hits[i] += 1;
            }
        }
        for h in hits {
            let f = h as f64 / draws as f64;
            assert!((f - 0.25).abs() <= 0.02, "frequency {f}");
        }
    }
}
