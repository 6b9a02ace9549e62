//! Dynamic masking for masked-language-model batches.
//!
//! Every non-special position is selected independently with probability
//! `mlm_probability`. A second draw decides what a selected position becomes:
//! the mask token, a uniformly random non-special id, or itself. Labels carry the
//! original id at selected positions and [`IGNORE_INDEX`] elsewhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{TokenizerModel, MASK_ID, NUM_SPECIALS, PAD_ID};
use crate::config::ConfigError;

pub const IGNORE_INDEX: i64 = -100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub mlm_probability: f64,
    pub mask_token_id: u32,
    /// Random replacements are drawn from `NUM_SPECIALS..vocab_size`.
    pub vocab_size: usize,
    pub rng_seed: u64,
    /// (mask, random, keep)
    pub proportions: [f64; 3],
}

impl MaskingConfig {
    pub const DEFAULT_PROPORTIONS: [f64; 3] = [0.8, 0.1, 0.1];

    pub fn new(mlm_probability: f64, vocab_size: usize, rng_seed: u64) -> Self {
        Self {
            mlm_probability,
            mask_token_id: MASK_ID,
            vocab_size,
            rng_seed,
            proportions: Self::DEFAULT_PROPORTIONS,
        }
    }

    pub fn with_proportions(mut self, proportions: [f64; 3]) -> Self {
        self.proportions = proportions;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.mlm_probability) {
            return Err(ConfigError::invalid("mlm_probability", "must be in [0, 1]"));
        }
        if self.proportions.iter().any(|p| !(0.0..=1.0).contains(p))
            || (self.proportions.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(ConfigError::invalid("proportions", "must be non-negative and sum to 1"));
        }
        if self.vocab_size <= NUM_SPECIALS {
            return Err(ConfigError::invalid("vocab_size", "needs at least one non-special token"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedSequence {
    pub input_ids: Vec<u32>,
    pub labels: Vec<i64>,
}

fn mask_with(ids: &[u32], cfg: &MaskingConfig, rng: &mut ChaCha8Rng) -> MaskedSequence {
    let [mask_p, random_p, _] = cfg.proportions;
    let mut input_ids = ids.to_vec();
    let mut labels = vec![IGNORE_INDEX; ids.len()];
    for (i, &id) in ids.iter().enumerate() {
        if TokenizerModel::is_special(id) {
            continue;
        }
        if rng.random::<f64>() >= cfg.mlm_probability {
            continue;
        }
        labels[i] = i64::from(id);
        let action: f64 = rng.random();
        if action < mask_p {
            input_ids[i] = cfg.mask_token_id;
        } else if action < mask_p + random_p {
            input_ids[i] = rng.random_range(NUM_SPECIALS as u32..cfg.vocab_size as u32);
        }
    }
    MaskedSequence { input_ids, labels }
}

/// Mask one sequence. Deterministic in `cfg.rng_seed`.
pub fn mask_tokens(ids: &[u32], cfg: &MaskingConfig) -> Result<MaskedSequence, ConfigError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    Ok(mask_with(ids, cfg, &mut rng))
}

/// Mask several sequences from one seeded stream, without padding.
pub fn mask_batch(batch: &[Vec<u32>], cfg: &MaskingConfig) -> Result<Vec<MaskedSequence>, ConfigError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    Ok(batch.iter().map(|ids| mask_with(ids, cfg, &mut rng)).collect())
}

/// Pads a batch and re-draws masks on every call (RoBERTa-style dynamic masking):
/// the stream for epoch `e` is seeded from `(rng_seed, e)`.
#[derive(Debug, Clone)]
pub struct MaskingCollator {
    cfg: MaskingConfig,
}

impl MaskingCollator {
    pub fn new(cfg: MaskingConfig) -> Result<Self, ConfigError> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn collate(&self, batch: &[Vec<u32>], epoch: u64) -> Vec<MaskedSequence> {
        let width = batch.iter().map(Vec::len).max().unwrap_or(0);
        let seed = self.cfg.rng_seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        batch
            .iter()
            .map(|ids| {
                let mut padded = ids.clone();
                padded.resize(width, PAD_ID);
                mask_with(&padded, &self.cfg, &mut rng)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{BOS_ID, EOS_ID};

    fn seq(n: usize) -> Vec<u32> {
        let mut v = vec![BOS_ID];
        v.extend((0..n).map(|i| 5 + (i % 200) as u32));
        v.push(EOS_ID);
        v
    }

    #[test]
    fn zero_probability_is_identity() {
        let ids = seq(50);
        let out = mask_tokens(&ids, &MaskingConfig::new(0.0, 300, 1)).unwrap();
        assert_eq!(out.input_ids, ids);
        assert!(out.labels.iter().all(|&l| l == IGNORE_INDEX));
    }

    #[test]
    fn full_probability_with_pure_mask() {
        let ids = seq(50);
        let cfg = MaskingConfig::new(1.0, 300, 1).with_proportions([1.0, 0.0, 0.0]);
        let out = mask_tokens(&ids, &cfg).unwrap();
        assert_eq!(out.input_ids[0], BOS_ID);
        assert_eq!(*out.input_ids.last().unwrap(), EOS_ID);
        for i in 1..ids.len() - 1 {
            assert_eq!(out.input_ids[i], MASK_ID);
            assert_eq!(out.labels[i], i64::from(ids[i]));
        }
        assert_eq!(out.labels[0], IGNORE_INDEX);
    }

    #[test]
    fn seed_determinism() {
        let ids = seq(500);
        let cfg = MaskingConfig::new(0.15, 300, 9);
        assert_eq!(mask_tokens(&ids, &cfg).unwrap(), mask_tokens(&ids, &cfg).unwrap());
        let other = MaskingConfig::new(0.15, 300, 10);
        assert_ne!(mask_tokens(&ids, &cfg).unwrap(), mask_tokens(&ids, &other).unwrap());
    }

    #[test]
    fn rejects_bad_config() {
        assert!(mask_tokens(&[5], &MaskingConfig::new(1.5, 300, 0)).is_err());
        assert!(mask_tokens(&[5], &MaskingConfig::new(0.1, 300, 0).with_proportions([0.5, 0.1, 0.1])).is_err());
    }

    #[test]
    fn batch_keeps_lengths_and_matches_single_for_first() {
        let cfg = MaskingConfig::new(0.3, 300, 4);
        let batch = vec![seq(20), seq(7)];
        let out = mask_batch(&batch, &cfg).unwrap();
        assert_eq!(out[1].input_ids.len(), 9);
        assert_eq!(out[0], mask_tokens(&batch[0], &cfg).unwrap());
        assert_eq!(out, mask_batch(&batch, &cfg).unwrap());
    }

    #[test]
    fn collator_pads_and_redraws_per_epoch() {
        let c = MaskingCollator::new(MaskingConfig::new(0.5, 300, 3)).unwrap();
        let batch = vec![seq(10), seq(3)];
        let e0 = c.collate(&batch, 0);
        assert_eq!(e0[1].input_ids.len(), e0[0].input_ids.len());
        assert_eq!(&e0[1].input_ids[5..], &[PAD_ID; 7]);
        assert!(e0[1].labels[5..].iter().all(|&l| l == IGNORE_INDEX));
        assert_eq!(e0, c.collate(&batch, 0));
        let big = vec![seq(400)];
        assert_ne!(c.collate(&big, 0), c.collate(&big, 1));
    }
}
