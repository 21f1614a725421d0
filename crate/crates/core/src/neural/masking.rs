//! Dynamic token masking for masked language modelling.

use rand::Rng as _;
use rand::SeedableRng;

use super::tokenizer::{EncodedSeq, MASK_ID, NUM_SPECIAL};
use super::Rng;

/// Label value at positions that were not selected.
pub const IGNORE_LABEL: i64 = -100;
pub const DEFAULT_MASK_PROB: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSeq {
    pub input: EncodedSeq,
    /// Original id at selected positions, [`IGNORE_LABEL`] elsewhere.
    pub labels: Vec<i64>,
}

impl MaskedSeq {
    pub fn selected(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE_LABEL).count()
    }
}

/// Selects each non-special, unpadded position with probability `mask_prob`;
/// selected positions become `[MASK]` (80%), a random non-special token (10%)
/// or stay as they are (10%).
pub fn mask_sequence(
    seq: &EncodedSeq,
    vocab_size: usize,
    mask_prob: f64,
    rng: &mut Rng,
) -> MaskedSeq {
    let mut input = seq.clone();
    let mut labels = vec![IGNORE_LABEL; seq.ids.len()];
    if mask_prob <= 0.0 {
        return MaskedSeq { input, labels };
    }
    for i in 0..seq.ids.len() {
        let id = seq.ids[i];
        if seq.mask[i] == 0 || id < NUM_SPECIAL {
            continue;
        }
        if rng.random::<f64>() >= mask_prob {
            continue;
        }
        labels[i] = id as i64;
        let roll = rng.random::<f64>();
        if roll < 0.8 {
            input.ids[i] = MASK_ID;
        } else if roll < 0.9 && vocab_size > NUM_SPECIAL as usize {
            input.ids[i] = rng.random_range(NUM_SPECIAL..vocab_size as u32);
        }
    }
    MaskedSeq { input, labels }
}

/// Masks a batch under a fresh generator seeded with `seed`. Pass a
/// different seed every epoch for dynamic masking.
pub fn mask_tokens(
    batch: &[EncodedSeq],
    vocab_size: usize,
    seed: u64,
    mask_prob: f64,
) -> Vec<MaskedSeq> {
    let mut rng = Rng::seed_from_u64(seed);
    batch
        .iter()
        .map(|s| mask_sequence(s, vocab_size, mask_prob, &mut rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::tokenizer::{encode_pair, Vocab, CLS_ID, PAD_ID, SEP_ID};

    fn seqs() -> (Vec<EncodedSeq>, usize) {
        let v = Vocab::build(["the cab to the station leaves at noon"], 1).unwrap();
        let s = encode_pair(
            "the cab to the station",
            Some("leaves at noon"),
            &v,
            16,
            None,
        );
        (vec![s; 50], v.len())
    }

    #[test]
    fn zero_probability_is_identity() {
        let (batch, v) = seqs();
        for m in mask_tokens(&batch, v, 3, 0.0) {
            assert_eq!(m.input, batch[0]);
            assert_eq!(m.selected(), 0);
        }
    }

    #[test]
    fn specials_never_selected() {
        let (batch, v) = seqs();
        for m in mask_tokens(&batch, v, 9, 1.0) {
            for (i, &id) in batch[0].ids.iter().enumerate() {
                if [CLS_ID, SEP_ID, PAD_ID].contains(&id) {
                    assert_eq!(m.labels[i], IGNORE_LABEL);
                } else {
                    assert_eq!(m.labels[i], id as i64);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_masks() {
        let (batch, v) = seqs();
        assert_eq!(
            mask_tokens(&batch, v, 4, 0.15),
            mask_tokens(&batch, v, 4, 0.15)
        );
    }
}
